"""Quick check that the extension imports and its main entry points work.

Run after `maturin develop --release`. Training runs only when MNIST has been
fetched (`optbp fetch mnist`).
"""

import math
import os
import sys
import tempfile

import optbp


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    e = 0.7
    assert close(optbp.sa_forward(e, 10.0), e * math.exp(-5.0 / (1 + e * e)))
    assert close(optbp.sa_derivative_optical(e, 10.0), math.exp(-5.0 / (1 + e * e)))
    assert optbp.gs_forward(e, 3.0) > e

    nl = optbp.Nonlinearity("sa", 10.0, "optical")
    assert nl.backward(e) == optbp.sa_derivative_optical(e, 10.0)
    assert nl.exact_derivative(e) > nl.backward(e)
    try:
        optbp.Nonlinearity("relu", deriv="optical")
    except ValueError as err:
        assert "deriv" in str(err)
    else:
        raise AssertionError("optical backward accepted for relu")

    curve = optbp.optical_error_curve([1.0, 10.0, 50.0])
    assert curve == sorted(curve) and 0.05 <= curve[-1] <= 0.15, curve

    table = optbp.random_derivative(seed=3, alpha0=10.0, target=0.2)
    assert abs(optbp.approximation_error(table, 10.0) - 0.2) < 0.01

    lower, upper, _ = optbp.gain_bounds([[1.0, 1.0], [0.0, 1.0]])
    assert close(lower, 2.0) and close(upper, (3 + math.sqrt(5)) / 2, 1e-6), (lower, upper)

    net = optbp.Network("fc1", nl, seed=1)
    x = [0.0] * (2 * 28 * 28)
    logits = net.forward(x, 2)
    assert len(logits) == 2 and len(logits[0]) == net.output_size
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "net.json")
        net.save(path)
        again = optbp.Network.load(path)
        assert again.forward(x, 2) == logits

    try:
        data = optbp.Dataset.load("mnist")
    except OSError as err:
        print(f"skipping training: {err}")
    else:
        data.limit_train(2000)
        record = net.fit(data, epochs=2)
        print(f"2 epochs on 2000 samples: test accuracy {record['test_accuracy']:.4f}")
        assert record["test_accuracy"] > 0.5

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
