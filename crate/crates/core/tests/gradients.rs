use optbp::gradcheck::{analytic_gradients, max_relative_error, numeric_gradients};
use optbp::network::{one_hot, output_error};
use optbp::nonlinearity::sa_derivative_optical;
use optbp::{DerivativeMode, Kind, LayerKind, LossKind, Network, NonlinearitySpec, PoolMode, Rng, Tensor};

const TOL: f64 = 1e-4;

fn random_net(input: Vec<usize>, layers: Vec<LayerKind>, seed: u64, std: f64) -> Network<f64> {
    let mut net = Network::new(input, layers).unwrap();
    let mut rng = Rng::new(seed);
    for w in net.weights_mut() {
        for v in w.data_mut() {
            *v = rng.normal(0.0, std);
        }
    }
    net
}

fn random_input(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.uniform()).collect()).unwrap()
}

fn check(mut net: Network<f64>, x: Tensor<f64>, loss: LossKind) -> f64 {
    let batch = x.shape()[0];
    let labels: Vec<usize> = (0..batch).map(|i| i % net.output_size()).collect();
    let t = one_hot(&labels, net.output_size());
    let analytic = analytic_gradients(&mut net, &x, &t, loss).unwrap();
    let numeric = numeric_gradients(&mut net, &x, &t, loss, 1e-5).unwrap();
    max_relative_error(&analytic, &numeric, 1e-6)
}

fn sa(a0: f64) -> NonlinearitySpec {
    NonlinearitySpec::sa(a0, DerivativeMode::Exact).unwrap()
}

fn act(spec: NonlinearitySpec) -> LayerKind {
    LayerKind::Activation { spec }
}

#[test]
fn dense_stack() {
    for (spec, loss) in [
        (sa(10.0), LossKind::Mse),
        (NonlinearitySpec::gs(3.0, DerivativeMode::Exact).unwrap(), LossKind::Cce),
        (NonlinearitySpec::baseline(Kind::Tanh).unwrap(), LossKind::Cce),
        (NonlinearitySpec::baseline(Kind::Sigmoid).unwrap(), LossKind::Mse),
    ] {
        let net = random_net(
            vec![6],
            vec![
                LayerKind::Dense { inputs: 6, outputs: 5 },
                act(spec.clone()),
                LayerKind::Dense { inputs: 5, outputs: 4 },
                act(spec.clone()),
                LayerKind::Dense { inputs: 4, outputs: 3 },
            ],
            7,
            0.8,
        );
        let err = check(net, random_input(vec![4, 6], 3, 2.0), loss);
        assert!(err < TOL, "{:?}: {err}", spec.kind());
    }
}

fn conv_net(pool: PoolMode, seed: u64) -> Network<f64> {
    random_net(
        vec![2, 8, 8],
        vec![
            LayerKind::Conv { c_in: 2, c_out: 3, kh: 5, kw: 5 },
            act(sa(5.0)),
            LayerKind::Pool { mode: pool },
            LayerKind::Flatten,
            LayerKind::Dense { inputs: 12, outputs: 3 },
        ],
        seed,
        0.4,
    )
}

#[test]
fn conv_mean_pool() {
    let err = check(conv_net(PoolMode::Mean, 11), random_input(vec![3, 2, 8, 8], 5, 1.0), LossKind::Mse);
    assert!(err < TOL, "{err}");
}

#[test]
fn conv_max_pool() {
    let err = check(conv_net(PoolMode::Max, 12), random_input(vec![3, 2, 8, 8], 6, 1.0), LossKind::Cce);
    assert!(err < TOL, "{err}");
}

#[test]
fn stacked_conv() {
    let net = random_net(
        vec![1, 12, 12],
        vec![
            LayerKind::Conv { c_in: 1, c_out: 2, kh: 5, kw: 5 },
            act(NonlinearitySpec::baseline(Kind::Tanh).unwrap()),
            LayerKind::Conv { c_in: 2, c_out: 2, kh: 5, kw: 5 },
            act(sa(2.0)),
            LayerKind::Pool { mode: PoolMode::Mean },
            LayerKind::Flatten,
            LayerKind::Dense { inputs: 8, outputs: 2 },
        ],
        21,
        0.4,
    );
    let err = check(net, random_input(vec![2, 1, 12, 12], 9, 1.0), LossKind::Mse);
    assert!(err < TOL, "{err}");
}

#[test]
fn optical_backward_is_probe_substitution() {
    let a0 = 10.0;
    let layers = |mode: DerivativeMode| {
        let spec = NonlinearitySpec::sa(a0, mode).unwrap();
        vec![
            LayerKind::Conv { c_in: 1, c_out: 2, kh: 5, kw: 5 },
            act(spec.clone()),
            LayerKind::Pool { mode: PoolMode::Mean },
            LayerKind::Flatten,
            LayerKind::Dense { inputs: 8, outputs: 6 },
            act(spec),
            LayerKind::Dense { inputs: 6, outputs: 3 },
        ]
    };
    let mut optical = random_net(vec![1, 8, 8], layers(DerivativeMode::OpticalApprox), 4, 0.5);
    let mut oracle = random_net(vec![1, 8, 8], layers(DerivativeMode::Exact), 4, 0.5);
    let x = random_input(vec![5, 1, 8, 8], 2, 3.0);
    let t = one_hot(&[0, 1, 2, 0, 1], 3);
    let z1 = optical.forward(&x).unwrap();
    let z2 = oracle.forward(&x).unwrap();
    assert_eq!(z1.data(), z2.data());
    let (_, d1) = output_error(&z1, &t, LossKind::Mse).unwrap();
    let g1 = optical.backward(&d1).unwrap();
    let g2 = oracle.backward_with(&d1, |_, z| sa_derivative_optical(z, a0)).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn minibatch_gradient_is_mean_of_samples() {
    let mut net = random_net(
        vec![4],
        vec![LayerKind::Dense { inputs: 4, outputs: 3 }, act(sa(1.0)), LayerKind::Dense { inputs: 3, outputs: 2 }],
        1,
        0.7,
    );
    let x = random_input(vec![3, 4], 8, 1.0);
    let t = one_hot(&[0, 1, 1], 2);
    let batch = analytic_gradients(&mut net, &x, &t, LossKind::Mse).unwrap();
    let mut sum: Vec<Tensor<f64>> = batch.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
    for i in 0..3 {
        let xi = Tensor::new(vec![1, 4], x.data()[i * 4..(i + 1) * 4].to_vec()).unwrap();
        let ti = Tensor::new(vec![1, 2], t.data()[i * 2..(i + 1) * 2].to_vec()).unwrap();
        for (s, g) in sum.iter_mut().zip(analytic_gradients(&mut net, &xi, &ti, LossKind::Mse).unwrap()) {
            *s = s.zip_map(&g, |a, b| a + b / 3.0).unwrap();
        }
    }
    assert!(max_relative_error(&batch, &sum, 1e-12) < 1e-12);
}
