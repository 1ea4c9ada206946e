//! Central finite-difference gradients for checking backpropagation.

use crate::error::Result;
use crate::network::{output_error, LossKind, Network};
use crate::tensor::Tensor;

/// Batch-mean loss of `net` on `(x, target)`.
pub fn loss(net: &mut Network<f64>, x: &Tensor<f64>, target: &Tensor<f64>, kind: LossKind) -> Result<f64> {
    let z = net.infer(x)?;
    Ok(output_error(&z, target, kind)?.0)
}

/// `(L(w + h) − L(w − h)) / 2h` for every weight, in layer order.
pub fn numeric_gradients(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    kind: LossKind,
    h: f64,
) -> Result<Vec<Tensor<f64>>> {
    let shapes: Vec<Vec<usize>> = net.weights().iter().map(|w| w.shape().to_vec()).collect();
    let mut grads = Vec::with_capacity(shapes.len());
    for (layer, shape) in shapes.into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = net.weights()[layer].data()[i];
            net.weights_mut()[layer].data_mut()[i] = orig + h;
            let up = loss(net, x, target, kind)?;
            net.weights_mut()[layer].data_mut()[i] = orig - h;
            let down = loss(net, x, target, kind)?;
            net.weights_mut()[layer].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        grads.push(Tensor::new(shape, g)?);
    }
    Ok(grads)
}

/// Backpropagated gradients of the batch-mean loss.
pub fn analytic_gradients(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    kind: LossKind,
) -> Result<Vec<Tensor<f64>>> {
    let z = net.forward(x)?;
    let (_, delta) = output_error(&z, target, kind)?;
    net.backward(&delta)
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)` over all tensors.
pub fn max_relative_error(a: &[Tensor<f64>], b: &[Tensor<f64>], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&p, &q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max)
}
