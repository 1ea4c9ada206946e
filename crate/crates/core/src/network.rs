//! Layer graph, forward pass, hand-written backward pass and losses.
//!
//! All tensors carry a leading batch axis. Dense layers compute `z = W·a`
//! with `W` stored `outputs × inputs`; there are no biases. Backward through a
//! weighted layer is its adjoint (`Wᵀ·δ`), and each activation layer scales
//! the incoming error by its backward response at the cached pre-activation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonlinearity::{DerivativeMode, NonlinearitySpec};
use crate::tensor::{gemm, pool2d, pool2d_backward, ConvGeom, PoolCache, PoolMode, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv { c_in: usize, c_out: usize, kh: usize, kw: usize },
    Pool { mode: PoolMode },
    Flatten,
    Activation { spec: NonlinearitySpec },
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerKind::Conv { c_in, c_out, kh, kw } => Some(vec![c_out, c_in, kh, kw]),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::dim(format!(
                        "dense layer expects [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv { c_in, c_out, kh, kw } => {
                let g = ConvGeom::new(input, &[c_out, c_in, kh, kw])?;
                Ok(vec![c_out, g.out_h(), g.out_w()])
            }
            LayerKind::Pool { .. } => {
                if input.len() != 3 || !input[1].is_multiple_of(2) || !input[2].is_multiple_of(2) {
                    return Err(Error::dim(format!(
                        "pooling expects C×H×W with even H, W, got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Activation { .. } => Ok(input.to_vec()),
        }
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    Empty,
    /// Input activations of a dense layer.
    Dense(Tensor<T>),
    /// Unfolded input patches of a conv layer, one block per sample.
    Conv { cols: Vec<T>, batch: usize },
    Pool(PoolCache),
    Flatten(Vec<usize>),
    /// Pre-activation `z` of an activation layer.
    Activation(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct LayerState<T = f32> {
    kind: LayerKind,
    weights: Option<Tensor<T>>,
    input_shape: Vec<usize>,
    cache: Cache<T>,
}

impl<T: Scalar> LayerState<T> {
    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn weights(&self) -> Option<&Tensor<T>> {
        self.weights.as_ref()
    }

    pub fn weights_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.weights.as_mut()
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Cce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "cce" => Ok(LossKind::Cce),
            other => Err(Error::validation("loss", format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    input_shape: Vec<usize>,
    output_size: usize,
    layers: Vec<LayerState<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with zero weights; shapes are checked layer by layer.
    pub fn new(input_shape: Vec<usize>, kinds: Vec<LayerKind>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::dim(format!("bad input shape {input_shape:?}")));
        }
        if kinds.is_empty() {
            return Err(Error::validation("layers", "network has no layers"));
        }
        if matches!(kinds.last(), Some(LayerKind::Activation { .. })) {
            return Err(Error::validation(
                "layers",
                "the output layer must be linear; the loss acts on pre-activations",
            ));
        }
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(kinds.len());
        for kind in kinds {
            if let LayerKind::Activation { spec } = &kind {
                spec.validate()?;
            }
            let next = kind.output_shape(&shape)?;
            let weights = kind.weight_shape().map(Tensor::zeros);
            layers.push(LayerState {
                kind,
                weights,
                input_shape: shape,
                cache: Cache::Empty,
            });
            shape = next;
        }
        if shape.len() != 1 {
            return Err(Error::dim(format!(
                "network must end in a vector of logits, got per-sample shape {shape:?}"
            )));
        }
        Ok(Self {
            input_shape,
            output_size: shape[0],
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_size(&self) -> usize {
        self.output_size
    }

    pub fn layers(&self) -> &[LayerState<T>] {
        &self.layers
    }

    pub fn weights(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().filter_map(|l| l.weights.as_ref()).collect()
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().filter_map(|l| l.weights.as_mut()).collect()
    }

    /// Replaces weights in layer order.
    pub fn set_weights(&mut self, weights: Vec<Tensor<T>>) -> Result<()> {
        let slots = self.weights_mut();
        if slots.len() != weights.len() {
            return Err(Error::dim(format!(
                "expected {} weight tensors, got {}",
                slots.len(),
                weights.len()
            )));
        }
        for (slot, w) in slots.into_iter().zip(weights) {
            if slot.shape() != w.shape() {
                return Err(Error::dim(format!(
                    "weight shape {:?}, layer expects {:?}",
                    w.shape(),
                    slot.shape()
                )));
            }
            *slot = w;
        }
        Ok(())
    }

    pub fn activation_specs(&self) -> Vec<&NonlinearitySpec> {
        self.layers
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Activation { spec } => Some(spec),
                _ => None,
            })
            .collect()
    }

    /// Switches every activation layer to `mode`.
    pub fn set_derivative_mode(&mut self, mode: DerivativeMode) -> Result<()> {
        for layer in &mut self.layers {
            if let LayerKind::Activation { spec } = &mut layer.kind {
                *spec = spec.with_derivative(mode.clone())?;
            }
        }
        Ok(())
    }

    /// Pre-activations cached by the last forward pass, one per activation layer.
    pub fn cached_preactivations(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .filter_map(|l| match &l.cache {
                Cache::Activation(z) => Some(z),
                _ => None,
            })
            .collect()
    }

    fn batch_of(&self, input: &Tensor<T>) -> Result<usize> {
        let s = input.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "input shape {s:?} does not match batch × {:?}",
                self.input_shape
            )));
        }
        Ok(s[0])
    }

    /// Forward pass over a batch, caching what backward needs.
    /// Returns the logits `z^(L)` as `batch × output_size`.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.run_forward(input, true)
    }

    /// Forward pass without touching caches.
    pub fn infer(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.run_forward(input, false)
    }

    fn run_forward(&mut self, input: &Tensor<T>, keep: bool) -> Result<Tensor<T>> {
        let batch = self.batch_of(input)?;
        let mut a = input.clone();
        for layer in &mut self.layers {
            let (out, cache) = layer_forward(layer, a, batch)?;
            layer.cache = if keep { cache } else { Cache::Empty };
            a = out;
        }
        Ok(a)
    }

    /// Every layer's output for a batch; element `i` is the output of layer `i`.
    pub fn trace(&mut self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let batch = self.batch_of(input)?;
        let mut a = input.clone();
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (out, _) = layer_forward(layer, a, batch)?;
            outs.push(out.clone());
            a = out;
        }
        Ok(outs)
    }

    /// Backpropagates `delta_l` (the loss gradient with respect to the logits)
    /// and returns one gradient per weighted layer, in layer order.
    pub fn backward(&mut self, delta_l: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.backward_with(delta_l, |spec, z| spec.backward_response(z))
    }

    /// Like [`backward`](Self::backward), with the activation response supplied by the caller.
    pub fn backward_with(
        &mut self,
        delta_l: &Tensor<T>,
        response: impl Fn(&NonlinearitySpec, T) -> T,
    ) -> Result<Vec<Tensor<T>>> {
        let mut grads: Vec<Tensor<T>> = Vec::new();
        let mut delta = delta_l.clone();
        let batch = delta.shape()[0];
        if delta.shape() != [batch, self.output_size] {
            return Err(Error::dim(format!(
                "output error shape {:?}, expected [batch, {}]",
                delta.shape(),
                self.output_size
            )));
        }
        for (idx, layer) in self.layers.iter_mut().enumerate().rev() {
            let need_input_grad = idx > 0;
            let (next, grad) = layer_backward(layer, delta, batch, need_input_grad, &response)?;
            if let Some(g) = grad {
                grads.push(g);
            }
            delta = next;
        }
        grads.reverse();
        Ok(grads)
    }

    /// Predicted class per sample: argmax of the logits, lowest index on ties.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.infer(input)?;
        Ok(logits
            .data()
            .chunks(self.output_size)
            .map(crate::tensor::argmax)
            .collect())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            output_size: self.output_size,
            layers: self
                .layers
                .iter()
                .map(|l| LayerState {
                    kind: l.kind.clone(),
                    weights: l.weights.as_ref().map(|w| w.cast()),
                    input_shape: l.input_shape.clone(),
                    cache: Cache::Empty,
                })
                .collect(),
        }
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind.clone()).collect()
    }
}

fn layer_forward<T: Scalar>(
    layer: &LayerState<T>,
    a: Tensor<T>,
    batch: usize,
) -> Result<(Tensor<T>, Cache<T>)> {
    match &layer.kind {
        LayerKind::Dense { inputs, outputs } => {
            let w = layer.weights.as_ref().expect("dense weights");
            let mut z = vec![T::zero(); batch * outputs];
            gemm(batch, *outputs, *inputs, a.data(), false, w.data(), true, T::zero(), &mut z);
            Ok((Tensor::new(vec![batch, *outputs], z)?, Cache::Dense(a)))
        }
        LayerKind::Conv { c_in, c_out, kh, kw } => {
            let w = layer.weights.as_ref().expect("conv weights");
            let g = ConvGeom::new(&layer.input_shape, &[*c_out, *c_in, *kh, *kw])?;
            let (patch, pos) = (g.patch(), g.positions());
            let mut cols = vec![T::zero(); batch * patch * pos];
            let mut out = vec![T::zero(); batch * g.output_len()];
            for b in 0..batch {
                let xs = &a.data()[b * g.input_len()..(b + 1) * g.input_len()];
                let cs = &mut cols[b * patch * pos..(b + 1) * patch * pos];
                g.im2col(xs, cs);
                let os = &mut out[b * g.output_len()..(b + 1) * g.output_len()];
                gemm(*c_out, pos, patch, w.data(), false, cs, false, T::zero(), os);
            }
            let out = Tensor::new(vec![batch, *c_out, g.out_h(), g.out_w()], out)?;
            Ok((out, Cache::Conv { cols, batch }))
        }
        LayerKind::Pool { mode } => {
            let (out, cache) = pool2d(&a, *mode)?;
            Ok((out, Cache::Pool(cache)))
        }
        LayerKind::Flatten => {
            let shape = a.shape().to_vec();
            let n = a.len() / batch;
            Ok((a.reshape(vec![batch, n])?, Cache::Flatten(shape)))
        }
        LayerKind::Activation { spec } => {
            let out = a.map(|z| spec.forward(z));
            Ok((out, Cache::Activation(a)))
        }
    }
}

type Backward<T> = (Tensor<T>, Option<Tensor<T>>);

fn layer_backward<T: Scalar>(
    layer: &mut LayerState<T>,
    delta: Tensor<T>,
    batch: usize,
    need_input_grad: bool,
    response: &impl Fn(&NonlinearitySpec, T) -> T,
) -> Result<Backward<T>> {
    let missing = || Error::State("backward called before forward".into());
    match (&layer.kind, &layer.cache) {
        (LayerKind::Dense { inputs, outputs }, Cache::Dense(a)) => {
            check_batch(a, batch)?;
            let w = layer.weights.as_ref().expect("dense weights");
            let mut gw = vec![T::zero(); outputs * inputs];
            gemm(*outputs, *inputs, batch, delta.data(), true, a.data(), false, T::zero(), &mut gw);
            let grad = Tensor::new(vec![*outputs, *inputs], gw)?;
            let rho = if need_input_grad {
                let mut r = vec![T::zero(); batch * inputs];
                gemm(batch, *inputs, *outputs, delta.data(), false, w.data(), false, T::zero(), &mut r);
                Tensor::new(vec![batch, *inputs], r)?
            } else {
                delta
            };
            Ok((rho, Some(grad)))
        }
        (LayerKind::Conv { c_in, c_out, kh, kw }, Cache::Conv { cols, batch: cached }) => {
            if *cached != batch {
                return Err(Error::State("cached batch size differs from error batch".into()));
            }
            let w = layer.weights.as_ref().expect("conv weights");
            let g = ConvGeom::new(&layer.input_shape, &[*c_out, *c_in, *kh, *kw])?;
            let (patch, pos) = (g.patch(), g.positions());
            let mut gw = vec![T::zero(); c_out * patch];
            let mut dcols = vec![T::zero(); patch * pos];
            let mut rho = vec![T::zero(); if need_input_grad { batch * g.input_len() } else { 0 }];
            for b in 0..batch {
                let ds = &delta.data()[b * g.output_len()..(b + 1) * g.output_len()];
                let cs = &cols[b * patch * pos..(b + 1) * patch * pos];
                gemm(*c_out, patch, pos, ds, false, cs, true, T::one(), &mut gw);
                if need_input_grad {
                    gemm(patch, pos, *c_out, w.data(), true, ds, false, T::zero(), &mut dcols);
                    g.col2im(&dcols, &mut rho[b * g.input_len()..(b + 1) * g.input_len()]);
                }
            }
            let grad = Tensor::new(vec![*c_out, *c_in, *kh, *kw], gw)?;
            let rho = if need_input_grad {
                let mut shape = vec![batch];
                shape.extend_from_slice(&layer.input_shape);
                Tensor::new(shape, rho)?
            } else {
                delta
            };
            Ok((rho, Some(grad)))
        }
        (LayerKind::Pool { .. }, Cache::Pool(cache)) => Ok((pool2d_backward(&delta, cache)?, None)),
        (LayerKind::Flatten, Cache::Flatten(shape)) => Ok((delta.reshape(shape.clone())?, None)),
        (LayerKind::Activation { spec }, Cache::Activation(z)) => {
            let out = delta.zip_map(z, |d, zv| d * response(spec, zv))?;
            Ok((out, None))
        }
        _ => Err(missing()),
    }
}

fn check_batch<T: Scalar>(a: &Tensor<T>, batch: usize) -> Result<()> {
    if a.shape()[0] != batch {
        return Err(Error::State("cached batch size differs from error batch".into()));
    }
    Ok(())
}

/// Loss averaged over the batch, and `∂loss/∂z^(L)`.
///
/// MSE: `Σ ½(z−t)²`, error `z − t`. CCE: `−Σ t·log softmax(z)`, error `p − t`.
/// Per-sample errors are divided by the batch size so gradients are batch means.
pub fn output_error<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    loss: LossKind,
) -> Result<(f64, Tensor<T>)> {
    if logits.shape() != target.shape() || logits.rank() != 2 {
        return Err(Error::dim(format!(
            "logits {:?} and targets {:?} must be equal batch × classes",
            logits.shape(),
            target.shape()
        )));
    }
    let (batch, n) = (logits.shape()[0], logits.shape()[1]);
    let scale = T::from_f64(1.0 / batch as f64);
    let mut delta = vec![T::zero(); batch * n];
    let mut total = 0.0;
    for b in 0..batch {
        let z = &logits.data()[b * n..(b + 1) * n];
        let t = &target.data()[b * n..(b + 1) * n];
        let d = &mut delta[b * n..(b + 1) * n];
        match loss {
            LossKind::Mse => {
                for i in 0..n {
                    let e = z[i] - t[i];
                    total += 0.5 * e.as_f64() * e.as_f64();
                    d[i] = e * scale;
                }
            }
            LossKind::Cce => {
                check_one_hot(t)?;
                let m = z.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = z.iter().map(|&v| (v - m).exp()).sum();
                let log_sum = sum.ln();
                for i in 0..n {
                    let log_p = z[i] - m - log_sum;
                    if t[i] > T::zero() {
                        total -= log_p.as_f64();
                    }
                    d[i] = (log_p.exp() - t[i]) * scale;
                }
            }
        }
    }
    Ok((total / batch as f64, Tensor::new(vec![batch, n], delta)?))
}

fn check_one_hot<T: Scalar>(t: &[T]) -> Result<()> {
    let ones = t.iter().filter(|&&v| v == T::one()).count();
    let zeros = t.iter().filter(|&&v| v == T::zero()).count();
    if ones != 1 || ones + zeros != t.len() {
        return Err(Error::validation(
            "target",
            "cross-entropy targets must be one-hot",
        ));
    }
    Ok(())
}

/// One-hot rows for `labels`.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (row, &l) in labels.iter().enumerate() {
        data[row * classes + l] = T::one();
    }
    Tensor::new(vec![labels.len().max(1), classes], data).expect("non-empty labels")
}

/// Fixed architectures of the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// 784–128–C.
    Fc1,
    /// 784–128–128–C.
    Fc2,
    /// Two 5×5 conv layers (32, 64 channels), each followed by activation
    /// and 2×2 pooling, then 1024–128–C.
    Conv,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fc1" => Ok(Architecture::Fc1),
            "fc2" => Ok(Architecture::Fc2),
            "conv" => Ok(Architecture::Conv),
            other => Err(Error::validation("arch", format!("unknown preset `{other}`"))),
        }
    }
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Fc1 => "fc1",
            Architecture::Fc2 => "fc2",
            Architecture::Conv => "conv",
        }
    }

    pub fn is_fully_connected(self) -> bool {
        !matches!(self, Architecture::Conv)
    }

    /// Layer list for 28×28 single-channel inputs.
    pub fn layers(self, classes: usize, spec: &NonlinearitySpec, pool: PoolMode) -> Vec<LayerKind> {
        let act = || LayerKind::Activation { spec: spec.clone() };
        let dense = |inputs, outputs| LayerKind::Dense { inputs, outputs };
        match self {
            Architecture::Fc1 => vec![LayerKind::Flatten, dense(784, 128), act(), dense(128, classes)],
            Architecture::Fc2 => vec![
                LayerKind::Flatten,
                dense(784, 128),
                act(),
                dense(128, 128),
                act(),
                dense(128, classes),
            ],
            Architecture::Conv => vec![
                LayerKind::Conv { c_in: 1, c_out: 32, kh: 5, kw: 5 },
                act(),
                LayerKind::Pool { mode: pool },
                LayerKind::Conv { c_in: 32, c_out: 64, kh: 5, kw: 5 },
                act(),
                LayerKind::Pool { mode: pool },
                LayerKind::Flatten,
                dense(1024, 128),
                act(),
                dense(128, classes),
            ],
        }
    }

    pub fn build<T: Scalar>(
        self,
        classes: usize,
        spec: &NonlinearitySpec,
        pool: PoolMode,
    ) -> Result<Network<T>> {
        Network::new(vec![1, 28, 28], self.layers(classes, spec, pool))
    }
}

/// Optical networks can only average; computational baselines use max pooling.
pub fn validate_pooling(spec: &NonlinearitySpec, pool: PoolMode) -> Result<()> {
    match (spec.kind().is_optical(), pool) {
        (true, PoolMode::Max) => Err(Error::validation(
            "pool",
            "optical (sa/gs) networks must use mean pooling",
        )),
        (false, PoolMode::Mean) => Err(Error::validation(
            "pool",
            "computational baselines use max pooling",
        )),
        _ => Ok(()),
    }
}

pub fn default_pooling(spec: &NonlinearitySpec) -> PoolMode {
    if spec.kind().is_optical() {
        PoolMode::Mean
    } else {
        PoolMode::Max
    }
}

pub const CHECKPOINT_FORMAT: &str = "optbp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    #[serde(flatten)]
    kind: LayerKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weights: Option<Tensor<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    seed: u64,
    input_shape: Vec<usize>,
    layers: Vec<CheckpointLayer>,
}

/// JSON container: layer kinds, shapes, weights as 64-bit decimals, and the run seed.
pub fn checkpoint_to_json<T: Scalar>(net: &Network<T>, seed: u64) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        seed,
        input_shape: net.input_shape.clone(),
        layers: net
            .layers
            .iter()
            .map(|l| CheckpointLayer {
                kind: l.kind.clone(),
                weights: l.weights.as_ref().map(|w| w.cast()),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_json<T: Scalar>(s: &str) -> Result<(Network<T>, u64)> {
    let file: CheckpointFile = serde_json::from_str(s)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::validation("format", format!("not a checkpoint: `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::validation(
            "version",
            format!("unsupported checkpoint version {}", file.version),
        ));
    }
    let mut weights = Vec::new();
    let mut kinds = Vec::new();
    for l in file.layers {
        match (l.kind.is_weighted(), l.weights) {
            (true, Some(w)) => weights.push(w.cast()),
            (false, None) => {}
            (true, None) => return Err(Error::validation("weights", "weighted layer without weights")),
            (false, Some(_)) => return Err(Error::validation("weights", "unweighted layer has weights")),
        }
        kinds.push(l.kind);
    }
    let mut net = Network::new(file.input_shape, kinds)?;
    net.set_weights(weights)?;
    Ok((net, file.seed))
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, seed: u64, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(net, seed)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, u64)> {
    checkpoint_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinearity::{sa_forward, Kind};

    fn linear() -> NonlinearitySpec {
        NonlinearitySpec::baseline(Kind::Linear).unwrap()
    }

    fn sa(a0: f64) -> NonlinearitySpec {
        NonlinearitySpec::sa(a0, DerivativeMode::Exact).unwrap()
    }

    #[test]
    fn identity_dense() {
        let mut net: Network<f64> =
            Network::new(vec![2], vec![LayerKind::Dense { inputs: 2, outputs: 2 }]).unwrap();
        net.set_weights(vec![Tensor::identity(2)]).unwrap();
        let z = net.forward(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(z.data(), &[1.0, 0.0]);
    }

    #[test]
    fn dense_sa_dense_composes() {
        let mut net: Network<f64> = Network::new(
            vec![1],
            vec![
                LayerKind::Dense { inputs: 1, outputs: 1 },
                LayerKind::Activation { spec: sa(1.0) },
                LayerKind::Dense { inputs: 1, outputs: 1 },
            ],
        )
        .unwrap();
        net.set_weights(vec![Tensor::filled(vec![1, 1], 2.0), Tensor::filled(vec![1, 1], 1.0)])
            .unwrap();
        let z = net.forward(&Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
        assert!((z.data()[0] - sa_forward(1.0, 1.0)).abs() < 1e-15);
        assert!((z.data()[0] - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn conv_preset_feature_length() {
        let net: Network<f32> = Architecture::Conv.build(10, &sa(10.0), PoolMode::Mean).unwrap();
        let flatten = net
            .layers()
            .iter()
            .position(|l| matches!(l.kind(), LayerKind::Flatten))
            .unwrap();
        assert_eq!(net.layers()[flatten + 1].input_shape(), &[1024]);
        assert_eq!(net.output_size(), 10);
    }

    #[test]
    fn rejects_bad_graphs() {
        assert!(Network::<f32>::new(
            vec![3],
            vec![LayerKind::Dense { inputs: 2, outputs: 2 }]
        )
        .is_err());
        assert!(Network::<f32>::new(
            vec![2],
            vec![
                LayerKind::Dense { inputs: 2, outputs: 2 },
                LayerKind::Activation { spec: linear() }
            ]
        )
        .is_err());
    }

    #[test]
    fn mse_errors() {
        let z = Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let (l, d) = output_error(&z, &z, LossKind::Mse).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(d.data(), &[0.0, 0.0]);
        let t = Tensor::<f64>::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let (l, d) = output_error(&z, &t, LossKind::Mse).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(d.data(), &[1.0, -1.0]);
    }

    #[test]
    fn cce_equal_logits() {
        let z = Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let t = Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let (l, d) = output_error(&z, &t, LossKind::Cce).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn cce_rejects_soft_targets() {
        let z = Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let t = Tensor::<f64>::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(output_error(&z, &t, LossKind::Cce), Err(Error::Validation { .. })));
    }

    #[test]
    fn cce_is_stable_for_large_logits() {
        let z = Tensor::<f32>::new(vec![1, 3], vec![1000.0, 0.0, -1000.0]).unwrap();
        let t = one_hot::<f32>(&[0], 3);
        let (l, d) = output_error(&z, &t, LossKind::Cce).unwrap();
        assert!(l.is_finite() && d.all_finite());
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut net: Network<f64> =
            Network::new(vec![2], vec![LayerKind::Dense { inputs: 2, outputs: 2 }]).unwrap();
        net.set_weights(vec![Tensor::from_rows(&[&[0.3, -0.2], &[0.5, 0.1]])]).unwrap();
        let a = Tensor::new(vec![1, 2], vec![0.7, -1.1]).unwrap();
        let t = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let z = net.forward(&a).unwrap();
        let (_, d) = output_error(&z, &t, LossKind::Mse).unwrap();
        let g = net.backward(&d).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = (z.data()[i] - t.data()[i]) * a.data()[j];
                assert_eq!(g[0].data()[i * 2 + j], want);
            }
        }
    }

    #[test]
    fn backward_needs_forward() {
        let mut net: Network<f64> =
            Network::new(vec![2], vec![LayerKind::Dense { inputs: 2, outputs: 2 }]).unwrap();
        let d = Tensor::zeros(vec![1, 2]);
        assert!(matches!(net.backward(&d), Err(Error::State(_))));
    }

    #[test]
    fn predict_tie_breaks_low() {
        let mut net: Network<f64> =
            Network::new(vec![3], vec![LayerKind::Dense { inputs: 3, outputs: 3 }]).unwrap();
        net.set_weights(vec![Tensor::identity(3)]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.3, 0.2, 0.2, 0.2]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), vec![1, 0]);
    }

    #[test]
    fn pooling_rules() {
        let optical = NonlinearitySpec::sa(10.0, DerivativeMode::OpticalApprox).unwrap();
        let relu = NonlinearitySpec::baseline(Kind::Relu).unwrap();
        assert!(validate_pooling(&optical, PoolMode::Mean).is_ok());
        assert!(validate_pooling(&optical, PoolMode::Max).is_err());
        assert!(validate_pooling(&relu, PoolMode::Max).is_ok());
        assert_eq!(default_pooling(&relu), PoolMode::Max);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net: Network<f32> = Architecture::Fc1.build(10, &sa(10.0), PoolMode::Mean).unwrap();
        let mut rng = crate::Rng::new(1);
        for w in net.weights_mut() {
            for v in w.data_mut() {
                *v = rng.normal(0.0, 0.1) as f32;
            }
        }
        let json = checkpoint_to_json(&net, 99).unwrap();
        let (back, seed): (Network<f32>, u64) = checkpoint_from_json(&json).unwrap();
        assert_eq!(seed, 99);
        assert_eq!(back.layer_kinds(), net.layer_kinds());
        for (a, b) in back.weights().iter().zip(net.weights()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
