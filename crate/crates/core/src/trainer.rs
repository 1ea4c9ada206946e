//! Adam, weight initialization and the validation-checkpointing training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Part, Split};
use crate::error::{Error, Result};
use crate::network::{checkpoint_to_json, one_hot, output_error, Architecture, LossKind, Network};
use crate::nonlinearity::{DerivativeMode, NonlinearitySpec};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// RNG stream used for weight initialization; shuffling uses [`SHUFFLE_STREAM`].
pub const INIT_STREAM: u64 = 0;
pub const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum InitScheme {
    Normal { std: f64 },
    /// Equal mixture of `N(−center, std)` and `N(+center, std)`.
    DoublePeak { std: f64, center: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Normal { std: 0.1 }
    }
}

impl InitScheme {
    /// Double-peak only for fully-connected optical networks deeper than α₀ = 30.
    pub fn for_run(arch: Architecture, spec: &NonlinearitySpec) -> Self {
        if arch.is_fully_connected() && spec.kind().is_optical() && spec.depth() > 30.0 {
            InitScheme::DoublePeak { std: 0.15, center: 0.15 }
        } else {
            InitScheme::default()
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            InitScheme::Normal { std } => rng.normal(0.0, std),
            InitScheme::DoublePeak { std, center } => {
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                rng.normal(sign * center, std)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (std, center) = match *self {
            InitScheme::Normal { std } => (std, 0.0),
            InitScheme::DoublePeak { std, center } => (std, center),
        };
        if !(std.is_finite() && std > 0.0 && center.is_finite()) {
            return Err(Error::validation("init_scheme", "width must be positive and finite"));
        }
        Ok(())
    }
}

/// Draws every weight i.i.d. from `scheme`, layer by layer in order.
pub fn init_weights<T: Scalar>(net: &mut Network<T>, scheme: &InitScheme, rng: &mut Rng) {
    for w in net.weights_mut() {
        for v in w.data_mut() {
            *v = T::from_f64(scheme.sample(rng));
        }
    }
}

/// Input scale for a run: 1 except for convolutional SA networks.
pub fn default_input_scale(arch: Architecture, spec: &NonlinearitySpec) -> f64 {
    if arch.is_fully_connected() || !spec.kind().is_optical() {
        1.0
    } else if spec.depth() <= 10.0 {
        5.0
    } else {
        15.0
    }
}

/// Epochs used when none are given.
pub fn default_epochs(arch: Architecture, spec: &NonlinearitySpec) -> usize {
    match arch {
        Architecture::Conv if spec.kind().is_optical() => 40,
        Architecture::Conv => 20,
        _ => 50,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init_scheme: InitScheme,
    pub input_scale: f64,
    pub seed: u64,
    pub derivative_mode: DerivativeMode,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 64,
            epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_scheme: InitScheme::default(),
            input_scale: 1.0,
            seed: 0,
            derivative_mode: DerivativeMode::Exact,
            loss: LossKind::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::validation("adam_eps", "must be positive"));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::validation("input_scale", "must be positive"));
        }
        self.init_scheme.validate()
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// One bias-corrected Adam update of `w` at step `t ≥ 1`.
pub fn adam_update<T: Scalar>(w: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, p: &AdamParams) {
    assert!(t >= 1, "adam step counts from 1");
    let (b1, b2) = (T::from_f64(p.beta1), T::from_f64(p.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::from_f64(1.0 - p.beta1.powf(t as f64));
    let bc2 = T::from_f64(1.0 - p.beta2.powf(t as f64));
    let (lr, eps) = (T::from_f64(p.learning_rate), T::from_f64(p.eps));
    for i in 0..w.len() {
        m[i] = b1 * m[i] + c1 * g[i];
        v[i] = b2 * v[i] + c2 * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam moments for a list of weight tensors.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    params: AdamParams,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: AdamParams) -> Self {
        Self { params, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, weights: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if weights.len() != grads.len() {
            return Err(Error::dim(format!("{} weights, {} gradients", weights.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = weights.iter().map(|w| vec![T::zero(); w.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        for (i, (w, g)) in weights.into_iter().zip(grads).enumerate() {
            if w.shape() != g.shape() || self.m[i].len() != w.len() {
                return Err(Error::dim(format!("gradient {:?} for weight {:?}", g.shape(), w.shape())));
            }
            adam_update(w.data_mut(), g.data(), &mut self.m[i], &mut self.v[i], self.t, &self.params);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_accuracy: f64,
    /// Seconds; excluded from the determinism contract.
    pub wall_time: f64,
}

impl RunRecord {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "val_acc"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.loss.to_string(), e.val_acc.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Where the trainer sends best-so-far checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub checkpoint: Option<PathBuf>,
    /// Batch size for accuracy evaluation.
    pub eval_batch: Option<usize>,
}

/// Fraction of `indices` in `part` classified correctly.
pub fn accuracy<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    part: Part,
    indices: &[usize],
    scale: f64,
    eval_batch: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::validation("indices", "cannot evaluate on an empty set"));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(eval_batch.max(1)) {
        let x = data.images::<T>(part, chunk, scale);
        let pred = net.predict(&x)?;
        let labels = data.batch_labels(part, chunk);
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// One minibatch step; returns the batch-mean loss.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    x: &Tensor<T>,
    target: &Tensor<T>,
    loss: LossKind,
) -> Result<f64> {
    let z = net.forward(x)?;
    let (l, delta) = output_error(&z, target, loss)?;
    let grads = net.backward(&delta)?;
    adam.step(net.weights_mut(), &grads)?;
    Ok(l)
}

/// Trains an initialized network and returns its record. On return `net` holds
/// the weights of the best validation epoch, which also produced `test_accuracy`.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    split: &Split,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<RunRecord> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::validation("split", "empty training set"));
    }
    if net.output_size() != data.n_classes() {
        return Err(Error::validation(
            "network",
            format!("{} outputs for {} classes", net.output_size(), data.n_classes()),
        ));
    }
    net.set_derivative_mode(config.derivative_mode.clone())?;
    let started = Instant::now();
    let eval_batch = options.eval_batch.unwrap_or(500);
    let mut rng = Rng::new(config.seed).derive(SHUFFLE_STREAM);
    let mut adam = Adam::new(config.adam());
    let mut order = split.train.clone();
    let mut record = RunRecord {
        seed: config.seed,
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_acc: f64::NEG_INFINITY,
        test_accuracy: f64::NAN,
        wall_time: 0.0,
    };
    let mut best: Vec<Tensor<T>> = net.weights().into_iter().cloned().collect();
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = data.images::<T>(Part::Train, chunk, config.input_scale);
            let t = one_hot::<T>(&data.batch_labels(Part::Train, chunk), data.n_classes());
            let l = train_step(net, &mut adam, &x, &t, config.loss)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became {l} at epoch {epoch}, step {}; try a smaller learning rate",
                    adam.steps()
                )));
            }
            total += l * chunk.len() as f64;
        }
        let loss = total / order.len() as f64;
        let val_acc = accuracy(net, data, Part::Test, &split.validation, config.input_scale, eval_batch)?;
        log::info!("epoch {epoch}: loss {loss:.6} val_acc {val_acc:.4}");
        if val_acc > record.best_val_acc {
            record.best_val_acc = val_acc;
            record.best_epoch = epoch;
            best = net.weights().into_iter().cloned().collect();
            if let Some(path) = &options.checkpoint {
                std::fs::write(path, checkpoint_to_json(net, config.seed)?)?;
            }
        }
        record.epochs.push(EpochStats { epoch, loss, val_acc });
    }
    net.set_weights(best)?;
    record.test_accuracy = accuracy(net, data, Part::Test, &split.test, config.input_scale, eval_batch)?;
    record.wall_time = started.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinearity::Kind;

    #[test]
    fn zero_gradient_leaves_weights() {
        let p = AdamParams::default();
        let mut w = vec![0.3f64, -1.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..=100 {
            adam_update(&mut w, &[0.0, 0.0], &mut m, &mut v, t, &p);
        }
        assert_eq!(w, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = AdamParams::default();
        let mut w = vec![1.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut w, &[1.0], &mut m, &mut v, 1, &p);
        assert!((w[0] - (1.0 - 5e-4)).abs() < 1e-11);
    }

    #[test]
    fn init_choice() {
        let sa = |a| NonlinearitySpec::sa(a, DerivativeMode::OpticalApprox).unwrap();
        assert_eq!(InitScheme::for_run(Architecture::Fc2, &sa(30.0)), InitScheme::default());
        assert!(matches!(
            InitScheme::for_run(Architecture::Fc2, &sa(31.0)),
            InitScheme::DoublePeak { .. }
        ));
        assert_eq!(InitScheme::for_run(Architecture::Conv, &sa(50.0)), InitScheme::default());
        let relu = NonlinearitySpec::baseline(Kind::Relu).unwrap();
        assert_eq!(InitScheme::for_run(Architecture::Fc1, &relu), InitScheme::default());
    }

    #[test]
    fn input_scales_and_epochs() {
        let sa = |a| NonlinearitySpec::sa(a, DerivativeMode::OpticalApprox).unwrap();
        let relu = NonlinearitySpec::baseline(Kind::Relu).unwrap();
        assert_eq!(default_input_scale(Architecture::Fc1, &sa(50.0)), 1.0);
        assert_eq!(default_input_scale(Architecture::Conv, &sa(10.0)), 5.0);
        assert_eq!(default_input_scale(Architecture::Conv, &sa(10.5)), 15.0);
        assert_eq!(default_input_scale(Architecture::Conv, &relu), 1.0);
        assert_eq!(default_epochs(Architecture::Conv, &relu), 20);
        assert_eq!(default_epochs(Architecture::Conv, &sa(10.0)), 40);
        assert_eq!(default_epochs(Architecture::Fc2, &relu), 50);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Validation { field, .. }) if field == "learning_rate"));
        let bad = TrainConfig { adam_beta2: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
