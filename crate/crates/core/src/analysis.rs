//! Derivative similarity metric, random derivatives, robustness study,
//! neuron-input statistics and amplifier gain bounds.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Part, Split};
use crate::error::{Error, Result};
use crate::network::{Architecture, Network};
use crate::nonlinearity::{sa_derivative_exact, sa_derivative_optical, DerivativeMode, DerivativeTable, NonlinearitySpec};
use crate::rng::Rng;
use crate::tensor::{PoolMode, Scalar, Tensor};
use crate::trainer::{init_weights, train, TrainConfig, TrainOptions, INIT_STREAM};

/// Composite Simpson rule with `points` (odd, ≥ 3) samples on `[a, b]`.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, points: usize) -> Result<f64> {
    if points < 3 || points.is_multiple_of(2) {
        return Err(Error::validation("points", "Simpson needs an odd count ≥ 3"));
    }
    let n = points - 1;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    Ok(acc * h / 3.0)
}

/// Probe transmission of the absorber at field `z`.
fn probe(z: f64, alpha0: f64) -> f64 {
    sa_derivative_optical(z, alpha0)
}

/// Half-width of the unsaturated region: the positive field at which the probe
/// transmission is halfway between its floor `exp(−α₀/2)` and 1.
/// Found by bisection to 1e-10; α₀ = 0 returns the continuous limit 1.
pub fn region_sigma(alpha0: f64) -> Result<f64> {
    if !(alpha0.is_finite() && alpha0 >= 0.0) {
        return Err(Error::validation("alpha0", "must be finite and non-negative"));
    }
    if alpha0 == 0.0 {
        return Ok(1.0);
    }
    let target = 0.5 * ((-alpha0 / 2.0).exp() + 1.0);
    let mut hi = 1.0;
    while probe(hi, alpha0) < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Numeric("region boundary bracket diverged".into()));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if probe(mid, alpha0) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub alpha0: f64,
    pub sigma: f64,
    /// Integration runs over `[−half_range, half_range]`.
    pub half_range: f64,
    pub points: usize,
}

impl SimilarityConfig {
    /// σ from [`region_sigma`], range ±4σ, 2001 points.
    pub fn for_alpha(alpha0: f64) -> Result<Self> {
        let sigma = region_sigma(alpha0)?;
        Ok(Self {
            alpha0,
            sigma,
            half_range: 4.0 * sigma,
            points: 2001,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::validation("sigma", "must be positive"));
        }
        if !(self.half_range.is_finite() && self.half_range > 0.0) {
            return Err(Error::validation("half_range", "must be positive"));
        }
        if self.points < 3 || self.points.is_multiple_of(2) {
            return Err(Error::validation("points", "must be odd and at least 3"));
        }
        Ok(())
    }
}

/// `S = |∫f g′ p|² / (∫f² p · ∫g′² p)` against the exact SA derivative `g′`
/// under a zero-mean Gaussian `p` of width σ.
pub fn similarity(f: impl Fn(f64) -> f64, config: &SimilarityConfig) -> Result<f64> {
    config.validate()?;
    let (a0, s) = (config.alpha0, config.sigma);
    let p = |z: f64| (-0.5 * (z / s).powi(2)).exp();
    let g = |z: f64| sa_derivative_exact(z, a0);
    let r = config.half_range;
    let n = config.points;
    let fg = simpson(|z| f(z) * g(z) * p(z), -r, r, n)?;
    let ff = simpson(|z| f(z) * f(z) * p(z), -r, r, n)?;
    let gg = simpson(|z| g(z) * g(z) * p(z), -r, r, n)?;
    let denom = ff * gg;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Degenerate("candidate derivative vanishes on the support".into()));
    }
    Ok((fg * fg / denom).min(1.0))
}

/// `1 − S`.
pub fn approximation_error(f: impl Fn(f64) -> f64, config: &SimilarityConfig) -> Result<f64> {
    Ok(1.0 - similarity(f, config)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub alpha0: f64,
    pub sigma: f64,
    pub error: f64,
}

/// Error of the probe-response approximation for each optical depth.
pub fn optical_error_curve(alphas: &[f64]) -> Result<Vec<ErrorPoint>> {
    alphas
        .iter()
        .map(|&a0| {
            let cfg = SimilarityConfig::for_alpha(a0)?;
            let error = approximation_error(|z| probe(z, a0), &cfg)?;
            Ok(ErrorPoint { alpha0: a0, sigma: cfg.sigma, error })
        })
        .collect()
}

/// Rejection-sampling target for [`random_derivative`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetError {
    pub error: f64,
    pub tolerance: f64,
    pub budget: usize,
    pub similarity: SimilarityConfig,
}

impl TargetError {
    pub fn new(error: f64, similarity: SimilarityConfig) -> Self {
        Self { error, tolerance: 0.01, budget: 10_000, similarity }
    }
}

/// Random symmetric derivative on `2·n_points` mirrored knots.
///
/// Knot values are uniform in [0, 1] at abscissae `(k + ½)·h`, `h = half_domain / n_points`.
/// The values are sorted to rise with |z| and then scrambled by `⌊d³·2n⌋` random
/// transpositions with `d ~ U[0, 1]`, so draws range from near-faithful to
/// fully shuffled. The interpolant is shape-preserving and clamped outside the knots.
pub fn random_derivative(
    rng: &mut Rng,
    n_points: usize,
    half_domain: f64,
    target: Option<&TargetError>,
) -> Result<DerivativeTable> {
    if n_points < 4 {
        return Err(Error::validation("n_points", "need at least 4 knots"));
    }
    if !(half_domain.is_finite() && half_domain > 0.0) {
        return Err(Error::validation("domain", "must be positive"));
    }
    let Some(t) = target else {
        return draw_table(rng, n_points, half_domain);
    };
    for _ in 0..t.budget {
        let table = draw_table(rng, n_points, half_domain)?;
        let err = match approximation_error(|z| table.eval(z), &t.similarity) {
            Ok(e) => e,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        if (err - t.error).abs() < t.tolerance {
            return Ok(table);
        }
    }
    Err(Error::SearchFailure(format!(
        "no random derivative within {} of error {} after {} draws",
        t.tolerance, t.error, t.budget
    )))
}

fn draw_table(rng: &mut Rng, n: usize, half_domain: f64) -> Result<DerivativeTable> {
    let h = half_domain / n as f64;
    let mut values: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    values.sort_by(f64::total_cmp);
    let d = rng.uniform();
    let swaps = (d.powi(3) * (2 * n) as f64).floor() as usize;
    for _ in 0..swaps {
        let (i, j) = (rng.below(n), rng.below(n));
        values.swap(i, j);
    }
    let mut grid = Vec::with_capacity(2 * n);
    let mut knots = Vec::with_capacity(2 * n);
    for k in (0..n).rev() {
        grid.push(-(k as f64 + 0.5) * h);
        knots.push(values[k]);
    }
    for (k, &v) in values.iter().enumerate() {
        grid.push((k as f64 + 0.5) * h);
        knots.push(v);
    }
    DerivativeTable::new(grid, knots)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub index: usize,
    pub target_error: f64,
    pub error: f64,
    pub accuracy: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub alpha0: f64,
    pub similarity: SimilarityConfig,
    pub seed: u64,
    pub exact_accuracy: f64,
    pub rows: Vec<RobustnessRow>,
}

/// `count` targets spaced evenly over `[lo, hi]`.
pub fn error_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Trains `arch` once with the exact derivative and once per random tabulated
/// derivative drawn at each target error. All runs share the training seed so
/// they differ only in the backward response; function draws use streams
/// derived from the seed by index. Failed runs are reported, not fatal.
pub fn robustness_study(
    data: &Dataset,
    split: &Split,
    arch: Architecture,
    alpha0: f64,
    targets: &[f64],
    config: &TrainConfig,
) -> Result<RobustnessReport> {
    let sim = SimilarityConfig::for_alpha(alpha0)?;
    let run = |mode: DerivativeMode| -> Result<f64> {
        let spec = NonlinearitySpec::sa(alpha0, mode.clone())?;
        let mut net: Network<f32> = arch.build(data.n_classes(), &spec, PoolMode::Mean)?;
        init_weights(&mut net, &config.init_scheme, &mut Rng::new(config.seed).derive(INIT_STREAM));
        let cfg = TrainConfig { derivative_mode: mode, ..config.clone() };
        Ok(train(&mut net, data, split, &cfg, &TrainOptions::default())?.test_accuracy)
    };
    let exact_accuracy = run(DerivativeMode::Exact)?;
    let master = Rng::new(config.seed);
    let rows = targets
        .par_iter()
        .enumerate()
        .map(|(index, &target)| {
            let mut rng = master.derive(1000 + index as u64);
            let drawn = random_derivative(&mut rng, 16, sim.half_range, Some(&TargetError::new(target, sim)));
            let table = match drawn {
                Ok(t) => t,
                Err(e) => {
                    return RobustnessRow { index, target_error: target, error: f64::NAN, accuracy: None, failure: Some(e.to_string()) }
                }
            };
            let error = approximation_error(|z| table.eval(z), &sim).unwrap_or(f64::NAN);
            match run(DerivativeMode::Tabulated(Arc::new(table))) {
                Ok(acc) => RobustnessRow { index, target_error: target, error, accuracy: Some(acc), failure: None },
                Err(e) => {
                    log::warn!("robustness run {index} failed: {e}");
                    RobustnessRow { index, target_error: target, error, accuracy: None, failure: Some(e.to_string()) }
                }
            }
        })
        .collect();
    Ok(RobustnessReport { alpha0, similarity: sim, seed: config.seed, exact_accuracy, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub sigma: f64,
    pub n_values: usize,
    /// Fraction of inputs with |z| ≤ σ.
    pub inside_fraction: f64,
    pub mean: f64,
    pub skewness: f64,
}

/// Distribution of first-layer pre-activations over the given samples.
pub fn neuron_input_histogram<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    part: Part,
    indices: &[usize],
    scale: f64,
    sigma: f64,
    bins: usize,
) -> Result<InputHistogram> {
    let mut values = Vec::new();
    for chunk in indices.chunks(500) {
        let x = data.images::<T>(part, chunk, scale);
        net.forward(&x)?;
        let z = net
            .cached_preactivations()
            .into_iter()
            .next()
            .ok_or_else(|| Error::validation("network", "has no activation layer"))?;
        values.extend(z.data().iter().map(|v| v.as_f64()));
    }
    histogram(&values, sigma, bins)
}

/// Histogram over `[−max|z|, max|z|]` with region-boundary statistics.
pub fn histogram(values: &[f64], sigma: f64, bins: usize) -> Result<InputHistogram> {
    if values.is_empty() || bins == 0 {
        return Err(Error::validation("values", "need at least one value and one bin"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let range = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(sigma);
    let width = 2.0 * range / bins as f64;
    let edges = (0..=bins).map(|i| -range + i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let b = (((v + range) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let inside = values.iter().filter(|v| v.abs() <= sigma).count();
    Ok(InputHistogram {
        edges,
        counts,
        sigma,
        n_values: values.len(),
        inside_fraction: inside as f64 / n,
        mean,
        skewness,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainBoundReport {
    pub lower: f64,
    pub upper: f64,
    pub iterations: usize,
}

/// Amplifier gain bounds of a weight matrix: the largest squared row or column
/// norm, and the squared top singular value (power iteration on `wᵀw`).
pub fn gain_bounds<T: Scalar>(w: &Tensor<T>) -> Result<GainBoundReport> {
    if w.rank() != 2 {
        return Err(Error::dim(format!("gain bounds need a matrix, got {:?}", w.shape())));
    }
    if !w.all_finite() {
        return Err(Error::validation("weights", "non-finite entries"));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let a: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    let mut lower = 0.0f64;
    for i in 0..m {
        lower = lower.max((0..n).map(|j| a[i * n + j].powi(2)).sum());
    }
    for j in 0..n {
        lower = lower.max((0..m).map(|i| a[i * n + j].powi(2)).sum());
    }
    if lower == 0.0 {
        return Ok(GainBoundReport { lower, upper: 0.0, iterations: 0 });
    }
    let mut rng = Rng::new(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
    normalize(&mut v);
    let mut prev = 0.0;
    for it in 1..=10_000 {
        let wv: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect();
        let mut u: Vec<f64> = (0..n).map(|j| (0..m).map(|i| a[i * n + j] * wv[i]).sum()).collect();
        let rayleigh: f64 = wv.iter().map(|x| x * x).sum();
        if normalize(&mut u) == 0.0 {
            // Start vector fell in the null space; restart elsewhere.
            v = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
            normalize(&mut v);
            continue;
        }
        v = u;
        if it > 1 && (rayleigh - prev).abs() <= 1e-8 * rayleigh {
            return Ok(GainBoundReport { lower, upper: rayleigh.max(lower), iterations: it });
        }
        prev = rayleigh;
    }
    Err(Error::Numeric("power iteration did not converge in 10000 iterations".into()))
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Record written next to every study CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub study: String,
    pub alpha0: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_convention: String,
    pub quadrature: String,
    pub half_range_sigmas: f64,
    pub points: usize,
    pub seeds: Vec<u64>,
}

impl Sidecar {
    pub fn new(study: &str, configs: &[SimilarityConfig], seeds: Vec<u64>) -> Self {
        let first = configs.first().copied();
        Self {
            study: study.into(),
            alpha0: configs.iter().map(|c| c.alpha0).collect(),
            sigma: configs.iter().map(|c| c.sigma).collect(),
            sigma_convention: "probe transmission midpoint between exp(-alpha0/2) and 1".into(),
            quadrature: "composite simpson".into(),
            half_range_sigmas: first.map_or(4.0, |c| c.half_range / c.sigma),
            points: first.map_or(2001, |c| c.points),
            seeds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_exact_for_cubics() {
        let v = simpson(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 3).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
        assert!(simpson(|x| x, 0.0, 1.0, 4).is_err());
    }

    #[test]
    fn sigma_matches_closed_form() {
        for a0 in [0.5, 1.0, 10.0, 30.0, 50.0] {
            let m: f64 = 0.5 * ((-a0 / 2.0f64).exp() + 1.0);
            let closed = (-a0 / (2.0 * m.ln()) - 1.0).sqrt();
            assert!((region_sigma(a0).unwrap() - closed).abs() < 1e-9, "{a0}");
        }
        assert!((region_sigma(1e-9).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_and_scaled() {
        let cfg = SimilarityConfig::for_alpha(10.0).unwrap();
        let g = |z| sa_derivative_exact(z, 10.0);
        assert!((similarity(g, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!((similarity(|z| 2.5 * g(z), &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_candidate_is_degenerate() {
        let cfg = SimilarityConfig::for_alpha(10.0).unwrap();
        assert!(matches!(similarity(|_| 0.0, &cfg), Err(Error::Degenerate(_))));
    }

    #[test]
    fn curve_at_zero_depth() {
        let c = optical_error_curve(&[0.0]).unwrap();
        assert!(c[0].error.abs() < 1e-12);
    }

    #[test]
    fn gain_examples() {
        let r = gain_bounds(&Tensor::<f64>::identity(3)).unwrap();
        assert!((r.lower - 1.0).abs() < 1e-12 && (r.upper - 1.0).abs() < 1e-8);
        let r = gain_bounds(&Tensor::<f64>::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert!((r.lower - 2.0).abs() < 1e-12 && (r.upper - 4.0).abs() < 1e-7);
        let r = gain_bounds(&Tensor::<f64>::zeros(vec![2, 3])).unwrap();
        assert_eq!((r.lower, r.upper), (0.0, 0.0));
    }

    #[test]
    fn histogram_inside_fraction() {
        let h = histogram(&[-2.0, -0.5, 0.0, 0.5, 2.0], 1.0, 4).unwrap();
        assert!((h.inside_fraction - 0.6).abs() < 1e-12);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert!(h.skewness.abs() < 1e-12);
    }

    #[test]
    fn error_grid_spacing() {
        let g = error_grid(0.02, 0.5, 20);
        assert_eq!(g.len(), 20);
        assert!((g[19] - 0.5).abs() < 1e-15);
    }
}
