//! Neuron activations and their backward responses.
//!
//! A saturable absorber (SA) transmits a pump field `E` as
//! `E·exp(−(α₀/2)/(1+E²))`. A weak counter-propagating probe sees only the
//! linear transmission `exp(−(α₀/2)/(1+E²))` set by the pump, which stands in
//! for the true derivative during backpropagation. Gain saturation (GS) is
//! the same two-level response with `α₀ → −g₀`.

use std::path::Path;
use std::sync::Arc;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::Pchip;
use crate::tensor::Scalar;

/// Largest accepted gain factor; `exp(g₀/2)` must stay comfortably inside `f32`.
pub const MAX_GAIN: f64 = 50.0;

fn half_depth_over<T: Float>(e: T, depth: T) -> T {
    let two = T::one() + T::one();
    (depth / two) / (T::one() + e * e)
}

pub fn sa_forward<T: Float>(e: T, alpha0: T) -> T {
    (-half_depth_over(e, alpha0)).exp() * e
}

pub fn sa_derivative_exact<T: Float>(e: T, alpha0: T) -> T {
    let q = T::one() + e * e;
    (T::one() + alpha0 * e * e / (q * q)) * (-half_depth_over(e, alpha0)).exp()
}

/// Probe transmission under pump `e`.
pub fn sa_derivative_optical<T: Float>(e: T, alpha0: T) -> T {
    (-half_depth_over(e, alpha0)).exp()
}

pub fn gs_forward<T: Float>(e: T, g0: T) -> T {
    half_depth_over(e, g0).exp() * e
}

pub fn gs_derivative_exact<T: Float>(e: T, g0: T) -> T {
    let q = T::one() + e * e;
    (T::one() - g0 * e * e / (q * q)) * half_depth_over(e, g0).exp()
}

pub fn gs_derivative_optical<T: Float>(e: T, g0: T) -> T {
    half_depth_over(e, g0).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Sa,
    Gs,
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Kind {
    pub fn is_optical(self) -> bool {
        matches!(self, Kind::Sa | Kind::Gs)
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Sa => "sa",
            Kind::Gs => "gs",
            Kind::Relu => "relu",
            Kind::Sigmoid => "sigmoid",
            Kind::Tanh => "tanh",
            Kind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for Kind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "sa" => Kind::Sa,
            "gs" => Kind::Gs,
            "relu" => Kind::Relu,
            "sigmoid" => Kind::Sigmoid,
            "tanh" => Kind::Tanh,
            "linear" => Kind::Linear,
            other => return Err(Error::validation("nl", format!("unknown nonlinearity `{other}`"))),
        })
    }
}

pub fn baseline_forward<T: Float>(z: T, kind: Kind) -> T {
    match kind {
        Kind::Relu => z.max(T::zero()),
        Kind::Sigmoid => T::one() / (T::one() + (-z).exp()),
        Kind::Tanh => z.tanh(),
        _ => z,
    }
}

/// ReLU'(0) is taken as 0.
pub fn baseline_derivative<T: Float>(z: T, kind: Kind) -> T {
    match kind {
        Kind::Relu => {
            if z > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Kind::Sigmoid => {
            let s = T::one() / (T::one() + (-z).exp());
            s * (T::one() - s)
        }
        Kind::Tanh => {
            let t = z.tanh();
            T::one() - t * t
        }
        _ => T::one(),
    }
}

/// A symmetric sampled stand-in for `g'`, interpolated shape-preservingly.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeTable {
    interp: Pchip,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl DerivativeTable {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("values", "table values must lie in [0, 1]"));
        }
        let n = grid.len();
        for i in 0..n.min(values.len()) {
            let j = n - 1 - i;
            if (grid[i] + grid[j]).abs() > 1e-12 || (values[i] - values[j]).abs() > 1e-12 {
                return Err(Error::validation(
                    "grid",
                    "table must be symmetric about zero",
                ));
            }
        }
        Ok(Self {
            interp: Pchip::new(grid, values)?,
        })
    }

    /// Samples `f` on `n` evenly spaced points over `[−z_max, z_max]`.
    pub fn from_fn(z_max: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if n < 2 || !(z_max > 0.0) {
            return Err(Error::validation("grid", "need n ≥ 2 and z_max > 0"));
        }
        let step = 2.0 * z_max / (n - 1) as f64;
        let mut grid: Vec<f64> = (0..n).map(|i| -z_max + step * i as f64).collect();
        // mirror so the grid is exactly symmetric
        for i in 0..n / 2 {
            grid[n - 1 - i] = -grid[i];
        }
        if n % 2 == 1 {
            grid[n / 2] = 0.0;
        }
        let values = grid.iter().map(|&z| f(z.abs())).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &[f64] {
        self.interp.x()
    }

    pub fn values(&self) -> &[f64] {
        self.interp.y()
    }

    pub fn z_max(&self) -> f64 {
        *self.grid().last().expect("non-empty grid")
    }

    /// Values outside the grid take the nearest endpoint value.
    pub fn eval(&self, z: f64) -> f64 {
        self.interp.eval(z)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TableFile {
            grid: self.grid().to_vec(),
            values: self.values().to_vec(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: TableFile = serde_json::from_str(s)?;
        Self::new(f.grid, f.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Serialize for DerivativeTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TableFile {
            grid: self.grid().to_vec(),
            values: self.values().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DerivativeTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = TableFile::deserialize(d)?;
        DerivativeTable::new(f.grid, f.values).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "table")]
pub enum DerivativeMode {
    Exact,
    OpticalApprox,
    Tabulated(Arc<DerivativeTable>),
}

impl DerivativeMode {
    pub fn name(&self) -> &'static str {
        match self {
            DerivativeMode::Exact => "exact",
            DerivativeMode::OpticalApprox => "optical",
            DerivativeMode::Tabulated(_) => "tabulated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    kind: Kind,
    depth: f64,
    derivative: DerivativeMode,
}

impl NonlinearitySpec {
    pub fn new(kind: Kind, depth: f64, derivative: DerivativeMode) -> Result<Self> {
        let spec = Self {
            kind,
            depth,
            derivative,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sa(alpha0: f64, derivative: DerivativeMode) -> Result<Self> {
        Self::new(Kind::Sa, alpha0, derivative)
    }

    pub fn gs(g0: f64, derivative: DerivativeMode) -> Result<Self> {
        Self::new(Kind::Gs, g0, derivative)
    }

    /// A computational activation with its analytic derivative.
    pub fn baseline(kind: Kind) -> Result<Self> {
        Self::new(kind, 0.0, DerivativeMode::Exact)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.depth.is_finite() || self.depth < 0.0 {
            let field = if self.kind == Kind::Gs { "g0" } else { "alpha0" };
            return Err(Error::validation(field, "must be finite and ≥ 0"));
        }
        if self.kind == Kind::Gs && self.depth > MAX_GAIN {
            return Err(Error::validation(
                "g0",
                format!("gain factor above {MAX_GAIN} overflows single precision"),
            ));
        }
        match (&self.derivative, self.kind) {
            (DerivativeMode::OpticalApprox, k) if !k.is_optical() => Err(Error::validation(
                "deriv",
                format!("optical derivative needs sa or gs, not {}", k.name()),
            )),
            (DerivativeMode::Tabulated(_), k) if k != Kind::Sa => Err(Error::validation(
                "deriv",
                "tabulated derivatives are only defined for sa",
            )),
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }

    pub fn derivative(&self) -> &DerivativeMode {
        &self.derivative
    }

    pub fn with_derivative(&self, derivative: DerivativeMode) -> Result<Self> {
        Self::new(self.kind, self.depth, derivative)
    }

    pub fn forward<T: Scalar>(&self, z: T) -> T {
        let d = T::from_f64(self.depth);
        match self.kind {
            Kind::Sa => sa_forward(z, d),
            Kind::Gs => gs_forward(z, d),
            k => baseline_forward(z, k),
        }
    }

    pub fn exact_derivative<T: Scalar>(&self, z: T) -> T {
        let d = T::from_f64(self.depth);
        match self.kind {
            Kind::Sa => sa_derivative_exact(z, d),
            Kind::Gs => gs_derivative_exact(z, d),
            k => baseline_derivative(z, k),
        }
    }

    /// The factor multiplying the back-propagated error at pre-activation `z`.
    /// Optical responses are used as-is, without rescaling.
    pub fn backward_response<T: Scalar>(&self, z: T) -> T {
        match &self.derivative {
            DerivativeMode::Exact => self.exact_derivative(z),
            DerivativeMode::OpticalApprox => {
                let d = T::from_f64(self.depth);
                match self.kind {
                    Kind::Gs => gs_derivative_optical(z, d),
                    _ => sa_derivative_optical(z, d),
                }
            }
            DerivativeMode::Tabulated(table) => T::from_f64(table.eval(z.as_f64())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn sa_forward_values() {
        assert_eq!(sa_forward(0.0, 10.0), 0.0);
        assert!(close(sa_forward(1.0, 1.0), 0.778_800_783_071_404_9, 1e-12));
        assert!(close(sa_forward(-1.0, 1.0), -0.778_800_783_071_404_9, 1e-12));
        assert!(close(sa_forward(100.0, 10.0), 100.0 * (-5.0f64 / 10001.0).exp(), 1e-12));
        assert!(close(sa_forward(100.0, 10.0), 99.95, 1e-3));
    }

    #[test]
    fn sa_exact_derivative_values() {
        assert!(close(sa_derivative_exact(0.0, 7.0), (-3.5f64).exp(), 1e-15));
        assert!(close(sa_derivative_exact(1.0, 10.0), 0.287_297_2, 1e-6));
        assert!(close(sa_derivative_exact(1.0, 10.0), 3.5 * (-2.5f64).exp(), 1e-15));
        assert!(close(sa_derivative_exact(1000.0, 10.0), 1.0, 1e-4));
    }

    #[test]
    fn sa_optical_values() {
        assert!(close(sa_derivative_optical(0.0, 10.0), 6.737_947e-3, 1e-9));
        assert!(close(sa_derivative_optical(1.0, 10.0), 0.082_085, 1e-6));
    }

    #[test]
    fn gs_values() {
        assert_eq!(gs_forward(0.0, 3.0), 0.0);
        assert!(close(gs_forward(1.0, 3.0), 2.117_000, 1e-6));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = crate::Rng::new(17);
        for _ in 0..200 {
            let e = rng.uniform() * 10.0 - 5.0;
            let a = rng.uniform() * 50.0;
            let g = rng.uniform() * 5.0;
            let fd = central(|x| sa_forward(x, a), e);
            let ex = sa_derivative_exact(e, a);
            assert!((fd - ex).abs() / ex.abs() < 1e-6, "sa e={e} a={a}");
            let fd = central(|x| gs_forward(x, g), e);
            let ex = gs_derivative_exact(e, g);
            if ex.abs() > 1e-3 {
                assert!((fd - ex).abs() / ex.abs() < 1e-6, "gs e={e} g={g}");
            }
        }
    }

    #[test]
    fn baselines() {
        assert_eq!(baseline_forward(-2.0, Kind::Relu), 0.0);
        assert_eq!(baseline_forward(3.0, Kind::Relu), 3.0);
        assert_eq!(baseline_derivative(0.0, Kind::Relu), 0.0);
        assert_eq!(baseline_forward(0.0, Kind::Sigmoid), 0.5);
        assert_eq!(baseline_derivative(0.0, Kind::Sigmoid), 0.25);
        for &z in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = central(|x| baseline_forward(x, Kind::Tanh), z);
            assert!((fd - baseline_derivative(z, Kind::Tanh)).abs() < 1e-6);
            let fd = central(|x| baseline_forward(x, Kind::Sigmoid), z);
            assert!((fd - baseline_derivative(z, Kind::Sigmoid)).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_response_dispatch() {
        let exact = NonlinearitySpec::sa(10.0, DerivativeMode::Exact).unwrap();
        let optical = NonlinearitySpec::sa(10.0, DerivativeMode::OpticalApprox).unwrap();
        assert_eq!(exact.backward_response(0.0f64), (-5.0f64).exp());
        assert_eq!(optical.backward_response(0.0f64), (-5.0f64).exp());
        assert_eq!(optical.backward_response(1.0f64), (-2.5f64).exp());
    }

    #[test]
    fn tabulated_exact_derivative_reproduces_exact_mode() {
        let a0 = 10.0;
        let table = DerivativeTable::from_fn(10.0, 1001, |z| sa_derivative_exact(z, a0) / 1.2)
            .unwrap();
        let spec = NonlinearitySpec::sa(a0, DerivativeMode::Tabulated(Arc::new(table))).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=1000 {
            let z = -10.0 + 0.02 * i as f64 + 0.01;
            let z = z.min(10.0);
            worst = worst.max((spec.backward_response(z) * 1.2 - sa_derivative_exact(z, a0)).abs());
        }
        assert!(worst <= 1e-3, "sup error {worst}");
    }

    #[test]
    fn table_clamps_and_round_trips() {
        let t = DerivativeTable::new(vec![-1.0, 0.0, 1.0], vec![0.8, 0.2, 0.8]).unwrap();
        assert_eq!(t.eval(-3.0), 0.8);
        assert_eq!(t.eval(3.0), 0.8);
        let back = DerivativeTable::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn table_validation() {
        assert!(DerivativeTable::new(vec![-1.0, 0.0, 1.0], vec![0.8, 0.2, 1.5]).is_err());
        assert!(DerivativeTable::new(vec![-1.0, 0.0, 1.0], vec![0.8, 0.2, 0.7]).is_err());
        assert!(DerivativeTable::new(vec![-1.0, 0.0, 2.0], vec![0.8, 0.2, 0.8]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(NonlinearitySpec::sa(-1.0, DerivativeMode::Exact).is_err());
        assert!(NonlinearitySpec::gs(51.0, DerivativeMode::Exact).is_err());
        assert!(NonlinearitySpec::gs(50.0, DerivativeMode::OpticalApprox).is_ok());
        assert!(NonlinearitySpec::new(Kind::Relu, 0.0, DerivativeMode::OpticalApprox).is_err());
        let t = Arc::new(DerivativeTable::new(vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap());
        assert!(NonlinearitySpec::gs(1.0, DerivativeMode::Tabulated(t.clone())).is_err());
        assert!(NonlinearitySpec::sa(1.0, DerivativeMode::Tabulated(t)).is_ok());
    }

    #[test]
    fn spec_serde_round_trip() {
        let t = Arc::new(DerivativeTable::new(vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap());
        for spec in [
            NonlinearitySpec::sa(10.0, DerivativeMode::OpticalApprox).unwrap(),
            NonlinearitySpec::sa(10.0, DerivativeMode::Tabulated(t)).unwrap(),
            NonlinearitySpec::baseline(Kind::Relu).unwrap(),
        ] {
            let s = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<NonlinearitySpec>(&s).unwrap(), spec);
        }
    }
}
