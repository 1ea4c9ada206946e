//! Dense row-major tensors and the handful of kernels the network needs:
//! matrix products, 2-D cross-correlation, and 2×2 pooling.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks and
/// analysis quadrature run in `f64`.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + Serialize + for<'de> Deserialize<'de> + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Raw strided GEMM, `C = alpha·A·B + beta·C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n`, `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C[m×n] = op(A)·op(B) + beta·C`.
///
/// `op(A)` is `m×k`; when `trans_a` is set, `a` holds the `k×m` matrix. Same for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths asserted above match the strides chosen.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("tensor dimensions must be positive");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("tensor dimensions must be positive");
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// 2-D tensor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data).expect("non-empty rows")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(format!(
            "dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(format!(
            "{what} must be rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} × {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, n, k, &a.data, false, &b.data, false, T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// `W·x` for `W: m×n`, `x: n`.
pub fn matvec<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(w, 2, "matvec matrix")?;
    let (m, n) = (w.shape[0], w.shape[1]);
    if x.len() != n {
        return Err(Error::dim(format!("matvec: {:?} · {:?}", w.shape, x.shape)));
    }
    let mut out = vec![T::zero(); m];
    gemm(m, 1, n, &w.data, false, &x.data, false, T::zero(), &mut out);
    Tensor::new(vec![m], out)
}

/// `Wᵀ·d` for `W: m×n`, `d: m`. The backward pass through a weight bank.
pub fn matvec_transpose<T: Scalar>(w: &Tensor<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(w, 2, "matvec matrix")?;
    let (m, n) = (w.shape[0], w.shape[1]);
    if d.len() != m {
        return Err(Error::dim(format!("matvecᵀ: {:?}ᵀ · {:?}", w.shape, d.shape)));
    }
    let mut out = vec![T::zero(); n];
    gemm(n, 1, m, &w.data, true, &d.data, false, T::zero(), &mut out);
    Tensor::new(vec![n], out)
}

/// Geometry of a valid (no padding, stride 1) cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize]) -> Result<Self> {
        if input.len() != 3 || kernels.len() != 4 {
            return Err(Error::dim(format!(
                "conv expects input C×H×W and kernels O×C×kh×kw, got {input:?} and {kernels:?}"
            )));
        }
        let g = Self {
            c_in: input[0],
            h: input[1],
            w: input[2],
            c_out: kernels[0],
            kh: kernels[2],
            kw: kernels[3],
        };
        if kernels[1] != g.c_in {
            return Err(Error::dim(format!(
                "kernel channels {} differ from input channels {}",
                kernels[1], g.c_in
            )));
        }
        if g.h < g.kh || g.w < g.kw {
            return Err(Error::dim(format!(
                "input {}×{} smaller than kernel {}×{}",
                g.h, g.w, g.kh, g.kw
            )));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
    pub fn input_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
    pub fn output_len(&self) -> usize {
        self.c_out * self.positions()
    }

    /// Unfold one sample into a `patch × positions` matrix.
    pub fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        debug_assert_eq!(cols.len(), self.patch() * p);
        for c in 0..self.c_in {
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = (c * self.kh + u) * self.kw + v;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for y in 0..oh {
                        let src = &input[(c * self.h + y + u) * self.w + v..][..ow];
                        dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                    }
                }
            }
        }
    }

    /// Fold a `patch × positions` matrix back, accumulating into `input`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], input: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        for c in 0..self.c_in {
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = (c * self.kh + u) * self.kw + v;
                    let src = &cols[row * p..(row + 1) * p];
                    for y in 0..oh {
                        let dst = &mut input[(c * self.h + y + u) * self.w + v..][..ow];
                        for (d, &s) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation, stride 1: `out[o][y][x] = Σ in[c][y+u][x+v]·k[o][c][u][v]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernels.shape())?;
    let mut cols = vec![T::zero(); g.patch() * g.positions()];
    g.im2col(input.data(), &mut cols);
    let mut out = vec![T::zero(); g.output_len()];
    gemm(
        g.c_out,
        g.positions(),
        g.patch(),
        kernels.data(),
        false,
        &cols,
        false,
        T::zero(),
        &mut out,
    );
    Tensor::new(vec![g.c_out, g.out_h(), g.out_w()], out)
}

/// Gradient of `dot(upstream, conv2d_forward(x, kernels))` with respect to `x`.
pub fn conv2d_backward_input<T: Scalar>(
    upstream: &Tensor<T>,
    kernels: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input_shape, kernels.shape())?;
    check_upstream(&g, upstream)?;
    let mut cols = vec![T::zero(); g.patch() * g.positions()];
    gemm(
        g.patch(),
        g.positions(),
        g.c_out,
        kernels.data(),
        true,
        upstream.data(),
        false,
        T::zero(),
        &mut cols,
    );
    let mut grad = vec![T::zero(); g.input_len()];
    g.col2im(&cols, &mut grad);
    Tensor::new(input_shape.to_vec(), grad)
}

/// Gradient of `dot(upstream, conv2d_forward(input, k))` with respect to `k`.
pub fn conv2d_backward_kernels<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel_shape)?;
    check_upstream(&g, upstream)?;
    let mut cols = vec![T::zero(); g.patch() * g.positions()];
    g.im2col(input.data(), &mut cols);
    let mut grad = vec![T::zero(); g.c_out * g.patch()];
    gemm(
        g.c_out,
        g.patch(),
        g.positions(),
        upstream.data(),
        false,
        &cols,
        true,
        T::zero(),
        &mut grad,
    );
    Tensor::new(kernel_shape.to_vec(), grad)
}

fn check_upstream<T: Scalar>(g: &ConvGeom, upstream: &Tensor<T>) -> Result<()> {
    let want = [g.c_out, g.out_h(), g.out_w()];
    if upstream.shape() != want {
        return Err(Error::dim(format!(
            "conv upstream shape {:?}, expected {want:?}",
            upstream.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    Max,
}

/// What `pool2d_backward` needs to route gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolCache {
    mode: PoolMode,
    input_shape: Vec<usize>,
    /// Flat input index of each block's maximum (empty for mean pooling).
    argmax: Vec<usize>,
}

impl PoolCache {
    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Offset `(dy, dx)` of the maximum inside output element `index`'s 2×2 block.
    pub fn argmax_offset(&self, index: usize) -> Option<(usize, usize)> {
        let flat = *self.argmax.get(index)?;
        let w = self.input_shape[self.input_shape.len() - 1];
        Some(((flat / w) % 2, (flat % w) % 2))
    }
}

fn pooled_shape(shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("pooling needs rank ≥ 2, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("pooling needs even H and W, got {h}×{w}")));
    }
    let mut out = shape.to_vec();
    let r = out.len();
    out[r - 2] = h / 2;
    out[r - 1] = w / 2;
    Ok(out)
}

/// 2×2, stride-2 pooling over the last two axes.
pub fn pool2d<T: Scalar>(input: &Tensor<T>, mode: PoolMode) -> Result<(Tensor<T>, PoolCache)> {
    let out_shape = pooled_shape(input.shape())?;
    let r = input.rank();
    let (h, w) = (input.shape()[r - 2], input.shape()[r - 1]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = input.len() / (h * w);
    let quarter = T::from_f64(0.25);
    let src = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax.reserve(planes * oh * ow);
    }
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                let idx = [i0, i0 + 1, i0 + w, i0 + w + 1];
                match mode {
                    PoolMode::Mean => {
                        out.push((src[idx[0]] + src[idx[1]] + src[idx[2]] + src[idx[3]]) * quarter)
                    }
                    PoolMode::Max => {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        out.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
        }
    }
    let cache = PoolCache {
        mode,
        input_shape: input.shape().to_vec(),
        argmax,
    };
    Ok((Tensor::new(out_shape, out)?, cache))
}

pub fn pool2d_backward<T: Scalar>(upstream: &Tensor<T>, cache: &PoolCache) -> Result<Tensor<T>> {
    let out_shape = pooled_shape(&cache.input_shape)?;
    if upstream.shape() != out_shape.as_slice() {
        return Err(Error::dim(format!(
            "pool upstream shape {:?}, cache expects {out_shape:?}",
            upstream.shape()
        )));
    }
    let mut grad = vec![T::zero(); cache.input_shape.iter().product()];
    match cache.mode {
        PoolMode::Mean => {
            let r = cache.input_shape.len();
            let (h, w) = (cache.input_shape[r - 2], cache.input_shape[r - 1]);
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::from_f64(0.25);
            for (o, &g) in upstream.data().iter().enumerate() {
                let p = o / (oh * ow);
                let y = (o / ow) % oh;
                let x = o % ow;
                let i0 = p * h * w + 2 * y * w + 2 * x;
                let share = g * quarter;
                for i in [i0, i0 + 1, i0 + w, i0 + w + 1] {
                    grad[i] = grad[i] + share;
                }
            }
        }
        PoolMode::Max => {
            for (&g, &i) in upstream.data().iter().zip(&cache.argmax) {
                grad[i] = grad[i] + g;
            }
        }
    }
    Tensor::new(cache.input_shape.clone(), grad)
}
