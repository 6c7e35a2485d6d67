//! Small dense-tensor kernel: row-major tensors, hand-derived forward and
//! backward rules for the layers the denoiser uses, Adam, finite-difference
//! checking and the binary checkpoint format.
//!
//! Every op treats the last axis as the feature axis and flattens the rest
//! into rows.

use std::fmt::Debug;
use std::io::{self, Read, Write};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

fn mismatch(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
}

/// Floating-point element type. `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = alpha·A·B + beta·C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing `m×k`, `k×n`
    /// and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm(
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
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major matrix products on flat slices. `ta`/`tb` read the operand
/// transposed; the shapes are those of the (possibly transposed) operands.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::ONE } else { S::ZERO };
    // SAFETY: bounds asserted above; `c` is a distinct mutable borrow.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::ONE,
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
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::ZERO; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        Self::from_fn(shape, |_| S::from_f64(rng.sample(normal)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Last extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all extents but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

// ---------------------------------------------------------------------------
// Linear

/// `y = x·W + b` with `W` stored `[in, out]`.
pub fn linear<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>, NnError> {
    if w.shape.len() != 2 || x.cols() != w.shape[0] {
        return Err(mismatch(format!(
            "linear: x {:?} · W {:?}",
            x.shape, w.shape
        )));
    }
    let out = w.shape[1];
    if let Some(b) = b {
        if b.len() != out {
            return Err(mismatch(format!(
                "linear: bias {:?} for width {out}",
                b.shape
            )));
        }
    }
    let rows = x.rows();
    let mut y = vec![S::ZERO; rows * out];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * out..(r + 1) * out].copy_from_slice(&b.data);
        }
    }
    gemm(
        rows,
        w.shape[0],
        out,
        &x.data,
        false,
        &w.data,
        false,
        &mut y,
        b.is_some(),
    );
    let mut shape = x.shape.clone();
    *shape.last_mut().expect("x has rank >= 1") = out;
    Tensor::new(shape, y)
}

pub struct LinearGrads<S: Scalar> {
    pub dx: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<LinearGrads<S>, NnError> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    if x.cols() != din || dy.cols() != dout || x.rows() != dy.rows() {
        return Err(mismatch("linear_backward"));
    }
    let mut dw = Tensor::zeros(&[din, dout]);
    let mut db = Tensor::zeros(&[dout]);
    let mut dx = Tensor::zeros(&x.shape);
    linear_backward_into(
        &x.data,
        &w.data,
        &dy.data,
        x.rows(),
        din,
        dout,
        &mut dx.data,
        false,
        &mut dw.data,
        &mut db.data,
    );
    Ok(LinearGrads { dx, dw, db })
}

/// Slice-level backward: overwrites or accumulates `dx`, always accumulates
/// into `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward_into<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    rows: usize,
    din: usize,
    dout: usize,
    dx: &mut [S],
    accumulate_dx: bool,
    dw: &mut [S],
    db: &mut [S],
) {
    gemm(din, rows, dout, x, true, dy, false, dw, true);
    for r in 0..rows {
        for (acc, g) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *acc += *g;
        }
    }
    gemm(rows, dout, din, dy, false, w, true, dx, accumulate_dx);
}

// ---------------------------------------------------------------------------
// RMSNorm

pub const RMS_EPS: f64 = 1e-6;

/// Returns the output and the per-row inverse RMS needed by the backward rule.
pub fn rmsnorm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>), NnError> {
    let n = x.cols();
    if n == 0 || gain.len() != n {
        return Err(mismatch(format!(
            "rmsnorm: x {:?}, gain {:?}",
            x.shape, gain.shape
        )));
    }
    let mut y = Tensor::zeros(&x.shape);
    let inv = rmsnorm_into(&x.data, &gain.data, n, &mut y.data);
    Ok((y, inv))
}

pub(crate) fn rmsnorm_into<S: Scalar>(x: &[S], g: &[S], n: usize, y: &mut [S]) -> Vec<S> {
    let rows = x.len() / n;
    let eps = S::from_f64(RMS_EPS);
    let nn = S::from_f64(n as f64);
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let ms = xr.iter().map(|v| *v * *v).sum::<S>() / nn;
        let ir = S::ONE / (ms + eps).sqrt();
        for ((o, xv), gv) in y[r * n..(r + 1) * n].iter_mut().zip(xr).zip(g) {
            *o = *gv * *xv * ir;
        }
        inv.push(ir);
    }
    inv
}

pub fn rmsnorm_backward<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    inv_rms: &[S],
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>), NnError> {
    let n = x.cols();
    if dy.shape != x.shape || gain.len() != n || inv_rms.len() != x.rows() {
        return Err(mismatch("rmsnorm_backward"));
    }
    let mut dx = Tensor::zeros(&x.shape);
    let mut dg = Tensor::zeros(&[n]);
    rmsnorm_backward_into(
        &x.data,
        &gain.data,
        inv_rms,
        &dy.data,
        n,
        &mut dx.data,
        &mut dg.data,
    );
    Ok((dx, dg))
}

/// Accumulates into both `dx` and `dg`.
pub(crate) fn rmsnorm_backward_into<S: Scalar>(
    x: &[S],
    g: &[S],
    inv: &[S],
    dy: &[S],
    n: usize,
    dx: &mut [S],
    dg: &mut [S],
) {
    let nn = S::from_f64(n as f64);
    for (r, &ir) in inv.iter().enumerate() {
        let xr = &x[r * n..(r + 1) * n];
        let dyr = &dy[r * n..(r + 1) * n];
        let mut dot = S::ZERO;
        for i in 0..n {
            dot += dyr[i] * g[i] * xr[i];
            dg[i] += dyr[i] * xr[i] * ir;
        }
        let c = ir * ir * ir * dot / nn;
        for i in 0..n {
            dx[r * n + i] += dyr[i] * g[i] * ir - c * xr[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Activations

pub fn silu<S: Scalar>(x: S) -> S {
    x / (S::ONE + (-x).exp())
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = S::ONE / (S::ONE + (-x).exp());
    s * (S::ONE + x * (S::ONE - s))
}

// ---------------------------------------------------------------------------
// Attention

/// Projection weights of one multi-head attention layer, each `[d, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<S: Scalar = f32> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub heads: usize,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn random(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(mismatch(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_q: Tensor::randn(&[d, d], std, rng),
            w_k: Tensor::randn(&[d, d], std, rng),
            w_v: Tensor::randn(&[d, d], std, rng),
            w_o: Tensor::randn(&[d, d], std, rng),
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.shape[0]
    }

    pub fn head_width(&self) -> usize {
        self.width() / self.heads
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let d = self.width();
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape != [d, d] {
                return Err(mismatch(format!(
                    "attention weight {:?}, expected [{d}, {d}]",
                    w.shape
                )));
            }
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(mismatch(format!(
                "width {d} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Scaled dot-product attention where each consecutive block of `group`
/// rows attends only within itself. Inputs are already projected `[N, d]`;
/// returns the concatenated head outputs and the softmax weights
/// `[groups, heads, group, group]`.
pub fn grouped_attention<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    d: usize,
    group: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>) {
    let n = q.len() / d;
    let groups = n / group;
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![S::ZERO; n * d];
    let mut probs = vec![S::ZERO; groups * heads * group * group];
    for g in 0..groups {
        for h in 0..heads {
            let off = g * group * d + h * dh;
            let p =
                &mut probs[(g * heads + h) * group * group..(g * heads + h + 1) * group * group];
            // SAFETY: views stay inside the group's rows of q, k, out.
            unsafe {
                S::gemm(
                    group,
                    dh,
                    group,
                    scale,
                    q.as_ptr().add(off),
                    d as isize,
                    1,
                    k.as_ptr().add(off),
                    1,
                    d as isize,
                    S::ZERO,
                    p.as_mut_ptr(),
                    group as isize,
                    1,
                );
            }
            for row in p.chunks_mut(group) {
                softmax_in_place(row);
            }
            unsafe {
                S::gemm(
                    group,
                    group,
                    dh,
                    S::ONE,
                    p.as_ptr(),
                    group as isize,
                    1,
                    v.as_ptr().add(off),
                    d as isize,
                    1,
                    S::ZERO,
                    out.as_mut_ptr().add(off),
                    d as isize,
                    1,
                );
            }
        }
    }
    (out, probs)
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::ZERO;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Backward of [`grouped_attention`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn grouped_attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    d: usize,
    group: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = q.len() / d;
    let groups = n / group;
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![S::ZERO; n * d];
    let mut dk = vec![S::ZERO; n * d];
    let mut dv = vec![S::ZERO; n * d];
    let mut dp = vec![S::ZERO; group * group];
    for g in 0..groups {
        for h in 0..heads {
            let off = g * group * d + h * dh;
            let p = &probs[(g * heads + h) * group * group..(g * heads + h + 1) * group * group];
            // SAFETY: all views are bounded by the group's rows.
            unsafe {
                // dV = Pᵀ dO
                S::gemm(
                    group,
                    group,
                    dh,
                    S::ONE,
                    p.as_ptr(),
                    1,
                    group as isize,
                    dout.as_ptr().add(off),
                    d as isize,
                    1,
                    S::ZERO,
                    dv.as_mut_ptr().add(off),
                    d as isize,
                    1,
                );
                // dP = dO Vᵀ
                S::gemm(
                    group,
                    dh,
                    group,
                    S::ONE,
                    dout.as_ptr().add(off),
                    d as isize,
                    1,
                    v.as_ptr().add(off),
                    1,
                    d as isize,
                    S::ZERO,
                    dp.as_mut_ptr(),
                    group as isize,
                    1,
                );
            }
            for r in 0..group {
                let pr = &p[r * group..(r + 1) * group];
                let dpr = &mut dp[r * group..(r + 1) * group];
                let dot: S = pr.iter().zip(dpr.iter()).map(|(a, b)| *a * *b).sum();
                for (x, pv) in dpr.iter_mut().zip(pr) {
                    *x = *pv * (*x - dot) * scale;
                }
            }
            unsafe {
                // dQ = dS K
                S::gemm(
                    group,
                    group,
                    dh,
                    S::ONE,
                    dp.as_ptr(),
                    group as isize,
                    1,
                    k.as_ptr().add(off),
                    d as isize,
                    1,
                    S::ZERO,
                    dq.as_mut_ptr().add(off),
                    d as isize,
                    1,
                );
                // dK = dSᵀ Q
                S::gemm(
                    group,
                    group,
                    dh,
                    S::ONE,
                    dp.as_ptr(),
                    1,
                    group as isize,
                    q.as_ptr().add(off),
                    d as isize,
                    1,
                    S::ZERO,
                    dk.as_mut_ptr().add(off),
                    d as isize,
                    1,
                );
            }
        }
    }
    (dq, dk, dv)
}

/// Cached activations of [`attention`] for its backward rule.
#[derive(Debug, Clone)]
pub struct AttentionCache<S: Scalar> {
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    probs: Vec<S>,
    heads_out: Vec<S>,
    group: usize,
}

impl<S: Scalar> AttentionCache<S> {
    /// Softmax weights `[groups, heads, group, group]`.
    pub fn probs(&self) -> &[S] {
        &self.probs
    }
}

/// Multi-head attention of the rows of `x_q` over the rows of `x_kv`.
/// Output is `concat(heads)·W_O`.
pub fn attention<S: Scalar>(
    x_q: &Tensor<S>,
    x_kv: &Tensor<S>,
    p: &AttentionParams<S>,
) -> Result<(Tensor<S>, AttentionCache<S>), NnError> {
    p.validate()?;
    let d = p.width();
    if x_q.cols() != d || x_kv.cols() != d {
        return Err(mismatch(format!(
            "attention: inputs {:?}, {:?} for width {d}",
            x_q.shape, x_kv.shape
        )));
    }
    let nq = x_q.rows();
    let nk = x_kv.rows();
    if nk == 0 {
        return Err(mismatch("attention: empty key sequence"));
    }
    let q = linear(x_q, &p.w_q, None)?.data;
    let k = linear(x_kv, &p.w_k, None)?.data;
    let v = linear(x_kv, &p.w_v, None)?.data;
    let dh = p.head_width();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![S::ZERO; p.heads * nq * nk];
    let mut heads_out = vec![S::ZERO; nq * d];
    for h in 0..p.heads {
        let pm = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        unsafe {
            S::gemm(
                nq,
                dh,
                nk,
                S::from_f64(scale),
                q.as_ptr().add(h * dh),
                d as isize,
                1,
                k.as_ptr().add(h * dh),
                1,
                d as isize,
                S::ZERO,
                pm.as_mut_ptr(),
                nk as isize,
                1,
            );
        }
        for row in pm.chunks_mut(nk) {
            softmax_in_place(row);
        }
        unsafe {
            S::gemm(
                nq,
                nk,
                dh,
                S::ONE,
                pm.as_ptr(),
                nk as isize,
                1,
                v.as_ptr().add(h * dh),
                d as isize,
                1,
                S::ZERO,
                heads_out.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
    }
    let ho = Tensor::new(vec![nq, d], heads_out)?;
    let out = linear(&ho, &p.w_o, None)?;
    let mut shape = x_q.shape.clone();
    *shape.last_mut().expect("rank >= 1") = d;
    Ok((
        out.reshape(shape)?,
        AttentionCache {
            q,
            k,
            v,
            probs,
            heads_out: ho.data,
            group: nk,
        },
    ))
}

pub struct AttentionGrads<S: Scalar> {
    pub dx_q: Tensor<S>,
    pub dx_kv: Tensor<S>,
    pub params: AttentionParams<S>,
}

pub fn attention_backward<S: Scalar>(
    x_q: &Tensor<S>,
    x_kv: &Tensor<S>,
    p: &AttentionParams<S>,
    cache: &AttentionCache<S>,
    dy: &Tensor<S>,
) -> Result<AttentionGrads<S>, NnError> {
    let d = p.width();
    let nq = x_q.rows();
    let nk = cache.group;
    if dy.rows() != nq || dy.cols() != d {
        return Err(mismatch("attention_backward"));
    }
    let dh = p.head_width();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut w_o = vec![S::ZERO; d * d];
    let mut bo = vec![S::ZERO; d];
    let mut dho = vec![S::ZERO; nq * d];
    linear_backward_into(
        &cache.heads_out,
        &p.w_o.data,
        &dy.data,
        nq,
        d,
        d,
        &mut dho,
        false,
        &mut w_o,
        &mut bo,
    );

    let mut dq = vec![S::ZERO; nq * d];
    let mut dk = vec![S::ZERO; nk * d];
    let mut dv = vec![S::ZERO; nk * d];
    let mut dp = vec![S::ZERO; nq * nk];
    for h in 0..p.heads {
        let pm = &cache.probs[h * nq * nk..(h + 1) * nq * nk];
        unsafe {
            S::gemm(
                nk,
                nq,
                dh,
                S::ONE,
                pm.as_ptr(),
                1,
                nk as isize,
                dho.as_ptr().add(h * dh),
                d as isize,
                1,
                S::ZERO,
                dv.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
            S::gemm(
                nq,
                dh,
                nk,
                S::ONE,
                dho.as_ptr().add(h * dh),
                d as isize,
                1,
                cache.v.as_ptr().add(h * dh),
                1,
                d as isize,
                S::ZERO,
                dp.as_mut_ptr(),
                nk as isize,
                1,
            );
        }
        for r in 0..nq {
            let pr = &pm[r * nk..(r + 1) * nk];
            let dpr = &mut dp[r * nk..(r + 1) * nk];
            let dot: S = pr.iter().zip(dpr.iter()).map(|(a, b)| *a * *b).sum();
            for (x, pv) in dpr.iter_mut().zip(pr) {
                *x = *pv * (*x - dot) * scale;
            }
        }
        unsafe {
            S::gemm(
                nq,
                nk,
                dh,
                S::ONE,
                dp.as_ptr(),
                nk as isize,
                1,
                cache.k.as_ptr().add(h * dh),
                d as isize,
                1,
                S::ZERO,
                dq.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
            S::gemm(
                nk,
                nq,
                dh,
                S::ONE,
                dp.as_ptr(),
                1,
                nk as isize,
                cache.q.as_ptr().add(h * dh),
                d as isize,
                1,
                S::ZERO,
                dk.as_mut_ptr().add(h * dh),
                d as isize,
                1,
            );
        }
    }
    let mut gq = vec![S::ZERO; d * d];
    let mut gk = vec![S::ZERO; d * d];
    let mut gv = vec![S::ZERO; d * d];
    let mut sink = vec![S::ZERO; d];
    let mut dxq = vec![S::ZERO; nq * d];
    let mut dxkv = vec![S::ZERO; nk * d];
    linear_backward_into(
        &x_q.data,
        &p.w_q.data,
        &dq,
        nq,
        d,
        d,
        &mut dxq,
        false,
        &mut gq,
        &mut sink,
    );
    linear_backward_into(
        &x_kv.data,
        &p.w_k.data,
        &dk,
        nk,
        d,
        d,
        &mut dxkv,
        false,
        &mut gk,
        &mut sink,
    );
    linear_backward_into(
        &x_kv.data,
        &p.w_v.data,
        &dv,
        nk,
        d,
        d,
        &mut dxkv,
        true,
        &mut gv,
        &mut sink,
    );
    Ok(AttentionGrads {
        dx_q: Tensor::new(x_q.shape.clone(), dxq)?,
        dx_kv: Tensor::new(x_kv.shape.clone(), dxkv)?,
        params: AttentionParams {
            w_q: Tensor::new(vec![d, d], gq)?,
            w_k: Tensor::new(vec![d, d], gk)?,
            w_v: Tensor::new(vec![d, d], gv)?,
            w_o: Tensor::new(vec![d, d], w_o)?,
            heads: p.heads,
        },
    })
}

// ---------------------------------------------------------------------------
// Rotary position encoding

pub const ROPE_BASE: f64 = 10000.0;

/// Per-row rotation angles for a multi-axis rotary layout of `width`
/// channels: `axes` equal blocks, each rotated pairwise by `θ_j·p_axis`.
#[derive(Debug, Clone)]
pub struct RopeTable<S: Scalar> {
    width: usize,
    cos: Vec<S>,
    sin: Vec<S>,
}

impl<S: Scalar> RopeTable<S> {
    pub fn new(width: usize, axes: usize, positions: &[[i64; 3]]) -> Result<Self, NnError> {
        if axes == 0 || axes > 3 || !width.is_multiple_of(2 * axes) {
            return Err(mismatch(format!(
                "rope width {width} not divisible by 2×{axes}"
            )));
        }
        let block = width / axes;
        let pairs = width / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for p in positions {
            for a in 0..axes {
                for j in 0..block / 2 {
                    let theta = ROPE_BASE.powf(-2.0 * j as f64 / block as f64);
                    let angle = theta * p[a] as f64;
                    cos.push(S::from_f64(angle.cos()));
                    sin.push(S::from_f64(angle.sin()));
                }
            }
        }
        Ok(Self { width, cos, sin })
    }

    pub fn rows(&self) -> usize {
        self.cos.len() / (self.width / 2).max(1)
    }

    /// Rotates the first `self.width` channels of every `stride`-wide chunk
    /// of each row (one chunk per head). `inverse` applies the transpose,
    /// which is also the backward rule.
    pub fn apply(&self, data: &mut [S], row_len: usize, stride: usize, inverse: bool) {
        let pairs = self.width / 2;
        if pairs == 0 {
            return;
        }
        let rows = data.len() / row_len;
        debug_assert_eq!(rows, self.rows());
        for r in 0..rows {
            let cs = &self.cos[r * pairs..(r + 1) * pairs];
            let sn = &self.sin[r * pairs..(r + 1) * pairs];
            for chunk in 0..row_len / stride {
                let base = r * row_len + chunk * stride;
                for j in 0..pairs {
                    let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                    let a = data[base + 2 * j];
                    let b = data[base + 2 * j + 1];
                    data[base + 2 * j] = a * c - b * s;
                    data[base + 2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Rotates every token of `tokens` (`[n, width]`) by its integer position
/// on up to three axes.
pub fn rope_multiaxis<S: Scalar>(
    tokens: &Tensor<S>,
    positions: &[[i64; 3]],
    axes: usize,
) -> Result<Tensor<S>, NnError> {
    if positions.len() != tokens.rows() {
        return Err(mismatch(format!(
            "{} positions for {} tokens",
            positions.len(),
            tokens.rows()
        )));
    }
    let width = tokens.cols();
    let table = RopeTable::new(width, axes, positions)?;
    let mut out = tokens.clone();
    table.apply(&mut out.data, width, width, false);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar = f32> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(mismatch(
            "adam: parameter, gradient and moment counts differ",
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape != g.shape || p.shape != m.shape {
            return Err(mismatch(format!("adam: {:?} vs {:?}", p.shape, g.shape)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (sb1, sb2) = (S::from_f64(b1), S::from_f64(b2));
    let (ob1, ob2) = (S::from_f64(1.0 - b1), S::from_f64(1.0 - b2));
    let step = S::from_f64(state.lr / c1);
    let inv_c2 = S::from_f64(1.0 / c2);
    let eps = S::from_f64(state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m[j] = sb1 * m[j] + ob1 * gj;
            v[j] = sb2 * v[j] + ob2 * gj * gj;
            p.data[j] -= step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_REL_STEP: f64 = 1e-5;

/// Relative error used by the gradient checks.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Round-off allowance of a central difference, in ulps of `|f(x)|`.
pub const FD_ROUNDOFF_ULPS: f64 = 16.0;

/// Central-difference check of `analytic` (the gradient of `f` at `x`) over
/// `samples` random coordinates, or all of them if there are fewer. Returns
/// the maximum relative error. The part of each mismatch that lies within
/// the difference's round-off bound `FD_ROUNDOFF_ULPS·ε·|f(x)|/h` is not
/// counted, so coordinates whose gradient is below the oracle's resolution
/// do not register as failures.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    samples: usize,
    rng: &mut impl Rng,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let idx: Vec<usize> = if samples >= x.len() {
        (0..x.len()).collect()
    } else {
        (0..samples).map(|_| rng.random_range(0..x.len())).collect()
    };
    let scale = f(x).abs().max(1.0);
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in idx {
        let h = FD_REL_STEP * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let roundoff = FD_ROUNDOFF_ULPS * f64::EPSILON * scale / h;
        let excess = ((analytic[i] - numeric).abs() - roundoff).max(0.0);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(excess / denom);
    }
    worst
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub d: u32,
    pub blocks: u32,
    pub seed: u64,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NnError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.d.to_le_bytes())?;
        w.write_all(&self.blocks.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, t) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &e in &t.shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::BadCheckpoint("wrong magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let d = read_u32(r)?;
        let blocks = read_u32(r)?;
        let seed = read_u64(r)?;
        let count = read_u32(r)?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(NnError::BadCheckpoint(format!("array name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::BadCheckpoint("non-utf8 name".into()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(NnError::BadCheckpoint(format!("{name}: rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|e| e as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n <= 1 << 30)
                .ok_or_else(|| NnError::BadCheckpoint(format!("{name}: extents {shape:?}")))?;
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            d,
            blocks,
            seed,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::read_from(&mut io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Weighted sum `Σ y·r` so that `dL/dy = r`.
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn tensor_shape_contract() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!((t.rows(), t.cols()), (6, 4));
        assert!(t.clone().reshape(vec![4, 6]).is_ok());
        assert!(t.reshape(vec![5, 5]).is_err());
    }

    #[test]
    fn linear_scalar_case() {
        let x = t64(&[1, 1], vec![2.0]);
        let w = t64(&[1, 1], vec![3.0]);
        let b = t64(&[1], vec![1.0]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[7.0]);
        let g = linear_backward(&x, &w, &t64(&[1, 1], vec![1.0])).unwrap();
        assert_eq!(g.dx.data(), &[3.0]);
        assert_eq!(g.dw.data(), &[2.0]);
        assert_eq!(g.db.data(), &[1.0]);

        let w0 = t64(&[1, 1], vec![0.0]);
        assert_eq!(linear(&x, &w0, Some(&b)).unwrap().data(), &[1.0]);
        assert!(linear(&x, &t64(&[2, 1], vec![0.0, 0.0]), None).is_err());
    }

    #[test]
    fn linear_matches_naive_product() {
        let mut r = rng(1);
        let x = Tensor::<f64>::randn(&[5, 7], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[7, 3], 1.0, &mut r);
        let y = linear(&x, &w, None).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let e: f64 = (0..7)
                    .map(|k| x.data()[i * 7 + k] * w.data()[k * 3 + j])
                    .sum();
                assert!((y.data()[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng(2);
        for _ in 0..100 {
            let x = Tensor::<f64>::randn(&[8, 16], 1.0, &mut r);
            let w = Tensor::<f64>::randn(&[16, 5], 0.5, &mut r);
            let b = Tensor::<f64>::randn(&[5], 0.5, &mut r);
            let proj = Tensor::<f64>::randn(&[8, 5], 1.0, &mut r);
            let g = linear_backward(&x, &w, &proj).unwrap();
            let mut fx = |v: &[f64]| {
                dot(
                    linear(&t64(&[8, 16], v.to_vec()), &w, Some(&b))
                        .unwrap()
                        .data(),
                    proj.data(),
                )
            };
            assert!(grad_check(&mut fx, x.data(), g.dx.data(), 20, &mut r) < 1e-4);
            let mut fw = |v: &[f64]| {
                dot(
                    linear(&x, &t64(&[16, 5], v.to_vec()), Some(&b))
                        .unwrap()
                        .data(),
                    proj.data(),
                )
            };
            assert!(grad_check(&mut fw, w.data(), g.dw.data(), 20, &mut r) < 1e-4);
            let mut fb = |v: &[f64]| {
                dot(
                    linear(&x, &w, Some(&t64(&[5], v.to_vec()))).unwrap().data(),
                    proj.data(),
                )
            };
            assert!(grad_check(&mut fb, b.data(), g.db.data(), 5, &mut r) < 1e-4);
        }
    }

    #[test]
    fn grad_check_flags_wrong_gradients() {
        let mut r = rng(12);
        let x = [0.3, -1.2, 2.0];
        let mut f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        assert!(grad_check(&mut f, &x, &[0.6, -2.4, 4.0], 3, &mut r) < 1e-8);
        assert!(grad_check(&mut f, &x, &[0.6, -2.4, 4.01], 3, &mut r) > 1e-3);
        // A gradient near the round-off floor on top of a large constant.
        let mut g = |v: &[f64]| 2.5 + 1e-9 * v[0];
        assert!(grad_check(&mut g, &[0.7], &[1e-9], 1, &mut r) < 1e-4);
        assert!(grad_check(&mut g, &[0.7], &[2e-9], 1, &mut r) > 1e-2);
        assert!(grad_check(&mut g, &[0.7], &[0.0], 1, &mut r) > 1e-2);
    }

    #[test]
    fn rmsnorm_examples() {
        let g = t64(&[3], vec![1.0; 3]);
        let (y, _) = rmsnorm(&t64(&[1, 3], vec![2.0; 3]), &g).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let (y, _) = rmsnorm(&t64(&[1, 3], vec![0.0; 3]), &g).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
    }

    #[test]
    fn rmsnorm_gradients_match_finite_differences() {
        let mut r = rng(3);
        for _ in 0..100 {
            let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
            let g = Tensor::<f64>::randn(&[6], 1.0, &mut r);
            let proj = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
            let (_, inv) = rmsnorm(&x, &g).unwrap();
            let (dx, dg) = rmsnorm_backward(&x, &g, &inv, &proj).unwrap();
            let mut fx = |v: &[f64]| {
                dot(
                    rmsnorm(&t64(&[4, 6], v.to_vec()), &g).unwrap().0.data(),
                    proj.data(),
                )
            };
            assert!(grad_check(&mut fx, x.data(), dx.data(), 24, &mut r) < 1e-4);
            let mut fg = |v: &[f64]| {
                dot(
                    rmsnorm(&x, &t64(&[6], v.to_vec())).unwrap().0.data(),
                    proj.data(),
                )
            };
            assert!(grad_check(&mut fg, g.data(), dg.data(), 6, &mut r) < 1e-4);
        }
    }

    #[test]
    fn silu_gradient() {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0f64] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!(rel_error(silu_grad(x), fd) < 1e-6);
        }
    }

    fn identity_heads(d: usize, heads: usize) -> AttentionParams<f64> {
        let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        AttentionParams {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            heads,
        }
    }

    #[test]
    fn attention_single_token_returns_value() {
        let p = identity_heads(4, 2);
        let q = t64(&[3, 4], (0..12).map(|i| i as f64 * 0.3).collect());
        let kv = t64(&[1, 4], vec![0.5, -1.0, 2.0, 0.25]);
        let (out, _) = attention(&q, &kv, &p).unwrap();
        for r in 0..3 {
            assert_eq!(&out.data()[r * 4..r * 4 + 4], kv.data());
        }
    }

    #[test]
    fn attention_uniform_logits_average_values() {
        let mut p = identity_heads(4, 1);
        p.w_k = Tensor::zeros(&[4, 4]);
        let q = t64(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let kv = t64(
            &[3, 4],
            vec![1.0, 0.0, 0.0, 3.0, 2.0, 0.0, 0.0, 0.0, 3.0, 3.0, 3.0, 3.0],
        );
        let (out, _) = attention(&q, &kv, &p).unwrap();
        assert!(out
            .data()
            .iter()
            .zip([2.0, 1.0, 1.0, 2.0])
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn attention_shape_errors() {
        let p = identity_heads(4, 2);
        assert!(attention(&t64(&[1, 3], vec![0.0; 3]), &t64(&[1, 4], vec![0.0; 4]), &p).is_err());
        let mut bad = identity_heads(4, 3);
        bad.heads = 3;
        assert!(attention(
            &t64(&[1, 4], vec![0.0; 4]),
            &t64(&[1, 4], vec![0.0; 4]),
            &bad
        )
        .is_err());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut r = rng(4);
        for trial in 0..100 {
            let d = 8;
            let p = AttentionParams::<f64>::random(d, 2, &mut r).unwrap();
            let xq = Tensor::<f64>::randn(&[3, d], 1.0, &mut r);
            let xkv = Tensor::<f64>::randn(&[5, d], 1.0, &mut r);
            let proj = Tensor::<f64>::randn(&[3, d], 1.0, &mut r);
            let (_, cache) = attention(&xq, &xkv, &p).unwrap();
            let g = attention_backward(&xq, &xkv, &p, &cache, &proj).unwrap();
            let n = 12;
            let mut f = |v: &[f64]| {
                dot(
                    attention(&t64(&[3, d], v.to_vec()), &xkv, &p)
                        .unwrap()
                        .0
                        .data(),
                    proj.data(),
                )
            };
            let e1 = grad_check(&mut f, xq.data(), g.dx_q.data(), n, &mut r);
            let mut f = |v: &[f64]| {
                dot(
                    attention(&xq, &t64(&[5, d], v.to_vec()), &p)
                        .unwrap()
                        .0
                        .data(),
                    proj.data(),
                )
            };
            let e2 = grad_check(&mut f, xkv.data(), g.dx_kv.data(), n, &mut r);
            let mut errs = vec![e1, e2];
            for which in 0..4 {
                let base = [&p.w_q, &p.w_k, &p.w_v, &p.w_o][which].clone();
                let analytic =
                    [&g.params.w_q, &g.params.w_k, &g.params.w_v, &g.params.w_o][which].clone();
                let mut f = |v: &[f64]| {
                    let mut q = p.clone();
                    *[&mut q.w_q, &mut q.w_k, &mut q.w_v, &mut q.w_o][which] =
                        t64(&[d, d], v.to_vec());
                    dot(attention(&xq, &xkv, &q).unwrap().0.data(), proj.data())
                };
                errs.push(grad_check(&mut f, base.data(), analytic.data(), n, &mut r));
            }
            let worst = errs.iter().cloned().fold(0.0, f64::max);
            assert!(worst < 1e-4, "trial {trial}: {errs:?}");
        }
    }

    #[test]
    fn grouped_attention_matches_per_group_calls() {
        let mut r = rng(5);
        let d = 8;
        let (group, groups, heads) = (5, 3, 2);
        let q = Tensor::<f64>::randn(&[groups * group, d], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[groups * group, d], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[groups * group, d], 1.0, &mut r);
        let (out, probs) = grouped_attention(q.data(), k.data(), v.data(), d, group, heads);
        let dh = d / heads;
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..group {
                    let qi = &q.data()[(g * group + i) * d + h * dh..][..dh];
                    let logits: Vec<f64> = (0..group)
                        .map(|j| {
                            dot(qi, &k.data()[(g * group + j) * d + h * dh..][..dh])
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    for c in 0..dh {
                        let e: f64 = (0..group)
                            .map(|j| {
                                (logits[j] - m).exp() / z
                                    * v.data()[(g * group + j) * d + h * dh + c]
                            })
                            .sum();
                        assert!((out[(g * group + i) * d + h * dh + c] - e).abs() < 1e-12);
                    }
                    let row = &probs[((g * heads + h) * group + i) * group..][..group];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grouped_attention_gradients() {
        let mut r = rng(6);
        let (d, group, heads) = (8, 4, 2);
        let n = 3 * group;
        let q = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
        let v = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
        let proj = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
        let (_, probs) = grouped_attention(q.data(), k.data(), v.data(), d, group, heads);
        let (dq, dk, dv) = grouped_attention_backward(
            q.data(),
            k.data(),
            v.data(),
            &probs,
            proj.data(),
            d,
            group,
            heads,
        );
        let mut f = |x: &[f64]| {
            dot(
                &grouped_attention(x, k.data(), v.data(), d, group, heads).0,
                proj.data(),
            )
        };
        assert!(grad_check(&mut f, q.data(), &dq, 200, &mut r) < 1e-4);
        let mut f = |x: &[f64]| {
            dot(
                &grouped_attention(q.data(), x, v.data(), d, group, heads).0,
                proj.data(),
            )
        };
        assert!(grad_check(&mut f, k.data(), &dk, 200, &mut r) < 1e-4);
        let mut f = |x: &[f64]| {
            dot(
                &grouped_attention(q.data(), k.data(), x, d, group, heads).0,
                proj.data(),
            )
        };
        assert!(grad_check(&mut f, v.data(), &dv, 200, &mut r) < 1e-4);
    }

    #[test]
    fn rope_zero_positions_is_identity() {
        let mut r = rng(7);
        let x = Tensor::<f64>::randn(&[4, 12], 1.0, &mut r);
        let y = rope_multiaxis(&x, &[[0; 3]; 4], 3).unwrap();
        assert_eq!(x, y);
        assert!(rope_multiaxis(&x, &[[0; 3]; 4], 5).is_err());
        assert!(rope_multiaxis(&Tensor::<f64>::zeros(&[4, 10]), &[[0; 3]; 4], 3).is_err());
        assert!(rope_multiaxis(&x, &[[0; 3]; 3], 3).is_err());
    }

    #[test]
    fn rope_angles_follow_base_schedule() {
        // One axis of width 4: pairs rotate by p·1 and p·10000^(-1/2).
        let x = t64(
            &[1, 12],
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        );
        let y = rope_multiaxis(&x, &[[2, 0, -3]], 3).unwrap();
        let d = y.data();
        assert!((d[0] - 2f64.cos()).abs() < 1e-15 && (d[1] - 2f64.sin()).abs() < 1e-15);
        assert!((d[2] - 0.02f64.cos()).abs() < 1e-15 && (d[3] - 0.02f64.sin()).abs() < 1e-15);
        assert_eq!(&d[4..8], &[1.0, 0.0, 1.0, 0.0]);
        assert!((d[8] - (-3f64).cos()).abs() < 1e-15 && (d[9] - (-3f64).sin()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn rope_preserves_norms(seed in 0u64..1000, px in -50i64..50, py in -50i64..50, pz in -50i64..50) {
            let mut r = rng(seed);
            let x = Tensor::<f64>::randn(&[1, 12], 1.0, &mut r);
            let y = rope_multiaxis(&x, &[[px, py, pz]], 3).unwrap();
            let n0: f64 = x.data().iter().map(|v| v * v).sum();
            let n1: f64 = y.data().iter().map(|v| v * v).sum();
            prop_assert!((n0 - n1).abs() < 1e-12 * n0.max(1.0));
        }

        #[test]
        fn rope_logits_depend_on_offsets_only(
            seed in 0u64..1000,
            a in prop::array::uniform3(-30i64..30),
            b in prop::array::uniform3(-30i64..30),
            delta in prop::array::uniform3(-30i64..30),
        ) {
            let mut r = rng(seed);
            let q = Tensor::<f64>::randn(&[1, 12], 1.0, &mut r);
            let k = Tensor::<f64>::randn(&[1, 12], 1.0, &mut r);
            let shift = |p: [i64; 3]| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
            let l0 = dot(rope_multiaxis(&q, &[a], 3).unwrap().data(), rope_multiaxis(&k, &[b], 3).unwrap().data());
            let l1 = dot(rope_multiaxis(&q, &[shift(a)], 3).unwrap().data(), rope_multiaxis(&k, &[shift(b)], 3).unwrap().data());
            prop_assert!((l0 - l1).abs() < 1e-9);
        }
    }

    #[test]
    fn rope_inverse_round_trip() {
        let mut r = rng(8);
        let x = Tensor::<f64>::randn(&[3, 16], 1.0, &mut r);
        let pos = [[1, 2, 3], [-4, 0, 7], [10, 10, 10]];
        // Two heads of 8 channels, first 6 rotated.
        let table = RopeTable::<f64>::new(6, 3, &pos).unwrap();
        let mut y = x.data().to_vec();
        table.apply(&mut y, 16, 8, false);
        assert_eq!(&y[6..8], &x.data()[6..8]);
        table.apply(&mut y, 16, 8, true);
        for (a, b) in y.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64)];
        let before = p.clone();
        let mut st = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::zeros(&[3])];
        let mut st = AdamState::new(&p, 1e-3);
        let g = Tensor::new(vec![3], vec![0.5, -2.0, 10.0]).unwrap();
        adam_step(&mut p, &[g], &mut st).unwrap();
        for (v, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 1e-3).abs() < 1e-10);
        }
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut p = vec![Tensor::<f64>::new(vec![2], vec![3.0, -2.0]).unwrap()];
        let mut st = AdamState::new(&p, 0.01);
        let loss = |p: &[f64]| p[0] * p[0] + 4.0 * p[1] * p[1];
        let mut last = loss(p[0].data());
        for _ in 0..100 {
            let x = p[0].data().to_vec();
            let g = Tensor::new(vec![2], vec![2.0 * x[0], 8.0 * x[1]]).unwrap();
            adam_step(&mut p, &[g], &mut st).unwrap();
            let l = loss(p[0].data());
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut r = rng(9);
        let ck = Checkpoint {
            d: 64,
            blocks: 4,
            seed: 0xdead_beef,
            arrays: vec![
                ("w".into(), Tensor::randn(&[3, 5], 1.0, &mut r)),
                (
                    "odd".into(),
                    Tensor::new(vec![4], vec![f32::MIN_POSITIVE, -0.0, 1e-40, f32::MAX]).unwrap(),
                ),
                ("scalar".into(), Tensor::new(vec![], vec![7.0]).unwrap()),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ck");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.d, 64);
        for ((n0, t0), (n1, t1)) in ck.arrays.iter().zip(&back.arrays) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u32> = t0.data().iter().map(|x| x.to_bits()).collect();
            let b1: Vec<u32> = t1.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b0, b1);
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CTCK");
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut &bad[..]),
            Err(NnError::BadCheckpoint(_))
        ));
    }
}
