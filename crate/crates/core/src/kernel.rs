//! Kernel families and the pairwise data statistics used by the NKSD estimators.
//!
//! Both families are translation invariant, symmetric, strictly positive and
//! factor across dimension subsets, which is what the subsystem split in
//! [`crate::nksd`] relies on.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::DataMatrix;
use crate::error::{Error, Result};

/// Rows per parallel work unit in the pairwise sweeps. Fixed so that the
/// reduction order, and hence the floating point result, does not depend on
/// the number of worker threads.
const PAIR_CHUNK: usize = 64;

/// A kernel family with fixed hyperparameters on a space of dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// Factored inverse multiquadric: `k(x,y) = prod_b (c^2 + (x_b-y_b)^2)^(beta/dim)`.
    FactoredImq { beta: f64, c: f64, dim: usize },
    /// Radial basis function: `k(x,y) = exp(-||x-y||^2 / (2 bandwidth^2))`.
    Rbf { bandwidth: f64, dim: usize },
}

impl KernelSpec {
    /// Factored IMQ kernel with `beta` in `[-1/2, 0)` and offset `c > 0`.
    pub fn factored_imq(beta: f64, c: f64, dim: usize) -> Result<Self> {
        if !(-0.5..0.0).contains(&beta) {
            return Err(Error::Config(format!(
                "factored IMQ beta must lie in [-1/2, 0), got {beta}"
            )));
        }
        if !(c > 0.0) {
            return Err(Error::Config(format!(
                "factored IMQ c must be positive, got {c}"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("kernel dimension must be positive".into()));
        }
        Ok(KernelSpec::FactoredImq { beta, c, dim })
    }

    /// RBF kernel with `bandwidth > 0`.
    pub fn rbf(bandwidth: f64, dim: usize) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(Error::Config(format!(
                "RBF bandwidth must be positive, got {bandwidth}"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("kernel dimension must be positive".into()));
        }
        Ok(KernelSpec::Rbf { bandwidth, dim })
    }

    pub fn dim(&self) -> usize {
        match *self {
            KernelSpec::FactoredImq { dim, .. } | KernelSpec::Rbf { dim, .. } => dim,
        }
    }

    /// The same kernel family re-instantiated on a subspace of `sub_dim`
    /// dimensions. For the factored IMQ the exponent becomes `beta/sub_dim`,
    /// matching the family definition on the smaller space.
    pub fn restrict(&self, sub_dim: usize) -> Result<Self> {
        match *self {
            KernelSpec::FactoredImq { beta, c, .. } => KernelSpec::factored_imq(beta, c, sub_dim),
            KernelSpec::Rbf { bandwidth, .. } => KernelSpec::rbf(bandwidth, sub_dim),
        }
    }

    /// The factor of this kernel acting on `sub_dim` of its dimensions, such
    /// that `k(x, y) = k_S(x_S, y_S) * k_Sc(x_Sc, y_Sc)` holds exactly. For the
    /// factored IMQ this keeps the per-dimension exponent `beta/dim` by
    /// rescaling `beta`; the RBF factors without adjustment.
    pub fn split_factor(&self, sub_dim: usize) -> Result<Self> {
        if sub_dim == 0 || sub_dim > self.dim() {
            return Err(Error::Input(format!(
                "split factor dimension {sub_dim} out of range for kernel of dimension {}",
                self.dim()
            )));
        }
        match *self {
            KernelSpec::FactoredImq { beta, c, dim } => {
                KernelSpec::factored_imq(beta * sub_dim as f64 / dim as f64, c, sub_dim)
            }
            KernelSpec::Rbf { bandwidth, .. } => KernelSpec::rbf(bandwidth, sub_dim),
        }
    }

    fn check_pair(&self, x: &[f64], y: &[f64]) -> Result<()> {
        let d = self.dim();
        if x.len() != d || y.len() != d {
            return Err(Error::Input(format!(
                "kernel of dimension {d} evaluated on points of length {} and {}",
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }

    /// Kernel value `k(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_pair(x, y)?;
        Ok(self.parts(x, y, None).0)
    }

    /// Gradient `∇_x k(x, y)`.
    pub fn eval_grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_pair(x, y)?;
        let mut g = vec![0.0; self.dim()];
        self.parts(x, y, Some(&mut g));
        Ok(g)
    }

    /// Gradient `∇_y k(x, y)`; equals `∇_x k(y, x)` by symmetry.
    pub fn eval_grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.eval_grad_x(x, y)?;
        for v in &mut g {
            *v = -*v;
        }
        Ok(g)
    }

    /// `Tr(∇_x ∇_y^T k(x, y)) = sum_b ∂^2 k / ∂x_b ∂y_b`.
    pub fn eval_trace_cross(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_pair(x, y)?;
        Ok(self.parts(x, y, None).1)
    }

    /// Value, cross-derivative trace, and optionally `∇_x k` in one pass.
    /// Dimensions are assumed checked by the caller.
    pub(crate) fn parts(&self, x: &[f64], y: &[f64], grad_x: Option<&mut [f64]>) -> (f64, f64) {
        match *self {
            KernelSpec::FactoredImq { beta, c, dim } => {
                let e = beta / dim as f64;
                let c2 = c * c;
                let mut log_k = 0.0;
                for b in 0..dim {
                    let r = x[b] - y[b];
                    log_k += (c2 + r * r).ln();
                }
                let k = (e * log_k).exp();
                let mut trace = 0.0;
                match grad_x {
                    Some(g) => {
                        for b in 0..dim {
                            let r = x[b] - y[b];
                            let q = c2 + r * r;
                            g[b] = e * 2.0 * r / q * k;
                            trace -= (e * e - e) * 4.0 * r * r / (q * q) + 2.0 * e / q;
                        }
                    }
                    None => {
                        for b in 0..dim {
                            let r = x[b] - y[b];
                            let q = c2 + r * r;
                            trace -= (e * e - e) * 4.0 * r * r / (q * q) + 2.0 * e / q;
                        }
                    }
                }
                (k, trace * k)
            }
            KernelSpec::Rbf { bandwidth, dim } => {
                let h2 = bandwidth * bandwidth;
                let mut s = 0.0;
                for b in 0..dim {
                    let r = x[b] - y[b];
                    s += r * r;
                }
                let k = (-s / (2.0 * h2)).exp();
                if let Some(g) = grad_x {
                    for b in 0..dim {
                        g[b] = -(x[b] - y[b]) / h2 * k;
                    }
                }
                let trace = k * (dim as f64 / h2 - s / (h2 * h2));
                (k, trace)
            }
        }
    }
}

/// Pairwise kernel statistics over a dataset, summed over ordered pairs
/// `i != j`. Everything the pPCA objective needs is here, so optimization
/// never revisits the data.
#[derive(Debug, Clone)]
pub struct PairwiseStats {
    /// `sum_{i != j} k(X_i, X_j)`.
    pub k_bar: f64,
    /// `X^T K X` with `K_ij = 1{i != j} k(X_i, X_j)`.
    pub xt_k_x: DMatrix<f64>,
    /// `X^T Kdot` with `Kdot_{jb} = sum_{i != j} ∂k/∂x_b (X_i, X_j)`.
    pub xt_kdot: DMatrix<f64>,
    /// `sum_{i != j} Tr(∇_x ∇_y^T k(X_i, X_j))`.
    pub k_ddot: f64,
    /// Number of rows the statistics were computed from.
    pub n: usize,
}

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    c: f64,
}

impl Compensated {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

struct RowSweep {
    k_bar: f64,
    k_ddot: f64,
    /// Per row `t`: `w_t = sum_{s != t} k(X_t, X_s) X_s`.
    kx: Vec<f64>,
    /// Per row `t`: `sum_{s != t} ∂k/∂x (X_s, X_t)`.
    kdot: Vec<f64>,
    rows: std::ops::Range<usize>,
}

/// Precompute the four pairwise statistics in `O(n^2 d)`.
///
/// The sweep parallelizes over fixed-size row chunks and combines partial
/// sums in row order, so the result is identical for any thread count.
pub fn precompute_pairwise(spec: &KernelSpec, data: &DataMatrix) -> Result<PairwiseStats> {
    let n = data.n_rows();
    let d = data.n_cols();
    if n < 2 {
        return Err(Error::InsufficientData { need: 2, got: n });
    }
    if d != spec.dim() {
        return Err(Error::Input(format!(
            "data has {d} columns but kernel has dimension {}",
            spec.dim()
        )));
    }

    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(PAIR_CHUNK)
        .map(|start| start..(start + PAIR_CHUNK).min(n))
        .collect();

    let sweeps: Vec<RowSweep> = chunks
        .into_par_iter()
        .map(|rows| {
            let mut k_bar = Compensated::default();
            let mut k_ddot = Compensated::default();
            let mut kx = vec![0.0; rows.len() * d];
            let mut kdot = vec![0.0; rows.len() * d];
            let mut grad = vec![0.0; d];
            for (local, t) in rows.clone().enumerate() {
                let xt = data.row(t);
                let wk = &mut kx[local * d..(local + 1) * d];
                let wd = &mut kdot[local * d..(local + 1) * d];
                for s in 0..n {
                    if s == t {
                        continue;
                    }
                    let xs = data.row(s);
                    let (k, trace) = spec.parts(xt, xs, Some(&mut grad));
                    k_bar.add(k);
                    k_ddot.add(trace);
                    for b in 0..d {
                        wk[b] += k * xs[b];
                        // ∂k/∂x(X_s, X_t) = -∂k/∂x(X_t, X_s) for even kernels.
                        wd[b] -= grad[b];
                    }
                }
            }
            RowSweep {
                k_bar: k_bar.value(),
                k_ddot: k_ddot.value(),
                kx,
                kdot,
                rows,
            }
        })
        .collect();

    let mut k_bar = 0.0;
    let mut k_ddot = 0.0;
    let mut xt_k_x = DMatrix::zeros(d, d);
    let mut xt_kdot = DMatrix::zeros(d, d);
    for sweep in &sweeps {
        k_bar += sweep.k_bar;
        k_ddot += sweep.k_ddot;
        for (local, t) in sweep.rows.clone().enumerate() {
            let xt = data.row(t);
            let wk = &sweep.kx[local * d..(local + 1) * d];
            let wd = &sweep.kdot[local * d..(local + 1) * d];
            for a in 0..d {
                for b in 0..d {
                    xt_k_x[(a, b)] += xt[a] * wk[b];
                    xt_kdot[(a, b)] += xt[a] * wd[b];
                }
            }
        }
    }

    Ok(PairwiseStats {
        k_bar,
        xt_k_x,
        xt_kdot,
        k_ddot,
        n,
    })
}
