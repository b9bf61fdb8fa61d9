//! Estimation of the normalized kernelized Stein discrepancy (NKSD).
//!
//! Three routes are provided: the generic U-statistic ratio over ordered
//! pairs, the exact quadratic form in `θ` available for exponential
//! families, and the subsystem split that decomposes the full estimate into
//! foreground and background parts under a factoring kernel. The routes are
//! algebraically identical and the tests hold them to that.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, PairwiseStats};
use crate::score::{ExpFamily, SteinScore};

const PAIR_CHUNK: usize = 64;

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

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(PAIR_CHUNK)
        .map(|s| s..(s + PAIR_CHUNK).min(n))
        .collect()
}

/// The estimated NKSD together with its raw U-statistic pieces.
#[derive(Debug, Clone)]
pub struct NksdEstimate {
    /// `numerator / denominator`.
    pub value: f64,
    /// `sum_{i != j} u(X_i, X_j) / (n (n-1))`.
    pub numerator: f64,
    /// `sum_{i != j} k(X_i, X_j) / (n (n-1))`.
    pub denominator: f64,
    pub n: usize,
}

/// The Stein kernel `u(x, y)` of the U-statistic numerator:
/// `s(x)ᵀs(y) k + s(x)ᵀ∇_y k + s(y)ᵀ∇_x k + Tr(∇_x ∇_yᵀ k)`.
pub fn u_pair(score: &dyn SteinScore, x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    if x.len() != spec.dim() || y.len() != spec.dim() {
        return Err(Error::Input("point dimension does not match kernel".into()));
    }
    let sx = score.score(x)?;
    let sy = score.score(y)?;
    let mut grad_x = vec![0.0; spec.dim()];
    let (k, trace) = spec.parts(x, y, Some(&mut grad_x));
    Ok(u_from_parts(&sx, &sy, k, &grad_x, trace))
}

/// `u(x, y)` from cached scores and kernel parts; `grad_x` is `∇_x k(x, y)`
/// and `∇_y k = -∇_x k` for the even kernels used here.
#[inline]
fn u_from_parts(sx: &[f64], sy: &[f64], k: f64, grad_x: &[f64], trace: f64) -> f64 {
    let mut dot_ss = 0.0;
    let mut dot_diff = 0.0;
    for b in 0..sx.len() {
        dot_ss += sx[b] * sy[b];
        dot_diff += (sy[b] - sx[b]) * grad_x[b];
    }
    dot_ss * k + dot_diff + trace
}

/// U-statistic estimate of the NKSD: the ratio of pair sums of `u` and `k`
/// over ordered pairs `i != j`, accumulated in one pass.
pub fn nksd_hat(
    score: &dyn SteinScore,
    data: &DataMatrix,
    spec: &KernelSpec,
) -> Result<NksdEstimate> {
    let n = data.n_rows();
    let d = data.n_cols();
    if n < 2 {
        return Err(Error::InsufficientData { need: 2, got: n });
    }
    if d != spec.dim() || d != score.dim() {
        return Err(Error::Input(format!(
            "dimension mismatch: data {d}, kernel {}, score {}",
            spec.dim(),
            score.dim()
        )));
    }

    // Scores are evaluated once per row, not once per pair.
    let mut scores = vec![0.0; n * d];
    for i in 0..n {
        score.score_into(data.row(i), &mut scores[i * d..(i + 1) * d]);
    }

    let partials: Vec<(f64, f64)> = chunk_ranges(n)
        .into_par_iter()
        .map(|rows| {
            let mut num = Compensated::default();
            let mut den = Compensated::default();
            let mut grad = vec![0.0; d];
            for i in rows {
                let xi = data.row(i);
                let si = &scores[i * d..(i + 1) * d];
                for j in (i + 1)..n {
                    let xj = data.row(j);
                    let sj = &scores[j * d..(j + 1) * d];
                    let (k, trace) = spec.parts(xi, xj, Some(&mut grad));
                    num.add(u_from_parts(si, sj, k, &grad, trace));
                    den.add(k);
                }
            }
            (num.value(), den.value())
        })
        .collect();

    let mut num = 0.0;
    let mut den = 0.0;
    for (pn, pd) in partials {
        num += pn;
        den += pd;
    }
    // Unordered pairs were visited once; the ordered sums are twice that,
    // which cancels in the ratio but not in the reported pieces.
    let pairs = (n * (n - 1)) as f64;
    let numerator = 2.0 * num / pairs;
    let denominator = 2.0 * den / pairs;
    if denominator <= 0.0 {
        return Err(Error::Numeric("kernel pair sum is not positive".into()));
    }
    Ok(NksdEstimate {
        value: numerator / denominator,
        numerator,
        denominator,
        n,
    })
}

/// NKSD of a zero-mean Gaussian with the given precision, evaluated from
/// precomputed pairwise statistics:
/// `(Tr(XᵀKX P P) - 2 Tr(XᵀK̇ P) + K̈) / K̄`.
pub fn gaussian_nksd_from_stats(stats: &PairwiseStats, precision: &DMatrix<f64>) -> f64 {
    let gp = &stats.xt_k_x * precision;
    let d = precision.nrows();
    let mut tr_gpp = 0.0;
    let mut tr_gdot_p = 0.0;
    for a in 0..d {
        for b in 0..d {
            tr_gpp += gp[(a, b)] * precision[(b, a)];
            tr_gdot_p += stats.xt_kdot[(a, b)] * precision[(b, a)];
        }
    }
    (tr_gpp - 2.0 * tr_gdot_p + stats.k_ddot) / stats.k_bar
}

/// The estimated NKSD of an exponential family as a function of `θ`:
/// `θᵀAθ + Bᵀθ + C` with the shared `1/ΣK` normalization.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    /// Symmetric `m x m` coefficient of the quadratic term.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c_scalar: f64,
    pub n: usize,
}

impl QuadraticForm {
    pub fn param_dim(&self) -> usize {
        self.b.len()
    }

    pub fn eval(&self, theta: &DVector<f64>) -> f64 {
        (theta.transpose() * &self.a * theta)[(0, 0)] + self.b.dot(theta) + self.c_scalar
    }

    pub fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a * theta * 2.0 + &self.b
    }

    /// Hessian of the quadratic, `2A`.
    pub fn hessian(&self) -> DMatrix<f64> {
        &self.a * 2.0
    }
}

/// Coefficients of the quadratic-form NKSD for an exponential family.
/// Evaluating the form at any `θ` reproduces [`nksd_hat`] exactly.
pub fn quadratic_coeffs(
    family: &(impl ExpFamily + ?Sized),
    data: &DataMatrix,
    spec: &KernelSpec,
) -> Result<QuadraticForm> {
    let n = data.n_rows();
    let d = data.n_cols();
    let m = family.param_dim();
    if n < 2 {
        return Err(Error::InsufficientData { need: 2, got: n });
    }
    if d != spec.dim() || d != family.data_dim() {
        return Err(Error::Input(format!(
            "dimension mismatch: data {d}, kernel {}, family {}",
            spec.dim(),
            family.data_dim()
        )));
    }

    // Per-row caches of ∇_x t (flattened row major) and ∇_x log λ.
    let mut jacobians = vec![0.0; n * m * d];
    for i in 0..n {
        let jac = family.t_jacobian(data.row(i));
        if jac.nrows() != m || jac.ncols() != d {
            return Err(Error::Input(
                "t_jacobian returned a wrongly shaped matrix".into(),
            ));
        }
        let base = i * m * d;
        for r in 0..m {
            for ccol in 0..d {
                jacobians[base + r * d + ccol] = jac[(r, ccol)];
            }
        }
    }
    let mut lambda = vec![0.0; n * d];
    for i in 0..n {
        family.log_lambda_grad_into(data.row(i), &mut lambda[i * d..(i + 1) * d]);
    }

    struct Partial {
        a: Vec<f64>,
        b: Vec<f64>,
        c: f64,
        k_bar: f64,
    }

    let partials: Vec<Partial> = chunk_ranges(n)
        .into_par_iter()
        .map(|rows| {
            let mut a = vec![0.0; m * m];
            let mut b = vec![0.0; m];
            let mut c = Compensated::default();
            let mut k_bar = Compensated::default();
            let mut grad = vec![0.0; d];
            // j_dot_g[r] caches Σ_c J_i[r,c] g_j[c] style contractions.
            let mut ji_gj = vec![0.0; m];
            let mut jj_gi = vec![0.0; m];
            let mut ji_grad = vec![0.0; m];
            let mut jj_grad = vec![0.0; m];
            for i in rows {
                let xi = data.row(i);
                let ji = &jacobians[i * m * d..(i + 1) * m * d];
                let gi = &lambda[i * d..(i + 1) * d];
                for j in (i + 1)..n {
                    let xj = data.row(j);
                    let jj = &jacobians[j * m * d..(j + 1) * m * d];
                    let gj = &lambda[j * d..(j + 1) * d];
                    let (k, trace) = spec.parts(xi, xj, Some(&mut grad));
                    k_bar.add(2.0 * k);

                    // Both pair orderings contribute the same symmetrized
                    // quantities, hence the factors of two.
                    for r in 0..m {
                        let jir = &ji[r * d..(r + 1) * d];
                        let jjr = &jj[r * d..(r + 1) * d];
                        let mut s_ji_gj = 0.0;
                        let mut s_jj_gi = 0.0;
                        let mut s_ji_grad = 0.0;
                        let mut s_jj_grad = 0.0;
                        for ccol in 0..d {
                            s_ji_gj += jir[ccol] * gj[ccol];
                            s_jj_gi += jjr[ccol] * gi[ccol];
                            s_ji_grad += jir[ccol] * grad[ccol];
                            s_jj_grad += jjr[ccol] * grad[ccol];
                        }
                        ji_gj[r] = s_ji_gj;
                        jj_gi[r] = s_jj_gi;
                        ji_grad[r] = s_ji_grad;
                        jj_grad[r] = s_jj_grad;
                    }

                    for r in 0..m {
                        let jir = &ji[r * d..(r + 1) * d];
                        let jjr = &jj[r * d..(r + 1) * d];
                        for s in 0..m {
                            let jis = &ji[s * d..(s + 1) * d];
                            let jjs = &jj[s * d..(s + 1) * d];
                            let mut cross = 0.0;
                            for ccol in 0..d {
                                cross += jir[ccol] * jjs[ccol] + jjr[ccol] * jis[ccol];
                            }
                            a[r * m + s] += k * cross;
                        }
                        b[r] += 2.0 * (k * (jj_gi[r] + ji_gj[r]) + (jj_grad[r] - ji_grad[r]));
                    }

                    let mut gg = 0.0;
                    let mut gdiff = 0.0;
                    for ccol in 0..d {
                        gg += gi[ccol] * gj[ccol];
                        gdiff += (gj[ccol] - gi[ccol]) * grad[ccol];
                    }
                    c.add(2.0 * (gg * k + gdiff + trace));
                }
            }
            Partial {
                a,
                b,
                c: c.value(),
                k_bar: k_bar.value(),
            }
        })
        .collect();

    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    let mut c = 0.0;
    let mut k_bar = 0.0;
    for p in partials {
        for r in 0..m {
            for s in 0..m {
                a[(r, s)] += p.a[r * m + s];
            }
            b[r] += p.b[r];
        }
        c += p.c;
        k_bar += p.k_bar;
    }
    if k_bar <= 0.0 {
        return Err(Error::Numeric("kernel pair sum is not positive".into()));
    }
    a /= k_bar;
    b /= k_bar;
    c /= k_bar;
    // Enforce exact symmetry against accumulated round-off.
    let a = (&a + a.transpose()) * 0.5;
    Ok(QuadraticForm {
        a,
        b,
        c_scalar: c,
        n,
    })
}

/// Subsystem decomposition of the estimator: the `overline` estimates of the
/// foreground and background NKSD whose sum reproduces the full-space
/// estimate exactly when the kernel factors over the split.
pub fn subsystem_split(
    score_f: &dyn SteinScore,
    score_b: &dyn SteinScore,
    data: &DataMatrix,
    foreground_dims: &[usize],
    spec: &KernelSpec,
) -> Result<(f64, f64)> {
    let n = data.n_rows();
    let d = data.n_cols();
    if n < 2 {
        return Err(Error::InsufficientData { need: 2, got: n });
    }
    if d != spec.dim() {
        return Err(Error::Input("data dimension does not match kernel".into()));
    }
    let mut seen = vec![false; d];
    for &j in foreground_dims {
        if j >= d || seen[j] {
            return Err(Error::Input(
                "foreground dimensions must be unique and in range".into(),
            ));
        }
        seen[j] = true;
    }
    if foreground_dims.is_empty() {
        return Err(Error::Input(
            "foreground must contain at least one dimension".into(),
        ));
    }
    let background_dims: Vec<usize> = (0..d).filter(|j| !seen[*j]).collect();

    let data_f = data.project(foreground_dims)?;
    let spec_f = spec.split_factor(foreground_dims.len())?;
    if score_f.dim() != data_f.n_cols() {
        return Err(Error::Input("foreground score dimension mismatch".into()));
    }

    // Empty background: the product-kernel convention `k_B = 1` makes the
    // foreground part the plain estimator and the background part zero.
    if background_dims.is_empty() {
        let est = nksd_hat(score_f, &data_f, &spec_f)?;
        return Ok((est.value, 0.0));
    }

    let data_b = data.project(&background_dims)?;
    let spec_b = spec.split_factor(background_dims.len())?;
    if score_b.dim() != data_b.n_cols() {
        return Err(Error::Input("background score dimension mismatch".into()));
    }

    let df = data_f.n_cols();
    let db = data_b.n_cols();
    let mut scores_f = vec![0.0; n * df];
    let mut scores_b = vec![0.0; n * db];
    for i in 0..n {
        score_f.score_into(data_f.row(i), &mut scores_f[i * df..(i + 1) * df]);
        score_b.score_into(data_b.row(i), &mut scores_b[i * db..(i + 1) * db]);
    }

    let partials: Vec<(f64, f64, f64)> = chunk_ranges(n)
        .into_par_iter()
        .map(|rows| {
            let mut num_f = Compensated::default();
            let mut num_b = Compensated::default();
            let mut den = Compensated::default();
            let mut grad_f = vec![0.0; df];
            let mut grad_b = vec![0.0; db];
            for i in rows {
                let sfi = &scores_f[i * df..(i + 1) * df];
                let sbi = &scores_b[i * db..(i + 1) * db];
                for j in (i + 1)..n {
                    let (kf, trf) = spec_f.parts(data_f.row(i), data_f.row(j), Some(&mut grad_f));
                    let (kb, trb) = spec_b.parts(data_b.row(i), data_b.row(j), Some(&mut grad_b));
                    let sfj = &scores_f[j * df..(j + 1) * df];
                    let sbj = &scores_b[j * db..(j + 1) * db];
                    let uf = u_from_parts(sfi, sfj, kf, &grad_f, trf);
                    let ub = u_from_parts(sbi, sbj, kb, &grad_b, trb);
                    num_f.add(uf * kb);
                    num_b.add(ub * kf);
                    den.add(kf * kb);
                }
            }
            (num_f.value(), num_b.value(), den.value())
        })
        .collect();

    let mut num_f = 0.0;
    let mut num_b = 0.0;
    let mut den = 0.0;
    for (f, b, k) in partials {
        num_f += f;
        num_b += b;
        den += k;
    }
    if den <= 0.0 {
        return Err(Error::Numeric("kernel pair sum is not positive".into()));
    }
    Ok((num_f / den, num_b / den))
}
