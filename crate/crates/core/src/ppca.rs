//! Probabilistic PCA: the model `X ~ N(0, H Hᵀ + v I)` with
//! `H = U (L - v I)^{1/2}`, `U` on the Stiefel manifold and `L` diagonal.
//!
//! The NKSD objective is evaluated from precomputed pairwise statistics so a
//! single `O(n² d)` sweep supports any number of parameter evaluations, and
//! the precision matrix comes from the Woodbury identity
//! `(H Hᵀ + v I)⁻¹ = U (L⁻¹ - v⁻¹ I) Uᵀ + v⁻¹ I`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::kernel::PairwiseStats;
use crate::nksd::gaussian_nksd_from_stats;
use crate::score::GaussianScore;

/// Default hyperparameter of the inverse-gamma priors.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// A pPCA parameter point.
#[derive(Debug, Clone)]
pub struct PpcaModel {
    u: DMatrix<f64>,
    l_diag: DVector<f64>,
    v: f64,
    pub alpha: f64,
}

impl PpcaModel {
    pub fn new(u: DMatrix<f64>, l_diag: DVector<f64>, v: f64, alpha: f64) -> Result<Self> {
        let (d, k) = (u.nrows(), u.ncols());
        if k == 0 || d < k {
            return Err(Error::Input(format!(
                "loading matrix must be tall, got {d} x {k}"
            )));
        }
        if l_diag.len() != k {
            return Err(Error::Input(
                "l_diag length must equal the latent dimension".into(),
            ));
        }
        if !(v > 0.0) {
            return Err(Error::Input(format!(
                "noise variance must be positive, got {v}"
            )));
        }
        if l_diag.iter().any(|&l| !(l > v)) {
            return Err(Error::Input(
                "all l_diag entries must exceed the noise variance".into(),
            ));
        }
        let gram = u.transpose() * &u;
        let ortho_err = (&gram - DMatrix::identity(k, k)).norm();
        if ortho_err > 1e-10 {
            return Err(Error::Input(format!(
                "U columns are not orthonormal (deviation {ortho_err:.2e})"
            )));
        }
        Ok(PpcaModel {
            u,
            l_diag,
            v,
            alpha,
        })
    }

    /// As [`PpcaModel::new`] but clamping `l_diag` entries at `v + 1e-8`, for
    /// callers feeding unvalidated numeric input.
    pub fn new_clamping(
        u: DMatrix<f64>,
        mut l_diag: DVector<f64>,
        v: f64,
        alpha: f64,
    ) -> Result<Self> {
        for l in l_diag.iter_mut() {
            if *l <= v {
                *l = v + 1e-8;
            }
        }
        PpcaModel::new(u, l_diag, v, alpha)
    }

    pub fn data_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn l_diag(&self) -> &DVector<f64> {
        &self.l_diag
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    /// `H = U (L - v I)^{1/2}`.
    pub fn loading(&self) -> DMatrix<f64> {
        let k = self.latent_dim();
        let mut h = self.u.clone();
        for j in 0..k {
            let s = (self.l_diag[j] - self.v).sqrt();
            for i in 0..h.nrows() {
                h[(i, j)] *= s;
            }
        }
        h
    }

    /// `H Hᵀ + v I`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let h = self.loading();
        let d = self.data_dim();
        &h * h.transpose() + DMatrix::identity(d, d) * self.v
    }

    /// Precision via the Woodbury identity, `U (L⁻¹ - v⁻¹ I) Uᵀ + v⁻¹ I`.
    pub fn precision(&self) -> DMatrix<f64> {
        let d = self.data_dim();
        let k = self.latent_dim();
        let mut um = self.u.clone();
        for j in 0..k {
            let m = 1.0 / self.l_diag[j] - 1.0 / self.v;
            for i in 0..d {
                um[(i, j)] *= m;
            }
        }
        &um * self.u.transpose() + DMatrix::identity(d, d) / self.v
    }

    /// Stein score view of the full model.
    pub fn scorer(&self) -> GaussianScore {
        GaussianScore::new(self.precision())
    }

    /// Covariance of the model restricted to a dimension subset: the
    /// corresponding sub-block `H_S H_Sᵀ + v I`.
    pub fn marginal_covariance(&self, dims: &[usize]) -> Result<DMatrix<f64>> {
        let d = self.data_dim();
        for &j in dims {
            if j >= d {
                return Err(Error::Input(format!("dimension {} out of range", j + 1)));
            }
        }
        let h = self.loading();
        let k = self.latent_dim();
        let s = dims.len();
        let mut hs = DMatrix::zeros(s, k);
        for (row, &j) in dims.iter().enumerate() {
            for c in 0..k {
                hs[(row, c)] = h[(j, c)];
            }
        }
        Ok(&hs * hs.transpose() + DMatrix::identity(s, s) * self.v)
    }

    /// Precision of the restricted model by dense factorization. Unlike the
    /// full-space case the row-subset of `U` is not orthonormal, so the
    /// Woodbury shortcut does not apply.
    pub fn marginal_precision(&self, dims: &[usize]) -> Result<DMatrix<f64>> {
        let cov = self.marginal_covariance(dims)?;
        Cholesky::new(cov).map(|c| c.inverse()).ok_or_else(|| {
            Error::Numeric("projected pPCA covariance is not positive definite".into())
        })
    }

    pub fn marginal_scorer(&self, dims: &[usize]) -> Result<GaussianScore> {
        Ok(GaussianScore::new(self.marginal_precision(dims)?))
    }

    /// Effective parameter count of the model restricted to `subset_size`
    /// dimensions: `|S| k - k(k+1)/2 + k + 1`.
    pub fn foreground_dim(&self, subset_size: usize) -> Result<usize> {
        foreground_dim(subset_size, self.latent_dim())
    }

    /// Average negative log likelihood `(1/N) Σ -log q(X_i)`.
    pub fn mean_nll(&self, data: &DataMatrix) -> Result<f64> {
        let d = self.data_dim();
        if data.n_cols() != d {
            return Err(Error::Input("data dimension does not match model".into()));
        }
        let chol = Cholesky::new(self.covariance())
            .ok_or_else(|| Error::Numeric("pPCA covariance is not positive definite".into()))?;
        let log_det = 2.0 * (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        let precision = chol.inverse();
        let mut quad = 0.0;
        for row in data.rows_iter() {
            for a in 0..d {
                for b in 0..d {
                    quad += row[a] * precision[(a, b)] * row[b];
                }
            }
        }
        Ok(0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln()
            + 0.5 * log_det
            + 0.5 * quad / data.n_rows() as f64)
    }

    /// Draw `n` observations `X = H z + sqrt(v) ε`.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> DataMatrix {
        let h = self.loading();
        let d = self.data_dim();
        let k = self.latent_dim();
        let sv = self.v.sqrt();
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let mut row = vec![0.0; d];
            for (a, slot) in row.iter_mut().enumerate() {
                let mut mean = 0.0;
                for c in 0..k {
                    mean += h[(a, c)] * z[c];
                }
                *slot = mean + sv * rng.sample::<f64, _>(StandardNormal);
            }
            rows.push(row);
        }
        DataMatrix::from_rows(rows).expect("sampled rows are rectangular and finite")
    }
}

/// `|S| k - k(k+1)/2 + k + 1` for `|S| >= k`.
pub fn foreground_dim(subset_size: usize, latent_dim: usize) -> Result<usize> {
    let k = latent_dim;
    if subset_size < k {
        return Err(Error::Input(format!(
            "foreground of size {subset_size} cannot support latent dimension {k}"
        )));
    }
    Ok(subset_size * k - k * (k + 1) / 2 + k + 1)
}

/// NKSD of the model against precomputed pairwise statistics.
pub fn ppca_nksd(stats: &PairwiseStats, model: &PpcaModel) -> f64 {
    gaussian_nksd_from_stats(stats, &model.precision())
}

/// The same evaluated through the collapsed trace form that exploits
/// `UᵀU = I`; cheaper inside the optimizer loop.
pub fn ppca_nksd_collapsed(stats: &PairwiseStats, model: &PpcaModel) -> f64 {
    let u = &model.u;
    let d = model.data_dim();
    let k = model.latent_dim();
    let v = model.v;
    let g = &stats.xt_k_x;
    let gdot = &stats.xt_kdot;

    let gu = g * u; // d x k
    let utgu = u.transpose() * &gu; // k x k
    let utgdotu = u.transpose() * (gdot * u); // k x k

    let mut t1 = 0.0;
    let mut t2 = 0.0;
    for i in 0..k {
        let di = 1.0 / model.l_diag[i] - 1.0 / v;
        t1 += utgu[(i, i)] * di * di;
        t2 += (2.0 / v * utgu[(i, i)] - 2.0 * utgdotu[(i, i)]) * di;
    }
    let mut tr_g = 0.0;
    let mut tr_gdot = 0.0;
    for a in 0..d {
        tr_g += g[(a, a)];
        tr_gdot += gdot[(a, a)];
    }
    let t3 = (tr_g / v - 2.0 * tr_gdot) / v;
    (t1 + t2 + t3 + stats.k_ddot) / stats.k_bar
}

/// Euclidean gradients of the collapsed objective in `(U, l, v)`.
pub fn ppca_nksd_gradients(
    stats: &PairwiseStats,
    model: &PpcaModel,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let u = &model.u;
    let d = model.data_dim();
    let k = model.latent_dim();
    let v = model.v;
    let g = &stats.xt_k_x;
    let gdot = &stats.xt_kdot;
    let k_bar = stats.k_bar;

    let gu = g * u;
    let utgu = u.transpose() * &gu;
    // P := 2 v⁻¹ G - 2 Ġ, so P + Pᵀ = 4 v⁻¹ G - 2 (Ġ + Ġᵀ).
    let p_sym_u = {
        let mut m = g * (4.0 / v);
        m -= gdot * 2.0;
        m -= gdot.transpose() * 2.0;
        &m * u
    };
    let utpu = u.transpose() * ((g * (2.0 / v) - gdot * 2.0) * u);

    let diag_d: Vec<f64> = (0..k).map(|i| 1.0 / model.l_diag[i] - 1.0 / v).collect();

    // ∂F/∂U = (2 G U D² + (P + Pᵀ) U D) / k̄.
    let mut grad_u = DMatrix::zeros(d, k);
    for j in 0..k {
        let dj = diag_d[j];
        for i in 0..d {
            grad_u[(i, j)] = (2.0 * gu[(i, j)] * dj * dj + p_sym_u[(i, j)] * dj) / k_bar;
        }
    }

    // ∂F/∂d_i, then chain to l and v.
    let mut grad_l = DVector::zeros(k);
    let mut df_dv = 0.0;
    let mut tr_ugudu = 0.0;
    for i in 0..k {
        let df_dd = (2.0 * utgu[(i, i)] * diag_d[i] + utpu[(i, i)]) / k_bar;
        grad_l[i] = df_dd * (-1.0 / (model.l_diag[i] * model.l_diag[i]));
        df_dv += df_dd / (v * v);
        tr_ugudu += utgu[(i, i)] * diag_d[i];
    }
    let mut tr_g = 0.0;
    let mut tr_gdot = 0.0;
    for a in 0..d {
        tr_g += g[(a, a)];
        tr_gdot += gdot[(a, a)];
    }
    df_dv +=
        (-2.0 / (v * v) * tr_ugudu - 2.0 / (v * v * v) * tr_g + 2.0 / (v * v) * tr_gdot) / k_bar;

    (grad_u, grad_l, df_dv)
}

/// Q factor of the thin QR decomposition with the sign convention that the
/// R diagonal is nonnegative, making the retraction continuous.
pub fn qf_retract(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols();
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for i in 0..q.nrows() {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Haar-distributed point on the Stiefel manifold St(d, k).
pub fn random_stiefel(d: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    qf_retract(&g)
}

/// Orthonormal (Frobenius) basis of the tangent space
/// `{Z : U₀ᵀ Z skew-symmetric}` at a Stiefel point.
pub fn stiefel_tangent_basis(u0: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let (d, k) = (u0.nrows(), u0.ncols());
    // Complete U₀ to an orthonormal basis of R^d by Gram-Schmidt over the
    // coordinate directions.
    let mut completion = DMatrix::zeros(d, d - k);
    let mut found = 0;
    for e in 0..d {
        if found == d - k {
            break;
        }
        let mut c = DVector::zeros(d);
        c[e] = 1.0;
        for j in 0..k {
            let proj = u0.column(j).dot(&c);
            c -= u0.column(j) * proj;
        }
        for j in 0..found {
            let proj = completion.column(j).dot(&c);
            let col = completion.column(j).clone_owned();
            c -= col * proj;
        }
        let norm = c.norm();
        if norm > 1e-8 {
            completion.set_column(found, &(c / norm));
            found += 1;
        }
    }
    assert_eq!(found, d - k, "failed to complete the Stiefel basis");

    let mut basis = Vec::with_capacity(d * k - k * (k + 1) / 2);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..k {
        for j in (i + 1)..k {
            // U₀ (E_ij - E_ji) / sqrt(2)
            let mut z = DMatrix::zeros(d, k);
            for r in 0..d {
                z[(r, j)] += u0[(r, i)] * inv_sqrt2;
                z[(r, i)] -= u0[(r, j)] * inv_sqrt2;
            }
            basis.push(z);
        }
    }
    for a in 0..(d - k) {
        for b in 0..k {
            let mut z = DMatrix::zeros(d, k);
            for r in 0..d {
                z[(r, b)] = completion[(r, a)];
            }
            basis.push(z);
        }
    }
    basis
}

/// Local unconstrained coordinates around a base point: tangent coordinates
/// for `U` (through QR retraction), `log(l - v)` for the spectrum and
/// `log v` for the noise. The chart has exactly the model's effective
/// dimension, so Hessians taken here are invertible at a regular optimum.
#[derive(Debug, Clone)]
pub struct PpcaChart {
    base: PpcaModel,
    basis: Vec<DMatrix<f64>>,
    gamma0: DVector<f64>,
    w0: f64,
}

impl PpcaChart {
    pub fn new(base: PpcaModel) -> Self {
        let basis = stiefel_tangent_basis(&base.u);
        let gamma0 = DVector::from_iterator(
            base.latent_dim(),
            base.l_diag.iter().map(|&l| (l - base.v).ln()),
        );
        let w0 = base.v.ln();
        PpcaChart {
            base,
            basis,
            gamma0,
            w0,
        }
    }

    pub fn base(&self) -> &PpcaModel {
        &self.base
    }

    /// Chart dimension `d k - k(k+1)/2 + k + 1`.
    pub fn dim(&self) -> usize {
        self.basis.len() + self.base.latent_dim() + 1
    }

    /// The model at chart offset `delta` (zero maps to the base point).
    pub fn model_at(&self, delta: &DVector<f64>) -> Result<PpcaModel> {
        if delta.len() != self.dim() {
            return Err(Error::Input(format!(
                "chart has dimension {}, got offset of length {}",
                self.dim(),
                delta.len()
            )));
        }
        let k = self.base.latent_dim();
        let nt = self.basis.len();
        let mut y = self.base.u.clone();
        for (a, z) in self.basis.iter().enumerate() {
            y += z * delta[a];
        }
        let u = qf_retract(&y);
        let w = self.w0 + delta[nt + k];
        if !w.is_finite() || w.abs() > 700.0 {
            return Err(Error::Numeric(
                "chart offset drives log v out of range".into(),
            ));
        }
        let v = w.exp();
        let l = DVector::from_iterator(
            k,
            (0..k).map(|i| v + (self.gamma0[i] + delta[nt + i]).exp()),
        );
        PpcaModel::new(u, l, v, self.base.alpha)
    }

    /// Euclidean gradients pushed into chart coordinates. Tangent components
    /// are Frobenius inner products with the basis (the retraction is the
    /// identity to first order along tangent directions).
    pub fn pullback_gradient(
        &self,
        grad_u: &DMatrix<f64>,
        grad_l: &DVector<f64>,
        grad_v: f64,
    ) -> DVector<f64> {
        let k = self.base.latent_dim();
        let nt = self.basis.len();
        let mut g = DVector::zeros(self.dim());
        for (a, z) in self.basis.iter().enumerate() {
            g[a] = grad_u.dot(z);
        }
        for i in 0..k {
            g[nt + i] = grad_l[i] * (self.base.l_diag[i] - self.base.v);
        }
        let total_dv = grad_v + grad_l.iter().sum::<f64>();
        g[nt + k] = total_dv * self.base.v;
        g
    }

    /// θ-derivative of the Stein score at a data point: the `d x m` matrix
    /// `∂ s(x; θ)/∂θ` in chart coordinates at the base point, by central
    /// finite differences (the score is `-P(θ) x`).
    pub fn score_dtheta_fd(&self, x: &[f64], rel_step: f64) -> Result<DMatrix<f64>> {
        let d = self.base.data_dim();
        if x.len() != d {
            return Err(Error::Input(format!(
                "point of length {} for a model of dimension {d}",
                x.len()
            )));
        }
        let m = self.dim();
        let mut out = DMatrix::zeros(d, m);
        let mut delta = DVector::zeros(m);
        for a in 0..m {
            delta[a] = rel_step;
            let p_plus = self.model_at(&delta)?.precision();
            delta[a] = -rel_step;
            let p_minus = self.model_at(&delta)?.precision();
            delta[a] = 0.0;
            for r in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += (p_plus[(r, c)] - p_minus[(r, c)]) * x[c];
                }
                out[(r, a)] = -acc / (2.0 * rel_step);
            }
        }
        Ok(out)
    }

    /// Log prior density in chart coordinates at the base point: the natural
    /// parameterization density plus the log Jacobian of `(γ, w) → (l, v)`.
    /// The tangent chart for `U` is isometric at the base point, so the
    /// uniform Stiefel factor contributes only its volume constant.
    pub fn log_prior_at_base(&self) -> f64 {
        let prior = PpcaPrior::new(
            self.base.data_dim(),
            self.base.latent_dim(),
            self.base.alpha,
        );
        let natural = prior.log_density(&self.base);
        let mut jac = self.base.v.ln();
        for i in 0..self.base.latent_dim() {
            jac += (self.base.l_diag[i] - self.base.v).ln();
        }
        natural + jac
    }
}

/// The priors on `(U, L, v)`: uniform on the Stiefel manifold and
/// inverse-gamma on the spectrum and the noise variance.
#[derive(Debug, Clone, Copy)]
pub struct PpcaPrior {
    pub d: usize,
    pub k: usize,
    pub alpha: f64,
}

impl PpcaPrior {
    pub fn new(d: usize, k: usize, alpha: f64) -> Self {
        PpcaPrior { d, k, alpha }
    }

    fn v_shape_rate(&self) -> (f64, f64) {
        let dk = (self.d - self.k) as f64;
        ((self.alpha / 2.0 + 1.0) * dk - 1.0, self.alpha / 2.0 * dk)
    }

    /// Log volume of St(d, k): `prod_{i=0}^{k-1} 2 π^{(d-i)/2} / Γ((d-i)/2)`.
    pub fn stiefel_log_volume(&self) -> f64 {
        let mut lv = 0.0;
        for i in 0..self.k {
            let half = (self.d - i) as f64 / 2.0;
            lv += std::f64::consts::LN_2 + half * std::f64::consts::PI.ln() - ln_gamma(half);
        }
        lv
    }

    /// Joint log density at a parameter point in the natural `(U, l, v)`
    /// parameterization. The uniform Stiefel factor contributes the negative
    /// log volume, available separately via [`PpcaPrior::stiefel_log_volume`].
    pub fn log_density(&self, model: &PpcaModel) -> f64 {
        let mut lp = -self.stiefel_log_volume();
        let a = self.alpha / 2.0;
        for &l in model.l_diag.iter() {
            lp += inverse_gamma_logpdf(l, a, a);
        }
        let (shape, rate) = self.v_shape_rate();
        lp += inverse_gamma_logpdf(model.v(), shape, rate);
        lp
    }

    /// Draw a valid parameter point, rejecting draws with `min l <= v`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<PpcaModel> {
        let (v_shape, v_rate) = self.v_shape_rate();
        if v_shape <= 0.0 || v_rate <= 0.0 {
            return Err(Error::Config(format!(
                "inverse-gamma prior on v undefined for d={}, k={}, alpha={}",
                self.d, self.k, self.alpha
            )));
        }
        let a = self.alpha / 2.0;
        let gamma_l = Gamma::new(a, 1.0 / a)
            .map_err(|e| Error::Config(format!("invalid spectrum prior: {e}")))?;
        let gamma_v = Gamma::new(v_shape, 1.0 / v_rate)
            .map_err(|e| Error::Config(format!("invalid noise prior: {e}")))?;
        for _ in 0..10_000 {
            let v = 1.0 / rng.sample(gamma_v);
            let mut ls: Vec<f64> = (0..self.k)
                .map(|_| 1.0 / rng.sample::<f64, _>(gamma_l))
                .collect();
            if ls.iter().all(|&l| l > v) {
                ls.sort_by(|x, y| y.partial_cmp(x).unwrap());
                let u = random_stiefel(self.d, self.k, rng);
                return PpcaModel::new(u, DVector::from_vec(ls), v, self.alpha);
            }
        }
        Err(Error::Numeric(
            "prior rejection sampling failed to find l > v".into(),
        ))
    }
}

fn inverse_gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}
