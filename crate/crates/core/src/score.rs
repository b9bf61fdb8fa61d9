//! Parametric families exposed through their Stein scores.
//!
//! The estimators only ever need `s_q(x) = ∇_x log q(x|θ)` for a fixed
//! parameter value, captured by [`SteinScore`]. Exponential families
//! additionally expose the pieces that make the estimated discrepancy an
//! exact quadratic form in `θ` (see [`crate::nksd::quadratic_coeffs`]).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Free parameters in unconstrained coordinates.
pub type ParamVector = DVector<f64>;

/// A density's Stein score at a fixed parameter value.
pub trait SteinScore: Sync {
    fn dim(&self) -> usize;

    /// Write `∇_x log q(x)` into `out`. Lengths are assumed checked.
    fn score_into(&self, x: &[f64], out: &mut [f64]);

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Input(format!(
                "score of dimension {} evaluated on point of length {}",
                self.dim(),
                x.len()
            )));
        }
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, &mut out);
        Ok(out)
    }
}

/// Exponential family `q(x|θ) = λ(x) exp(θᵀ t(x) − κ(θ))`, exposed through
/// the two ingredients of its score `s(x;θ) = ∇_x log λ(x) + (∇_x t(x))ᵀ θ`.
pub trait ExpFamily: Sync {
    fn data_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// `∇_x t(x)`, an `m x d` Jacobian.
    fn t_jacobian(&self, x: &[f64]) -> DMatrix<f64>;

    /// Write `∇_x log λ(x)` into `out` (length `d`).
    fn log_lambda_grad_into(&self, x: &[f64], out: &mut [f64]);

    /// The score at a fixed `θ`, usable with the generic estimators.
    fn at<'a>(&'a self, theta: &ParamVector) -> Result<ExpFamScore<'a, Self>>
    where
        Self: Sized,
    {
        if theta.len() != self.param_dim() {
            return Err(Error::Input(format!(
                "model has {} parameters but θ has length {}",
                self.param_dim(),
                theta.len()
            )));
        }
        Ok(ExpFamScore {
            family: self,
            theta: theta.clone(),
        })
    }
}

/// [`SteinScore`] view of an exponential family at a fixed `θ`.
pub struct ExpFamScore<'a, M: ExpFamily> {
    family: &'a M,
    theta: ParamVector,
}

impl<M: ExpFamily> SteinScore for ExpFamScore<'_, M> {
    fn dim(&self) -> usize {
        self.family.data_dim()
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        self.family.log_lambda_grad_into(x, out);
        let contribution = self.family.t_jacobian(x).transpose() * &self.theta;
        for (o, c) in out.iter_mut().zip(contribution.iter()) {
            *o += c;
        }
    }
}

/// Gaussian location family `q(x|θ) = N(x | θ, Σ)` with a Gaussian prior on
/// the mean. The score `-Σ⁻¹(x - θ)` is affine in both `x` and `θ`.
#[derive(Debug, Clone)]
pub struct GaussianLocationModel {
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

impl GaussianLocationModel {
    pub fn new(
        sigma: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = sigma.nrows();
        if sigma.ncols() != d || prior_cov.nrows() != d || prior_cov.ncols() != d {
            return Err(Error::Input(
                "covariance matrices must be square of matching size".into(),
            ));
        }
        if prior_mean.len() != d {
            return Err(Error::Input(
                "prior mean length must match dimension".into(),
            ));
        }
        let chol = Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::Numeric("model covariance is not positive definite".into()))?;
        Cholesky::new(prior_cov.clone())
            .ok_or_else(|| Error::Numeric("prior covariance is not positive definite".into()))?;
        let sigma_inv = chol.inverse();
        Ok(GaussianLocationModel {
            sigma,
            sigma_inv,
            prior_mean,
            prior_cov,
        })
    }

    /// `N(θ, var·I)` model with `N(0, prior_var·I)` prior on `θ`.
    pub fn isotropic(d: usize, var: f64, prior_var: f64) -> Result<Self> {
        GaussianLocationModel::new(
            DMatrix::identity(d, d) * var,
            DVector::zeros(d),
            DMatrix::identity(d, d) * prior_var,
        )
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `∇_x log q(x|θ) = -Σ⁻¹(x - θ)`.
    pub fn score(&self, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.at(theta)?.score(x)
    }

    /// `∂ s(x;θ) / ∂θ = Σ⁻¹`, constant in both arguments.
    pub fn score_dtheta(&self) -> DMatrix<f64> {
        self.sigma_inv.clone()
    }

    /// Model dimension when restricted to a subset of coordinates: one free
    /// mean parameter per kept dimension.
    pub fn foreground_dim(subset_size: usize) -> usize {
        subset_size
    }

    /// Average negative log likelihood `(1/N) Σ -log q(X_i|θ)`.
    pub fn mean_nll(&self, theta: &ParamVector, data: &crate::data::DataMatrix) -> Result<f64> {
        let d = self.dim();
        if data.n_cols() != d {
            return Err(Error::Input("data dimension does not match model".into()));
        }
        let chol = Cholesky::new(self.sigma.clone())
            .ok_or_else(|| Error::Numeric("model covariance is not positive definite".into()))?;
        let log_det = 2.0 * (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        let mut quad = 0.0;
        for row in data.rows_iter() {
            let diff = DVector::from_iterator(d, row.iter().zip(theta.iter()).map(|(x, t)| x - t));
            quad += (&diff.transpose() * &self.sigma_inv * &diff)[(0, 0)];
        }
        Ok(0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln()
            + 0.5 * log_det
            + 0.5 * quad / data.n_rows() as f64)
    }
}

impl ExpFamily for GaussianLocationModel {
    fn data_dim(&self) -> usize {
        self.dim()
    }

    fn param_dim(&self) -> usize {
        self.dim()
    }

    fn t_jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.sigma_inv.clone()
    }

    fn log_lambda_grad_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                acc += self.sigma_inv[(a, b)] * x[b];
            }
            out[a] = -acc;
        }
    }
}

/// Generic exponential family built from closures.
pub struct ExpFamModel<J, G>
where
    J: Fn(&[f64]) -> DMatrix<f64> + Sync,
    G: Fn(&[f64]) -> DVector<f64> + Sync,
{
    pub t_jacobian: J,
    pub log_lambda_grad: G,
    pub m_f: usize,
    pub d: usize,
}

impl<J, G> ExpFamily for ExpFamModel<J, G>
where
    J: Fn(&[f64]) -> DMatrix<f64> + Sync,
    G: Fn(&[f64]) -> DVector<f64> + Sync,
{
    fn data_dim(&self) -> usize {
        self.d
    }

    fn param_dim(&self) -> usize {
        self.m_f
    }

    fn t_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        (self.t_jacobian)(x)
    }

    fn log_lambda_grad_into(&self, x: &[f64], out: &mut [f64]) {
        let g = (self.log_lambda_grad)(x);
        out.copy_from_slice(g.as_slice());
    }
}

/// A fixed zero-mean Gaussian with the given precision matrix; the score is
/// `-P x`. This is the evaluation form of the pPCA model and its projections.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    precision: DMatrix<f64>,
}

impl GaussianScore {
    pub fn new(precision: DMatrix<f64>) -> Self {
        GaussianScore { precision }
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
}

impl SteinScore for GaussianScore {
    fn dim(&self) -> usize {
        self.precision.nrows()
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.precision.nrows();
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                acc += self.precision[(a, b)] * x[b];
            }
            out[a] = -acc;
        }
    }
}
