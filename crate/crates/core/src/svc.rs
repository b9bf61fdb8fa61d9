//! The Stein volume criterion: a generalized marginal likelihood
//! `K = (2π/N)^(m_B/2) ∫ exp(-(N/T) NKSD-hat) π(θ) dθ`
//! with exact (exponential family), Laplace and BIC evaluation paths, plus
//! the alternative scores used for comparisons on the Gaussian toy suite.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::function::gamma::gamma;

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::nksd::QuadraticForm;
use crate::optimize::minimize_quadratic;
use crate::score::ParamVector;

/// Gradient norm above which a Laplace evaluation is flagged as being away
/// from a stationary point.
pub const STATIONARITY_TOL: f64 = 1e-3;

/// How the effective background dimension `m_B` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum BackgroundDimPolicy {
    /// Fixed `m_B`.
    Constant { m_b: f64 },
    /// `m_B = c_b · r_B`, independent of sample size.
    PerDim { c_b: f64 },
    /// `m_B = c_b · r_B · sqrt(N)`, the recommended default scaling.
    PerDimSqrtN { c_b: f64 },
    /// Pitman-Yor mixture asymptotics:
    /// `m_B = d_py · Γ(θ+1) / (α Γ(θ+α)) · N^α`.
    PitmanYor {
        alpha: f64,
        theta_py: f64,
        d_py: f64,
    },
}

impl BackgroundDimPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BackgroundDimPolicy::Constant { m_b } => {
                if m_b < 0.0 {
                    return Err(Error::Config("constant m_B must be nonnegative".into()));
                }
            }
            BackgroundDimPolicy::PerDim { c_b } | BackgroundDimPolicy::PerDimSqrtN { c_b } => {
                if c_b < 0.0 {
                    return Err(Error::Config(
                        "per-dimension coefficient must be nonnegative".into(),
                    ));
                }
            }
            BackgroundDimPolicy::PitmanYor {
                alpha,
                theta_py,
                d_py,
            } => {
                if !(0.0 < alpha && alpha < 1.0) {
                    return Err(Error::Config(format!(
                        "Pitman-Yor discount must lie in (0,1), got {alpha}"
                    )));
                }
                if theta_py <= -alpha {
                    return Err(Error::Config(format!(
                        "Pitman-Yor concentration must exceed -{alpha}, got {theta_py}"
                    )));
                }
                if d_py <= 0.0 {
                    return Err(Error::Config("Pitman-Yor D must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Parse CLI syntax: `constant:M`, `perdim:C`, `perdim-sqrtn:C`,
    /// `pitman-yor:ALPHA,THETA,D`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, args) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("policy '{s}' must look like name:args")))?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("invalid policy number '{a}'")))
            })
            .collect::<Result<_>>()?;
        let policy = match (name, nums.as_slice()) {
            ("constant", [m_b]) => BackgroundDimPolicy::Constant { m_b: *m_b },
            ("perdim", [c_b]) => BackgroundDimPolicy::PerDim { c_b: *c_b },
            ("perdim-sqrtn", [c_b]) => BackgroundDimPolicy::PerDimSqrtN { c_b: *c_b },
            ("pitman-yor", [alpha, theta_py, d_py]) => BackgroundDimPolicy::PitmanYor {
                alpha: *alpha,
                theta_py: *theta_py,
                d_py: *d_py,
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown policy '{name}' or wrong number of arguments"
                )))
            }
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn describe(&self) -> String {
        match *self {
            BackgroundDimPolicy::Constant { m_b } => format!("constant:{m_b}"),
            BackgroundDimPolicy::PerDim { c_b } => format!("perdim:{c_b}"),
            BackgroundDimPolicy::PerDimSqrtN { c_b } => format!("perdim-sqrtn:{c_b}"),
            BackgroundDimPolicy::PitmanYor {
                alpha,
                theta_py,
                d_py,
            } => {
                format!("pitman-yor:{alpha},{theta_py},{d_py}")
            }
        }
    }

    /// Whether `m_B` grows with `N`; decides the normalization of nested
    /// selection statistics.
    pub fn grows_with_n(&self) -> bool {
        matches!(
            self,
            BackgroundDimPolicy::PerDimSqrtN { .. } | BackgroundDimPolicy::PitmanYor { .. }
        )
    }

    /// Growth exponent `α` in `m_B ∝ N^α` (zero for size-independent
    /// policies).
    pub fn growth_exponent(&self) -> f64 {
        match *self {
            BackgroundDimPolicy::PerDimSqrtN { .. } => 0.5,
            BackgroundDimPolicy::PitmanYor { alpha, .. } => alpha,
            _ => 0.0,
        }
    }
}

/// Evaluate the policy at a sample size and background dimension count.
pub fn background_dim(policy: &BackgroundDimPolicy, n: usize, r_b: usize) -> Result<f64> {
    policy.validate()?;
    if n == 0 {
        return Err(Error::Input("sample size must be positive".into()));
    }
    let nf = n as f64;
    let rb = r_b as f64;
    Ok(match *policy {
        BackgroundDimPolicy::Constant { m_b } => m_b,
        BackgroundDimPolicy::PerDim { c_b } => c_b * rb,
        BackgroundDimPolicy::PerDimSqrtN { c_b } => c_b * rb * nf.sqrt(),
        // The Pitman-Yor growth law depends on n alone; callers zero it out
        // themselves for an empty background space.
        BackgroundDimPolicy::PitmanYor {
            alpha,
            theta_py,
            d_py,
        } => {
            let _ = rb;
            d_py * gamma(theta_py + 1.0) / (alpha * gamma(theta_py + alpha)) * nf.powf(alpha)
        }
    })
}

/// Which approximation produced an [`SvcResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvcMethod {
    Exact,
    Laplace,
    Bic,
}

/// Health of an SVC evaluation; non-`Ok` values flag violated preconditions
/// rather than aborting, so sweeps can keep going and report.
#[derive(Debug, Clone, PartialEq)]
pub enum SvcStatus {
    Ok,
    /// Gradient at the supplied optimum exceeded [`STATIONARITY_TOL`].
    NotStationary {
        grad_norm: f64,
    },
    /// The NKSD Hessian had non-positive eigenvalues (saddle or flat
    /// direction); `|det|` was used per the definition but the Laplace
    /// derivation does not hold there.
    IndefiniteHessian,
}

/// A decomposed log Stein volume criterion.
#[derive(Debug, Clone)]
pub struct SvcResult {
    pub log_k: f64,
    /// `-(N/T) NKSD-hat(θ_N)`.
    pub fit_term: f64,
    /// Everything contributed by the foreground parameter volume (prior,
    /// log-determinant and `(m_F/2) log(2π/N)` terms as applicable).
    pub foreground_volume: f64,
    /// `(m_B/2) log(2π/N)`.
    pub background_volume: f64,
    pub theta_opt: ParamVector,
    pub hessian: Option<DMatrix<f64>>,
    pub method: SvcMethod,
    pub status: SvcStatus,
}

fn log_2pi_over_n(n: usize) -> f64 {
    (2.0 * std::f64::consts::PI / n as f64).ln()
}

/// Closed-form SVC for an exponential family with Gaussian prior
/// `N(μ, Σ₀)`: the Gaussian integral of `exp(-(N/T)(θᵀAθ+Bᵀθ+C))` against
/// the prior.
pub fn svc_exact_expfam(
    qf: &QuadraticForm,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    temp: f64,
    m_b: f64,
) -> Result<SvcResult> {
    if !(temp > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temp}"
        )));
    }
    let m = qf.param_dim();
    if prior_mean.len() != m || prior_cov.nrows() != m || prior_cov.ncols() != m {
        return Err(Error::Input(
            "prior dimensions do not match the quadratic form".into(),
        ));
    }
    let n = qf.n;
    let nf = n as f64;

    let prior_chol = Cholesky::new(prior_cov.clone())
        .ok_or_else(|| Error::Numeric("prior covariance is not positive definite".into()))?;
    let prior_prec = prior_chol.inverse();
    let log_det_prior = 2.0 * (0..m).map(|i| prior_chol.l()[(i, i)].ln()).sum::<f64>();

    // Combined precision (2N/T) A + Σ₀⁻¹ must be positive definite.
    let p = &qf.a * (2.0 * nf / temp) + &prior_prec;
    let p_chol = Cholesky::new(p).ok_or_else(|| {
        Error::Numeric(
            "combined precision is not positive definite (indefinite A, possible for tiny n)"
                .into(),
        )
    })?;
    let log_det_p = 2.0 * (0..m).map(|i| p_chol.l()[(i, i)].ln()).sum::<f64>();

    let b_lin = -(&qf.b) * (nf / temp) + &prior_prec * prior_mean;
    let half_quad = 0.5 * b_lin.dot(&p_chol.solve(&b_lin));
    let prior_quad = 0.5 * (prior_mean.transpose() * &prior_prec * prior_mean)[(0, 0)];

    let background_volume = 0.5 * m_b * log_2pi_over_n(n);
    let log_k = background_volume - 0.5 * log_det_prior - 0.5 * log_det_p + half_quad
        - nf / temp * qf.c_scalar
        - prior_quad;

    let opt = minimize_quadratic(qf)?;
    let fit_term = -nf / temp * opt.objective;
    Ok(SvcResult {
        log_k,
        fit_term,
        foreground_volume: log_k - fit_term - background_volume,
        background_volume,
        theta_opt: opt.theta_opt,
        hessian: Some(qf.hessian()),
        method: SvcMethod::Exact,
        status: SvcStatus::Ok,
    })
}

/// Laplace approximation of the log SVC:
/// `-(N/T) NKSD-hat(θ_N) + log π(θ_N) - ½ log |det (1/T)∇² NKSD-hat(θ_N)|
///  + ((m_F+m_B)/2) log(2π/N)`.
///
/// `hessian` is `∇²_θ NKSD-hat` at `θ_opt` (without the `1/T`), in the same
/// coordinates as `log_prior`. When `m_f` is below the Hessian dimension the
/// extra directions are nuisance parameters of a projected model; the
/// log-determinant then keeps only the `m_f` largest-magnitude eigenvalues.
#[allow(clippy::too_many_arguments)]
pub fn svc_laplace(
    nksd_at_opt: f64,
    grad_norm: f64,
    log_prior: f64,
    hessian: &DMatrix<f64>,
    theta_opt: &ParamVector,
    n: usize,
    temp: f64,
    m_b: f64,
    m_f: Option<f64>,
) -> Result<SvcResult> {
    if !(temp > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temp}"
        )));
    }
    let m_chart = hessian.nrows();
    if hessian.ncols() != m_chart || theta_opt.len() != m_chart {
        return Err(Error::Input("hessian and θ dimensions do not match".into()));
    }
    let m_f = m_f.unwrap_or(m_chart as f64);
    let keep = m_f.round() as usize;
    if keep > m_chart {
        return Err(Error::Input(
            "effective dimension exceeds the Hessian size".into(),
        ));
    }

    let mut status = if grad_norm > STATIONARITY_TOL {
        SvcStatus::NotStationary { grad_norm }
    } else {
        SvcStatus::Ok
    };

    let scaled = hessian / temp;
    let eig = scaled.symmetric_eigen();
    let mut mags: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    mags.sort_by(|a, b| b.abs().partial_cmp(&a.abs()).unwrap());
    let retained = &mags[..keep];
    if retained.iter().any(|&l| l <= 0.0) && status == SvcStatus::Ok {
        status = SvcStatus::IndefiniteHessian;
    }
    let log_abs_det: f64 = retained.iter().map(|l| l.abs().ln()).sum();
    if !log_abs_det.is_finite() {
        return Err(Error::Numeric(
            "Laplace Hessian has a zero eigenvalue".into(),
        ));
    }

    let nf = n as f64;
    let fit_term = -nf / temp * nksd_at_opt;
    let background_volume = 0.5 * m_b * log_2pi_over_n(n);
    let foreground_volume = log_prior - 0.5 * log_abs_det + 0.5 * m_f * log_2pi_over_n(n);
    Ok(SvcResult {
        log_k: fit_term + foreground_volume + background_volume,
        fit_term,
        foreground_volume,
        background_volume,
        theta_opt: theta_opt.clone(),
        hessian: Some(hessian.clone()),
        method: SvcMethod::Laplace,
        status,
    })
}

/// BIC approximation of the log SVC:
/// `-(N/T) NKSD-hat(θ_N) + ((m_F+m_B)/2) log(2π/N)`.
pub fn svc_bic(
    nksd_at_opt: f64,
    theta_opt: &ParamVector,
    n: usize,
    temp: f64,
    m_f: f64,
    m_b: f64,
) -> Result<SvcResult> {
    if !(temp > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temp}"
        )));
    }
    let nf = n as f64;
    let fit_term = -nf / temp * nksd_at_opt;
    let background_volume = 0.5 * m_b * log_2pi_over_n(n);
    let foreground_volume = 0.5 * m_f * log_2pi_over_n(n);
    Ok(SvcResult {
        log_k: fit_term + foreground_volume + background_volume,
        fit_term,
        foreground_volume,
        background_volume,
        theta_opt: theta_opt.clone(),
        hessian: None,
        method: SvcMethod::Bic,
        status: SvcStatus::Ok,
    })
}

/// Exact log marginal likelihood of i.i.d. observations under
/// `x ~ N(θ, σ² I)` with prior `θ ~ N(0, τ² I)`, summed over independent
/// dimensions.
pub fn gaussian_marginal_loglik(data: &DataMatrix, sigma2: f64, tau2: f64) -> f64 {
    let n = data.n_rows() as f64;
    let mut total = 0.0;
    for j in 0..data.n_cols() {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for row in data.rows_iter() {
            sum += row[j];
            sum_sq += row[j] * row[j];
        }
        total += -0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln()
            + 0.5 * (sigma2 / (sigma2 + n * tau2)).ln()
            - sum_sq / (2.0 * sigma2)
            + tau2 * sum * sum / (2.0 * sigma2 * (sigma2 + n * tau2));
    }
    total
}

/// Log likelihood of the data under a zero-mean isotropic Gaussian with the
/// given variance (the fixed, parameter-free toy model).
pub fn gaussian_fixed_loglik(data: &DataMatrix, sigma2: f64) -> f64 {
    let n = data.n_rows() as f64;
    let d = data.n_cols() as f64;
    let mut sum_sq = 0.0;
    for row in data.rows_iter() {
        for v in row {
            sum_sq += v * v;
        }
    }
    -0.5 * n * d * (2.0 * std::f64::consts::PI * sigma2).ln() - sum_sq / (2.0 * sigma2)
}

/// Differential entropy of an axis-aligned Gaussian: `Σ_j ½ log(2πe σ_j²)`.
pub fn gaussian_entropy(variances: &[f64]) -> f64 {
    variances
        .iter()
        .map(|&v| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln())
        .sum()
}

/// The foreground model of a toy instance: an isotropic Gaussian location
/// family (or the parameter-free unit model when `free_mean` is off).
#[derive(Debug, Clone, Copy)]
pub struct ToyModelSpec {
    pub model_var: f64,
    pub prior_var: f64,
    pub free_mean: bool,
}

/// Inputs for the alternative scores on a toy instance. The data is already
/// projected onto the foreground, and `qf` is the quadratic NKSD on it.
pub struct ToyAltInputs<'a> {
    pub data_f: &'a DataMatrix,
    pub model: ToyModelSpec,
    pub qf: &'a QuadraticForm,
    pub temp: f64,
    pub m_b: f64,
    /// True per-dimension variances of the generator on the foreground,
    /// required for the entropy-based score `K^(c)`.
    pub generator_variances: Option<&'a [f64]>,
}

/// The four alternative log scores of the comparison suite.
#[derive(Debug, Clone, Copy)]
pub struct AltScores {
    /// Foreground marginal likelihood with background volume.
    pub log_k_a: f64,
    /// Foreground marginal NKSD without background volume.
    pub log_k_b: f64,
    /// Foreground marginal KL (needs the true entropy) with background
    /// volume, or None when the entropy is unavailable.
    pub log_k_c: Option<f64>,
    /// Minimized foreground NKSD with background volume only.
    pub log_k_d: f64,
}

/// Compute `K^(a)`–`K^(d)` for a synthetic toy instance.
pub fn alt_scores(inputs: &ToyAltInputs<'_>) -> Result<AltScores> {
    let n = inputs.data_f.n_rows();
    let nf = n as f64;
    let vol_b = 0.5 * inputs.m_b * log_2pi_over_n(n);

    let log_marginal = if inputs.model.free_mean {
        gaussian_marginal_loglik(
            inputs.data_f,
            inputs.model.model_var,
            inputs.model.prior_var,
        )
    } else {
        gaussian_fixed_loglik(inputs.data_f, inputs.model.model_var)
    };
    let log_k_a = vol_b + log_marginal;

    let (min_nksd, log_k_b) = if inputs.model.free_mean {
        let m = inputs.qf.param_dim();
        let prior_mean = DVector::zeros(m);
        let prior_cov = DMatrix::identity(m, m) * inputs.model.prior_var;
        let exact = svc_exact_expfam(inputs.qf, &prior_mean, &prior_cov, inputs.temp, 0.0)?;
        let opt = minimize_quadratic(inputs.qf)?;
        (opt.objective, exact.log_k)
    } else {
        let at_zero = inputs.qf.c_scalar;
        (at_zero, -nf / inputs.temp * at_zero)
    };
    let log_k_d = vol_b - nf / inputs.temp * min_nksd;

    let log_k_c = match inputs.generator_variances {
        Some(vars) => {
            if vars.len() != inputs.data_f.n_cols() {
                return Err(Error::Config(
                    "generator variances must match the foreground dimension".into(),
                ));
            }
            Some(log_k_a + nf * gaussian_entropy(vars))
        }
        None => None,
    };

    Ok(AltScores {
        log_k_a,
        log_k_b,
        log_k_c,
        log_k_d,
    })
}

/// `K^(c)` outside a synthetic context is unsupported; helper for callers
/// that must fail loudly instead of silently skipping.
pub fn require_k_c(scores: &AltScores) -> Result<f64> {
    scores.log_k_c.ok_or_else(|| {
        Error::Config("K^(c) needs the generator entropy; only synthetic toys provide it".into())
    })
}
