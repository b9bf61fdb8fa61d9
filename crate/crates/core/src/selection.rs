//! Data-selection orchestration: leave-one-out foreground sweeps for the
//! pPCA model, criticism scores, decision accuracy, and the toy consistency
//! curves comparing the SVC against the alternative scores.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::data::{generate_toy, DataMatrix, ToyScenario};
use crate::error::{Error, Result};
use crate::kernel::{precompute_pairwise, KernelSpec, PairwiseStats};
use crate::nksd::{gaussian_nksd_from_stats, quadratic_coeffs};
use crate::optimize::{
    approx_optimum, hessian_fd, minimize_ppca, pca_init, HessianSolve, PpcaOptimOptions,
};
use crate::ppca::{foreground_dim, PpcaChart, PpcaModel};
use crate::score::GaussianLocationModel;
use crate::svc::{
    alt_scores, background_dim, svc_bic, svc_exact_expfam, svc_laplace, AltScores,
    BackgroundDimPolicy, SvcResult, ToyAltInputs, ToyModelSpec,
};

/// An axis-aligned foreground: the subset of kept dimensions (0-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundSpec {
    included: Vec<usize>,
    total_dim: usize,
}

impl ForegroundSpec {
    pub fn new(mut included: Vec<usize>, total_dim: usize) -> Result<Self> {
        if included.is_empty() {
            return Err(Error::Input(
                "foreground must include at least one dimension".into(),
            ));
        }
        let before = included.len();
        included.sort_unstable();
        included.dedup();
        if included.len() != before {
            return Err(Error::Input("foreground dimensions must be unique".into()));
        }
        if let Some(&max) = included.last() {
            if max >= total_dim {
                return Err(Error::Input(format!(
                    "foreground dimension {} out of range for {} columns",
                    max + 1,
                    total_dim
                )));
            }
        }
        Ok(ForegroundSpec {
            included,
            total_dim,
        })
    }

    pub fn full(total_dim: usize) -> Self {
        ForegroundSpec {
            included: (0..total_dim).collect(),
            total_dim,
        }
    }

    /// All dimensions except `excluded` (0-based).
    pub fn excluding(total_dim: usize, excluded: usize) -> Result<Self> {
        ForegroundSpec::new(
            (0..total_dim).filter(|&j| j != excluded).collect(),
            total_dim,
        )
    }

    pub fn included_dims(&self) -> &[usize] {
        &self.included
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn size(&self) -> usize {
        self.included.len()
    }

    /// Background dimension count `d - |S_F|`.
    pub fn r_b(&self) -> usize {
        self.total_dim - self.included.len()
    }

    pub fn is_full(&self) -> bool {
        self.r_b() == 0
    }

    /// Human-readable label with 1-based dimensions, e.g. `full` or `excl:5`.
    pub fn label(&self) -> String {
        if self.is_full() {
            return "full".to_string();
        }
        let excluded: Vec<String> = (0..self.total_dim)
            .filter(|j| !self.included.contains(j))
            .map(|j| (j + 1).to_string())
            .collect();
        format!("excl:{}", excluded.join("+"))
    }
}

/// Keep or drop a data dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Include,
    Exclude,
}

impl Decision {
    pub fn name(&self) -> &'static str {
        match self {
            Decision::Include => "include",
            Decision::Exclude => "exclude",
        }
    }
}

/// Score of one candidate foreground against the reference.
#[derive(Debug, Clone)]
pub struct ForegroundScore {
    pub foreground: ForegroundSpec,
    pub log_k: f64,
    pub log_ratio_vs_reference: f64,
    /// Estimated NKSD at the per-foreground parameter.
    pub nksd_value: f64,
    pub decision: Decision,
    /// Populated when this foreground's evaluation failed; the sweep
    /// continues over the others.
    pub error: Option<String>,
}

/// Result of a leave-one-out sweep.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub reference: ForegroundSpec,
    pub reference_log_k: f64,
    pub per_foreground: Vec<ForegroundScore>,
    pub criticism: Option<Vec<(usize, f64)>>,
    pub balanced_accuracy: Option<f64>,
}

impl SelectionReport {
    /// Per-dimension decisions in dimension order.
    pub fn decisions(&self) -> Vec<Decision> {
        self.per_foreground.iter().map(|f| f.decision).collect()
    }
}

/// Which SVC approximation drives the selection decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Bic,
    Laplace,
}

impl SelectionMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bic" => Ok(SelectionMethod::Bic),
            "laplace" => Ok(SelectionMethod::Laplace),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionMethod::Bic => "bic",
            SelectionMethod::Laplace => "laplace",
        }
    }
}

/// Configuration of a pPCA leave-one-out run.
#[derive(Debug, Clone)]
pub struct LeaveOneOutConfig {
    pub latent_dim: usize,
    pub alpha: f64,
    /// Kernel on the full space; subspaces use the family restricted to
    /// their own dimension.
    pub kernel: KernelSpec,
    pub temp: f64,
    pub policy: BackgroundDimPolicy,
    pub method: SelectionMethod,
    /// Approximate per-foreground optima by the one-Hessian linear response
    /// instead of re-optimizing.
    pub fast: bool,
    pub optim: PpcaOptimOptions,
    /// Also report criticism scores at the full-space optimum.
    pub criticism: bool,
    /// Analysis device: set `m_B_j = m_F0 - m_Fj` instead of the policy
    /// value, to compare directly against criticism scores.
    pub m_b_match_foreground_drop: bool,
}

impl LeaveOneOutConfig {
    pub fn defaults(d: usize, latent_dim: usize) -> Result<Self> {
        Ok(LeaveOneOutConfig {
            latent_dim,
            alpha: crate::ppca::DEFAULT_ALPHA,
            kernel: KernelSpec::factored_imq(-0.5, 1.0, d)?,
            temp: 0.05,
            policy: BackgroundDimPolicy::PitmanYor {
                alpha: 0.5,
                theta_py: 1.0,
                d_py: 0.2,
            },
            method: SelectionMethod::Bic,
            fast: true,
            optim: PpcaOptimOptions::default(),
            criticism: false,
            m_b_match_foreground_drop: false,
        })
    }
}

/// Relative finite-difference step for chart gradients and Hessians.
const CHART_FD_STEP: f64 = 1e-4;

struct ProjectedObjective<'a> {
    chart: &'a PpcaChart,
    stats: &'a PairwiseStats,
    dims: &'a [usize],
}

impl ProjectedObjective<'_> {
    fn eval(&self, delta: &DVector<f64>) -> Result<f64> {
        let model = self.chart.model_at(delta)?;
        let precision = model.marginal_precision(self.dims)?;
        Ok(gaussian_nksd_from_stats(self.stats, &precision))
    }

    fn grad(&self, delta: &DVector<f64>) -> Result<DVector<f64>> {
        let m = delta.len();
        let mut g = DVector::zeros(m);
        for a in 0..m {
            let h = CHART_FD_STEP * (1.0 + delta[a].abs());
            let mut dp = delta.clone();
            let mut dm = delta.clone();
            dp[a] += h;
            dm[a] -= h;
            g[a] = (self.eval(&dp)? - self.eval(&dm)?) / (2.0 * h);
        }
        Ok(g)
    }
}

/// Minimize a projected objective over the full-parameter chart with a
/// fixed-metric quasi-Newton descent preconditioned by the base Hessian.
fn minimize_projected(
    objective: &ProjectedObjective<'_>,
    solver: &HessianSolve,
    start: &DVector<f64>,
    grad_tol: f64,
    max_iters: usize,
) -> Result<(DVector<f64>, f64, f64, bool)> {
    let mut delta = start.clone();
    let mut value = objective.eval(&delta)?;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_iters {
        let grad = objective.grad(&delta)?;
        grad_norm = grad.norm();
        if grad_norm <= grad_tol {
            converged = true;
            break;
        }
        let direction = -(solver.inverse() * &grad);
        let slope = grad.dot(&direction);
        if slope >= 0.0 {
            // Preconditioner not descent-compatible here; fall back to the
            // raw gradient direction.
            let mut step = 1.0 / grad_norm.max(1.0);
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &delta - &grad * step;
                if let Ok(v) = objective.eval(&cand) {
                    if v <= value - 1e-4 * step * grad_norm * grad_norm {
                        delta = cand;
                        value = v;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            continue;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &delta + &direction * step;
            if let Ok(v) = objective.eval(&cand) {
                if v <= value + 1e-4 * step * slope {
                    delta = cand;
                    value = v;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((delta, value, grad_norm, converged))
}

#[allow(clippy::too_many_arguments)]
fn laplace_for_foreground(
    model: &PpcaModel,
    stats: &PairwiseStats,
    dims: &[usize],
    nksd_value: f64,
    grad_norm: f64,
    n: usize,
    temp: f64,
    m_f: f64,
    m_b: f64,
) -> Result<SvcResult> {
    let chart = PpcaChart::new(model.clone());
    let objective = ProjectedObjective {
        chart: &chart,
        stats,
        dims,
    };
    let zero = DVector::zeros(chart.dim());
    let hessian = hessian_fd(|t| objective.eval(t), &zero, CHART_FD_STEP)?;
    let log_prior = chart.log_prior_at_base();
    svc_laplace(
        nksd_value,
        grad_norm,
        log_prior,
        &hessian,
        &zero,
        n,
        temp,
        m_b,
        Some(m_f),
    )
}

/// Leave-one-out data selection for the pPCA model: compare the full data
/// space against every foreground that drops a single dimension, deciding
/// per dimension whether dropping it improves the criterion.
pub fn leave_one_out(
    data: &DataMatrix,
    config: &LeaveOneOutConfig,
    truth: Option<&[Decision]>,
    seed: u64,
) -> Result<SelectionReport> {
    let d = data.n_cols();
    let n = data.n_rows();
    let k = config.latent_dim;
    if d < 2 {
        return Err(Error::Config(
            "leave-one-out needs at least two dimensions".into(),
        ));
    }
    if d.saturating_sub(1) < k {
        return Err(Error::Config(format!(
            "leave-one-out foregrounds have {} dims, too few for latent dimension {k}",
            d - 1
        )));
    }
    if config.kernel.dim() != d {
        return Err(Error::Config("kernel dimension must match the data".into()));
    }
    config.policy.validate()?;

    // Reference fit on the full space.
    let stats_full = precompute_pairwise(&config.kernel, data)?;
    let mut rng = crate::data::seeded_rng(0x5e1ec7, seed);
    let init = pca_init(data, k, config.alpha)?;
    let fit0 = minimize_ppca(&stats_full, vec![init], &config.optim, &mut rng)?;
    let m_f0 = foreground_dim(d, k)? as f64;

    let chart = PpcaChart::new(fit0.model.clone());
    let zero = DVector::zeros(chart.dim());

    // Base objective in chart coordinates (full space), its Hessian at the
    // optimum, and the prefactored solve reused across foregrounds.
    let full_dims: Vec<usize> = (0..d).collect();
    let base_objective = ProjectedObjective {
        chart: &chart,
        stats: &stats_full,
        dims: &full_dims,
    };
    let base_hessian = hessian_fd(|t| base_objective.eval(t), &zero, CHART_FD_STEP)?;
    let solver = HessianSolve::new(&base_hessian)?;

    let reference = ForegroundSpec::full(d);
    let reference_log_k = match config.method {
        SelectionMethod::Bic => svc_bic(fit0.objective, &zero, n, config.temp, m_f0, 0.0)?.log_k,
        SelectionMethod::Laplace => {
            let log_prior = chart.log_prior_at_base();
            svc_laplace(
                fit0.objective,
                fit0.grad_norm,
                log_prior,
                &base_hessian,
                &zero,
                n,
                config.temp,
                0.0,
                Some(m_f0),
            )?
            .log_k
        }
    };

    // Per-foreground work, parallel over excluded dimensions with a
    // deterministic ordered collect.
    let results: Vec<Result<ForegroundScore>> = (0..d)
        .into_par_iter()
        .map(|excluded| {
            let foreground = ForegroundSpec::excluding(d, excluded)?;
            let dims = foreground.included_dims().to_vec();
            let data_j = data.project(&dims)?;
            let spec_j = config.kernel.restrict(dims.len())?;
            let stats_j = precompute_pairwise(&spec_j, &data_j)?;
            let m_fj = foreground_dim(dims.len(), k)? as f64;
            let m_bj = if config.m_b_match_foreground_drop {
                m_f0 - m_fj
            } else {
                background_dim(&config.policy, n, foreground.r_b())?
            };

            let objective = ProjectedObjective {
                chart: &chart,
                stats: &stats_j,
                dims: &dims,
            };
            let grad0 = objective.grad(&zero)?;
            let response = approx_optimum(&solver, &zero, &grad0);

            let (delta_j, value_j, grad_norm_j) = if config.fast {
                let value = objective.eval(&response.theta)?;
                (response.theta.clone(), value, f64::NAN)
            } else {
                let (delta, value, gnorm, _converged) = minimize_projected(
                    &objective,
                    &solver,
                    &response.theta,
                    config.optim.grad_tol.max(1e-7),
                    200,
                )?;
                (delta, value, gnorm)
            };

            let log_k = match config.method {
                SelectionMethod::Bic => {
                    svc_bic(value_j, &delta_j, n, config.temp, m_fj, m_bj)?.log_k
                }
                SelectionMethod::Laplace => {
                    let model_j = chart.model_at(&delta_j)?;
                    laplace_for_foreground(
                        &model_j,
                        &stats_j,
                        &dims,
                        value_j,
                        if grad_norm_j.is_nan() {
                            0.0
                        } else {
                            grad_norm_j
                        },
                        n,
                        config.temp,
                        m_fj,
                        m_bj,
                    )?
                    .log_k
                }
            };

            let log_ratio = log_k - reference_log_k;
            let decision = if log_ratio <= 0.0 {
                Decision::Include
            } else {
                Decision::Exclude
            };
            Ok(ForegroundScore {
                foreground,
                log_k,
                log_ratio_vs_reference: log_ratio,
                nksd_value: value_j,
                decision,
                error: None,
            })
        })
        .collect();

    let mut per_foreground = Vec::with_capacity(d);
    for (excluded, res) in results.into_iter().enumerate() {
        match res {
            Ok(score) => per_foreground.push(score),
            Err(e) => per_foreground.push(ForegroundScore {
                foreground: ForegroundSpec::excluding(d, excluded)?,
                log_k: f64::NAN,
                log_ratio_vs_reference: f64::NAN,
                nksd_value: f64::NAN,
                decision: Decision::Include,
                error: Some(e.to_string()),
            }),
        }
    }

    let criticism = if config.criticism {
        Some(criticism_scores(
            &fit0.model,
            data,
            &config.kernel,
            config.temp,
            &stats_full,
        )?)
    } else {
        None
    };

    let balanced = match truth {
        Some(t) => Some(balanced_accuracy(
            &per_foreground
                .iter()
                .map(|f| f.decision)
                .collect::<Vec<_>>(),
            t,
        )?),
        None => None,
    };

    Ok(SelectionReport {
        reference,
        reference_log_k,
        per_foreground,
        criticism,
        balanced_accuracy: balanced,
    })
}

/// Criticism scores at the full-space optimum: for each dimension `j`,
/// `(N/T) [NKSD-hat(full) - NKSD-hat(without j)]`, both at the same `θ`.
pub fn criticism_scores(
    model: &PpcaModel,
    data: &DataMatrix,
    kernel: &KernelSpec,
    temp: f64,
    stats_full: &PairwiseStats,
) -> Result<Vec<(usize, f64)>> {
    let d = data.n_cols();
    let n = data.n_rows() as f64;
    let full_value = gaussian_nksd_from_stats(stats_full, &model.precision());
    let mut scores = Vec::with_capacity(d);
    for j in 0..d {
        let dims: Vec<usize> = (0..d).filter(|&a| a != j).collect();
        let data_j = data.project(&dims)?;
        let spec_j = kernel.restrict(dims.len())?;
        let stats_j = precompute_pairwise(&spec_j, &data_j)?;
        let value_j = gaussian_nksd_from_stats(&stats_j, &model.marginal_precision(&dims)?);
        scores.push((j, n / temp * (full_value - value_j)));
    }
    Ok(scores)
}

/// `(TN/negatives + TP/positives) / 2` with positives = include.
pub fn balanced_accuracy(decisions: &[Decision], truth: &[Decision]) -> Result<f64> {
    if decisions.len() != truth.len() {
        return Err(Error::Input("decision and truth lengths differ".into()));
    }
    let positives = truth.iter().filter(|t| **t == Decision::Include).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Input(
            "balanced accuracy undefined when the truth has a single class".into(),
        ));
    }
    let tp = decisions
        .iter()
        .zip(truth)
        .filter(|(d, t)| **d == Decision::Include && **t == Decision::Include)
        .count();
    let tn = decisions
        .iter()
        .zip(truth)
        .filter(|(d, t)| **d == Decision::Exclude && **t == Decision::Exclude)
        .count();
    Ok(0.5 * (tn as f64 / negatives as f64 + tp as f64 / positives as f64))
}

/// Selection scores available on the toy suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Svc,
    KA,
    KB,
    KC,
    KD,
}

impl ScoreKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "svc" => Ok(ScoreKind::Svc),
            "k_a" => Ok(ScoreKind::KA),
            "k_b" => Ok(ScoreKind::KB),
            "k_c" => Ok(ScoreKind::KC),
            "k_d" => Ok(ScoreKind::KD),
            other => Err(Error::Config(format!("unknown score '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Svc => "svc",
            ScoreKind::KA => "k_a",
            ScoreKind::KB => "k_b",
            ScoreKind::KC => "k_c",
            ScoreKind::KD => "k_d",
        }
    }
}

/// One point of a consistency curve.
#[derive(Debug, Clone)]
pub struct CurveRow {
    pub scenario: ToyScenario,
    pub score: ScoreKind,
    pub n: usize,
    pub seed: u64,
    pub log_ratio: f64,
    /// The log ratio scaled by the rate of its theoretical limit:
    /// `1/N`, `1/log N`, or `1/(N^α log N)` depending on scenario and
    /// background policy.
    pub normalized: f64,
}

/// Both branches of a toy comparison, per score.
struct ToyComparison {
    svc: (f64, f64),
    alt1: AltScores,
    alt2: AltScores,
}

const TOY_PRIOR_VAR: f64 = 10.0;

fn toy_comparison(
    scenario: ToyScenario,
    data: &DataMatrix,
    temp: f64,
    policy: &BackgroundDimPolicy,
) -> Result<ToyComparison> {
    let n = data.n_rows();
    let gen_vars = scenario.generator_variances();

    let exact_svc = |qf: &crate::nksd::QuadraticForm, m_b: f64| -> Result<f64> {
        let m = qf.param_dim();
        Ok(svc_exact_expfam(
            qf,
            &DVector::zeros(m),
            &(nalgebra::DMatrix::identity(m, m) * TOY_PRIOR_VAR),
            temp,
            m_b,
        )?
        .log_k)
    };

    match scenario {
        // F1 = dimension 1, F2 = dimension 2; the model N(θ, 1) is correct
        // only on F1 under diag(1, 1/2) data.
        ToyScenario::Ds => {
            let m_b = background_dim(policy, n, 1)?;
            let model = GaussianLocationModel::isotropic(1, 1.0, TOY_PRIOR_VAR)?;
            let spec = KernelSpec::rbf(1.0, 1)?;
            let mut branches = Vec::with_capacity(2);
            for (dim, var) in [(0usize, gen_vars[0]), (1usize, gen_vars[1])] {
                let data_f = data.project(&[dim])?;
                let qf = quadratic_coeffs(&model, &data_f, &spec)?;
                let svc = exact_svc(&qf, m_b)?;
                let alt = alt_scores(&ToyAltInputs {
                    data_f: &data_f,
                    model: ToyModelSpec {
                        model_var: 1.0,
                        prior_var: TOY_PRIOR_VAR,
                        free_mean: true,
                    },
                    qf: &qf,
                    temp,
                    m_b,
                    generator_variances: Some(&[var]),
                })?;
                branches.push((svc, alt));
            }
            let (svc2, alt2) = branches.pop().unwrap();
            let (svc1, alt1) = branches.pop().unwrap();
            Ok(ToyComparison {
                svc: (svc1, svc2),
                alt1,
                alt2,
            })
        }
        // F1 = both dimensions (empty background), F2 = dimension 1 with a
        // one-dimensional background; the model is correct everywhere.
        ToyScenario::NestedDs => {
            let model2d = GaussianLocationModel::isotropic(2, 1.0, TOY_PRIOR_VAR)?;
            let spec2 = KernelSpec::rbf(1.0, 2)?;
            let qf1 = quadratic_coeffs(&model2d, data, &spec2)?;
            let svc1 = exact_svc(&qf1, 0.0)?;
            let alt1 = alt_scores(&ToyAltInputs {
                data_f: data,
                model: ToyModelSpec {
                    model_var: 1.0,
                    prior_var: TOY_PRIOR_VAR,
                    free_mean: true,
                },
                qf: &qf1,
                temp,
                m_b: 0.0,
                generator_variances: Some(&gen_vars),
            })?;

            let m_b2 = background_dim(policy, n, 1)?;
            let data_f = data.project(&[0])?;
            let model1d = GaussianLocationModel::isotropic(1, 1.0, TOY_PRIOR_VAR)?;
            let spec1 = KernelSpec::rbf(1.0, 1)?;
            let qf2 = quadratic_coeffs(&model1d, &data_f, &spec1)?;
            let svc2 = exact_svc(&qf2, m_b2)?;
            let alt2 = alt_scores(&ToyAltInputs {
                data_f: &data_f,
                model: ToyModelSpec {
                    model_var: 1.0,
                    prior_var: TOY_PRIOR_VAR,
                    free_mean: true,
                },
                qf: &qf2,
                temp,
                m_b: m_b2,
                generator_variances: Some(&gen_vars[..1]),
            })?;
            Ok(ToyComparison {
                svc: (svc1, svc2),
                alt1,
                alt2,
            })
        }
        // Same foreground (everything), two models: N(θ, I) vs N(θ, 2I).
        ToyScenario::Ms => {
            let spec = KernelSpec::rbf(1.0, 2)?;
            let mut branches = Vec::with_capacity(2);
            for var in [1.0, 2.0] {
                let model = GaussianLocationModel::isotropic(2, var, TOY_PRIOR_VAR)?;
                let qf = quadratic_coeffs(&model, data, &spec)?;
                let svc = exact_svc(&qf, 0.0)?;
                let alt = alt_scores(&ToyAltInputs {
                    data_f: data,
                    model: ToyModelSpec {
                        model_var: var,
                        prior_var: TOY_PRIOR_VAR,
                        free_mean: true,
                    },
                    qf: &qf,
                    temp,
                    m_b: 0.0,
                    generator_variances: Some(&gen_vars),
                })?;
                branches.push((svc, alt));
            }
            let (svc2, alt2) = branches.pop().unwrap();
            let (svc1, alt1) = branches.pop().unwrap();
            Ok(ToyComparison {
                svc: (svc1, svc2),
                alt1,
                alt2,
            })
        }
        // Nested models on the full space: the fixed N(0, I) against the
        // free-mean N(θ, I).
        ToyScenario::NestedMs => {
            let spec = KernelSpec::rbf(1.0, 2)?;
            let model = GaussianLocationModel::isotropic(2, 1.0, TOY_PRIOR_VAR)?;
            let qf = quadratic_coeffs(&model, data, &spec)?;
            // The fixed model is the free family at θ = 0, so its estimated
            // NKSD is the constant coefficient.
            let svc1 = -(n as f64) / temp * qf.c_scalar;
            let alt1 = alt_scores(&ToyAltInputs {
                data_f: data,
                model: ToyModelSpec {
                    model_var: 1.0,
                    prior_var: TOY_PRIOR_VAR,
                    free_mean: false,
                },
                qf: &qf,
                temp,
                m_b: 0.0,
                generator_variances: Some(&gen_vars),
            })?;
            let svc2 = exact_svc(&qf, 0.0)?;
            let alt2 = alt_scores(&ToyAltInputs {
                data_f: data,
                model: ToyModelSpec {
                    model_var: 1.0,
                    prior_var: TOY_PRIOR_VAR,
                    free_mean: true,
                },
                qf: &qf,
                temp,
                m_b: 0.0,
                generator_variances: Some(&gen_vars),
            })?;
            Ok(ToyComparison {
                svc: (svc1, svc2),
                alt1,
                alt2,
            })
        }
    }
}

/// Rate normalization for the scenario under the given policy.
fn normalizer(scenario: ToyScenario, policy: &BackgroundDimPolicy, n: usize) -> f64 {
    let nf = n as f64;
    match scenario {
        ToyScenario::Ds | ToyScenario::Ms => 1.0 / nf,
        ToyScenario::NestedMs => 1.0 / nf.ln(),
        ToyScenario::NestedDs => {
            if policy.grows_with_n() {
                1.0 / (nf.powf(policy.growth_exponent()) * nf.ln())
            } else {
                1.0 / nf.ln()
            }
        }
    }
}

/// Run the toy comparison over a grid of sample sizes and seeds, emitting
/// one row per `(score, n, seed)`.
pub fn consistency_curves(
    scenario: ToyScenario,
    scores: &[ScoreKind],
    n_grid: &[usize],
    seeds: &[u64],
    temp: f64,
    policy: &BackgroundDimPolicy,
) -> Result<Vec<CurveRow>> {
    if scores.is_empty() {
        return Err(Error::Config("at least one score is required".into()));
    }
    if n_grid.iter().any(|&n| n < 2) {
        return Err(Error::Config("sample sizes must be at least 2".into()));
    }
    policy.validate()?;

    let cells: Vec<(usize, u64)> = n_grid
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let computed: Vec<Result<Vec<CurveRow>>> = cells
        .into_par_iter()
        .map(|(n, seed)| {
            let data = generate_toy(scenario, n, seed);
            let cmp = toy_comparison(scenario, &data, temp, policy)?;
            let norm = normalizer(scenario, policy, n);
            let mut rows = Vec::with_capacity(scores.len());
            for &score in scores {
                let log_ratio = match score {
                    ScoreKind::Svc => cmp.svc.0 - cmp.svc.1,
                    ScoreKind::KA => cmp.alt1.log_k_a - cmp.alt2.log_k_a,
                    ScoreKind::KB => cmp.alt1.log_k_b - cmp.alt2.log_k_b,
                    ScoreKind::KC => {
                        crate::svc::require_k_c(&cmp.alt1)? - crate::svc::require_k_c(&cmp.alt2)?
                    }
                    ScoreKind::KD => cmp.alt1.log_k_d - cmp.alt2.log_k_d,
                };
                rows.push(CurveRow {
                    scenario,
                    score,
                    n,
                    seed,
                    log_ratio,
                    normalized: log_ratio * norm,
                });
            }
            Ok(rows)
        })
        .collect();

    let mut out = Vec::new();
    for rows in computed {
        out.extend(rows?);
    }
    Ok(out)
}
