//! Minimum-NKSD parameter estimation: closed form for quadratic objectives,
//! QR-retraction gradient descent for pPCA, finite-difference Hessians, and
//! the one-Hessian linear response used to re-optimize across many
//! foregrounds cheaply.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::PairwiseStats;
use crate::nksd::QuadraticForm;
use crate::ppca::{
    ppca_nksd_collapsed, ppca_nksd_gradients, qf_retract, random_stiefel, PpcaModel,
};
use crate::score::ParamVector;

/// Default gradient norm below which an optimum is accepted.
pub const GRAD_TOL: f64 = 1e-6;
/// Default iteration cap for the retraction descent.
pub const MAX_ITERS: usize = 5000;

/// Outcome of an optimization run.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub theta_opt: ParamVector,
    /// Objective value at `theta_opt`.
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Exact minimizer of `θᵀAθ + Bᵀθ + C`: `θ = -A⁻¹B/2` for positive definite
/// (symmetrized) `A`.
pub fn minimize_quadratic(qf: &QuadraticForm) -> Result<OptimResult> {
    let chol = Cholesky::new(qf.a.clone()).ok_or_else(|| {
        Error::Numeric("quadratic coefficient matrix is not positive definite".into())
    })?;
    let theta = -chol.solve(&qf.b) * 0.5;
    let grad_norm = qf.grad(&theta).norm();
    let objective = qf.c_scalar - 0.25 * qf.b.dot(&chol.solve(&qf.b));
    Ok(OptimResult {
        theta_opt: theta,
        objective,
        grad_norm,
        iterations: 0,
        converged: true,
    })
}

/// Symmetric central-difference Hessian with per-coordinate steps
/// `rel_step * (1 + |θ_i|)`.
pub fn hessian_fd<F>(mut f: F, theta: &ParamVector, rel_step: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    let m = theta.len();
    let steps: Vec<f64> = theta.iter().map(|t| rel_step * (1.0 + t.abs())).collect();
    let f0 = f(theta)?;
    let mut h = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[i] += steps[i];
        tm[i] -= steps[i];
        let fp = f(&tp)?;
        let fm = f(&tm)?;
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]);
        for j in (i + 1)..m {
            let mut tpp = theta.clone();
            let mut tpm = theta.clone();
            let mut tmp = theta.clone();
            let mut tmm = theta.clone();
            tpp[i] += steps[i];
            tpp[j] += steps[j];
            tpm[i] += steps[i];
            tpm[j] -= steps[j];
            tmp[i] -= steps[i];
            tmp[j] += steps[j];
            tmm[i] -= steps[i];
            tmm[j] -= steps[j];
            let val = (f(&tpp)? - f(&tpm)? - f(&tmp)? + f(&tmm)?) / (4.0 * steps[i] * steps[j]);
            h[(i, j)] = val;
            h[(j, i)] = val;
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite entries in finite-difference Hessian".into(),
        ));
    }
    let ht = h.transpose();
    Ok((h + ht) * 0.5)
}

/// Prefactored Hessian of the base objective, reusable across many
/// perturbed objectives.
#[derive(Debug, Clone)]
pub struct HessianSolve {
    inverse: DMatrix<f64>,
    /// Spectral condition number estimate; large values flag a near-singular
    /// base optimum where the linear response is unreliable.
    pub condition: f64,
}

impl HessianSolve {
    pub fn new(hessian: &DMatrix<f64>) -> Result<Self> {
        let eig = hessian.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let min_abs = eig
            .eigenvalues
            .iter()
            .map(|v| v.abs())
            .fold(f64::MAX, f64::min);
        if min_abs <= 0.0 || !min_abs.is_finite() {
            return Err(Error::Numeric("singular Hessian in linear response".into()));
        }
        let inverse = hessian
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular Hessian in linear response".into()))?;
        Ok(HessianSolve {
            inverse,
            condition: max.abs() / min_abs,
        })
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }
}

/// First-order response of a minimizer to swapping the objective:
/// `θ ≈ θ_base - ∇²ℓ₁(θ_base)⁻¹ ∇ℓ₂(θ_base)`.
#[derive(Debug, Clone)]
pub struct LinearResponse {
    pub theta_base: ParamVector,
    pub correction: ParamVector,
    pub theta: ParamVector,
    pub hessian_condition: f64,
}

/// Apply the implicit-function correction for one perturbed objective, given
/// the prefactored Hessian of the base objective at its minimizer.
pub fn approx_optimum(
    solver: &HessianSolve,
    theta_base: &ParamVector,
    grad_l2_at_base: &DVector<f64>,
) -> LinearResponse {
    let correction = -(solver.inverse() * grad_l2_at_base);
    LinearResponse {
        theta_base: theta_base.clone(),
        theta: theta_base + &correction,
        correction,
        hessian_condition: solver.condition,
    }
}

/// Options for the pPCA retraction descent.
#[derive(Debug, Clone, Copy)]
pub struct PpcaOptimOptions {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub init_step: f64,
    pub multi_start: usize,
}

impl Default for PpcaOptimOptions {
    fn default() -> Self {
        PpcaOptimOptions {
            grad_tol: GRAD_TOL,
            max_iters: MAX_ITERS,
            armijo_c: 1e-4,
            shrink: 0.5,
            init_step: 1.0,
            multi_start: 3,
        }
    }
}

/// A fitted pPCA point with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct PpcaFit {
    pub model: PpcaModel,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Spectral initialization: eigenvectors of the sample covariance for `U`,
/// top eigenvalues for `L`, the mean of the remainder for `v`.
pub fn pca_init(data: &crate::data::DataMatrix, k: usize, alpha: f64) -> Result<PpcaModel> {
    let d = data.n_cols();
    if k == 0 || k >= d {
        return Err(Error::Config(format!(
            "latent dimension must satisfy 0 < k < d, got k={k}, d={d}"
        )));
    }
    let cov = data.sample_covariance();
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut u = DMatrix::zeros(d, k);
    let mut l = DVector::zeros(k);
    for j in 0..k {
        let src = order[j];
        l[j] = eig.eigenvalues[src].max(1e-8);
        for i in 0..d {
            u[(i, j)] = eig.eigenvectors[(i, src)];
        }
    }
    let mut v = 0.0;
    for &src in order.iter().skip(k) {
        v += eig.eigenvalues[src].max(1e-8);
    }
    v /= (d - k) as f64;
    v = v.max(1e-6);
    PpcaModel::new_clamping(qf_retract(&u), l, v, alpha)
}

struct DescentState {
    model: PpcaModel,
    objective: f64,
}

fn descend(stats: &PairwiseStats, start: PpcaModel, opts: &PpcaOptimOptions) -> Result<PpcaFit> {
    let k = start.latent_dim();
    let alpha = start.alpha;
    let mut state = DescentState {
        objective: ppca_nksd_collapsed(stats, &start),
        model: start,
    };
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut step = opts.init_step;

    while iterations < opts.max_iters {
        let (grad_u, grad_l, grad_v) = ppca_nksd_gradients(stats, &state.model);

        // Riemannian gradient over U: project onto the tangent space.
        let u = state.model.u();
        let ug = u.transpose() * &grad_u;
        let sym = (&ug + ug.transpose()) * 0.5;
        let rgrad_u = &grad_u - u * sym;

        // Gradient in the unconstrained (γ, w) coordinates that keep
        // l > v > 0: γ = log(l - v), w = log v.
        let lv = state.model.l_diag();
        let v = state.model.v();
        let grad_gamma = DVector::from_iterator(k, (0..k).map(|i| grad_l[i] * (lv[i] - v)));
        let grad_w = (grad_v + grad_l.iter().sum::<f64>()) * v;

        grad_norm = (rgrad_u.norm_squared() + grad_gamma.norm_squared() + grad_w * grad_w).sqrt();
        if grad_norm <= opts.grad_tol {
            converged = true;
            break;
        }

        // Backtracking line search on the retraction path.
        let gamma0 = DVector::from_iterator(k, (0..k).map(|i| (lv[i] - v).ln()));
        let w0 = v.ln();
        let mut alpha_step = step;
        let mut accepted = false;
        for _ in 0..60 {
            let y = state.model.u() - &rgrad_u * alpha_step;
            let u_new = qf_retract(&y);
            let w_new = w0 - alpha_step * grad_w;
            if !w_new.is_finite() || w_new.abs() > 300.0 {
                alpha_step *= opts.shrink;
                continue;
            }
            let v_new = w_new.exp();
            let l_new = DVector::from_iterator(
                k,
                (0..k).map(|i| v_new + (gamma0[i] - alpha_step * grad_gamma[i]).exp()),
            );
            let candidate = match PpcaModel::new(u_new, l_new, v_new, alpha) {
                Ok(m) => m,
                Err(_) => {
                    alpha_step *= opts.shrink;
                    continue;
                }
            };
            let f_new = ppca_nksd_collapsed(stats, &candidate);
            if f_new.is_finite()
                && f_new <= state.objective - opts.armijo_c * alpha_step * grad_norm * grad_norm
            {
                state.model = candidate;
                state.objective = f_new;
                accepted = true;
                break;
            }
            alpha_step *= opts.shrink;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        // Allow the step to grow back after successful iterations.
        step = (alpha_step * 2.0).min(opts.init_step);
    }

    Ok(PpcaFit {
        objective: state.objective,
        model: state.model,
        grad_norm,
        iterations,
        converged,
    })
}

/// Minimize the NKSD over pPCA parameters by multi-start retraction descent:
/// the provided starts plus random Stiefel initializations up to
/// `multi_start`, keeping the best objective.
pub fn minimize_ppca(
    stats: &PairwiseStats,
    starts: Vec<PpcaModel>,
    opts: &PpcaOptimOptions,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<PpcaFit> {
    if starts.is_empty() {
        return Err(Error::Input(
            "ppca optimization needs at least one start".into(),
        ));
    }
    let d = starts[0].data_dim();
    let k = starts[0].latent_dim();
    let alpha = starts[0].alpha;
    let reference = starts[0].clone();

    let mut all_starts = starts;
    while all_starts.len() < opts.multi_start {
        let u = random_stiefel(d, k, rng);
        // Reuse the spectral scales from the reference start.
        all_starts.push(PpcaModel::new_clamping(
            u,
            reference.l_diag().clone(),
            reference.v(),
            alpha,
        )?);
    }

    let mut best: Option<PpcaFit> = None;
    for start in all_starts {
        let fit = descend(stats, start, opts)?;
        let better = match &best {
            None => true,
            Some(b) => fit.objective < b.objective,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start was run"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::seeded_rng;
    use crate::kernel::{precompute_pairwise, KernelSpec};
    use crate::ppca::ppca_nksd;
    use approx::assert_relative_eq;

    fn simple_qf(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> QuadraticForm {
        QuadraticForm {
            a,
            b,
            c_scalar: c,
            n: 2,
        }
    }

    #[test]
    fn quadratic_minimum_by_completion_of_square() {
        let qf = simple_qf(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-2.0, 0.0]),
            1.0,
        );
        let res = minimize_quadratic(&qf).unwrap();
        assert_relative_eq!(res.theta_opt[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(res.theta_opt[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(res.objective, 0.0, epsilon = 1e-12);
        assert!(res.converged && res.iterations == 0);
    }

    #[test]
    fn quadratic_minimum_gradient_vanishes_random_spd() {
        let mut rng = seeded_rng(7, 1);
        for _ in 0..10 {
            let m = DMatrix::from_fn(3, 3, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let a = &m * m.transpose() + DMatrix::identity(3, 3) * 0.5;
            let b = DVector::from_fn(3, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let qf = simple_qf(a, b, 0.3);
            let res = minimize_quadratic(&qf).unwrap();
            assert!(qf.grad(&res.theta_opt).norm() < 1e-12);
        }
    }

    #[test]
    fn quadratic_indefinite_is_an_error() {
        let qf = simple_qf(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0])),
            DVector::zeros(2),
            0.0,
        );
        assert!(matches!(minimize_quadratic(&qf), Err(Error::Numeric(_))));
    }

    #[test]
    fn quadratic_matches_gradient_descent_oracle() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b = DVector::from_vec(vec![0.5, -1.2]);
        let qf = simple_qf(a, b, 0.0);
        let exact = minimize_quadratic(&qf).unwrap();

        let mut theta = DVector::zeros(2);
        for _ in 0..20_000 {
            theta -= qf.grad(&theta) * 0.05;
        }
        assert_relative_eq!(exact.theta_opt[0], theta[0], epsilon = 1e-6);
        assert_relative_eq!(exact.theta_opt[1], theta[1], epsilon = 1e-6);
    }

    #[test]
    fn hessian_fd_exact_for_quadratics() {
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.25, 0.25, 0.75]);
        let b = DVector::from_vec(vec![0.2, -0.4]);
        let qf = simple_qf(a.clone(), b, 1.0);
        let theta = DVector::from_vec(vec![0.3, 0.6]);
        let h = hessian_fd(|t| Ok(qf.eval(t)), &theta, 1e-4).unwrap();
        let expected = a * 2.0;
        assert_relative_eq!(h, expected, epsilon = 1e-6);
    }

    #[test]
    fn hessian_fd_sine_at_origin() {
        let theta = DVector::from_vec(vec![0.0]);
        let h = hessian_fd(|t| Ok(t[0].sin()), &theta, 1e-4).unwrap();
        assert!(h[(0, 0)].abs() < 1e-6);
    }

    #[test]
    fn approx_optimum_exact_for_matched_curvature() {
        // ℓ1 = (θ-1)², ℓ2 = (θ-3)²: the Newton step lands on the true
        // minimizer because the Hessians agree.
        let hessian = DMatrix::from_element(1, 1, 2.0);
        let solver = HessianSolve::new(&hessian).unwrap();
        let base = DVector::from_vec(vec![1.0]);
        let grad_l2 = DVector::from_vec(vec![2.0 * (1.0 - 3.0)]);
        let resp = approx_optimum(&solver, &base, &grad_l2);
        assert_relative_eq!(resp.correction[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(resp.theta[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn approx_optimum_first_order_error_with_mismatched_curvature() {
        // ℓ2 = 2(θ-3)² has gradient 4(θ-3); the prediction overshoots to 5.
        let solver = HessianSolve::new(&DMatrix::from_element(1, 1, 2.0)).unwrap();
        let base = DVector::from_vec(vec![1.0]);
        let grad_l2 = DVector::from_vec(vec![4.0 * (1.0 - 3.0)]);
        let resp = approx_optimum(&solver, &base, &grad_l2);
        assert_relative_eq!(resp.theta[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn approx_optimum_zero_correction_for_same_objective() {
        let solver = HessianSolve::new(&DMatrix::from_element(1, 1, 2.0)).unwrap();
        let base = DVector::from_vec(vec![1.0]);
        let resp = approx_optimum(&solver, &base, &DVector::zeros(1));
        assert_eq!(resp.correction[0], 0.0);
    }

    #[test]
    fn approx_optimum_rejects_singular_hessian() {
        let h = DMatrix::from_element(1, 1, 0.0);
        assert!(HessianSolve::new(&h).is_err());
    }

    #[test]
    fn ppca_descent_recovers_generator_covariance() {
        let mut rng = seeded_rng(11, 3);
        let u = random_stiefel(4, 2, &mut rng);
        let truth = PpcaModel::new(u, DVector::from_vec(vec![4.0, 2.5]), 1.0, 0.1).unwrap();
        let data = truth.sample(2000, &mut rng);
        let spec = KernelSpec::factored_imq(-0.5, 1.0, 4).unwrap();
        let stats = precompute_pairwise(&spec, &data).unwrap();

        let init = pca_init(&data, 2, 0.1).unwrap();
        let opts = PpcaOptimOptions::default();
        let fit = minimize_ppca(&stats, vec![init], &opts, &mut rng).unwrap();

        let cov_fit = fit.model.covariance();
        let cov_true = truth.covariance();
        let rel = (&cov_fit - &cov_true).norm() / cov_true.norm();
        assert!(rel < 0.10, "relative Frobenius error {rel}");
        assert!(fit.objective.is_finite());
        assert!(fit.grad_norm <= 1e-4, "grad norm {}", fit.grad_norm);
    }

    #[test]
    fn ppca_descent_objective_monotone_and_orthonormal() {
        let mut rng = seeded_rng(13, 4);
        let u = random_stiefel(5, 2, &mut rng);
        let truth = PpcaModel::new(u, DVector::from_vec(vec![3.0, 2.0]), 0.7, 0.1).unwrap();
        let data = truth.sample(400, &mut rng);
        let spec = KernelSpec::factored_imq(-0.5, 1.0, 5).unwrap();
        let stats = precompute_pairwise(&spec, &data).unwrap();

        // The objective across increasing iteration budgets never rises.
        let init = pca_init(&data, 2, 0.1).unwrap();
        let mut prev = ppca_nksd(&stats, &init);
        for iters in [5, 20, 80, 320] {
            let opts = PpcaOptimOptions {
                max_iters: iters,
                multi_start: 1,
                ..Default::default()
            };
            let fit = descend(&stats, init.clone(), &opts).unwrap();
            assert!(fit.objective <= prev + 1e-12, "objective increased");
            prev = fit.objective;
            let gram = fit.model.u().transpose() * fit.model.u();
            assert_relative_eq!(gram, DMatrix::identity(2, 2), epsilon = 1e-10);
        }
    }
}
