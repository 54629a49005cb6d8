//! The two-level training objective and its solvers.
//!
//! Inner level, per task i with training split D_i:
//!
//! ```text
//!   theta_i(lambda) = argmin_theta  sum_{z in D_i} loss(z; theta)
//!                                 + (delta / 2) * ||theta - lambda||^2
//! ```
//!
//! Outer level over the shared meta parameter:
//!
//! ```text
//!   lambda* = argmin_lambda  sum_i OuterLoss(lambda, theta_i(lambda))
//!                          + (delta / 2) * ||lambda||^2
//! ```
//!
//! The outer loss is the summed validation loss of the task parameter; the
//! `AppendixProximal` variant additionally counts the proximal distance
//! `(delta/2)||theta - lambda||^2` at the outer level. Both forms are
//! supported because the influence estimators downstream are derived for
//! either; `MainText` is the default.
//!
//! Training follows the exact-bilevel regime: every inner problem is re-solved
//! to stationarity at every outer step, and the meta parameter descends along
//! the total gradient (explicit dependence plus the implicit path through the
//! task parameters). Influence estimates assume argmin conditions at both
//! levels, so approximate few-step inner adaptation is deliberately not
//! offered.

use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor};
use crate::model::{self, Architecture, Example, Loss, ParamVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// One few-shot task: disjoint train and validation splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub task_id: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    /// Ground-truth marker set by label-corruption injection; carried through
    /// experiments, never consulted by the solvers or estimators.
    pub corrupted: bool,
}

impl TaskData {
    pub fn new(task_id: usize, train: Vec<Example>, val: Vec<Example>) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config {
                path: format!("task[{task_id}]"),
                message: "train and val splits must be non-empty".into(),
            });
        }
        for tr in &train {
            if val.iter().any(|v| v.features == tr.features && v.label == tr.label) {
                return Err(Error::Config {
                    path: format!("task[{task_id}]"),
                    message: "train and val splits must be disjoint".into(),
                });
            }
        }
        Ok(Self { task_id, train, val, corrupted: false })
    }
}

/// Which terms the per-task outer loss includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterRegForm {
    /// Summed validation loss only.
    #[default]
    MainText,
    /// Validation loss plus the proximal term `(delta/2)||theta - lambda||^2`.
    AppendixProximal,
}

/// Solver configuration shared by training, retraining, and attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelConfig {
    /// Proximal weight of the inner objective and ridge weight of the outer
    /// objective; the same value plays both roles.
    pub delta: f64,
    /// Inner stationarity target: gradient norm of the inner objective.
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Outer stationarity target: norm of the total outer gradient.
    pub outer_tol: f64,
    pub outer_max_iters: usize,
    /// Initial outer step length; the line search adapts from here.
    pub outer_step: f64,
    pub outer_reg_form: OuterRegForm,
    /// Per-example loss; cross-entropy for classification work, MSE for the
    /// quadratic families.
    pub loss: Loss,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            inner_tol: 1e-9,
            inner_max_iters: 2000,
            outer_tol: 1e-4,
            outer_max_iters: 2000,
            outer_step: 1.0,
            outer_reg_form: OuterRegForm::MainText,
            loss: Loss::CrossEntropy,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(path: &str, v: f64) -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config {
                    path: path.into(),
                    message: format!("must be a positive finite number, got {v}"),
                });
            }
            Ok(())
        }
        positive("bilevel.delta", self.delta)?;
        positive("bilevel.inner_tol", self.inner_tol)?;
        positive("bilevel.outer_tol", self.outer_tol)?;
        positive("bilevel.outer_step", self.outer_step)?;
        if self.inner_max_iters == 0 || self.outer_max_iters == 0 {
            return Err(Error::Config {
                path: "bilevel.max_iters".into(),
                message: "iteration limits must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Per-task convergence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConvergence {
    pub task_id: usize,
    pub inner_grad_norm: f64,
}

/// Converged meta parameter with all task parameters and the data that
/// produced them.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub tasks: Vec<TaskData>,
    pub lambda_star: ParamVector,
    /// Task parameters aligned with `tasks`.
    pub thetas: Vec<ParamVector>,
    pub config: BilevelConfig,
    pub seed: u64,
    pub converged: bool,
    pub outer_grad_norm: f64,
    pub inner_convergence: Vec<TaskConvergence>,
    pub outer_iterations: usize,
}

impl MetaState {
    pub fn arch(&self) -> &Arc<Architecture> {
        self.lambda_star.arch()
    }

    pub fn task_index(&self, task_id: usize) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .ok_or(Error::UnknownTask(task_id))
    }

    pub fn task(&self, task_id: usize) -> Result<&TaskData> {
        Ok(&self.tasks[self.task_index(task_id)?])
    }

    pub fn theta(&self, task_id: usize) -> Result<&ParamVector> {
        Ok(&self.thetas[self.task_index(task_id)?])
    }
}

/// Inner objective value: summed training loss plus the proximal anchor.
pub fn inner_loss(
    lambda: &ParamVector,
    theta: &ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
) -> Result<f64> {
    if lambda.len() != theta.len() {
        return Err(Error::DimensionMismatch(format!(
            "lambda has {} params, theta has {}",
            lambda.len(),
            theta.len()
        )));
    }
    let data = model::loss_value(theta, &task.train, cfg.loss)?;
    let d = linalg::sub(theta.values(), lambda.values());
    Ok(data + 0.5 * cfg.delta * linalg::dot(&d, &d))
}

/// Gradient of the inner objective w.r.t. theta.
pub fn inner_grad(
    lambda: &ParamVector,
    theta: &ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
) -> Result<Vec<f64>> {
    let (_, mut g) = model::loss_and_grad(theta, &task.train, cfg.loss)?;
    for (gi, (t, l)) in g.iter_mut().zip(theta.values().iter().zip(lambda.values())) {
        *gi += cfg.delta * (t - l);
    }
    Ok(g)
}

/// Per-task outer objective value under the configured form.
pub fn outer_loss(
    lambda: &ParamVector,
    theta: &ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
) -> Result<f64> {
    if lambda.len() != theta.len() {
        return Err(Error::DimensionMismatch(format!(
            "lambda has {} params, theta has {}",
            lambda.len(),
            theta.len()
        )));
    }
    let val = model::loss_value(theta, &task.val, cfg.loss)?;
    Ok(match cfg.outer_reg_form {
        OuterRegForm::MainText => val,
        OuterRegForm::AppendixProximal => {
            let d = linalg::sub(theta.values(), lambda.values());
            val + 0.5 * cfg.delta * linalg::dot(&d, &d)
        }
    })
}

/// Partial gradient of the per-task outer loss w.r.t. theta.
pub fn outer_grad_theta(
    lambda: &ParamVector,
    theta: &ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
) -> Result<Vec<f64>> {
    let (_, mut g) = model::loss_and_grad(theta, &task.val, cfg.loss)?;
    if cfg.outer_reg_form == OuterRegForm::AppendixProximal {
        for (gi, (t, l)) in g.iter_mut().zip(theta.values().iter().zip(lambda.values())) {
            *gi += cfg.delta * (t - l);
        }
    }
    Ok(g)
}

/// Partial gradient of the per-task outer loss w.r.t. lambda; identically
/// zero under the main-text form.
pub fn outer_grad_lambda(
    lambda: &ParamVector,
    theta: &ParamVector,
    _task: &TaskData,
    cfg: &BilevelConfig,
) -> Result<Vec<f64>> {
    Ok(match cfg.outer_reg_form {
        OuterRegForm::MainText => vec![0.0; lambda.len()],
        OuterRegForm::AppendixProximal => linalg::scale(
            &linalg::sub(lambda.values(), theta.values()),
            cfg.delta,
        ),
    })
}

/// Largest parameter count for which the inner solver switches from gradient
/// descent to damped Newton steps.
pub const NEWTON_FALLBACK_MAX_PARAMS: usize = 512;

/// Solves the inner problem for one task, initialized at `lambda`.
pub fn solve_inner(lambda: &ParamVector, task: &TaskData, cfg: &BilevelConfig) -> Result<ParamVector> {
    solve_inner_from(lambda, lambda.clone(), task, cfg)
}

/// Inner solve from an explicit starting point; used internally to warm-start
/// probes around an already-converged state.
pub fn solve_inner_from(
    lambda: &ParamVector,
    init: ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    let mut theta = init;
    let n = theta.len();
    let use_newton = n <= NEWTON_FALLBACK_MAX_PARAMS;
    let mut value = inner_loss(lambda, &theta, task, cfg)?;
    let mut gd_step = 1.0 / (1.0 + cfg.delta);

    for iter in 0..cfg.inner_max_iters {
        let g = inner_grad(lambda, &theta, task, cfg)?;
        let gnorm = linalg::norm2(&g);
        if gnorm <= cfg.inner_tol {
            return Ok(theta);
        }

        let mut took_step = false;
        if use_newton {
            // Damped Newton: raise the ridge until the factorization succeeds.
            let h_data = model::dense_hessian(&theta, &task.train, cfg.loss)?;
            let mut mu = 0.0;
            for _ in 0..8 {
                match CholeskyFactor::new(&h_data, cfg.delta + mu) {
                    Ok(factor) => {
                        let dir = linalg::scale(&factor.solve(&g)?, -1.0);
                        // Near the optimum the objective value no longer
                        // resolves the improvement in f64, so accept the full
                        // Newton step on gradient-norm decrease first.
                        let cand = theta.offset_by(&dir)?;
                        let gcand = inner_grad(lambda, &cand, task, cfg)?;
                        if linalg::norm2(&gcand) <= 0.5 * gnorm {
                            value = inner_loss(lambda, &cand, task, cfg)?;
                            theta = cand;
                            took_step = true;
                        } else if let Some((t2, v2)) =
                            armijo(lambda, &theta, task, cfg, value, &g, &dir)?
                        {
                            theta = t2;
                            value = v2;
                            took_step = true;
                        }
                        break;
                    }
                    Err(Error::NotPositiveDefinite { .. }) => {
                        mu = if mu == 0.0 { 1e-6 * (1.0 + cfg.delta) } else { mu * 10.0 };
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if !took_step {
            // Gradient step with backtracking; grow the step after successes.
            let dir = linalg::scale(&g, -1.0);
            match armijo_scaled(lambda, &theta, task, cfg, value, &g, &dir, gd_step)? {
                Some((t2, v2, accepted)) => {
                    theta = t2;
                    value = v2;
                    gd_step = (accepted * 2.0).min(1e6);
                }
                None => {
                    return Err(Error::InnerNoConvergence {
                        achieved: gnorm,
                        tol: cfg.inner_tol,
                        iters: iter,
                    });
                }
            }
        }
    }

    let g = inner_grad(lambda, &theta, task, cfg)?;
    let gnorm = linalg::norm2(&g);
    if gnorm <= cfg.inner_tol {
        Ok(theta)
    } else {
        Err(Error::InnerNoConvergence {
            achieved: gnorm,
            tol: cfg.inner_tol,
            iters: cfg.inner_max_iters,
        })
    }
}

/// Backtracking line search from unit step. Returns the accepted point, or
/// None if no step length down to the floor decreases the objective enough.
fn armijo(
    lambda: &ParamVector,
    theta: &ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
    value: f64,
    grad: &[f64],
    dir: &[f64],
) -> Result<Option<(ParamVector, f64)>> {
    armijo_scaled(lambda, theta, task, cfg, value, grad, dir, 1.0)
        .map(|o| o.map(|(t, v, _)| (t, v)))
}

#[allow(clippy::too_many_arguments)]
fn armijo_scaled(
    lambda: &ParamVector,
    theta: &ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
    value: f64,
    grad: &[f64],
    dir: &[f64],
    init_step: f64,
) -> Result<Option<(ParamVector, f64, f64)>> {
    let slope = linalg::dot(grad, dir);
    if slope >= 0.0 {
        return Ok(None);
    }
    let mut t = init_step;
    for _ in 0..60 {
        let cand = theta.offset_by(&linalg::scale(dir, t))?;
        let v = inner_loss(lambda, &cand, task, cfg)?;
        if v <= value + 1e-4 * t * slope {
            return Ok(Some((cand, v, t)));
        }
        t *= 0.5;
    }
    Ok(None)
}

/// Inner Hessian at (lambda, theta): data Hessian plus `delta * I`.
pub fn inner_hessian(
    theta: &ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
) -> Result<linalg::DenseMatrix> {
    let mut h = model::dense_hessian(theta, &task.train, cfg.loss)?;
    for i in 0..h.rows() {
        h.set(i, i, h.get(i, i) + cfg.delta);
    }
    Ok(h)
}

/// Inner Hessian-vector product without materializing the matrix.
pub fn inner_hvp(
    theta: &ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
    v: &[f64],
) -> Result<Vec<f64>> {
    let mut out = model::hvp(theta, &task.train, cfg.loss, v)?;
    for (o, x) in out.iter_mut().zip(v) {
        *o += cfg.delta * x;
    }
    Ok(out)
}

/// Workspace for one task during outer optimization: the current inner
/// solution and the Cholesky factor of its inner Hessian.
struct TaskSolve {
    theta: ParamVector,
    factor: CholeskyFactor,
    grad_norm: f64,
}

fn solve_task_with_factor(
    lambda: &ParamVector,
    init: ParamVector,
    task: &TaskData,
    cfg: &BilevelConfig,
) -> Result<TaskSolve> {
    let theta = solve_inner_from(lambda, init, task, cfg)?;
    let h = inner_hessian(&theta, task, cfg)?;
    // The ridge is part of the Hessian already; extra damping only if the
    // data Hessian carries enough negative curvature to defeat it.
    let factor = match CholeskyFactor::new(&h, 0.0) {
        Ok(f) => f,
        Err(Error::NotPositiveDefinite { .. }) => CholeskyFactor::new(&h, 1e-8 + 1e-6 * cfg.delta)?,
        Err(e) => return Err(e),
    };
    let grad_norm = linalg::norm2(&inner_grad(lambda, &theta, task, cfg)?);
    Ok(TaskSolve { theta, factor, grad_norm })
}

/// Total gradient of one task's outer loss: the explicit partial w.r.t.
/// lambda plus the implicit path through the task parameter,
/// `(d theta / d lambda) = delta * H_inner^{-1}` for the proximal inner loss.
fn task_total_gradient(
    lambda: &ParamVector,
    solve: &TaskSolve,
    task: &TaskData,
    cfg: &BilevelConfig,
) -> Result<Vec<f64>> {
    let g_theta = outer_grad_theta(lambda, &solve.theta, task, cfg)?;
    let implicit = linalg::scale(&solve.factor.solve(&g_theta)?, cfg.delta);
    let explicit = outer_grad_lambda(lambda, &solve.theta, task, cfg)?;
    Ok(linalg::axpy(&explicit, 1.0, &implicit))
}

/// Value of the full outer objective at `lambda`, re-solving every inner
/// problem (warm-started from `warm`).
fn outer_value(
    lambda: &ParamVector,
    tasks: &[TaskData],
    cfg: &BilevelConfig,
    warm: &[ParamVector],
) -> Result<(f64, Vec<ParamVector>)> {
    let solved: Vec<Result<ParamVector>> = tasks
        .par_iter()
        .zip(warm.par_iter())
        .map(|(task, w)| solve_inner_from(lambda, w.clone(), task, cfg))
        .collect();
    let mut thetas = Vec::with_capacity(tasks.len());
    for s in solved {
        thetas.push(s?);
    }
    let mut total = 0.5 * cfg.delta * linalg::dot(lambda.values(), lambda.values());
    for (task, theta) in tasks.iter().zip(&thetas) {
        total += outer_loss(lambda, theta, task, cfg)?;
    }
    Ok((total, thetas))
}

/// Trains the meta parameter by total-gradient descent with a backtracking
/// line search on the outer value function. Inner problems are re-solved to
/// `inner_tol` at every probe, so the returned state satisfies the argmin
/// conditions the influence estimators assume.
pub fn train_meta(
    tasks: &[TaskData],
    cfg: &BilevelConfig,
    arch: &Arc<Architecture>,
    seed: u64,
) -> Result<MetaState> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config {
            path: "tasks".into(),
            message: "need at least one task".into(),
        });
    }
    let lambda0 = ParamVector::seeded_init(arch.clone(), seed);
    train_meta_from(tasks, cfg, lambda0, seed)
}

/// Training with an explicit starting point; retraining oracles use this for
/// their labeled warm-start variant.
pub fn train_meta_from(
    tasks: &[TaskData],
    cfg: &BilevelConfig,
    lambda0: ParamVector,
    seed: u64,
) -> Result<MetaState> {
    cfg.validate()?;
    let mut lambda = lambda0;
    let mut warm: Vec<ParamVector> = vec![lambda.clone(); tasks.len()];
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None; // (lambda, total grad)
    let mut step = cfg.outer_step;
    let mut value = f64::INFINITY;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..cfg.outer_max_iters {
        iterations = iter;
        let solves: Vec<Result<TaskSolve>> = tasks
            .par_iter()
            .zip(warm.par_iter())
            .map(|(task, w)| solve_task_with_factor(&lambda, w.clone(), task, cfg))
            .collect();
        let mut total_grad = linalg::scale(lambda.values(), cfg.delta);
        let mut thetas = Vec::with_capacity(tasks.len());
        for (task, solve) in tasks.iter().zip(solves) {
            let solve = solve?;
            let g = task_total_gradient(&lambda, &solve, task, cfg)?;
            total_grad = linalg::axpy(&total_grad, 1.0, &g);
            thetas.push(solve.theta);
        }
        warm = thetas;
        grad_norm = linalg::norm2(&total_grad);
        if grad_norm <= cfg.outer_tol {
            return finish_state(tasks, cfg, lambda, seed, true, grad_norm, iter);
        }

        if value.is_infinite() {
            value = outer_value(&lambda, tasks, cfg, &warm)?.0;
        }

        // Barzilai-Borwein initial step from the previous iterate, clamped;
        // Armijo backtracking keeps it safe.
        if let Some((pl, pg)) = &prev {
            let s = linalg::sub(lambda.values(), pl);
            let y = linalg::sub(&total_grad, pg);
            let sy = linalg::dot(&s, &y);
            if sy > 1e-300 {
                step = (linalg::dot(&s, &s) / sy).clamp(1e-6, 1e4);
            }
        }
        prev = Some((lambda.values().to_vec(), total_grad.clone()));

        let slope = -grad_norm * grad_norm;
        let mut accepted = false;
        let mut t = step;
        for _ in 0..40 {
            let cand = lambda.offset_by(&linalg::scale(&total_grad, -t))?;
            let (v, thetas) = outer_value(&cand, tasks, cfg, &warm)?;
            if v <= value + 1e-4 * t * slope {
                lambda = cand;
                value = v;
                warm = thetas;
                step = t * 2.0;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // The objective no longer resolves the improvement in f64; finish
            // the endgame on gradient-norm decrease instead.
            let mut t = step;
            for _ in 0..20 {
                let cand = lambda.offset_by(&linalg::scale(&total_grad, -t))?;
                let solves: Vec<Result<TaskSolve>> = tasks
                    .par_iter()
                    .zip(warm.par_iter())
                    .map(|(task, w)| solve_task_with_factor(&cand, w.clone(), task, cfg))
                    .collect();
                let mut g_cand = linalg::scale(cand.values(), cfg.delta);
                let mut thetas = Vec::with_capacity(tasks.len());
                let mut ok = true;
                for (task, solve) in tasks.iter().zip(solves) {
                    match solve {
                        Ok(solve) => {
                            let g = task_total_gradient(&cand, &solve, task, cfg)?;
                            g_cand = linalg::axpy(&g_cand, 1.0, &g);
                            thetas.push(solve.theta);
                        }
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok && linalg::norm2(&g_cand) < grad_norm * 0.99 {
                    lambda = cand;
                    warm = thetas;
                    value = f64::INFINITY; // stale; recomputed next iteration
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            break;
        }
    }

    let state = finish_state(tasks, cfg, lambda, seed, false, grad_norm, iterations)?;
    Err(Error::OuterNoConvergence {
        achieved: state.outer_grad_norm,
        tol: cfg.outer_tol,
        iters: iterations,
        state: Box::new(state),
    })
}

fn finish_state(
    tasks: &[TaskData],
    cfg: &BilevelConfig,
    lambda: ParamVector,
    seed: u64,
    converged: bool,
    _grad_norm_hint: f64,
    iterations: usize,
) -> Result<MetaState> {
    // Final inner solves start from lambda so the stored state matches the
    // public solve_inner contract exactly.
    let solves: Vec<Result<TaskSolve>> = tasks
        .par_iter()
        .map(|task| solve_task_with_factor(&lambda, lambda.clone(), task, cfg))
        .collect();
    let mut thetas = Vec::with_capacity(tasks.len());
    let mut inner_convergence = Vec::with_capacity(tasks.len());
    let mut total_grad = linalg::scale(lambda.values(), cfg.delta);
    for (task, solve) in tasks.iter().zip(solves) {
        let solve = solve?;
        let g = task_total_gradient(&lambda, &solve, task, cfg)?;
        total_grad = linalg::axpy(&total_grad, 1.0, &g);
        inner_convergence.push(TaskConvergence {
            task_id: task.task_id,
            inner_grad_norm: solve.grad_norm,
        });
        thetas.push(solve.theta);
    }
    let outer_grad_norm = linalg::norm2(&total_grad);
    let converged = converged && outer_grad_norm <= cfg.outer_tol * 1.5;
    Ok(MetaState {
        tasks: tasks.to_vec(),
        lambda_star: lambda,
        thetas,
        config: cfg.clone(),
        seed,
        converged,
        outer_grad_norm,
        inner_convergence,
        outer_iterations: iterations,
    })
}

/// Total outer gradient (including the ridge term) at the state's solution;
/// diagnostic used by tests and the stationarity checks.
pub fn total_outer_gradient(state: &MetaState) -> Result<Vec<f64>> {
    let cfg = &state.config;
    let lambda = &state.lambda_star;
    let mut total = linalg::scale(lambda.values(), cfg.delta);
    for (task, theta) in state.tasks.iter().zip(&state.thetas) {
        let solve = TaskSolve {
            factor: {
                let h = inner_hessian(theta, task, cfg)?;
                CholeskyFactor::new(&h, 0.0)
                    .or_else(|_| CholeskyFactor::new(&h, 1e-8 + 1e-6 * cfg.delta))?
            },
            theta: theta.clone(),
            grad_norm: 0.0,
        };
        let g = task_total_gradient(lambda, &solve, task, cfg)?;
        total = linalg::axpy(&total, 1.0, &g);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn quad_arch() -> Arc<Architecture> {
        // Single linear layer + MSE: quadratic inner and outer losses.
        Arc::new(Architecture::linear(2, 2))
    }

    fn mk_task(id: usize, seed: u64, n_train: usize, n_val: usize, dim: usize, classes: usize) -> TaskData {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let gen = |rng: &mut ChaCha20Rng, n: usize| {
            (0..n)
                .map(|_| {
                    Example::new(
                        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        rng.random_range(0..classes),
                    )
                })
                .collect::<Vec<_>>()
        };
        let train = gen(&mut rng, n_train);
        let val = gen(&mut rng, n_val);
        TaskData::new(id, train, val).unwrap()
    }

    fn quad_cfg(delta: f64) -> BilevelConfig {
        BilevelConfig {
            delta,
            inner_tol: 1e-11,
            outer_tol: 1e-9,
            loss: Loss::Mse,
            ..BilevelConfig::default()
        }
    }

    #[test]
    fn inner_loss_zero_at_perfect_fit() {
        let arch = quad_arch();
        let values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let p = ParamVector::new(arch, values).unwrap();
        let task = TaskData::new(
            0,
            vec![Example::new(vec![1.0, 0.0], 0)],
            vec![Example::new(vec![0.0, 1.0], 1)],
        )
        .unwrap();
        let cfg = quad_cfg(1.0);
        // theta = lambda and the training point is predicted exactly
        assert_eq!(inner_loss(&p, &p, &task, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn inner_loss_proximal_term_only() {
        let arch = quad_arch();
        let values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let lambda = ParamVector::new(arch, values).unwrap();
        let mut u = vec![0.0; lambda.len()];
        u[0] = 0.5;
        u[3] = -0.25;
        let theta = lambda.offset_by(&u).unwrap();
        let task = TaskData::new(
            0,
            vec![Example::new(vec![1.0, 0.0], 0)],
            vec![Example::new(vec![0.0, 1.0], 1)],
        )
        .unwrap();
        let cfg = quad_cfg(2.0);
        let l = inner_loss(&lambda, &theta, &task, &cfg).unwrap();
        let data = model::loss_value(&theta, &task.train, Loss::Mse).unwrap();
        let expect = data + 0.5 * 2.0 * (0.5f64 * 0.5 + 0.25 * 0.25);
        assert_relative_eq!(l, expect, max_relative = 1e-14);
    }

    #[test]
    fn inner_loss_matches_independent_reimplementation() {
        let arch = quad_arch();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let lam: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let the: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda = ParamVector::new(arch.clone(), lam.clone()).unwrap();
        let theta = ParamVector::new(arch, the.clone()).unwrap();
        let task = mk_task(0, 5, 4, 2, 2, 2);
        let cfg = quad_cfg(1.5);

        // Independent: explicit per-example 0.5||Wx+b - onehot||^2 plus prox.
        let mut expect = 0.0;
        for ex in &task.train {
            for r in 0..2 {
                let o = the[r * 3] * ex.features[0] + the[r * 3 + 1] * ex.features[1] + the[r * 3 + 2];
                let t = if ex.label == r { 1.0 } else { 0.0 };
                expect += 0.5 * (o - t) * (o - t);
            }
        }
        expect += 0.5
            * cfg.delta
            * the.iter().zip(&lam).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        assert_relative_eq!(
            inner_loss(&lambda, &theta, &task, &cfg).unwrap(),
            expect,
            max_relative = 1e-13
        );
    }

    #[test]
    fn outer_loss_forms() {
        let arch = quad_arch();
        let values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let p = ParamVector::new(arch, values).unwrap();
        let task = TaskData::new(
            0,
            vec![Example::new(vec![0.5, 0.5], 0)],
            vec![Example::new(vec![1.0, 0.0], 0), Example::new(vec![0.0, 1.0], 1)],
        )
        .unwrap();
        let mut cfg = quad_cfg(1.0);
        // perfect val predictions, main_text
        assert_eq!(outer_loss(&p, &p, &task, &cfg).unwrap(), 0.0);
        // appendix form with theta = lambda adds nothing either
        cfg.outer_reg_form = OuterRegForm::AppendixProximal;
        assert_eq!(outer_loss(&p, &p, &task, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn outer_partial_gradients_match_finite_differences() {
        let arch = quad_arch();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let lambda = ParamVector::new(
            arch.clone(),
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let theta = ParamVector::new(
            arch,
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let task = mk_task(0, 2, 3, 3, 2, 2);
        for form in [OuterRegForm::MainText, OuterRegForm::AppendixProximal] {
            let cfg = BilevelConfig { outer_reg_form: form, ..quad_cfg(1.3) };
            let gt = outer_grad_theta(&lambda, &theta, &task, &cfg).unwrap();
            let gl = outer_grad_lambda(&lambda, &theta, &task, &cfg).unwrap();
            let eps = 1e-6;
            for j in 0..6 {
                let mut e = vec![0.0; 6];
                e[j] = eps;
                let tp = theta.offset_by(&e).unwrap();
                e[j] = -eps;
                let tm = theta.offset_by(&e).unwrap();
                let fd = (outer_loss(&lambda, &tp, &task, &cfg).unwrap()
                    - outer_loss(&lambda, &tm, &task, &cfg).unwrap())
                    / (2.0 * eps);
                assert!((gt[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()));

                e[j] = eps;
                let lp = lambda.offset_by(&e).unwrap();
                e[j] = -eps;
                let lm = lambda.offset_by(&e).unwrap();
                let fd = (outer_loss(&lp, &theta, &task, &cfg).unwrap()
                    - outer_loss(&lm, &theta, &task, &cfg).unwrap())
                    / (2.0 * eps);
                assert!((gl[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn solve_inner_proximal_dominance() {
        let arch = quad_arch();
        let lambda = ParamVector::seeded_init(arch, 3);
        let task = mk_task(0, 8, 6, 2, 2, 2);
        // With delta = 1e6 the gradient scale makes 1e-11 unrepresentable;
        // 1e-4 still pins ||theta - lambda|| to ~1e-6.
        let cfg = BilevelConfig { inner_tol: 1e-4, ..quad_cfg(1e6) };
        let theta = solve_inner(&lambda, &task, &cfg).unwrap();
        let d = linalg::sub(theta.values(), lambda.values());
        assert!(linalg::norm2(&d) < 1e-3);
    }

    #[test]
    fn solve_inner_matches_quadratic_closed_form() {
        let arch = quad_arch();
        let lambda = ParamVector::seeded_init(arch.clone(), 4);
        let task = mk_task(0, 12, 8, 2, 2, 2);
        let cfg = quad_cfg(0.7);
        let theta = solve_inner(&lambda, &task, &cfg).unwrap();

        // Closed form: theta = (A + delta I)^{-1} (b + delta lambda) where the
        // data loss is 0.5 theta' A theta - b' theta + c.
        let zero = ParamVector::zeros(arch.clone());
        let a = model::dense_hessian(&zero, &task.train, Loss::Mse).unwrap();
        let (_, g0) = model::loss_and_grad(&zero, &task.train, Loss::Mse).unwrap();
        let b: Vec<f64> = g0.iter().map(|x| -x).collect();
        let rhs = linalg::axpy(&b, cfg.delta, lambda.values());
        let expect = linalg::solve_spd(&a, &rhs, cfg.delta).unwrap();
        for (t, e) in theta.values().iter().zip(&expect) {
            assert!((t - e).abs() < 1e-8 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn solve_inner_gradient_norm_postcondition_and_idempotence() {
        let arch = quad_arch();
        let lambda = ParamVector::seeded_init(arch, 5);
        let task = mk_task(0, 9, 5, 2, 2, 2);
        let cfg = quad_cfg(1.0);
        let theta = solve_inner(&lambda, &task, &cfg).unwrap();
        let g = inner_grad(&lambda, &theta, &task, &cfg).unwrap();
        assert!(linalg::norm2(&g) <= cfg.inner_tol);

        let again = solve_inner_from(&lambda, theta.clone(), &task, &cfg).unwrap();
        let drift = linalg::norm2(&linalg::sub(again.values(), theta.values()));
        assert!(drift < 1e-10);
    }

    #[test]
    fn train_meta_single_task_stationarity() {
        let arch = quad_arch();
        let tasks = vec![mk_task(0, 31, 8, 4, 2, 2)];
        let cfg = quad_cfg(1.0);
        let state = train_meta(&tasks, &cfg, &arch, 7).unwrap();
        assert!(state.converged);
        assert!(state.outer_grad_norm <= cfg.outer_tol * 1.5);
        let g = total_outer_gradient(&state).unwrap();
        assert!(linalg::norm2(&g) <= cfg.outer_tol * 1.5);
    }

    /// Closed-form solution of the two-task quadratic bilevel problem,
    /// computed with dense linear algebra only.
    fn closed_form_lambda(tasks: &[TaskData], cfg: &BilevelConfig, arch: &Arc<Architecture>) -> Vec<f64> {
        let n = arch.param_count();
        let zero = ParamVector::zeros(arch.clone());
        let mut lhs = DenseMatrix::zeros(n, n);
        for i in 0..n {
            lhs.set(i, i, cfg.delta);
        }
        let mut rhs = vec![0.0; n];
        for task in tasks {
            let a = model::dense_hessian(&zero, &task.train, Loss::Mse).unwrap();
            let (_, g0) = model::loss_and_grad(&zero, &task.train, Loss::Mse).unwrap();
            let b: Vec<f64> = g0.iter().map(|x| -x).collect();
            let c = model::dense_hessian(&zero, &task.val, Loss::Mse).unwrap();
            let (_, gv0) = model::loss_and_grad(&zero, &task.val, Loss::Mse).unwrap();
            let d: Vec<f64> = gv0.iter().map(|x| -x).collect();
            // theta(lambda) = M lambda + m, with M = delta (A + delta I)^{-1}.
            let factor = CholeskyFactor::new(&a, cfg.delta).unwrap();
            let mut m_mat = DenseMatrix::zeros(n, n);
            for j in 0..n {
                let mut e = vec![0.0; n];
                e[j] = cfg.delta;
                let col = factor.solve(&e).unwrap();
                for i in 0..n {
                    m_mat.set(i, j, col[i]);
                }
            }
            let m_vec = factor.solve(&b).unwrap();
            // Stationarity contribution: M C (M lambda + m) - M d = 0 parts.
            let cm = c.matmul(&m_mat).unwrap();
            let mcm = m_mat.transpose().matmul(&cm).unwrap();
            for i in 0..n {
                for j in 0..n {
                    lhs.set(i, j, lhs.get(i, j) + mcm.get(i, j));
                }
            }
            let cmv = linalg::matvec(&c, &m_vec).unwrap();
            let t = linalg::sub(&d, &cmv);
            let mt = linalg::matvec(&m_mat.transpose(), &t).unwrap();
            rhs = linalg::axpy(&rhs, 1.0, &mt);
        }
        linalg::solve_spd(&lhs.symmetrized(), &rhs, 0.0).unwrap()
    }

    #[test]
    fn train_meta_matches_two_task_closed_form() {
        let arch = quad_arch();
        let tasks = vec![mk_task(0, 41, 6, 4, 2, 2), mk_task(1, 42, 6, 4, 2, 2)];
        let cfg = quad_cfg(1.0);
        let state = train_meta(&tasks, &cfg, &arch, 11).unwrap();
        let expect = closed_form_lambda(&tasks, &cfg, &arch);
        let err = linalg::norm2(&linalg::sub(state.lambda_star.values(), &expect));
        assert!(
            err < 1e-5 * (1.0 + linalg::norm2(&expect)),
            "err {err} vs lambda norm {}",
            linalg::norm2(&expect)
        );
    }

    #[test]
    fn train_meta_duplicate_task_still_converges() {
        let arch = quad_arch();
        let base = mk_task(0, 51, 6, 4, 2, 2);
        let mut dup = base.clone();
        dup.task_id = 1;
        let tasks = vec![base, dup];
        let cfg = quad_cfg(1.0);
        let state = train_meta(&tasks, &cfg, &arch, 3).unwrap();
        assert!(state.converged);
    }

    #[test]
    fn total_gradient_matches_value_function_finite_differences() {
        let arch = quad_arch();
        let tasks = vec![mk_task(0, 61, 5, 3, 2, 2), mk_task(1, 62, 5, 3, 2, 2)];
        let cfg = BilevelConfig {
            outer_reg_form: OuterRegForm::AppendixProximal,
            ..quad_cfg(0.9)
        };
        let lambda = ParamVector::seeded_init(arch.clone(), 8);
        let warm = vec![lambda.clone(); tasks.len()];

        // Analytic total gradient at this (non-stationary) lambda.
        let mut total = linalg::scale(lambda.values(), cfg.delta);
        for task in &tasks {
            let solve = solve_task_with_factor(&lambda, lambda.clone(), task, &cfg).unwrap();
            let g = task_total_gradient(&lambda, &solve, task, &cfg).unwrap();
            total = linalg::axpy(&total, 1.0, &g);
        }

        let eps = 1e-5;
        for j in 0..lambda.len() {
            let mut e = vec![0.0; lambda.len()];
            e[j] = eps;
            let (vp, _) = outer_value(&lambda.offset_by(&e).unwrap(), &tasks, &cfg, &warm).unwrap();
            e[j] = -eps;
            let (vm, _) = outer_value(&lambda.offset_by(&e).unwrap(), &tasks, &cfg, &warm).unwrap();
            let fd = (vp - vm) / (2.0 * eps);
            assert!(
                (total[j] - fd).abs() < 1e-3 * (1.0 + fd.abs()),
                "coord {j}: analytic {} vs fd {fd}",
                total[j]
            );
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = BilevelConfig { delta: -1.0, ..BilevelConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
