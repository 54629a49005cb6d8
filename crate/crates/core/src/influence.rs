//! Influence estimators: closed-form predictions of how the meta parameter
//! (or a task parameter) changes when a task or a single example is removed,
//! without retraining.
//!
//! All meta-level estimates share one structure: apply the damped inverse of
//! the **total** outer Hessian to an estimator-specific vector. The total
//! Hessian differentiates the outer objective through both the explicit
//! meta-parameter dependence and the implicit path through every task's inner
//! solution; ignoring that path is exactly what the [`direct_if`] baseline
//! does, and what makes it inaccurate.
//!
//! Estimators:
//! * [`task_if`] — remove a whole task.
//! * [`instance_if_val`] — remove one validation example of a task.
//! * [`inner_if`] — effect of a training example on its task parameter only.
//! * [`instance_if_train`] — remove one training example; two stages (the
//!   inner shift, then a loss-difference term pushed through the outer level).
//! * [`direct_if`] — the partial-derivative baseline, kept for comparison.
//!
//! Editing conventions: each estimate's `delta` is defined so that the edited
//! meta parameter is `lambda - delta` for task/validation removals and
//! `lambda + delta` for training-instance removals (the sign the two-stage
//! derivation produces; an override exists because reasonable readers of the
//! derivation may expect the other convention, and the retraining oracle is
//! the ground truth either way).

use crate::bilevel::{self, BilevelConfig, MetaState, OuterRegForm, TaskData};
use crate::error::{Error, Result};
use crate::ihvp::{
    ekfac_fit, ekfac_inverse_apply_scaled, CurvatureOperator, EkfacState, NeumannConfig,
    NeumannSolver,
};
use crate::linalg::{self, CholeskyFactor};
use crate::model::{self, ParamVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, Mutex};

/// Which backend performs the inverse-curvature applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Dense materialization + Cholesky; the ground truth.
    Exact,
    /// Truncated Neumann series for both inner and outer solves.
    Neumann,
    /// Kronecker-factored inner curvature; outer solves fall back to the
    /// Neumann series (the factorization assumes independent layers, which
    /// the total Hessian's cross-layer coupling breaks).
    Ekfac,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Exact => "exact",
            Backend::Neumann => "neumann",
            Backend::Ekfac => "ekfac",
        }
    }
}

/// How the total outer Hessian is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Central finite differences of the total gradient: captures every term,
    /// including the third-order ones, at desk-scale parameter counts.
    FullSmall,
    /// Keeps the analytic second-order terms and replaces the curvature-heavy
    /// remainder by `sum_i ||grad_theta OuterLoss_i||_1 * I`.
    GammaApprox,
}

/// Total-Hessian configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalHessianSpec {
    pub mode: HessianMode,
    /// Toggles the mixed-partial cross term (only nonzero under the
    /// proximal outer form).
    pub include_cross_term: bool,
    /// Additional numerical damping on top of the objective's ridge weight.
    pub extra_damping: f64,
}

impl TotalHessianSpec {
    pub fn full() -> Self {
        Self { mode: HessianMode::FullSmall, include_cross_term: true, extra_damping: 0.0 }
    }

    pub fn gamma() -> Self {
        Self { mode: HessianMode::GammaApprox, include_cross_term: true, extra_damping: 0.0 }
    }
}

/// Kind of removal an influence estimate predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceKind {
    Task,
    InstanceTrain,
    InstanceVal,
    Inner,
    DirectBaseline,
}

/// What the estimate targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfluenceTarget {
    pub task_id: usize,
    pub example_index: Option<usize>,
}

/// Editing sign for training-instance removals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainEditSign {
    /// `lambda + delta`, as the two-stage derivation concludes.
    #[default]
    AppendixPlus,
    /// `lambda - delta`, matching the sign pattern of the other estimators.
    MainTextMinus,
}

/// Solver telemetry carried by every estimate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub backend: String,
    pub hessian_mode: String,
    pub iterations: Option<usize>,
    pub final_change: Option<f64>,
    pub converged: Option<bool>,
    pub extra_damping: f64,
    pub notes: Vec<String>,
}

/// A predicted parameter change plus its provenance.
#[derive(Debug, Clone)]
pub struct InfluenceVector {
    pub delta: Vec<f64>,
    pub kind: InfluenceKind,
    pub target: InfluenceTarget,
    pub backend: Backend,
    pub diagnostics: Diagnostics,
}

impl InfluenceVector {
    /// Editing sign applied to `delta`: `edited = base + sign * delta`.
    pub fn edit_sign(&self, train_sign: TrainEditSign) -> f64 {
        match self.kind {
            InfluenceKind::Task
            | InfluenceKind::InstanceVal
            | InfluenceKind::Inner
            | InfluenceKind::DirectBaseline => -1.0,
            InfluenceKind::InstanceTrain => match train_sign {
                TrainEditSign::AppendixPlus => 1.0,
                TrainEditSign::MainTextMinus => -1.0,
            },
        }
    }
}

/// Engine configuration: Hessian representation, backend, and edit-sign
/// policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub spec: TotalHessianSpec,
    pub backend: Backend,
    pub train_edit_sign: TrainEditSign,
}

impl InfluenceConfig {
    pub fn new(spec: TotalHessianSpec, backend: Backend) -> Self {
        Self { spec, backend, train_edit_sign: TrainEditSign::default() }
    }
}

// ---------------------------------------------------------------------------
// Per-task inner curvature
// ---------------------------------------------------------------------------

/// Owned snapshot of one task's inner problem at the converged state,
/// with a Cholesky factor of the inner Hessian for fast exact solves and a
/// preconditioner for probe points nearby.
struct TaskCurvature {
    task: TaskData,
    theta: ParamVector,
    factor: Arc<CholeskyFactor>,
    /// Backend-specific inner solver state.
    solver: InnerSolver,
}

enum InnerSolver {
    Exact,
    Neumann { scale: f64 },
    Ekfac { state: EkfacState },
}

impl TaskCurvature {
    fn build(state: &MetaState, idx: usize, backend: Backend) -> Result<Self> {
        let cfg = &state.config;
        let task = state.tasks[idx].clone();
        let theta = state.thetas[idx].clone();
        let h = bilevel::inner_hessian(&theta, &task, cfg)?;
        let factor = match CholeskyFactor::new(&h, 0.0) {
            Ok(f) => f,
            Err(Error::NotPositiveDefinite { .. }) => {
                CholeskyFactor::new(&h, 1e-8 + 1e-6 * cfg.delta)?
            }
            Err(e) => return Err(e),
        };
        let solver = match backend {
            Backend::Exact => InnerSolver::Exact,
            Backend::Neumann => {
                let op = inner_operator(&theta, &task, cfg);
                let auto = NeumannConfig::auto(&op, 0.0)?;
                InnerSolver::Neumann { scale: auto.scale }
            }
            Backend::Ekfac => {
                let ek = ekfac_fit(&theta, &task.train, cfg.loss, Some(cfg.delta))?;
                InnerSolver::Ekfac { state: ek }
            }
        };
        Ok(Self { task, theta, factor: Arc::new(factor), solver })
    }

    /// `H_inner^{-1} v` through the configured backend.
    fn inverse_apply(&self, cfg: &BilevelConfig, v: &[f64]) -> Result<Vec<f64>> {
        match &self.solver {
            InnerSolver::Exact => self.factor.solve(v),
            InnerSolver::Neumann { scale } => {
                let op = inner_operator(&self.theta, &self.task, cfg);
                let ncfg = NeumannConfig::new(*scale, 4000, 1e-10);
                let solver = NeumannSolver::new(&op, 0.0, ncfg)?;
                Ok(solver.solve(v)?.x)
            }
            InnerSolver::Ekfac { state } => {
                // The fit holds the mean per-example Fisher; scale by the
                // example count to match the summed data loss, damp by the
                // proximal ridge that completes the inner Hessian.
                let n = self.task.train.len() as f64;
                ekfac_inverse_apply_scaled(state, v, n, Some(cfg.delta))
            }
        }
    }
}

/// Inner Hessian as an operator (data Hessian plus the proximal ridge).
fn inner_operator(theta: &ParamVector, task: &TaskData, cfg: &BilevelConfig) -> CurvatureOperator {
    let theta = theta.clone();
    let train = task.train.clone();
    let cfg = cfg.clone();
    CurvatureOperator::new(theta.len(), "inner Hessian", move |v| {
        let mut out = model::hvp(&theta, &train, cfg.loss, v)?;
        for (o, x) in out.iter_mut().zip(v) {
            *o += cfg.delta * x;
        }
        Ok(out)
    })
}

// ---------------------------------------------------------------------------
// Probe solves for the finite-difference total Hessian
// ---------------------------------------------------------------------------

/// Re-solves one inner problem at a meta parameter near the base point and
/// applies the refreshed inverse Hessian, using the base Cholesky factor as a
/// preconditioner so no dense Hessian is rebuilt per probe.
struct ProbeSolver<'a> {
    curv: &'a TaskCurvature,
    cfg: &'a BilevelConfig,
}

impl ProbeSolver<'_> {
    /// Inner solution at `lambda_probe`, warm-started from the base theta.
    fn solve_theta(&self, lambda_probe: &ParamVector) -> Result<ParamVector> {
        let mut theta = self.curv.theta.clone();
        for _ in 0..12 {
            let g = bilevel::inner_grad(lambda_probe, &theta, &self.curv.task, self.cfg)?;
            if linalg::norm2(&g) <= self.cfg.inner_tol {
                return Ok(theta);
            }
            let step = self.curv.factor.solve(&g)?;
            theta = theta.offset_by(&linalg::scale(&step, -1.0))?;
        }
        // Preconditioned iteration stalled (probe too far out); fall back to
        // the full solver.
        bilevel::solve_inner_from(lambda_probe, theta, &self.curv.task, self.cfg)
    }

    /// `H_inner(theta_probe)^{-1} v` by iterative refinement against the base
    /// factor, with Hessian applies evaluated at the probe point.
    fn refined_inverse(&self, theta_probe: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.curv.factor.solve(v)?;
        let vnorm = linalg::norm2(v).max(1e-300);
        for _ in 0..25 {
            let hx = bilevel::inner_hvp(theta_probe, &self.curv.task, self.cfg, &x)?;
            let r = linalg::sub(v, &hx);
            if linalg::norm2(&r) <= 1e-12 * vnorm {
                return Ok(x);
            }
            let corr = self.curv.factor.solve(&r)?;
            x = linalg::axpy(&x, 1.0, &corr);
        }
        // Refinement is contractive only near the base point; rebuild densely
        // if the probe drifted outside that regime.
        let h = bilevel::inner_hessian(theta_probe, &self.curv.task, self.cfg)?;
        CholeskyFactor::new(&h, 0.0)
            .or_else(|_| CholeskyFactor::new(&h, 1e-8 + 1e-6 * self.cfg.delta))?
            .solve(v)
    }

    /// Total gradient of this task's outer loss at the probe point.
    fn total_gradient_at(&self, lambda_probe: &ParamVector) -> Result<Vec<f64>> {
        let theta = self.solve_theta(lambda_probe)?;
        let g_theta = bilevel::outer_grad_theta(lambda_probe, &theta, &self.curv.task, self.cfg)?;
        let solved = self.refined_inverse(&theta, &g_theta)?;
        let implicit = linalg::scale(&solved, self.cfg.delta);
        let explicit =
            bilevel::outer_grad_lambda(lambda_probe, &theta, &self.curv.task, self.cfg)?;
        Ok(linalg::axpy(&explicit, 1.0, &implicit))
    }
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

enum OuterSolver {
    Exact(CholeskyFactor),
    Neumann { op: CurvatureOperator, cfg: NeumannConfig, damping: f64 },
}

/// Attribution engine over one converged state: caches per-task curvature
/// factors and the (expensive) outer total-Hessian representation so that
/// many estimates amortize the setup.
pub struct Engine {
    state: Arc<MetaState>,
    cfg: InfluenceConfig,
    tasks: Vec<TaskCurvature>,
    outer: Mutex<Option<Arc<OuterSolver>>>,
}

impl Engine {
    pub fn new(state: Arc<MetaState>, cfg: InfluenceConfig) -> Result<Self> {
        if !state.converged {
            return Err(Error::UnconvergedState { outer_grad_norm: state.outer_grad_norm });
        }
        if !(cfg.spec.extra_damping.is_finite() && cfg.spec.extra_damping >= 0.0) {
            return Err(Error::Config {
                path: "influence.extra_damping".into(),
                message: format!("must be finite and nonnegative, got {}", cfg.spec.extra_damping),
            });
        }
        let tasks: Vec<Result<TaskCurvature>> = (0..state.tasks.len())
            .into_par_iter()
            .map(|i| TaskCurvature::build(&state, i, cfg.backend))
            .collect();
        let tasks = tasks.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self { state, cfg, tasks, outer: Mutex::new(None) })
    }

    pub fn state(&self) -> &MetaState {
        &self.state
    }

    pub fn config(&self) -> &InfluenceConfig {
        &self.cfg
    }

    fn task_idx(&self, task_id: usize) -> Result<usize> {
        self.state.task_index(task_id)
    }

    /// Outer solve damping: the objective's own ridge plus the numerical knob.
    fn outer_damping(&self) -> f64 {
        self.state.config.delta + self.cfg.spec.extra_damping
    }

    /// Applies `d theta_k / d lambda` to a vector. The mixed partial of the
    /// proximal inner objective is `-delta * I`, so the generic
    /// `-(mixed partial) * H_inner^{-1} v` chain reduces to a scaled inverse
    /// apply; the chain is kept explicit so a different inner objective only
    /// has to swap the mixed-partial operator.
    pub fn dtheta_dlambda_apply(&self, task_id: usize, v: &[f64]) -> Result<Vec<f64>> {
        let idx = self.task_idx(task_id)?;
        let solved = self.tasks[idx].inverse_apply(&self.state.config, v)?;
        Ok(self.neg_mixed_partial_apply(&solved))
    }

    /// `-(d/d lambda)(d/d theta) InnerLoss` applied to a vector: `delta * w`.
    fn neg_mixed_partial_apply(&self, w: &[f64]) -> Vec<f64> {
        linalg::scale(w, self.state.config.delta)
    }

    /// Total gradient of one task's outer loss at the converged state.
    pub fn total_gradient_task(&self, task_id: usize) -> Result<Vec<f64>> {
        let idx = self.task_idx(task_id)?;
        let curv = &self.tasks[idx];
        let cfg = &self.state.config;
        let lambda = &self.state.lambda_star;
        let g_theta = bilevel::outer_grad_theta(lambda, &curv.theta, &curv.task, cfg)?;
        let implicit = self.dtheta_dlambda_apply(task_id, &g_theta)?;
        let explicit = bilevel::outer_grad_lambda(lambda, &curv.theta, &curv.task, cfg)?;
        Ok(linalg::axpy(&explicit, 1.0, &implicit))
    }

    /// Builds the configured total-Hessian operator (ridge not included).
    pub fn total_hessian_operator(&self) -> Result<CurvatureOperator> {
        build_total_hessian_operator(&self.state, &self.tasks, self.cfg.spec, self.cfg.backend)
    }

    fn outer_solver(&self) -> Result<Arc<OuterSolver>> {
        let mut slot = self.outer.lock().expect("outer solver lock poisoned");
        if let Some(ready) = slot.as_ref() {
            return Ok(ready.clone());
        }
        let op = self.total_hessian_operator()?;
        let damping = self.outer_damping();
        let solver = match self.cfg.backend {
            Backend::Exact => {
                let mat = op.materialize()?.symmetrized();
                OuterSolver::Exact(CholeskyFactor::new(&mat, damping)?)
            }
            Backend::Neumann | Backend::Ekfac => {
                let cfg = NeumannConfig::auto(&op, damping)?;
                // Run the contraction precheck once here; solves reuse it.
                NeumannSolver::new(&op, damping, cfg)?;
                OuterSolver::Neumann { op, cfg, damping }
            }
        };
        let ready = Arc::new(solver);
        *slot = Some(ready.clone());
        Ok(ready)
    }

    /// Solves `(delta I + H_total) x = rhs` with the configured backend.
    fn outer_solve(&self, rhs: &[f64], diag: &mut Diagnostics) -> Result<Vec<f64>> {
        let solver = self.outer_solver()?;
        match solver.as_ref() {
            OuterSolver::Exact(factor) => factor.solve(rhs),
            OuterSolver::Neumann { op, cfg, damping } => {
                let res = NeumannSolver::new_prevalidated(op, *damping, *cfg).solve(rhs)?;
                diag.iterations = Some(res.iterations);
                diag.final_change = Some(res.final_change);
                diag.converged = Some(res.converged);
                if !res.converged {
                    diag.notes.push(format!(
                        "series budget exhausted at change {:.3e}",
                        res.final_change
                    ));
                }
                Ok(res.x)
            }
        }
    }

    fn base_diagnostics(&self, mode: &str) -> Diagnostics {
        Diagnostics {
            backend: self.cfg.backend.name().into(),
            hessian_mode: mode.into(),
            extra_damping: self.cfg.spec.extra_damping,
            notes: if self.cfg.backend == Backend::Ekfac {
                vec!["outer solve via Neumann series; Kronecker factorization covers inner Hessians only".into()]
            } else {
                Vec::new()
            },
            ..Diagnostics::default()
        }
    }

    fn mode_name(&self) -> &'static str {
        match self.cfg.spec.mode {
            HessianMode::FullSmall => "full_small",
            HessianMode::GammaApprox => "gamma_approx",
        }
    }

    /// Influence of removing a whole task on the meta parameter.
    pub fn task_if(&self, task_id: usize) -> Result<InfluenceVector> {
        let mut diag = self.base_diagnostics(self.mode_name());
        let total_grad = self.total_gradient_task(task_id)?;
        let solved = self.outer_solve(&total_grad, &mut diag)?;
        Ok(InfluenceVector {
            delta: linalg::scale(&solved, -1.0),
            kind: InfluenceKind::Task,
            target: InfluenceTarget { task_id, example_index: None },
            backend: self.cfg.backend,
            diagnostics: diag,
        })
    }

    /// Baseline that ignores the implicit dependence of task parameters on
    /// the meta parameter: inverts only the explicit partial Hessian. Under
    /// the main-text outer form both the applied vector and the partial
    /// Hessian vanish, so the estimate is identically zero.
    pub fn direct_if(&self, task_id: usize) -> Result<InfluenceVector> {
        let idx = self.task_idx(task_id)?;
        let cfg = &self.state.config;
        let lambda = &self.state.lambda_star;
        let curv = &self.tasks[idx];
        let g_lambda = bilevel::outer_grad_lambda(lambda, &curv.theta, &curv.task, cfg)?;
        // Partial lambda-lambda Hessian: zero (main text) or T * delta * I.
        let hess_scalar = match cfg.outer_reg_form {
            OuterRegForm::MainText => 0.0,
            OuterRegForm::AppendixProximal => self.state.tasks.len() as f64 * cfg.delta,
        };
        let mut diag = self.base_diagnostics("direct");
        diag.notes.push("partial Hessian is a scalar multiple of the identity".into());
        let denom = self.outer_damping() + hess_scalar;
        let delta = linalg::scale(&g_lambda, -1.0 / denom);
        Ok(InfluenceVector {
            delta,
            kind: InfluenceKind::DirectBaseline,
            target: InfluenceTarget { task_id, example_index: None },
            backend: self.cfg.backend,
            diagnostics: diag,
        })
    }

    fn check_example(&self, task_id: usize, split: &'static str, index: usize) -> Result<usize> {
        let idx = self.task_idx(task_id)?;
        let task = &self.tasks[idx].task;
        let len = match split {
            "train" => task.train.len(),
            _ => task.val.len(),
        };
        if index >= len {
            return Err(Error::BadExampleIndex { task_id, split, index, len });
        }
        Ok(idx)
    }

    /// Influence of a training example on its task parameter only.
    pub fn inner_if(&self, task_id: usize, example_index: usize) -> Result<InfluenceVector> {
        let idx = self.check_example(task_id, "train", example_index)?;
        let curv = &self.tasks[idx];
        let cfg = &self.state.config;
        let ex = curv.task.train[example_index].clone();
        let (_, g) = model::loss_and_grad(&curv.theta, &[ex], cfg.loss)?;
        let solved = curv.inverse_apply(cfg, &g)?;
        let mut diag = self.base_diagnostics("inner");
        diag.notes.push("edits the task parameter, not the meta parameter".into());
        Ok(InfluenceVector {
            delta: linalg::scale(&solved, -1.0),
            kind: InfluenceKind::Inner,
            target: InfluenceTarget { task_id, example_index: Some(example_index) },
            backend: self.cfg.backend,
            diagnostics: diag,
        })
    }

    /// Loss-difference term for a training-example removal: value and total
    /// gradient w.r.t. the meta parameter.
    ///
    /// `P = grad_theta(OuterLoss)ᵀ H_inner^{-1} grad_theta(example loss)`;
    /// the total gradient differentiates both gradient factors through
    /// `theta_k(lambda)` (and the explicit lambda dependence, if any) while
    /// holding `H_inner^{-1}` fixed — its variation is third-order in the
    /// inner loss and is deliberately dropped, matching the accuracy class of
    /// the rest of the pipeline.
    pub fn p_term(&self, task_id: usize, example_index: usize) -> Result<(f64, Vec<f64>)> {
        let idx = self.check_example(task_id, "train", example_index)?;
        let curv = &self.tasks[idx];
        let cfg = &self.state.config;
        let lambda = &self.state.lambda_star;
        let ex = curv.task.train[example_index].clone();

        let (_, g_z) = model::loss_and_grad(&curv.theta, &[ex.clone()], cfg.loss)?;
        let g_val = bilevel::outer_grad_theta(lambda, &curv.theta, &curv.task, cfg)?;
        let u = curv.inverse_apply(cfg, &g_z)?;
        let w = curv.inverse_apply(cfg, &g_val)?;
        let value = linalg::dot(&g_val, &u);

        // d/d lambda of the OuterLoss gradient factor, applied to u.
        let mut hval_u = model::hvp(&curv.theta, &curv.task.val, cfg.loss, &u)?;
        if cfg.outer_reg_form == OuterRegForm::AppendixProximal {
            hval_u = linalg::axpy(&hval_u, cfg.delta, &u);
        }
        let mut grad = self.neg_mixed_partial_apply(&curv.inverse_apply(cfg, &hval_u)?);
        if cfg.outer_reg_form == OuterRegForm::AppendixProximal {
            // Explicit mixed partial of the proximal outer loss: -delta * u.
            grad = linalg::axpy(&grad, -cfg.delta, &u);
        }
        // d/d lambda of the example-gradient factor, applied to w.
        let hz_w = model::hvp(&curv.theta, &[ex], cfg.loss, &w)?;
        let chain = self.neg_mixed_partial_apply(&curv.inverse_apply(cfg, &hz_w)?);
        grad = linalg::axpy(&grad, 1.0, &chain);
        Ok((value, grad))
    }

    /// Influence of removing a validation example on the meta parameter.
    /// The applied vector is the total derivative of the example loss.
    pub fn instance_if_val(&self, task_id: usize, example_index: usize) -> Result<InfluenceVector> {
        let idx = self.check_example(task_id, "val", example_index)?;
        let curv = &self.tasks[idx];
        let cfg = &self.state.config;
        let ex = curv.task.val[example_index].clone();
        let (_, g_z) = model::loss_and_grad(&curv.theta, &[ex], cfg.loss)?;
        // Total derivative: the example loss has no explicit meta dependence,
        // so only the implicit path contributes.
        let applied = self.dtheta_dlambda_apply(task_id, &g_z)?;
        let mut diag = self.base_diagnostics(self.mode_name());
        let solved = self.outer_solve(&applied, &mut diag)?;
        Ok(InfluenceVector {
            delta: linalg::scale(&solved, -1.0),
            kind: InfluenceKind::InstanceVal,
            target: InfluenceTarget { task_id, example_index: Some(example_index) },
            backend: self.cfg.backend,
            diagnostics: diag,
        })
    }

    /// Influence of removing a training example on the meta parameter:
    /// the inner shift is translated into a loss-difference term whose total
    /// gradient is pushed through the outer inverse Hessian.
    pub fn instance_if_train(
        &self,
        task_id: usize,
        example_index: usize,
    ) -> Result<InfluenceVector> {
        let (_, d_p) = self.p_term(task_id, example_index)?;
        let mut diag = self.base_diagnostics(self.mode_name());
        let solved = self.outer_solve(&d_p, &mut diag)?;
        Ok(InfluenceVector {
            delta: linalg::scale(&solved, -1.0),
            kind: InfluenceKind::InstanceTrain,
            target: InfluenceTarget { task_id, example_index: Some(example_index) },
            backend: self.cfg.backend,
            diagnostics: diag,
        })
    }

    /// Edited meta parameter according to the estimate's sign convention.
    pub fn edited_model(&self, iv: &InfluenceVector) -> Result<ParamVector> {
        if iv.kind == InfluenceKind::Inner {
            return Err(Error::LayoutMismatch(
                "inner influence edits the task parameter; use edited_theta".into(),
            ));
        }
        let sign = iv.edit_sign(self.cfg.train_edit_sign);
        self.state.lambda_star.offset_by(&linalg::scale(&iv.delta, sign))
    }

    /// Edited task parameter for an inner-influence estimate.
    pub fn edited_theta(&self, iv: &InfluenceVector) -> Result<ParamVector> {
        if iv.kind != InfluenceKind::Inner {
            return Err(Error::LayoutMismatch(
                "only inner influence edits the task parameter".into(),
            ));
        }
        let idx = self.task_idx(iv.target.task_id)?;
        self.tasks[idx].theta.offset_by(&linalg::scale(&iv.delta, -1.0))
    }

    /// Applies a list of influence estimates to the meta parameter. Estimates
    /// of kind `Inner` are rejected (they edit a task parameter).
    pub fn edit_model(&self, influences: &[InfluenceVector]) -> Result<ParamVector> {
        let mut lambda = self.state.lambda_star.clone();
        for iv in influences {
            if iv.kind == InfluenceKind::Inner {
                return Err(Error::LayoutMismatch(
                    "inner influence edits the task parameter; use edited_theta".into(),
                ));
            }
            let sign = iv.edit_sign(self.cfg.train_edit_sign);
            lambda = lambda.offset_by(&linalg::scale(&iv.delta, sign))?;
        }
        Ok(lambda)
    }

    /// Influence score of an estimate on a fresh task: the new task adapts
    /// from the current meta parameter, and the score is the inner product of
    /// its validation gradient with the influence delta. Positive scores mean
    /// the removal would reduce the new task's validation loss.
    pub fn influence_score(&self, iv: &InfluenceVector, new_task: &TaskData) -> Result<f64> {
        let grad = new_task_val_gradient(&self.state, new_task)?;
        Ok(linalg::dot(&grad, &iv.delta))
    }
}

/// Validation gradient of a freshly adapted task at the current meta
/// parameter; precompute this when scoring many influence vectors against the
/// same probe task.
pub fn new_task_val_gradient(state: &MetaState, new_task: &TaskData) -> Result<Vec<f64>> {
    let cfg = &state.config;
    let theta = bilevel::solve_inner(&state.lambda_star, new_task, cfg)?;
    let (_, grad) = model::loss_and_grad(&theta, &new_task.val, cfg.loss)?;
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Total-Hessian operator construction
// ---------------------------------------------------------------------------

fn build_total_hessian_operator(
    state: &Arc<MetaState>,
    tasks: &[TaskCurvature],
    spec: TotalHessianSpec,
    _backend: Backend,
) -> Result<CurvatureOperator> {
    let n = state.lambda_star.len();
    match spec.mode {
        HessianMode::FullSmall => {
            if n > model::DENSE_HESSIAN_GUARD {
                return Err(Error::GuardExceeded {
                    what: "finite-difference total Hessian dimension",
                    found: n,
                    guard: model::DENSE_HESSIAN_GUARD,
                });
            }
            // Owned snapshots for the 'static operator closure.
            let snapshots: Vec<(TaskData, ParamVector, Arc<CholeskyFactor>)> = tasks
                .iter()
                .map(|t| (t.task.clone(), t.theta.clone(), t.factor.clone()))
                .collect();
            let cfg = state.config.clone();
            let lambda = state.lambda_star.clone();
            let h_base = 1e-4 * (1.0 + lambda.values().iter().fold(0.0f64, |a, &b| a.max(b.abs())));
            Ok(CurvatureOperator::new(
                n,
                "total Hessian (central differences of the total gradient)",
                move |v| {
                    let nv = linalg::norm2(v);
                    if nv == 0.0 {
                        return Ok(vec![0.0; v.len()]);
                    }
                    let h = h_base / nv;
                    let plus = lambda.offset_by(&linalg::scale(v, h))?;
                    let minus = lambda.offset_by(&linalg::scale(v, -h))?;
                    let per_task: Vec<Result<(Vec<f64>, Vec<f64>)>> = snapshots
                        .par_iter()
                        .map(|(task, theta, factor)| {
                            let curv = TaskCurvature {
                                task: task.clone(),
                                theta: theta.clone(),
                                factor: factor.clone(),
                                solver: InnerSolver::Exact,
                            };
                            let probe = ProbeSolver { curv: &curv, cfg: &cfg };
                            Ok((probe.total_gradient_at(&plus)?, probe.total_gradient_at(&minus)?))
                        })
                        .collect();
                    let mut g_plus = vec![0.0; v.len()];
                    let mut g_minus = vec![0.0; v.len()];
                    for r in per_task {
                        let (gp, gm) = r?;
                        g_plus = linalg::axpy(&g_plus, 1.0, &gp);
                        g_minus = linalg::axpy(&g_minus, 1.0, &gm);
                    }
                    Ok(linalg::scale(&linalg::sub(&g_plus, &g_minus), 1.0 / (2.0 * h)))
                },
            ))
        }
        HessianMode::GammaApprox => {
            let cfg = state.config.clone();
            let lambda = state.lambda_star.clone();
            // L1 replacement for the dropped curvature terms.
            let mut gamma = 0.0;
            for t in tasks {
                let g = bilevel::outer_grad_theta(&lambda, &t.theta, &t.task, &cfg)?;
                gamma += linalg::norm1(&g);
            }
            let snapshots: Vec<(TaskData, ParamVector, Arc<CholeskyFactor>)> = tasks
                .iter()
                .map(|t| (t.task.clone(), t.theta.clone(), t.factor.clone()))
                .collect();
            let include_cross = spec.include_cross_term;
            Ok(CurvatureOperator::new(
                n,
                "total Hessian (gamma approximation)",
                move |v| {
                    let mut out = linalg::scale(v, gamma);
                    if cfg.outer_reg_form == OuterRegForm::AppendixProximal {
                        let t_count = snapshots.len() as f64;
                        // Explicit lambda-lambda partials: delta * I per task.
                        out = linalg::axpy(&out, t_count * cfg.delta, v);
                        if include_cross {
                            // Cross term 2 * (d theta/d lambda) * (theta-lambda
                            // mixed partial) = -2 delta^2 H_inner^{-1} per task.
                            for (_, _, factor) in &snapshots {
                                let solved = factor.solve(v)?;
                                out = linalg::axpy(&out, -2.0 * cfg.delta * cfg.delta, &solved);
                            }
                        }
                    }
                    Ok(out)
                },
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// One-shot wrappers
// ---------------------------------------------------------------------------

fn one_shot(state: &MetaState, spec: TotalHessianSpec, backend: Backend) -> Result<Engine> {
    Engine::new(Arc::new(state.clone()), InfluenceConfig::new(spec, backend))
}

/// See [`Engine::dtheta_dlambda_apply`]. Uses the exact inner backend.
pub fn dtheta_dlambda_apply(state: &MetaState, task_id: usize, v: &[f64]) -> Result<Vec<f64>> {
    one_shot(state, TotalHessianSpec::full(), Backend::Exact)?.dtheta_dlambda_apply(task_id, v)
}

/// See [`Engine::total_gradient_task`]. Uses the exact inner backend.
pub fn total_gradient_task(state: &MetaState, task_id: usize) -> Result<Vec<f64>> {
    one_shot(state, TotalHessianSpec::full(), Backend::Exact)?.total_gradient_task(task_id)
}

/// Total-Hessian operator over a converged state (ridge not included).
pub fn total_hessian_operator(state: &MetaState, spec: TotalHessianSpec) -> Result<CurvatureOperator> {
    let engine = one_shot(state, spec, Backend::Exact)?;
    engine.total_hessian_operator()
}

pub fn task_if(
    state: &MetaState,
    task_id: usize,
    spec: TotalHessianSpec,
    backend: Backend,
) -> Result<InfluenceVector> {
    one_shot(state, spec, backend)?.task_if(task_id)
}

pub fn direct_if(state: &MetaState, task_id: usize, backend: Backend) -> Result<InfluenceVector> {
    one_shot(state, TotalHessianSpec::full(), backend)?.direct_if(task_id)
}

pub fn inner_if(state: &MetaState, task_id: usize, example_index: usize) -> Result<InfluenceVector> {
    one_shot(state, TotalHessianSpec::full(), Backend::Exact)?.inner_if(task_id, example_index)
}

/// Value of the loss-difference term for a training-example removal.
pub fn p_term_value(state: &MetaState, task_id: usize, example_index: usize) -> Result<f64> {
    Ok(one_shot(state, TotalHessianSpec::full(), Backend::Exact)?
        .p_term(task_id, example_index)?
        .0)
}

/// Total gradient of the loss-difference term w.r.t. the meta parameter.
pub fn p_term_gradient(state: &MetaState, task_id: usize, example_index: usize) -> Result<Vec<f64>> {
    Ok(one_shot(state, TotalHessianSpec::full(), Backend::Exact)?
        .p_term(task_id, example_index)?
        .1)
}

pub fn instance_if_val(
    state: &MetaState,
    task_id: usize,
    example_index: usize,
    spec: TotalHessianSpec,
    backend: Backend,
) -> Result<InfluenceVector> {
    one_shot(state, spec, backend)?.instance_if_val(task_id, example_index)
}

pub fn instance_if_train(
    state: &MetaState,
    task_id: usize,
    example_index: usize,
    spec: TotalHessianSpec,
    backend: Backend,
) -> Result<InfluenceVector> {
    one_shot(state, spec, backend)?.instance_if_train(task_id, example_index)
}

pub fn influence_score(
    state: &MetaState,
    influence: &InfluenceVector,
    new_task: &TaskData,
) -> Result<f64> {
    let grad = new_task_val_gradient(state, new_task)?;
    Ok(linalg::dot(&grad, &influence.delta))
}

/// Folds a list of influence estimates into an edited meta parameter using
/// the default sign conventions.
pub fn edit_model(state: &MetaState, influences: &[InfluenceVector]) -> Result<ParamVector> {
    let mut lambda = state.lambda_star.clone();
    for iv in influences {
        if iv.kind == InfluenceKind::Inner {
            return Err(Error::LayoutMismatch(
                "inner influence edits the task parameter; use edited_theta".into(),
            ));
        }
        let sign = iv.edit_sign(TrainEditSign::default());
        lambda = lambda.offset_by(&linalg::scale(&iv.delta, sign))?;
    }
    Ok(lambda)
}
