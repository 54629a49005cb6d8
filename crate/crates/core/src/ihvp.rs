//! Inverse-curvature-vector products: interchangeable backends computing
//! `(A + damping * I)^{-1} v` for a symmetric positive-semidefinite operator
//! `A` given only through matrix-vector applies.
//!
//! Three routes with very different cost/accuracy profiles:
//!
//! * [`ihvp_exact`] materializes the operator column by column and solves with
//!   a Cholesky factorization — the ground-truth backend, quadratic memory.
//! * [`ihvp_neumann`] runs the damped Richardson iteration that sums the
//!   truncated Neumann series; never stores a matrix, needs the scaled
//!   spectrum inside the unit ball (checked up front by power iteration).
//! * [`ekfac_fit`] / [`ekfac_inverse_apply`] approximate a per-layer empirical
//!   Fisher by a Kronecker product of activation and gradient second moments,
//!   eigendecompose the small factors, and correct the eigenvalues so the
//!   diagonal is exact in the Kronecker eigenbasis.

use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor, DenseMatrix, EigenDecomposition};
use crate::model::{self, Architecture, Example, Loss, ParamVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;

/// Symmetric PSD linear operator given by its matrix-vector apply.
pub struct CurvatureOperator {
    dim: usize,
    description: String,
    apply_fn: Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>,
}

impl std::fmt::Debug for CurvatureOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CurvatureOperator")
            .field("dim", &self.dim)
            .field("description", &self.description)
            .finish()
    }
}

impl CurvatureOperator {
    pub fn new(
        dim: usize,
        description: impl Into<String>,
        apply_fn: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, description: description.into(), apply_fn: Box::new(apply_fn) }
    }

    pub fn from_dense(m: DenseMatrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch(format!(
                "operator matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let dim = m.rows();
        Ok(Self::new(dim, "dense matrix", move |v| linalg::matvec(&m, v)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "operator dim {} applied to vector of len {}",
                self.dim,
                v.len()
            )));
        }
        let out = (self.apply_fn)(v)?;
        if out.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "operator returned len {} instead of {}",
                out.len(),
                self.dim
            )));
        }
        Ok(out)
    }

    /// Statistical linearity and symmetry check on random probes.
    pub fn validate(&self, probes: usize, seed: u64, tol: f64) -> Result<()> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for _ in 0..probes {
            let u: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(-2.0..2.0);
            let au = self.apply(&u)?;
            let av = self.apply(&v)?;
            let mixed: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let amixed = self.apply(&mixed)?;
            let lin_ref = linalg::axpy(&linalg::scale(&au, a), b, &av);
            let scale = linalg::norm2(&lin_ref).max(1.0);
            let lin_dev = linalg::norm2(&linalg::sub(&amixed, &lin_ref)) / scale;
            if lin_dev > tol {
                return Err(Error::OperatorCheck { check: "linearity", deviation: lin_dev, tol });
            }
            let sym_dev = (linalg::dot(&u, &av) - linalg::dot(&au, &v)).abs() / scale;
            if sym_dev > tol {
                return Err(Error::OperatorCheck { check: "symmetry", deviation: sym_dev, tol });
            }
        }
        Ok(())
    }

    /// Materializes the operator column by column.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        let n = self.dim;
        let mut m = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply(&e)?;
            e[j] = 0.0;
            for i in 0..n {
                m.set(i, j, col[i]);
            }
        }
        Ok(m)
    }
}

/// Dimension guard for the dense backend.
pub const EXACT_DIM_GUARD: usize = 4000;

const EXACT_RESIDUAL_TOL: f64 = 1e-9;

/// Ground-truth backend: dense materialization plus Cholesky solve of
/// `(A + damping * I) x = v`. The materialized matrix is symmetrized first so
/// operators that are symmetric only up to numerical noise stay solvable; the
/// residual is verified against the symmetrized matrix.
pub fn ihvp_exact(op: &CurvatureOperator, v: &[f64], damping: f64) -> Result<Vec<f64>> {
    if op.dim() > EXACT_DIM_GUARD {
        return Err(Error::GuardExceeded {
            what: "exact iHVP dimension",
            found: op.dim(),
            guard: EXACT_DIM_GUARD,
        });
    }
    let a = op.materialize()?.symmetrized();
    let x = CholeskyFactor::new(&a, damping)?.solve(v)?;
    let back = linalg::axpy(&linalg::matvec(&a, &x)?, damping, &x);
    let residual = linalg::norm2(&linalg::sub(&back, v)) / linalg::norm2(v).max(1e-300);
    if residual > EXACT_RESIDUAL_TOL {
        return Err(Error::SolveResidual { residual, tol: EXACT_RESIDUAL_TOL });
    }
    Ok(x)
}

/// Truncated-series configuration: step scale, term budget, and the L1-change
/// stopping threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeumannConfig {
    /// Step scale; the iteration contracts when the spectrum of
    /// `I - scale * (A + damping * I)` stays inside the unit ball.
    pub scale: f64,
    /// Maximum number of series terms.
    pub max_terms: usize,
    /// Stop once the L1 norm of the iterate change drops to this level.
    pub stop_tol: f64,
}

impl NeumannConfig {
    pub fn new(scale: f64, max_terms: usize, stop_tol: f64) -> Self {
        Self { scale, max_terms, stop_tol }
    }

    /// Picks `scale = 0.9 / lambda_max(A + damping I)` from a 30-step power
    /// iteration, guaranteeing contraction for PSD operators.
    pub fn auto(op: &CurvatureOperator, damping: f64) -> Result<Self> {
        let lam = power_iteration_largest(op, damping, 30)?;
        let scale = if lam > 0.0 { 0.9 / lam } else { 1.0 };
        Ok(Self { scale, max_terms: 2000, stop_tol: 1e-9 })
    }
}

fn power_iteration_largest(op: &CurvatureOperator, damping: f64, iters: usize) -> Result<f64> {
    let n = op.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_cafe);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = linalg::norm2(&v).max(1e-300);
    v = linalg::scale(&v, 1.0 / nv);
    let mut estimate = 0.0;
    for _ in 0..iters {
        let w = linalg::axpy(&op.apply(&v)?, damping, &v);
        let nw = linalg::norm2(&w);
        if nw < 1e-300 {
            return Ok(0.0);
        }
        estimate = nw;
        v = linalg::scale(&w, 1.0 / nw);
    }
    Ok(estimate)
}

/// Outcome of a truncated-series solve.
#[derive(Debug, Clone)]
pub struct NeumannResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// L1 norm of the last iterate change.
    pub final_change: f64,
    /// False when the term budget ran out before the change dropped below
    /// `stop_tol`; the partial sum is still returned.
    pub converged: bool,
}

/// Prechecked series solver, reusable for many right-hand sides against the
/// same operator.
pub struct NeumannSolver<'a> {
    op: &'a CurvatureOperator,
    damping: f64,
    cfg: NeumannConfig,
}

impl<'a> NeumannSolver<'a> {
    /// Validates the contraction condition by estimating the spectral radius
    /// of `I - scale * (A + damping I)` with 30 power-iteration steps.
    pub fn new(op: &'a CurvatureOperator, damping: f64, cfg: NeumannConfig) -> Result<Self> {
        if !(cfg.scale.is_finite() && cfg.scale > 0.0) {
            return Err(Error::Config {
                path: "neumann.scale".into(),
                message: format!("must be positive and finite, got {}", cfg.scale),
            });
        }
        let n = op.dim();
        let mut rng = ChaCha20Rng::seed_from_u64(0x0e57_1a7e);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nv = linalg::norm2(&v).max(1e-300);
        v = linalg::scale(&v, 1.0 / nv);
        let mut rho = 0.0;
        for _ in 0..30 {
            let av = linalg::axpy(&op.apply(&v)?, damping, &v);
            let w = linalg::axpy(&v, -cfg.scale, &av);
            let nw = linalg::norm2(&w);
            if nw < 1e-300 {
                rho = 0.0;
                break;
            }
            rho = nw;
            v = linalg::scale(&w, 1.0 / nw);
        }
        if rho >= 1.0 - 1e-9 {
            return Err(Error::SpectralPrecheck { rho });
        }
        Ok(Self { op, damping, cfg })
    }

    /// Skips the spectral precheck; callers must have validated the same
    /// (operator, damping, scale) combination before.
    pub fn new_prevalidated(op: &'a CurvatureOperator, damping: f64, cfg: NeumannConfig) -> Self {
        Self { op, damping, cfg }
    }

    pub fn solve(&self, v: &[f64]) -> Result<NeumannResult> {
        let alpha = self.cfg.scale;
        let mut x = linalg::scale(v, alpha);
        let mut change = f64::INFINITY;
        let mut iterations = 0;
        for j in 0..self.cfg.max_terms {
            let ax = linalg::axpy(&self.op.apply(&x)?, self.damping, &x);
            let residual = linalg::sub(&ax, v);
            let next = linalg::axpy(&x, -alpha, &residual);
            change = linalg::norm1(&linalg::sub(&next, &x));
            x = next;
            iterations = j + 1;
            if change <= self.cfg.stop_tol {
                return Ok(NeumannResult { x, iterations, final_change: change, converged: true });
            }
        }
        Ok(NeumannResult { x, iterations, final_change: change, converged: false })
    }
}

/// One-shot truncated-series solve of `(A + damping I) x = v`.
pub fn ihvp_neumann(
    op: &CurvatureOperator,
    v: &[f64],
    damping: f64,
    cfg: &NeumannConfig,
) -> Result<NeumannResult> {
    NeumannSolver::new(op, damping, *cfg)?.solve(v)
}

/// Per-layer Kronecker-factored curvature with corrected eigenvalues.
#[derive(Debug, Clone)]
pub struct EkfacLayer {
    /// Second moment of the layer input (bias coordinate included).
    pub input_moment: DenseMatrix,
    /// Second moment of the loss gradient w.r.t. the layer pre-activation.
    pub grad_moment: DenseMatrix,
    pub input_basis: DenseMatrix,
    pub input_eigenvalues: Vec<f64>,
    pub grad_basis: DenseMatrix,
    pub grad_eigenvalues: Vec<f64>,
    /// Exact diagonal of the curvature in the Kronecker eigenbasis,
    /// `corrected[m] = mean_j (projection of example gradient j)^2_m`.
    pub corrected_eigenvalues: Vec<f64>,
    /// Additive damping used by the inverse apply.
    pub damping: f64,
}

impl EkfacLayer {
    /// Plain Kronecker eigenvalues `lambda_grad[r] * lambda_input[c]` in the
    /// same ordering as `corrected_eigenvalues`; the uncorrected baseline.
    pub fn kron_eigenvalues(&self) -> Vec<f64> {
        let din1 = self.input_eigenvalues.len();
        let dout = self.grad_eigenvalues.len();
        let mut out = Vec::with_capacity(dout * din1);
        for r in 0..dout {
            for c in 0..din1 {
                out.push(self.grad_eigenvalues[r] * self.input_eigenvalues[c]);
            }
        }
        out
    }

    /// Materializes the approximated curvature block `Q diag(eigs) Qᵀ` with
    /// `Q = grad_basis ⊗ input_basis`. Test/diagnostic path for small layers.
    pub fn reconstruct_block(&self, corrected: bool) -> Result<DenseMatrix> {
        let q = linalg::kron_explicit(&self.grad_basis, &self.input_basis);
        let eigs =
            if corrected { self.corrected_eigenvalues.clone() } else { self.kron_eigenvalues() };
        let d = eigs.len();
        let mut out = DenseMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += q.get(i, k) * eigs[k] * q.get(j, k);
                }
                out.set(i, j, s);
            }
        }
        Ok(out)
    }
}

/// Fitted Kronecker-factored approximation of the per-layer mean Fisher.
#[derive(Debug, Clone)]
pub struct EkfacState {
    arch: Arc<Architecture>,
    pub layers: Vec<EkfacLayer>,
    /// Number of examples the fit averaged over.
    pub fit_examples: usize,
}

impl EkfacState {
    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }
}

/// Fits per-layer input/gradient second moments on the batch, producing the
/// factored curvature of the **mean** per-example Fisher. Requires
/// cross-entropy (the regime where the Fisher matches the data Hessian).
///
/// `damping` fixes the per-layer inverse damping; `None` defaults to
/// `0.1 * mean(corrected eigenvalues)` per layer.
pub fn ekfac_fit(
    p: &ParamVector,
    batch: &[Example],
    loss: Loss,
    damping: Option<f64>,
) -> Result<EkfacState> {
    if loss != Loss::CrossEntropy {
        return Err(Error::FisherRequiresCrossEntropy(loss));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let arch = p.arch().clone();
    let captures = model::example_captures(p, batch, loss)?;
    let n = captures.len() as f64;
    let mut layers = Vec::with_capacity(arch.layers());
    for l in 0..arch.layers() {
        let (d_out, d_in1) = arch.layer_shape(l);
        let mut input_moment = DenseMatrix::zeros(d_in1, d_in1);
        let mut grad_moment = DenseMatrix::zeros(d_out, d_out);
        for cap in &captures {
            let h = &cap.layer_inputs_aug[l];
            for i in 0..d_in1 {
                for j in 0..d_in1 {
                    input_moment.set(i, j, input_moment.get(i, j) + h[i] * h[j] / n);
                }
            }
            let g = &cap.output_grads[l];
            for i in 0..d_out {
                for j in 0..d_out {
                    grad_moment.set(i, j, grad_moment.get(i, j) + g[i] * g[j] / n);
                }
            }
        }
        let EigenDecomposition { eigenvectors: input_basis, eigenvalues: input_eigenvalues } =
            linalg::eig_sym(&input_moment)?;
        let EigenDecomposition { eigenvectors: grad_basis, eigenvalues: grad_eigenvalues } =
            linalg::eig_sym(&grad_moment)?;

        // Project each example's layer gradient onto the Kronecker eigenbasis
        // and average the squares: the corrected diagonal.
        let base = arch.layer_offset(l);
        let d_l = d_out * d_in1;
        let mut corrected = vec![0.0; d_l];
        let qg_t = grad_basis.transpose();
        let qi_t = input_basis.transpose();
        for cap in &captures {
            let gslice = &cap.grad[base..base + d_l];
            let proj = linalg::kron_apply(&qg_t, &qi_t, gslice)?;
            for (c, pv) in corrected.iter_mut().zip(&proj) {
                *c += pv * pv / n;
            }
        }

        let mean = corrected.iter().sum::<f64>() / d_l as f64;
        let damping = damping.unwrap_or(0.1 * mean).max(1e-12);
        layers.push(EkfacLayer {
            input_moment,
            grad_moment,
            input_basis,
            input_eigenvalues,
            grad_basis,
            grad_eigenvalues,
            corrected_eigenvalues: corrected,
            damping,
        });
    }
    Ok(EkfacState { arch, layers, fit_examples: captures.len() })
}

/// Applies the damped inverse of the factored curvature per layer, never
/// materializing a `d_l × d_l` matrix:
/// project into the eigenbasis, divide by `corrected + damping`, project back.
pub fn ekfac_inverse_apply(state: &EkfacState, v: &[f64]) -> Result<Vec<f64>> {
    ekfac_inverse_apply_scaled(state, v, 1.0, None)
}

/// Like [`ekfac_inverse_apply`] with the eigenvalues scaled by `eigen_scale`
/// and an optional damping override. Scaling by the example count turns the
/// fitted mean-Fisher into the summed-loss curvature this crate's Hessians
/// use.
pub fn ekfac_inverse_apply_scaled(
    state: &EkfacState,
    v: &[f64],
    eigen_scale: f64,
    damping_override: Option<f64>,
) -> Result<Vec<f64>> {
    let arch = &state.arch;
    if v.len() != arch.param_count() {
        return Err(Error::LayoutMismatch(format!(
            "vector of len {} vs fitted model with {} params",
            v.len(),
            arch.param_count()
        )));
    }
    let mut out = vec![0.0; v.len()];
    for (l, layer) in state.layers.iter().enumerate() {
        let (d_out, d_in1) = arch.layer_shape(l);
        let base = arch.layer_offset(l);
        let d_l = d_out * d_in1;
        let damping = damping_override.unwrap_or(layer.damping);
        if damping <= 0.0 {
            return Err(Error::Config {
                path: format!("ekfac.layers[{l}].damping"),
                message: format!("must be positive, got {damping}"),
            });
        }
        let slice = &v[base..base + d_l];
        let mut proj = linalg::kron_apply(
            &layer.grad_basis.transpose(),
            &layer.input_basis.transpose(),
            slice,
        )?;
        for (p, lam) in proj.iter_mut().zip(&layer.corrected_eigenvalues) {
            *p /= eigen_scale * lam + damping;
        }
        let back = linalg::kron_apply(&layer.grad_basis, &layer.input_basis, &proj)?;
        out[base..base + d_l].copy_from_slice(&back);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn random_spd_operator(n: usize, seed: u64) -> (CurvatureOperator, DenseMatrix) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let b = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut m = b.matmul(&b.transpose()).unwrap();
        for i in 0..n {
            m.set(i, i, m.get(i, i) + 0.2);
        }
        (CurvatureOperator::from_dense(m.clone()).unwrap(), m)
    }

    /// Operator with a prescribed spectrum, diagonal in a rotated basis.
    fn operator_with_eigenvalues(eigs: &[f64], seed: u64) -> CurvatureOperator {
        let n = eigs.len();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let b = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let sym = b.matmul(&b.transpose()).unwrap();
        let q = linalg::eig_sym(&sym).unwrap().eigenvectors;
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += q.get(i, k) * eigs[k] * q.get(j, k);
                }
                m.set(i, j, s);
            }
        }
        CurvatureOperator::from_dense(m).unwrap()
    }

    #[test]
    fn exact_identity_and_zero_operator() {
        let v = vec![1.0, -2.0, 3.0];
        let id = CurvatureOperator::from_dense(DenseMatrix::identity(3)).unwrap();
        let x = ihvp_exact(&id, &v, 0.0).unwrap();
        for (a, b) in x.iter().zip(&v) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }

        let zero = CurvatureOperator::from_dense(DenseMatrix::zeros(3, 3)).unwrap();
        let delta = 2.5;
        let x = ihvp_exact(&zero, &v, delta).unwrap();
        for (a, b) in x.iter().zip(&v) {
            assert_relative_eq!(a, &(b / delta), max_relative = 1e-12);
        }
    }

    #[test]
    fn exact_residual_on_random_spd() {
        let (op, m) = random_spd_operator(50, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = ihvp_exact(&op, &v, 0.3).unwrap();
        let back = linalg::axpy(&linalg::matvec(&m, &x).unwrap(), 0.3, &x);
        assert!(linalg::norm2(&linalg::sub(&back, &v)) <= 1e-9 * linalg::norm2(&v));
    }

    #[test]
    fn exact_guard() {
        let op = CurvatureOperator::new(EXACT_DIM_GUARD + 1, "too big", |v| Ok(v.to_vec()));
        assert!(matches!(
            ihvp_exact(&op, &vec![0.0; EXACT_DIM_GUARD + 1], 0.0),
            Err(Error::GuardExceeded { .. })
        ));
    }

    #[test]
    fn neumann_identity_converges_immediately() {
        // A + damping I = I with scale 1: first iterate is already exact.
        let zero = CurvatureOperator::from_dense(DenseMatrix::zeros(3, 3)).unwrap();
        let cfg = NeumannConfig::new(1.0, 100, 1e-12);
        let v = vec![0.5, -1.5, 2.0];
        let res = ihvp_neumann(&zero, &v, 1.0, &cfg).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
        for (a, b) in res.x.iter().zip(&v) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn neumann_geometric_series_partial_sums() {
        // A = 0.5 I, no damping, scale 1: partial sums of sum_j 0.5^j v -> 2v.
        let half = CurvatureOperator::from_dense(
            DenseMatrix::from_fn(4, 4, |i, j| if i == j { 0.5 } else { 0.0 }),
        )
        .unwrap();
        let cfg = NeumannConfig::new(1.0, 20, 1e-15);
        let v = vec![1.0, 2.0, -1.0, 0.5];
        let res = ihvp_neumann(&half, &v, 0.0, &cfg).unwrap();
        assert!(!res.converged, "budget of 20 terms should expire before 1e-15");
        let target = linalg::scale(&v, 2.0);
        let err = linalg::norm2(&linalg::sub(&res.x, &target)) / linalg::norm2(&target);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn neumann_matches_exact_on_bounded_spectrum() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for trial in 0..5u64 {
            let n = 20;
            let eigs: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.9)).collect();
            let op = operator_with_eigenvalues(&eigs, 100 + trial);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = NeumannConfig::new(1.0, 5000, 1e-8);
            let res = ihvp_neumann(&op, &v, 0.0, &cfg).unwrap();
            assert!(res.converged);
            let exact = ihvp_exact(&op, &v, 0.0).unwrap();
            let err = linalg::norm2(&linalg::sub(&res.x, &exact)) / linalg::norm2(&exact);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn neumann_precheck_rejects_wide_spectrum() {
        // Unscaled iteration diverges once an eigenvalue exceeds 2.
        let op = operator_with_eigenvalues(&[0.5, 1.0, 2.5], 9);
        let cfg = NeumannConfig::new(1.0, 100, 1e-9);
        match ihvp_neumann(&op, &[1.0, 1.0, 1.0], 0.0, &cfg) {
            Err(Error::SpectralPrecheck { rho }) => assert!(rho >= 1.0),
            other => panic!("expected spectral precheck failure, got {other:?}"),
        }
    }

    #[test]
    fn neumann_auto_scale_handles_wide_spectrum() {
        let op = operator_with_eigenvalues(&[0.5, 1.0, 2.5, 4.0], 10);
        let v = vec![1.0, -1.0, 0.5, 0.25];
        let cfg = NeumannConfig::auto(&op, 0.0).unwrap();
        let res = ihvp_neumann(&op, &v, 0.0, &cfg).unwrap();
        assert!(res.converged);
        let exact = ihvp_exact(&op, &v, 0.0).unwrap();
        let err = linalg::norm2(&linalg::sub(&res.x, &exact)) / linalg::norm2(&exact);
        assert!(err < 1e-6);
    }

    #[test]
    fn operator_validate_catches_asymmetry() {
        let m = DenseMatrix::new(2, 2, vec![1.0, 0.9, 0.0, 1.0]).unwrap();
        let op = CurvatureOperator::from_dense(m).unwrap();
        assert!(matches!(
            op.validate(4, 0, 1e-8),
            Err(Error::OperatorCheck { check: "symmetry", .. })
        ));
    }

    fn single_layer_fit(seed: u64) -> (ParamVector, Vec<Example>, EkfacState) {
        let arch = Arc::new(Architecture::linear(3, 2));
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = ParamVector::new(
            arch.clone(),
            (0..arch.param_count()).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let batch = vec![Example::new(
            (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rng.random_range(0..2),
        )];
        let state = ekfac_fit(&p, &batch, Loss::CrossEntropy, Some(1e-3)).unwrap();
        (p, batch, state)
    }

    #[test]
    fn ekfac_single_example_is_exact_fisher() {
        // With one example the Kronecker factorization of the gradient outer
        // product is exact, so the damped inverse must match a dense solve.
        let (p, batch, state) = single_layer_fit(21);
        let cap = &model::example_captures(&p, &batch, Loss::CrossEntropy).unwrap()[0];
        let g = cap.grad.clone();
        let n = g.len();
        let fisher =
            DenseMatrix::from_fn(n, n, |i, j| g[i] * g[j]);
        let op = CurvatureOperator::from_dense(fisher).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = ihvp_exact(&op, &v, 1e-3).unwrap();
        let approx = ekfac_inverse_apply(&state, &v).unwrap();
        let err = linalg::norm2(&linalg::sub(&approx, &exact)) / linalg::norm2(&exact);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn ekfac_zero_gradients_give_zero_corrected_eigenvalues() {
        // A one-class softmax has identically zero loss gradients.
        let arch = Arc::new(Architecture::linear(2, 1));
        let p = ParamVector::seeded_init(arch.clone(), 5);
        let batch = vec![
            Example::new(vec![0.3, -0.4], 0),
            Example::new(vec![-1.0, 0.2], 0),
        ];
        let state = ekfac_fit(&p, &batch, Loss::CrossEntropy, Some(0.5)).unwrap();
        for layer in &state.layers {
            assert!(layer.corrected_eigenvalues.iter().all(|&x| x == 0.0));
        }
        // With all-zero eigenvalues the inverse apply is division by damping.
        let v = vec![3.0, -1.0, 2.0];
        let out = ekfac_inverse_apply(&state, &v).unwrap();
        for (o, x) in out.iter().zip(&v) {
            assert_relative_eq!(o, &(x / 0.5), max_relative = 1e-12);
        }
    }

    #[test]
    fn ekfac_rejects_mse() {
        let arch = Arc::new(Architecture::linear(2, 2));
        let p = ParamVector::seeded_init(arch, 1);
        let batch = vec![Example::new(vec![1.0, 0.0], 0)];
        assert!(matches!(
            ekfac_fit(&p, &batch, Loss::Mse, None),
            Err(Error::FisherRequiresCrossEntropy(_))
        ));
    }

    #[test]
    fn ekfac_inverse_apply_is_linear_and_spd() {
        let arch = Arc::new(Architecture::new(vec![3, 4, 2], vec![crate::model::Activation::Tanh]).unwrap());
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let p = ParamVector::new(
            arch.clone(),
            (0..arch.param_count()).map(|_| rng.random_range(-0.7..0.7)).collect(),
        )
        .unwrap();
        let batch: Vec<Example> = (0..16)
            .map(|_| {
                Example::new(
                    (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(0..2),
                )
            })
            .collect();
        let state = ekfac_fit(&p, &batch, Loss::CrossEntropy, None).unwrap();
        let n = arch.param_count();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let au = ekfac_inverse_apply(&state, &u).unwrap();
        let av = ekfac_inverse_apply(&state, &v).unwrap();
        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let asum = ekfac_inverse_apply(&state, &sum).unwrap();
        let lin = linalg::axpy(&au, 1.0, &av);
        assert!(linalg::norm2(&linalg::sub(&asum, &lin)) < 1e-10 * linalg::norm2(&lin).max(1.0));

        // Symmetric positive definite as an operator.
        assert!(linalg::dot(&v, &av) > 0.0);
        let uav = linalg::dot(&u, &av);
        let avu = linalg::dot(&au, &v);
        assert!((uav - avu).abs() < 1e-9 * uav.abs().max(1.0));
    }

    #[test]
    fn ekfac_small_damping_matches_pseudo_solve_on_rank_one() {
        // n = 1 single layer with damping -> 0: the inverse apply approaches
        // the damped pseudo-solve of the rank-one Fisher.
        let (p, batch, _) = single_layer_fit(77);
        let state = ekfac_fit(&p, &batch, Loss::CrossEntropy, Some(1e-8)).unwrap();
        let cap = &model::example_captures(&p, &batch, Loss::CrossEntropy).unwrap()[0];
        let g = cap.grad.clone();
        let n = g.len();
        let fisher = DenseMatrix::from_fn(n, n, |i, j| g[i] * g[j]);
        let op = CurvatureOperator::from_dense(fisher).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = ihvp_exact(&op, &v, 1e-8).unwrap();
        let approx = ekfac_inverse_apply(&state, &v).unwrap();
        let err = linalg::norm2(&linalg::sub(&approx, &exact)) / linalg::norm2(&exact);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn ekfac_corrected_eigenvalues_reduce_block_error() {
        // The corrected diagonal is the Frobenius-optimal diagonal in the
        // Kronecker eigenbasis, so it can only improve on the plain
        // eigenvalue product.
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        for trial in 0..3 {
            let arch = Arc::new(Architecture::linear(4, 3));
            let p = ParamVector::new(
                arch.clone(),
                (0..arch.param_count()).map(|_| rng.random_range(-0.8..0.8)).collect(),
            )
            .unwrap();
            let batch: Vec<Example> = (0..32)
                .map(|_| {
                    Example::new(
                        (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        rng.random_range(0..3),
                    )
                })
                .collect();
            let state = ekfac_fit(&p, &batch, Loss::CrossEntropy, None).unwrap();
            let caps = model::example_captures(&p, &batch, Loss::CrossEntropy).unwrap();
            let d = arch.param_count();
            let mut fisher = DenseMatrix::zeros(d, d);
            let n = caps.len() as f64;
            for cap in &caps {
                for i in 0..d {
                    for j in 0..d {
                        fisher.set(i, j, fisher.get(i, j) + cap.grad[i] * cap.grad[j] / n);
                    }
                }
            }
            let layer = &state.layers[0];
            let rec_corrected = layer.reconstruct_block(true).unwrap();
            let rec_plain = layer.reconstruct_block(false).unwrap();
            let err = |rec: &DenseMatrix| {
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        s += (rec.get(i, j) - fisher.get(i, j)).powi(2);
                    }
                }
                s.sqrt()
            };
            let (ec, ep) = (err(&rec_corrected), err(&rec_plain));
            assert!(ec < ep, "trial {trial}: corrected {ec} vs plain {ep}");
        }
    }
}
