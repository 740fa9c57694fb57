//! Projection step rules and the iteration driver.
//!
//! Three interchangeable step rules live behind the [`StepRule`] trait
//! and are selected by name at runtime:
//!
//! - `vanilla`: the parallel projection
//!   `y - J_c^T (J_c J_c^T)^{-1} r(y)`, exact in one step for linear
//!   constraints but requiring a full-row-rank constraint Jacobian. It
//!   can stall on nonlinear constraints by moving strictly parallel to
//!   satisfied boundaries.
//! - `damped`: the damped projection
//!   `y - J_c^T (J_c J_c^T + eps I)^{-1} r(y)`, defined for any rank and
//!   any number of constraints, and the rule whose violation-energy decay
//!   [`decay_bound`] characterizes.
//! - `lm`: the Levenberg-Marquardt update
//!   `(J_r^T J_r + eps I) delta = -J_r^T r` built from the residual
//!   Jacobian, which zeroes satisfied-inequality rows; geometrically
//!   different from `damped` whenever an inequality is satisfied.
//!
//! All three form the Gram (or normal) matrix explicitly and solve via
//! Cholesky; constraint counts here are desk-scale.

use nalgebra::{Cholesky, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintError, ConstraintSet};

pub mod toys;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("Gram matrix J J^T is singular: constraint Jacobian is rank-deficient")]
    RankDeficient,
    #[error("epsilon must be positive for the {0} rule")]
    NonPositiveEpsilon(&'static str),
    #[error("non-finite iterate at iteration {iter}")]
    NonFiniteIterate { iter: usize },
    #[error("invalid projection config: {0}")]
    InvalidConfig(String),
    #[error("invalid decay-bound parameters: {0}")]
    InvalidDecayParams(String),
    #[error("unknown step rule `{0}`")]
    UnknownMethod(String),
}

/// Which step rule the driver iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    #[default]
    Damped,
    LevenbergMarquardt,
}

impl Method {
    pub fn rule(self) -> &'static dyn StepRule {
        match self {
            Method::Vanilla => &VanillaRule,
            Method::Damped => &DampedRule,
            Method::LevenbergMarquardt => &LevenbergMarquardtRule,
        }
    }
}

/// One projection step rule. Implementations are stateless; `epsilon`
/// carries the damping where the rule uses one.
pub trait StepRule: Send + Sync {
    fn name(&self) -> &'static str;
    fn step(
        &self,
        cs: &ConstraintSet,
        y: &DVector<f64>,
        epsilon: f64,
    ) -> Result<DVector<f64>, ProjectError>;
}

struct VanillaRule;
struct DampedRule;
struct LevenbergMarquardtRule;

impl StepRule for VanillaRule {
    fn name(&self) -> &'static str {
        "vanilla"
    }
    fn step(
        &self,
        cs: &ConstraintSet,
        y: &DVector<f64>,
        _epsilon: f64,
    ) -> Result<DVector<f64>, ProjectError> {
        vanilla_step(cs, y)
    }
}

impl StepRule for DampedRule {
    fn name(&self) -> &'static str {
        "damped"
    }
    fn step(
        &self,
        cs: &ConstraintSet,
        y: &DVector<f64>,
        epsilon: f64,
    ) -> Result<DVector<f64>, ProjectError> {
        damped_step(cs, y, epsilon)
    }
}

impl StepRule for LevenbergMarquardtRule {
    fn name(&self) -> &'static str {
        "lm"
    }
    fn step(
        &self,
        cs: &ConstraintSet,
        y: &DVector<f64>,
        epsilon: f64,
    ) -> Result<DVector<f64>, ProjectError> {
        lm_step(cs, y, epsilon)
    }
}

/// All registered step rules.
pub fn registry() -> &'static [&'static dyn StepRule] {
    &[&VanillaRule, &DampedRule, &LevenbergMarquardtRule]
}

/// Look a step rule up by its registered name (`vanilla`, `damped`, `lm`).
pub fn rule_by_name(name: &str) -> Result<&'static dyn StepRule, ProjectError> {
    registry()
        .iter()
        .copied()
        .find(|r| r.name() == name)
        .ok_or_else(|| ProjectError::UnknownMethod(name.to_string()))
}

/// Method for a registered rule name; inverse of [`StepRule::name`].
pub fn method_by_name(name: &str) -> Result<Method, ProjectError> {
    match name {
        "vanilla" => Ok(Method::Vanilla),
        "damped" => Ok(Method::Damped),
        "lm" => Ok(Method::LevenbergMarquardt),
        other => Err(ProjectError::UnknownMethod(other.to_string())),
    }
}

/// Parallel projection `y - J_c^T (J_c J_c^T)^{-1} r(y)`.
///
/// Requires `J_c(y)` to have full row rank; a singular Gram matrix is an
/// error, never silently regularized.
pub fn vanilla_step(cs: &ConstraintSet, y: &DVector<f64>) -> Result<DVector<f64>, ProjectError> {
    let r = cs.residual(y)?.into_inner();
    let j = cs.constraint_jacobian(y)?;
    let gram = &j * j.transpose();
    let chol = Cholesky::new(gram).ok_or(ProjectError::RankDeficient)?;
    // rounding can turn an exactly-zero pivot into a tiny positive one,
    // so inspect the factor's diagonal rather than trusting success
    let l = chol.l_dirty();
    let mut dmin = f64::INFINITY;
    let mut dmax: f64 = 0.0;
    for i in 0..l.nrows() {
        dmin = dmin.min(l[(i, i)]);
        dmax = dmax.max(l[(i, i)]);
    }
    if !dmin.is_finite() || dmin <= 1e-7 * dmax {
        return Err(ProjectError::RankDeficient);
    }
    let z = chol.solve(&r);
    Ok(y - j.transpose() * z)
}

/// Damped projection `y - J_c^T (J_c J_c^T + eps I)^{-1} r(y)`.
///
/// The shifted Gram matrix is SPD for any rank of `J_c` and any relation
/// between the number of constraints and variables.
pub fn damped_step(
    cs: &ConstraintSet,
    y: &DVector<f64>,
    epsilon: f64,
) -> Result<DVector<f64>, ProjectError> {
    if epsilon <= 0.0 {
        return Err(ProjectError::NonPositiveEpsilon("damped"));
    }
    let r = cs.residual(y)?.into_inner();
    let j = cs.constraint_jacobian(y)?;
    let mut gram = &j * j.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += epsilon;
    }
    let chol = Cholesky::new(gram).ok_or(ProjectError::RankDeficient)?;
    let z = chol.solve(&r);
    Ok(y - j.transpose() * z)
}

/// Levenberg-Marquardt update: solve the n-by-n shifted normal equations
/// `(J_r^T J_r + eps I) delta = -J_r^T r` built from the residual
/// Jacobian, whose satisfied-inequality rows are zero.
pub fn lm_step(
    cs: &ConstraintSet,
    y: &DVector<f64>,
    epsilon: f64,
) -> Result<DVector<f64>, ProjectError> {
    if epsilon <= 0.0 {
        return Err(ProjectError::NonPositiveEpsilon("lm"));
    }
    let r = cs.residual(y)?.into_inner();
    let jr = cs.residual_jacobian(y)?;
    let mut normal = jr.transpose() * &jr;
    for i in 0..normal.nrows() {
        normal[(i, i)] += epsilon;
    }
    let rhs = -(jr.transpose() * r);
    let chol = Cholesky::new(normal).ok_or(ProjectError::RankDeficient)?;
    let delta = chol.solve(&rhs);
    Ok(y + delta)
}

/// Driver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// Damping epsilon; must be positive except for the vanilla rule.
    pub epsilon: f64,
    /// Iteration budget K.
    pub max_iters: usize,
    /// Early-stop threshold on the residual norm; 0 disables early stop
    /// (fixed unroll length).
    pub tol: f64,
    pub method: Method,
}

impl ProjectionConfig {
    pub fn damped(epsilon: f64, max_iters: usize, tol: f64) -> Self {
        Self {
            epsilon,
            max_iters,
            tol,
            method: Method::Damped,
        }
    }

    pub fn validate(&self) -> Result<(), ProjectError> {
        if self.max_iters == 0 {
            return Err(ProjectError::InvalidConfig("max_iters must be positive".into()));
        }
        if self.tol < 0.0 || !self.tol.is_finite() {
            return Err(ProjectError::InvalidConfig("tol must be finite and nonnegative".into()));
        }
        match self.method {
            Method::Vanilla => Ok(()),
            Method::Damped | Method::LevenbergMarquardt => {
                if self.epsilon > 0.0 && self.epsilon.is_finite() {
                    Ok(())
                } else {
                    Err(ProjectError::InvalidConfig(
                        "epsilon must be positive for damped/lm rules".into(),
                    ))
                }
            }
        }
    }
}

/// Per-iteration record of the projection run.
#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    /// y_0 ... y_K.
    pub iterates: Vec<DVector<f64>>,
    /// V(y_k) for each iterate; same length as `iterates`.
    pub energies: Vec<f64>,
    /// Whether the residual norm reached `tol`.
    pub converged: bool,
    /// Number of steps actually taken.
    pub iters_used: usize,
}

/// Iterate the configured step rule from `y0`, stopping early when
/// `||r(y_k)|| <= tol` (if `tol > 0`). Deterministic for fixed inputs.
pub fn project(
    cs: &ConstraintSet,
    y0: &DVector<f64>,
    cfg: &ProjectionConfig,
) -> Result<(DVector<f64>, ProjectionTrace), ProjectError> {
    cfg.validate()?;
    let rule = cfg.method.rule();
    let mut y = y0.clone();
    let mut iterates = Vec::with_capacity(cfg.max_iters + 1);
    let mut energies = Vec::with_capacity(cfg.max_iters + 1);
    let mut converged = false;
    let mut iters_used = 0;
    let mut rnorm = cs.residual(&y)?.norm();
    iterates.push(y.clone());
    energies.push(0.5 * rnorm * rnorm);
    for k in 0..cfg.max_iters {
        if cfg.tol > 0.0 && rnorm <= cfg.tol {
            converged = true;
            break;
        }
        y = rule.step(cs, &y, cfg.epsilon)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ProjectError::NonFiniteIterate { iter: k + 1 });
        }
        rnorm = cs.residual(&y)?.norm();
        iterates.push(y.clone());
        energies.push(0.5 * rnorm * rnorm);
        iters_used = k + 1;
    }
    if cfg.tol > 0.0 && rnorm <= cfg.tol {
        converged = true;
    }
    Ok((
        y,
        ProjectionTrace {
            iterates,
            energies,
            converged,
            iters_used,
        },
    ))
}

/// Theoretical per-iteration contraction of the violation energy for the
/// damped rule, valid when V is L-smooth and mu-PL and the stacked
/// constraints are G-Lipschitz.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecayBound {
    pub mu: f64,
    pub l_smooth: f64,
    pub g_lip: f64,
    pub epsilon: f64,
    /// c(eps) = min{ 1/eps - L/(2 eps^2), 1/(eps+G^2) - L/(2 (eps+G^2)^2) }.
    pub c_eps: f64,
    /// Geometric factor 1 - 2 mu c(eps), in [0, 1) for eps > L/2.
    pub factor: f64,
}

/// Evaluate the decay constants. Rejects `epsilon <= L/2` (positivity of
/// `c(eps)` is only guaranteed past that threshold) and `mu > L` (the
/// PL constant never exceeds the smoothness constant).
pub fn decay_bound(mu: f64, l_smooth: f64, g_lip: f64, epsilon: f64) -> Result<DecayBound, ProjectError> {
    if !(mu > 0.0 && l_smooth > 0.0 && g_lip > 0.0) {
        return Err(ProjectError::InvalidDecayParams(
            "mu, L, G must all be positive".into(),
        ));
    }
    if mu > l_smooth {
        return Err(ProjectError::InvalidDecayParams(format!(
            "mu = {mu} exceeds L = {l_smooth}"
        )));
    }
    if epsilon <= l_smooth / 2.0 {
        return Err(ProjectError::InvalidDecayParams(format!(
            "epsilon = {epsilon} must exceed L/2 = {}",
            l_smooth / 2.0
        )));
    }
    let at = |s: f64| 1.0 / s - l_smooth / (2.0 * s * s);
    let c_eps = at(epsilon).min(at(epsilon + g_lip * g_lip));
    let factor = 1.0 - 2.0 * mu * c_eps;
    Ok(DecayBound {
        mu,
        l_smooth,
        g_lip,
        epsilon,
        c_eps,
        factor,
    })
}

/// Outcome of an empirical decay check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    /// Whether V(y_k) <= factor^k V(y_0) + slack held for every k.
    pub passed: bool,
    /// Worst observed per-step energy ratio V(y_{k+1}) / V(y_k).
    pub worst_ratio: f64,
    /// Theoretical factor the ratios are measured against.
    pub factor: f64,
    pub iters: usize,
}

const DECAY_SLACK: f64 = 1e-12;

/// Run the projection and check the geometric envelope
/// `V(y_k) <= factor^k V(y_0) + 1e-12` for every iterate. The caller
/// asserts that the constants in `bound` actually hold for `cs`; a failed
/// check is a returned result, not an error.
pub fn verify_decay(
    cs: &ConstraintSet,
    y0: &DVector<f64>,
    cfg: &ProjectionConfig,
    bound: &DecayBound,
) -> Result<DecayReport, ProjectError> {
    let (_, trace) = project(cs, y0, cfg)?;
    let v0 = trace.energies[0];
    let mut passed = true;
    let mut worst_ratio: f64 = 0.0;
    let mut envelope = v0;
    for k in 1..trace.energies.len() {
        envelope *= bound.factor;
        let v = trace.energies[k];
        if v > envelope + DECAY_SLACK {
            passed = false;
        }
        let prev = trace.energies[k - 1];
        if prev > DECAY_SLACK {
            worst_ratio = worst_ratio.max(v / prev);
        }
    }
    Ok(DecayReport {
        passed,
        worst_ratio,
        factor: bound.factor,
        iters: trace.iters_used,
    })
}
