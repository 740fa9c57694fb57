//! Finite-horizon MPC benchmark: a linear system with box-constrained
//! controls and a quadratic (ellipsoidal) state constraint, used to train
//! and evaluate a learned trajectory predictor whose output is projected
//! onto the constraint set.
//!
//! The decision vector stacks the trajectory as
//! `y = [x_1 .. x_N, u_0 .. u_{N-1}]`; the initial state `x_in` is not a
//! decision variable, it is folded into the dynamics equalities as a
//! constant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintError, ConstraintSet};

pub mod eval;
pub mod oracle;
pub mod traced;

pub use eval::{evaluate, EvalReport, SampleRecord};
pub use oracle::{oracle_solve, unconstrained_solve, OracleError, OracleSolution};
pub use traced::{FastMpcProgram, TracedMpc};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("rejection sampling exceeded {0} draws without a feasible point")]
    SamplingBudget(usize),
    #[error("trajectory has wrong length: expected {expected}, got {got}")]
    BadTrajectoryLength { expected: usize, got: usize },
}

/// Problem data for one MPC instance. Defaults are the benchmark values;
/// `x_in` is the per-sample network input.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcInstance {
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub u_bound: f64,
    pub x_bound: f64,
    pub x_target: DVector<f64>,
    pub x_in: DVector<f64>,
}

impl Default for MpcInstance {
    fn default() -> Self {
        let n_x = 5;
        let n_u = 4;
        // B = [I_4; e_4^T]
        let mut b = DMatrix::zeros(n_x, n_u);
        b.view_mut((0, 0), (4, 4)).copy_from(&DMatrix::identity(4, 4));
        b[(4, 3)] = 1.0;
        // Q = blkdiag([[0.05, 0.025], [0.025, 0.1]], 0.1 I_3)
        let mut q = DMatrix::zeros(n_x, n_x);
        q[(0, 0)] = 0.05;
        q[(0, 1)] = 0.025;
        q[(1, 0)] = 0.025;
        q[(1, 1)] = 0.1;
        for i in 2..5 {
            q[(i, i)] = 0.1;
        }
        Self {
            n_x,
            n_u,
            horizon: 10,
            a: DMatrix::identity(n_x, n_x),
            b,
            q,
            u_bound: 1.0,
            x_bound: 10.0,
            x_target: DVector::from_vec(vec![3.0, 12.0, 10.0, 10.0, 10.0]),
            x_in: DVector::zeros(n_x),
        }
    }
}

impl MpcInstance {
    pub fn with_initial_state(mut self, x_in: DVector<f64>) -> Self {
        self.x_in = x_in;
        self
    }

    /// Decision-vector dimension `N (n_x + n_u)`.
    pub fn dim(&self) -> usize {
        self.horizon * (self.n_x + self.n_u)
    }
    /// Number of dynamics equalities `N n_x`.
    pub fn num_eq(&self) -> usize {
        self.horizon * self.n_x
    }
    /// Number of inequalities: `N n_u` control box rows plus `N`
    /// quadratic state rows.
    pub fn num_ineq(&self) -> usize {
        self.horizon * self.n_u + self.horizon
    }

    fn state_offset(&self, k: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&k));
        (k - 1) * self.n_x
    }
    fn control_offset(&self, k: usize) -> usize {
        debug_assert!(k < self.horizon);
        self.horizon * self.n_x + k * self.n_u
    }

    /// Constant Jacobian of the dynamics equalities (rows
    /// `x_{k+1} - A x_k - B u_k`, with `x_0` eliminated).
    pub fn dynamics_matrix(&self) -> DMatrix<f64> {
        let (n_x, n_u, n) = (self.n_x, self.n_u, self.horizon);
        let mut d = DMatrix::zeros(n * n_x, self.dim());
        for k in 0..n {
            let row = k * n_x;
            d.view_mut((row, self.state_offset(k + 1)), (n_x, n_x))
                .copy_from(&DMatrix::identity(n_x, n_x));
            if k >= 1 {
                d.view_mut((row, self.state_offset(k)), (n_x, n_x))
                    .copy_from(&(-&self.a));
            }
            d.view_mut((row, self.control_offset(k)), (n_x, n_u))
                .copy_from(&(-&self.b));
        }
        d
    }

    /// Constant offset of the dynamics equalities:
    /// `h(y) = D y + c0` with `c0 = [-A x_in; 0; ...; 0]`.
    pub fn dynamics_offset(&self) -> DVector<f64> {
        let mut c0 = DVector::zeros(self.num_eq());
        c0.rows_mut(0, self.n_x).copy_from(&(-(&self.a * &self.x_in)));
        c0
    }
}

/// States `x_1..x_N` and controls `u_0..u_{N-1}` of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn flatten(&self) -> DVector<f64> {
        let n_x: usize = self.states.iter().map(|s| s.len()).sum();
        let n_u: usize = self.controls.iter().map(|u| u.len()).sum();
        let mut y = DVector::zeros(n_x + n_u);
        let mut at = 0;
        for s in &self.states {
            y.rows_mut(at, s.len()).copy_from(s);
            at += s.len();
        }
        for u in &self.controls {
            y.rows_mut(at, u.len()).copy_from(u);
            at += u.len();
        }
        y
    }

    pub fn unflatten(inst: &MpcInstance, y: &DVector<f64>) -> Result<Self, MpcError> {
        if y.len() != inst.dim() {
            return Err(MpcError::BadTrajectoryLength {
                expected: inst.dim(),
                got: y.len(),
            });
        }
        let states = (1..=inst.horizon)
            .map(|k| y.rows(inst.state_offset(k), inst.n_x).into_owned())
            .collect();
        let controls = (0..inst.horizon)
            .map(|k| y.rows(inst.control_offset(k), inst.n_u).into_owned())
            .collect();
        Ok(Self { states, controls })
    }

    /// Roll the dynamics forward from `x_in` under the given controls.
    pub fn rollout(inst: &MpcInstance, controls: &[DVector<f64>]) -> Self {
        let mut states = Vec::with_capacity(inst.horizon);
        let mut x = inst.x_in.clone();
        for u in controls {
            x = &inst.a * &x + &inst.b * u;
            states.push(x.clone());
        }
        Self {
            states,
            controls: controls.to_vec(),
        }
    }
}

/// Build the instance's constraint set over the flattened trajectory:
/// `N n_x` dynamics equalities, `N n_u` two-sided control box rows and
/// `N` quadratic state rows `x_k^T Q x_k <= x_bound`.
pub fn build_constraints(inst: &MpcInstance) -> Result<ConstraintSet, MpcError> {
    let dim = inst.dim();
    let n = inst.horizon;
    let (n_x, n_u) = (inst.n_x, inst.n_u);
    let num_box = n * n_u;
    let num_ineq = inst.num_ineq();

    let d = inst.dynamics_matrix();
    let c0 = inst.dynamics_offset();
    let d_jac = d.clone();

    let q = inst.q.clone();
    let q_jac = inst.q.clone();
    let state_off = move |k: usize| (k - 1) * n_x;
    let ctrl_base = n * n_x;

    let eval_g = move |y: &DVector<f64>| {
        let mut g = DVector::zeros(num_ineq);
        g.rows_mut(0, num_box).copy_from(&y.rows(ctrl_base, num_box));
        for k in 1..=n {
            let xk = y.rows(state_off(k), n_x);
            g[num_box + k - 1] = (&q * xk).dot(&xk);
        }
        g
    };
    let jac_g = move |y: &DVector<f64>| {
        let mut j = DMatrix::zeros(num_ineq, dim);
        j.view_mut((0, ctrl_base), (num_box, num_box))
            .copy_from(&DMatrix::identity(num_box, num_box));
        for k in 1..=n {
            let xk = y.rows(state_off(k), n_x);
            let row = 2.0 * (&q_jac * xk);
            j.view_mut((num_box + k - 1, state_off(k)), (1, n_x))
                .copy_from(&row.transpose());
        }
        j
    };

    let mut lower = DVector::from_element(num_ineq, -inst.u_bound);
    let mut upper = DVector::from_element(num_ineq, inst.u_bound);
    for k in 0..n {
        lower[num_box + k] = f64::NEG_INFINITY;
        upper[num_box + k] = inst.x_bound;
    }

    Ok(ConstraintSet::builder(dim)
        .equalities(
            inst.num_eq(),
            move |y: &DVector<f64>| &d * y + &c0,
            move |_y: &DVector<f64>| d_jac.clone(),
        )
        .inequalities(num_ineq, eval_g, jac_g, lower, upper)
        .build()?)
}

/// MPC objective `sum_k ||x_k - x_target||^2 + sum_k ||u_k||^2`, states
/// over `k = 1..N` and controls over `k = 0..N-1`.
pub fn objective(inst: &MpcInstance, traj: &Trajectory) -> f64 {
    let state_cost: f64 = traj
        .states
        .iter()
        .map(|x| (x - &inst.x_target).norm_squared())
        .sum();
    let control_cost: f64 = traj.controls.iter().map(|u| u.norm_squared()).sum();
    state_cost + control_cost
}

/// Objective evaluated directly on a flattened trajectory.
pub fn objective_flat(inst: &MpcInstance, y: &DVector<f64>) -> Result<f64, MpcError> {
    Ok(objective(inst, &Trajectory::unflatten(inst, y)?))
}

const SAMPLE_BOX: f64 = 15.0;
const SAMPLE_BUDGET: usize = 100_000;

/// Rejection-sample an initial state from the uniform box
/// `[-15, 15]^{n_x}` until `x^T Q x <= x_bound`.
pub fn sample_feasible_initial<R: Rng>(
    inst: &MpcInstance,
    rng: &mut R,
) -> Result<DVector<f64>, MpcError> {
    for _ in 0..SAMPLE_BUDGET {
        let x = DVector::from_fn(inst.n_x, |_, _| rng.gen_range(-SAMPLE_BOX..SAMPLE_BOX));
        if (&inst.q * &x).dot(&x) <= inst.x_bound {
            return Ok(x);
        }
    }
    Err(MpcError::SamplingBudget(SAMPLE_BUDGET))
}

/// Relative objective gap `max(0, z_model - z_star) / z_star`.
/// `None` when `z_star` is not positive (flagged sample).
pub fn suboptimality(z_model: f64, z_star: f64) -> Option<f64> {
    if z_star > 0.0 {
        Some((z_model - z_star).max(0.0) / z_star)
    } else {
        None
    }
}
