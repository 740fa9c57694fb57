//! Damped projection for the MPC constraint set expressed as tape
//! programs, so training can differentiate through the unrolled steps.
//!
//! Two paths compute the same iteration:
//!
//! * [`TracedMpc`] implements the generic [`TracedConstraints`] interface
//!   and goes through [`unrolled_project_traced`], solving the full
//!   100x100 Gram system per step. Simple, and used to cross-check.
//! * [`FastMpcProgram`] exploits the structure: only the 10 quadratic
//!   rows of the constraint Jacobian depend on `y`, so the Gram system
//!   splits as `[[M, B], [B^T, D + eps I]]` with `M` constant. `M` is
//!   factored once per tape (the `spd_solve` node cache) and each step
//!   only solves a fresh 10x10 Schur complement. This is what makes a
//!   500-step unroll per training sample affordable.

use nalgebra::{DMatrix, DVector};

use crate::diffprog::{Tape, TapeError, TracedConstraints, Value};

use super::MpcInstance;

/// Generic traced residual/Jacobian pair for one MPC instance.
pub struct TracedMpc {
    inst: MpcInstance,
    d_h: DMatrix<f64>,
    c0: DVector<f64>,
}

impl TracedMpc {
    pub fn new(inst: &MpcInstance) -> Self {
        Self {
            inst: inst.clone(),
            d_h: inst.dynamics_matrix(),
            c0: inst.dynamics_offset(),
        }
    }

    /// `2 Q x_k` for each horizon step, as tape values.
    fn quad_gradients(&self, tape: &mut Tape, y: Value) -> Vec<Value> {
        let inst = &self.inst;
        let q2 = tape.matrix(2.0 * inst.q.clone());
        (1..=inst.horizon)
            .map(|k| {
                let xk = tape.slice(y, (k - 1) * inst.n_x, inst.n_x);
                tape.matvec(q2, xk)
            })
            .collect()
    }
}

impl TracedConstraints for TracedMpc {
    fn dim(&self) -> usize {
        self.inst.dim()
    }
    fn num_rows(&self) -> usize {
        self.inst.num_eq() + self.inst.num_ineq()
    }

    fn residual(&self, tape: &mut Tape, y: Value) -> Value {
        let inst = &self.inst;
        let d_h = tape.matrix(self.d_h.clone());
        let c0 = tape.vector(self.c0.clone());
        let dy = tape.matvec(d_h, y);
        let h = tape.add(dy, c0);

        let num_box = inst.horizon * inst.n_u;
        let u = tape.slice(y, inst.horizon * inst.n_x, num_box);
        let ub = tape.vector(DVector::from_element(num_box, inst.u_bound));
        let neg_ub = tape.vector(DVector::from_element(num_box, -inst.u_bound));
        let over_in = tape.sub(u, ub);
        let over = tape.relu(over_in);
        let under_in = tape.sub(neg_ub, u);
        let under = tape.relu(under_in);
        let r_box = tape.sub(over, under);

        let q = tape.matrix(inst.q.clone());
        let mut parts = vec![h, r_box];
        for k in 1..=inst.horizon {
            let xk = tape.slice(y, (k - 1) * inst.n_x, inst.n_x);
            let qx = tape.matvec(q, xk);
            let val = tape.dot(xk, qx);
            let bound = tape.scalar(inst.x_bound);
            let excess = tape.sub(val, bound);
            parts.push(tape.relu(excess));
        }
        tape.concat(&parts)
    }

    fn jacobian(&self, tape: &mut Tape, y: Value) -> Value {
        let inst = &self.inst;
        // constant rows: dynamics then the identity box rows
        let mut j_const = DMatrix::zeros(inst.num_eq() + inst.horizon * inst.n_u, inst.dim());
        j_const
            .rows_mut(0, inst.num_eq())
            .copy_from(&self.d_h);
        let num_box = inst.horizon * inst.n_u;
        j_const
            .view_mut((inst.num_eq(), inst.horizon * inst.n_x), (num_box, num_box))
            .copy_from(&DMatrix::identity(num_box, num_box));
        let j_const = tape.matrix(j_const);

        let grads = self.quad_gradients(tape, y);
        let rows: Vec<Value> = grads
            .iter()
            .enumerate()
            .map(|(i, g)| {
                // place 2 Q x_k in the x_k block of a full-width row
                let before = tape.vector(DVector::zeros(i * inst.n_x));
                let after =
                    tape.vector(DVector::zeros(inst.dim() - (i + 1) * inst.n_x));
                if i == 0 {
                    tape.concat(&[*g, after])
                } else {
                    tape.concat(&[before, *g, after])
                }
            })
            .collect();
        let j_quad = tape.stack_rows(&rows);
        tape.vcat(j_const, j_quad)
    }
}

/// Structured unroll of the damped step for the MPC constraint set.
///
/// Everything independent of the sample is precomputed once:
/// the constant Jacobian block `J_const` (dynamics + box rows, 90x90),
/// `M = J_const J_const^T + eps I`, and `M^{-1} P_k` for each state block
/// `P_k` of `J_const` (columns of the `x_k` variables). Per step, only the
/// 10x10 Schur complement varies with `y`.
pub struct FastMpcProgram {
    inst: MpcInstance,
    epsilon: f64,
    j_const: DMatrix<f64>,
    m: DMatrix<f64>,
    /// `M^{-1} P_k`, one 90x5 block per horizon step.
    minv_p: Vec<DMatrix<f64>>,
    /// `P_k` itself (columns of `J_const` for the `x_k` block).
    p_blocks: Vec<DMatrix<f64>>,
}

impl FastMpcProgram {
    pub fn new(inst: &MpcInstance, epsilon: f64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        let n_rows = inst.num_eq() + inst.horizon * inst.n_u;
        let mut j_const = DMatrix::zeros(n_rows, inst.dim());
        j_const
            .rows_mut(0, inst.num_eq())
            .copy_from(&inst.dynamics_matrix());
        let num_box = inst.horizon * inst.n_u;
        j_const
            .view_mut((inst.num_eq(), inst.horizon * inst.n_x), (num_box, num_box))
            .copy_from(&DMatrix::identity(num_box, num_box));

        let mut m = &j_const * j_const.transpose();
        for i in 0..n_rows {
            m[(i, i)] += epsilon;
        }
        let chol = nalgebra::Cholesky::new(m.clone())
            .expect("Gram block of the constant rows plus eps I is SPD");
        let p_blocks: Vec<DMatrix<f64>> = (0..inst.horizon)
            .map(|k| j_const.columns(k * inst.n_x, inst.n_x).into_owned())
            .collect();
        let minv_p = p_blocks.iter().map(|p| chol.solve(p)).collect();
        Self {
            inst: inst.clone(),
            epsilon,
            j_const,
            m,
            minv_p,
            p_blocks,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Forward-only projection: run the unroll on a scratch tape and
    /// return the final iterate. Much cheaper than the generic driver
    /// because the big Gram block is factored once.
    pub fn project_vector(
        &self,
        x_in: &DVector<f64>,
        y0: &DVector<f64>,
        iters: usize,
    ) -> Result<DVector<f64>, TapeError> {
        let mut tape = Tape::new();
        let yv = tape.vector(y0.clone());
        let out = self.unroll(&mut tape, x_in, yv, iters)?;
        Ok(tape.value(out).as_vector().clone())
    }

    /// Emit `iters` damped steps for the instance with initial state
    /// `x_in`, starting from the tape value `y0`. Gradients flow to `y0`
    /// (and anything it depends on); `x_in` enters as a constant.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        x_in: &DVector<f64>,
        y0: Value,
        iters: usize,
    ) -> Result<Value, TapeError> {
        let inst = &self.inst;
        let n = inst.horizon;
        let num_box = n * inst.n_u;
        let c0 = {
            let mut c0 = DVector::zeros(inst.num_eq() + num_box);
            c0.rows_mut(0, inst.n_x).copy_from(&(-(&inst.a) * x_in));
            tape.vector(c0)
        };

        // constant nodes shared by all iterations; M's Cholesky is cached
        // by spd_solve on first use and reused for every later solve
        let m_node = tape.matrix(self.m.clone());
        let j_const = tape.matrix(self.j_const.clone());
        let q2 = tape.matrix(2.0 * inst.q.clone());
        let q = tape.matrix(inst.q.clone());
        let minv_p: Vec<Value> = self.minv_p.iter().map(|p| tape.matrix(p.clone())).collect();
        let p_blocks: Vec<Value> = self
            .p_blocks
            .iter()
            .map(|p| tape.matrix(p.clone()))
            .collect();
        let ub = tape.vector(DVector::from_element(num_box, inst.u_bound));
        let neg_ub = tape.vector(DVector::from_element(num_box, -inst.u_bound));
        let x_bound = tape.scalar(inst.x_bound);
        let eps_eye_s = tape.matrix(DMatrix::from_diagonal_element(n, n, self.epsilon));
        let zeros_u = tape.vector(DVector::zeros(num_box));

        let mut y = y0;
        for _ in 0..iters {
            // residual of the constant rows: [D_h y + c0; clipped box]
            let jy = tape.matvec(j_const, y);
            let lin = tape.add(jy, c0);
            let h = tape.slice(lin, 0, inst.num_eq());
            let u = tape.slice(lin, inst.num_eq(), num_box);
            let over_in = tape.sub(u, ub);
            let over = tape.relu(over_in);
            let under_in = tape.sub(neg_ub, u);
            let under = tape.relu(under_in);
            let r_box = tape.sub(over, under);
            let r1 = tape.concat(&[h, r_box]);

            // quadratic rows: gradients 2 Q x_k and residuals relu(x^T Q x - b)
            let mut xq = Vec::with_capacity(n);
            let mut r2_parts = Vec::with_capacity(n);
            for k in 0..n {
                let xk = tape.slice(y, k * inst.n_x, inst.n_x);
                xq.push(tape.matvec(q2, xk));
                let qx = tape.matvec(q, xk);
                let val = tape.dot(xk, qx);
                let excess = tape.sub(val, x_bound);
                r2_parts.push(tape.relu(excess));
            }
            let r2 = tape.concat(&r2_parts);

            // block elimination of [[M, B], [B^T, D + eps I]]
            let b_cols: Vec<Value> = (0..n).map(|k| tape.matvec(p_blocks[k], xq[k])).collect();
            let w2_cols: Vec<Value> = (0..n).map(|k| tape.matvec(minv_p[k], xq[k])).collect();
            let b_mat = tape.stack_cols(&b_cols);
            let w2 = tape.stack_cols(&w2_cols);
            let d_parts: Vec<Value> = (0..n).map(|k| tape.dot(xq[k], xq[k])).collect();
            let d_vec = tape.concat(&d_parts);
            let d_diag = tape.diag(d_vec);
            let b_t = tape.transpose(b_mat);
            let bt_w2 = tape.matmul(b_t, w2);
            let d_eps = tape.add(d_diag, eps_eye_s);
            let schur = tape.sub(d_eps, bt_w2);

            let w1 = tape.spd_solve(m_node, r1)?;
            let bt_w1 = tape.tmatvec(b_mat, w1);
            let rhs2 = tape.sub(r2, bt_w1);
            let z2 = tape.spd_solve(schur, rhs2)?;
            let w2_z2 = tape.matvec(w2, z2);
            let z1 = tape.sub(w1, w2_z2);

            // step = J^T z = J_const^T z1 + (quad rows)^T z2
            let step_const = tape.tmatvec(j_const, z1);
            let mut quad_parts = Vec::with_capacity(n + 1);
            for k in 0..n {
                let zk = tape.index(z2, k);
                quad_parts.push(tape.mul_scalar(zk, xq[k]));
            }
            quad_parts.push(zeros_u);
            let step_quad = tape.concat(&quad_parts);
            let step = tape.add(step_const, step_quad);
            y = tape.sub(y, step);
        }
        Ok(y)
    }
}
