//! Constraint sets, the stacked constraint vector, the clipped violation
//! residual, the violation energy and their Jacobians.
//!
//! A [`ConstraintSet`] bundles `m` equality maps `h: R^n -> R^m`, `q`
//! inequality maps `g: R^n -> R^q` with extended-real bounds
//! `lower <= g(y) <= upper`, and their analytic Jacobians. One-sided
//! inequalities are expressed with IEEE infinities; the corresponding
//! clipped term is short-circuited rather than evaluated as `inf - inf`.
//!
//! Equality as a degenerate two-sided bound (`lower == upper`) is
//! rejected at construction; use an equality map instead.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

type EvalFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("dimension mismatch: expected vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("constraint {index} evaluated to a non-finite value")]
    NonFinite { index: usize },
    #[error("invalid bounds at inequality {index}: lower {lower} vs upper {upper}")]
    InvalidBounds {
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("constraint map returned {got} values, declared {declared}")]
    ArityMismatch { declared: usize, got: usize },
}

/// Immutable bundle of equality and inequality constraints on `R^n`.
///
/// Constraint maps must be deterministic and their supplied Jacobians
/// must equal the true derivatives; [`jacobian_contract_error`] checks
/// the latter against central finite differences.
pub struct ConstraintSet {
    dim: usize,
    num_eq: usize,
    num_ineq: usize,
    eval_h: EvalFn,
    eval_g: EvalFn,
    jac_h: JacFn,
    jac_g: JacFn,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl ConstraintSet {
    pub fn builder(dim: usize) -> ConstraintSetBuilder {
        ConstraintSetBuilder {
            dim,
            eq: None,
            ineq: None,
        }
    }

    /// Linear constraint set: equalities `A_eq y = b_eq` and inequalities
    /// `lower <= A_in y <= upper`.
    pub fn linear(
        eq: Option<(DMatrix<f64>, DVector<f64>)>,
        ineq: Option<(DMatrix<f64>, DVector<f64>, DVector<f64>)>,
        dim: usize,
    ) -> Result<Self, ConstraintError> {
        let mut b = Self::builder(dim);
        if let Some((a_eq, b_eq)) = eq {
            let a = a_eq.clone();
            let m = a_eq.nrows();
            b = b.equalities(
                m,
                move |y: &DVector<f64>| &a_eq * y - &b_eq,
                move |_y: &DVector<f64>| a.clone(),
            );
        }
        if let Some((a_in, lower, upper)) = ineq {
            let a = a_in.clone();
            let q = a_in.nrows();
            b = b.inequalities(
                q,
                move |y: &DVector<f64>| &a_in * y,
                move |_y: &DVector<f64>| a.clone(),
                lower,
                upper,
            );
        }
        b.build()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn num_eq(&self) -> usize {
        self.num_eq
    }
    pub fn num_ineq(&self) -> usize {
        self.num_ineq
    }
    /// Total number of stacked constraint rows, `m + q`.
    pub fn num_rows(&self) -> usize {
        self.num_eq + self.num_ineq
    }
    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }
    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    fn check_dim(&self, y: &DVector<f64>) -> Result<(), ConstraintError> {
        if y.len() != self.dim {
            return Err(ConstraintError::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        Ok(())
    }

    fn eval_checked(&self, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), ConstraintError> {
        self.check_dim(y)?;
        let h = (self.eval_h)(y);
        if h.len() != self.num_eq {
            return Err(ConstraintError::ArityMismatch {
                declared: self.num_eq,
                got: h.len(),
            });
        }
        let g = (self.eval_g)(y);
        if g.len() != self.num_ineq {
            return Err(ConstraintError::ArityMismatch {
                declared: self.num_ineq,
                got: g.len(),
            });
        }
        for (i, v) in h.iter().enumerate() {
            if !v.is_finite() {
                return Err(ConstraintError::NonFinite { index: i });
            }
        }
        for (j, v) in g.iter().enumerate() {
            if !v.is_finite() {
                return Err(ConstraintError::NonFinite { index: self.num_eq + j });
            }
        }
        Ok((h, g))
    }

    /// Stacked constraint vector `c(y) = [h(y); g(y)]`.
    pub fn stack(&self, y: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
        let (h, g) = self.eval_checked(y)?;
        let mut out = DVector::zeros(self.num_rows());
        out.rows_mut(0, self.num_eq).copy_from(&h);
        out.rows_mut(self.num_eq, self.num_ineq).copy_from(&g);
        Ok(out)
    }

    /// Constraint residual: equality values followed by the clipped
    /// inequality excesses `relu(g - upper) - relu(lower - g)`. Zero
    /// exactly on the feasible set.
    pub fn residual(&self, y: &DVector<f64>) -> Result<ResidualVector, ConstraintError> {
        let (h, g) = self.eval_checked(y)?;
        let mut values = DVector::zeros(self.num_rows());
        values.rows_mut(0, self.num_eq).copy_from(&h);
        for j in 0..self.num_ineq {
            let gv = g[j];
            let lo = self.lower[j];
            let up = self.upper[j];
            let over = if up.is_finite() && gv > up { gv - up } else { 0.0 };
            let under = if lo.is_finite() && gv < lo { lo - gv } else { 0.0 };
            values[self.num_eq + j] = over - under;
        }
        Ok(ResidualVector {
            values,
            num_eq: self.num_eq,
        })
    }

    /// Violation energy `V(y) = 0.5 * ||r(y)||^2`; zero iff `y` is feasible.
    pub fn violation_energy(&self, y: &DVector<f64>) -> Result<f64, ConstraintError> {
        let r = self.residual(y)?;
        Ok(0.5 * r.values.norm_squared())
    }

    /// Jacobian of the stacked constraint vector `c`, with every
    /// inequality row present regardless of satisfaction.
    pub fn constraint_jacobian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>, ConstraintError> {
        self.check_dim(y)?;
        let jh = (self.jac_h)(y);
        let jg = (self.jac_g)(y);
        debug_assert_eq!(jh.nrows(), self.num_eq);
        debug_assert_eq!(jg.nrows(), self.num_ineq);
        let mut j = DMatrix::zeros(self.num_rows(), self.dim);
        j.rows_mut(0, self.num_eq).copy_from(&jh);
        j.rows_mut(self.num_eq, self.num_ineq).copy_from(&jg);
        for (idx, v) in j.iter().enumerate() {
            if !v.is_finite() {
                return Err(ConstraintError::NonFinite {
                    index: idx % self.num_rows(),
                });
            }
        }
        Ok(j)
    }

    /// Jacobian of the residual `r`: equality rows as in
    /// [`Self::constraint_jacobian`]; an inequality row is kept when its
    /// constraint is violated and zeroed when satisfied. At a bound
    /// exactly, the row is zero (subgradient 0 of relu at the kink).
    pub fn residual_jacobian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>, ConstraintError> {
        let (_, g) = self.eval_checked(y)?;
        let mut j = self.constraint_jacobian(y)?;
        for jrow in 0..self.num_ineq {
            let gv = g[jrow];
            let lo = self.lower[jrow];
            let up = self.upper[jrow];
            let violated = (up.is_finite() && gv > up) || (lo.is_finite() && gv < lo);
            if !violated {
                j.row_mut(self.num_eq + jrow).fill(0.0);
            }
        }
        Ok(j)
    }
}

/// Residual vector tagged with the equality/inequality split.
#[derive(Debug, Clone)]
pub struct ResidualVector {
    values: DVector<f64>,
    num_eq: usize,
}

impl ResidualVector {
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }
    pub fn norm(&self) -> f64 {
        self.values.norm()
    }
    pub fn equality_part(&self) -> nalgebra::DVectorView<'_, f64> {
        self.values.rows(0, self.num_eq)
    }
    pub fn inequality_part(&self) -> nalgebra::DVectorView<'_, f64> {
        self.values.rows(self.num_eq, self.values.len() - self.num_eq)
    }
    pub fn into_inner(self) -> DVector<f64> {
        self.values
    }
}

pub struct ConstraintSetBuilder {
    dim: usize,
    eq: Option<(usize, EvalFn, JacFn)>,
    ineq: Option<(usize, EvalFn, JacFn, DVector<f64>, DVector<f64>)>,
}

impl ConstraintSetBuilder {
    pub fn equalities<F, J>(mut self, m: usize, eval: F, jac: J) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.eq = Some((m, Box::new(eval), Box::new(jac)));
        self
    }

    pub fn inequalities<F, J>(
        mut self,
        q: usize,
        eval: F,
        jac: J,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.ineq = Some((q, Box::new(eval), Box::new(jac), lower, upper));
        self
    }

    pub fn build(self) -> Result<ConstraintSet, ConstraintError> {
        let dim = self.dim;
        let (num_eq, eval_h, jac_h) = match self.eq {
            Some((m, e, j)) => (m, e, j),
            None => (
                0,
                Box::new(|_: &DVector<f64>| DVector::zeros(0)) as EvalFn,
                Box::new(move |_: &DVector<f64>| DMatrix::zeros(0, dim)) as JacFn,
            ),
        };
        let (num_ineq, eval_g, jac_g, lower, upper) = match self.ineq {
            Some((q, e, j, lo, up)) => (q, e, j, lo, up),
            None => (
                0,
                Box::new(|_: &DVector<f64>| DVector::zeros(0)) as EvalFn,
                Box::new(move |_: &DVector<f64>| DMatrix::zeros(0, dim)) as JacFn,
                DVector::zeros(0),
                DVector::zeros(0),
            ),
        };
        if lower.len() != num_ineq || upper.len() != num_ineq {
            return Err(ConstraintError::ArityMismatch {
                declared: num_ineq,
                got: lower.len().max(upper.len()),
            });
        }
        for j in 0..num_ineq {
            // lower == upper would be an equality in disguise; forbidden.
            if !(lower[j] < upper[j]) {
                return Err(ConstraintError::InvalidBounds {
                    index: j,
                    lower: lower[j],
                    upper: upper[j],
                });
            }
        }
        Ok(ConstraintSet {
            dim,
            num_eq,
            num_ineq,
            eval_h,
            eval_g,
            jac_h,
            jac_g,
            lower,
            upper,
        })
    }
}

/// Max relative error between the supplied analytic Jacobians and central
/// finite differences of the constraint maps, over the given points.
///
/// Constraint authors should keep this below ~1e-6 at representative
/// points; it is the contract test for hand-written Jacobians.
pub fn jacobian_contract_error(cs: &ConstraintSet, points: &[DVector<f64>]) -> f64 {
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for y in points {
        let jc = cs.constraint_jacobian(y).expect("jacobian evaluation");
        let mut fd = DMatrix::zeros(cs.num_rows(), cs.dim());
        for col in 0..cs.dim() {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[col] += step;
            ym[col] -= step;
            let cp = cs.stack(&yp).expect("stack");
            let cm = cs.stack(&ym).expect("stack");
            fd.set_column(col, &((cp - cm) / (2.0 * step)));
        }
        let scale = jc.norm().max(1.0);
        worst = worst.max((&jc - &fd).norm() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_box(lower: f64, upper: f64) -> ConstraintSet {
        ConstraintSet::builder(1)
            .inequalities(
                1,
                |y: &DVector<f64>| y.clone(),
                |_| DMatrix::identity(1, 1),
                DVector::from_element(1, lower),
                DVector::from_element(1, upper),
            )
            .build()
            .unwrap()
    }

    fn circle(dim: usize) -> ConstraintSet {
        ConstraintSet::builder(dim)
            .equalities(
                1,
                |y: &DVector<f64>| DVector::from_element(1, y.norm_squared() - 1.0),
                |y: &DVector<f64>| DMatrix::from_row_slice(1, y.len(), (2.0 * y).as_slice()),
            )
            .build()
            .unwrap()
    }

    #[test]
    fn stack_concatenates_h_then_g() {
        let cs = ConstraintSet::builder(2)
            .equalities(
                1,
                |y: &DVector<f64>| DVector::from_element(1, y[0] - 1.0),
                |_| DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            )
            .inequalities(
                1,
                |y: &DVector<f64>| DVector::from_element(1, y[1]),
                |_| DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
                DVector::from_element(1, f64::NEG_INFINITY),
                DVector::from_element(1, 1.0),
            )
            .build()
            .unwrap();
        let c = cs.stack(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn stack_without_equalities_returns_g_alone() {
        let cs = scalar_box(-1.0, 1.0);
        let c = cs.stack(&DVector::from_element(1, 0.3)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0], 0.3);
    }

    #[test]
    fn residual_clips_two_sided_box() {
        let cs = scalar_box(-1.0, 1.0);
        let r = |v: f64| cs.residual(&DVector::from_element(1, v)).unwrap().values()[0];
        assert_eq!(r(2.0), 1.0);
        assert_eq!(r(-2.0), -1.0);
        assert_eq!(r(0.5), 0.0);
        assert_eq!(r(1.0), 0.0); // exactly on the bound
    }

    #[test]
    fn infinite_bounds_short_circuit() {
        let cs = scalar_box(f64::NEG_INFINITY, 1.0);
        let r = cs.residual(&DVector::from_element(1, -1e12)).unwrap();
        assert_eq!(r.values()[0], 0.0);
    }

    #[test]
    fn violation_energy_examples() {
        let line = ConstraintSet::builder(1)
            .equalities(
                1,
                |y: &DVector<f64>| y.clone(),
                |_| DMatrix::identity(1, 1),
            )
            .build()
            .unwrap();
        assert_eq!(
            line.violation_energy(&DVector::from_element(1, 2.0)).unwrap(),
            2.0
        );
        let c = circle(2);
        assert_eq!(
            c.violation_energy(&DVector::from_vec(vec![2.0, 0.0])).unwrap(),
            4.5
        );
        assert_eq!(
            c.violation_energy(&DVector::from_vec(vec![1.0, 0.0])).unwrap(),
            0.0
        );
    }

    #[test]
    fn circle_jacobian_row() {
        let c = circle(2);
        let j = c
            .constraint_jacobian(&DVector::from_vec(vec![2.0, 0.0]))
            .unwrap();
        assert_eq!(j.row(0).iter().copied().collect::<Vec<_>>(), vec![4.0, 0.0]);
    }

    #[test]
    fn residual_jacobian_zeroes_satisfied_rows() {
        let cs = scalar_box(-1.0, 1.0);
        let at = |v: f64| {
            cs.residual_jacobian(&DVector::from_element(1, v)).unwrap()[(0, 0)]
        };
        assert_eq!(at(0.5), 0.0); // satisfied
        assert_eq!(at(2.0), 1.0); // violated: matches constraint row
        assert_eq!(at(1.0), 0.0); // kink convention
    }

    #[test]
    fn jacobians_differ_only_on_satisfied_inequality_rows() {
        let cs = scalar_box(-1.0, 1.0);
        let y = DVector::from_element(1, 2.0);
        let jc = cs.constraint_jacobian(&y).unwrap();
        let jr = cs.residual_jacobian(&y).unwrap();
        assert_eq!(jc, jr);
    }

    #[test]
    fn gradient_of_energy_matches_jacobian_transpose_residual() {
        // grad V = J_c^T r = J_r^T r, checked against finite differences of V.
        let cs = ConstraintSet::builder(3)
            .equalities(
                1,
                |y: &DVector<f64>| DVector::from_element(1, y.norm_squared() - 1.0),
                |y: &DVector<f64>| DMatrix::from_row_slice(1, 3, (2.0 * y).as_slice()),
            )
            .inequalities(
                1,
                |y: &DVector<f64>| DVector::from_element(1, y[0] + 2.0 * y[1]),
                |_| DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 0.0]),
                DVector::from_element(1, f64::NEG_INFINITY),
                DVector::from_element(1, 0.5),
            )
            .build()
            .unwrap();
        let y = DVector::from_vec(vec![1.3, 0.7, -0.4]); // both constraints violated
        let r = cs.residual(&y).unwrap();
        let via_jc = cs.constraint_jacobian(&y).unwrap().transpose() * r.values();
        let via_jr = cs.residual_jacobian(&y).unwrap().transpose() * r.values();
        assert_relative_eq!(via_jc, via_jr, epsilon = 1e-14);
        let step = 1e-6;
        for i in 0..3 {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[i] += step;
            ym[i] -= step;
            let fd = (cs.violation_energy(&yp).unwrap() - cs.violation_energy(&ym).unwrap())
                / (2.0 * step);
            assert_relative_eq!(via_jc[i], fd, max_relative = 1e-5);
        }
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let r = ConstraintSet::builder(1)
            .inequalities(
                1,
                |y: &DVector<f64>| y.clone(),
                |_| DMatrix::identity(1, 1),
                DVector::from_element(1, 1.0),
                DVector::from_element(1, 1.0),
            )
            .build();
        assert!(matches!(r, Err(ConstraintError::InvalidBounds { .. })));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let cs = circle(2);
        let r = cs.stack(&DVector::zeros(3));
        assert!(matches!(
            r,
            Err(ConstraintError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn nan_propagates_with_index() {
        let cs = ConstraintSet::builder(1)
            .equalities(
                2,
                |y: &DVector<f64>| DVector::from_vec(vec![y[0], (y[0] - 2.0).sqrt()]),
                |_| DMatrix::zeros(2, 1),
            )
            .build()
            .unwrap();
        let r = cs.residual(&DVector::from_element(1, 1.0));
        assert!(matches!(r, Err(ConstraintError::NonFinite { index: 1 })));
    }

    #[test]
    fn linear_helper_matches_manual_evaluation() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.0, -1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let cs = ConstraintSet::linear(Some((a.clone(), b.clone())), None, 3).unwrap();
        let y = DVector::from_vec(vec![0.5, -0.5, 2.0]);
        let c = cs.stack(&y).unwrap();
        assert_relative_eq!(c, &a * &y - &b, epsilon = 1e-15);
        assert!(jacobian_contract_error(&cs, &[y]) < 1e-7);
    }

    #[test]
    fn finite_difference_contract_on_nonlinear_set() {
        let cs = circle(4);
        let pts: Vec<_> = (0..5)
            .map(|i| DVector::from_fn(4, |r, _| ((i * 4 + r) as f64 * 0.37).sin() * 2.0))
            .collect();
        assert!(jacobian_contract_error(&cs, &pts) < 1e-6);
    }
}
