//! Small benchmark instances with known geometry, shared by the unit
//! tests, the acceptance suite and the CLI `toy` subcommand.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::constraints::ConstraintSet;

/// Unit circle equality in 2D. The nearest feasible point from (2, 0)
/// is (1, 0).
pub fn circle_instance() -> (ConstraintSet, DVector<f64>) {
    let cs = ConstraintSet::builder(2)
        .equalities(
            1,
            |y: &DVector<f64>| DVector::from_element(1, y.norm_squared() - 1.0),
            |y: &DVector<f64>| DMatrix::from_row_slice(1, 2, (2.0 * y).as_slice()),
        )
        .build()
        .expect("valid constraint set");
    (cs, DVector::from_vec(vec![2.0, 0.0]))
}

/// The stall dichotomy instance: a violated circle equality plus a
/// satisfied linear inequality `y_2 <= 2`, started at (2, 1.5).
///
/// The vanilla rule keeps the satisfied row in the Gram system with a
/// zero residual entry, which pins every step to the line `y_2 = 1.5`;
/// that line misses the circle entirely, so the violation energy stays
/// bounded away from zero. The damped rule is free to move orthogonally
/// to the satisfied boundary and converges to the circle.
pub fn stall_instance() -> (ConstraintSet, DVector<f64>) {
    let cs = ConstraintSet::builder(2)
        .equalities(
            1,
            |y: &DVector<f64>| DVector::from_element(1, y.norm_squared() - 1.0),
            |y: &DVector<f64>| DMatrix::from_row_slice(1, 2, (2.0 * y).as_slice()),
        )
        .inequalities(
            1,
            |y: &DVector<f64>| DVector::from_element(1, y[1]),
            |_| DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, 2.0),
        )
        .build()
        .expect("valid constraint set");
    (cs, DVector::from_vec(vec![2.0, 1.5]))
}

/// Analytic constants of an affine equality instance `A y = b`:
/// `V(y) = ||A y - b||^2 / 2` is `L`-smooth with `L = sigma_max(A)^2`,
/// `mu`-PL with `mu = sigma_min(A)^2` (full row rank), and the stacked
/// constraints are `G`-Lipschitz with `G = sigma_max(A)`.
#[derive(Debug, Clone, Copy)]
pub struct AffineConstants {
    pub mu: f64,
    pub l_smooth: f64,
    pub g_lip: f64,
}

/// Random full-row-rank affine equality instance with its analytic decay
/// constants and a random infeasible start.
pub fn affine_instance<R: Rng>(
    rng: &mut R,
    m: usize,
    n: usize,
) -> (ConstraintSet, AffineConstants, DVector<f64>) {
    assert!(m <= n, "full row rank needs m <= n");
    loop {
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let svals = a.clone().singular_values();
        let smax = svals.max();
        let smin = svals.min();
        // resample nearly rank-deficient draws; the constants degenerate
        if smin < 0.1 * smax {
            continue;
        }
        let consts = AffineConstants {
            mu: smin * smin,
            l_smooth: smax * smax,
            g_lip: smax,
        };
        let y0 = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let cs = ConstraintSet::linear(Some((a, b)), None, n).expect("valid constraint set");
        return (cs, consts, y0);
    }
}
