//! Test-set evaluation: suboptimality against the oracle and
//! per-constraint-group violation statistics.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_constraints, objective_flat, oracle_solve, sample_feasible_initial, suboptimality,
    MpcError, MpcInstance,
};

/// Per-sample evaluation row; the raw material behind the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub x_in: Vec<f64>,
    /// `None` when the sample is flagged (oracle failure or `Z* <= 0`).
    pub suboptimality: Option<f64>,
    pub z_model: f64,
    pub z_star: Option<f64>,
    pub oracle_kkt: Option<f64>,
    /// Max |residual| over the dynamics equality rows.
    pub dynamics_violation: f64,
    /// Max |residual| over the control box rows.
    pub box_violation: f64,
    /// Max |residual| over the quadratic state rows.
    pub quad_violation: f64,
    pub flagged: bool,
}

/// Aggregate statistics across the test set. Flagged samples are excluded
/// from the suboptimality averages and counted in `excluded`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub excluded: usize,
    pub avg_suboptimality: f64,
    pub max_suboptimality: f64,
    pub avg_dynamics_violation: f64,
    pub max_dynamics_violation: f64,
    pub avg_box_violation: f64,
    pub max_box_violation: f64,
    pub avg_quad_violation: f64,
    pub max_quad_violation: f64,
}

fn group_maxima(inst: &MpcInstance, r: &DVector<f64>) -> (f64, f64, f64) {
    let m = inst.num_eq();
    let num_box = inst.horizon * inst.n_u;
    let dyn_v = r.rows(0, m).amax();
    let box_v = r.rows(m, num_box).amax();
    let quad_v = r.rows(m + num_box, inst.horizon).amax();
    (dyn_v, box_v, quad_v)
}

/// Evaluate a model over `n_test` freshly sampled feasible initial
/// conditions. The model maps `x_in` to a flattened trajectory (already
/// projected, if the model projects); this indirection lets the oracle
/// itself be fed through as the model for self-tests.
pub fn evaluate<M>(
    template: &MpcInstance,
    mut model: M,
    n_test: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<SampleRecord>), MpcError>
where
    M: FnMut(&MpcInstance) -> DVector<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_test);
    for index in 0..n_test {
        let x_in = sample_feasible_initial(template, &mut rng)?;
        let inst = template.clone().with_initial_state(x_in.clone());
        let cs = build_constraints(&inst)?;
        let y = model(&inst);
        let z_model = objective_flat(&inst, &y)?;
        let r = cs.residual(&y)?;
        let (dyn_v, box_v, quad_v) = group_maxima(&inst, r.values());

        let (subopt, z_star, kkt, flagged) = match oracle_solve(&inst) {
            Ok(sol) => {
                let s = suboptimality(z_model, sol.objective);
                (s, Some(sol.objective), Some(sol.kkt_residual), s.is_none())
            }
            Err(_) => (None, None, None, true),
        };
        records.push(SampleRecord {
            index,
            x_in: x_in.iter().copied().collect(),
            suboptimality: subopt,
            z_model,
            z_star,
            oracle_kkt: kkt,
            dynamics_violation: dyn_v,
            box_violation: box_v,
            quad_violation: quad_v,
            flagged,
        });
    }
    Ok((aggregate(&records), records))
}

fn aggregate(records: &[SampleRecord]) -> EvalReport {
    let subopts: Vec<f64> = records
        .iter()
        .filter_map(|r| r.suboptimality)
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let maxi = |v: &[f64]| v.iter().copied().fold(0.0_f64, f64::max);
    let dyns: Vec<f64> = records.iter().map(|r| r.dynamics_violation).collect();
    let boxs: Vec<f64> = records.iter().map(|r| r.box_violation).collect();
    let quads: Vec<f64> = records.iter().map(|r| r.quad_violation).collect();
    EvalReport {
        samples: records.len(),
        excluded: records.iter().filter(|r| r.flagged).count(),
        avg_suboptimality: mean(&subopts),
        max_suboptimality: maxi(&subopts),
        avg_dynamics_violation: mean(&dyns),
        max_dynamics_violation: maxi(&dyns),
        avg_box_violation: mean(&boxs),
        max_box_violation: maxi(&boxs),
        avg_quad_violation: mean(&quads),
        max_quad_violation: maxi(&quads),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_as_model_scores_zero_suboptimality() {
        let template = MpcInstance::default();
        let (report, records) = evaluate(
            &template,
            |inst: &MpcInstance| oracle_solve(inst).unwrap().trajectory.flatten(),
            5,
            42,
        )
        .unwrap();
        assert_eq!(report.samples, 5);
        assert_eq!(report.excluded, 0);
        assert!(report.max_suboptimality <= 1e-9);
        for r in &records {
            // violations bounded by the oracle's own KKT tolerance
            let kkt = r.oracle_kkt.unwrap();
            assert!(r.dynamics_violation <= kkt.max(1e-12));
            assert!(r.box_violation <= kkt.max(1e-12));
            assert!(r.quad_violation <= kkt.max(1e-12));
        }
    }

    #[test]
    fn zero_control_model_is_feasible_but_suboptimal() {
        let template = MpcInstance::default();
        let (report, _) = evaluate(
            &template,
            |inst: &MpcInstance| {
                super::super::Trajectory::rollout(inst, &vec![DVector::zeros(4); 10]).flatten()
            },
            5,
            43,
        )
        .unwrap();
        assert_eq!(report.excluded, 0);
        assert!(report.max_dynamics_violation < 1e-12);
        assert!(report.max_box_violation == 0.0);
        assert!(report.max_quad_violation == 0.0);
        assert!(report.avg_suboptimality > 0.1, "doing nothing should cost");
        // maxima dominate averages
        assert!(report.max_suboptimality >= report.avg_suboptimality);
        assert!(report.max_quad_violation >= report.avg_quad_violation);
    }

    #[test]
    fn evaluation_is_deterministic_in_the_seed() {
        let template = MpcInstance::default();
        let model = |inst: &MpcInstance| {
            super::super::Trajectory::rollout(inst, &vec![DVector::zeros(4); 10]).flatten()
        };
        let (r1, _) = evaluate(&template, model, 3, 7).unwrap();
        let (r2, _) = evaluate(&template, model, 3, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }
}
