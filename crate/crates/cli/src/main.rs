//! `cproj`: toy projection demos, MPC training and evaluation.
//!
//! Exit codes: 0 success / criteria met, 1 numerical failure or criteria
//! missed, 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use constraint_projection::mlp::{train_mpc, Checkpoint, TrainConfig, TrainError};
use constraint_projection::mpcbench::{
    evaluate, oracle_solve, sample_feasible_initial, FastMpcProgram, MpcInstance, SampleRecord,
    Trajectory,
};
use constraint_projection::projector::{
    decay_bound, project, toys, verify_decay, Method, ProjectionConfig,
};

#[derive(Parser)]
#[command(name = "cproj", about = "constrained-projection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a toy scenario with both the vanilla and damped rules and
    /// write per-iteration CSV traces.
    Toy(ToyArgs),
    /// Train the MPC surrogate network through the projection layer.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the oracle itself) on fresh instances.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ToyArgs {
    /// circle | stall | affine-decay
    scenario: String,
    #[arg(long, default_value = "out/toy")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with TrainRunConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out/train")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    unroll_iters: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`. Not needed with --oracle-as-model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out/eval")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Feed the oracle's own solution through the evaluation (self-test).
    #[arg(long, default_value_t = false)]
    oracle_as_model: bool,
}

/// Training run configuration: the optimizer settings plus dataset sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainRunConfig {
    #[serde(flatten)]
    train: TrainConfig,
    n_train: usize,
    n_val: usize,
    /// Seed for dataset generation (independent of the init seed).
    data_seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            n_train: 800,
            n_val: 100,
            data_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalRunConfig {
    n_test: usize,
    seed: u64,
    epsilon: f64,
    unroll_iters: usize,
    // pass thresholds on the aggregate report
    max_avg_suboptimality: f64,
    max_max_suboptimality: f64,
    max_avg_violation: f64,
    max_max_violation: f64,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self {
            n_test: 100,
            seed: 2000,
            epsilon: 0.3,
            unroll_iters: 500,
            max_avg_suboptimality: 0.02,
            max_max_suboptimality: 0.05,
            max_avg_violation: 1e-3,
            max_max_violation: 1e-2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Toy(args) => cmd_toy(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numeric(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Json(_) => 2,
            CliError::Numeric(_) | CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => write!(f, "{m}"),
            CliError::Io(e) => write!(f, "io: {e}"),
            CliError::Json(e) => write!(f, "config: {e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}
impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Json(e)
    }
}

/// Full-precision scientific notation so downstream diffs are exact.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_trace_csv(path: &Path, trace: &constraint_projection::projector::ProjectionTrace) -> Result<(), CliError> {
    let dim = trace.iterates[0].len();
    let mut s = String::from("k");
    for i in 0..dim {
        s.push_str(&format!(",y{}", i + 1));
    }
    s.push_str(",energy\n");
    for (k, (y, v)) in trace.iterates.iter().zip(&trace.energies).enumerate() {
        s.push_str(&k.to_string());
        for e in y.iter() {
            s.push(',');
            s.push_str(&fmt(*e));
        }
        s.push(',');
        s.push_str(&fmt(*v));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_toy(args: &ToyArgs) -> Result<ExitCode, CliError> {
    fs::create_dir_all(&args.out)?;
    let (cs, y0, consts) = match args.scenario.as_str() {
        "circle" => {
            let (cs, y0) = toys::circle_instance();
            (cs, y0, None)
        }
        "stall" => {
            let (cs, y0) = toys::stall_instance();
            (cs, y0, None)
        }
        "affine-decay" => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let (cs, consts, y0) = toys::affine_instance(&mut rng, 3, 5);
            (cs, y0, Some(consts))
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown scenario `{other}` (expected circle | stall | affine-decay)"
            )))
        }
    };

    let mut damped_converged = false;
    for method in [Method::Vanilla, Method::Damped] {
        let name = method.rule().name();
        let cfg = ProjectionConfig {
            epsilon: args.epsilon,
            max_iters: args.max_iters,
            tol: 1e-10,
            method,
        };
        match project(&cs, &y0, &cfg) {
            Ok((_, trace)) => {
                let path = args.out.join(format!("{}-{}.csv", args.scenario, name));
                write_trace_csv(&path, &trace)?;
                println!(
                    "{name}: {} after {} iters, final V = {:.3e}",
                    if trace.converged { "converged" } else { "did not converge" },
                    trace.iters_used,
                    trace.energies.last().unwrap()
                );
                if method == Method::Damped {
                    damped_converged = trace.converged;
                }
            }
            Err(e) => println!("{name}: failed ({e})"),
        }
    }

    if let Some(c) = consts {
        // theory check on the affine instance: observed decay vs the bound
        let epsilon = if args.epsilon > c.l_smooth / 2.0 {
            args.epsilon
        } else {
            0.75 * c.l_smooth
        };
        let bound = decay_bound(c.mu, c.l_smooth, c.g_lip, epsilon)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let cfg = ProjectionConfig::damped(epsilon, args.max_iters, 1e-12);
        let report = verify_decay(&cs, &y0, &cfg, &bound)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        println!(
            "decay: theoretical factor {:.6}, worst observed ratio {:.6}, envelope {}",
            report.factor,
            report.worst_ratio,
            if report.passed { "held" } else { "VIOLATED" }
        );
        if !report.passed {
            return Ok(ExitCode::from(1));
        }
    }
    Ok(if damped_converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn load_config<T: Default + serde::de::DeserializeOwned>(
    path: &Option<PathBuf>,
) -> Result<T, CliError> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn sample_dataset(template: &MpcInstance, n: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| sample_feasible_initial(template, rng).expect("sampling budget"))
        .collect()
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode, CliError> {
    let mut cfg: TrainRunConfig = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_val {
        cfg.n_val = n;
    }
    if let Some(k) = args.unroll_iters {
        cfg.train.unroll_iters = k;
    }
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("resolved_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;

    let template = MpcInstance::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let train_x = sample_dataset(&template, cfg.n_train, &mut rng);
    let val_x = sample_dataset(&template, cfg.n_val, &mut rng);

    let result = match train_mpc(&template, &train_x, &val_x, &cfg.train) {
        Ok(r) => r,
        Err(e @ TrainError::NonFiniteLoss { .. }) => {
            return Err(CliError::Numeric(e.to_string()))
        }
        Err(e) => return Err(CliError::Numeric(e.to_string())),
    };

    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for h in &result.history {
        csv.push_str(&format!(
            "{},{},{}\n",
            h.epoch,
            fmt(h.train_loss),
            fmt(h.val_loss)
        ));
    }
    fs::write(args.out.join("losses.csv"), csv)?;
    Checkpoint::from_params(&result.params, cfg.train.seed, cfg.train.epochs)
        .save(&args.out.join("checkpoint.json"))
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    println!(
        "trained {} epochs; final train loss {:.3}, val loss {:.3}",
        result.history.len(),
        result.history.last().map(|h| h.train_loss).unwrap_or(f64::NAN),
        result.history.last().map(|h| h.val_loss).unwrap_or(f64::NAN),
    );
    Ok(ExitCode::SUCCESS)
}

fn write_sample_csv(path: &Path, records: &[SampleRecord]) -> Result<(), CliError> {
    let mut s = String::from(
        "index,suboptimality,dynamics_violation,box_violation,quad_violation,oracle_kkt,flagged\n",
    );
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index,
            r.suboptimality.map(fmt).unwrap_or_default(),
            fmt(r.dynamics_violation),
            fmt(r.box_violation),
            fmt(r.quad_violation),
            r.oracle_kkt.map(fmt).unwrap_or_default(),
            r.flagged
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_trajectory_csv(
    path: &Path,
    inst: &MpcInstance,
    model: &Trajectory,
    oracle: &Trajectory,
) -> Result<(), CliError> {
    let mut s = String::from("k");
    for who in ["model", "oracle"] {
        for i in 1..=inst.n_x {
            s.push_str(&format!(",{who}_x{i}"));
        }
        for i in 1..=inst.n_u {
            s.push_str(&format!(",{who}_u{i}"));
        }
    }
    s.push('\n');
    for k in 0..inst.horizon {
        s.push_str(&(k + 1).to_string());
        for traj in [model, oracle] {
            for v in traj.states[k].iter() {
                s.push(',');
                s.push_str(&fmt(*v));
            }
            for v in traj.controls[k].iter() {
                s.push(',');
                s.push_str(&fmt(*v));
            }
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode, CliError> {
    let mut cfg: EvalRunConfig = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_test {
        cfg.n_test = n;
    }
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("resolved_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;

    let template = MpcInstance::default();
    let program = FastMpcProgram::new(&template, cfg.epsilon);
    let params = if args.oracle_as_model {
        None
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage("--checkpoint is required without --oracle-as-model".into()))?;
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "checkpoint not found: {}",
                path.display()
            )));
        }
        Some(
            Checkpoint::load(path)
                .map_err(|e| CliError::Usage(e.to_string()))?
                .into_params(),
        )
    };

    let mut model_trajs: Vec<DVector<f64>> = Vec::new();
    let model = |inst: &MpcInstance| -> DVector<f64> {
        match &params {
            Some(p) => {
                let y_hat = p.forward(&inst.x_in);
                program
                    .project_vector(&inst.x_in, &y_hat, cfg.unroll_iters)
                    .expect("projection solve")
            }
            None => oracle_solve(inst)
                .expect("oracle solve")
                .trajectory
                .flatten(),
        }
    };
    let (report, records) = evaluate(
        &template,
        |inst: &MpcInstance| {
            let y = model(inst);
            model_trajs.push(y.clone());
            y
        },
        cfg.n_test,
        cfg.seed,
    )
    .map_err(|e| CliError::Numeric(e.to_string()))?;

    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_sample_csv(&args.out.join("samples.csv"), &records)?;

    // trajectory dumps for external plotting
    let traj_dir = args.out.join("trajectories");
    fs::create_dir_all(&traj_dir)?;
    for (r, y) in records.iter().zip(&model_trajs) {
        let x_in = DVector::from_vec(r.x_in.clone());
        let inst = template.clone().with_initial_state(x_in);
        let model_traj = Trajectory::unflatten(&inst, y)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        if let Ok(sol) = oracle_solve(&inst) {
            write_trajectory_csv(
                &traj_dir.join(format!("sample_{:03}.csv", r.index)),
                &inst,
                &model_traj,
                &sol.trajectory,
            )?;
        }
    }

    println!("{}", serde_json::to_string_pretty(&report)?);
    let pass = report.excluded == 0
        && report.avg_suboptimality <= cfg.max_avg_suboptimality
        && report.max_suboptimality <= cfg.max_max_suboptimality
        && report.avg_dynamics_violation <= cfg.max_avg_violation
        && report.avg_box_violation <= cfg.max_avg_violation
        && report.avg_quad_violation <= cfg.max_avg_violation
        && report.max_dynamics_violation <= cfg.max_max_violation
        && report.max_box_violation <= cfg.max_max_violation
        && report.max_quad_violation <= cfg.max_max_violation;
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
