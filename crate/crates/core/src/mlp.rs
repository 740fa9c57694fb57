//! Feed-forward network (2 hidden ReLU layers of 200) and an Adam
//! trainer whose per-sample loss is the MPC objective of the *projected*
//! network output — self-supervised, no oracle solutions involved.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffprog::{Data, Tape, TapeError, Value};
use crate::mpcbench::{FastMpcProgram, MpcError, MpcInstance};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// MLP parameters: `sizes[0] -> ... -> sizes.last()`, ReLU on hidden
/// layers, linear output.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// He-style uniform init `U(-sqrt(6/fan_in), sqrt(6/fan_in))` for
    /// weights, zero biases. Deterministic in the seed.
    pub fn new_seeded(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..limit)),
                    b: DVector::zeros(fan_out),
                }
            })
            .collect();
        Self {
            sizes: sizes.to_vec(),
            layers,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Plain (untraced) forward pass.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let last = self.layers.len() - 1;
        let mut z = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            z = &layer.w * z + &layer.b;
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
        }
        z
    }

    /// Emit the parameters as tape leaves, one (weight, bias) pair per
    /// layer, so gradients can be taken with respect to them.
    pub fn emit_leaves(&self, tape: &mut Tape) -> Vec<(Value, Value)> {
        self.layers
            .iter()
            .map(|l| (tape.matrix(l.w.clone()), tape.vector(l.b.clone())))
            .collect()
    }

    /// Traced forward pass through previously emitted leaves.
    pub fn forward_traced(&self, tape: &mut Tape, leaves: &[(Value, Value)], x: Value) -> Value {
        let last = leaves.len() - 1;
        let mut z = x;
        for (i, (w, b)) in leaves.iter().enumerate() {
            let wz = tape.matvec(*w, z);
            z = tape.add(wz, *b);
            if i < last {
                z = tape.relu(z);
            }
        }
        z
    }
}

/// Checkpoint layout: a JSON document with the layer sizes, init seed and
/// epoch as the header, followed by one flat weight array (column-major)
/// and one bias array per layer.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub sizes: Vec<usize>,
    pub seed: u64,
    pub epoch: usize,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_params(params: &MlpParams, seed: u64, epoch: usize) -> Self {
        Self {
            sizes: params.sizes.clone(),
            seed,
            epoch,
            weights: params
                .layers
                .iter()
                .map(|l| l.w.as_slice().to_vec())
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| l.b.as_slice().to_vec())
                .collect(),
        }
    }

    pub fn into_params(&self) -> MlpParams {
        let layers = self
            .sizes
            .windows(2)
            .zip(self.weights.iter().zip(&self.biases))
            .map(|(io, (w, b))| Layer {
                w: DMatrix::from_column_slice(io[1], io[0], w),
                b: DVector::from_column_slice(b),
            })
            .collect();
        MlpParams {
            sizes: self.sizes.clone(),
            layers,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(std::fs::write(path, serde_json::to_string(self)?)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Damping of the projection layer.
    pub epsilon: f64,
    /// Unroll length of the projection layer (0 disables it).
    pub unroll_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            hidden: 200,
            epsilon: 0.3,
            unroll_iters: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainResult {
    pub params: MlpParams,
    pub history: Vec<EpochStats>,
}

const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    t: usize,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| DVector::zeros(n)).collect(),
            v: shapes.iter().map(|&n| DVector::zeros(n)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [DVector<f64>], grads: &[DVector<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            *m = cfg.beta1 * &*m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * &*v + (1.0 - cfg.beta2) * g.component_mul(g);
            for i in 0..p.len() {
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= cfg.learning_rate * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Flatten the parameters into one vector per tensor, in layer order
/// (w0, b0, w1, b1, ...), for the optimizer.
fn flatten_params(params: &MlpParams) -> Vec<DVector<f64>> {
    params
        .layers
        .iter()
        .flat_map(|l| {
            [
                DVector::from_column_slice(l.w.as_slice()),
                l.b.clone(),
            ]
        })
        .collect()
}

fn unflatten_params(params: &mut MlpParams, flat: &[DVector<f64>]) {
    for (i, l) in params.layers.iter_mut().enumerate() {
        l.w.copy_from_slice(flat[2 * i].as_slice());
        l.b.copy_from(&flat[2 * i + 1]);
    }
}

/// Train on the MPC task: for each sample, trace
/// `loss = Z(project(f_theta(x_in)))` on one tape, backprop to the
/// parameters, average over the minibatch and take an Adam step.
/// Validation loss uses the same projected objective, forward-only.
pub fn train_mpc(
    template: &MpcInstance,
    train_x: &[DVector<f64>],
    val_x: &[DVector<f64>],
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if train_x.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let sizes = [
        template.n_x,
        cfg.hidden,
        cfg.hidden,
        template.dim(),
    ];
    let mut params = MlpParams::new_seeded(&sizes, cfg.seed);
    let program = FastMpcProgram::new(template, cfg.epsilon);
    let target_rep = {
        let mut t = DVector::zeros(template.horizon * template.n_x);
        for k in 0..template.horizon {
            t.rows_mut(k * template.n_x, template.n_x)
                .copy_from(&template.x_target);
        }
        t
    };

    let mut flat = flatten_params(&params);
    let shapes: Vec<usize> = flat.iter().map(|v| v.len()).collect();
    let mut adam = Adam::new(&shapes);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Fisher-Yates with the epoch-persistent seeded rng
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_acc: Vec<DVector<f64>> =
                shapes.iter().map(|&n| DVector::zeros(n)).collect();
            for &si in batch {
                let x_in = &train_x[si];
                let mut tape = Tape::new();
                let leaves = params.emit_leaves(&mut tape);
                let xv = tape.vector(x_in.clone());
                let y_hat = params.forward_traced(&mut tape, &leaves, xv);
                let y = program.unroll(&mut tape, x_in, y_hat, cfg.unroll_iters)?;
                let loss = mpc_loss(&mut tape, y, &target_rep, template);
                let loss_val = tape.value(loss).as_scalar();
                if !loss_val.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_loss += loss_val;
                let grads = tape.backward(loss)?;
                for (li, (w, b)) in leaves.iter().enumerate() {
                    if let Data::Matrix(gw) = grads.grad(*w) {
                        grad_acc[2 * li] += DVector::from_column_slice(gw.as_slice());
                    }
                    if let Data::Vector(gb) = grads.grad(*b) {
                        grad_acc[2 * li + 1] += gb;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad_acc {
                *g *= scale;
            }
            adam.step(cfg, &mut flat, &grad_acc);
            unflatten_params(&mut params, &flat);
        }
        let train_loss = epoch_loss / train_x.len() as f64;
        let val_loss = dataset_loss(&params, &program, template, val_x, cfg.unroll_iters)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok(TrainResult { params, history })
}

/// Average projected-objective loss over a dataset, forward-only.
pub fn dataset_loss(
    params: &MlpParams,
    program: &FastMpcProgram,
    template: &MpcInstance,
    xs: &[DVector<f64>],
    unroll_iters: usize,
) -> Result<f64, TrainError> {
    if xs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for x_in in xs {
        let y_hat = params.forward(x_in);
        let y = program.project_vector(x_in, &y_hat, unroll_iters)?;
        let inst = template.clone().with_initial_state(x_in.clone());
        total += crate::mpcbench::objective_flat(&inst, &y)?;
    }
    Ok(total / xs.len() as f64)
}

/// Traced MPC objective `sum ||x_k - t||^2 + sum ||u_k||^2` of a
/// flattened trajectory value.
fn mpc_loss(
    tape: &mut Tape,
    y: Value,
    target_rep: &DVector<f64>,
    template: &MpcInstance,
) -> Value {
    let n_states = template.horizon * template.n_x;
    let n_controls = template.horizon * template.n_u;
    let states = tape.slice(y, 0, n_states);
    let target = tape.vector(target_rep.clone());
    let d = tape.sub(states, target);
    let d2 = tape.square(d);
    let state_cost = tape.sum(d2);
    let u = tape.slice(y, n_states, n_controls);
    let u2 = tape.square(u);
    let control_cost = tape.sum(u2);
    tape.add(state_cost, control_cost)
}
