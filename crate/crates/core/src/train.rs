//! Training: L1 loss on normalized depth, Adam with bias correction, the
//! epoch loop with best-by-validation checkpointing, and the clue ablation
//! harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, StereoSample};
use crate::model::{self, ModelConfig, ModelError, ModelParams};
use crate::tensor::{GradGraph, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("loss became NaN at step {step} (batch {batch_index})")]
    NanLoss { step: u64, batch_index: usize },
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub clue_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            lr: 1e-3,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clue_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(TrainError::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference, recorded on the graph.
pub fn l1_loss(g: &mut GradGraph, pred: TensorId, gt: TensorId) -> crate::tensor::Result<TensorId> {
    let diff = g.sub(pred, gt)?;
    let a = g.abs(diff);
    Ok(g.mean(a))
}

/// Mean absolute difference of two plain tensors.
pub fn l1_value(pred: &Tensor, gt: &Tensor) -> crate::tensor::Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "l1",
            detail: format!("shapes {:?} and {:?} differ", pred.shape(), gt.shape()),
        });
    }
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Per-parameter Adam accumulators, aligned with the canonical parameter
/// order of the model.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        OptimState {
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice.
pub fn adam_update(
    data: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &TrainConfig,
) {
    let t = step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..data.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Apply Adam to every parameter. `grads` must follow the canonical
/// parameter order; a missing or misnamed entry is an error.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(String, Tensor)],
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let named = params.named_mut();
    if grads.len() != named.len() {
        return Err(TrainError::Config(format!(
            "expected {} gradients, got {}",
            named.len(),
            grads.len()
        )));
    }
    for (i, ((pname, tensor), (gname, grad))) in named.into_iter().zip(grads.iter()).enumerate() {
        if &pname != gname {
            return Err(TrainError::MissingGradient(pname));
        }
        if grad.shape() != tensor.shape() {
            return Err(TrainError::Config(format!(
                "gradient for {pname} has shape {:?}, parameter is {:?}",
                grad.shape(),
                tensor.shape()
            )));
        }
        adam_update(
            tensor.data_mut(),
            grad.data(),
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            cfg,
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters at the lowest validation loss.
    pub best: ModelParams,
    pub best_val: f64,
    /// Parameters after the last step.
    pub final_params: ModelParams,
    /// One point per epoch: cumulative step count, sample-weighted mean
    /// train loss over the epoch, validation loss after the epoch.
    pub curve: Vec<CurvePoint>,
}

/// Loss curve as CSV (step, train_loss, val_loss).
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,train_loss,val_loss\n");
    for p in curve {
        s.push_str(&format!("{},{:.9},{:.9}\n", p.step, p.train_loss, p.val_loss));
    }
    s
}

fn batch_tensors(samples: &[&StereoSample]) -> crate::tensor::Result<(Tensor, Tensor, Tensor, Tensor)> {
    let lefts: Vec<&Tensor> = samples.iter().map(|s| &s.left).collect();
    let rights: Vec<&Tensor> = samples.iter().map(|s| &s.right).collect();
    let clues: Vec<&Tensor> = samples.iter().map(|s| &s.clue).collect();
    let gts: Vec<&Tensor> = samples.iter().map(|s| &s.gt_depth).collect();
    Ok((
        Tensor::stack(&lefts)?,
        Tensor::stack(&clues)?,
        Tensor::stack(&rights)?,
        Tensor::stack(&gts)?,
    ))
}

/// Mean per-sample L1 of the model's prediction against ground truth.
/// Forward-only: parameters are never mutated here.
pub fn evaluate_l1(params: &ModelParams, samples: &[StereoSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::Config("cannot evaluate on an empty set".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let left = s.left.insert_axis0();
        let right = s.right.insert_axis0();
        let clue = s.clue.insert_axis0();
        let clue_ref = params.config.clue_enabled.then_some(&clue);
        let pred = model::forward(params, &left, clue_ref, &right)?;
        total += l1_value(&pred, &s.gt_depth.insert_axis0())?;
    }
    Ok(total / samples.len() as f64)
}

/// Train starting from freshly initialized parameters.
///
/// The architecture's clue switch is taken from the train config (it toggles
/// the primary tower's input channels and nothing else).
pub fn train(
    arch: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[StereoSample],
    val_set: &[StereoSample],
) -> Result<TrainOutput> {
    let mcfg = ModelConfig {
        clue_enabled: cfg.clue_enabled,
        ..*arch
    };
    let params = model::build(&mcfg, cfg.seed)?;
    train_from(params, cfg, train_set, val_set)
}

/// Train starting from the given parameters (resume or probe).
pub fn train_from(
    mut params: ModelParams,
    cfg: &TrainConfig,
    train_set: &[StereoSample],
    val_set: &[StereoSample],
) -> Result<TrainOutput> {
    cfg.validate()?;
    if params.config.clue_enabled != cfg.clue_enabled {
        return Err(TrainError::Config(
            "model and train config disagree about the clue channel".into(),
        ));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config("train and val sets must be non-empty".into()));
    }

    let mut state = OptimState::new(&params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut gstep = 0u64;

    for epoch in 0..cfg.epochs {
        // fresh deterministic visit order per epoch
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut weighted_loss = 0.0;
        let mut seen = 0usize;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&StereoSample> = chunk.iter().map(|i| &train_set[*i]).collect();
            let (left, clue, right, gt) = batch_tensors(&batch)?;

            let mut g = GradGraph::new();
            let gp = model::bind(&params, &mut g);
            let li = g.leaf(left);
            let ci = cfg.clue_enabled.then(|| g.leaf(clue));
            let ri = g.leaf(right);
            let gi = g.leaf(gt);
            let out = model::forward_graph(&mut g, &gp, &params.config, li, ci, ri)?;
            let loss_id = l1_loss(&mut g, out, gi)?;
            let loss = g.tensor(loss_id).item();
            if !loss.is_finite() {
                return Err(TrainError::NanLoss {
                    step: gstep,
                    batch_index,
                });
            }

            let grad_map = g.backward(loss_id)?;
            let grads: Vec<(String, Tensor)> = gp
                .named()
                .into_iter()
                .map(|(name, id)| {
                    grad_map
                        .get(id)
                        .cloned()
                        .map(|t| (name.clone(), t))
                        .ok_or(TrainError::MissingGradient(name))
                })
                .collect::<Result<_>>()?;
            adam_step(&mut params, &grads, &mut state, cfg)?;
            gstep += 1;

            weighted_loss += loss * batch.len() as f64;
            seen += batch.len();
        }

        let train_loss = weighted_loss / seen as f64;
        let val_loss = evaluate_l1(&params, val_set)?;
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
        }
        curve.push(CurvePoint {
            step: gstep,
            train_loss,
            val_loss,
        });
    }

    Ok(TrainOutput {
        best,
        best_val,
        final_params: params,
        curve,
    })
}

/// The baseline arm of the clue ablation.
#[derive(Debug, Clone, Copy)]
pub enum ClueBaseline {
    /// Keep the 4-channel model but feed a constant, information-free clue.
    Constant(f64),
    /// Drop the clue channel entirely (3-channel primary tower).
    Disabled,
}

#[derive(Debug, Clone, Copy)]
pub struct AblateRecord {
    pub seed: u64,
    pub with_clue_l1: f64,
    pub baseline_l1: f64,
}

/// Train matched with-clue / baseline models on identical budgets and data
/// splits, one pair per seed, and report their best validation L1.
pub fn ablate_clue(
    arch: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[StereoSample],
    seeds: &[u64],
    baseline: ClueBaseline,
) -> Result<Vec<AblateRecord>> {
    if seeds.len() < 3 {
        return Err(TrainError::Config(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (train_set, test_set) = crate::data::split(samples.to_vec(), 0.9, seed)?;

        let with_cfg = TrainConfig {
            seed,
            clue_enabled: true,
            ..*cfg
        };
        let with_out = train(arch, &with_cfg, &train_set, &test_set)?;

        let baseline_out = match baseline {
            ClueBaseline::Constant(c) => {
                let blank = |set: &[StereoSample]| -> Vec<StereoSample> {
                    set.iter()
                        .map(|s| {
                            let mut s = s.clone();
                            s.clue = Tensor::full(s.clue.shape().to_vec(), c);
                            s
                        })
                        .collect()
                };
                train(arch, &with_cfg, &blank(&train_set), &blank(&test_set))?
            }
            ClueBaseline::Disabled => {
                let no_clue_cfg = TrainConfig {
                    seed,
                    clue_enabled: false,
                    ..*cfg
                };
                train(arch, &no_clue_cfg, &train_set, &test_set)?
            }
        };

        records.push(AblateRecord {
            seed,
            with_clue_l1: with_out.best_val,
            baseline_l1: baseline_out.best_val,
        });
    }
    Ok(records)
}
