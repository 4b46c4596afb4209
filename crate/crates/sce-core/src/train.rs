//! Training harness: adaptive-moment optimizer, epoch loop with early
//! stopping on validation NDCG@K, per-step loss-stage memory windows, and
//! line-delimited diagnostic records.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward, BackboneConfig, ModelState};
use crate::data::{make_batches, SequenceDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalTarget, MetricsReport};
use crate::losses::{bce, bce_plus, ce_minus, full_ce, sample_negatives};
use crate::memory::{estimate_memory, LossKind, LossShape, MemMeter, MemoryEstimate};
use crate::rng::RngState;
use crate::sce::{sce_loss, SceConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with decoupled weight decay. Moment buffers follow the model's
/// parameter visit order.
pub struct Adam {
    cfg: OptimizerConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(state: &ModelState, cfg: OptimizerConfig) -> Self {
        let mut m = Vec::new();
        state.visit_params(|_, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        Adam { cfg, step: 0, m, v }
    }

    pub fn apply(&mut self, state: &mut ModelState, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        let mut idx = 0;
        state.visit_params_mut(|_, param| {
            let g = grads[idx].data();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let w = param.data_mut();
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                w[i] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
            idx += 1;
        });
    }
}

/// Which loss drives training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpec {
    Ce,
    Bce,
    BcePlus { k: usize },
    CeMinus { k: usize },
    Sce(SceConfig),
}

impl LossSpec {
    pub fn kind(&self) -> LossKind {
        match self {
            LossSpec::Ce => LossKind::Ce,
            LossSpec::Bce => LossKind::Bce,
            LossSpec::BcePlus { .. } => LossKind::BcePlus,
            LossSpec::CeMinus { .. } => LossKind::CeMinus,
            LossSpec::Sce(_) => LossKind::Sce,
        }
    }

    pub fn params_string(&self) -> String {
        match self {
            LossSpec::Ce => String::new(),
            LossSpec::Bce => "k=1".into(),
            LossSpec::BcePlus { k } | LossSpec::CeMinus { k } => format!("k={k}"),
            LossSpec::Sce(c) => format!(
                "n_b={} b_x={} b_y={} mix={}",
                c.n_b, c.b_x, c.b_y, if c.use_mix { "on" } else { "off" }
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
    /// Batch size s.
    pub s: usize,
    pub max_epochs: usize,
    /// Early stopping: stop once validation NDCG@eval_k fails to improve
    /// for more than `patience` consecutive epochs.
    pub patience: usize,
    pub eval_k: usize,
    pub exclude_history: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneConfig::default(),
            loss: LossSpec::Ce,
            optimizer: OptimizerConfig::default(),
            s: 32,
            max_epochs: 100,
            patience: 3,
            eval_k: 10,
            exclude_history: true,
            seed: 0,
        }
    }
}

/// One line of the per-step diagnostic stream (JSONL).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unique_selection_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct_logit_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_ndcg: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub state: ModelState,
    pub epoch_logs: Vec<EpochLog>,
    pub step_records: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
    pub test_metrics: MetricsReport,
    /// Largest measured loss-stage window (elements) across steps.
    pub peak_loss_elements: u64,
    pub analytic_estimate: MemoryEstimate,
    pub train_seconds: f64,
    pub seconds_per_epoch: f64,
    pub epochs_to_best: usize,
}

/// Resolve an SCE config against the dataset: zero n_b/b_x means "derive
/// from (s, l, average sequence length) with alpha/beta".
pub fn resolve_loss(spec: &LossSpec, s: usize, l: usize, l_bar: f64) -> LossSpec {
    match spec {
        LossSpec::Sce(cfg) if cfg.n_b == 0 || cfg.b_x == 0 => {
            LossSpec::Sce(cfg.clone().with_derived(s, l, l_bar))
        }
        other => other.clone(),
    }
}

/// Analytic loss-stage memory for a training step of this config.
pub fn analytic_estimate(spec: &LossSpec, s: usize, l: usize, catalog: usize) -> MemoryEstimate {
    let shape = match spec {
        LossSpec::Ce => LossShape::Ce,
        LossSpec::Bce => LossShape::Sampled { k: 1 },
        LossSpec::BcePlus { k } | LossSpec::CeMinus { k } => LossShape::Sampled { k: *k },
        LossSpec::Sce(c) => LossShape::Bucketed { n_b: c.n_b, b_x: c.b_x, b_y: c.b_y },
    };
    estimate_memory(shape, s, l, catalog)
}

/// Train a model on the prepared dataset. The loss-stage of every step runs
/// inside a fresh meter window; the peak over steps lands in the result.
pub fn train(config: &TrainConfig, dataset: &SequenceDataset) -> Result<TrainResult> {
    let mut backbone_cfg = config.backbone.clone();
    backbone_cfg.catalog = dataset.catalog_size;
    backbone_cfg.validate()?;
    let loss_spec = resolve_loss(&config.loss, config.s, backbone_cfg.max_len, dataset.avg_train_len);

    let mut root_rng = RngState::from_seed(config.seed);
    let mut init_rng = root_rng.fork();
    let mut shuffle_rng = root_rng.fork();
    let mut dropout_rng = root_rng.fork();
    let mut negative_rng = root_rng.fork();
    let mut bucket_rng = root_rng.fork();

    let mut state = ModelState::init(backbone_cfg.clone(), &mut init_rng)?;
    let mut adam = Adam::new(&state, config.optimizer);
    let meter = MemMeter::new();

    let val_opts = EvalOptions {
        ks: vec![config.eval_k],
        exclude_history: config.exclude_history,
        target: EvalTarget::Validation,
        batch_size: config.s.max(1),
    };

    let mut epoch_logs = Vec::new();
    let mut step_records = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_state = state.clone();
    let mut stale_epochs = 0usize;
    let mut peak_loss_elements = 0u64;
    let mut global_step = 0usize;
    let started = Instant::now();

    for epoch in 1..=config.max_epochs {
        let epoch_start = Instant::now();
        let batches = make_batches(&dataset.train, config.s, backbone_cfg.max_len, &mut shuffle_rng);
        if batches.is_empty() {
            return Err(Error::Data("no trainable sequences (all shorter than 2)".into()));
        }
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in &batches {
            let mut tape = Tape::with_meter(meter.clone());
            let fwd = forward(
                &mut tape,
                &state,
                batch,
                if backbone_cfg.dropout > 0.0 { Some(&mut dropout_rng) } else { None },
            )?;

            meter.begin_window();
            let (loss_node, loss_value, diag) = match &loss_spec {
                LossSpec::Ce => {
                    let out =
                        full_ce(&mut tape, fwd.x, fwd.catalog, &batch.targets, &batch.mask)?;
                    (out.node, out.value, None)
                }
                LossSpec::Bce => {
                    let negatives = sample_negatives(
                        &batch.targets,
                        1,
                        backbone_cfg.catalog,
                        &mut negative_rng,
                    )?;
                    let out = bce(
                        &mut tape,
                        fwd.x,
                        fwd.catalog,
                        &batch.targets,
                        &batch.mask,
                        &negatives,
                    )?;
                    (out.node, out.value, None)
                }
                LossSpec::BcePlus { k } => {
                    let negatives = sample_negatives(
                        &batch.targets,
                        *k,
                        backbone_cfg.catalog,
                        &mut negative_rng,
                    )?;
                    let out = bce_plus(
                        &mut tape,
                        fwd.x,
                        fwd.catalog,
                        &batch.targets,
                        &batch.mask,
                        &negatives,
                    )?;
                    (out.node, out.value, None)
                }
                LossSpec::CeMinus { k } => {
                    let negatives = sample_negatives(
                        &batch.targets,
                        *k,
                        backbone_cfg.catalog,
                        &mut negative_rng,
                    )?;
                    let out = ce_minus(
                        &mut tape,
                        fwd.x,
                        fwd.catalog,
                        &batch.targets,
                        &batch.mask,
                        &negatives,
                    )?;
                    (out.node, out.value, None)
                }
                LossSpec::Sce(sce_cfg) => {
                    let out = sce_loss(
                        &mut tape,
                        fwd.x,
                        fwd.catalog,
                        &batch.targets,
                        &batch.mask,
                        sce_cfg,
                        &mut bucket_rng,
                    )?;
                    (
                        out.node,
                        out.value,
                        Some((out.unique_selection_fraction, out.correct_logit_fraction)),
                    )
                }
            };
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch, step: global_step, loss: loss_value });
            }
            tape.backward(loss_node)?;
            peak_loss_elements = peak_loss_elements.max(meter.window_peak_elements());

            let grads: Vec<Tensor> =
                fwd.param_nodes.iter().map(|&n| tape.grad_tensor(n)).collect();
            drop(tape);
            adam.apply(&mut state, &grads);

            global_step += 1;
            loss_sum += loss_value;
            steps += 1;
            step_records.push(StepRecord {
                step: global_step,
                loss: loss_value,
                unique_selection_fraction: diag.map(|d| d.0),
                correct_logit_fraction: diag.map(|d| d.1),
            });
        }

        let val = evaluate(&state, &dataset.holdout, &val_opts)?;
        let val_ndcg = val.ndcg(config.eval_k);
        epoch_logs.push(EpochLog {
            epoch,
            steps,
            mean_loss: loss_sum / steps as f64,
            val_ndcg,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });

        if val_ndcg > best_val {
            best_val = val_ndcg;
            best_epoch = epoch;
            best_state = state.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs > config.patience {
                break;
            }
        }
    }

    let train_seconds = started.elapsed().as_secs_f64();
    let state = best_state;
    let test_opts = EvalOptions {
        ks: vec![1, 5, 10],
        exclude_history: config.exclude_history,
        target: EvalTarget::Test,
        batch_size: config.s.max(1),
    };
    let test_metrics = evaluate(&state, &dataset.holdout, &test_opts)?;
    let analytic =
        analytic_estimate(&loss_spec, config.s, backbone_cfg.max_len, backbone_cfg.catalog);
    let n_epochs = epoch_logs.len().max(1);
    Ok(TrainResult {
        state,
        best_epoch,
        best_val_ndcg: best_val,
        test_metrics,
        peak_loss_elements,
        analytic_estimate: analytic,
        train_seconds,
        seconds_per_epoch: train_seconds / n_epochs as f64,
        epochs_to_best: best_epoch,
        epoch_logs,
        step_records,
    })
}
