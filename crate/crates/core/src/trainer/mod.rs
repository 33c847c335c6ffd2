//! Optimization, training loops, evaluation and the ablation harness.

mod ablation;
mod eval;
mod optim;

pub use ablation::{ablation_csv, run_ablation, AblationData, AblationRow, AblationSpec, FinetuneInit, ABLATION_CSV_HEADER};
pub use eval::{evaluate, rank_of, EvalMetrics, EvalOptions};
pub use optim::{
    adamw_step, clip_global_norm, dense_grads, global_norm, load_train_state, save_train_state, AdamWConfig,
    OptimizerState, Schedule, TrainState,
};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::data::{Dataset, Example};
use crate::model::{forward, save_checkpoint, Model};
use crate::objectives::{class_aux_loss, make_stm_batch, pretrain_loss, task_input, task_loss, MaskingConfig, Objectives, TaskTargets};
use crate::tensor::{Graph, Scalar, Var};
use crate::{Error, Result};

/// Independent seed for stream `tag`, item `index`.
pub fn stream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Full scale: 30 epochs, batch 128, warmup 3000, lr 1e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Data-order and corruption seed.
    pub seed: u64,
    /// `+`-separated subset of `mlm`, `mom`, `stm`.
    pub objectives: String,
    pub class_aux_weight: f64,
    pub eval_batch_size: usize,
    /// End this invocation after this many epochs; the schedule still spans
    /// `epochs`, so a later `--resume` continues it unchanged.
    pub stop_after: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 200,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            objectives: Objectives::ALL.label(),
            class_aux_weight: 1.0,
            eval_batch_size: 64,
            stop_after: None,
        }
    }
}

// Full scale: batch 64, lr 1e-4, warmup 5000 (grounding) / 2000 (QA), 30 to 100 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Share of the training split used, as a seeded subset.
    pub fraction: f64,
    pub text_lr_scale: f64,
    /// Weight of the anchor-localization term in QA.
    pub qa_lambda: f64,
    pub class_aux_weight: f64,
    pub eval_batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            fraction: 1.0,
            text_lr_scale: 0.1,
            qa_lambda: 1.0,
            class_aux_weight: 0.5,
            eval_batch_size: 64,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean differentiated loss over the epoch.
    pub loss: f64,
    /// Mean over the first and last tenth of the epoch's steps.
    pub loss_start: f64,
    pub loss_end: f64,
    pub mlm: Option<f64>,
    pub mom: Option<f64>,
    pub stm: Option<f64>,
    pub task_loss: Option<f64>,
    pub class_aux: f64,
    pub grad_norm: f64,
    pub eval: Option<EvalMetrics>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub steps: usize,
    pub state: TrainState,
}

/// Files a training run writes.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(Error::io(&root))?;
        Ok(Self { root })
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }

    pub fn train_state(&self) -> PathBuf {
        self.root.join("train_state.bin")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    fn save_epoch<T: Scalar>(&self, model: &Model<T>, state: &TrainState, record: &MetricsRecord) -> Result<()> {
        save_checkpoint(model, &self.checkpoint())?;
        save_train_state(state, &self.train_state())?;
        let path = self.metrics();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(Error::io(&path))?;
        let line = serde_json::to_string(record).expect("metrics serialize");
        writeln!(f, "{line}").map_err(Error::io(&path))
    }

    fn reset_metrics(&self) -> Result<()> {
        let path = self.metrics();
        fs::write(&path, "").map_err(Error::io(&path))
    }
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size.max(1))
}

/// Seeded subset of `round(fraction·n)` indices (at least one), in index order.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..n).collect();
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0xF4AC, 0));
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn epoch_order(items: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = items.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x0DE5, epoch as u64)));
    order
}

struct StepStats {
    objective: f64,
    grad_norm: f64,
}

/// Backward, clip, non-finite guard and AdamW update for one loss.
fn apply_step<T: Scalar>(
    model: &mut Model<T>,
    grads: crate::tensor::Gradients<T>,
    objective: f64,
    state: &mut TrainState,
    lr: f64,
    clip: f64,
    lr_scale: &dyn Fn(&str) -> f64,
) -> Result<StepStats> {
    if !objective.is_finite() {
        return Err(Error::Numeric(format!(
            "loss diverged ({objective}) at step {}; the last epoch checkpoint is the last good state",
            state.optimizer.t
        )));
    }
    let mut dense = dense_grads(&model.params, &grads);
    let grad_norm = clip_global_norm(&mut dense, clip);
    adamw_step(&mut model.params, &dense, &mut state.optimizer, lr, lr_scale)?;
    Ok(StepStats { objective, grad_norm })
}

fn new_graph<T: Scalar>(model: &Model<T>, seed: u64) -> Graph<'_, T> {
    let g = Graph::with_params(&model.params);
    if model.config.dropout > 0.0 {
        g.train_mode(seed)
    } else {
        g
    }
}

#[derive(Default)]
struct EpochAccumulator {
    objective: Vec<f64>,
    grad_norm: f64,
    mlm: f64,
    mom: f64,
    stm: f64,
    task: f64,
    aux: f64,
}

impl EpochAccumulator {
    fn record(&self, epoch: usize, step: usize, lr: f64, started: Instant) -> MetricsRecord {
        let n = self.objective.len().max(1) as f64;
        let tenth = (self.objective.len() / 10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        MetricsRecord {
            epoch,
            step,
            lr,
            loss: self.objective.iter().sum::<f64>() / n,
            loss_start: mean(&self.objective[..tenth.min(self.objective.len())]),
            loss_end: mean(&self.objective[self.objective.len().saturating_sub(tenth)..]),
            mlm: Some(self.mlm / n),
            mom: Some(self.mom / n),
            stm: Some(self.stm / n),
            task_loss: None,
            class_aux: self.aux / n,
            grad_norm: self.grad_norm / n,
            eval: None,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }
}

/// Pre-trains with the summed proxy losses. With `resume`, training continues
/// after `resume.epochs_done` epochs; the model must hold the matching weights.
pub fn pretrain<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &PretrainConfig,
    run: Option<&RunDir>,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("pre-training corpus is empty".into()));
    }
    if train.task != Task::Pretrain {
        return Err(Error::Data(format!("pre-training needs pretrain samples, got {}", train.task)));
    }
    let objectives = Objectives::parse(&cfg.objectives).map_err(Error::Config)?;
    let masking = MaskingConfig {
        text_ratio: model.config.text_mask_ratio,
        object_ratio: model.config.object_mask_ratio,
        negative_ratio: model.config.stm_negative_ratio,
    };
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let schedule = Schedule::fitted(cfg.warmup_steps, per_epoch * cfg.epochs, cfg.lr)?;
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = resume.unwrap_or_else(|| TrainState {
        epochs_done: 0,
        optimizer: OptimizerState::new(&model.params, adam),
    });
    if let (Some(run), 0) = (run, state.epochs_done) {
        run.reset_metrics()?;
    }
    let all: Vec<usize> = (0..train.len()).collect();
    let words = model.vocab.word_ids();
    let mut records = Vec::new();
    let started = Instant::now();
    let last = cfg.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in state.epochs_done..last {
        let order = epoch_order(&all, cfg.seed, epoch);
        let mut acc = EpochAccumulator::default();
        let mut lr = 0.0;
        for batch_idx in order.chunks(cfg.batch_size.max(1)) {
            let step = state.optimizer.t as usize;
            lr = schedule.lr_at(step);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0xBA7C, step as u64));
            let batch = make_stm_batch(batch_idx, &train.examples, &masking, objectives, words.clone(), &mut rng);
            let (grads, loss) = {
                let mut g = new_graph(model, stream_seed(cfg.seed, 0xD50, step as u64));
                let out = forward(&mut g, &model.config, &batch.input())?;
                let loss = pretrain_loss(&mut g, &out, &batch, objectives, cfg.class_aux_weight)?;
                let objective = g.scalar(loss.objective).as_f64();
                let grads = g.backward(loss.objective)?;
                (grads, (loss, objective))
            };
            let (loss, objective) = loss;
            let stats = apply_step(model, grads, objective, &mut state, lr, cfg.clip_norm, &|_| 1.0)?;
            acc.objective.push(stats.objective);
            acc.grad_norm += stats.grad_norm;
            acc.mlm += loss.mlm;
            acc.mom += loss.mom;
            acc.stm += loss.stm;
            acc.aux += loss.class_aux;
        }
        state.epochs_done = epoch + 1;
        let mut record = acc.record(epoch, state.optimizer.t as usize, lr, started);
        if let Some(eval) = eval {
            record.eval = Some(evaluate(model, eval, &EvalOptions::for_model(model, cfg.eval_batch_size))?);
        }
        log::info!(
            "pretrain epoch {epoch}: loss {:.4} (mlm {:.3} mom {:.3} stm {:.3}) {:.1}s",
            record.loss,
            record.mlm.unwrap_or(0.0),
            record.mom.unwrap_or(0.0),
            record.stm.unwrap_or(0.0),
            record.wall_time
        );
        if let Some(run) = run {
            run.save_epoch(model, &state, &record)?;
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        steps: state.optimizer.t as usize,
        state,
    })
}

/// Fine-tunes on one task with the task loss, the declared QA localization
/// term, and the point-class auxiliary.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &FinetuneConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome> {
    let task = train.task;
    if task == Task::Pretrain {
        return Err(Error::Config("fine-tuning task must be grounding, qa or caption".into()));
    }
    if train.is_empty() {
        return Err(Error::Data(format!("{task} training split is empty")));
    }
    if let Some(e) = eval {
        crate::data::check_disjoint(train, e)?;
    }
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {} outside (0, 1]", cfg.fraction)));
    }
    let subset = fraction_subset(train.len(), cfg.fraction, cfg.seed);
    let per_epoch = steps_per_epoch(subset.len(), cfg.batch_size);
    let schedule = Schedule::fitted(cfg.warmup_steps, per_epoch * cfg.epochs, cfg.lr)?;
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = TrainState {
        epochs_done: 0,
        optimizer: OptimizerState::new(&model.params, adam),
    };
    if let Some(run) = run {
        run.reset_metrics()?;
    }
    let text_scale = cfg.text_lr_scale;
    let lr_scale = move |name: &str| if name.starts_with("text.") { text_scale } else { 1.0 };
    let mut records = Vec::new();
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&subset, cfg.seed, epoch);
        let mut acc = EpochAccumulator::default();
        let mut lr = 0.0;
        for batch_idx in order.chunks(cfg.batch_size.max(1)) {
            let step = state.optimizer.t as usize;
            lr = schedule.lr_at(step);
            let ex: Vec<&Example> = batch_idx.iter().map(|&i| &train.examples[i]).collect();
            let targets = TaskTargets::from_annotations(task, ex.iter().map(|e| &e.annotation))?;
            let input = task_input(task, &ex, &targets);
            let (grads, objective, task_value, aux_value) = {
                let mut g = new_graph(model, stream_seed(cfg.seed, 0xD51, step as u64));
                let out = forward(&mut g, &model.config, &input)?;
                let l = task_loss(&mut g, &out, &input, &targets, cfg.qa_lambda)?;
                let aux = class_aux_loss(&mut g, &out)?;
                let weighted = g.scale(aux, cfg.class_aux_weight)?;
                let total: Var = g.add(l, weighted)?;
                let values = (g.scalar(total).as_f64(), g.scalar(l).as_f64(), g.scalar(aux).as_f64());
                (g.backward(total)?, values.0, values.1, values.2)
            };
            let stats = apply_step(model, grads, objective, &mut state, lr, cfg.clip_norm, &lr_scale)?;
            acc.objective.push(stats.objective);
            acc.grad_norm += stats.grad_norm;
            acc.task += task_value;
            acc.aux += aux_value;
        }
        state.epochs_done = epoch + 1;
        let mut record = acc.record(epoch, state.optimizer.t as usize, lr, started);
        let n = acc.objective.len().max(1) as f64;
        record.mlm = None;
        record.mom = None;
        record.stm = None;
        record.task_loss = Some(acc.task / n);
        if let Some(eval) = eval {
            record.eval = Some(evaluate(model, eval, &EvalOptions::for_model(model, cfg.eval_batch_size))?);
        }
        log::info!(
            "{task} epoch {epoch}: loss {:.4} {:.1}s{}",
            record.loss,
            record.wall_time,
            record
                .eval
                .as_ref()
                .and_then(|e| e.grounding_acc.or(e.em1).or(e.caption_acc))
                .map(|a| format!(" eval {a:.3}"))
                .unwrap_or_default()
        );
        if let Some(run) = run {
            run.save_epoch(model, &state, &record)?;
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        steps: state.optimizer.t as usize,
        state,
    })
}

/// Writes `text` to `path` atomically.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}
