use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::data::Dataset;
use crate::model::{Model, ModelConfig, TokenVocabulary};
use crate::objectives::Objectives;
use crate::tensor::Scalar;
use crate::{Error, Result};

use super::{evaluate, finetune, pretrain, stream_seed, EvalOptions, FinetuneConfig, PretrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneInit {
    Scratch,
    Pretrained,
}

impl FinetuneInit {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneInit::Scratch => "scratch",
            FinetuneInit::Pretrained => "pretrained",
        }
    }
}

impl std::str::FromStr for FinetuneInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scratch" => Ok(FinetuneInit::Scratch),
            "pretrained" => Ok(FinetuneInit::Pretrained),
            _ => Err(format!("unknown init {s:?} (scratch or pretrained)")),
        }
    }
}

/// The run matrix: every fusion depth × objective subset is pre-trained once,
/// then fine-tuned for every task × fraction × init × seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub fusion_depths: Vec<usize>,
    pub objective_sets: Vec<String>,
    pub tasks: Vec<Task>,
    pub fractions: Vec<f64>,
    pub inits: Vec<FinetuneInit>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            fusion_depths: vec![4],
            objective_sets: vec![Objectives::ALL.label()],
            tasks: vec![Task::Grounding],
            fractions: vec![1.0],
            inits: vec![FinetuneInit::Pretrained],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub fusion_layers: usize,
    /// `none` for scratch rows.
    pub objectives: String,
    pub task: Task,
    pub init: FinetuneInit,
    pub fraction: f64,
    pub seed: u64,
    pub grounding_acc: Option<f64>,
    pub em1: Option<f64>,
    pub em10: Option<f64>,
    pub caption_acc: Option<f64>,
    pub pretrain_stm_acc: Option<f64>,
    pub pretrain_mom_acc: Option<f64>,
}

pub const ABLATION_CSV_HEADER: &str =
    "fusion_layers,objectives,task,init,fraction,seed,grounding_acc,em1,em10,caption_acc,pretrain_stm_acc,pretrain_mom_acc";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.fusion_layers,
            self.objectives,
            self.task,
            self.init.name(),
            self.fraction,
            self.seed,
            cell(self.grounding_acc),
            cell(self.em1),
            cell(self.em10),
            cell(self.caption_acc),
            cell(self.pretrain_stm_acc),
            cell(self.pretrain_mom_acc),
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Everything an ablation run reads.
pub struct AblationData<'a> {
    pub vocab: &'a TokenVocabulary,
    pub classes: &'a [String],
    pub train: &'a BTreeMap<Task, Dataset>,
    pub eval: &'a BTreeMap<Task, Dataset>,
}

fn split<'a>(map: &'a BTreeMap<Task, Dataset>, task: Task, which: &str) -> Result<&'a Dataset> {
    map.get(&task)
        .ok_or_else(|| Error::Data(format!("no {task} {which} split for the ablation")))
}

#[allow(clippy::too_many_arguments)]
fn finetune_row<T: Scalar>(
    mut model: Model<T>,
    data: &AblationData<'_>,
    task: Task,
    fraction: f64,
    seed: u64,
    ft: &FinetuneConfig,
    mut row: AblationRow,
) -> Result<AblationRow> {
    let cfg = FinetuneConfig {
        fraction,
        seed,
        ..ft.clone()
    };
    let train = split(data.train, task, "train")?;
    let eval = split(data.eval, task, "eval")?;
    finetune(&mut model, train, None, &cfg, None)?;
    let m = evaluate(&model, eval, &EvalOptions::for_model(&model, cfg.eval_batch_size))?;
    row.grounding_acc = m.grounding_acc;
    row.em1 = m.em1;
    row.em10 = m.em10;
    row.caption_acc = m.caption_acc;
    Ok(row)
}

/// Runs the matrix and returns one row per (depth, objectives, task,
/// fraction, init, seed); scratch rows do not depend on the objective subset
/// and appear once per depth.
pub fn run_ablation<T: Scalar>(
    spec: &AblationSpec,
    base: &ModelConfig,
    model_seed: u64,
    data: &AblationData<'_>,
    pre: &PretrainConfig,
    ft: &FinetuneConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    for s in &spec.objective_sets {
        Objectives::parse(s).map_err(Error::Config)?;
    }
    let new_model = |depth: usize, seed: u64| {
        let config = ModelConfig {
            fusion_layers: depth,
            ..base.clone()
        };
        Model::<T>::new(config, data.vocab.clone(), data.classes.to_vec(), seed)
    };
    let mut rows = Vec::new();
    let mut push = |row: AblationRow, rows: &mut Vec<AblationRow>| {
        on_row(&row);
        rows.push(row);
    };
    for &depth in &spec.fusion_depths {
        if spec.inits.contains(&super::FinetuneInit::Scratch) {
            for &task in &spec.tasks {
                for &fraction in &spec.fractions {
                    for &seed in &spec.seeds {
                        let row = AblationRow {
                            fusion_layers: depth,
                            objectives: "none".into(),
                            task,
                            init: FinetuneInit::Scratch,
                            fraction,
                            seed,
                            grounding_acc: None,
                            em1: None,
                            em10: None,
                            caption_acc: None,
                            pretrain_stm_acc: None,
                            pretrain_mom_acc: None,
                        };
                        let model = new_model(depth, stream_seed(model_seed, 0x5C4A, seed))?;
                        let row = finetune_row(model, data, task, fraction, seed, ft, row)?;
                        push(row, &mut rows);
                    }
                }
            }
        }
        if !spec.inits.contains(&FinetuneInit::Pretrained) {
            continue;
        }
        for objectives in &spec.objective_sets {
            let mut model = new_model(depth, model_seed)?;
            let cfg = PretrainConfig {
                objectives: objectives.clone(),
                ..pre.clone()
            };
            let pre_train = split(data.train, Task::Pretrain, "train")?;
            let pre_eval = split(data.eval, Task::Pretrain, "eval")?;
            pretrain(&mut model, pre_train, None, &cfg, None, None)?;
            let pm = evaluate(&model, pre_eval, &EvalOptions::for_model(&model, cfg.eval_batch_size))?;
            for &task in &spec.tasks {
                for &fraction in &spec.fractions {
                    for &seed in &spec.seeds {
                        let row = AblationRow {
                            fusion_layers: depth,
                            objectives: Objectives::parse(objectives).map_err(Error::Config)?.label(),
                            task,
                            init: FinetuneInit::Pretrained,
                            fraction,
                            seed,
                            grounding_acc: None,
                            em1: None,
                            em10: None,
                            caption_acc: None,
                            pretrain_stm_acc: pm.stm_acc,
                            pretrain_mom_acc: pm.mom_acc,
                        };
                        let row = finetune_row(model.clone(), data, task, fraction, seed, ft, row)?;
                        push(row, &mut rows);
                    }
                }
            }
        }
    }
    Ok(rows)
}
