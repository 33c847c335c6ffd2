//! Pre-training corruption (masked words, masked objects, mismatched pairs),
//! the summed pre-training loss, and the fine-tuning losses.

use std::ops::Range;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Annotation, Task};
use crate::data::Example;
use crate::model::{
    grounding_logits, mlm_logits, mom_logits, qa_logits, stm_logits, FusionOutput, ModelInput, PreparedScene,
    CLS, EOS, MASK, PAD, SOS,
};
use crate::tensor::{Graph, Result, Scalar, Var};
use crate::transformer::MaskMode;

pub const IGNORE: i64 = -1;

/// Which pre-training proxies are active. Excluded ones contribute 0 and
/// their corruption is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objectives {
    pub mlm: bool,
    pub mom: bool,
    pub stm: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Self::ALL
    }
}

impl Objectives {
    pub const ALL: Self = Self {
        mlm: true,
        mom: true,
        stm: true,
    };

    /// Parses a `+`-separated subset such as `mlm+mom`.
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let mut out = Self {
            mlm: false,
            mom: false,
            stm: false,
        };
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "mlm" => out.mlm = true,
                "mom" => out.mom = true,
                "stm" => out.stm = true,
                other => return Err(format!("unknown objective {other:?}")),
            }
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.mlm, "mlm"), (self.mom, "mom"), (self.stm, "stm")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub text_ratio: f64,
    pub object_ratio: f64,
    pub negative_ratio: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            text_ratio: 0.15,
            object_ratio: 0.10,
            negative_ratio: 0.30,
        }
    }
}

pub fn is_text_candidate(id: usize) -> bool {
    !matches!(id, CLS | PAD | SOS | EOS)
}

/// Bernoulli selection of word positions; selected positions become
/// `[MASK]` (80%), a random word (10%) or stay (10%).
pub fn mask_text(ids: &[usize], ratio: f64, words: Range<usize>, rng: &mut impl Rng) -> (Vec<usize>, Vec<i64>) {
    let mut out = ids.to_vec();
    let mut labels = vec![IGNORE; ids.len()];
    for (p, &id) in ids.iter().enumerate() {
        if !is_text_candidate(id) || !rng.gen_bool(ratio) {
            continue;
        }
        labels[p] = id as i64;
        let r: f64 = rng.gen();
        if r < 0.8 {
            out[p] = MASK;
        } else if r < 0.9 && !words.is_empty() {
            out[p] = rng.gen_range(words.clone());
        }
    }
    (out, labels)
}

/// Independent Bernoulli selection of `n` objects.
pub fn select_objects(n: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(ratio)).collect()
}

/// [`select_objects`] redrawn until at least one object is selected.
pub fn mask_objects(classes: &[usize], ratio: f64, rng: &mut impl Rng) -> (Vec<bool>, Vec<i64>) {
    let n = classes.len();
    let flags = if n == 0 || ratio <= 0.0 {
        vec![false; n]
    } else {
        loop {
            let f = select_objects(n, ratio, rng);
            if f.iter().any(|&x| x) {
                break f;
            }
        }
    };
    let labels = flags
        .iter()
        .zip(classes)
        .map(|(&m, &c)| if m { c as i64 } else { IGNORE })
        .collect();
    (flags, labels)
}

/// `floor(ratio·b)`, robust to the binary representation of `ratio`.
pub fn negative_count(b: usize, ratio: f64) -> usize {
    if b < 2 {
        return 0;
    }
    ((ratio * b as f64) + 1e-9).floor() as usize
}

/// A corrupted pre-training batch. Label vectors follow the text and object
/// layouts of `text` and `scenes`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub scenes: Vec<Arc<PreparedScene>>,
    pub text: Vec<Vec<usize>>,
    pub mlm_labels: Vec<Vec<i64>>,
    pub object_mask: Vec<Vec<bool>>,
    pub mom_labels: Vec<Vec<i64>>,
    /// 1 matched, 0 mismatched.
    pub stm_labels: Vec<i64>,
    pub is_negative: Vec<bool>,
    /// Dataset index each sample was drawn from.
    pub source: Vec<usize>,
    /// For negatives, the dataset index that supplied the swapped scene or text.
    pub partner: Vec<Option<usize>>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn input(&self) -> ModelInput {
        ModelInput {
            scenes: self.scenes.clone(),
            text: self.text.clone(),
            object_mask: self.object_mask.clone(),
            mode: MaskMode::Bidirectional,
            ..Default::default()
        }
    }

    /// Checks the label/flag invariants; returns a description of the first violation.
    pub fn check(&self) -> std::result::Result<(), String> {
        for s in 0..self.len() {
            if self.stm_labels[s] != i64::from(!self.is_negative[s]) {
                return Err(format!("sample {s}: stm label disagrees with negative flag"));
            }
            if self.object_mask[s].len() != self.scenes[s].len() || self.mom_labels[s].len() != self.scenes[s].len() {
                return Err(format!("sample {s}: object layout mismatch"));
            }
            for (i, (&m, &l)) in self.object_mask[s].iter().zip(&self.mom_labels[s]).enumerate() {
                if self.is_negative[s] {
                    continue;
                }
                if m != (l != IGNORE) {
                    return Err(format!("sample {s} object {i}: mask flag and label disagree"));
                }
                if m && l != self.scenes[s].objects[i].class_id as i64 {
                    return Err(format!("sample {s} object {i}: label is not the true class"));
                }
            }
            if self.mlm_labels[s].len() != self.text[s].len() {
                return Err(format!("sample {s}: text layout mismatch"));
            }
            if self.is_negative[s]
                && (self.mlm_labels[s].iter().any(|&l| l != IGNORE) || self.mom_labels[s].iter().any(|&l| l != IGNORE))
            {
                return Err(format!("sample {s}: negative carries masked-modeling labels"));
            }
        }
        Ok(())
    }
}

fn draw_other(n: usize, original: usize, data: &[Example], rng: &mut impl Rng) -> usize {
    // prefer a different scene, so a swapped pair is really mismatched
    let scene = data[original].scene_id();
    if data.iter().any(|e| e.scene_id() != scene) {
        loop {
            let j = rng.gen_range(0..n);
            if data[j].scene_id() != scene {
                return j;
            }
        }
    }
    let j = rng.gen_range(0..n - 1);
    if j >= original {
        j + 1
    } else {
        j
    }
}

/// Builds one corrupted batch from dataset indices: `floor(0.3·B)` negatives
/// (scene or text swapped by a fair coin), then word and object masking on
/// every sample. Only positives keep masked-modeling labels.
pub fn make_stm_batch(
    indices: &[usize],
    data: &[Example],
    masking: &MaskingConfig,
    objectives: Objectives,
    words: Range<usize>,
    rng: &mut impl Rng,
) -> MaskedBatch {
    let b = indices.len();
    let mut scenes: Vec<Arc<PreparedScene>> = indices.iter().map(|&i| data[i].scene.clone()).collect();
    let mut text: Vec<Vec<usize>> = indices.iter().map(|&i| data[i].text.clone()).collect();
    let mut is_negative = vec![false; b];
    let mut partner = vec![None; b];
    if objectives.stm && data.len() > 1 {
        for s in sample(rng, b, negative_count(b, masking.negative_ratio)).into_vec() {
            let other = draw_other(data.len(), indices[s], data, rng);
            if rng.gen_bool(0.5) {
                scenes[s] = data[other].scene.clone();
            } else {
                text[s] = data[other].text.clone();
            }
            is_negative[s] = true;
            partner[s] = Some(other);
        }
    }
    let mut mlm_labels = Vec::with_capacity(b);
    let mut object_mask = Vec::with_capacity(b);
    let mut mom_labels = Vec::with_capacity(b);
    // Negatives are corrupted like positives, so the corruption itself says
    // nothing about the match label; only their MLM/MOM labels are dropped.
    for s in 0..b {
        let n = scenes[s].len();
        let (mut tl, mut m, mut ml) = (vec![IGNORE; text[s].len()], vec![false; n], vec![IGNORE; n]);
        if objectives.mlm {
            let (t, l) = mask_text(&text[s], masking.text_ratio, words.clone(), rng);
            text[s] = t;
            tl = l;
        }
        if objectives.mom {
            let classes: Vec<usize> = scenes[s].objects.iter().map(|o| o.class_id).collect();
            (m, ml) = mask_objects(&classes, masking.object_ratio, rng);
        }
        if is_negative[s] {
            tl.fill(IGNORE);
            ml.fill(IGNORE);
        }
        mlm_labels.push(tl);
        object_mask.push(m);
        mom_labels.push(ml);
    }
    MaskedBatch {
        scenes,
        text,
        mlm_labels,
        object_mask,
        mom_labels,
        stm_labels: is_negative.iter().map(|&n| i64::from(!n)).collect(),
        is_negative,
        source: indices.to_vec(),
        partner,
    }
}

/// Flattens per-sample labels to `[B·width]`, skipping `offset` leading entries
/// and padding with [`IGNORE`].
pub fn pad_labels(labels: &[Vec<i64>], offset: usize, width: usize) -> Vec<i64> {
    let mut out = vec![IGNORE; labels.len() * width];
    for (s, l) in labels.iter().enumerate() {
        for (p, &v) in l.iter().skip(offset).take(width).enumerate() {
            out[s * width + p] = v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainLoss {
    /// `mlm + mom + stm` on the graph.
    pub total: Var,
    /// `total + class_aux_weight · class_aux`; this is what gets differentiated.
    pub objective: Var,
    pub mlm: f64,
    pub mom: f64,
    pub stm: f64,
    pub class_aux: f64,
}

impl PretrainLoss {
    pub fn total_value(&self) -> f64 {
        self.mlm + self.mom + self.stm
    }
}

/// Mean CE of the point-encoder class logits against ground truth.
pub fn class_aux_loss<T: Scalar>(g: &mut Graph<'_, T>, out: &FusionOutput) -> Result<Var> {
    let labels: Vec<i64> = out.true_classes.iter().map(|&c| c as i64).collect();
    g.cross_entropy(out.point_logits, &labels)
}

fn zero<T: Scalar>(g: &mut Graph<'_, T>) -> Result<Var> {
    g.constant(&[], vec![T::zero()])
}

/// Sum of the three proxy losses; inactive objectives are the constant 0.
pub fn pretrain_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    out: &FusionOutput,
    batch: &MaskedBatch,
    objectives: Objectives,
    class_aux_weight: f64,
) -> Result<PretrainLoss> {
    let mlm = match mlm_logits(g, out)? {
        Some(logits) if objectives.mlm => {
            let labels = pad_labels(&batch.mlm_labels, 1, out.words);
            g.cross_entropy(logits, &labels)?
        }
        _ => zero(g)?,
    };
    let mom = if objectives.mom {
        let logits = mom_logits(g, out)?;
        g.cross_entropy(logits, &pad_labels(&batch.mom_labels, 0, out.max_objects))?
    } else {
        zero(g)?
    };
    let stm = if objectives.stm {
        let logits = stm_logits(g, out)?;
        g.cross_entropy(logits, &batch.stm_labels)?
    } else {
        zero(g)?
    };
    let partial = g.add(mlm, mom)?;
    let total = g.add(partial, stm)?;
    let aux = class_aux_loss(g, out)?;
    let weighted = g.scale(aux, class_aux_weight)?;
    let objective = g.add(total, weighted)?;
    Ok(PretrainLoss {
        total,
        objective,
        mlm: g.scalar(mlm).as_f64(),
        mom: g.scalar(mom).as_f64(),
        stm: g.scalar(stm).as_f64(),
        class_aux: g.scalar(aux).as_f64(),
    })
}

/// Supervision for one fine-tuning batch.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskTargets {
    Grounding { targets: Vec<usize> },
    Qa { answers: Vec<usize>, anchors: Vec<usize> },
    Caption { objects: Vec<usize> },
}

impl TaskTargets {
    pub fn from_annotations<'a>(
        task: Task,
        annotations: impl IntoIterator<Item = &'a Annotation>,
    ) -> crate::Result<Self> {
        let mismatch = |a: &Annotation| crate::Error::Data(format!("{task} batch holds a {} annotation", a.task()));
        let mut out = match task {
            Task::Grounding => TaskTargets::Grounding { targets: Vec::new() },
            Task::Qa => TaskTargets::Qa {
                answers: Vec::new(),
                anchors: Vec::new(),
            },
            Task::Caption => TaskTargets::Caption { objects: Vec::new() },
            Task::Pretrain => return Err(crate::Error::Config("pretrain is not a fine-tuning task".into())),
        };
        for a in annotations {
            match (&mut out, a) {
                (TaskTargets::Grounding { targets }, Annotation::Grounding { target, .. }) => targets.push(*target),
                (TaskTargets::Qa { answers, anchors }, Annotation::Qa { answer, anchor, .. }) => {
                    answers.push(*answer);
                    anchors.push(*anchor);
                }
                (TaskTargets::Caption { objects }, Annotation::Caption { object }) => objects.push(*object),
                _ => return Err(mismatch(a)),
            }
        }
        Ok(out)
    }
}

fn as_labels(v: &[usize]) -> Vec<i64> {
    v.iter().map(|&x| x as i64).collect()
}

pub fn grounding_loss<T: Scalar>(g: &mut Graph<'_, T>, out: &FusionOutput, targets: &[usize]) -> Result<Var> {
    let logits = grounding_logits(g, out)?;
    g.cross_entropy(logits, &as_labels(targets))
}

#[derive(Debug, Clone, Copy)]
pub struct QaLoss {
    pub total: Var,
    pub answer: Var,
    pub localization: Var,
}

/// Answer CE plus `lambda` times grounding CE on the question's anchor object.
pub fn qa_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    out: &FusionOutput,
    answers: &[usize],
    anchors: &[usize],
    lambda: f64,
) -> Result<QaLoss> {
    let logits = qa_logits(g, out)?;
    let answer = g.cross_entropy(logits, &as_labels(answers))?;
    let localization = if lambda != 0.0 {
        grounding_loss(g, out, anchors)?
    } else {
        zero(g)?
    };
    let weighted = g.scale(localization, lambda)?;
    let total = g.add(answer, weighted)?;
    Ok(QaLoss {
        total,
        answer,
        localization,
    })
}

/// Next-token labels for the text outputs of a teacher-forced caption batch:
/// output position `p` (token `p + 1`) predicts token `p + 2`.
pub fn caption_labels(text: &[Vec<usize>], words: usize) -> Vec<i64> {
    let shifted: Vec<Vec<i64>> = text
        .iter()
        .map(|t| t.iter().skip(2).map(|&id| if id == PAD { IGNORE } else { id as i64 }).collect())
        .collect();
    pad_labels(&shifted, 0, words)
}

pub fn caption_loss<T: Scalar>(g: &mut Graph<'_, T>, out: &FusionOutput, text: &[Vec<usize>]) -> Result<Var> {
    match mlm_logits(g, out)? {
        Some(logits) => g.cross_entropy(logits, &caption_labels(text, out.words)),
        None => zero(g),
    }
}

/// The model input for a fine-tuning batch of `task`.
pub fn task_input(task: Task, examples: &[&Example], targets: &TaskTargets) -> ModelInput {
    let mut input = ModelInput::new(
        examples.iter().map(|e| e.scene.clone()).collect(),
        examples.iter().map(|e| e.text.clone()).collect(),
    );
    if let (Task::Caption, TaskTargets::Caption { objects }) = (task, targets) {
        input.mode = MaskMode::Caption;
        input.caption_target = objects.iter().map(|&o| Some(o)).collect();
    }
    input
}

/// Task loss for a fine-tuning batch.
pub fn task_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    out: &FusionOutput,
    input: &ModelInput,
    targets: &TaskTargets,
    qa_lambda: f64,
) -> Result<Var> {
    match targets {
        TaskTargets::Grounding { targets } => grounding_loss(g, out, targets),
        TaskTargets::Qa { answers, anchors } => Ok(qa_loss(g, out, answers, anchors, qa_lambda)?.total),
        TaskTargets::Caption { .. } => caption_loss(g, out, &input.text),
    }
}
