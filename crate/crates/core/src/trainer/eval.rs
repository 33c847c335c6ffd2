use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::data::{Dataset, Example};
use crate::model::{
    forward, grounding_logits, mlm_logits, mom_logits, qa_logits, stm_logits, ClassSource, Model, ModelInput,
    FusionOutput,
};
use crate::nn::argmax;
use crate::objectives::{caption_labels, mask_objects, mask_text, task_input, TaskTargets, IGNORE};
use crate::tensor::{Graph, Scalar};
use crate::Result;

use super::stream_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub classes: ClassSource,
    pub seed: u64,
    pub text_ratio: f64,
    pub object_ratio: f64,
}

impl EvalOptions {
    pub fn for_model<T: Scalar>(model: &Model<T>, batch_size: usize) -> Self {
        Self {
            batch_size,
            classes: ClassSource::Predicted,
            seed: 0x00E7A1,
            text_ratio: model.config.text_mask_ratio,
            object_ratio: model.config.object_mask_ratio,
        }
    }
}

/// Held-out metrics; fields not measured for a task are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub task: String,
    pub samples: usize,
    pub grounding_acc: Option<f64>,
    pub em1: Option<f64>,
    pub em10: Option<f64>,
    pub stm_acc: Option<f64>,
    pub mom_acc: Option<f64>,
    /// Accuracy of always answering the most frequent masked-object class.
    pub mom_majority: Option<f64>,
    pub mlm_acc: Option<f64>,
    pub caption_acc: Option<f64>,
    pub point_class_acc: Option<f64>,
}

/// Rank of `target` among `scores` (0 = best); ties resolve toward lower indices.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

fn values<T: Scalar>(g: &Graph<'_, T>, v: crate::tensor::Var) -> Vec<f64> {
    g.value(v).iter().map(|x| x.as_f64()).collect()
}

#[derive(Default)]
struct Tally {
    hit: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.hit += usize::from(hit);
        self.total += 1;
    }

    fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hit as f64 / self.total as f64)
    }
}

fn point_tally<T: Scalar>(g: &Graph<'_, T>, out: &FusionOutput, tally: &mut Tally, n_classes: usize) {
    for (row, &c) in values(g, out.point_logits).chunks(n_classes).zip(&out.true_classes) {
        tally.add(argmax(row) == c);
    }
}

fn draw_mismatch(data: &[Example], i: usize, rng: &mut impl Rng) -> Option<usize> {
    let scene = data[i].scene_id();
    if data.iter().all(|e| e.scene_id() == scene) {
        return None;
    }
    loop {
        let j = rng.gen_range(0..data.len());
        if data[j].scene_id() != scene {
            return Some(j);
        }
    }
}

fn evaluate_pretrain<T: Scalar>(model: &Model<T>, data: &[Example], opts: &EvalOptions) -> Result<EvalMetrics> {
    let cfg = &model.config;
    let (mut stm, mut mom, mut mlm, mut point) = (Tally::default(), Tally::default(), Tally::default(), Tally::default());
    let mut class_counts = vec![0usize; cfg.n_classes];
    for (chunk_no, chunk) in (0..data.len()).collect::<Vec<_>>().chunks(opts.batch_size.max(1)).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(opts.seed, 0xE1, chunk_no as u64));
        // matched pairs, masked as in training
        let mut input = ModelInput::new(
            chunk.iter().map(|&i| data[i].scene.clone()).collect(),
            Vec::with_capacity(chunk.len()),
        )
        .with_classes(opts.classes);
        let mut mlm_labels = Vec::new();
        let mut mom_labels = Vec::new();
        for &i in chunk {
            let (t, l) = mask_text(&data[i].text, opts.text_ratio, model.vocab.word_ids(), &mut rng);
            input.text.push(t);
            mlm_labels.push(l);
            let classes: Vec<usize> = data[i].scene.objects.iter().map(|o| o.class_id).collect();
            let (m, l) = mask_objects(&classes, opts.object_ratio, &mut rng);
            input.object_mask.push(m);
            mom_labels.push(l);
        }
        let mut g = Graph::with_params(&model.params);
        let out = forward(&mut g, cfg, &input)?;
        let s = stm_logits(&mut g, &out)?;
        for row in values(&g, s).chunks(2) {
            stm.add(argmax(row) == 1);
        }
        let mo = mom_logits(&mut g, &out)?;
        let mo = values(&g, mo);
        for (b, labels) in mom_labels.iter().enumerate() {
            for (i, &l) in labels.iter().enumerate() {
                if l != IGNORE {
                    let at = (b * out.max_objects + i) * cfg.n_classes;
                    mom.add(argmax(&mo[at..at + cfg.n_classes]) == l as usize);
                    class_counts[l as usize] += 1;
                }
            }
        }
        if let Some(ml) = mlm_logits(&mut g, &out)? {
            let ml = values(&g, ml);
            for (b, labels) in mlm_labels.iter().enumerate() {
                for (p, &l) in labels.iter().enumerate().skip(1) {
                    if l != IGNORE {
                        let at = (b * out.words + p - 1) * cfg.vocab_size;
                        mlm.add(argmax(&ml[at..at + cfg.vocab_size]) == l as usize);
                    }
                }
            }
        }
        point_tally(&g, &out, &mut point, cfg.n_classes);

        // mismatched pairs, corrupted the same way
        let mut neg = ModelInput::default().with_classes(opts.classes);
        for &i in chunk {
            let Some(j) = draw_mismatch(data, i, &mut rng) else { continue };
            let (scene, text) = if rng.gen_bool(0.5) { (j, i) } else { (i, j) };
            let (t, _) = mask_text(&data[text].text, opts.text_ratio, model.vocab.word_ids(), &mut rng);
            let classes: Vec<usize> = data[scene].scene.objects.iter().map(|o| o.class_id).collect();
            let (m, _) = mask_objects(&classes, opts.object_ratio, &mut rng);
            neg.scenes.push(data[scene].scene.clone());
            neg.text.push(t);
            neg.object_mask.push(m);
        }
        if !neg.is_empty() {
            let mut g = Graph::with_params(&model.params);
            let out = forward(&mut g, cfg, &neg)?;
            let s = stm_logits(&mut g, &out)?;
            for row in values(&g, s).chunks(2) {
                stm.add(argmax(row) == 0);
            }
        }
    }
    let masked: usize = class_counts.iter().sum();
    Ok(EvalMetrics {
        task: Task::Pretrain.to_string(),
        samples: data.len(),
        stm_acc: stm.rate(),
        mom_acc: mom.rate(),
        mom_majority: (masked > 0).then(|| *class_counts.iter().max().expect("nonempty") as f64 / masked as f64),
        mlm_acc: mlm.rate(),
        point_class_acc: point.rate(),
        ..Default::default()
    })
}

fn evaluate_task<T: Scalar>(model: &Model<T>, task: Task, data: &[Example], opts: &EvalOptions) -> Result<EvalMetrics> {
    let cfg = &model.config;
    let (mut top1, mut top10, mut tokens, mut point) = (Tally::default(), Tally::default(), Tally::default(), Tally::default());
    for chunk in data.chunks(opts.batch_size.max(1)) {
        let ex: Vec<&Example> = chunk.iter().collect();
        let targets = TaskTargets::from_annotations(task, ex.iter().map(|e| &e.annotation))?;
        let input = task_input(task, &ex, &targets).with_classes(opts.classes);
        let mut g = Graph::with_params(&model.params);
        let out = forward(&mut g, cfg, &input)?;
        point_tally(&g, &out, &mut point, cfg.n_classes);
        match &targets {
            TaskTargets::Grounding { targets } => {
                let l = grounding_logits(&mut g, &out)?;
                for (row, &t) in values(&g, l).chunks(out.max_objects).zip(targets) {
                    top1.add(argmax(row) == t);
                }
            }
            TaskTargets::Qa { answers, .. } => {
                let l = qa_logits(&mut g, &out)?;
                for (row, &a) in values(&g, l).chunks(cfg.n_answers).zip(answers) {
                    let r = rank_of(row, a);
                    top1.add(r == 0);
                    top10.add(r < 10);
                }
            }
            TaskTargets::Caption { .. } => {
                if let Some(l) = mlm_logits(&mut g, &out)? {
                    let labels = caption_labels(&input.text, out.words);
                    for (row, &l) in values(&g, l).chunks(cfg.vocab_size).zip(&labels) {
                        if l != IGNORE {
                            tokens.add(argmax(row) == l as usize);
                        }
                    }
                }
            }
        }
    }
    let mut m = EvalMetrics {
        task: task.to_string(),
        samples: data.len(),
        point_class_acc: point.rate(),
        ..Default::default()
    };
    match task {
        Task::Grounding => m.grounding_acc = top1.rate(),
        Task::Qa => {
            m.em1 = top1.rate();
            m.em10 = top10.rate();
        }
        Task::Caption => m.caption_acc = tokens.rate(),
        Task::Pretrain => unreachable!("handled by evaluate_pretrain"),
    }
    Ok(m)
}

/// Metrics of `model` on a held-out dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, opts: &EvalOptions) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(crate::Error::Data("evaluation split is empty".into()));
    }
    match data.task {
        Task::Pretrain => evaluate_pretrain(model, &data.examples, opts),
        task => evaluate_task(model, task, &data.examples, opts),
    }
}
