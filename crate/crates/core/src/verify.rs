//! Gradient checks of every loss head on a tiny 64-bit model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Bounds, CorpusConfig, Task};
use crate::data::{in_memory_corpus, Example, InMemoryCorpus};
use crate::model::{forward, Model, ModelConfig};
use crate::objectives::{make_stm_batch, pretrain_loss, task_input, task_loss, MaskingConfig, Objectives, TaskTargets};
use crate::tensor::{grad_check, Result as TensorResult, GradCheckConfig, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::Result;

/// Small scenes in a small room, so every scene yields samples.
pub fn tiny_corpus_config() -> CorpusConfig {
    CorpusConfig {
        objects_per_scene: (2, 3),
        samples_per_scene: 2,
        bounds: Bounds {
            min: [0.0; 3],
            max: [3.0, 3.0, 2.0],
        },
        ..Default::default()
    }
}

pub fn tiny_corpus(seed: u64, scenes: usize) -> Result<InMemoryCorpus> {
    let cfg = ModelConfig::tiny(0, 0);
    in_memory_corpus(seed, scenes, &tiny_corpus_config(), cfg.max_text_len, cfg.point_config())
}

/// The tiny model (d=8, 2 heads, one layer per stack, M=5, N=3) with its
/// point-encoder biases moved off the ReLU kink.
pub fn tiny_model(corpus: &InMemoryCorpus, seed: u64) -> Result<Model<f64>> {
    let mut m = Model::new(ModelConfig::tiny(0, 0), corpus.vocab.clone(), corpus.classes.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        let name = m.params.name(id).to_string();
        if name.starts_with("point.") && name.ends_with(".bias") {
            for x in m.params.get_mut(id).data_mut() {
                *x = rng.gen_range(0.05..0.3);
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub tolerance: f64,
    pub step: f64,
    pub max_elements_per_param: Option<usize>,
    pub negate_param: Option<String>,
    pub seed: u64,
    pub batch: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            step: 1e-5,
            max_elements_per_param: None,
            negate_param: None,
            seed: 0,
            batch: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub loss: String,
    pub report: GradCheckReport,
}

type Primitive = fn(&mut Graph<'_, f64>) -> TensorResult<Var>;

fn p(g: &mut Graph<'_, f64>, name: &str) -> TensorResult<Var> {
    g.param_by_name(name)
}

/// Every differentiable op, each on small random operands.
fn primitives() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, Primitive)> {
    vec![
        ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 5])], |g| {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            Ok(g.matmul(a, b)?)
        }),
        ("matmul batched", vec![("a", vec![2, 3, 4]), ("b", vec![2, 4, 5])], |g| {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            Ok(g.matmul(a, b)?)
        }),
        ("matmul shared rhs", vec![("a", vec![2, 3, 4]), ("b", vec![4, 5])], |g| {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            Ok(g.matmul(a, b)?)
        }),
        ("add", vec![("a", vec![3, 4]), ("b", vec![4])], |g| {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            Ok(g.add(a, b)?)
        }),
        ("mul", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |g| {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            Ok(g.mul(a, b)?)
        }),
        ("scale", vec![("a", vec![3, 4])], |g| {
            let a = p(g, "a")?;
            Ok(g.scale(a, -0.7)?)
        }),
        ("concat", vec![("a", vec![2, 3]), ("b", vec![2, 2])], |g| {
            let (a, b) = (p(g, "a")?, p(g, "b")?);
            Ok(g.concat(&[a, b], 1)?)
        }),
        ("slice", vec![("a", vec![3, 5])], |g| {
            let a = p(g, "a")?;
            Ok(g.slice(a, 1, 1, 3)?)
        }),
        ("transpose", vec![("a", vec![2, 3, 4])], |g| {
            let a = p(g, "a")?;
            Ok(g.transpose(a)?)
        }),
        ("reshape", vec![("a", vec![3, 4])], |g| {
            let a = p(g, "a")?;
            Ok(g.reshape(a, &[2, 6])?)
        }),
        ("softmax", vec![("a", vec![3, 5])], |g| {
            let a = p(g, "a")?;
            Ok(g.softmax(a)?)
        }),
        ("masked_fill", vec![("a", vec![3, 4])], |g| {
            let a = p(g, "a")?;
            let mask: Vec<bool> = (0..12).map(|i| i % 4 == 3 || i == 5).collect();
            let m = g.masked_fill(a, &mask)?;
            Ok(g.softmax(m)?)
        }),
        ("layer_norm", vec![("a", vec![3, 6]), ("gain", vec![6]), ("bias", vec![6])], |g| {
            let (a, w, b) = (p(g, "a")?, p(g, "gain")?, p(g, "bias")?);
            Ok(g.layer_norm(a, w, b)?)
        }),
        ("gelu", vec![("a", vec![3, 4])], |g| {
            let a = p(g, "a")?;
            Ok(g.gelu(a)?)
        }),
        ("relu", vec![("a", vec![3, 4])], |g| {
            let a = p(g, "a")?;
            Ok(g.relu(a)?)
        }),
        ("sigmoid", vec![("a", vec![3, 4])], |g| {
            let a = p(g, "a")?;
            Ok(g.sigmoid(a)?)
        }),
        ("log_sigmoid", vec![("a", vec![3, 4])], |g| {
            let a = p(g, "a")?;
            Ok(g.log_sigmoid(a)?)
        }),
        ("gather", vec![("a", vec![5, 3])], |g| {
            let a = p(g, "a")?;
            Ok(g.gather(a, &[0, 2, 2, 4])?)
        }),
        ("cross_entropy", vec![("a", vec![4, 5])], |g| {
            let a = p(g, "a")?;
            Ok(g.cross_entropy(a, &[1, -1, 3, 0])?)
        }),
        ("sum", vec![("a", vec![3, 4])], |g| {
            let a = p(g, "a")?;
            Ok(g.sum(a)?)
        }),
        ("mean", vec![("a", vec![3, 4])], |g| {
            let a = p(g, "a")?;
            Ok(g.mean(a)?)
        }),
        ("max_axis", vec![("a", vec![3, 4, 5])], |g| {
            let a = p(g, "a")?;
            Ok(g.max_axis(a, 1)?)
        }),
    ]
}

/// Gradient checks of each primitive, reduced to a scalar by a fixed random
/// weighting. Operands are kept at least 0.2 away from zero.
pub fn primitive_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let cfg = GradCheckConfig {
        tolerance: opts.tolerance,
        step: opts.step,
        max_elements_per_param: opts.max_elements_per_param,
        seed: opts.seed,
        negate_param: opts.negate_param.clone(),
    };
    let mut out = Vec::new();
    for (k, (name, operands, op)) in primitives().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (k as u64).wrapping_mul(0x9E37_79B9));
        let mut store = ParamStore::new();
        for (pname, shape) in operands {
            let t = Tensor::from_fn(&shape, |_| {
                let m: f64 = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            store.insert(pname, t)?;
        }
        let weight_seed = rng.gen::<u64>();
        let report = grad_check(
            &mut store,
            |g| {
                let y = op(g)?;
                let shape = g.shape(y).to_vec();
                let n = g.value(y).len();
                let mut r = ChaCha8Rng::seed_from_u64(weight_seed);
                let w = g.constant(&shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?;
                let y = g.mul(y, w)?;
                g.sum(y)
            },
            &cfg,
        )?;
        out.push(SuiteEntry {
            loss: name.to_string(),
            report,
        });
    }
    Ok(out)
}

/// Checks the summed pre-training loss and each fine-tuning loss.
pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let corpus = tiny_corpus(opts.seed, 12)?;
    let cfg = GradCheckConfig {
        tolerance: opts.tolerance,
        step: opts.step,
        max_elements_per_param: opts.max_elements_per_param,
        seed: opts.seed,
        negate_param: opts.negate_param.clone(),
    };
    let mut out = Vec::new();

    let mut model = tiny_model(&corpus, opts.seed)?;
    let data = &corpus.train[&Task::Pretrain].examples;
    let idx: Vec<usize> = (0..opts.batch.max(2).min(data.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batch = make_stm_batch(&idx, data, &MaskingConfig::default(), Objectives::ALL, corpus.vocab.word_ids(), &mut rng);
    let config = model.config.clone();
    let report = grad_check(
        &mut model.params,
        |g| {
            let out = forward(g, &config, &batch.input())?;
            Ok(pretrain_loss(g, &out, &batch, Objectives::ALL, 1.0)?.total)
        },
        &cfg,
    )?;
    out.push(SuiteEntry {
        loss: "pretrain mlm+mom+stm".into(),
        report,
    });

    for task in [Task::Grounding, Task::Qa, Task::Caption] {
        let mut model = tiny_model(&corpus, opts.seed)?;
        let ex: Vec<&Example> = corpus.train[&task].examples.iter().take(opts.batch.max(1)).collect();
        let targets = TaskTargets::from_annotations(task, ex.iter().map(|e| &e.annotation))?;
        let input = task_input(task, &ex, &targets);
        let config = model.config.clone();
        let report = grad_check(
            &mut model.params,
            |g| {
                let out = forward(g, &config, &input)?;
                let l = task_loss(g, &out, &input, &targets, 1.0)?;
                let aux = crate::objectives::class_aux_loss(g, &out)?;
                let aux = g.scale(aux, 0.5)?;
                g.add(l, aux)
            },
            &cfg,
        )?;
        out.push(SuiteEntry {
            loss: task.to_string(),
            report,
        });
    }
    Ok(out)
}
