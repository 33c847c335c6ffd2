//! Encoded training examples: prepared scenes plus token ids.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::corpus::{build_samples, generate_scenes, read_corpus, Annotation, CorpusConfig, ScenePair, Task};
use crate::model::{PlanCache, PreparedScene, TokenVocabulary};
use crate::point_encoder::PointEncoderConfig;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Example {
    pub scene: Arc<PreparedScene>,
    /// `[CLS]` first.
    pub text: Vec<usize>,
    pub annotation: Annotation,
}

impl Example {
    pub fn scene_id(&self) -> u64 {
        self.scene.scene_id
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn scene_ids(&self) -> BTreeSet<u64> {
        self.examples.iter().map(Example::scene_id).collect()
    }

    /// Mean object count over distinct scenes.
    pub fn mean_objects(&self) -> f64 {
        let mut seen = BTreeSet::new();
        let mut total = 0usize;
        for e in &self.examples {
            if seen.insert(e.scene_id()) {
                total += e.scene.len();
            }
        }
        total as f64 / seen.len().max(1) as f64
    }
}

pub fn split_path(dir: &Path, task: Task, split: &str) -> PathBuf {
    dir.join(format!("{task}_{split}.jsonl"))
}

/// Vocabulary over the training files of every task present in `dir`, so
/// a pre-trained checkpoint covers all fine-tuning vocabularies.
pub fn build_vocabulary(dir: &Path, config: &CorpusConfig) -> Result<TokenVocabulary> {
    let mut texts = Vec::new();
    for task in Task::ALL {
        let path = split_path(dir, task, "train");
        if path.exists() {
            texts.extend(read_corpus(&path, config)?.into_iter().map(|p| p.text));
        }
    }
    if texts.is_empty() {
        return Err(Error::Data(format!("no training files in {}", dir.display())));
    }
    Ok(TokenVocabulary::build(texts.iter().map(String::as_str)))
}

/// Encodes pairs; consecutive pairs over an identical scene share one prepared scene.
pub fn encode_pairs(
    task: Task,
    pairs: Vec<ScenePair>,
    vocab: &TokenVocabulary,
    max_text_len: usize,
    cache: &mut PlanCache,
) -> Result<Dataset> {
    let mut examples = Vec::with_capacity(pairs.len());
    let mut last: Option<(crate::corpus::Scene, Arc<PreparedScene>)> = None;
    for pair in pairs {
        if pair.task != task {
            return Err(Error::Data(format!("expected {task} samples, found {}", pair.task)));
        }
        let scene = match &last {
            Some((s, p)) if *s == pair.scene => p.clone(),
            _ => {
                let p = Arc::new(cache.prepare(&pair.scene)?);
                last = Some((pair.scene.clone(), p.clone()));
                p
            }
        };
        examples.push(Example {
            scene,
            text: vocab.encode(&pair.text, max_text_len),
            annotation: pair.annotation,
        });
    }
    Ok(Dataset { task, examples })
}

pub fn load_dataset(
    path: &Path,
    task: Task,
    corpus: &CorpusConfig,
    vocab: &TokenVocabulary,
    max_text_len: usize,
    cache: &mut PlanCache,
) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Data(format!("missing corpus file {}", path.display())));
    }
    let pairs = read_corpus(path, corpus)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("{} holds no samples", path.display())));
    }
    encode_pairs(task, pairs, vocab, max_text_len, cache)
}

/// Train and eval splits must not share a scene.
pub fn check_disjoint(train: &Dataset, eval: &Dataset) -> Result<()> {
    let train_ids = train.scene_ids();
    let shared: Vec<u64> = eval.scene_ids().intersection(&train_ids).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "evaluation split shares {} scene ids with the training split (first: {})",
            shared.len(),
            shared[0]
        )))
    }
}

/// Train/eval datasets for every task, generated without touching disk.
#[derive(Debug, Clone)]
pub struct InMemoryCorpus {
    pub vocab: TokenVocabulary,
    pub classes: Vec<String>,
    pub train: BTreeMap<Task, Dataset>,
    pub eval: BTreeMap<Task, Dataset>,
}

pub fn in_memory_corpus(
    seed: u64,
    n_scenes: usize,
    corpus: &CorpusConfig,
    max_text_len: usize,
    point: PointEncoderConfig,
) -> Result<InMemoryCorpus> {
    let scenes = generate_scenes(seed, n_scenes, corpus)?;
    let samples = build_samples(seed, &scenes, corpus);
    let mut splits: BTreeMap<Task, (Vec<ScenePair>, Vec<ScenePair>)> = BTreeMap::new();
    for (task, pairs) in samples {
        let entry = splits.entry(task).or_default();
        for p in pairs {
            if corpus.is_eval_scene(p.scene.scene_id) {
                entry.1.push(p);
            } else {
                entry.0.push(p);
            }
        }
    }
    let vocab = TokenVocabulary::build(splits.values().flat_map(|(t, _)| t.iter().map(|p| p.text.as_str())));
    let mut cache = PlanCache::new(point);
    let mut train = BTreeMap::new();
    let mut eval = BTreeMap::new();
    for (task, (t, e)) in splits {
        train.insert(task, encode_pairs(task, t, &vocab, max_text_len, &mut cache)?);
        eval.insert(task, encode_pairs(task, e, &vocab, max_text_len, &mut cache)?);
    }
    Ok(InMemoryCorpus {
        vocab,
        classes: corpus.classes.iter().map(|c| c.name.clone()).collect(),
        train,
        eval,
    })
}
