use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    compute_relations, generate_scene, make_task_samples, replace_objects, Annotation, Bounds,
    CorpusConfig, CorpusError, ObjectInstance, ObjectLibrary, Relation, Scene, ScenePair, ShapeKind,
    Task,
};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn vec3(v: [f64; 3]) -> String {
    format!("[{:.6},{:.6},{:.6}]", v[0], v[1], v[2])
}

fn opt_index(v: Option<usize>) -> String {
    v.map_or("null".into(), |i| i.to_string())
}

fn relation_json(r: Relation) -> String {
    serde_json::to_string(&r).expect("relations always serialize")
}

fn annotation_json(a: &Annotation, config: &CorpusConfig) -> String {
    match a {
        Annotation::Pretrain { subject } => format!("{{\"subject\":{subject}}}"),
        Annotation::Grounding {
            target,
            anchor,
            relation,
        } => format!(
            "{{\"target\":{target},\"anchor\":{},\"relation\":{}}}",
            opt_index(*anchor),
            relation.map_or("null".into(), relation_json)
        ),
        Annotation::Qa {
            answer,
            target,
            anchor,
            relation,
        } => format!(
            "{{\"answer\":{},\"target\":{target},\"anchor\":{anchor},\"relation\":{}}}",
            json_str(&config.classes[*answer].name),
            relation_json(*relation)
        ),
        Annotation::Caption { object } => format!("{{\"object\":{object}}}"),
    }
}

/// One JSON line; floats carry exactly 6 decimals.
pub(crate) fn pair_to_line(pair: &ScenePair, config: &CorpusConfig) -> String {
    let mut s = String::new();
    write!(s, "{{\"scene_id\":{},\"objects\":[", pair.scene.scene_id).unwrap();
    for (i, o) in pair.scene.objects.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let shape = match o.shape {
            ShapeKind::Box => "box",
            ShapeKind::Ellipsoid => "ellipsoid",
        };
        write!(
            s,
            "{{\"class\":{},\"center\":{},\"size\":{},\"shape\":\"{shape}\",\"point_seed\":{}}}",
            json_str(&config.classes[o.class_id].name),
            vec3(o.center),
            vec3(o.size),
            o.point_seed
        )
        .unwrap();
    }
    write!(
        s,
        "],\"bounds\":{{\"min\":{},\"max\":{}}},\"text\":{},\"task\":\"{}\",\"annotation\":{}}}",
        vec3(pair.scene.bounds.min),
        vec3(pair.scene.bounds.max),
        json_str(&pair.text),
        pair.task,
        annotation_json(&pair.annotation, config)
    )
    .unwrap();
    s
}

pub fn write_corpus(pairs: &[ScenePair], path: &Path, config: &CorpusConfig) -> Result<(), CorpusError> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&pair_to_line(p, config));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    class: String,
    center: [f64; 3],
    size: [f64; 3],
    shape: ShapeKind,
    point_seed: u64,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    subject: Option<usize>,
    target: Option<usize>,
    anchor: Option<usize>,
    relation: Option<Relation>,
    answer: Option<String>,
    object: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    scene_id: u64,
    objects: Vec<RawObject>,
    #[serde(default)]
    bounds: Option<Bounds>,
    text: String,
    task: Task,
    annotation: RawAnnotation,
}

fn parse_line(line: &str, config: &CorpusConfig) -> Result<ScenePair, String> {
    let raw: RawPair = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let class_id = |name: &str| config.class_id(name).ok_or_else(|| format!("unknown class `{name}`"));
    let objects = raw
        .objects
        .into_iter()
        .map(|o| {
            Ok(ObjectInstance {
                class_id: class_id(&o.class)?,
                center: o.center,
                size: o.size,
                shape: o.shape,
                point_seed: o.point_seed,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let n = objects.len();
    let a = raw.annotation;
    let missing = |f: &str| format!("annotation field `{f}` missing for task {}", raw.task);
    let index = |v: Option<usize>, f: &str| -> Result<usize, String> {
        let i = v.ok_or_else(|| missing(f))?;
        if i >= n {
            return Err(format!("annotation `{f}` = {i} but scene has {n} objects"));
        }
        Ok(i)
    };
    let annotation = match raw.task {
        Task::Pretrain => Annotation::Pretrain {
            subject: index(a.subject, "subject")?,
        },
        Task::Grounding => Annotation::Grounding {
            target: index(a.target, "target")?,
            anchor: a.anchor.map(|i| index(Some(i), "anchor")).transpose()?,
            relation: a.relation,
        },
        Task::Qa => Annotation::Qa {
            answer: class_id(a.answer.as_deref().ok_or_else(|| missing("answer"))?)?,
            target: index(a.target, "target")?,
            anchor: index(a.anchor, "anchor")?,
            relation: a.relation.ok_or_else(|| missing("relation"))?,
        },
        Task::Caption => Annotation::Caption {
            object: index(a.object, "object")?,
        },
    };
    Ok(ScenePair {
        scene: Scene {
            scene_id: raw.scene_id,
            objects,
            bounds: raw.bounds.unwrap_or_default(),
        },
        text: raw.text,
        task: raw.task,
        annotation,
    })
}

/// Reads a JSONL corpus; errors carry the 1-based line number.
pub fn read_corpus(path: &Path, config: &CorpusConfig) -> Result<Vec<ScenePair>, CorpusError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, config).map_err(|msg| CorpusError::Parse { line: i + 1, msg }))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SplitCount {
    pub train: usize,
    pub eval: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub scenes: usize,
    pub mean_objects: f64,
    pub counts: BTreeMap<Task, SplitCount>,
    /// Relation name → number of triplets over all scenes.
    pub relations: BTreeMap<String, usize>,
    pub files: Vec<String>,
}

impl CorpusSummary {
    pub fn total(&self, task: Task) -> usize {
        self.counts.get(&task).map_or(0, |c| c.train + c.eval)
    }
}

/// Seed of the `attempt`-th try at scene `index`.
fn scene_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    // splitmix64 finalizer over the packed triple
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(attempt);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n_scenes` scenes (ids `0..n_scenes`) and all task samples.
pub fn generate_scenes(seed: u64, n_scenes: usize, config: &CorpusConfig) -> Result<Vec<Scene>, CorpusError> {
    (0..n_scenes as u64)
        .map(|i| {
            let mut last = None;
            for attempt in 0..16 {
                match generate_scene(scene_seed(seed, i, attempt), config) {
                    Ok(mut s) => {
                        s.scene_id = i;
                        return Ok(s);
                    }
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect()
}

/// Per-task samples for every scene, in scene order. Pre-training scenes get
/// same-class object replacement first.
pub fn build_samples(
    seed: u64,
    scenes: &[Scene],
    config: &CorpusConfig,
) -> BTreeMap<Task, Vec<ScenePair>> {
    let library = ObjectLibrary::generate(scene_seed(seed, u64::MAX, 0), config.library_per_class, config);
    let mut out: BTreeMap<Task, Vec<ScenePair>> = BTreeMap::new();
    for scene in scenes {
        for (k, task) in Task::ALL.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed ^ 0x5A5A, scene.scene_id, k as u64));
            let base = if task == Task::Pretrain {
                replace_objects(scene, &library, config.replace_ratio, &mut rng).scene
            } else {
                scene.clone()
            };
            out.entry(task)
                .or_default()
                .extend(make_task_samples(&base, task, config, &mut rng));
        }
    }
    out
}

/// Writes `{task}_train.jsonl` and `{task}_eval.jsonl` for every task.
pub fn generate_corpus(
    seed: u64,
    n_scenes: usize,
    out_dir: &Path,
    config: &CorpusConfig,
) -> Result<CorpusSummary, CorpusError> {
    if n_scenes == 0 {
        return Err(CorpusError::Config("need at least one scene".into()));
    }
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let scenes = generate_scenes(seed, n_scenes, config)?;
    let mut summary = CorpusSummary {
        scenes: n_scenes,
        mean_objects: scenes.iter().map(|s| s.len()).sum::<usize>() as f64 / n_scenes as f64,
        ..Default::default()
    };
    for s in &scenes {
        for t in compute_relations(s) {
            *summary.relations.entry(t.relation.name().to_string()).or_default() += 1;
        }
    }
    for (task, pairs) in build_samples(seed, &scenes, config) {
        let (eval, train): (Vec<ScenePair>, Vec<ScenePair>) =
            pairs.into_iter().partition(|p| config.is_eval_scene(p.scene.scene_id));
        for (split, items) in [("train", &train), ("eval", &eval)] {
            let path = out_dir.join(format!("{task}_{split}.jsonl"));
            write_corpus(items, &path, config)?;
            summary.files.push(path.display().to_string());
        }
        summary.counts.insert(
            task,
            SplitCount {
                train: train.len(),
                eval: eval.len(),
            },
        );
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_pairs(n: usize) -> Vec<ScenePair> {
        let cfg = CorpusConfig::default();
        let scenes = generate_scenes(3, 30, &cfg).unwrap();
        build_samples(3, &scenes, &cfg)
            .into_values()
            .flatten()
            .take(n)
            .collect()
    }

    #[test]
    fn round_trip_100_pairs() {
        let cfg = CorpusConfig::default();
        let pairs = sample_pairs(100);
        assert_eq!(pairs.len(), 100);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&pairs, &path, &cfg).unwrap();
        assert_eq!(read_corpus(&path, &cfg).unwrap(), pairs);
    }

    #[test]
    fn floats_have_six_decimals() {
        let cfg = CorpusConfig::default();
        let line = pair_to_line(&sample_pairs(1)[0], &cfg);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(v["objects"][0]["class"].is_string());
        let center = line.split("\"center\":[").nth(1).unwrap();
        let first = center.split(',').next().unwrap();
        assert_eq!(first.split('.').nth(1).unwrap().len(), 6, "{first}");
    }

    #[test]
    fn truncated_last_line_reports_its_number() {
        let cfg = CorpusConfig::default();
        let pairs = sample_pairs(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&pairs, &path, &cfg).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.truncate(text.len() - 20);
        fs::write(&path, text).unwrap();
        match read_corpus(&path, &cfg) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corpus_is_byte_identical_and_splits_sum() {
        let cfg = CorpusConfig::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = generate_corpus(11, 25, a.path(), &cfg).unwrap();
        let sb = generate_corpus(11, 25, b.path(), &cfg).unwrap();
        assert_eq!(sa.counts, sb.counts);
        for task in Task::ALL {
            for split in ["train", "eval"] {
                let name = format!("{task}_{split}.jsonl");
                let fa = fs::read(a.path().join(&name)).unwrap();
                let fb = fs::read(b.path().join(&name)).unwrap();
                assert_eq!(fa, fb, "{name}");
            }
        }
        let pre = sa.counts[&Task::Pretrain];
        assert_eq!(pre.train + pre.eval, 25 * cfg.samples_per_scene);
        assert_eq!(sa.total(Task::Pretrain), 125);
        let eval = read_corpus(&a.path().join("pretrain_eval.jsonl"), &cfg).unwrap();
        assert!(eval.iter().all(|p| p.scene.scene_id % 5 == 4));
    }

    #[test]
    fn zero_scenes_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_corpus(0, 0, dir.path(), &CorpusConfig::default()).is_err());
    }
}
