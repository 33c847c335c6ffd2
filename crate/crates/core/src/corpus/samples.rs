use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{compute_relations, describe_object, scene_graph, CorpusConfig, Relation, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pretrain,
    Grounding,
    Qa,
    Caption,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Pretrain, Task::Grounding, Task::Qa, Task::Caption];

    pub fn name(self) -> &'static str {
        match self {
            Task::Pretrain => "pretrain",
            Task::Grounding => "grounding",
            Task::Qa => "qa",
            Task::Caption => "caption",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Annotation {
    Pretrain {
        subject: usize,
    },
    Grounding {
        target: usize,
        anchor: Option<usize>,
        relation: Option<Relation>,
    },
    Qa {
        answer: usize,
        target: usize,
        anchor: usize,
        relation: Relation,
    },
    Caption {
        object: usize,
    },
}

impl Annotation {
    pub fn task(&self) -> Task {
        match self {
            Annotation::Pretrain { .. } => Task::Pretrain,
            Annotation::Grounding { .. } => Task::Grounding,
            Annotation::Qa { .. } => Task::Qa,
            Annotation::Caption { .. } => Task::Caption,
        }
    }
}

/// A scene, a sentence about it, and the task annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub scene: Scene,
    pub text: String,
    pub task: Task,
    pub annotation: Annotation,
}

/// All objects matching "the CLASS [that REL the ANCHOR-CLASS]", by
/// exhaustive predicate evaluation. `class = None` matches any class.
pub fn resolve_reference(
    scene: &Scene,
    class: Option<usize>,
    clause: Option<(Relation, usize)>,
) -> Vec<usize> {
    let objs = &scene.objects;
    (0..objs.len())
        .filter(|&i| class.is_none_or(|c| objs[i].class_id == c))
        .filter(|&i| {
            clause.is_none_or(|(rel, anchor_class)| {
                (0..objs.len()).any(|j| {
                    j != i && objs[j].class_id == anchor_class && rel.holds(&objs[i], &objs[j])
                })
            })
        })
        .collect()
}

fn first_anchor(scene: &Scene, target: usize, rel: Relation, anchor_class: usize) -> usize {
    let objs = &scene.objects;
    (0..objs.len())
        .find(|&j| j != target && objs[j].class_id == anchor_class && rel.holds(&objs[target], &objs[j]))
        .expect("clause was verified to hold")
}

/// Distinguishing (relation, anchor-class) clauses for `target` among
/// objects of `class` (`None` = any object).
fn distinguishing_clauses(scene: &Scene, target: usize, class: Option<usize>) -> Vec<(Relation, usize)> {
    let relations = compute_relations(scene);
    let target_class = scene.objects[target].class_id;
    let candidates: BTreeSet<(Relation, usize)> = relations
        .iter()
        .filter(|t| t.subject == target)
        .map(|t| (t.relation, scene.objects[t.neighbor].class_id))
        .filter(|&(_, ac)| ac != target_class)
        .collect();
    candidates
        .into_iter()
        .filter(|&clause| resolve_reference(scene, class, Some(clause)) == [target])
        .collect()
}

/// Builds up to `config.samples_per_scene` samples of `task` for `scene`.
///
/// Samples whose target cannot be singled out are skipped.
pub fn make_task_samples(
    scene: &Scene,
    task: Task,
    config: &CorpusConfig,
    rng: &mut impl Rng,
) -> Vec<ScenePair> {
    let classes = &config.classes;
    let name = |i: usize| classes[scene.objects[i].class_id].name.as_str();
    let limit = config.samples_per_scene;
    let mut order: Vec<usize> = (0..scene.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    let pair = |text: String, annotation: Annotation| ScenePair {
        scene: scene.clone(),
        text,
        task,
        annotation,
    };
    match task {
        Task::Pretrain | Task::Caption => {
            let graph = scene_graph(scene, config.graph_radius);
            let eligible: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| describe_object(scene, classes, i, &graph, config.max_clauses, rng).is_some())
                .collect();
            if eligible.is_empty() {
                return out;
            }
            // Pre-training cycles through subjects with fresh clause draws;
            // captions describe each object once.
            let draws = match task {
                Task::Pretrain => limit,
                _ => limit.min(eligible.len()),
            };
            for k in 0..draws {
                let subject = eligible[k % eligible.len()];
                let sentence = describe_object(scene, classes, subject, &graph, config.max_clauses, rng)
                    .expect("eligible subject");
                out.push(match task {
                    Task::Pretrain => pair(sentence, Annotation::Pretrain { subject }),
                    _ => pair(
                        format!("[SOS] {sentence} [EOS]"),
                        Annotation::Caption { object: subject },
                    ),
                });
            }
        }
        Task::Grounding => {
            for &target in &order {
                if out.len() >= limit {
                    break;
                }
                let class = scene.objects[target].class_id;
                let unique_class = resolve_reference(scene, Some(class), None) == [target];
                let clauses = distinguishing_clauses(scene, target, Some(class));
                let clause = if unique_class && (clauses.is_empty() || rng.gen_bool(0.5)) {
                    None
                } else if let Some(&c) = clauses.choose(rng) {
                    Some(c)
                } else {
                    continue;
                };
                let (text, anchor, relation) = match clause {
                    None => (format!("the {}", name(target)), None, None),
                    Some((rel, ac)) => {
                        let anchor = first_anchor(scene, target, rel, ac);
                        (
                            format!("the {} that {} {}", name(target), rel.description(), classes[ac].name),
                            Some(anchor),
                            Some(rel),
                        )
                    }
                };
                debug_assert_eq!(resolve_reference(scene, Some(class), clause), [target]);
                out.push(pair(
                    text,
                    Annotation::Grounding {
                        target,
                        anchor,
                        relation,
                    },
                ));
            }
        }
        Task::Qa => {
            for &target in &order {
                if out.len() >= limit {
                    break;
                }
                let clauses = distinguishing_clauses(scene, target, None);
                let Some(&(rel, ac)) = clauses.choose(rng) else {
                    continue;
                };
                let anchor = first_anchor(scene, target, rel, ac);
                out.push(pair(
                    format!("what is the object that {} {}?", rel.description(), classes[ac].name),
                    Annotation::Qa {
                        answer: scene.objects[target].class_id,
                        target,
                        anchor,
                        relation: rel,
                    },
                ));
            }
        }
    }
    out
}
