//! Synthetic scene-text corpus: procedural scenes, geometric relations,
//! template sentences and the per-task sample builders.

mod io;
mod points;
mod relations;
mod samples;
mod scene;
mod templates;

pub use io::{build_samples, generate_corpus, generate_scenes, read_corpus, write_corpus, CorpusSummary, SplitCount};
pub use points::{normalize_points, sample_object_points, sample_object_points_with_jitter, Point, POINT_JITTER};
pub use relations::{
    compute_relations, scene_graph, Relation, RelationTriplet, CLOSE_DISTANCE, DIRECTION_MARGIN,
    SUPPORT_GAP, SUPPORT_OVERLAP, VOLUME_RATIO,
};
pub use samples::{make_task_samples, resolve_reference, Annotation, ScenePair, Task};
pub use scene::{
    box_iou, default_classes, generate_scene, replace_objects, Bounds, ClassSpec, ObjectInstance,
    ObjectLibrary, Replacement, Scene, ShapeKind,
};
pub use templates::{describe_object, neighbor_count, render_template, NEIGHBOR_CAP};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("could not place all objects for scene seed {seed}")]
    Placement { seed: u64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid corpus config: {0}")]
    Config(String),
}

impl PartialEq for CorpusError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(skip, default = "default_classes")]
    pub classes: Vec<ClassSpec>,
    pub objects_per_scene: (usize, usize),
    pub bounds: Bounds,
    /// Probability of forcing a same-class pair into a scene.
    pub duplicate_prob: f64,
    pub stacking_prob: f64,
    pub size_jitter: f64,
    pub max_iou: f64,
    pub max_placement_retries: usize,
    /// Neighbors further than this do not enter the description graph.
    pub graph_radius: f64,
    pub max_clauses: usize,
    pub samples_per_scene: usize,
    pub replace_ratio: f64,
    pub library_per_class: usize,
    /// Every `eval_every`-th scene (by id) goes to the eval split.
    pub eval_every: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            objects_per_scene: (4, 12),
            bounds: Bounds::default(),
            duplicate_prob: 0.6,
            stacking_prob: 0.3,
            size_jitter: 0.15,
            max_iou: 0.10,
            max_placement_retries: 200,
            graph_radius: 2.0,
            max_clauses: 2,
            samples_per_scene: 5,
            replace_ratio: 0.10,
            library_per_class: 4,
            eval_every: 5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let (lo, hi) = self.objects_per_scene;
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if lo == 0 || lo > hi {
            return bad("objects_per_scene must satisfy 1 <= lo <= hi");
        }
        if self.classes.is_empty() {
            return bad("empty class vocabulary");
        }
        if !(0.0..=1.0).contains(&self.duplicate_prob)
            || !(0.0..=1.0).contains(&self.stacking_prob)
            || !(0.0..=1.0).contains(&self.replace_ratio)
        {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return bad("size_jitter must lie in [0, 1)");
        }
        if self.eval_every < 2 {
            return bad("eval_every must be at least 2");
        }
        Ok(())
    }

    pub fn is_eval_scene(&self, scene_id: u64) -> bool {
        scene_id % self.eval_every == self.eval_every - 1
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }
}
