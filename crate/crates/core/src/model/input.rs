use std::collections::HashMap;
use std::sync::Arc;

use crate::corpus::{normalize_points, sample_object_points, ObjectInstance, Scene, ShapeKind};
use crate::point_encoder::{plan_object, ObjectPlan, PointEncoderConfig, PointError};
use crate::transformer::{pairwise_spatial_features, MaskMode, SpatialFeatures};

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedObject {
    pub class_id: usize,
    pub location: [f64; 6],
    pub plan: Arc<ObjectPlan>,
}

/// A scene with sampled, normalized, grouped points and its spatial features.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub scene_id: u64,
    pub objects: Vec<PreparedObject>,
    pub spatial: SpatialFeatures,
}

impl PreparedScene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

type PlanKey = (u64, ShapeKind, [u64; 3]);

/// Memoizes object plans; normalization removes position and scale, so the
/// key is (point seed, shape, size).
#[derive(Debug, Clone)]
pub struct PlanCache {
    config: PointEncoderConfig,
    plans: HashMap<PlanKey, Arc<ObjectPlan>>,
}

impl PlanCache {
    pub fn new(config: PointEncoderConfig) -> Self {
        Self {
            config,
            plans: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn plan(&mut self, obj: &ObjectInstance) -> Result<Arc<ObjectPlan>, PointError> {
        let key = (obj.point_seed, obj.shape, obj.size.map(f64::to_bits));
        if let Some(p) = self.plans.get(&key) {
            return Ok(p.clone());
        }
        let points = normalize_points(&sample_object_points(obj, self.config.n_points));
        let plan = Arc::new(plan_object(&points, &self.config)?);
        self.plans.insert(key, plan.clone());
        Ok(plan)
    }

    pub fn prepare(&mut self, scene: &Scene) -> Result<PreparedScene, PointError> {
        let objects = scene
            .objects
            .iter()
            .map(|o| {
                Ok(PreparedObject {
                    class_id: o.class_id,
                    location: o.location(),
                    plan: self.plan(o)?,
                })
            })
            .collect::<Result<Vec<_>, PointError>>()?;
        Ok(PreparedScene {
            scene_id: scene.scene_id,
            objects,
            spatial: pairwise_spatial_features(&scene.centers()),
        })
    }
}

/// Which class id feeds the class embedding of each object token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassSource {
    #[default]
    GroundTruth,
    Predicted,
}

/// One forward batch.
#[derive(Debug, Clone, Default)]
pub struct ModelInput {
    pub scenes: Vec<Arc<PreparedScene>>,
    /// Token ids per sample, `[CLS]` first.
    pub text: Vec<Vec<usize>>,
    /// Per-sample object mask flags; empty means nothing masked.
    pub object_mask: Vec<Vec<bool>>,
    pub mode: MaskMode,
    pub classes: ClassSource,
    /// Object to caption per sample; empty means none.
    pub caption_target: Vec<Option<usize>>,
}

impl ModelInput {
    pub fn new(scenes: Vec<Arc<PreparedScene>>, text: Vec<Vec<usize>>) -> Self {
        Self {
            scenes,
            text,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.text.iter().map(Vec::len).max().unwrap_or(1)
    }

    pub fn max_objects(&self) -> usize {
        self.scenes.iter().map(|s| s.len()).max().unwrap_or(0)
    }

    pub fn is_masked(&self, b: usize, i: usize) -> bool {
        self.object_mask.get(b).and_then(|m| m.get(i)).copied().unwrap_or(false)
    }

    pub fn with_mode(mut self, mode: MaskMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_classes(mut self, classes: ClassSource) -> Self {
        self.classes = classes;
        self
    }
}
