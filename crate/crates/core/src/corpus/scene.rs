use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusConfig, CorpusError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Box,
    Ellipsoid,
}

/// One entry of the class vocabulary: name plus a nominal size used by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Nominal (length, width, height) in meters.
    pub size: [f64; 3],
    pub shape: ShapeKind,
}

fn class(name: &str, size: [f64; 3], shape: ShapeKind) -> ClassSpec {
    ClassSpec {
        name: name.to_string(),
        size,
        shape,
    }
}

/// The 20 indoor object classes.
pub fn default_classes() -> Vec<ClassSpec> {
    use ShapeKind::{Box as B, Ellipsoid as E};
    vec![
        class("chair", [0.5, 0.5, 0.9], B),
        class("table", [1.4, 0.8, 0.75], B),
        class("bed", [2.0, 1.5, 0.6], B),
        class("sofa", [2.0, 0.9, 0.8], B),
        class("desk", [1.2, 0.6, 0.75], B),
        class("cabinet", [0.8, 0.5, 1.8], B),
        class("bookshelf", [1.0, 0.35, 2.0], B),
        class("lamp", [0.3, 0.3, 0.6], E),
        class("monitor", [0.55, 0.08, 0.35], B),
        class("pillow", [0.5, 0.35, 0.15], E),
        class("box", [0.4, 0.4, 0.3], B),
        class("toilet", [0.4, 0.7, 0.8], E),
        class("sink", [0.6, 0.45, 0.2], B),
        class("bathtub", [1.7, 0.75, 0.55], B),
        class("dresser", [1.2, 0.5, 1.0], B),
        class("nightstand", [0.45, 0.4, 0.55], B),
        class("stool", [0.35, 0.35, 0.45], E),
        class("cup", [0.09, 0.09, 0.12], E),
        class("bag", [0.35, 0.2, 0.45], E),
        class("plant", [0.4, 0.4, 1.0], E),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub class_id: usize,
    pub center: [f64; 3],
    /// (length along x, width along y, height along z), each in [0.05, 3.0].
    pub size: [f64; 3],
    pub shape: ShapeKind,
    pub point_seed: u64,
}

impl ObjectInstance {
    /// The 6-component location vector: center followed by size.
    pub fn location(&self) -> [f64; 6] {
        let [x, y, z] = self.center;
        let [l, w, h] = self.size;
        [x, y, z, l, w, h]
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn min_corner(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] - self.size[k] / 2.0)
    }

    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] + self.size[k] / 2.0)
    }
}

/// Axis-aligned world bounds; +x right, +y front, +z up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            min: [0.0, 0.0, 0.0],
            max: [6.0, 6.0, 3.0],
        }
    }
}

impl Bounds {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub objects: Vec<ObjectInstance>,
    pub bounds: Bounds,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.objects.iter().map(|o| o.center).collect()
    }
}

/// 3D IoU of two axis-aligned boxes.
pub fn box_iou(a: &ObjectInstance, b: &ObjectInstance) -> f64 {
    let (amin, amax) = (a.min_corner(), a.max_corner());
    let (bmin, bmax) = (b.min_corner(), b.max_corner());
    let mut inter = 1.0;
    for k in 0..3 {
        let lo = amin[k].max(bmin[k]);
        let hi = amax[k].min(bmax[k]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    inter / (a.volume() + b.volume() - inter)
}

/// Rounds to the 6 decimal digits the corpus files carry, so that values
/// survive a write/read cycle exactly.
pub(crate) fn quantize(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn sample_size(spec: &ClassSpec, jitter: f64, rng: &mut impl Rng) -> [f64; 3] {
    let mut size: [f64; 3] =
        std::array::from_fn(|k| spec.size[k] * rng.gen_range(1.0 - jitter..=1.0 + jitter));
    // quarter turn about z
    if rng.gen_bool(0.5) {
        size.swap(0, 1);
    }
    size.map(|s| quantize(s.clamp(0.05, 3.0)))
}

/// Procedurally generates a scene; a pure function of `seed` and `config`.
pub fn generate_scene(seed: u64, config: &CorpusConfig) -> Result<Scene, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.objects_per_scene;
    let n = rng.gen_range(lo..=hi);
    let n_classes = config.classes.len();
    let mut class_ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
    if n >= 2 && rng.gen_bool(config.duplicate_prob) {
        let src = rng.gen_range(0..n);
        let mut dst = rng.gen_range(0..n - 1);
        if dst >= src {
            dst += 1;
        }
        class_ids[dst] = class_ids[src];
    }
    // Larger objects first so there is something to stand small ones on.
    class_ids.sort_by(|&a, &b| {
        let va: f64 = config.classes[a].size.iter().product();
        let vb: f64 = config.classes[b].size.iter().product();
        vb.total_cmp(&va)
    });

    let bounds = config.bounds.clone();
    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(n);
    for &class_id in &class_ids {
        let spec = &config.classes[class_id];
        let mut placed = None;
        for _ in 0..config.max_placement_retries {
            let size = sample_size(spec, config.size_jitter, &mut rng);
            let small = size[2] < 0.6 && size.iter().product::<f64>() < 0.1;
            let support = if small && !objects.is_empty() && rng.gen_bool(config.stacking_prob) {
                let s = &objects[rng.gen_range(0..objects.len())];
                (s.size[0] >= size[0] && s.size[1] >= size[1]).then_some(s.clone())
            } else {
                None
            };
            let center = match support {
                Some(s) => {
                    let top = s.center[2] + s.size[2] / 2.0;
                    let rx = (s.size[0] - size[0]) / 2.0;
                    let ry = (s.size[1] - size[1]) / 2.0;
                    [
                        s.center[0] + rng.gen_range(-rx..=rx),
                        s.center[1] + rng.gen_range(-ry..=ry),
                        top + size[2] / 2.0,
                    ]
                }
                None => {
                    let x0 = bounds.min[0] + size[0] / 2.0;
                    let x1 = bounds.max[0] - size[0] / 2.0;
                    let y0 = bounds.min[1] + size[1] / 2.0;
                    let y1 = bounds.max[1] - size[1] / 2.0;
                    if x0 > x1 || y0 > y1 {
                        continue;
                    }
                    [
                        rng.gen_range(x0..=x1),
                        rng.gen_range(y0..=y1),
                        bounds.min[2] + size[2] / 2.0,
                    ]
                }
            };
            let candidate = ObjectInstance {
                class_id,
                center: center.map(quantize),
                size,
                shape: spec.shape,
                point_seed: 0,
            };
            let inside = (0..3).all(|k| {
                candidate.min_corner()[k] >= bounds.min[k] - 1e-9
                    && candidate.max_corner()[k] <= bounds.max[k] + 1e-9
            });
            if inside
                && objects
                    .iter()
                    .all(|o| box_iou(o, &candidate) <= config.max_iou)
            {
                placed = Some(candidate);
                break;
            }
        }
        let mut obj = placed.ok_or(CorpusError::Placement { seed })?;
        obj.point_seed = rng.gen();
        objects.push(obj);
    }
    Ok(Scene {
        scene_id: seed,
        objects,
        bounds,
    })
}

/// Same-class replacement prototypes (the stand-in for an external object database).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLibrary {
    pub prototypes: Vec<ObjectInstance>,
}

impl ObjectLibrary {
    pub fn generate(seed: u64, per_class: usize, config: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prototypes = Vec::new();
        for (class_id, spec) in config.classes.iter().enumerate() {
            for _ in 0..per_class {
                let shape = if rng.gen_bool(0.25) {
                    match spec.shape {
                        ShapeKind::Box => ShapeKind::Ellipsoid,
                        ShapeKind::Ellipsoid => ShapeKind::Box,
                    }
                } else {
                    spec.shape
                };
                prototypes.push(ObjectInstance {
                    class_id,
                    center: [0.0; 3],
                    size: spec.size,
                    shape,
                    point_seed: rng.gen(),
                });
            }
        }
        Self { prototypes }
    }

    pub fn of_class(&self, class_id: usize) -> Vec<&ObjectInstance> {
        self.prototypes
            .iter()
            .filter(|p| p.class_id == class_id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replacement {
    pub scene: Scene,
    /// Indices chosen for replacement (`round(ratio·N)` of them).
    pub attempted: Vec<usize>,
    /// Subset of `attempted` that found a same-class prototype.
    pub replaced: Vec<usize>,
}

/// Swaps `round(ratio·N)` objects for same-class prototypes, keeping each
/// object's class, center and size.
pub fn replace_objects(
    scene: &Scene,
    library: &ObjectLibrary,
    ratio: f64,
    rng: &mut impl Rng,
) -> Replacement {
    let n = scene.objects.len();
    let count = ((ratio * n as f64).round() as usize).min(n);
    let attempted = rand::seq::index::sample(rng, n, count).into_vec();
    let mut out = scene.clone();
    let mut replaced = Vec::new();
    for &i in &attempted {
        let original = &scene.objects[i];
        let candidates = library.of_class(original.class_id);
        if candidates.is_empty() {
            continue;
        }
        let proto = candidates[rng.gen_range(0..candidates.len())];
        out.objects[i] = ObjectInstance {
            class_id: original.class_id,
            center: original.center,
            size: original.size,
            shape: proto.shape,
            point_seed: proto.point_seed,
        };
        replaced.push(i);
    }
    Replacement {
        scene: out,
        attempted,
        replaced,
    }
}
