use serde::{Deserialize, Serialize};

use super::{ObjectInstance, Scene};

/// Directional predicates need the center offset to exceed this (meters).
pub const DIRECTION_MARGIN: f64 = 0.1;
pub const VOLUME_RATIO: f64 = 1.2;
pub const CLOSE_DISTANCE: f64 = 1.0;
pub const SUPPORT_GAP: f64 = 0.05;
pub const SUPPORT_OVERLAP: f64 = 0.5;

/// The geometric subset of the relation vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    SupportedBy,
    Left,
    Right,
    Front,
    Behind,
    CloseBy,
    Inside,
    BiggerThan,
    SmallerThan,
    HigherThan,
    LowerThan,
}

impl Relation {
    pub const ALL: [Relation; 11] = [
        Relation::SupportedBy,
        Relation::Left,
        Relation::Right,
        Relation::Front,
        Relation::Behind,
        Relation::CloseBy,
        Relation::Inside,
        Relation::BiggerThan,
        Relation::SmallerThan,
        Relation::HigherThan,
        Relation::LowerThan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::SupportedBy => "supported by",
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Front => "front",
            Relation::Behind => "behind",
            Relation::CloseBy => "close by",
            Relation::Inside => "inside",
            Relation::BiggerThan => "bigger than",
            Relation::SmallerThan => "smaller than",
            Relation::HigherThan => "higher than",
            Relation::LowerThan => "lower than",
        }
    }

    /// Verb phrase used in generated text, ending in "the".
    pub fn description(self) -> &'static str {
        match self {
            Relation::SupportedBy => "is supported by the",
            Relation::Left => "is on the left side of the",
            Relation::Right => "is on the right side of the",
            Relation::Front => "is in front of the",
            Relation::Behind => "is behind the",
            Relation::CloseBy => "is close by the",
            Relation::Inside => "is inside the",
            Relation::BiggerThan => "is bigger than the",
            Relation::SmallerThan => "is smaller than the",
            Relation::HigherThan => "is higher than the",
            Relation::LowerThan => "is lower than the",
        }
    }

    /// The relation that holds for the swapped pair, if the predicate has one.
    pub fn converse(self) -> Option<Relation> {
        match self {
            Relation::Left => Some(Relation::Right),
            Relation::Right => Some(Relation::Left),
            Relation::Front => Some(Relation::Behind),
            Relation::Behind => Some(Relation::Front),
            Relation::BiggerThan => Some(Relation::SmallerThan),
            Relation::SmallerThan => Some(Relation::BiggerThan),
            Relation::HigherThan => Some(Relation::LowerThan),
            Relation::LowerThan => Some(Relation::HigherThan),
            Relation::CloseBy => Some(Relation::CloseBy),
            Relation::SupportedBy | Relation::Inside => None,
        }
    }

    /// Whether `a` stands in this relation to `b`.
    pub fn holds(self, a: &ObjectInstance, b: &ObjectInstance) -> bool {
        let (ca, cb) = (a.center, b.center);
        match self {
            Relation::Left => cb[0] - ca[0] > DIRECTION_MARGIN,
            Relation::Right => Relation::Left.holds(b, a),
            Relation::Front => ca[1] - cb[1] > DIRECTION_MARGIN,
            Relation::Behind => Relation::Front.holds(b, a),
            Relation::HigherThan => ca[2] - cb[2] > DIRECTION_MARGIN,
            Relation::LowerThan => Relation::HigherThan.holds(b, a),
            Relation::BiggerThan => a.volume() / b.volume() > VOLUME_RATIO,
            Relation::SmallerThan => Relation::BiggerThan.holds(b, a),
            Relation::CloseBy => {
                let d2: f64 = (0..3).map(|k| (ca[k] - cb[k]).powi(2)).sum();
                d2.sqrt() < CLOSE_DISTANCE
            }
            Relation::SupportedBy => {
                let bottom = ca[2] - a.size[2] / 2.0;
                let top = cb[2] + b.size[2] / 2.0;
                (bottom - top).abs() <= SUPPORT_GAP
                    && footprint_overlap(a, b) > SUPPORT_OVERLAP * a.size[0] * a.size[1]
            }
            Relation::Inside => {
                let (amin, amax) = (a.min_corner(), a.max_corner());
                let (bmin, bmax) = (b.min_corner(), b.max_corner());
                (0..3).all(|k| amin[k] >= bmin[k] && amax[k] <= bmax[k])
            }
        }
    }
}

fn footprint_overlap(a: &ObjectInstance, b: &ObjectInstance) -> f64 {
    let (amin, amax) = (a.min_corner(), a.max_corner());
    let (bmin, bmax) = (b.min_corner(), b.max_corner());
    let dx = (amax[0].min(bmax[0]) - amin[0].max(bmin[0])).max(0.0);
    let dy = (amax[1].min(bmax[1]) - amin[1].max(bmin[1])).max(0.0);
    dx * dy
}

/// ⟨subject, relation, neighbor⟩: `subject` stands in `relation` to `neighbor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTriplet {
    pub subject: usize,
    pub relation: Relation,
    pub neighbor: usize,
}

/// Every relation that holds, over all ordered object pairs.
pub fn compute_relations(scene: &Scene) -> Vec<RelationTriplet> {
    let objs = &scene.objects;
    let mut out = Vec::new();
    for (i, a) in objs.iter().enumerate() {
        for (j, b) in objs.iter().enumerate() {
            if i == j {
                continue;
            }
            for rel in Relation::ALL {
                if rel.holds(a, b) {
                    out.push(RelationTriplet {
                        subject: i,
                        relation: rel,
                        neighbor: j,
                    });
                }
            }
        }
    }
    out
}

/// The relation graph restricted to neighbors within `radius` of the subject.
pub fn scene_graph(scene: &Scene, radius: f64) -> Vec<RelationTriplet> {
    compute_relations(scene)
        .into_iter()
        .filter(|t| {
            let a = scene.objects[t.subject].center;
            let b = scene.objects[t.neighbor].center;
            let d2: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum();
            d2.sqrt() <= radius
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Bounds, ShapeKind};

    fn obj(center: [f64; 3], size: [f64; 3]) -> ObjectInstance {
        ObjectInstance {
            class_id: 0,
            center,
            size,
            shape: ShapeKind::Box,
            point_seed: 0,
        }
    }

    fn scene(objects: Vec<ObjectInstance>) -> Scene {
        Scene {
            scene_id: 0,
            objects,
            bounds: Bounds::default(),
        }
    }

    fn has(ts: &[RelationTriplet], s: usize, r: Relation, n: usize) -> bool {
        ts.contains(&RelationTriplet {
            subject: s,
            relation: r,
            neighbor: n,
        })
    }

    #[test]
    fn left_right_pair() {
        let s = scene(vec![obj([0.0, 0.0, 0.0], [0.5; 3]), obj([1.0, 0.0, 0.0], [0.5; 3])]);
        let ts = compute_relations(&s);
        assert!(has(&ts, 0, Relation::Left, 1));
        assert!(has(&ts, 1, Relation::Right, 0));
        assert!(!has(&ts, 0, Relation::Right, 1));
    }

    #[test]
    fn identical_twins_have_no_directional_or_size_relations() {
        let s = scene(vec![obj([1.0, 1.0, 0.5], [0.5; 3]), obj([1.0, 1.0, 0.5], [0.5; 3])]);
        let ts = compute_relations(&s);
        use Relation::*;
        for r in [Left, Right, Front, Behind, BiggerThan, SmallerThan, HigherThan, LowerThan] {
            assert!(ts.iter().all(|t| t.relation != r), "{r:?}");
        }
    }

    #[test]
    fn volume_ratio() {
        let s = scene(vec![obj([0.0; 3], [2.0; 3]), obj([3.0, 0.0, 0.0], [1.0; 3])]);
        let ts = compute_relations(&s);
        assert!(has(&ts, 0, Relation::BiggerThan, 1));
        assert!(has(&ts, 1, Relation::SmallerThan, 0));
    }

    #[test]
    fn stacked_object_is_supported() {
        let table = obj([1.0, 1.0, 0.375], [1.4, 0.8, 0.75]);
        let cup = obj([1.1, 1.0, 0.81], [0.1, 0.1, 0.12]);
        let s = scene(vec![table, cup]);
        let ts = compute_relations(&s);
        assert!(has(&ts, 1, Relation::SupportedBy, 0));
        assert!(!has(&ts, 0, Relation::SupportedBy, 1));
        assert!(has(&ts, 1, Relation::HigherThan, 0));
    }

    #[test]
    fn containment() {
        let s = scene(vec![obj([0.0; 3], [2.0; 3]), obj([0.2, 0.0, 0.0], [0.5; 3])]);
        let ts = compute_relations(&s);
        assert!(has(&ts, 1, Relation::Inside, 0));
        assert!(!has(&ts, 0, Relation::Inside, 1));
    }

    #[test]
    fn descriptions_follow_relation_table() {
        assert_eq!(Relation::Left.description(), "is on the left side of the");
        assert_eq!(Relation::Front.description(), "is in front of the");
        assert_eq!(Relation::SupportedBy.description(), "is supported by the");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn object() -> impl Strategy<Value = ObjectInstance> {
            (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(0.05f64..3.0))
                .prop_map(|(c, s)| obj(c, s))
        }

        fn relation() -> impl Strategy<Value = Relation> {
            prop::sample::select(Relation::ALL.to_vec())
        }

        proptest! {
            #[test]
            fn converse_holds_for_the_swapped_pair(a in object(), b in object(), r in relation()) {
                if let Some(c) = r.converse() {
                    prop_assert_eq!(r.holds(&a, &b), c.holds(&b, &a));
                }
            }

            #[test]
            fn opposite_directions_never_both_hold(a in object(), b in object(), r in relation()) {
                if let Some(c) = r.converse().filter(|&c| c != r) {
                    prop_assert!(!(r.holds(&a, &b) && c.holds(&a, &b)));
                }
            }

            #[test]
            fn close_by_is_reflexive_and_directions_are_not(a in object()) {
                prop_assert!(Relation::CloseBy.holds(&a, &a));
                for r in [Relation::Left, Relation::Front, Relation::HigherThan, Relation::BiggerThan] {
                    prop_assert!(!r.holds(&a, &a));
                }
            }
        }
    }
}
