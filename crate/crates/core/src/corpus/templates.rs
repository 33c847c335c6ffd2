use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ClassSpec, RelationTriplet, Scene};

/// Subjects need strictly fewer neighbors than this to be described.
pub const NEIGHBOR_CAP: usize = 7;

pub fn neighbor_count(subject: usize, triplets: &[RelationTriplet]) -> usize {
    triplets
        .iter()
        .filter(|t| t.subject == subject)
        .map(|t| t.neighbor)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Renders "This is a OBJECT, a NEIGHBOR RELATION OBJECT" clauses for the
/// subject's triplets; `None` means the subject is skipped (no triplets, or
/// too many neighbors).
pub fn render_template(
    scene: &Scene,
    classes: &[ClassSpec],
    subject: usize,
    triplets: &[RelationTriplet],
) -> Option<String> {
    let own: Vec<&RelationTriplet> = triplets.iter().filter(|t| t.subject == subject).collect();
    if own.is_empty() || neighbor_count(subject, triplets) >= NEIGHBOR_CAP {
        return None;
    }
    let name = |i: usize| classes[scene.objects[i].class_id].name.as_str();
    let object = name(subject);
    let clauses: Vec<String> = own
        .iter()
        .map(|t| {
            format!(
                "a {} {} {}",
                name(t.neighbor),
                t.relation.description(),
                object
            )
        })
        .collect();
    Some(format!("This is a {object}, {}", clauses.join(", and ")))
}

/// Template description of `subject` from at most `max_clauses` of its graph
/// triplets, preferring distinct neighbors. The neighbor cap is applied to
/// the full graph, not to the chosen clauses.
pub fn describe_object(
    scene: &Scene,
    classes: &[ClassSpec],
    subject: usize,
    graph: &[RelationTriplet],
    max_clauses: usize,
    rng: &mut impl Rng,
) -> Option<String> {
    let mut own: Vec<RelationTriplet> =
        graph.iter().filter(|t| t.subject == subject).copied().collect();
    if own.is_empty() || neighbor_count(subject, &own) >= NEIGHBOR_CAP {
        return None;
    }
    own.shuffle(rng);
    let mut chosen: Vec<RelationTriplet> = Vec::new();
    let mut seen = BTreeSet::new();
    for t in &own {
        if chosen.len() < max_clauses && seen.insert(t.neighbor) {
            chosen.push(*t);
        }
    }
    for t in &own {
        if chosen.len() < max_clauses && !chosen.contains(t) {
            chosen.push(*t);
        }
    }
    render_template(scene, classes, subject, &chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_classes, Bounds, ObjectInstance, Relation, ShapeKind};

    fn class_id(name: &str) -> usize {
        default_classes().iter().position(|c| c.name == name).unwrap()
    }

    fn scene_of(names: &[&str]) -> Scene {
        Scene {
            scene_id: 0,
            objects: names
                .iter()
                .enumerate()
                .map(|(i, n)| ObjectInstance {
                    class_id: class_id(n),
                    center: [i as f64, 0.0, 0.5],
                    size: [0.5; 3],
                    shape: ShapeKind::Box,
                    point_seed: 0,
                })
                .collect(),
            bounds: Bounds::default(),
        }
    }

    fn t(subject: usize, relation: Relation, neighbor: usize) -> RelationTriplet {
        RelationTriplet {
            subject,
            relation,
            neighbor,
        }
    }

    #[test]
    fn single_left_clause() {
        let s = scene_of(&["chair", "table"]);
        let out = render_template(&s, &default_classes(), 0, &[t(0, Relation::Left, 1)]);
        assert_eq!(
            out.as_deref(),
            Some("This is a chair, a table is on the left side of the chair")
        );
    }

    #[test]
    fn neighbor_is_grammatical_subject() {
        let s = scene_of(&["bed", "chair"]);
        let out = render_template(&s, &default_classes(), 0, &[t(0, Relation::BiggerThan, 1)]);
        assert_eq!(
            out.as_deref(),
            Some("This is a bed, a chair is bigger than the bed")
        );
    }

    #[test]
    fn clauses_joined_with_and() {
        let s = scene_of(&["chair", "table", "lamp"]);
        let out = render_template(
            &s,
            &default_classes(),
            0,
            &[t(0, Relation::Left, 1), t(0, Relation::CloseBy, 2)],
        );
        assert_eq!(
            out.as_deref(),
            Some("This is a chair, a table is on the left side of the chair, and a lamp is close by the chair")
        );
    }

    #[test]
    fn seven_neighbors_skipped_six_kept() {
        let s = scene_of(&["chair", "table", "lamp", "bed", "sofa", "desk", "cup", "bag"]);
        let seven: Vec<_> = (1..8).map(|j| t(0, Relation::Left, j)).collect();
        assert_eq!(render_template(&s, &default_classes(), 0, &seven), None);
        assert!(render_template(&s, &default_classes(), 0, &seven[..6]).is_some());
    }

    #[test]
    fn no_triplets_skipped() {
        let s = scene_of(&["chair", "table"]);
        assert_eq!(render_template(&s, &default_classes(), 0, &[t(1, Relation::Right, 0)]), None);
    }
}
