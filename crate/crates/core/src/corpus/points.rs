use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{ObjectInstance, ShapeKind};

/// Surface jitter applied by [`sample_object_points`], in meters.
pub const POINT_JITTER: f64 = 0.005;

pub type Point = [f64; 3];

/// Samples `n_points` surface points of `obj` with the default jitter.
pub fn sample_object_points(obj: &ObjectInstance, n_points: usize) -> Vec<Point> {
    sample_object_points_with_jitter(obj, n_points, POINT_JITTER)
}

/// Uniform surface sampling (area-weighted faces for boxes, rejection for
/// ellipsoids), scaled by the object size and translated to its center.
/// Deterministic in `obj.point_seed`.
pub fn sample_object_points_with_jitter(
    obj: &ObjectInstance,
    n_points: usize,
    jitter: f64,
) -> Vec<Point> {
    assert!(n_points >= 8, "need at least 8 points");
    let mut rng = ChaCha8Rng::seed_from_u64(obj.point_seed);
    let half = obj.size.map(|s| s / 2.0);
    let noise = (jitter > 0.0).then(|| Normal::new(0.0, jitter).expect("positive sigma"));
    (0..n_points)
        .map(|_| {
            let local = match obj.shape {
                ShapeKind::Box => box_surface(half, &mut rng),
                ShapeKind::Ellipsoid => ellipsoid_surface(half, &mut rng),
            };
            std::array::from_fn(|k| {
                let j = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                obj.center[k] + local[k] + j
            })
        })
        .collect()
}

fn box_surface(half: [f64; 3], rng: &mut impl Rng) -> Point {
    let [a, b, c] = half;
    // face pairs perpendicular to x, y, z
    let areas = [b * c, a * c, a * b];
    let total: f64 = areas.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut axis = 2;
    for (k, &area) in areas.iter().enumerate() {
        if u < area {
            axis = k;
            break;
        }
        u -= area;
    }
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = if k == axis {
            sign * half[k]
        } else {
            rng.gen_range(-half[k]..=half[k])
        };
    }
    p
}

fn ellipsoid_surface(half: [f64; 3], rng: &mut impl Rng) -> Point {
    let [a, b, c] = half;
    let g_max = (b * c).max(a * c).max(a * b);
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm < 1e-12 {
            continue;
        }
        let u = v.map(|x| x / norm);
        // area element of the sphere→ellipsoid map relative to its maximum
        let g = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        if rng.gen::<f64>() * g_max <= g {
            return [a * u[0], b * u[1], c * u[2]];
        }
    }
}

/// Centers a cloud on its centroid and scales it into the unit ball.
///
/// A cloud with zero extent maps to all zeros.
pub fn normalize_points(points: &[Point]) -> Vec<Point> {
    assert!(!points.is_empty(), "empty point cloud");
    let n = points.len() as f64;
    let centroid: Point = std::array::from_fn(|k| points.iter().map(|p| p[k]).sum::<f64>() / n);
    let centered: Vec<Point> = points
        .iter()
        .map(|p| std::array::from_fn(|k| p[k] - centroid[k]))
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if max_norm == 0.0 {
        return vec![[0.0; 3]; points.len()];
    }
    centered
        .into_iter()
        .map(|p| p.map(|x| x / max_norm))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> ObjectInstance {
        ObjectInstance {
            class_id: 0,
            center: [0.0; 3],
            size: [1.0; 3],
            shape: ShapeKind::Box,
            point_seed: 11,
        }
    }

    fn norm(p: &Point) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    #[test]
    fn unit_box_without_jitter_stays_in_cube() {
        let pts = sample_object_points_with_jitter(&unit_box(), 500, 0.0);
        assert!(pts.iter().flatten().all(|&x| (-0.5..=0.5).contains(&x)));
        // every point lies on some face
        assert!(pts
            .iter()
            .all(|p| p.iter().any(|&x| (x.abs() - 0.5).abs() < 1e-12)));
    }

    #[test]
    fn requested_count_is_returned() {
        assert_eq!(sample_object_points(&unit_box(), 1024).len(), 1024);
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let a = sample_object_points(&unit_box(), 64);
        let b = sample_object_points(&unit_box(), 64);
        assert_eq!(a, b);
        let mut other = unit_box();
        other.point_seed = 12;
        assert_ne!(a, sample_object_points(&other, 64));
    }

    #[test]
    fn symmetric_box_centroid_is_center() {
        let mut obj = unit_box();
        obj.center = [1.0, -2.0, 0.5];
        obj.size = [0.8, 1.2, 0.4];
        let pts = sample_object_points(&obj, 100_000);
        for k in 0..3 {
            let mean = pts.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64;
            assert!((mean - obj.center[k]).abs() < 0.01, "axis {k}: {mean}");
        }
    }

    #[test]
    fn ellipsoid_points_lie_on_surface() {
        let obj = ObjectInstance {
            shape: ShapeKind::Ellipsoid,
            size: [2.0, 1.0, 0.5],
            ..unit_box()
        };
        for p in sample_object_points_with_jitter(&obj, 300, 0.0) {
            let r = (p[0] / 1.0).powi(2) + (p[1] / 0.5).powi(2) + (p[2] / 0.25).powi(2);
            assert!((r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_two_points() {
        let out = normalize_points(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(out, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_idempotent_on_unit_ball() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, -0.5, 0.0]];
        let out = normalize_points(&pts);
        for (a, b) in pts.iter().zip(&out) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn normalized_random_cloud_has_unit_max_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..200)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-5.0..7.0)))
            .collect();
        let out = normalize_points(&pts);
        let mx = out.iter().map(norm).fold(0.0, f64::max);
        assert!((mx - 1.0).abs() < 1e-7);
        let c: Point = std::array::from_fn(|k| out.iter().map(|p| p[k]).sum::<f64>() / 200.0);
        assert!(norm(&c) < 1e-12);
    }

    #[test]
    fn degenerate_cloud_maps_to_zeros() {
        let out = normalize_points(&[[1.0, 2.0, 3.0]; 5]);
        assert_eq!(out, vec![[0.0; 3]; 5]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cloud() -> impl Strategy<Value = Vec<Point>> {
            prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..64)
        }

        proptest! {
            #[test]
            fn normalized_cloud_is_centered_in_the_unit_ball(pts in cloud()) {
                let q = normalize_points(&pts);
                let n = q.len() as f64;
                for k in 0..3 {
                    prop_assert!((q.iter().map(|p| p[k]).sum::<f64>() / n).abs() < 1e-9);
                }
                let max = q.iter().map(norm).fold(0.0, f64::max);
                prop_assert!(max <= 1.0 + 1e-12);
                prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
            }

            #[test]
            fn normalization_ignores_translation_and_scale(
                pts in cloud(),
                t in prop::array::uniform3(-10.0f64..10.0),
                scale in 0.1f64..10.0,
            ) {
                let moved: Vec<Point> = pts.iter().map(|p| std::array::from_fn(|k| p[k] * scale + t[k])).collect();
                for (a, b) in normalize_points(&pts).iter().zip(&normalize_points(&moved)) {
                    for k in 0..3 {
                        prop_assert!((a[k] - b[k]).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
