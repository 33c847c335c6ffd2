//! Hierarchical set-abstraction encoder for per-object point clouds.
//!
//! Geometry (sampling, grouping, relative coordinates) depends only on the
//! points, so it is computed once per object as an [`ObjectPlan`]; the
//! learned part replays plans for many objects inside one [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Point;
use crate::nn;
use crate::tensor::{Graph, ParamStore, Result as TResult, Scalar, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointError {
    #[error("cannot sample {k} centroids from {count} points")]
    TooFewPoints { k: usize, count: usize },
    #[error("invalid set-abstraction spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Greedy max-min sampling from `start`; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Point], k: usize, start: usize) -> Result<Vec<usize>, PointError> {
    if k > points.len() || (k > 0 && start >= points.len()) {
        return Err(PointError::TooFewPoints { k, count: points.len() });
    }
    let mut chosen = Vec::with_capacity(k);
    if k == 0 {
        return Ok(chosen);
    }
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut current = start;
    for _ in 0..k {
        chosen.push(current);
        let c = points[current];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// Up to `max_neighbors` indices within `radius` of each centroid.
///
/// The point nearest the centroid comes first (so no ball is empty), the rest
/// follow in index order; short lists are padded with the first neighbor.
pub fn ball_query(points: &[Point], centroids: &[Point], radius: f64, max_neighbors: usize) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    centroids
        .iter()
        .map(|c| {
            let mut nearest = 0;
            let mut nearest_d = f64::INFINITY;
            for (i, p) in points.iter().enumerate() {
                let d = dist2(p, c);
                if d < nearest_d {
                    nearest_d = d;
                    nearest = i;
                }
            }
            let mut out = vec![nearest];
            for (i, p) in points.iter().enumerate() {
                if out.len() >= max_neighbors {
                    break;
                }
                if i != nearest && dist2(p, c) <= r2 {
                    out.push(i);
                }
            }
            out.resize(max_neighbors, nearest);
            out
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAbstractionSpec {
    pub n_centroids: usize,
    /// `None` marks the group-all stage.
    pub radius: Option<f64>,
    pub max_neighbors: usize,
    pub widths: Vec<usize>,
}

impl SetAbstractionSpec {
    pub fn local(n_centroids: usize, radius: f64, max_neighbors: usize, widths: Vec<usize>) -> Self {
        Self {
            n_centroids,
            radius: Some(radius),
            max_neighbors,
            widths,
        }
    }

    pub fn group_all(widths: Vec<usize>) -> Self {
        Self {
            n_centroids: 1,
            radius: None,
            max_neighbors: 0,
            widths,
        }
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().expect("validated spec has widths")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEncoderConfig {
    pub n_points: usize,
    pub stages: Vec<SetAbstractionSpec>,
    pub out_dim: usize,
    pub n_classes: usize,
}

impl PointEncoderConfig {
    /// Two local stages (radii 0.2 and 0.4) and a group-all stage, widths scaled by `d`.
    pub fn scaled(d: usize, n_classes: usize, n_points: usize) -> Self {
        let h = (d / 2).max(4);
        Self {
            n_points,
            stages: vec![
                SetAbstractionSpec::local((n_points / 4).max(1), 0.2, 16, vec![h, h]),
                SetAbstractionSpec::local((n_points / 16).max(1), 0.4, 16, vec![d, d]),
                SetAbstractionSpec::group_all(vec![d, 2 * d]),
            ],
            out_dim: d,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<(), PointError> {
        let bad = |m: String| Err(PointError::BadSpec(m));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        let mut available = self.n_points;
        for (s, st) in self.stages.iter().enumerate() {
            if st.widths.is_empty() || st.widths.contains(&0) {
                return bad(format!("stage {s} needs positive widths"));
            }
            match st.radius {
                Some(r) => {
                    if !(r > 0.0) || st.max_neighbors == 0 {
                        return bad(format!("stage {s} needs radius > 0 and max_neighbors > 0"));
                    }
                    if st.n_centroids > available {
                        return Err(PointError::TooFewPoints {
                            k: st.n_centroids,
                            count: available,
                        });
                    }
                    available = st.n_centroids;
                }
                None => {
                    if s + 1 != self.stages.len() {
                        return bad("group-all must be the last stage".into());
                    }
                    available = 1;
                }
            }
        }
        Ok(())
    }

    /// Input channels of each stage's first MLP layer.
    pub fn in_widths(&self) -> Vec<usize> {
        let mut prev = 0;
        self.stages
            .iter()
            .map(|st| {
                let w = prev + 3;
                prev = st.out_width();
                w
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        let mut total = 0;
        for (st, &cin) in self.stages.iter().zip(&self.in_widths()) {
            let mut c = cin;
            for &w in &st.widths {
                total += c * w + w;
                c = w;
            }
        }
        let last = self.stages.last().map_or(0, |s| s.out_width());
        total + last * self.out_dim + self.out_dim + self.out_dim * self.n_classes + self.n_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub n_groups: usize,
    pub k: usize,
    /// `n_groups * k` indices into the previous level.
    pub neighbors: Vec<usize>,
    /// `n_groups * k * 3` neighbor coordinates relative to their centroid.
    pub rel: Vec<f64>,
    pub centroids: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPlan {
    pub stages: Vec<StagePlan>,
}

/// Points in lexicographic order, so that sampling from index 0 does not
/// depend on the input order.
fn canonical_order(points: &[Point]) -> Vec<Point> {
    let mut out = points.to_vec();
    out.sort_by(|a, b| {
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    out
}

/// Sampling and grouping for one normalized cloud.
pub fn plan_object(points: &[Point], config: &PointEncoderConfig) -> Result<ObjectPlan, PointError> {
    config.validate()?;
    if points.len() < config.stages[0].n_centroids {
        return Err(PointError::TooFewPoints {
            k: config.stages[0].n_centroids,
            count: points.len(),
        });
    }
    let mut level = canonical_order(points);
    let mut stages = Vec::with_capacity(config.stages.len());
    for st in &config.stages {
        let plan = match st.radius {
            Some(radius) => {
                let idx = farthest_point_sample(&level, st.n_centroids, 0)?;
                let centroids: Vec<Point> = idx.iter().map(|&i| level[i]).collect();
                let groups = ball_query(&level, &centroids, radius, st.max_neighbors);
                let mut neighbors = Vec::with_capacity(centroids.len() * st.max_neighbors);
                let mut rel = Vec::with_capacity(neighbors.capacity() * 3);
                for (c, group) in centroids.iter().zip(&groups) {
                    for &j in group {
                        neighbors.push(j);
                        rel.extend((0..3).map(|k| (level[j][k] - c[k]) / radius));
                    }
                }
                StagePlan {
                    n_groups: centroids.len(),
                    k: st.max_neighbors,
                    neighbors,
                    rel,
                    centroids,
                }
            }
            None => StagePlan {
                n_groups: 1,
                k: level.len(),
                neighbors: (0..level.len()).collect(),
                rel: level.iter().flatten().copied().collect(),
                centroids: vec![[0.0; 3]],
            },
        };
        level = plan.centroids.clone();
        stages.push(plan);
    }
    Ok(ObjectPlan { stages })
}

pub fn init_point_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    config: &PointEncoderConfig,
    rng: &mut impl Rng,
) -> TResult<()> {
    for (s, (st, &cin)) in config.stages.iter().zip(&config.in_widths()).enumerate() {
        let mut c = cin;
        for (j, &w) in st.widths.iter().enumerate() {
            nn::init_linear(store, &format!("{prefix}.sa{s}.mlp{j}"), c, w, 2.0, rng)?;
            c = w;
        }
    }
    let last = config.stages.last().map_or(0, |s| s.out_width());
    // f starts near unit norm, like the embeddings it is added to
    nn::init_linear(store, &format!("{prefix}.proj"), last, config.out_dim, 0.1, rng)?;
    nn::init_linear(store, &format!("{prefix}.cls"), config.out_dim, config.n_classes, 1.0, rng)
}

/// Encodes a batch of planned objects: returns `f` `[n, out_dim]` and class
/// logits `[n, n_classes]`.
pub fn encode_planned<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    config: &PointEncoderConfig,
    plans: &[&ObjectPlan],
) -> TResult<(Var, Var)> {
    let mut features: Option<Var> = None;
    for (s, st) in config.stages.iter().enumerate() {
        let mut rel = Vec::new();
        let mut idx = Vec::new();
        let mut groups = 0;
        let mut base = 0;
        let mut k = 0;
        for plan in plans {
            let sp = &plan.stages[s];
            k = sp.k;
            rel.extend(sp.rel.iter().map(|&x| T::from_f64(x)));
            idx.extend(sp.neighbors.iter().map(|&j| j + base));
            groups += sp.n_groups;
            if s > 0 {
                base += plan.stages[s - 1].n_groups;
            }
        }
        let rows = groups * k;
        let rel = g.constant(&[rows, 3], rel)?;
        let mut x = match features {
            None => rel,
            Some(f) => {
                let gathered = g.gather(f, &idx)?;
                g.concat(&[gathered, rel], 1)?
            }
        };
        for j in 0..st.widths.len() {
            x = nn::linear(g, &format!("{prefix}.sa{s}.mlp{j}"), x)?;
            x = g.relu(x)?;
        }
        let width = st.out_width();
        let grouped = g.reshape(x, &[groups, k, width])?;
        features = Some(g.max_axis(grouped, 1)?);
    }
    let pooled = features.expect("at least one stage");
    let f = nn::linear(g, &format!("{prefix}.proj"), pooled)?;
    let logits = nn::linear(g, &format!("{prefix}.cls"), f)?;
    Ok((f, logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEncoding<T> {
    pub f: Vec<T>,
    pub class_logits: Vec<T>,
}

/// Encodes one normalized cloud outside of any training graph.
pub fn encode_object<T: Scalar>(
    params: &ParamStore<T>,
    prefix: &str,
    config: &PointEncoderConfig,
    points: &[Point],
) -> Result<ObjectEncoding<T>, PointError> {
    let plan = plan_object(points, config)?;
    let mut g = Graph::with_params(params);
    let (f, logits) = encode_planned(&mut g, prefix, config, &[&plan])?;
    Ok(ObjectEncoding {
        f: g.value(f).to_vec(),
        class_logits: g.value(logits).to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect()
    }

    fn min_pairwise(points: &[Point], idx: &[usize]) -> f64 {
        let mut m = f64::INFINITY;
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                m = m.min(dist2(&points[idx[a]], &points[idx[b]]).sqrt());
            }
        }
        m
    }

    #[test]
    fn fps_collinear_picks_ends() {
        let pts: Vec<Point> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 3]);
        let mut all = farthest_point_sample(&pts, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&pts, 5, 0).is_err());
    }

    #[test]
    fn fps_beats_random_subsets() {
        let pts = cloud(200, 1);
        let fps = min_pairwise(&pts, &farthest_point_sample(&pts, 4, 0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx: Vec<usize> = (0..pts.len()).collect();
        for _ in 0..1000 {
            let sub: Vec<usize> = idx.choose_multiple(&mut rng, 4).copied().collect();
            // greedy max-min is a 2-approximation of the optimum
            assert!(2.0 * fps >= min_pairwise(&pts, &sub));
        }
        let beaten = (0..1000)
            .filter(|_| {
                let sub: Vec<usize> = idx.choose_multiple(&mut rng, 4).copied().collect();
                min_pairwise(&pts, &sub) > fps
            })
            .count();
        assert!(beaten < 10, "{beaten}");
    }

    #[test]
    fn ball_includes_centroid_point() {
        let pts = cloud(50, 3);
        let groups = ball_query(&pts, &[pts[7]], 0.2, 8);
        assert_eq!(groups[0][0], 7);
        assert_eq!(groups[0].len(), 8);
    }

    #[test]
    fn huge_radius_truncates() {
        let pts = cloud(30, 4);
        let groups = ball_query(&pts, &[[0.0; 3]], 100.0, 10);
        assert_eq!(groups[0].len(), 10);
        let mut uniq = groups[0].clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
    }

    #[test]
    fn ball_query_matches_exhaustive_scan() {
        let pts = cloud(120, 5);
        let cents = cloud(20, 6);
        let (r, k) = (0.5, 12);
        for (c, got) in cents.iter().zip(ball_query(&pts, &cents, r, k)) {
            let mut by_dist: Vec<usize> = (0..pts.len()).collect();
            by_dist.sort_by(|&a, &b| dist2(&pts[a], c).total_cmp(&dist2(&pts[b], c)));
            let nearest = by_dist[0];
            let inside: Vec<usize> = (0..pts.len())
                .filter(|&i| i != nearest && dist2(&pts[i], c) <= r * r)
                .take(k - 1)
                .collect();
            let mut expected = vec![nearest];
            expected.extend(inside);
            expected.resize(k, nearest);
            assert_eq!(got, expected);
        }
    }

    fn small_config() -> PointEncoderConfig {
        PointEncoderConfig::scaled(8, 5, 64)
    }

    fn store(config: &PointEncoderConfig, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_point_encoder(&mut s, "pe", config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    #[test]
    fn permutation_invariant_and_deterministic() {
        let cfg = small_config();
        let params = store(&cfg, 0);
        let pts = crate::corpus::normalize_points(&cloud(64, 8));
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let a = encode_object(&params, "pe", &cfg, &pts).unwrap();
        let b = encode_object(&params, "pe", &cfg, &pts).unwrap();
        let c = encode_object(&params, "pe", &cfg, &shuffled).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.f.len(), 8);
        assert_eq!(a.class_logits.len(), 5);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let cfg = small_config();
        let params = store(&cfg, 0);
        assert!(matches!(
            encode_object(&params, "pe", &cfg, &cloud(10, 1)),
            Err(PointError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn single_group_all_stage_by_hand() {
        let cfg = PointEncoderConfig {
            n_points: 4,
            stages: vec![SetAbstractionSpec::group_all(vec![2])],
            out_dim: 2,
            n_classes: 1,
        };
        let mut s = ParamStore::<f64>::new();
        let w = [1.0, -1.0, 0.5, 2.0, -0.5, 0.0];
        s.insert("pe.sa0.mlp0.weight", Tensor::new(&[3, 2], w.to_vec()).unwrap()).unwrap();
        s.insert("pe.sa0.mlp0.bias", Tensor::new(&[2], vec![0.1, -0.2]).unwrap()).unwrap();
        s.insert("pe.proj.weight", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        s.insert("pe.proj.bias", Tensor::new(&[2], vec![0.0, 1.0]).unwrap()).unwrap();
        s.insert("pe.cls.weight", Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        s.insert("pe.cls.bias", Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
        let pts: Vec<Point> = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]];
        let mut expected = [f64::NEG_INFINITY; 2];
        for p in &pts {
            for c in 0..2 {
                let z = p[0] * w[c] + p[1] * w[2 + c] + p[2] * w[4 + c] + [0.1, -0.2][c];
                expected[c] = expected[c].max(z.max(0.0));
            }
        }
        let enc = encode_object(&s, "pe", &cfg, &pts).unwrap();
        assert!((enc.f[0] - expected[0]).abs() < 1e-12);
        assert!((enc.f[1] - (expected[1] + 1.0)).abs() < 1e-12);
        assert!((enc.class_logits[0] - (enc.f[0] + enc.f[1])).abs() < 1e-12);
    }

    #[test]
    fn batched_encoding_matches_single() {
        let cfg = small_config();
        let params = store(&cfg, 3);
        let clouds: Vec<Vec<Point>> = (0..3).map(|i| crate::corpus::normalize_points(&cloud(64, 20 + i))).collect();
        let plans: Vec<ObjectPlan> = clouds.iter().map(|c| plan_object(c, &cfg).unwrap()).collect();
        let refs: Vec<&ObjectPlan> = plans.iter().collect();
        let mut g = Graph::with_params(&params);
        let (f, _) = encode_planned(&mut g, "pe", &cfg, &refs).unwrap();
        let batched = g.value(f).to_vec();
        for (i, c) in clouds.iter().enumerate() {
            let single = encode_object(&params, "pe", &cfg, c).unwrap();
            for j in 0..8 {
                assert!((single.f[j] - batched[i * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_count_formula() {
        let cfg = small_config();
        assert_eq!(store(&cfg, 0).num_elements(), cfg.num_parameters());
    }

    #[test]
    fn gradients_pass_through_max_pool() {
        let cfg = PointEncoderConfig {
            n_points: 16,
            stages: vec![
                SetAbstractionSpec::local(4, 0.6, 4, vec![3]),
                SetAbstractionSpec::group_all(vec![4]),
            ],
            out_dim: 3,
            n_classes: 2,
        };
        let mut params = store(&cfg, 11);
        // move biases off the ReLU kink (a centroid's own offset is exactly 0)
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if params.name(id).ends_with(".bias") {
                for x in params.get_mut(id).data_mut() {
                    *x = rng.gen_range(0.05..0.3);
                }
            }
        }
        let plan = plan_object(&crate::corpus::normalize_points(&cloud(16, 12)), &cfg).unwrap();
        let report = crate::tensor::grad_check(
            &mut params,
            |g| {
                let (_, logits) = encode_planned(g, "pe", &cfg, &[&plan])?;
                g.cross_entropy(logits, &[1])
            },
            &Default::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cloud() -> impl Strategy<Value = Vec<Point>> {
            prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..48)
        }

        proptest! {
            #[test]
            fn fps_picks_distinct_points(pts in cloud(), k in 0usize..48) {
                let k = k.min(pts.len());
                let idx = farthest_point_sample(&pts, k, 0).unwrap();
                let mut sorted = idx.clone();
                sorted.sort_unstable();
                sorted.dedup();
                // duplicates in the cloud are the only way to revisit a location
                let distinct = {
                    let mut p: Vec<_> = pts.iter().map(|p| p.map(f64::to_bits)).collect();
                    p.sort_unstable();
                    p.dedup();
                    p.len()
                };
                prop_assert_eq!(idx.len(), k);
                if k <= distinct {
                    prop_assert_eq!(sorted.len(), k);
                }
            }

            #[test]
            fn ball_members_lie_within_the_radius(pts in cloud(), radius in 0.05f64..1.0, m in 1usize..16) {
                let centroids = &pts[..pts.len().min(4)];
                for (c, ball) in centroids.iter().zip(ball_query(&pts, centroids, radius, m)) {
                    prop_assert_eq!(ball.len(), m);
                    for &i in &ball {
                        prop_assert!(dist2(&pts[i], c) <= radius * radius + 1e-12);
                    }
                }
            }
        }
    }
}
