//! Pre-norm transformer blocks with optional pairwise spatial attention bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn;
use crate::tensor::{Graph, ParamStore, Result, Scalar, Tensor, Var};

pub const SPATIAL_DIM: usize = 5;

/// `s_ij = [d, sin θh, cos θh, sin θv, cos θv]` for every ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatures {
    pub n: usize,
    pub data: Vec<[f64; SPATIAL_DIM]>,
}

impl SpatialFeatures {
    pub fn get(&self, i: usize, j: usize) -> [f64; SPATIAL_DIM] {
        self.data[i * self.n + j]
    }
}

/// Distance and direction angles from center `i` to center `j`.
pub fn spatial_pair(a: [f64; 3], b: [f64; 3]) -> [f64; SPATIAL_DIM] {
    let (dx, dy, dz) = (b[0] - a[0], b[1] - a[1], b[2] - a[2]);
    let horizontal = (dx * dx + dy * dy).sqrt();
    let d = (horizontal * horizontal + dz * dz).sqrt();
    let theta_h = if horizontal == 0.0 { 0.0 } else { dy.atan2(dx) };
    let theta_v = dz.atan2(horizontal);
    [d, theta_h.sin(), theta_h.cos(), theta_v.sin(), theta_v.cos()]
}

pub fn pairwise_spatial_features(centers: &[[f64; 3]]) -> SpatialFeatures {
    let n = centers.len();
    let mut data = Vec::with_capacity(n * n);
    for a in centers {
        for b in centers {
            data.push(spatial_pair(*a, *b));
        }
    }
    SpatialFeatures { n, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    #[default]
    Bidirectional,
    Caption,
}

/// `L × L` block matrix (true = no attention) over `[text | objects]`.
///
/// Padding columns are blocked in every row. In caption mode text rows are
/// causal and object rows never see text.
pub fn build_attention_mask(mode: MaskMode, text_valid: &[bool], obj_valid: &[bool]) -> Vec<bool> {
    let m = text_valid.len();
    let valid: Vec<bool> = text_valid.iter().chain(obj_valid).copied().collect();
    let l = valid.len();
    let mut blocked = vec![false; l * l];
    for r in 0..l {
        for c in 0..l {
            let mut b = !valid[c];
            if mode == MaskMode::Caption {
                let (row_text, col_text) = (r < m, c < m);
                b |= (row_text && col_text && c > r) || (!row_text && col_text);
            }
            blocked[r * l + c] = b;
        }
    }
    blocked
}

/// The same mask as additive logits: 0 where allowed, −∞ where blocked.
pub fn additive_mask(blocked: &[bool]) -> Vec<f64> {
    blocked
        .iter()
        .map(|&b| if b { f64::NEG_INFINITY } else { 0.0 })
        .collect()
}

/// Scaled dot-product attention over `[B, L, d]` projections.
///
/// `blocked` is `B·L·L`; `bias` (if any) is `[B·L·L, heads]` and is added to
/// the logits before masking. Returns the concatenated heads and the
/// per-head attention weights.
pub fn attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    blocked: &[bool],
    bias: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let shape = g.shape(q).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice(q, 2, h * dh, dh)?;
        let kh = g.slice(k, 2, h * dh, dh)?;
        let vh = g.slice(v, 2, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let mut logits = g.matmul(qh, kt)?;
        logits = g.scale(logits, scale)?;
        if let Some(bias) = bias {
            let bh = g.slice(bias, 1, h, 1)?;
            let bh = g.reshape(bh, &[b, l, l])?;
            logits = g.add(logits, bh)?;
        }
        let logits = g.masked_fill(logits, blocked)?;
        let w = g.softmax(logits)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if n_heads == 1 { heads[0] } else { g.concat(&heads, 2)? };
    Ok((out, weights))
}

/// `log σ(S·w)` for every pair and head: `[B·L·L, heads]`.
pub fn spatial_bias<T: Scalar>(g: &mut Graph<'_, T>, s: Var, w: Var) -> Result<Var> {
    let z = g.matmul(s, w)?;
    g.log_sigmoid(z)
}

/// Q/K/V/output projections around [`attend`]; the spatial variant adds
/// `log σ(S·w)` with `w` stored as `{prefix}.spatial_w` `[5, heads]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: Var,
    n_heads: usize,
    blocked: &[bool],
    spatial: Option<Var>,
) -> Result<Var> {
    let q = nn::linear(g, &format!("{prefix}.q"), x)?;
    let k = nn::linear(g, &format!("{prefix}.k"), x)?;
    let v = nn::linear(g, &format!("{prefix}.v"), x)?;
    let bias = match spatial {
        Some(s) => {
            let w = g.param_by_name(&format!("{prefix}.spatial_w"))?;
            Some(spatial_bias(g, s, w)?)
        }
        None => None,
    };
    let (heads, _) = attend(g, q, k, v, n_heads, blocked, bias)?;
    nn::linear(g, &format!("{prefix}.o"), heads)
}

pub fn init_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    n_heads: usize,
    spatial: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        nn::init_linear(store, &format!("{prefix}.{p}"), d, d, 1.0, rng)?;
    }
    if spatial {
        store.insert(format!("{prefix}.spatial_w"), Tensor::zeros(&[SPATIAL_DIM, n_heads]))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerShape {
    pub d: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub dropout: f64,
}

pub fn init_encoder_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    shape: LayerShape,
    spatial: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    nn::init_layer_norm(store, &format!("{prefix}.ln1"), shape.d)?;
    init_attention(store, &format!("{prefix}.attn"), shape.d, shape.n_heads, spatial, rng)?;
    nn::init_layer_norm(store, &format!("{prefix}.ln2"), shape.d)?;
    nn::init_mlp2(store, &format!("{prefix}.ffn"), [shape.d, shape.d_ff, shape.d], rng)
}

/// Parameters of one layer as a function of its shape.
pub fn encoder_layer_parameters(shape: LayerShape, spatial: bool) -> usize {
    let LayerShape { d, d_ff, n_heads, .. } = shape;
    let attn = 4 * (d * d + d) + if spatial { SPATIAL_DIM * n_heads } else { 0 };
    2 * 2 * d + attn + (d * d_ff + d_ff) + (d_ff * d + d)
}

/// `x + Attn(LN(x))`, then `+ FFN(LN(·))` with a GELU FFN.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: Var,
    shape: LayerShape,
    blocked: &[bool],
    spatial: Option<Var>,
) -> Result<Var> {
    let h = nn::layer_norm(g, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(g, &format!("{prefix}.attn"), h, shape.n_heads, blocked, spatial)?;
    let a = g.dropout(a, shape.dropout)?;
    let x = g.add(x, a)?;
    let h = nn::layer_norm(g, &format!("{prefix}.ln2"), x)?;
    let f = nn::mlp2(g, &format!("{prefix}.ffn"), h)?;
    let f = g.dropout(f, shape.dropout)?;
    g.add(x, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn along_x_and_vertical() {
        let s = pairwise_spatial_features(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert_eq!(s.get(0, 1), [1.0, 0.0, 1.0, 0.0, 1.0]);
        let s = pairwise_spatial_features(&[[0.0; 3], [0.0, 0.0, 2.0]]);
        let v = s.get(0, 1);
        assert_eq!([v[0], v[1], v[2]], [2.0, 0.0, 1.0]);
        assert!((v[3] - 1.0).abs() < 1e-15 && v[4].abs() < 1e-15);
        assert_eq!(s.get(0, 0), [0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn caption_mask_rules() {
        let m = build_attention_mask(MaskMode::Caption, &[true; 3], &[true; 2]);
        let at = |r: usize, c: usize| m[r * 5 + c];
        assert!(!at(0, 0) && at(0, 1) && at(0, 2));
        assert!(!at(0, 3) && !at(0, 4));
        for r in 3..5 {
            for c in 0..3 {
                assert!(at(r, c));
            }
            assert!(!at(r, 3) && !at(r, 4));
        }
        assert!(!at(2, 0) && !at(2, 1) && !at(2, 2));
    }

    #[test]
    fn padding_blocked_in_both_modes() {
        for mode in [MaskMode::Bidirectional, MaskMode::Caption] {
            let m = build_attention_mask(mode, &[true, true, false], &[true, false]);
            for r in 0..5 {
                assert!(m[r * 5 + 2] && m[r * 5 + 4]);
            }
        }
        let open = build_attention_mask(MaskMode::Bidirectional, &[true; 2], &[true; 3]);
        assert!(open.iter().all(|&b| !b));
        assert!(additive_mask(&open).iter().all(|&x| x == 0.0));
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Per-head loops over plain slices.
    fn naive_attention(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        l: usize,
        d: usize,
        heads: usize,
        bias: Option<&[f64]>,
    ) -> Vec<f64> {
        let dh = d / heads;
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            for i in 0..l {
                let mut logits: Vec<f64> = (0..l)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|t| q[i * d + h * dh + t] * k[j * d + h * dh + t]).sum();
                        dot / (dh as f64).sqrt() + bias.map_or(0.0, |b| b[(i * l + j) * heads + h])
                    })
                    .collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                logits.iter_mut().for_each(|x| *x = (*x - mx).exp());
                let z: f64 = logits.iter().sum();
                for j in 0..l {
                    for t in 0..dh {
                        out[i * d + h * dh + t] += logits[j] / z * v[j * d + h * dh + t];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn two_head_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, d) = (5, 8);
        let (q, k, v) = (
            rand_tensor(&[1, l, d], &mut rng),
            rand_tensor(&[1, l, d], &mut rng),
            rand_tensor(&[1, l, d], &mut rng),
        );
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
        let (out, weights) = attend(&mut g, qv, kv, vv, 2, &vec![false; l * l], None).unwrap();
        let expected = naive_attention(q.data(), k.data(), v.data(), l, d, 2, None);
        for (a, b) in g.value(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in weights {
            for row in g.value(w).chunks(l) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_bias_matches_explicit_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, d, heads) = (4, 6, 3);
        let centers: Vec<[f64; 3]> = (0..l).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..5.0))).collect();
        let sf = pairwise_spatial_features(&centers);
        let s = Tensor::new(&[l * l, 5], sf.data.iter().flatten().copied().collect()).unwrap();
        let w = rand_tensor(&[5, heads], &mut rng);
        let (q, k, v) = (
            rand_tensor(&[1, l, d], &mut rng),
            rand_tensor(&[1, l, d], &mut rng),
            rand_tensor(&[1, l, d], &mut rng),
        );
        let mut bias = vec![0.0; l * l * heads];
        for p in 0..l * l {
            for h in 0..heads {
                let z: f64 = (0..5).map(|c| s.data()[p * 5 + c] * w.data()[c * heads + h]).sum();
                bias[p * heads + h] = (1.0 / (1.0 + (-z).exp())).ln();
            }
        }
        let mut g = Graph::<f64>::new();
        let (sv, wv) = (g.leaf(s), g.leaf(w));
        let b = spatial_bias(&mut g, sv, wv).unwrap();
        let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
        let (out, _) = attend(&mut g, qv, kv, vv, heads, &vec![false; l * l], Some(b)).unwrap();
        let expected = naive_attention(q.data(), k.data(), v.data(), l, d, heads, Some(&bias));
        for (a, b) in g.value(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.value(b).iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn single_key_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let q = g.leaf(rand_tensor(&[1, 1, 4], &mut rng));
        let k = g.leaf(rand_tensor(&[1, 1, 4], &mut rng));
        let vt = rand_tensor(&[1, 1, 4], &mut rng);
        let v = g.leaf(vt.clone());
        let (out, _) = attend(&mut g, q, k, v, 2, &[false], None).unwrap();
        for (a, b) in g.value(out).iter().zip(vt.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let q = g.leaf(rand_tensor(&[1, 2, 2], &mut rng));
        let k = g.leaf(Tensor::new(&[1, 3, 2], vec![0.3, -0.2, 0.3, -0.2, 0.3, -0.2]).unwrap());
        let v = g.leaf(Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let kt = g.transpose(k).unwrap();
        let logits = g.matmul(q, kt).unwrap();
        let w = g.softmax(logits).unwrap();
        let out = g.matmul(w, v).unwrap();
        for row in g.value(out).chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 4.0).abs() < 1e-12);
        }
    }

    fn layer_store(shape: LayerShape, spatial: bool, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_encoder_layer(&mut s, "l", shape, spatial, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    #[test]
    fn zero_output_projections_make_identity() {
        let shape = LayerShape {
            d: 8,
            d_ff: 16,
            n_heads: 2,
            dropout: 0.0,
        };
        let mut s = layer_store(shape, false, 4);
        for name in ["l.attn.o.weight", "l.attn.o.bias", "l.ffn.1.weight", "l.ffn.1.bias"] {
            s.by_name_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 3, 8], &mut rng);
        let mut g = Graph::with_params(&s);
        let xv = g.leaf(x.clone());
        let y = encoder_layer(&mut g, "l", xv, shape, &vec![false; 18], None).unwrap();
        assert_eq!(g.value(y), x.data());
        assert_eq!(s.num_elements(), encoder_layer_parameters(shape, false));
        assert_eq!(layer_store(shape, true, 4).num_elements(), encoder_layer_parameters(shape, true));
    }

    #[test]
    fn zero_spatial_weights_are_neutral() {
        let shape = LayerShape {
            d: 8,
            d_ff: 16,
            n_heads: 2,
            dropout: 0.0,
        };
        let s = layer_store(shape, true, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[1, 4, 8], &mut rng);
        let centers: Vec<[f64; 3]> = (0..4).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..5.0))).collect();
        let sf = pairwise_spatial_features(&centers);
        let st = Tensor::new(&[16, 5], sf.data.iter().flatten().copied().collect()).unwrap();
        let mut g = Graph::with_params(&s);
        let xv = g.leaf(x);
        let sv = g.leaf(st);
        let with = encoder_layer(&mut g, "l", xv, shape, &[false; 16], Some(sv)).unwrap();
        let without = encoder_layer(&mut g, "l", xv, shape, &[false; 16], None).unwrap();
        for (a, b) in g.value(with).iter().zip(g.value(without)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn center() -> impl Strategy<Value = [f64; 3]> {
            prop::array::uniform3(-10.0f64..10.0)
        }

        proptest! {
            #[test]
            fn pair_features_are_translation_invariant(a in center(), b in center(), t in center()) {
                let shift = |p: [f64; 3]| [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
                let (x, y) = (spatial_pair(a, b), spatial_pair(shift(a), shift(b)));
                for k in 0..SPATIAL_DIM {
                    prop_assert!((x[k] - y[k]).abs() < 1e-9);
                }
            }

            #[test]
            fn swapping_a_pair_flips_directions(a in center(), b in center()) {
                let (x, y) = (spatial_pair(a, b), spatial_pair(b, a));
                prop_assert_eq!(x[0], y[0]);
                prop_assert!((x[3] + y[3]).abs() < 1e-12);
                prop_assert!((x[4] - y[4]).abs() < 1e-12);
                if (a[0] - b[0]).hypot(a[1] - b[1]) > 1e-6 {
                    prop_assert!((x[1] + y[1]).abs() < 1e-9 && (x[2] + y[2]).abs() < 1e-9);
                }
            }

            #[test]
            fn angles_lie_on_the_unit_circle(a in center(), b in center()) {
                let s = spatial_pair(a, b);
                prop_assert!(s[0] >= 0.0);
                prop_assert!((s[1].hypot(s[2]) - 1.0).abs() < 1e-12);
                prop_assert!((s[3].hypot(s[4]) - 1.0).abs() < 1e-12);
                prop_assert!(s[4] >= 0.0);
            }
        }
    }
}
