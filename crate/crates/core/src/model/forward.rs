use crate::nn;
use crate::point_encoder::encode_planned;
use crate::tensor::{Graph, Result, Scalar, TensorError, Var};
use crate::transformer::{build_attention_mask, encoder_layer, MaskMode, SPATIAL_DIM};

use super::input::{ClassSource, ModelInput};
use super::vocab::{EOS, PAD, SOS};
use super::{Model, ModelConfig};

/// Fusion outputs plus the bookkeeping the heads and losses need.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `[B, d]`.
    pub cls: Var,
    /// `[B, M, d]` for the words after `[CLS]`; `None` when every sentence is empty.
    pub text: Option<Var>,
    /// `[B, N, d]`.
    pub objects: Var,
    /// `[R, n_classes]` point-encoder logits for the R real objects, batch-major.
    pub point_logits: Var,
    /// Class ids that entered the class embedding, per real object.
    pub used_classes: Vec<usize>,
    /// Ground-truth class ids, per real object.
    pub true_classes: Vec<usize>,
    pub batch: usize,
    /// Words per row of `text` (padded length minus `[CLS]`).
    pub words: usize,
    pub max_objects: usize,
    pub text_valid: Vec<bool>,
    pub obj_valid: Vec<bool>,
}

impl FusionOutput {
    /// Row of a real object in `point_logits`.
    pub fn real_index(&self, b: usize, i: usize) -> Option<usize> {
        if !self.obj_valid[b * self.max_objects + i] {
            return None;
        }
        Some(self.obj_valid[..b * self.max_objects + i].iter().filter(|&&v| v).count())
    }
}

fn stack<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    layers: usize,
    config: &ModelConfig,
    mut x: Var,
    blocked: &[bool],
    spatial: Option<Var>,
) -> Result<Var> {
    for i in 0..layers {
        x = encoder_layer(g, &format!("{prefix}.layer{i}"), x, config.layer_shape(), blocked, spatial)?;
    }
    nn::layer_norm(g, &format!("{prefix}.ln_f"), x)
}

/// `o = f + W_c[c] + W_l·l`, with `f + W_c[c]` swapped for the mask
/// embedding where `masked` is set. `f` is `[R, d]`; returns `[R, d]`.
pub fn compose_object_token<T: Scalar>(
    g: &mut Graph<'_, T>,
    f: Var,
    class_ids: &[usize],
    locations: &[[f64; 6]],
    masked: &[bool],
) -> Result<Var> {
    let r = class_ids.len();
    let d = g.shape(f)[1];
    let wc = g.param_by_name("scene.class_emb")?;
    let c = g.gather(wc, class_ids)?;
    let fc = g.add(f, c)?;
    let mask_emb = g.param_by_name("scene.mask_emb")?;
    let mask_row = g.reshape(mask_emb, &[1, d])?;
    let table = g.concat(&[fc, mask_row], 0)?;
    let rows: Vec<usize> = (0..r).map(|i| if masked[i] { r } else { i }).collect();
    let base = g.gather(table, &rows)?;
    let loc = g.constant(&[r, 6], locations.iter().flatten().map(|&x| T::from_f64(x)).collect())?;
    let wl = g.param_by_name("scene.loc_proj")?;
    let lp = g.matmul(loc, wl)?;
    g.add(base, lp)
}

/// Text encoder, scene encoder and fusion for a whole batch.
pub fn forward<T: Scalar>(g: &mut Graph<'_, T>, config: &ModelConfig, input: &ModelInput) -> Result<FusionOutput> {
    let b = input.len();
    let d = config.d;
    let m = input.text_len();
    let n = input.max_objects();
    if m > config.max_text_len + 1 {
        return Err(TensorError::IndexOutOfRange {
            what: "text length",
            index: m,
            size: config.max_text_len + 1,
        });
    }
    if n > config.max_objects || n == 0 {
        return Err(TensorError::IndexOutOfRange {
            what: "object count",
            index: n,
            size: config.max_objects,
        });
    }

    // text stream
    let mut ids = vec![PAD; b * m];
    let mut text_valid = vec![false; b * m];
    for (s, t) in input.text.iter().enumerate() {
        for (p, &id) in t.iter().enumerate() {
            ids[s * m + p] = id;
            text_valid[s * m + p] = true;
        }
    }
    let tok_table = g.param_by_name("text.tok_emb")?;
    let tok = g.gather(tok_table, &ids)?;
    let tok = g.reshape(tok, &[b, m, d])?;
    let pos_table = g.param_by_name("text.pos_emb")?;
    let pos = g.slice(pos_table, 0, 0, m)?;
    let x = g.add(tok, pos)?;
    let text_mask: Vec<bool> = (0..b)
        .flat_map(|s| build_attention_mask(input.mode, &text_valid[s * m..(s + 1) * m], &[]))
        .collect();
    let text = stack(g, "text", config.text_layers, config, x, &text_mask, None)?;

    // scene stream
    let mut obj_valid = vec![false; b * n];
    let mut plans = Vec::new();
    let mut gt = Vec::new();
    let mut locations = Vec::new();
    let mut masked = Vec::new();
    for (s, scene) in input.scenes.iter().enumerate() {
        for (i, o) in scene.objects.iter().enumerate() {
            obj_valid[s * n + i] = true;
            plans.push(o.plan.as_ref());
            gt.push(o.class_id);
            locations.push(o.location);
            masked.push(input.is_masked(s, i));
        }
    }
    let r = plans.len();
    let (f, point_logits) = encode_planned(g, "point", &config.point_config(), &plans)?;
    let used_classes = match input.classes {
        ClassSource::GroundTruth => gt.clone(),
        ClassSource::Predicted => g
            .value(point_logits)
            .chunks(config.n_classes)
            .map(nn::argmax)
            .collect(),
    };
    let tokens = compose_object_token(g, f, &used_classes, &locations, &masked)?;
    let zero = g.constant(&[1, d], vec![T::zero(); d])?;
    let padded_table = g.concat(&[tokens, zero], 0)?;
    let mut slot_rows = vec![r; b * n];
    let mut k = 0;
    for (slot, &v) in obj_valid.iter().enumerate() {
        if v {
            slot_rows[slot] = k;
            k += 1;
        }
    }
    let objs = g.gather(padded_table, &slot_rows)?;
    let objs = g.reshape(objs, &[b, n, d])?;
    let mut spatial = vec![T::zero(); b * n * n * SPATIAL_DIM];
    for (s, scene) in input.scenes.iter().enumerate() {
        let ns = scene.len();
        for i in 0..ns {
            for j in 0..ns {
                let at = ((s * n + i) * n + j) * SPATIAL_DIM;
                for (c, &v) in scene.spatial.get(i, j).iter().enumerate() {
                    spatial[at + c] = T::from_f64(v);
                }
            }
        }
    }
    let spatial = g.constant(&[b * n * n, SPATIAL_DIM], spatial)?;
    let obj_mask: Vec<bool> = (0..b)
        .flat_map(|s| build_attention_mask(MaskMode::Bidirectional, &[], &obj_valid[s * n..(s + 1) * n]))
        .collect();
    let objs = stack(g, "scene", config.scene_layers, config, objs, &obj_mask, Some(spatial))?;

    // fusion
    let l = m + n;
    let x = g.concat(&[text, objs], 1)?;
    let type_table = g.param_by_name("fusion.type_emb")?;
    let types: Vec<usize> = (0..l).map(|p| usize::from(p >= m)).collect();
    let type_emb = g.gather(type_table, &types)?;
    let mut x = g.add(x, type_emb)?;
    if input.caption_target.iter().any(Option::is_some) {
        let target = g.param_by_name("fusion.caption_target")?;
        let table = g.concat(&[zero, target], 0)?;
        let mut rows = vec![0; b * l];
        for (s, t) in input.caption_target.iter().enumerate() {
            if let Some(i) = *t {
                rows[s * l + m + i] = 1;
            }
        }
        let add = g.gather(table, &rows)?;
        let add = g.reshape(add, &[b, l, d])?;
        x = g.add(x, add)?;
    }
    let fusion_mask: Vec<bool> = (0..b)
        .flat_map(|s| {
            build_attention_mask(
                input.mode,
                &text_valid[s * m..(s + 1) * m],
                &obj_valid[s * n..(s + 1) * n],
            )
        })
        .collect();
    let x = stack(g, "fusion", config.fusion_layers, config, x, &fusion_mask, None)?;
    let cls = g.slice(x, 1, 0, 1)?;
    let cls = g.reshape(cls, &[b, d])?;
    let text_out = if m > 1 { Some(g.slice(x, 1, 1, m - 1)?) } else { None };
    let objects = g.slice(x, 1, m, n)?;
    Ok(FusionOutput {
        cls,
        text: text_out,
        objects,
        point_logits,
        used_classes,
        true_classes: gt,
        batch: b,
        words: m - 1,
        max_objects: n,
        text_valid,
        obj_valid,
    })
}

/// Per-object scores `[B, N]`; padding slots are pushed to the mask fill value.
pub fn grounding_logits<T: Scalar>(g: &mut Graph<'_, T>, out: &FusionOutput) -> Result<Var> {
    let s = nn::mlp2(g, "head.ground", out.objects)?;
    let s = g.reshape(s, &[out.batch, out.max_objects])?;
    let pad: Vec<bool> = out.obj_valid.iter().map(|v| !v).collect();
    g.masked_fill(s, &pad)
}

/// `[B, M, vocab]`.
pub fn mlm_logits<T: Scalar>(g: &mut Graph<'_, T>, out: &FusionOutput) -> Result<Option<Var>> {
    out.text.map(|t| nn::linear(g, "head.mlm", t)).transpose()
}

/// `[B, N, n_classes]`.
pub fn mom_logits<T: Scalar>(g: &mut Graph<'_, T>, out: &FusionOutput) -> Result<Var> {
    nn::linear(g, "head.mom", out.objects)
}

/// `[B, 2]`; index 1 means "matched".
pub fn stm_logits<T: Scalar>(g: &mut Graph<'_, T>, out: &FusionOutput) -> Result<Var> {
    nn::mlp2(g, "head.stm", out.cls)
}

/// `[B, n_answers]`.
pub fn qa_logits<T: Scalar>(g: &mut Graph<'_, T>, out: &FusionOutput) -> Result<Var> {
    nn::mlp2(g, "head.qa", out.cls)
}

/// Next-token logits after `prefix` (which starts with `[CLS] [SOS]`).
pub fn caption_step<T: Scalar>(model: &Model<T>, input: &ModelInput) -> Result<Vec<Vec<T>>> {
    debug_assert_eq!(input.mode, MaskMode::Caption);
    let mut g = Graph::with_params(&model.params);
    let out = forward(&mut g, &model.config, input)?;
    let logits = mlm_logits(&mut g, &out)?.expect("caption prefix has [SOS]");
    let v = model.config.vocab_size;
    let values = g.value(logits);
    Ok(input
        .text
        .iter()
        .enumerate()
        .map(|(s, t)| {
            let last = t.len() - 2;
            values[(s * out.words + last) * v..(s * out.words + last + 1) * v].to_vec()
        })
        .collect())
}

/// Greedy caption for `object` of the prepared scene; stops at `[EOS]` or the
/// length limit. Returns word ids without the `[SOS]`/`[EOS]` markers.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    scene: std::sync::Arc<super::PreparedScene>,
    object: usize,
) -> Result<Vec<usize>> {
    let mut prefix = vec![super::CLS, SOS];
    let mut words = Vec::new();
    while prefix.len() < model.config.max_text_len + 1 {
        let mut input = ModelInput::new(vec![scene.clone()], vec![prefix.clone()])
            .with_mode(MaskMode::Caption)
            .with_classes(ClassSource::Predicted);
        input.caption_target = vec![Some(object)];
        let logits = caption_step(model, &input)?;
        let next = nn::argmax(&logits[0]);
        if next == EOS {
            break;
        }
        words.push(next);
        prefix.push(next);
    }
    Ok(words)
}
