//! The full model: text encoder, spatial scene encoder, fusion stack and
//! task heads, all reading weights from one [`ParamStore`].

mod checkpoint;
mod forward;
mod input;
mod vocab;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{
    caption_step, compose_object_token, forward, greedy_decode, grounding_logits, mlm_logits, mom_logits,
    qa_logits, stm_logits, FusionOutput,
};
pub use input::{ClassSource, ModelInput, PlanCache, PreparedObject, PreparedScene};
pub use vocab::{tokenize, TokenVocabulary, CLS, EOS, MASK, PAD, RESERVED, SOS, UNK};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn;
use crate::point_encoder::{init_point_encoder, PointEncoderConfig};
use crate::tensor::{DType, ParamStore, Result, Scalar};
use crate::transformer::{encoder_layer_parameters, init_encoder_layer, LayerShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub text_layers: usize,
    pub scene_layers: usize,
    pub fusion_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub n_answers: usize,
    /// Maximum words per sentence, `[CLS]` excluded.
    pub max_text_len: usize,
    pub max_objects: usize,
    pub n_points: usize,
    pub grounding_hidden: usize,
    pub text_mask_ratio: f64,
    pub object_mask_ratio: f64,
    pub stm_negative_ratio: f64,
    pub dropout: f64,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = 64;
        Self {
            d,
            n_heads: 4,
            text_layers: 4,
            scene_layers: 4,
            fusion_layers: 4,
            // the 2048 / 768 ratio of a BERT-base block
            d_ff: d * 8 / 3,
            vocab_size: 64,
            n_classes: 20,
            n_answers: 20,
            max_text_len: 40,
            max_objects: 12,
            n_points: 256,
            grounding_hidden: d / 2,
            text_mask_ratio: 0.15,
            object_mask_ratio: 0.10,
            stm_negative_ratio: 0.30,
            dropout: 0.0,
            dtype: DType::F32,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for gradient checks.
    pub fn tiny(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            d: 8,
            n_heads: 2,
            text_layers: 1,
            scene_layers: 1,
            fusion_layers: 1,
            d_ff: 16,
            vocab_size,
            n_classes,
            n_answers: n_classes,
            max_text_len: 5,
            max_objects: 3,
            n_points: 32,
            grounding_hidden: 4,
            dtype: DType::F64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(format!("d = {} must be a positive multiple of n_heads = {}", self.d, self.n_heads));
        }
        for (name, r) in [
            ("text_mask_ratio", self.text_mask_ratio),
            ("object_mask_ratio", self.object_mask_ratio),
            ("stm_negative_ratio", self.stm_negative_ratio),
            ("dropout", self.dropout),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(format!("{name} = {r} outside [0, 1]"));
            }
        }
        if self.vocab_size <= RESERVED.len() || self.n_classes == 0 || self.n_answers == 0 {
            return Err("vocabulary, class and answer sets must be nonempty".into());
        }
        if self.max_objects == 0 || self.d_ff == 0 || self.grounding_hidden == 0 {
            return Err("max_objects, d_ff and grounding_hidden must be positive".into());
        }
        self.point_config().validate().map_err(|e| e.to_string())
    }

    pub fn layer_shape(&self) -> LayerShape {
        LayerShape {
            d: self.d,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            dropout: self.dropout,
        }
    }

    pub fn point_config(&self) -> PointEncoderConfig {
        PointEncoderConfig::scaled(self.d, self.n_classes, self.n_points)
    }

    /// Closed-form trainable parameter count.
    pub fn num_parameters(&self) -> usize {
        let d = self.d;
        let shape = self.layer_shape();
        let plain = encoder_layer_parameters(shape, false);
        let spatial = encoder_layer_parameters(shape, true);
        let text = self.vocab_size * d + (self.max_text_len + 1) * d + self.text_layers * plain + 2 * d;
        let scene = self.point_config().num_parameters()
            + self.n_classes * d
            + 6 * d
            + d
            + self.scene_layers * spatial
            + 2 * d;
        let fusion = 2 * d + d + self.fusion_layers * plain + 2 * d;
        let mlp2 = |a: usize, h: usize, o: usize| a * h + h + h * o + o;
        let heads = (d * self.vocab_size + self.vocab_size)
            + (d * self.n_classes + self.n_classes)
            + mlp2(d, d / 2, 2)
            + mlp2(d, self.grounding_hidden, 1)
            + mlp2(d, d, self.n_answers);
        text + scene + fusion + heads
    }
}

/// Weights plus everything needed to interpret them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: TokenVocabulary,
    pub classes: Vec<String>,
    pub params: ParamStore<T>,
}

fn embedding<T: Scalar>(store: &mut ParamStore<T>, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert(name, nn::normal(shape, std, rng))?;
    Ok(())
}

impl<T: Scalar> Model<T> {
    pub fn new(mut config: ModelConfig, vocab: TokenVocabulary, classes: Vec<String>, seed: u64) -> crate::Result<Self> {
        config.vocab_size = vocab.len();
        config.n_classes = classes.len();
        // answers are class names
        config.n_answers = classes.len();
        config.validate().map_err(crate::Error::Config)?;
        let params = init_params(&config, seed)?;
        Ok(Self {
            config,
            vocab,
            classes,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            classes: self.classes.clone(),
            params: self.params.cast(),
        }
    }
}

/// Registers every parameter; names are stable and unique.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let d = config.d;
    // rows of unit norm
    let emb_std = 1.0 / (d as f64).sqrt();
    let shape = config.layer_shape();

    embedding(&mut s, "text.tok_emb", &[config.vocab_size, d], emb_std, &mut rng)?;
    embedding(&mut s, "text.pos_emb", &[config.max_text_len + 1, d], emb_std, &mut rng)?;
    for i in 0..config.text_layers {
        init_encoder_layer(&mut s, &format!("text.layer{i}"), shape, false, &mut rng)?;
    }
    nn::init_layer_norm(&mut s, "text.ln_f", d)?;

    init_point_encoder(&mut s, "point", &config.point_config(), &mut rng)?;
    embedding(&mut s, "scene.class_emb", &[config.n_classes, d], emb_std, &mut rng)?;
    // location entries are meters, up to a few units each
    embedding(&mut s, "scene.loc_proj", &[6, d], 0.3 / 6f64.sqrt(), &mut rng)?;
    embedding(&mut s, "scene.mask_emb", &[d], emb_std, &mut rng)?;
    for i in 0..config.scene_layers {
        init_encoder_layer(&mut s, &format!("scene.layer{i}"), shape, true, &mut rng)?;
    }
    nn::init_layer_norm(&mut s, "scene.ln_f", d)?;

    embedding(&mut s, "fusion.type_emb", &[2, d], emb_std, &mut rng)?;
    embedding(&mut s, "fusion.caption_target", &[1, d], emb_std, &mut rng)?;
    for i in 0..config.fusion_layers {
        init_encoder_layer(&mut s, &format!("fusion.layer{i}"), shape, false, &mut rng)?;
    }
    nn::init_layer_norm(&mut s, "fusion.ln_f", d)?;

    // prediction heads start close to uniform
    nn::init_linear(&mut s, "head.mlm", d, config.vocab_size, 0.01, &mut rng)?;
    nn::init_linear(&mut s, "head.mom", d, config.n_classes, 0.01, &mut rng)?;
    nn::init_mlp2(&mut s, "head.stm", [d, d / 2, 2], &mut rng)?;
    nn::init_mlp2(&mut s, "head.ground", [d, config.grounding_hidden, 1], &mut rng)?;
    nn::init_mlp2(&mut s, "head.qa", [d, d, config.n_answers], &mut rng)?;
    Ok(s)
}

/// Sets every parameter whose name starts with `prefix` to zero.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
    }
}

#[cfg(test)]
mod tests;
