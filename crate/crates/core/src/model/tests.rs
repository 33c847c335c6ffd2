use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_scene, CorpusConfig, Scene};
use crate::tensor::{Graph, Tensor};
use crate::transformer::MaskMode;

fn vocab() -> TokenVocabulary {
    TokenVocabulary::build(["this is a chair table lamp left of the , and"])
}

fn classes(n: usize) -> Vec<String> {
    crate::corpus::default_classes().into_iter().take(n).map(|c| c.name).collect()
}

fn tiny_model(seed: u64) -> Model<f64> {
    Model::new(ModelConfig::tiny(0, 0), vocab(), classes(20), seed).unwrap()
}

fn scene(seed: u64, n: usize) -> Scene {
    let cfg = CorpusConfig {
        objects_per_scene: (n, n),
        ..Default::default()
    };
    generate_scene(seed, &cfg).unwrap()
}

fn prepared(model: &Model<f64>, seed: u64, n: usize) -> Arc<PreparedScene> {
    let mut cache = PlanCache::new(model.config.point_config());
    Arc::new(cache.prepare(&scene(seed, n)).unwrap())
}

fn run(model: &Model<f64>, input: &ModelInput) -> (Vec<f64>, Option<Vec<f64>>, Vec<f64>) {
    let mut g = Graph::with_params(&model.params);
    let out = forward(&mut g, &model.config, input).unwrap();
    (
        g.value(out.cls).to_vec(),
        out.text.map(|t| g.value(t).to_vec()),
        g.value(out.objects).to_vec(),
    )
}

#[test]
fn parameter_count_matches_closed_form() {
    let m = tiny_model(0);
    assert_eq!(m.params.num_elements(), m.config.num_parameters());
    let full: Model<f32> = Model::new(ModelConfig::default(), vocab(), classes(20), 0).unwrap();
    assert_eq!(full.params.num_elements(), full.config.num_parameters());
}

#[test]
fn composed_token_parameters_each_have_one_entry() {
    let m = tiny_model(0);
    for name in ["scene.class_emb", "scene.loc_proj", "scene.mask_emb", "fusion.type_emb", "scene.layer0.attn.spatial_w"] {
        assert!(m.params.by_name(name).is_some(), "{name}");
    }
    assert_eq!(m.params.by_name("scene.layer0.attn.spatial_w").unwrap().shape(), [5, 2]);
    assert!(m.params.by_name("fusion.layer0.attn.spatial_w").is_none());
    assert!(m.params.by_name("text.layer0.attn.spatial_w").is_none());
}

#[test]
fn object_token_oracles() {
    let mut m = tiny_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = Tensor::<f64>::from_fn(&[2, 8], |_| rng.gen_range(-1.0..1.0));
    let loc = [[1.0, 2.0, 0.5, 0.4, 0.3, 0.2], [3.0, 1.0, 0.1, 1.0, 1.0, 1.0]];

    let tok = |m: &Model<f64>, f: &Tensor<f64>, loc: &[[f64; 6]], masked: &[bool]| {
        let mut g = Graph::with_params(&m.params);
        let fv = g.leaf(f.clone());
        let o = compose_object_token(&mut g, fv, &[3, 7], loc, masked).unwrap();
        g.value(o).to_vec()
    };
    let wc = m.params.by_name("scene.class_emb").unwrap().data().to_vec();
    let wl = m.params.by_name("scene.loc_proj").unwrap().data().to_vec();
    let mask = m.params.by_name("scene.mask_emb").unwrap().data().to_vec();
    let got = tok(&m, &f, &loc, &[false, true]);
    for j in 0..8 {
        let lp = |r: usize| (0..6).map(|k| loc[r][k] * wl[k * 8 + j]).sum::<f64>();
        let expected0 = f.data()[j] + wc[3 * 8 + j] + lp(0);
        assert!((got[j] - expected0).abs() < 1e-12);
        // masked: mask embedding plus the location term only
        assert!((got[8 + j] - (mask[j] + lp(1))).abs() < 1e-12);
    }
    let zero_f = Tensor::zeros(&[2, 8]);
    let got = tok(&m, &zero_f, &[[0.0; 6]; 2], &[false, false]);
    assert_eq!(&got[..8], &wc[24..32]);
    zero_params(&mut m.params, "scene.class_emb");
    zero_params(&mut m.params, "scene.loc_proj");
    assert_eq!(tok(&m, &f, &loc, &[false, false]), f.data());
}

#[test]
fn empty_sentence_is_cls_only() {
    let m = tiny_model(3);
    let s = prepared(&m, 1, 3);
    let (cls, text, _) = run(&m, &ModelInput::new(vec![s], vec![vec![CLS]]));
    assert_eq!(cls.len(), 8);
    assert!(text.is_none());
}

#[test]
fn position_embeddings_are_active() {
    let m = tiny_model(4);
    let s = prepared(&m, 2, 3);
    let v = &m.vocab;
    let a = vec![CLS, v.id("chair"), v.id("table")];
    let b = vec![CLS, v.id("table"), v.id("chair")];
    let (ca, _, _) = run(&m, &ModelInput::new(vec![s.clone()], vec![a]));
    let (cb, _, _) = run(&m, &ModelInput::new(vec![s], vec![b]));
    assert_ne!(ca, cb);
}

#[test]
fn caption_mode_information_barrier() {
    let m = tiny_model(5);
    let s = prepared(&m, 3, 3);
    let v = &m.vocab;
    let a = vec![CLS, SOS, v.id("chair"), v.id("left")];
    let b = vec![CLS, SOS, v.id("chair"), v.id("lamp")];
    let c = vec![CLS, SOS, v.id("table"), v.id("lamp"), v.id("of")];
    let mk = |t: Vec<usize>| ModelInput::new(vec![s.clone()], vec![t]).with_mode(MaskMode::Caption);
    let (_, ta, oa) = run(&m, &mk(a));
    let (_, tb, ob) = run(&m, &mk(b));
    let (_, _, oc) = run(&m, &mk(c));
    assert_eq!(oa, ob);
    assert_eq!(oa, oc);
    // positions before the edited word are untouched
    let (ta, tb) = (ta.unwrap(), tb.unwrap());
    assert_eq!(&ta[..2 * 8], &tb[..2 * 8]);
    assert_ne!(&ta[2 * 8..], &tb[2 * 8..]);
}

#[test]
fn bidirectional_cls_sees_objects() {
    let m = tiny_model(6);
    let mut sc = scene(4, 3);
    let base = {
        let mut cache = PlanCache::new(m.config.point_config());
        Arc::new(cache.prepare(&sc).unwrap())
    };
    sc.objects[1].center[0] += 0.5;
    let moved = {
        let mut cache = PlanCache::new(m.config.point_config());
        Arc::new(cache.prepare(&sc).unwrap())
    };
    let t = vec![CLS, m.vocab.id("chair")];
    let (a, _, _) = run(&m, &ModelInput::new(vec![base], vec![t.clone()]));
    let (b, _, _) = run(&m, &ModelInput::new(vec![moved], vec![t]));
    assert_ne!(a, b);
}

#[test]
fn too_many_objects_is_an_error() {
    let m = tiny_model(7);
    let s = prepared(&m, 5, 4);
    let mut g = Graph::with_params(&m.params);
    assert!(forward(&mut g, &m.config, &ModelInput::new(vec![s], vec![vec![CLS]])).is_err());
}

#[test]
fn batching_matches_single_samples() {
    let m = tiny_model(8);
    let s1 = prepared(&m, 6, 2);
    let s2 = prepared(&m, 7, 3);
    let v = &m.vocab;
    let t1 = vec![CLS, v.id("chair")];
    let t2 = vec![CLS, v.id("table"), v.id("left"), v.id("of")];
    let (c1, _, o1) = run(&m, &ModelInput::new(vec![s1.clone()], vec![t1.clone()]));
    let (c2, _, _) = run(&m, &ModelInput::new(vec![s2.clone()], vec![t2.clone()]));
    let (cb, _, ob) = run(&m, &ModelInput::new(vec![s1, s2], vec![t1, t2]));
    for (a, b) in c1.iter().chain(&c2).zip(&cb) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in o1.iter().zip(&ob[..o1.len()]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn translation_leaves_spatial_features_unchanged() {
    let mut sc = scene(8, 5);
    let before = crate::transformer::pairwise_spatial_features(&sc.centers());
    for o in &mut sc.objects {
        o.center = [o.center[0] + 1.25, o.center[1] - 0.5, o.center[2] + 2.0];
    }
    let after = crate::transformer::pairwise_spatial_features(&sc.centers());
    for (a, b) in before.data.iter().zip(&after.data) {
        for k in 0..5 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn grounding_head_by_hand() {
    let mut m = tiny_model(9);
    let s = prepared(&m, 9, 2);
    let mut g = Graph::with_params(&m.params);
    let out = forward(&mut g, &m.config, &ModelInput::new(vec![s.clone()], vec![vec![CLS]])).unwrap();
    let objs = g.value(out.objects).to_vec();
    let logits = grounding_logits(&mut g, &out).unwrap();
    let got = g.value(logits).to_vec();
    let p = |n: &str| m.params.by_name(n).unwrap().data().to_vec();
    let (w0, b0, w1, b1) = (p("head.ground.0.weight"), p("head.ground.0.bias"), p("head.ground.1.weight"), p("head.ground.1.bias"));
    for i in 0..2 {
        let mut score = b1[0];
        for h in 0..4 {
            let z: f64 = (0..8).map(|k| objs[i * 8 + k] * w0[k * 4 + h]).sum::<f64>() + b0[h];
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let gelu = 0.5 * z * (1.0 + (c * (z + 0.044715 * z.powi(3))).tanh());
            score += gelu * w1[h];
        }
        assert!((got[i] - score).abs() < 1e-12);
    }
    drop(g);
    // identical object outputs give identical scores: zero the scene path
    for prefix in ["scene.", "point.", "fusion."] {
        zero_params(&mut m.params, prefix);
    }
    let mut g = Graph::with_params(&m.params);
    let out = forward(&mut g, &m.config, &ModelInput::new(vec![s], vec![vec![CLS]])).unwrap();
    let l = grounding_logits(&mut g, &out).unwrap();
    let v = g.value(l);
    assert_eq!(v[0], v[1]);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m: Model<f32> = Model::new(ModelConfig::tiny(0, 0), vocab(), classes(20), 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_checkpoint(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.vocab, m.vocab);
    for ((_, na, ta), (_, nb, tb)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        assert!(ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
    assert!(matches!(parse_checkpoint(b"XXXX\x01\0\0\0"), Err(CheckpointError::BadMagic)));
}

#[test]
fn forced_logits_drive_greedy_decode() {
    let mut m = tiny_model(11);
    let s = prepared(&m, 11, 3);
    let chair = m.vocab.id("chair");
    let set_bias = |m: &mut Model<f64>, tok: usize| {
        let b = m.params.by_name_mut("head.mlm.bias").unwrap();
        b.data_mut().iter_mut().for_each(|x| *x = 0.0);
        b.data_mut()[tok] = 1e6;
    };
    set_bias(&mut m, chair);
    let out = greedy_decode(&m, s.clone(), 0).unwrap();
    assert_eq!(out.len(), m.config.max_text_len - 1);
    assert!(out.iter().all(|&t| t == chair));
    assert_eq!(out, greedy_decode(&m, s.clone(), 0).unwrap());
    set_bias(&mut m, EOS);
    assert!(greedy_decode(&m, s, 0).unwrap().is_empty());
}
