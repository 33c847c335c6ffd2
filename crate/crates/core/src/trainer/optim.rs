use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, ParamId, ParamStore, Scalar};
use crate::{Error, Result};

/// Linear warmup to `peak`, then cosine decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup: usize,
    pub total: usize,
    pub peak: f64,
}

impl Schedule {
    pub fn new(warmup: usize, total: usize, peak: f64) -> Result<Self> {
        if warmup == 0 || warmup >= total {
            return Err(Error::Config(format!("schedule needs 0 < warmup ({warmup}) < total ({total})")));
        }
        if !(peak.is_finite() && peak > 0.0) {
            return Err(Error::Config(format!("peak learning rate {peak} must be positive")));
        }
        Ok(Self { warmup, total, peak })
    }

    /// Keeps `warmup` when it fits, otherwise shrinks it to half the run.
    pub fn fitted(warmup: usize, total: usize, peak: f64) -> Result<Self> {
        let total = total.max(2);
        let fitted = if warmup > 0 && warmup < total { warmup } else { (total / 2).max(1) };
        if fitted != warmup {
            log::warn!("warmup {warmup} does not fit {total} steps; using {fitted}");
        }
        Self::new(fitted, total, peak)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total {
            return 0.0;
        }
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let progress = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter, kept in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<T: Scalar>(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Dense gradient buffers aligned with the parameter store.
pub fn dense_grads<T: Scalar>(params: &ParamStore<T>, grads: &Gradients<T>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    for (id, g) in grads.params() {
        for (o, &x) in out[id.index()].iter_mut().zip(g) {
            *o = x.as_f64();
        }
    }
    out
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales in place so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One bias-corrected AdamW update. Decoupled decay `p -= lr·wd·p` comes
/// first; `lr_scale` gives a per-parameter multiplier. Non-finite gradients
/// abort before anything is modified.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    lr_scale: impl Fn(&str) -> f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Numeric("optimizer state does not match the parameters".into()));
    }
    for (k, g) in grads.iter().enumerate() {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            let name = params.name(ParamId(k));
            return Err(Error::Numeric(format!("non-finite gradient in {name}[{i}]")));
        }
    }
    let c = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let k = id.index();
        let rate = lr * lr_scale(params.name(id));
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, p) in params.get_mut(id).data_mut().iter_mut().enumerate() {
            let g = grads[k][i];
            let mut x = p.as_f64();
            x -= rate * c.weight_decay * x;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            x -= rate * mhat / (vhat.sqrt() + c.eps);
            *p = T::from_f64(x);
        }
    }
    Ok(())
}

const STATE_MAGIC: &[u8; 4] = b"3DVO";

/// Optimizer moments plus loop position, for exact resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epochs_done: usize,
    t: u64,
    config: AdamWConfig,
    sizes: Vec<usize>,
}

pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    let header = StateHeader {
        epochs_done: state.epochs_done,
        t: state.optimizer.t,
        config: state.optimizer.config,
        sizes: state.optimizer.m.iter().map(Vec::len).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + header.sizes.iter().sum::<usize>() * 16);
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for moments in [&state.optimizer.m, &state.optimizer.v] {
        for x in moments.iter().flatten() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let buf = fs::read(path).map_err(Error::io(path))?;
    let corrupt = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    if buf.len() < 12 || &buf[..4] != STATE_MAGIC {
        return Err(corrupt("not a training-state file"));
    }
    let len = u64::from_le_bytes(buf[4..12].try_into().expect("8 bytes")) as usize;
    let body = buf.get(12..12 + len).ok_or_else(|| corrupt("truncated header"))?;
    let header: StateHeader = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
    let mut pos = 12 + len;
    let total: usize = header.sizes.iter().sum();
    if buf.len() != pos + total * 16 {
        return Err(corrupt("size mismatch"));
    }
    let mut read = |n: usize| -> Vec<f64> {
        let out = buf[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += n * 8;
        out
    };
    let m: Vec<Vec<f64>> = header.sizes.iter().map(|&n| read(n)).collect();
    let v: Vec<Vec<f64>> = header.sizes.iter().map(|&n| read(n)).collect();
    Ok(TrainState {
        epochs_done: header.epochs_done,
        optimizer: OptimizerState {
            config: header.config,
            t: header.t,
            m,
            v,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(3000, 30000, 1e-4).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(3000), 1e-4);
        assert_eq!(s.lr_at(30000), 0.0);
        assert!((s.lr_at(16500) - 5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(40000), 0.0);
        let mut prev = -1.0;
        for step in 0..=3000 {
            assert!(s.lr_at(step) > prev);
            prev = s.lr_at(step);
        }
        for step in 3000..30000 {
            assert!(s.lr_at(step + 1) <= s.lr_at(step));
        }
        assert!(Schedule::new(0, 10, 1e-4).is_err());
        assert!(Schedule::new(10, 10, 1e-4).is_err());
        assert_eq!(Schedule::fitted(200, 100, 1e-4).unwrap().warmup, 50);
    }

    #[test]
    fn schedule_is_continuous_at_warmup() {
        let s = Schedule::new(200, 500, 1e-3).unwrap();
        let left = s.peak * 199.0 / 200.0;
        assert!((s.lr_at(199) - left).abs() < 1e-15);
        assert!((s.lr_at(201) - s.peak).abs() < 1e-7);
    }

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let lr = 1e-3;
        let c = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut params = scalar_store(0.5);
        let mut state = OptimizerState::new(&params, c);
        adamw_step(&mut params, &[vec![1.0]], &mut state, lr, |_| 1.0).unwrap();
        // m̂ = 1, v̂ = 1
        let expected = 0.5 - lr * 1.0 / (1.0 + 1e-8);
        assert!((params.by_name("p").unwrap().item() - expected).abs() < 1e-12);

        let c = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut params = scalar_store(2.0);
        let mut state = OptimizerState::new(&params, c);
        adamw_step(&mut params, &[vec![-0.3]], &mut state, lr, |_| 1.0).unwrap();
        let decayed = 2.0 - lr * 0.1 * 2.0;
        let expected = decayed + lr * 0.3 / (0.3 + 1e-8);
        assert!((params.by_name("p").unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let c = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut params = scalar_store(1.25);
        let mut state = OptimizerState::new(&params, c);
        for _ in 0..5 {
            adamw_step(&mut params, &[vec![0.0]], &mut state, 1e-2, |_| 1.0).unwrap();
        }
        assert_eq!(params.by_name("p").unwrap().item(), 1.25);
        assert_eq!(state.t, 5);
    }

    #[test]
    fn nan_gradient_aborts_without_change() {
        let mut params = scalar_store(1.0);
        let mut state = OptimizerState::new(&params, AdamWConfig::default());
        let err = adamw_step(&mut params, &[vec![f64::NAN]], &mut state, 1e-3, |_| 1.0).unwrap_err();
        assert!(err.to_string().contains("p[0]"));
        assert_eq!(params.by_name("p").unwrap().item(), 1.0);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn lr_scale_applies_per_parameter() {
        let mut params = ParamStore::<f64>::new();
        params.insert("text.w", Tensor::scalar(0.0)).unwrap();
        params.insert("scene.w", Tensor::scalar(0.0)).unwrap();
        let c = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = OptimizerState::new(&params, c);
        let scale = |n: &str| if n.starts_with("text.") { 0.1 } else { 1.0 };
        adamw_step(&mut params, &[vec![1.0], vec![1.0]], &mut state, 1e-2, scale).unwrap();
        let t = params.by_name("text.w").unwrap().item();
        let s = params.by_name("scene.w").unwrap().item();
        assert!((t / s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![vec![0.3]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.3);
    }

    #[test]
    fn train_state_round_trip() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::<f64>::zeros(&[2, 3])).unwrap();
        params.insert("b", Tensor::<f64>::zeros(&[4])).unwrap();
        let mut opt = OptimizerState::new(&params, AdamWConfig::default());
        let grads = vec![vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6], vec![1.0, 2.0, 3.0, 4.0]];
        adamw_step(&mut params, &grads, &mut opt, 1e-3, |_| 1.0).unwrap();
        let state = TrainState {
            epochs_done: 3,
            optimizer: opt,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        save_train_state(&state, &path).unwrap();
        assert_eq!(load_train_state(&path).unwrap(), state);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn schedule_rises_then_falls(warmup in 1usize..200, extra in 1usize..2000, peak in 1e-6f64..1.0) {
                let s = Schedule::new(warmup, warmup + extra, peak).unwrap();
                let lr: Vec<f64> = (0..=s.total).map(|t| s.lr_at(t)).collect();
                prop_assert!(lr.iter().all(|&x| (0.0..=peak).contains(&x)));
                prop_assert!(lr[..=warmup].windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(lr[warmup..].windows(2).all(|w| w[0] >= w[1]));
                prop_assert_eq!(lr[warmup], peak);
            }

            #[test]
            fn fitted_schedule_is_always_valid(warmup in 0usize..500, total in 0usize..500) {
                let s = Schedule::fitted(warmup, total, 1e-3).unwrap();
                prop_assert!(0 < s.warmup && s.warmup < s.total);
            }
        }
    }
}
