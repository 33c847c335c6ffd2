use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Result, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Central-difference step, expected in `[1e-6, 1e-3]`.
    pub step: f64,
    /// Check at most this many elements per parameter (`None` = all).
    pub max_elements_per_param: Option<usize>,
    pub seed: u64,
    /// Mutation hook: negates the analytic gradient of the named parameter,
    /// so a correct checker must report a failure.
    pub negate_param: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            max_elements_per_param: None,
            seed: 0,
            negate_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares analytic parameter gradients of `loss` against central differences.
///
/// `loss` rebuilds the scalar loss on a fresh graph; it is called once for
/// the analytic pass and twice per checked element.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    loss: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(params);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.step;
    let mut report = GradCheckReport {
        tolerance: config.tolerance,
        params: Vec::new(),
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let mut analytic_all = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        if config.negate_param.as_deref() == Some(params.name(id)) {
            analytic_all.iter_mut().for_each(|g| *g = -*g);
        }
        let elements: Vec<usize> = match config.max_elements_per_param {
            Some(limit) if limit < n => sample(&mut rng, n, limit).into_vec(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            checked: elements.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in elements {
            let orig = params.get(id).data()[e];
            params.get_mut(id).data_mut()[e] = orig + h;
            let plus = {
                let mut g = Graph::with_params(params);
                let l = loss(&mut g)?;
                g.scalar(l)
            };
            params.get_mut(id).data_mut()[e] = orig - h;
            let minus = {
                let mut g = Graph::with_params(params);
                let l = loss(&mut g)?;
                g.scalar(l)
            };
            params.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = analytic_all[e];
            let err = relative_error(analytic, numeric);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = e;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_cross_entropy_passes_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("w", random(&[4, 3], &mut rng)).unwrap();
        store.insert("b", random(&[3], &mut rng)).unwrap();
        let x = random(&[5, 4], &mut rng);
        let labels = [0, 2, 1, -1, 2];
        let report = grad_check(
            &mut store,
            |g| {
                let xv = g.leaf(x.clone());
                let w = g.param_by_name("w")?;
                let b = g.param_by_name("b")?;
                let h = g.matmul(xv, w)?;
                let h = g.add(h, b)?;
                g.cross_entropy(h, &labels)
            },
            &GradCheckConfig {
                tolerance: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn layer_norm_near_constant_input_is_finite() {
        let mut store = ParamStore::new();
        let data: Vec<f64> = (0..6).map(|i| 1.0 + 1e-3 * i as f64).collect();
        store.insert("x", Tensor::new(&[1, 6], data).unwrap()).unwrap();
        store.insert("gain", Tensor::from_f64(&[6], &[1.0, 0.5, 2.0, -1.0, 0.3, 1.5]).unwrap()).unwrap();
        store.insert("bias", Tensor::zeros(&[6])).unwrap();
        let weights = Tensor::from_f64(&[1, 6], &[0.3, -0.2, 0.9, 0.1, -0.7, 0.4]).unwrap();
        let report = grad_check(
            &mut store,
            |g| {
                let x = g.param_by_name("x")?;
                let gain = g.param_by_name("gain")?;
                let bias = g.param_by_name("bias")?;
                let y = g.layer_norm(x, gain, bias)?;
                let w = g.leaf(weights.clone());
                let y = g.mul(y, w)?;
                g.sum(y)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error().is_finite());
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn log_sigmoid_saturated_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(-30.0)).unwrap();
        let report = grad_check(
            &mut store,
            |g| {
                let x = g.param_by_name("x")?;
                g.log_sigmoid(x)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        let check = &report.params[0];
        assert!((check.analytic - 1.0).abs() < 1e-12);
        assert!(report.passed());
    }

    #[test]
    fn sign_flip_is_detected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        let loss = |g: &mut Graph<'_, f64>| {
            let x = g.param_by_name("x")?;
            let y = g.sigmoid(x)?;
            g.sum(y)
        };
        let ok = grad_check(&mut store, loss, &GradCheckConfig::default()).unwrap();
        assert!(ok.passed());
        let cfg = GradCheckConfig {
            negate_param: Some("x".into()),
            ..Default::default()
        };
        let bad = grad_check(&mut store, loss, &cfg).unwrap();
        assert!(!bad.passed());
        assert_eq!(bad.worst().unwrap().name, "x");
        assert!((bad.max_rel_error() - 2.0).abs() < 1e-6);
    }
}
