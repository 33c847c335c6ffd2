//! Named-parameter layer helpers shared by the encoders and heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, ParamStore, Result, Scalar, Tensor, Var};

pub fn weight_name(prefix: &str) -> String {
    format!("{prefix}.weight")
}

pub fn bias_name(prefix: &str) -> String {
    format!("{prefix}.bias")
}

/// Normal(0, std) tensor.
pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

/// Registers a `[fan_in, fan_out]` weight and a zero bias.
///
/// `gain = 2` gives He init (for ReLU), `gain = 1` Xavier-like.
pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = (gain / fan_in as f64).sqrt();
    store.insert(weight_name(prefix), normal(&[fan_in, fan_out], std, rng))?;
    store.insert(bias_name(prefix), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::from_fn(&[d], |_| T::one()))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
    Ok(())
}

pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_by_name(&weight_name(prefix))?;
    let b = g.param_by_name(&bias_name(prefix))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param_by_name(&format!("{prefix}.gain"))?;
    let bias = g.param_by_name(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// `linear → gelu → linear`.
pub fn mlp2<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.0"), x)?;
    let h = g.gelu(h)?;
    linear(g, &format!("{prefix}.1"), h)
}

pub fn init_mlp2<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dims: [usize; 3],
    rng: &mut impl Rng,
) -> Result<()> {
    init_linear(store, &format!("{prefix}.0"), dims[0], dims[1], 2.0, rng)?;
    init_linear(store, &format!("{prefix}.1"), dims[1], dims[2], 1.0, rng)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
