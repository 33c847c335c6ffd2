use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{numel, ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        probs: Vec<T>,
        divisor: T,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        a: Var,
        keep: Vec<T>,
    },
    MaxAxis {
        a: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::MaskedFill { .. } => "masked_fill",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dropout { .. } => "dropout",
            Op::MaxAxis { .. } => "max",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    /// Empty for parameter nodes, whose values live in the store.
    value: Vec<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    inputs: Vec<(String, Vec<T>)>,
}

impl<T> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn input(&self, name: &str) -> Option<&[T]> {
        self.inputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }
}

/// Split `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let dinner = c * (one + T::from_f64(3.0) * k * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * dinner;
    (value, deriv)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// `log σ(x) = −softplus(−x)`, stable for large |x|.
fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

/// An eagerly evaluated computation record supporting reverse-mode autodiff.
///
/// Parameter values are borrowed from a [`ParamStore`]; the graph never
/// mutates them. Node creation order is a topological order.
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<ParamId, Var>,
    bindings: HashMap<String, Tensor<T>>,
    input_vars: Vec<(String, Var)>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            bindings: HashMap::new(),
            input_vars: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        let mut g = Self::new();
        g.params = Some(params);
        g
    }

    /// Enables train-mode primitives (dropout) with an explicit seed.
    pub fn train_mode(mut self, seed: u64) -> Self {
        self.train = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    pub fn bind(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.bindings.insert(name.into(), tensor);
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == numel(&shape));
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> TensorError {
        TensorError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.expect("param node without store").get(id).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape invariant")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Gradient of the most recent backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    // ---- leaves -------------------------------------------------------

    /// A leaf holding `tensor`; it receives gradients iff `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let ng = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(Op::Leaf, shape, tensor.into_data(), ng)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// A named input resolved from the graph's bindings.
    pub fn input(&mut self, name: &str) -> Result<Var> {
        let t = self
            .bindings
            .get(name)
            .cloned()
            .ok_or_else(|| TensorError::UnboundInput(name.to_string()))?;
        let v = self.leaf(t);
        self.input_vars.push((name.to_string(), v));
        Ok(v)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let shape = store.get(id).shape().to_vec();
        let v = self.push(Op::Param(id), shape, Vec::new(), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .id(name)?;
        Ok(self.param(id))
    }

    // ---- primitives ---------------------------------------------------

    /// `[.., m, k] × [k, n]` or batched `[b.., m, k] × [b.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}: inner extents differ")));
        }
        let n = sb[sb.len() - 1];
        let (batch, m, shared_rhs) = if sb.len() == 2 {
            (1, numel(&sa[..sa.len() - 1]), true)
        } else if sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            (numel(&sa[..sa.len() - 2]), sa[sa.len() - 2], false)
        } else {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}: batch extents differ")));
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for bi in 0..batch {
                let ao = bi * m * k;
                let bo = if shared_rhs { 0 } else { bi * k * n };
                let co = bi * m * n;
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[ao..ao + m * k],
                    k as isize,
                    1,
                    &bv[bo..bo + k * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[co..co + m * n],
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            shape,
            out,
            ng,
        ))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(self.mismatch(op, format!("{sa:?} vs {sb:?}: rhs must be a trailing suffix")))
        }
    }

    /// Elementwise `a + b`; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let bl = self.value(b).len().max(1);
        let out: Vec<T> = {
            let bv = self.value(b);
            self.value(a)
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[i % bl])
                .collect()
        };
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape, out, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let bl = self.value(b).len().max(1);
        let out: Vec<T> = {
            let bv = self.value(b);
            self.value(a)
                .iter()
                .enumerate()
                .map(|(i, &x)| x * bv[i % bl])
                .collect()
        };
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape, out, ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let out = self.value(a).iter().map(|&x| x * f).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Scale(a, f), shape, out, ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(self.mismatch("concat", "no inputs".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(self.mismatch("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(self.mismatch("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            out,
            ng,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(self.mismatch(
                "slice",
                format!("[{start}, {}) along axis {axis} of {sa:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&sa, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let av = self.value(a);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&av[base..base + len * inner]);
            }
        }
        let mut shape = sa;
        shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(Op::Slice { a, axis, start }, shape, out, ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(self.mismatch("transpose", format!("{sa:?}: rank < 2")));
        }
        let r = sa[sa.len() - 2];
        let c = sa[sa.len() - 1];
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![T::zero(); sa.iter().product()];
        {
            let av = self.value(a);
            for b in 0..batch {
                let o = b * r * c;
                for i in 0..r {
                    for j in 0..c {
                        out[o + j * r + i] = av[o + i * c + j];
                    }
                }
            }
        }
        let mut shape = sa;
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let ng = self.ng(a);
        Ok(self.push(Op::Transpose(a), shape, out, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(self.mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), out, ng))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let Some(&cols) = sa.last() else {
            return Err(self.mismatch("softmax", "scalar input".into()));
        };
        let mut out = self.value(a).to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x = *x / s;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Op::Softmax(a), sa, out, ng))
    }

    /// Sets positions where `mask` is true to [`Scalar::MASK_FILL`].
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(self.mismatch(
                "masked_fill",
                format!("mask of {} for {:?}", mask.len(), self.shape(a)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { T::MASK_FILL } else { x })
            .collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            shape,
            out,
            ng,
        ))
    }

    /// Layer norm over the last axis with learned gain and bias (ε = 1e-5).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(self.mismatch(
                "layer_norm",
                format!("{sx:?} with gain {:?} bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::from_f64(LN_EPS);
        let dn = T::from_f64(d as f64);
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            sx,
            out,
            ng,
        ))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Gelu(a), |x| gelu_parts(x).0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Relu(a), |x| x.max(T::zero())))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Sigmoid(a), sigmoid))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::LogSigmoid(a), log_sigmoid))
    }

    /// Row lookup: `table[indices[i], :]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(self.mismatch("gather", format!("table {st:?} is not rank 2")));
        }
        let (rows, cols) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                what: "gather table",
                index: bad,
                size: rows,
            });
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        {
            let tv = self.value(table);
            for &i in indices {
                out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
            }
        }
        let ng = self.ng(table);
        Ok(self.push(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            vec![indices.len(), cols],
            out,
            ng,
        ))
    }

    /// Mean cross-entropy over rows whose label is non-negative.
    ///
    /// Rows labelled with a negative value are ignored; with no labelled
    /// rows the result is exactly zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let count = labels.iter().filter(|&&l| l >= 0).count();
        self.cross_entropy_with_divisor(logits, labels, count.max(1) as f64)
    }

    /// Summed cross-entropy over labelled rows divided by `divisor`.
    pub fn cross_entropy_with_divisor(
        &mut self,
        logits: Var,
        labels: &[i64],
        divisor: f64,
    ) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let Some(&k) = sl.last() else {
            return Err(self.mismatch("cross_entropy", "scalar logits".into()));
        };
        let rows = if k == 0 { 0 } else { self.value(logits).len() / k };
        if rows != labels.len() {
            return Err(self.mismatch(
                "cross_entropy",
                format!("{rows} logit rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k as i64) {
            return Err(TensorError::IndexOutOfRange {
                what: "cross_entropy classes",
                index: bad as usize,
                size: k,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            if labels[r] < 0 {
                continue;
            }
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[r * k + j] = e;
                s += e;
            }
            for j in 0..k {
                probs[r * k + j] = probs[r * k + j] / s;
            }
            let lse = mx + s.ln();
            total += (lse - row[labels[r] as usize]).as_f64();
        }
        let divisor_t = T::from_f64(divisor);
        let value = T::from_f64(total) / divisor_t;
        let ng = self.ng(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                divisor: divisor_t,
            },
            vec![],
            vec![value],
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.ng(a);
        Ok(self.push(Op::Sum(a), vec![], vec![s], ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = T::from_f64(v.len().max(1) as f64);
        let s = v.iter().copied().sum::<T>() / n;
        let ng = self.ng(a);
        Ok(self.push(Op::Mean(a), vec![], vec![s], ng))
    }

    /// Inverted dropout; identity unless the graph is in train mode and `p > 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(a);
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let keep: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| x * k)
            .collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Dropout { a, keep }, shape, out, ng))
    }

    /// Max over `axis` (the axis is removed). Ties go to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 {
            return Err(self.mismatch("max", format!("axis {axis} of {sa:?}")));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let av = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = av[o * len * inner + i];
                let mut bi = 0;
                for l in 1..len {
                    let x = av[(o * len + l) * inner + i];
                    if x > best {
                        best = x;
                        bi = l;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = bi;
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(Op::MaxAxis { a, axis, argmax }, shape, out, ng))
    }

    // ---- reverse pass --------------------------------------------------

    /// Back-propagates from the scalar `seed`.
    ///
    /// Intermediate gradients are recomputed from scratch on every call; the
    /// returned parameter gradients are meant to be added into a store with
    /// [`ParamStore::accumulate`], which is where accumulation happens.
    pub fn backward(&mut self, seed: Var) -> Result<Gradients<T>> {
        if self.value(seed).len() != 1 {
            return Err(TensorError::NonScalarSeed {
                node: seed.0,
                shape: self.shape(seed).to_vec(),
            });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[seed.0] = Some(vec![T::one()]);
        for i in (0..=seed.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Vec<T>)> = self
            .param_vars
            .iter()
            .map(|(&id, &v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); numel(&self.nodes[v.0].shape)]);
                (id, g)
            })
            .collect();
        params.sort_by_key(|(id, _)| *id);
        let inputs = self
            .input_vars
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(name, v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); numel(&self.nodes[v.0].shape)]);
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { params, inputs })
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let Graph {
            nodes,
            grads,
            params,
            ..
        } = self;
        let params = *params;
        let nodes: &[Node<T>] = nodes;
        let value = |v: Var| -> &[T] {
            match nodes[v.0].op {
                Op::Param(id) => params.expect("param store").get(id).data(),
                _ => &nodes[v.0].value,
            }
        };
        // Returns the accumulator for `v`, or None if it needs no gradient.
        fn buf<'a, T: Scalar>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = numel(&nodes[v.0].shape);
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }
        let node = &nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let av = value(a);
                let bv = value(b);
                if let Some(ga) = buf(grads, nodes, a) {
                    // dA = dC · Bᵀ
                    for bi in 0..batch {
                        let bo = if shared_rhs { 0 } else { bi * k * n };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bv[bo..bo + k * n],
                            1,
                            n as isize,
                            T::one(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(gb) = buf(grads, nodes, b) {
                    // dB = Aᵀ · dC
                    for bi in 0..batch {
                        let bo = if shared_rhs { 0 } else { bi * k * n };
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[bi * m * k..(bi + 1) * m * k],
                            1,
                            k as isize,
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            T::one(),
                            &mut gb[bo..bo + k * n],
                            n as isize,
                            1,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = buf(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = buf(grads, nodes, b) {
                    let bl = gb.len().max(1);
                    for (idx, &y) in g.iter().enumerate() {
                        gb[idx % bl] += y;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let av = value(a);
                let bv = value(b);
                let bl = bv.len().max(1);
                if let Some(ga) = buf(grads, nodes, a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx] * bv[idx % bl];
                    }
                }
                if let Some(gb) = buf(grads, nodes, b) {
                    for (idx, &y) in g.iter().enumerate() {
                        gb[idx % bl] += y * av[idx];
                    }
                }
            }
            &Op::Scale(a, f) => {
                if let Some(ga) = buf(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * f);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].shape[*axis];
                    if let Some(gv) = buf(grads, nodes, v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gv[dst + j] += g[src + j];
                            }
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let full_shape = &nodes[a.0].shape;
                let (outer, full, inner) = split_axis(full_shape, axis);
                let len = node.shape[axis];
                if let Some(ga) = buf(grads, nodes, a) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            ga[dst + j] += g[src + j];
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                let s = &node.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = numel(&s[..s.len() - 2]);
                if let Some(ga) = buf(grads, nodes, a) {
                    for b in 0..batch {
                        let o = b * r * c;
                        for i2 in 0..r {
                            for j in 0..c {
                                ga[o + j * r + i2] += g[o + i2 * c + j];
                            }
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = buf(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            &Op::Softmax(a) => {
                let cols = *node.shape.last().unwrap_or(&1);
                if let Some(ga) = buf(grads, nodes, a) {
                    if cols > 0 {
                        for ((yr, gr), dr) in out
                            .chunks(cols)
                            .zip(g.chunks(cols))
                            .zip(ga.chunks_mut(cols))
                        {
                            let dot: T = yr.iter().zip(gr).map(|(&y, &d)| y * d).sum();
                            for j in 0..cols {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if let Some(ga) = buf(grads, nodes, *a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        if !mask[idx] {
                            *x += g[idx];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap_or(&0);
                if d == 0 {
                    return;
                }
                let rows = xhat.len() / d;
                let gv = value(*gain);
                if let Some(gg) = buf(grads, nodes, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = buf(grads, nodes, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = buf(grads, nodes, *x) {
                    let dn = T::from_f64(d as f64);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_d += dh;
                            sum_dh += dh * hr[j];
                        }
                        let mean_d = sum_d / dn;
                        let mean_dh = sum_dh / dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                let av = value(a);
                if let Some(ga) = buf(grads, nodes, a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx] * gelu_parts(av[idx]).1;
                    }
                }
            }
            &Op::Relu(a) => {
                let av = value(a);
                if let Some(ga) = buf(grads, nodes, a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        if av[idx] > T::zero() {
                            *x += g[idx];
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = buf(grads, nodes, a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        let s = out[idx];
                        *x += g[idx] * s * (T::one() - s);
                    }
                }
            }
            &Op::LogSigmoid(a) => {
                let av = value(a);
                if let Some(ga) = buf(grads, nodes, a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        // d/dx log σ(x) = σ(−x)
                        *x += g[idx] * sigmoid(-av[idx]);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let cols = nodes[table.0].shape[1];
                if let Some(gt) = buf(grads, nodes, *table) {
                    for (r, &row) in indices.iter().enumerate() {
                        for j in 0..cols {
                            gt[row * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                divisor,
            } => {
                let k = *nodes[logits.0].shape.last().unwrap_or(&1);
                let up = g[0] / *divisor;
                if let Some(gl) = buf(grads, nodes, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        if label < 0 {
                            continue;
                        }
                        for j in 0..k {
                            let mut d = probs[r * k + j];
                            if j == label as usize {
                                d -= T::one();
                            }
                            gl[r * k + j] += up * d;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = buf(grads, nodes, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = buf(grads, nodes, a) {
                    let n = T::from_f64(ga.len().max(1) as f64);
                    let d = g[0] / n;
                    ga.iter_mut().for_each(|x| *x += d);
                }
            }
            Op::Dropout { a, keep } => {
                if let Some(ga) = buf(grads, nodes, *a) {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx] * keep[idx];
                    }
                }
            }
            Op::MaxAxis { a, axis, argmax } => {
                let (outer, len, inner) = split_axis(&nodes[a.0].shape, *axis);
                if let Some(ga) = buf(grads, nodes, *a) {
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let l = argmax[o * inner + i2];
                            ga[(o * len + l) * inner + i2] += g[o * inner + i2];
                        }
                    }
                }
            }
        }
    }

    /// Name of the primitive that produced `v` (diagnostics).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

/// Builds a graph over `bindings`, runs `build`, and returns the named outputs.
pub fn evaluate<T: Scalar>(
    params: Option<&ParamStore<T>>,
    bindings: HashMap<String, Tensor<T>>,
    build: impl FnOnce(&mut Graph<'_, T>) -> Result<Vec<(String, Var)>>,
) -> Result<HashMap<String, Tensor<T>>> {
    let mut g = match params {
        Some(p) => Graph::with_params(p),
        None => Graph::new(),
    };
    for (name, t) in bindings {
        g.bind(name, t);
    }
    let outputs = build(&mut g)?;
    Ok(outputs
        .into_iter()
        .map(|(name, v)| (name, g.tensor(v)))
        .collect())
}
