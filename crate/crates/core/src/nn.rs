//! Parameter storage and the transformer building blocks shared by the
//! animator and the lip reader.

use std::collections::BTreeMap;
use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Matrix<S>,
    /// Frozen entries are bound as constants and skipped by the optimizer.
    pub trainable: bool,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: BTreeMap<String, usize>,
}

/// How parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable parameters become differentiable leaves.
    Train,
    /// Everything is a constant.
    Inference,
}

/// Parameters placed on one tape; index with a [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally created vars, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pulls each parameter's gradient out of `grads`, in store order.
    pub fn take_grads<S: Scalar>(&self, grads: &mut Gradients<S>) -> Vec<Option<Matrix<S>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Panics on a duplicate name; parameter names are fixed at construction.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Matrix<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<S> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<S>, mode: BindMode) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| match mode {
                BindMode::Train if e.trainable => tape.leaf(e.value.clone()),
                _ => tape.constant(e.value.clone()),
            })
            .collect();
        Bound { vars }
    }

    /// Replaces values by name. Every stored entry must be present with a
    /// matching shape.
    pub fn load_values(&mut self, values: &BTreeMap<String, Matrix<S>>) -> Result<()> {
        for entry in &mut self.entries {
            let v = values
                .get(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", entry.name)))?;
            if v.shape() != entry.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    entry.name,
                    v.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = v.clone();
        }
        Ok(())
    }
}

pub(crate) fn xavier<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| {
        S::lit(rng.random_range(-limit..limit))
    })
}

/// Affine map `x·W + b` applied row-wise.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, in_dim, out_dim), true);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim), true);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// A linear map whose weight and bias start at zero.
    pub fn zeroed<S: Scalar>(store: &mut ParamStore<S>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Matrix::zeros(in_dim, out_dim), true);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim), true);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let xw = tape.matmul(x, p[self.weight]);
        tape.add_row(xw, p[self.bias])
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Row standardization followed by a learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, dim, S::one()), true);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, dim), true);
        Self { gain, bias }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let n = tape.layer_norm(x, S::lit(LN_EPS));
        let g = tape.mul_row(n, p[self.gain]);
        tape.add_row(g, p[self.bias])
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Additive mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask<S: Scalar>(t: usize) -> Matrix<S> {
    Matrix::from_fn(t, t, |r, c| if c <= r { S::zero() } else { S::neg_infinity() })
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim),
            heads,
        })
    }

    /// With `causal`, output row `t` only depends on input rows `0..=t`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var, causal: bool) -> Var {
        let t = tape.value(x).rows();
        let dim = self.query.out_dim;
        let head_dim = dim / self.heads;
        let q = self.query.forward(tape, p, x);
        let k = self.key.forward(tape, p, x);
        let v = self.value.forward(tape, p, x);
        let inv_sqrt = S::one() / S::from_usize_lossy(head_dim).sqrt();
        let mask = causal.then(|| causal_mask::<S>(t));

        let mut contexts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let raw = tape.matmul(qh, kt);
            let mut scores = tape.scale(raw, inv_sqrt);
            if let Some(mask) = &mask {
                scores = tape.add_const(scores, mask);
            }
            let weights = tape.softmax_rows(scores);
            contexts.push(tape.matmul(weights, vh));
        }
        let joined = if contexts.len() == 1 {
            contexts[0]
        } else {
            tape.concat_cols(&contexts)
        };
        self.output.forward(tape, p, joined)
    }
}

/// `ReLU(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), dim, hidden),
            outer: Linear::new(store, rng, &format!("{name}.outer"), hidden, dim),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let h = self.inner.forward(tape, p, x);
        let h = tape.relu(h);
        self.outer.forward(tape, p, h)
    }
}

/// Attention and feed-forward sublayers, each wrapped as `norm(x + sublayer(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub feed_forward_norm: LayerNorm,
    pub causal: bool,
}

impl TransformerLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        causal: bool,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, rng, &format!("{name}.attention"), dim, heads)?,
            attention_norm: LayerNorm::new(store, &format!("{name}.attention_norm"), dim),
            feed_forward: FeedForward::new(store, rng, &format!("{name}.feed_forward"), dim, ffn_dim),
            feed_forward_norm: LayerNorm::new(store, &format!("{name}.feed_forward_norm"), dim),
            causal,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let attended = self.attention.forward(tape, p, x, self.causal);
        let h = tape.add(x, attended);
        let h = self.attention_norm.forward(tape, p, h);
        let ff = self.feed_forward.forward(tape, p, h);
        let out = tape.add(h, ff);
        self.feed_forward_norm.forward(tape, p, out)
    }
}

/// Sinusoidal position table, `t × dim`.
pub fn sinusoidal_positions<S: Scalar>(t: usize, dim: usize) -> Matrix<S> {
    Matrix::from_fn(t, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_tape_gradients;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_input(t: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(t, d, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn heads_must_divide_dimension() {
        let mut store = ParamStore::<f64>::new();
        assert!(MultiHeadAttention::new(&mut store, &mut rng(), "a", 6, 4).is_err());
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let mut store = ParamStore::<f64>::new();
        let layer = TransformerLayer::new(&mut store, &mut rng(), "l", 8, 2, 16, true).unwrap();
        let run = |x: Matrix<f64>| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, BindMode::Inference);
            let xv = tape.constant(x);
            let out = layer.forward(&mut tape, &p, xv);
            tape.value(out).clone()
        };
        let x = random_input(6, 8, 1);
        let mut y = x.clone();
        for c in 0..8 {
            y.set(4, c, 10.0);
            y.set(5, c, -3.0);
        }
        let a = run(x);
        let b = run(y);
        for t in 0..4 {
            for c in 0..8 {
                assert!((a.get(t, c) - b.get(t, c)).abs() < 1e-12);
            }
        }
        assert!((a.get(4, 0) - b.get(4, 0)).abs() > 1e-6);
    }

    #[test]
    fn transformer_layer_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let layer = TransformerLayer::new(&mut store, &mut rng(), "l", 4, 2, 6, true).unwrap();
        let mut inputs: Vec<Matrix<f64>> = store.entries().iter().map(|e| e.value.clone()).collect();
        // perturb the unit gains and zero biases away from special values
        for (k, m) in inputs.iter_mut().enumerate() {
            let noise = random_input(m.rows(), m.cols(), 100 + k as u64);
            m.add_assign(&noise.map(|x| 0.1 * x));
        }
        inputs.push(random_input(3, 4, 2));
        let n = store.len();
        let report = check_tape_gradients(&inputs, 1e-6, &|tape: &mut Tape<f64>, v: &[Var]| {
            let p = Bound::from_vars(v[..n].to_vec());
            let out = layer.forward(tape, &p, v[n]);
            let w = tape.constant(random_input(3, 4, 3));
            let m = tape.mul(out, w);
            tape.sum(m)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn positions_alternate_sin_cos() {
        let pe = sinusoidal_positions::<f64>(3, 4);
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(0, 1), 1.0);
        assert!((pe.get(2, 0) - 2f64.sin()).abs() < 1e-15);
    }
}
