//! Parameterized building blocks shared by every model component.

use super::rng::{mix_seed, RngStream};
use super::tape::{Graph, ParamId, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Hierarchical parameter registration.
///
/// Every scope derives its own random stream from the root seed and its
/// full name, so a parameter's initial value does not depend on which other
/// modules were built before it.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: String,
}

fn name_salt(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            seed,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = self.full(name);
        Init {
            store: &mut *self.store,
            seed: self.seed,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn rng_for(&self, name: &str) -> RngStream {
        RngStream::new(mix_seed(self.seed, name_salt(name)))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let full = self.full(name);
        let value = self.rng_for(&full).normal_tensor(shape, std);
        self.store.register(full, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full(name);
        self.store.register(full, Tensor::full(shape, value))
    }
}

/// Affine map `x W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = init.sub(name);
        let std = (1.0 / d_in.max(1) as f64).sqrt();
        Self {
            weight: s.normal("weight", &[d_in, d_out], std),
            bias: Some(s.constant("bias", &[d_out], 0.0)),
            d_in,
            d_out,
        }
    }

    pub fn without_bias(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = init.sub(name);
        let std = (1.0 / d_in.max(1) as f64).sqrt();
        Self {
            weight: s.normal("weight", &[d_in, d_out], std),
            bias: None,
            d_in,
            d_out,
        }
    }

    /// All-zero weight and bias.
    pub fn zeros(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            weight: s.constant("weight", &[d_in, d_out], 0.0),
            bias: Some(s.constant("bias", &[d_out], 0.0)),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            gain: s.constant("gain", &[dim], 1.0),
            offset: s.constant("offset", &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, Self::EPS)?;
        let gain = g.param(self.gain);
        let offset = g.param(self.offset);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, offset)
    }
}

/// Two-layer position-wise feed-forward network with SiLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            up: Linear::new(&mut s, "up", d_in, hidden),
            down: Linear::new(&mut s, "down", hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

/// Output of [`MultiHeadAttention::forward`].
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    /// One `[Tq, Tk]` probability matrix per head.
    pub scores: Vec<Var>,
}

impl Attended {
    /// Head-averaged scores, `[Tq, Tk]`.
    pub fn mean_scores(&self, g: &mut Graph) -> Result<Var> {
        let mut acc = self.scores[0];
        for &s in &self.scores[1..] {
            acc = g.add(acc, s)?;
        }
        Ok(g.scale(acc, 1.0 / self.scores.len() as f64))
    }

    /// Scores stacked as a `[heads, Tq, Tk]` tensor.
    pub fn scores_tensor(&self, g: &Graph) -> Tensor {
        let first = g.value(self.scores[0]).shape().to_vec();
        let mut data = Vec::new();
        for &s in &self.scores {
            data.extend_from_slice(g.value(s).data());
        }
        Tensor::new(vec![self.scores.len(), first[0], first[1]], data).expect("stacked scores")
    }
}

/// Multi-head scaled dot-product attention with input and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Self::build(init, name, dim, heads, false)
    }

    /// Same as [`MultiHeadAttention::new`] but with a zero output projection,
    /// so the block contributes nothing until trained.
    pub fn new_zero_output(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Self::build(init, name, dim, heads, true)
    }

    fn build(init: &mut Init, name: &str, dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err!("model dim {dim} not divisible by {heads} heads"));
        }
        let mut s = init.sub(name);
        let output = if zero_out {
            Linear::zeros(&mut s, "output", dim, dim)
        } else {
            Linear::new(&mut s, "output", dim, dim)
        };
        Ok(Self {
            query: Linear::new(&mut s, "query", dim, dim),
            // a key bias only shifts every logit of a row equally
            key: Linear::without_bias(&mut s, "key", dim, dim),
            value: Linear::new(&mut s, "value", dim, dim),
            output,
            heads,
            dim,
        })
    }

    /// `query: [Tq, D]`, `key`/`value: [Tk, D]`, `mask`: row-major
    /// `[Tq, Tk]`, `true` where attention is allowed.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&[bool]>,
    ) -> Result<Attended> {
        for (what, v) in [("query", query), ("key", key), ("value", value)] {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != self.dim {
                return Err(shape_err!("attention {what} has shape {s:?}, model dim {}", self.dim));
            }
        }
        let (tq, tk) = (g.shape(query)[0], g.shape(key)[0]);
        if g.shape(value)[0] != tk {
            return Err(shape_err!("attention key length {tk} vs value length {}", g.shape(value)[0]));
        }
        if let Some(m) = mask {
            if m.len() != tq * tk {
                return Err(shape_err!("attention mask has {} entries, want {}x{}", m.len(), tq, tk));
            }
        }
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, key)?;
        let v = self.value.forward(g, value)?;
        let dh = self.dim / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut scores = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, inv);
            let p = g.softmax(logits, mask)?;
            outs.push(g.matmul(p, vh)?);
            scores.push(p);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let output = self.output.forward(g, merged)?;
        Ok(Attended { output, scores })
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 * rate;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("position table")
}

/// Adds the sinusoidal position table to `x: [T, D]`.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
    let pe = g.constant(sinusoidal_positions(t, d));
    g.add(x, pe)
}
