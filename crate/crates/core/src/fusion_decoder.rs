//! Audio-visual fusion, the CTC head, and the attention decoder.

use crate::config::FusionMode;
use crate::error::{contract_err, shape_err, Result};
use crate::numerics::{add_positions, FeedForward, Graph, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, Var};

pub use crate::numerics::layers::sinusoidal_positions;

/// Fused sequence and CTC log-probabilities for one sample.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `[n, D]`.
    pub fused: Var,
    /// `[n, V]`, rows are log-distributions.
    pub ctc_log_probs: Var,
}

/// Cross-attention fusion. `Full` concatenates `[av ; va]`, where `av`
/// queries with audio over video and `va` queries with video over audio.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub av: MultiHeadAttention,
    pub va: Option<MultiHeadAttention>,
    pub proj: Linear,
    pub mode: FusionMode,
}

impl Fusion {
    pub fn new(init: &mut Init, dim: usize, heads: usize, mode: FusionMode) -> Result<Self> {
        let mut s = init.sub("fusion");
        let av = MultiHeadAttention::new(&mut s, "av", dim, heads)?;
        let (va, proj) = match mode {
            FusionMode::Full => (
                Some(MultiHeadAttention::new(&mut s, "va", dim, heads)?),
                Linear::new(&mut s, "proj", 2 * dim, dim),
            ),
            FusionMode::AvOnly => (None, Linear::new(&mut s, "proj", dim, dim)),
        };
        Ok(Self { av, va, proj, mode })
    }

    /// `audio: [n, D]`; `video: [n, D]` in full mode, any length in
    /// audio-visual-only mode. Output has the audio length.
    pub fn forward(&self, g: &mut Graph, audio: Var, video: Var) -> Result<Var> {
        let n = g.shape(audio)[0];
        let av = self.av.forward(g, audio, video, video, None)?.output;
        match &self.va {
            Some(va_attn) => {
                if g.shape(video)[0] != n {
                    return Err(contract_err!(
                        "full fusion needs equal lengths, audio {n} vs video {}",
                        g.shape(video)[0]
                    ));
                }
                let va = va_attn.forward(g, video, audio, audio, None)?.output;
                let both = g.concat_cols(&[av, va])?;
                self.proj.forward(g, both)
            }
            None => self.proj.forward(g, av),
        }
    }
}

/// Linear map to the vocabulary followed by log-softmax.
#[derive(Clone, Debug)]
pub struct CtcHead {
    pub proj: Linear,
}

impl CtcHead {
    pub fn new(init: &mut Init, dim: usize, vocab: usize) -> Self {
        Self {
            proj: Linear::new(init, "ctc_head", dim, vocab),
        }
    }

    pub fn forward(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let logits = self.proj.forward(g, fused)?;
        g.log_softmax(logits)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

/// Pre-norm Transformer decoder with causal self-attention.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub out: Linear,
    pub vocab: usize,
    pub dim: usize,
}

pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len <= i / len).collect()
}

impl Decoder {
    pub fn new(init: &mut Init, layers: usize, dim: usize, heads: usize, hidden: usize, vocab: usize) -> Result<Self> {
        let mut s = init.sub("decoder");
        let embedding = s.normal("embedding", &[vocab, dim], 1.0);
        let layers = (0..layers)
            .map(|i| -> Result<DecoderLayer> {
                let mut l = s.sub(&format!("layers.{i}"));
                Ok(DecoderLayer {
                    self_norm: LayerNorm::new(&mut l, "self_norm", dim),
                    self_attn: MultiHeadAttention::new(&mut l, "self_attn", dim, heads)?,
                    cross_norm: LayerNorm::new(&mut l, "cross_norm", dim),
                    cross_attn: MultiHeadAttention::new(&mut l, "cross_attn", dim, heads)?,
                    ffn_norm: LayerNorm::new(&mut l, "ffn_norm", dim),
                    ffn: FeedForward::new(&mut l, "ffn", dim, hidden, dim),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding,
            final_norm: LayerNorm::new(&mut s, "final_norm", dim),
            out: Linear::new(&mut s, "out", dim, vocab),
            layers,
            vocab,
            dim,
        })
    }

    /// Logits `[U, V]` for decoder inputs `tokens` (start symbol first)
    /// attending over `memory: [n, D]`.
    pub fn forward(&self, g: &mut Graph, memory: Var, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(shape_err!("decoder needs at least the start symbol"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(contract_err!("decoder token {bad} outside vocabulary {}", self.vocab));
        }
        let u = tokens.len();
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, tokens.iter().map(|&t| Some(t)).collect())?;
        let mut x = add_positions(g, emb)?;
        let mask = causal_mask(u);
        for layer in &self.layers {
            let h = layer.self_norm.forward(g, x)?;
            let h = layer.self_attn.forward(g, h, h, h, Some(&mask))?.output;
            x = g.add(x, h)?;
            let h = layer.cross_norm.forward(g, x)?;
            let h = layer.cross_attn.forward(g, h, memory, memory, None)?.output;
            x = g.add(x, h)?;
            let h = layer.ffn_norm.forward(g, x)?;
            let h = layer.ffn.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let x = self.final_norm.forward(g, x)?;
        self.out.forward(g, x)
    }
}

/// Teacher-forced logits: the decoder reads `[sos, y_1 .. y_U]`.
pub fn decode_teacher_forced(g: &mut Graph, decoder: &Decoder, fused: Var, targets: &[usize], sos: usize) -> Result<Var> {
    let mut input = Vec::with_capacity(targets.len() + 1);
    input.push(sos);
    input.extend_from_slice(targets);
    decoder.forward(g, fused, &input)
}

/// Index of the largest value; the first on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy autoregressive decoding until the end symbol or `max_len`
/// tokens.
pub fn recognize_greedy(g: &mut Graph, decoder: &Decoder, fused: Var, sos_eos: usize, max_len: usize) -> Result<Vec<usize>> {
    let mut prefix = vec![sos_eos];
    let mut hyp = Vec::new();
    while hyp.len() < max_len {
        let logits = decoder.forward(g, fused, &prefix)?;
        let v = g.value(logits);
        let next = argmax(v.row(v.rows() - 1));
        if next == sos_eos {
            break;
        }
        hyp.push(next);
        prefix.push(next);
    }
    Ok(hyp)
}
