//! Branchformer encoders. The visual encoder adds a visual-to-audio
//! cross-attention after every layer (cross-layer attention fusion).

use crate::config::ModelConfig;
use crate::error::{contract_err, shape_err, Result};
use crate::numerics::{Graph, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchformerBlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub conv_kernel: usize,
}

impl BranchformerBlockConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            dim: cfg.dim,
            heads: cfg.heads,
            mlp_hidden: cfg.mlp_hidden,
            conv_kernel: cfg.conv_kernel,
        }
    }
}

/// Convolutional gating MLP: channel expansion, split, depthwise
/// convolution on one half as a gate for the other, projection back.
#[derive(Clone, Debug)]
pub struct ConvGatingMlp {
    pub up: Linear,
    pub gate_norm: LayerNorm,
    pub gate_kernel: ParamId,
    pub gate_bias: ParamId,
    pub down: Linear,
    half: usize,
}

impl ConvGatingMlp {
    fn new(init: &mut Init, cfg: &BranchformerBlockConfig) -> Self {
        let mut s = init.sub("cgmlp");
        let half = cfg.mlp_hidden / 2;
        Self {
            up: Linear::new(&mut s, "up", cfg.dim, cfg.mlp_hidden),
            gate_norm: LayerNorm::new(&mut s, "gate_norm", half),
            gate_kernel: s.normal("gate_kernel", &[cfg.conv_kernel, half], (1.0 / cfg.conv_kernel as f64).sqrt()),
            gate_bias: s.constant("gate_bias", &[half], 1.0),
            down: Linear::new(&mut s, "down", half, cfg.dim),
            half,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, frame_mask: Option<Var>) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        let a = g.slice_cols(h, 0, self.half)?;
        let b = g.slice_cols(h, self.half, self.half)?;
        let b = self.gate_norm.forward(g, b)?;
        // padded frames must not leak into valid ones through the kernel
        let b = match frame_mask {
            Some(m) => g.mul(b, m)?,
            None => b,
        };
        let k = g.param(self.gate_kernel);
        let b = g.depthwise_conv1d(b, k)?;
        let bias = g.param(self.gate_bias);
        let b = g.add_row(b, bias)?;
        let gated = g.mul(a, b)?;
        self.down.forward(g, gated)
    }
}

/// Parallel self-attention and convolutional-gating branches merged by a
/// learned projection of their concatenation, plus a residual connection.
#[derive(Clone, Debug)]
pub struct BranchformerBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub mlp_norm: LayerNorm,
    pub mlp: ConvGatingMlp,
    pub merge: Linear,
    dim: usize,
}

impl BranchformerBlock {
    pub fn new(init: &mut Init, name: &str, cfg: &BranchformerBlockConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(shape_err!("dim {} not divisible by {} heads", cfg.dim, cfg.heads));
        }
        let mut s = init.sub(name);
        Ok(Self {
            attn_norm: LayerNorm::new(&mut s, "attn_norm", cfg.dim),
            attn: MultiHeadAttention::new(&mut s, "attn", cfg.dim, cfg.heads)?,
            mlp_norm: LayerNorm::new(&mut s, "mlp_norm", cfg.dim),
            mlp: ConvGatingMlp::new(&mut s, cfg),
            merge: Linear::new(&mut s, "merge", 2 * cfg.dim, cfg.dim),
            dim: cfg.dim,
        })
    }

    /// `x: [T, D]`; `mask[t]` is false for padded frames, which are then
    /// invisible to every valid output frame.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(shape_err!("block input {shape:?}, dim {}", self.dim));
        }
        let t = shape[0];
        if let Some(m) = mask {
            if m.len() != t {
                return Err(shape_err!("frame mask of {} for {t} frames", m.len()));
            }
            if !m.iter().any(|&v| v) {
                return Err(contract_err!("block input has no valid frame"));
            }
        }
        let key_mask: Option<Vec<bool>> = mask.map(|m| (0..t * t).map(|i| m[i % t]).collect());
        let frame_mask = match mask {
            Some(m) => {
                let col: Vec<f64> = m.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
                let half = self.mlp.half;
                let data = col.iter().flat_map(|&v| std::iter::repeat_n(v, half)).collect();
                Some(g.constant(Tensor::new(vec![t, half], data)?))
            }
            None => None,
        };

        let a = self.attn_norm.forward(g, x)?;
        let a = self.attn.forward(g, a, a, a, key_mask.as_deref())?.output;
        let c = self.mlp_norm.forward(g, x)?;
        let c = self.mlp.forward(g, c, frame_mask)?;
        let both = g.concat_cols(&[a, c])?;
        let merged = self.merge.forward(g, both)?;
        g.add(x, merged)
    }
}

/// A stack of Branchformer blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<BranchformerBlock>,
}

impl Encoder {
    pub fn new(init: &mut Init, name: &str, layers: usize, cfg: &BranchformerBlockConfig) -> Result<Self> {
        let mut s = init.sub(name);
        let blocks = (0..layers)
            .map(|i| BranchformerBlock::new(&mut s, &format!("layers.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.blocks.iter().try_fold(x, |h, b| b.forward(g, h, mask))
    }
}

/// Visual encoder with a residual visual-audio cross-attention after every
/// block.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub blocks: Vec<BranchformerBlock>,
    pub cross: Vec<MultiHeadAttention>,
}

impl VisualEncoder {
    pub fn new(init: &mut Init, layers: usize, cfg: &BranchformerBlockConfig, claf: bool) -> Result<Self> {
        let mut s = init.sub("visual_encoder");
        let mut blocks = Vec::with_capacity(layers);
        let mut cross = Vec::new();
        for i in 0..layers {
            blocks.push(BranchformerBlock::new(&mut s, &format!("layers.{i}"), cfg)?);
            if claf {
                cross.push(MultiHeadAttention::new(&mut s, &format!("claf.{i}"), cfg.dim, cfg.heads)?);
            }
        }
        Ok(Self { blocks, cross })
    }

    pub fn has_claf(&self) -> bool {
        !self.cross.is_empty()
    }

    /// `v: [T', D]`; `audio: [n, D]` is required when the encoder was built
    /// with cross-layer fusion. Returns the output and, per layer, the
    /// head-averaged fusion scores.
    pub fn forward(&self, g: &mut Graph, v: Var, audio: Option<Var>) -> Result<(Var, Vec<Var>)> {
        if self.has_claf() && audio.is_none() {
            return Err(contract_err!("cross-layer fusion needs the audio encoder output"));
        }
        let mut x = v;
        let mut scores = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x, None)?;
            if let (Some(attn), Some(a)) = (self.cross.get(i), audio) {
                let out = attn.forward(g, x, a, a, None)?;
                scores.push(out.mean_scores(g)?);
                x = g.add(x, out.output)?;
            }
        }
        Ok((x, scores))
    }
}
