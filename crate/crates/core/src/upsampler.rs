//! Context and residual aware upsampling.
//!
//! A stage of ratio `r` turns `T` encoder frames into `r * T` frames. Each
//! kept frame is followed by `r - 1` predicted frames: a context prediction
//! from a local convolution over the encoder output, and a residual
//! prediction that adds a transform of raw frame differences to the kept
//! frame. The two interleaved sequences are concatenated feature-wise and
//! projected back to the model width, then attend over the audio encoder
//! output; those attention scores feed the alignment loss.

use crate::config::ModelConfig;
use crate::error::{config_err, contract_err, shape_err, Result};
use crate::frontends::temporal_conv;
use crate::numerics::{FeedForward, Graph, Init, Linear, MultiHeadAttention, Tensor, Var};

/// Positions of `alternate`: output slot `k*r` takes kept row `k`, slots
/// `k*r + j` take prediction row `k*(r-1) + j - 1`. Indices address the
/// row-wise concatenation `[kept; pred]`.
pub fn alternate_indices(kept_len: usize, ratio: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(kept_len * ratio);
    for k in 0..kept_len {
        idx.push(k);
        for j in 1..ratio {
            idx.push(kept_len + k * (ratio - 1) + j - 1);
        }
    }
    idx
}

/// Interleaves kept frames with their predicted successors.
pub fn alternate(g: &mut Graph, kept: Var, pred: Var, ratio: usize) -> Result<Var> {
    if ratio == 0 {
        return Err(config_err!("ratio must be positive"));
    }
    let t = g.shape(kept)[0];
    let p = g.shape(pred)[0];
    if p != (ratio - 1) * t {
        return Err(shape_err!("alternate: {p} predictions for {t} frames at ratio {ratio}"));
    }
    if p == 0 {
        return Ok(kept);
    }
    let both = g.concat_rows(&[kept, pred])?;
    let idx = alternate_indices(t, ratio).into_iter().map(Some).collect();
    g.gather_rows(both, idx)
}

/// Within-group adjacent differences: for each group of `d` frames, the
/// `d - 1` steps `x[g*d + j] - x[g*d + j - 1]`.
pub fn residual_diff(frames: &Tensor, d: usize) -> Result<Tensor> {
    if d == 0 {
        return Err(config_err!("ratio must be positive"));
    }
    let n = frames.rows();
    if n % d != 0 {
        return Err(contract_err!("{n} frames not divisible by {d}; pad before differencing"));
    }
    let w = frames.row_len();
    let mut data = Vec::with_capacity(n / d * (d - 1) * w);
    for grp in 0..n / d {
        for j in 1..d {
            let cur = frames.row(grp * d + j);
            let prev = frames.row(grp * d + j - 1);
            data.extend(cur.iter().zip(prev).map(|(a, b)| a - b));
        }
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = n / d * (d - 1);
    Tensor::new(shape, data)
}

/// Averages raw frames `[n, H, W, C]` onto a `grid x grid` spatial lattice,
/// giving `[n, grid * grid * C]`.
pub fn pool_frames(frames: &Tensor, grid: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(shape_err!("expected [n, H, W, C] frames, got {s:?}"));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(config_err!("grid {grid} does not divide {h}x{w}"));
    }
    let (ch, cw) = (h / grid, w / grid);
    let inv = 1.0 / (ch * cw) as f64;
    let mut out = vec![0.0; n * grid * grid * c];
    for t in 0..n {
        for y in 0..h {
            for x in 0..w {
                let cell = (y / ch) * grid + x / cw;
                for k in 0..c {
                    out[(t * grid * grid + cell) * c + k] += inv * frames.at(&[t, y, x, k]);
                }
            }
        }
    }
    Tensor::new(vec![n, grid * grid * c], out)
}

/// Factorization of the downsampling factor into stage ratios.
pub fn stage_ratios(d: usize) -> Vec<usize> {
    if d <= 1 {
        return Vec::new();
    }
    if d == 3 {
        return vec![3];
    }
    let mut ratios = Vec::new();
    let mut rest = d;
    for f in [2, 3] {
        while rest % f == 0 {
            ratios.push(f);
            rest /= f;
        }
    }
    if rest > 1 {
        ratios.push(rest);
    }
    ratios
}

/// Local convolution over encoder frames emitting `ratio - 1` prediction
/// vectors per frame.
#[derive(Clone, Debug)]
pub struct ContextPredictor {
    pub conv: Linear,
    pub proj: Linear,
    pub ratio: usize,
    dim: usize,
}

impl ContextPredictor {
    pub fn new(init: &mut Init, dim: usize, ratio: usize) -> Result<Self> {
        if ratio < 2 {
            return Err(config_err!("context prediction needs ratio >= 2, got {ratio}"));
        }
        let mut s = init.sub("context");
        Ok(Self {
            conv: Linear::new(&mut s, "conv", 3 * dim, dim),
            proj: Linear::new(&mut s, "proj", dim, (ratio - 1) * dim),
            ratio,
            dim,
        })
    }

    /// `[T, D] -> [(ratio - 1) * T, D]` in time order.
    pub fn forward(&self, g: &mut Graph, hv: Var) -> Result<Var> {
        let t = g.shape(hv)[0];
        let h = temporal_conv(g, hv, &self.conv, 1)?;
        let h = g.silu(h);
        let p = self.proj.forward(g, h)?;
        g.reshape(p, &[(self.ratio - 1) * t, self.dim])
    }
}

/// Kept frame plus a feed-forward transform of its motion residual.
#[derive(Clone, Debug)]
pub struct ResidualPredictor {
    pub ffn: FeedForward,
    pub ratio: usize,
}

impl ResidualPredictor {
    pub fn new(init: &mut Init, features: usize, hidden: usize, dim: usize, ratio: usize) -> Self {
        Self {
            ffn: FeedForward::new(init, "residual_ffn", features, hidden, dim),
            ratio,
        }
    }

    /// `hv: [T, D]`, `diffs: [(ratio - 1) * T, F]` grouped per kept frame.
    pub fn forward(&self, g: &mut Graph, hv: Var, diffs: Var) -> Result<Var> {
        let t = g.shape(hv)[0];
        let per = self.ratio - 1;
        if g.shape(diffs)[0] != per * t {
            return Err(shape_err!(
                "{} residual rows for {t} frames at ratio {}",
                g.shape(diffs)[0],
                self.ratio
            ));
        }
        let f = self.ffn.forward(g, diffs)?;
        let idx = (0..t * per).map(|i| Some(i / per)).collect();
        let base = g.gather_rows(hv, idx)?;
        g.add(base, f)
    }
}

/// Output of one upsampling stage.
#[derive(Clone, Debug)]
pub struct UpsampleStageOutput {
    /// `[ratio * T, D]`.
    pub p: Var,
    /// Head-averaged alignment scores `[ratio * T, keys]`.
    pub alpha: Var,
    pub ratio: usize,
    /// Leading rows of `alpha` that correspond to real (unpadded) frames.
    pub valid_queries: usize,
    /// Stride of the audio keys relative to the full audio sequence.
    pub key_stride: usize,
}

#[derive(Clone, Debug)]
pub struct UpsampleStage {
    pub context: Option<ContextPredictor>,
    pub residual: Option<ResidualPredictor>,
    pub merge: Linear,
    pub align: MultiHeadAttention,
    pub ratio: usize,
}

impl UpsampleStage {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig, ratio: usize) -> Result<Self> {
        if ratio < 2 {
            return Err(config_err!("upsampling stage ratio must be at least 2"));
        }
        if !cfg.context_prediction && !cfg.residual_prediction {
            return Err(config_err!("upsampler needs context or residual prediction"));
        }
        let mut s = init.sub(name);
        let context = cfg
            .context_prediction
            .then(|| ContextPredictor::new(&mut s, cfg.dim, ratio))
            .transpose()?;
        let residual = cfg
            .residual_prediction
            .then(|| ResidualPredictor::new(&mut s, cfg.residual_features(), cfg.mlp_hidden, cfg.dim, ratio));
        let branches = context.is_some() as usize + residual.is_some() as usize;
        Ok(Self {
            context,
            residual,
            merge: Linear::new(&mut s, "merge", branches * cfg.dim, cfg.dim),
            align: MultiHeadAttention::new(&mut s, "align", cfg.dim, cfg.heads)?,
            ratio,
        })
    }

    /// `hv: [T, D]`; `diffs: [(ratio - 1) * T, F]` (required with the
    /// residual branch); `keys: [Tk, D]` audio frames for the alignment
    /// attention.
    pub fn forward(
        &self,
        g: &mut Graph,
        hv: Var,
        diffs: Option<Var>,
        keys: Option<Var>,
    ) -> Result<(Var, Var)> {
        let keys = keys.ok_or_else(|| contract_err!("upsampling stage needs the audio encoder output"))?;
        let mut branches = Vec::with_capacity(2);
        if let Some(ctx) = &self.context {
            let hc = ctx.forward(g, hv)?;
            branches.push(alternate(g, hv, hc, self.ratio)?);
        }
        if let Some(res) = &self.residual {
            let diffs = diffs.ok_or_else(|| contract_err!("residual prediction needs frame differences"))?;
            let hr = res.forward(g, hv, diffs)?;
            branches.push(alternate(g, hv, hr, self.ratio)?);
        }
        let cat = if branches.len() == 1 {
            branches[0]
        } else {
            g.concat_cols(&branches)?
        };
        let merged = self.merge.forward(g, cat)?;
        let att = self.align.forward(g, merged, keys, keys, None)?;
        let alpha = att.mean_scores(g)?;
        let p = g.add(merged, att.output)?;
        Ok((p, alpha))
    }
}

/// Result of the full upsampler.
#[derive(Clone, Debug)]
pub struct UpsampleOutput {
    /// `[n, D]`, trimmed to the original video length.
    pub p: Var,
    pub stages: Vec<UpsampleStageOutput>,
}

/// Chain of stages whose ratios multiply to the downsampling factor.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub stages: Vec<UpsampleStage>,
    pub factor: usize,
    grid: usize,
}

impl Upsampler {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let mut s = init.sub("upsampler");
        let stages = stage_ratios(cfg.downsample)
            .into_iter()
            .enumerate()
            .map(|(i, r)| UpsampleStage::new(&mut s, &format!("stages.{i}"), cfg, r))
            .collect::<Result<_>>()?;
        Ok(Self {
            stages,
            factor: cfg.downsample,
            grid: cfg.residual_grid,
        })
    }

    /// `hv: [K, D]` encoder output for `K = ceil(n / d)` kept frames;
    /// `retained: [K * d, H, W, C]` padded raw frames; `audio: [n, D]`.
    pub fn forward(&self, g: &mut Graph, hv: Var, retained: &Tensor, audio: Var) -> Result<UpsampleOutput> {
        let k = g.shape(hv)[0];
        let n = g.shape(audio)[0];
        let d = self.factor;
        if retained.rows() != k * d {
            return Err(shape_err!("{} retained frames for {k} kept at factor {d}", retained.rows()));
        }
        if n == 0 || n.div_ceil(d) != k {
            return Err(shape_err!("audio length {n} inconsistent with {k} kept frames at factor {d}"));
        }
        let pooled = if self.stages.iter().any(|s| s.residual.is_some()) {
            Some(pool_frames(retained, self.grid)?)
        } else {
            None
        };
        let mut x = hv;
        let mut done = 1;
        let mut outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            done *= stage.ratio;
            let stride = d / done;
            let len = g.shape(x)[0] * stage.ratio;
            let diffs = match (&pooled, &stage.residual) {
                (Some(pooled), Some(_)) => {
                    let sub: Vec<usize> = (0..len).map(|i| i * stride).collect();
                    let frames = pooled.select_rows(&sub)?;
                    Some(g.constant(residual_diff(&frames, stage.ratio)?))
                }
                _ => None,
            };
            let key_idx: Vec<Option<usize>> = (0..n.div_ceil(stride)).map(|i| Some(i * stride)).collect();
            let keys = if stride == 1 { audio } else { g.gather_rows(audio, key_idx)? };
            let (p, alpha) = stage.forward(g, x, diffs, Some(keys))?;
            outputs.push(UpsampleStageOutput {
                p,
                alpha,
                ratio: stage.ratio,
                valid_queries: n.div_ceil(stride),
                key_stride: stride,
            });
            x = p;
        }
        let p = if g.shape(x)[0] == n { x } else { g.slice_rows(x, 0, n)? };
        Ok(UpsampleOutput { p, stages: outputs })
    }
}
