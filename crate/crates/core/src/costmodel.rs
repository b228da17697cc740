//! Analytic floating-point operation counts.
//!
//! One multiply-accumulate counts as two flops. Elementwise nonlinearities
//! carry small fixed per-element costs; projections, convolutions and the
//! attention matrix products dominate every total.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{FusionMode, Mode, ModelConfig};
use crate::error::{shape_err, Result};
use crate::frontends::{AudioFrontend, AUDIO_FRAMES_PER_VIDEO_FRAME};
use crate::upsampler::stage_ratios;
use crate::Error;

/// Flops per element of a SiLU (exp, add, divide, multiply).
pub const SILU_FLOPS: u64 = 4;
/// Flops per element of a tanh-approximated GELU.
pub const GELU_FLOPS: u64 = 8;
/// Flops per score of a softmax (max, subtract, exp, sum, divide).
pub const SOFTMAX_FLOPS: u64 = 5;
/// Flops per element of layer normalization (mean, centre, square, sum,
/// scale, gain, offset).
pub const LAYER_NORM_FLOPS: u64 = 7;

/// A layer whose cost [`module_flops`] knows how to count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    /// Input `[T]`: `T` rows of width `d_in`.
    Linear { d_in: usize, d_out: usize },
    /// Input `[T]`; `groups == c_in` is a depthwise convolution.
    Conv1d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    },
    /// Input `[T, H, W]`; temporal stride 1, spatial stride `stride`.
    Conv3d {
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: usize,
    },
    /// Scores and weighted sum only (projections are separate linears).
    /// Input `[Tq]` for self-attention or `[Tq, Tk]`.
    Attention { dim: usize, heads: usize },
    /// Input `[T]`.
    LayerNorm { dim: usize },
    /// Input: any shape; cost `ops` per element.
    Elementwise { ops: u64 },
}

impl LayerDesc {
    /// Parses a JSON layer description such as
    /// `{"kind":"linear","d_in":256,"d_out":256}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let kind = value
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::UnknownLayer("<missing kind>".into()))?
            .to_string();
        const KNOWN: [&str; 6] = ["linear", "conv1d", "conv3d", "attention", "layer_norm", "elementwise"];
        if !KNOWN.contains(&kind.as_str()) {
            return Err(Error::UnknownLayer(kind));
        }
        Ok(serde_json::from_value(value)?)
    }
}

fn dims<const N: usize>(input: &[usize], what: &str) -> Result<[usize; N]> {
    input
        .try_into()
        .map_err(|_| shape_err!("{what} expects a {N}-dimensional input shape, got {input:?}"))
}

/// Closed-form flop count of one layer on an input of the given shape.
pub fn module_flops(layer: &LayerDesc, input: &[usize]) -> Result<u64> {
    let u = |x: usize| x as u64;
    Ok(match *layer {
        LayerDesc::Linear { d_in, d_out } => {
            let [t] = dims(input, "linear")?;
            2 * u(t) * u(d_in) * u(d_out)
        }
        LayerDesc::Conv1d {
            c_in,
            c_out,
            kernel,
            stride,
            groups,
        } => {
            let [t] = dims(input, "conv1d")?;
            if groups == 0 || c_in % groups != 0 || stride == 0 {
                return Err(shape_err!("conv1d with {c_in} channels, {groups} groups, stride {stride}"));
            }
            2 * u(t.div_ceil(stride)) * u(kernel) * u(c_in / groups) * u(c_out)
        }
        LayerDesc::Conv3d {
            c_in,
            c_out,
            kernel,
            stride,
        } => {
            let [t, h, w] = dims(input, "conv3d")?;
            if stride == 0 {
                return Err(shape_err!("conv3d stride must be positive"));
            }
            let cells = u(t) * u(h.div_ceil(stride)) * u(w.div_ceil(stride));
            2 * cells * u(kernel.iter().product()) * u(c_in) * u(c_out)
        }
        LayerDesc::Attention { dim, heads } => {
            let (tq, tk) = match *input {
                [t] => (t, t),
                [tq, tk] => (tq, tk),
                _ => return Err(shape_err!("attention expects [T] or [Tq, Tk], got {input:?}")),
            };
            let pairs = u(tq) * u(tk);
            // q k^T and p v: one MAC per pair and feature each.
            2 * 2 * pairs * u(dim) + u(heads) * pairs * (SOFTMAX_FLOPS + 1)
        }
        LayerDesc::LayerNorm { dim } => {
            let [t] = dims(input, "layer_norm")?;
            LAYER_NORM_FLOPS * u(t) * u(dim)
        }
        LayerDesc::Elementwise { ops } => ops * input.iter().map(|&x| u(x)).product::<u64>(),
    })
}

/// Input size the costs are reported for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInput {
    pub audio_frames: usize,
    pub video_frames: usize,
    /// Decoder length (target tokens plus the start symbol).
    pub tokens: usize,
}

impl CostInput {
    /// 100 audio frames and 25 video frames (one second), 8 tokens.
    pub fn reference() -> Self {
        Self {
            audio_frames: 100,
            video_frames: 25,
            tokens: 8,
        }
    }
}

/// Named module costs of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub downsample: usize,
    pub input: CostInput,
    pub modules: Vec<(String, u64)>,
    pub total: u64,
}

impl CostReport {
    pub fn module(&self, name: &str) -> Option<u64> {
        self.modules.iter().find(|(n, _)| n == name).map(|&(_, f)| f)
    }

    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

pub const MODULES: [&str; 7] = [
    "audio_frontend",
    "audio_encoder",
    "visual_frontend",
    "visual_encoder",
    "upsampler",
    "fusion",
    "decoder",
];

struct Counter {
    flops: u64,
}

impl Counter {
    fn add(&mut self, layer: LayerDesc, input: &[usize]) {
        self.flops += module_flops(&layer, input).expect("internally consistent layer shapes");
    }

    fn linear(&mut self, t: usize, d_in: usize, d_out: usize) {
        self.add(LayerDesc::Linear { d_in, d_out }, &[t]);
    }

    fn elementwise(&mut self, ops: u64, shape: &[usize]) {
        self.add(LayerDesc::Elementwise { ops }, shape);
    }

    fn norm(&mut self, t: usize, dim: usize) {
        self.add(LayerDesc::LayerNorm { dim }, &[t]);
    }

    /// Projections, scores, head averaging is not included.
    fn mha(&mut self, tq: usize, tk: usize, dim: usize, heads: usize) {
        self.linear(tq, dim, dim);
        self.linear(tk, dim, dim);
        self.linear(tk, dim, dim);
        self.add(LayerDesc::Attention { dim, heads }, &[tq, tk]);
        self.linear(tq, dim, dim);
    }

    fn branchformer(&mut self, t: usize, c: &ModelConfig) {
        let (d, half) = (c.dim, c.mlp_hidden / 2);
        self.norm(t, d);
        self.mha(t, t, d, c.heads);
        self.norm(t, d);
        self.linear(t, d, c.mlp_hidden);
        self.elementwise(GELU_FLOPS, &[t, c.mlp_hidden]);
        self.norm(t, half);
        self.add(
            LayerDesc::Conv1d {
                c_in: half,
                c_out: half,
                kernel: c.conv_kernel,
                stride: 1,
                groups: half,
            },
            &[t],
        );
        self.elementwise(2, &[t, half]);
        self.linear(t, half, d);
        self.linear(t, 2 * d, d);
        self.elementwise(1, &[t, d]);
    }

    fn take(&mut self) -> u64 {
        std::mem::take(&mut self.flops)
    }
}

/// Per-module costs of `config` on `input`, following the forward pass of
/// the model module by module.
pub fn cost_report(config: &ModelConfig, input: CostInput, label: impl Into<String>) -> Result<CostReport> {
    config.validate()?;
    if input.audio_frames.div_ceil(AUDIO_FRAMES_PER_VIDEO_FRAME) != input.video_frames {
        return Err(shape_err!(
            "{} audio frames do not match {} video frames",
            input.audio_frames,
            input.video_frames
        ));
    }
    let c = config;
    let (d, n) = (c.dim, input.video_frames);
    let mut k = Counter { flops: 0 };
    let mut modules = Vec::new();

    let t1 = input.audio_frames.div_ceil(2);
    let t2 = AudioFrontend::output_len(input.audio_frames);
    k.linear(t1, 3 * c.audio_features, d);
    k.elementwise(SILU_FLOPS, &[t1, d]);
    k.linear(t2, 3 * d, d);
    k.elementwise(SILU_FLOPS, &[t2, d]);
    k.linear(t2, d, d);
    k.elementwise(1, &[n, d]);
    modules.push(("audio_frontend", k.take()));

    for _ in 0..c.audio_layers {
        k.branchformer(n, c);
    }
    modules.push(("audio_encoder", k.take()));

    let kept = n.div_ceil(c.downsample);
    if c.has_video() {
        let (mut h, mut w, mut c_in) = (c.video.height, c.video.width, c.video.channels);
        for (&ch, &s) in c.visual_frontend.channels.iter().zip(&c.visual_frontend.spatial_strides) {
            let conv = |c_in, stride| LayerDesc::Conv3d {
                c_in,
                c_out: ch,
                kernel: [3, 3, 3],
                stride,
            };
            k.add(conv(c_in, s), &[kept, h, w]);
            (h, w) = (h.div_ceil(s), w.div_ceil(s));
            let cells = kept * h * w;
            k.elementwise(SILU_FLOPS, &[cells, ch]);
            k.add(conv(ch, 1), &[kept, h, w]);
            if c_in != ch || s != 1 {
                k.linear(cells, c_in, ch);
            }
            k.elementwise(1 + SILU_FLOPS, &[cells, ch]);
            c_in = ch;
        }
        k.elementwise(1, &[kept * h * w, c_in]);
        k.linear(kept, c_in, d);
        k.elementwise(1, &[kept, d]);
        modules.push(("visual_frontend", k.take()));

        for _ in 0..c.visual_layers {
            k.branchformer(kept, c);
            if c.claf {
                k.mha(kept, n, d, c.heads);
                k.elementwise(1, &[kept, d]);
            }
        }
        modules.push(("visual_encoder", k.take()));

        if c.upsamples() {
            let f = c.residual_features();
            if c.residual_prediction {
                let retained = kept * c.downsample;
                k.elementwise(1, &[retained, c.video.height, c.video.width, c.video.channels]);
            }
            let (mut t_in, mut done) = (kept, 1);
            for r in stage_ratios(c.downsample) {
                done *= r;
                let stride = c.downsample / done;
                let t_out = r * t_in;
                let preds = (r - 1) * t_in;
                let mut branches = 0;
                if c.context_prediction {
                    k.linear(t_in, 3 * d, d);
                    k.elementwise(SILU_FLOPS, &[t_in, d]);
                    k.linear(t_in, d, (r - 1) * d);
                    branches += 1;
                }
                if c.residual_prediction {
                    k.elementwise(1, &[preds, f]);
                    k.linear(preds, f, c.mlp_hidden);
                    k.elementwise(SILU_FLOPS, &[preds, c.mlp_hidden]);
                    k.linear(preds, c.mlp_hidden, d);
                    k.elementwise(1, &[preds, d]);
                    branches += 1;
                }
                k.linear(t_out, branches * d, d);
                k.mha(t_out, n.div_ceil(stride), d, c.heads);
                k.elementwise(1, &[t_out, d]);
                t_in = t_out;
            }
        }
        modules.push(("upsampler", k.take()));

        match c.fusion {
            FusionMode::Full => {
                let v = if c.upsamples() { n } else { kept };
                k.mha(n, v, d, c.heads);
                k.mha(v, n, d, c.heads);
                k.linear(n, 2 * d, d);
            }
            FusionMode::AvOnly => {
                k.mha(n, kept, d, c.heads);
                k.linear(n, d, d);
            }
        }
    } else {
        modules.push(("visual_frontend", 0));
        modules.push(("visual_encoder", 0));
        modules.push(("upsampler", 0));
    }
    k.linear(n, d, c.vocab_size);
    k.elementwise(3, &[n, c.vocab_size]);
    modules.push(("fusion", k.take()));

    let u = input.tokens;
    k.elementwise(1, &[u, d]);
    for _ in 0..c.decoder_layers {
        k.norm(u, d);
        k.mha(u, u, d, c.heads);
        k.norm(u, d);
        k.mha(u, n, d, c.heads);
        k.norm(u, d);
        k.linear(u, d, c.mlp_hidden);
        k.elementwise(SILU_FLOPS, &[u, c.mlp_hidden]);
        k.linear(u, c.mlp_hidden, d);
        k.elementwise(3, &[u, d]);
    }
    k.norm(u, d);
    k.linear(u, d, c.vocab_size);
    modules.push(("decoder", k.take()));

    let modules: Vec<(String, u64)> = modules.into_iter().map(|(n, f)| (n.to_string(), f)).collect();
    Ok(CostReport {
        label: label.into(),
        downsample: c.downsample,
        input,
        total: modules.iter().map(|(_, f)| f).sum(),
        modules,
    })
}

/// Reports for the audio-only model and for the full model at each
/// downsampling factor (1 is always included as the baseline).
pub fn cost_table(config: &ModelConfig, d_values: &[usize], input: CostInput) -> Result<Vec<CostReport>> {
    let mut ds: Vec<usize> = std::iter::once(1).chain(d_values.iter().copied()).collect();
    ds.sort_unstable();
    ds.dedup();
    let full = Mode::AvsrFull.apply(config);
    let mut reports = vec![cost_report(&Mode::Asr.apply(config), input, "asr")?];
    for d in ds {
        let mut c = full.clone();
        c.downsample = d;
        reports.push(cost_report(&c, input, format!("avsr_d{d}"))?);
    }
    Ok(reports)
}

/// Percentage reduction of `report` relative to `baseline`.
pub fn reduction_percent(baseline: &CostReport, report: &CostReport) -> f64 {
    100.0 * (1.0 - report.total as f64 / baseline.total as f64)
}

/// Fixed-width text table; reductions are relative to the `d = 1` row.
pub fn render_table(reports: &[CostReport]) -> String {
    let baseline = reports.iter().find(|r| r.label == "avsr_d1");
    let mut out = String::new();
    let _ = writeln!(out, "# GFlops per input; 1 multiply-accumulate = 2 flops");
    if let Some(r) = reports.first() {
        let _ = writeln!(
            out,
            "# input: {} audio frames, {} video frames, {} decoder tokens",
            r.input.audio_frames, r.input.video_frames, r.input.tokens
        );
    }
    let _ = write!(out, "{:<10}", "config");
    for m in MODULES {
        let _ = write!(out, " {:>15}", m);
    }
    let _ = writeln!(out, " {:>10} {:>10}", "total", "reduction");
    for r in reports {
        let _ = write!(out, "{:<10}", r.label);
        for m in MODULES {
            let _ = write!(out, " {:>15.3}", r.module(m).unwrap_or(0) as f64 / 1e9);
        }
        let red = match baseline {
            Some(b) if r.label.starts_with("avsr") => format!("{:.1}%", reduction_percent(b, r)),
            _ => "-".into(),
        };
        let _ = writeln!(out, " {:>10.3} {:>10}", r.gflops(), red);
    }
    out
}

/// One JSON record per line.
pub fn render_jsonl(reports: &[CostReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
