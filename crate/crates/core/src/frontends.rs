//! Modality front-ends: audio subsampling to the video frame rate, temporal
//! video downsampling, and the residual 3-D convolutional visual front-end.

use crate::config::{ModelConfig, VideoGeometry};
use crate::error::{config_err, contract_err, shape_err, Error, Result};
use crate::numerics::{Graph, Init, Linear, Tensor, Var};

/// Audio feature frames per video frame.
pub const AUDIO_FRAMES_PER_VIDEO_FRAME: usize = 4;

/// One padded batch of audio features, raw video and token targets.
#[derive(Clone, Debug)]
pub struct AVBatch {
    /// `[B, Ta, Fa]`, zero beyond each sample's `audio_len`.
    pub audio: Tensor,
    /// `[B, Tv, H, W, C]`, zero beyond each sample's `video_len`.
    pub video: Tensor,
    pub tokens: Vec<Vec<usize>>,
    pub audio_len: Vec<usize>,
    pub video_len: Vec<usize>,
    pub token_len: Vec<usize>,
    /// Caller-assigned identifier, echoed in diagnostics.
    pub batch_id: usize,
}

impl AVBatch {
    /// Pads per-sample sequences into one batch and checks the batch
    /// invariants.
    pub fn from_sequences(
        audio: &[Tensor],
        video: &[Tensor],
        tokens: &[Vec<usize>],
        vocab_size: usize,
        batch_id: usize,
    ) -> Result<Self> {
        let b = audio.len();
        if b == 0 || video.len() != b || tokens.len() != b {
            return Err(shape_err!(
                "batch of {} audio, {} video, {} token sequences",
                b,
                video.len(),
                tokens.len()
            ));
        }
        let fa = audio[0].row_len();
        let frame_shape = video[0].shape()[1..].to_vec();
        let audio_len: Vec<usize> = audio.iter().map(Tensor::rows).collect();
        let video_len: Vec<usize> = video.iter().map(Tensor::rows).collect();
        for i in 0..b {
            if audio[i].row_len() != fa || video[i].shape()[1..] != frame_shape[..] {
                return Err(shape_err!("sample {i} feature geometry differs from sample 0"));
            }
            let expected = AUDIO_FRAMES_PER_VIDEO_FRAME * video_len[i];
            if audio_len[i].abs_diff(expected) > 3 {
                return Err(contract_err!(
                    "sample {i}: {} audio frames for {} video frames",
                    audio_len[i],
                    video_len[i]
                ));
            }
            if let Some(&t) = tokens[i].iter().find(|&&t| t == 0 || t >= vocab_size) {
                return Err(contract_err!("sample {i}: token id {t} outside [1, {vocab_size})"));
            }
        }
        let ta = *audio_len.iter().max().unwrap();
        let tv = *video_len.iter().max().unwrap();
        let pad = |seqs: &[Tensor], t: usize| -> Vec<f64> {
            let w = seqs[0].row_len();
            let mut out = Vec::with_capacity(b * t * w);
            for s in seqs {
                out.extend_from_slice(s.data());
                out.extend(std::iter::repeat_n(0.0, (t - s.rows()) * w));
            }
            out
        };
        let mut vshape = vec![b, tv];
        vshape.extend(&frame_shape);
        Ok(Self {
            audio: Tensor::new(vec![b, ta, fa], pad(audio, ta))?,
            video: Tensor::new(vshape, pad(video, tv))?,
            token_len: tokens.iter().map(Vec::len).collect(),
            tokens: tokens.to_vec(),
            audio_len,
            video_len,
            batch_id,
        })
    }

    pub fn size(&self) -> usize {
        self.audio_len.len()
    }

    fn unpad(t: &Tensor, b: usize, len: usize) -> Tensor {
        let per_sample: usize = t.shape()[2..].iter().product();
        let stride = t.shape()[1] * per_sample;
        let mut shape = vec![len];
        shape.extend(&t.shape()[2..]);
        Tensor::new(shape, t.data()[b * stride..b * stride + len * per_sample].to_vec())
            .expect("unpadded sample")
    }

    /// Sample `b`'s audio at its true length, `[audio_len, Fa]`.
    pub fn sample_audio(&self, b: usize) -> Tensor {
        Self::unpad(&self.audio, b, self.audio_len[b])
    }

    /// Sample `b`'s video at its true length, `[video_len, H, W, C]`.
    pub fn sample_video(&self, b: usize) -> Tensor {
        Self::unpad(&self.video, b, self.video_len[b])
    }

    pub fn audio_mask(&self, b: usize) -> Vec<bool> {
        (0..self.audio.shape()[1]).map(|t| t < self.audio_len[b]).collect()
    }

    pub fn video_mask(&self, b: usize) -> Vec<bool> {
        (0..self.video.shape()[1]).map(|t| t < self.video_len[b]).collect()
    }
}

/// Geometry of a temporal downsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    pub n: usize,
    pub d: usize,
    pub kept_len: usize,
    pub pad_added: usize,
}

impl ShapePlan {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(config_err!("downsampling factor must be at least 1"));
        }
        if n == 0 {
            return Err(contract_err!("cannot downsample an empty sequence"));
        }
        let kept_len = n.div_ceil(d);
        Ok(Self {
            n,
            d,
            kept_len,
            pad_added: kept_len * d - n,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.kept_len * self.d
    }
}

/// Result of [`video_downsample`].
#[derive(Clone, Debug)]
pub struct Downsampled {
    /// Every `d`-th frame starting from the first, `[ceil(n/d), H, W, C]`.
    pub kept: Tensor,
    /// Input padded to a multiple of `d` by repeating its last frame.
    pub retained: Tensor,
    pub plan: ShapePlan,
}

/// Keeps the first frame of every group of `d`; the full sequence is
/// retained for residual prediction.
pub fn video_downsample(video: &Tensor, d: usize) -> Result<Downsampled> {
    let plan = ShapePlan::new(video.rows(), d)?;
    let last = plan.n - 1;
    let padded: Vec<usize> = (0..plan.padded_len()).map(|i| i.min(last)).collect();
    let retained = video.select_rows(&padded)?;
    let kept_idx: Vec<usize> = (0..plan.kept_len).map(|k| k * d).collect();
    let kept = retained.select_rows(&kept_idx)?;
    Ok(Downsampled {
        kept,
        retained,
        plan,
    })
}

/// Row indices of a kernel-3 convolution with edge replication; `None`
/// never occurs, the type matches [`Graph::gather_rows`].
fn conv1d_taps(len: usize, stride: usize) -> Vec<Option<usize>> {
    let out = len.div_ceil(stride);
    let mut idx = Vec::with_capacity(out * 3);
    for t in 0..out {
        let centre = t * stride;
        for off in [-1isize, 0, 1] {
            let src = (centre as isize + off).clamp(0, len as isize - 1) as usize;
            idx.push(Some(src));
        }
    }
    idx
}

/// Kernel-3 temporal convolution `[T, C_in] -> [ceil(T/stride), C_out]`
/// with edge-replicated borders, so a constant input gives a constant
/// output.
pub fn temporal_conv(g: &mut Graph, x: Var, lin: &Linear, stride: usize) -> Result<Var> {
    let (t, c) = (g.shape(x)[0], g.shape(x)[1]);
    if lin.d_in != 3 * c {
        return Err(shape_err!("temporal conv expects {} inputs, got 3x{c}", lin.d_in));
    }
    let taps = g.gather_rows(x, conv1d_taps(t, stride))?;
    let out = t.div_ceil(stride);
    let cols = g.reshape(taps, &[out, 3 * c])?;
    lin.forward(g, cols)
}

/// Two stride-2 temporal convolutions (x4 subsampling) and a projection.
#[derive(Clone, Debug)]
pub struct AudioFrontend {
    pub conv1: Linear,
    pub conv2: Linear,
    pub proj: Linear,
}

impl AudioFrontend {
    pub fn new(init: &mut Init, features: usize, dim: usize) -> Self {
        let mut s = init.sub("audio_frontend");
        Self {
            conv1: Linear::new(&mut s, "conv1", 3 * features, dim),
            conv2: Linear::new(&mut s, "conv2", 3 * dim, dim),
            proj: Linear::new(&mut s, "proj", dim, dim),
        }
    }

    pub fn output_len(audio_len: usize) -> usize {
        audio_len.div_ceil(2).div_ceil(2)
    }

    /// `[Ta, Fa] -> [ceil(ceil(Ta/2)/2), D]`.
    pub fn forward(&self, g: &mut Graph, audio: Var) -> Result<Var> {
        let ta = g.shape(audio)[0];
        if ta < AUDIO_FRAMES_PER_VIDEO_FRAME {
            return Err(Error::InputTooShort {
                min: AUDIO_FRAMES_PER_VIDEO_FRAME,
                got: ta,
            });
        }
        let h = temporal_conv(g, audio, &self.conv1, 2)?;
        let h = g.silu(h);
        let h = temporal_conv(g, h, &self.conv2, 2)?;
        let h = g.silu(h);
        self.proj.forward(g, h)
    }
}

/// Trims or repeats the last frame so `x` has exactly `n` rows; differences
/// beyond one frame are a contract violation.
pub fn equalize_length(g: &mut Graph, x: Var, n: usize) -> Result<Var> {
    let len = g.shape(x)[0];
    match len.cmp(&n) {
        std::cmp::Ordering::Equal => Ok(x),
        _ if len.abs_diff(n) > 1 || len == 0 => Err(contract_err!(
            "audio length {len} cannot be equalized to video length {n}"
        )),
        std::cmp::Ordering::Greater => g.slice_rows(x, 0, n),
        std::cmp::Ordering::Less => {
            let idx = (0..n).map(|i| Some(i.min(len - 1))).collect();
            g.gather_rows(x, idx)
        }
    }
}

/// 3x3x3 convolution over `[T*H*W, C_in]` rows.
#[derive(Clone, Debug)]
struct Conv3d {
    lin: Linear,
    stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct Grid {
    t: usize,
    h: usize,
    w: usize,
}

impl Grid {
    fn strided(self, s: usize) -> Grid {
        Grid {
            t: self.t,
            h: self.h.div_ceil(s),
            w: self.w.div_ceil(s),
        }
    }

    fn cells(self) -> usize {
        self.t * self.h * self.w
    }
}

impl Conv3d {
    fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            lin: Linear::new(init, name, 27 * c_in, c_out),
            stride,
        }
    }

    /// Time borders replicate the edge frame; spatial borders are zero.
    fn taps(grid: Grid, stride: usize) -> Vec<Option<usize>> {
        let out = grid.strided(stride);
        let mut idx = Vec::with_capacity(out.cells() * 27);
        for t in 0..out.t {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    for dt in -1isize..=1 {
                        let ti = (t as isize + dt).clamp(0, grid.t as isize - 1) as usize;
                        for dy in -1isize..=1 {
                            for dx in -1isize..=1 {
                                let y = (oy * stride) as isize + dy;
                                let x = (ox * stride) as isize + dx;
                                let inside =
                                    y >= 0 && x >= 0 && (y as usize) < grid.h && (x as usize) < grid.w;
                                idx.push(inside.then(|| (ti * grid.h + y as usize) * grid.w + x as usize));
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    fn forward(&self, g: &mut Graph, x: Var, grid: Grid) -> Result<(Var, Grid)> {
        let c = g.shape(x)[1];
        let out = grid.strided(self.stride);
        let cols = g.gather_rows(x, Self::taps(grid, self.stride))?;
        let cols = g.reshape(cols, &[out.cells(), 27 * c])?;
        Ok((self.lin.forward(g, cols)?, out))
    }
}

#[derive(Clone, Debug)]
struct ResidualStage {
    conv_a: Conv3d,
    conv_b: Conv3d,
    shortcut: Option<Linear>,
    stride: usize,
}

impl ResidualStage {
    fn forward(&self, g: &mut Graph, x: Var, grid: Grid) -> Result<(Var, Grid)> {
        let (h, out) = self.conv_a.forward(g, x, grid)?;
        let h = g.silu(h);
        let (h, _) = self.conv_b.forward(g, h, out)?;
        let skip = match &self.shortcut {
            None => x,
            Some(lin) => {
                let mut idx = Vec::with_capacity(out.cells());
                for t in 0..out.t {
                    for oy in 0..out.h {
                        for ox in 0..out.w {
                            idx.push(Some((t * grid.h + oy * self.stride) * grid.w + ox * self.stride));
                        }
                    }
                }
                let sub = g.gather_rows(x, idx)?;
                lin.forward(g, sub)?
            }
        };
        let y = g.add(h, skip)?;
        Ok((g.silu(y), out))
    }
}

/// Residual 3-D CNN mapping raw frames `[T, H, W, C]` to `[T, D]`.
///
/// Temporal stride is always 1, so the number of frames is preserved.
#[derive(Clone, Debug)]
pub struct VisualFrontend {
    stages: Vec<ResidualStage>,
    proj: Linear,
    geometry: VideoGeometry,
}

impl VisualFrontend {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let vf = &cfg.visual_frontend;
        let min_side = 2 * vf.total_stride();
        if cfg.video.height < min_side || cfg.video.width < min_side {
            return Err(config_err!(
                "frames of {}x{} too small for the visual front-end (need {min_side})",
                cfg.video.height,
                cfg.video.width
            ));
        }
        let mut s = init.sub("visual_frontend");
        let mut stages = Vec::new();
        let mut c_in = cfg.video.channels;
        for (i, (&c, &stride)) in vf.channels.iter().zip(&vf.spatial_strides).enumerate() {
            let mut st = s.sub(&format!("stages.{i}"));
            let shortcut = (c_in != c || stride != 1).then(|| Linear::new(&mut st, "shortcut", c_in, c));
            stages.push(ResidualStage {
                conv_a: Conv3d::new(&mut st, "conv_a", c_in, c, stride),
                conv_b: Conv3d::new(&mut st, "conv_b", c, c, 1),
                shortcut,
                stride,
            });
            c_in = c;
        }
        Ok(Self {
            stages,
            proj: Linear::new(&mut s, "proj", c_in, cfg.dim),
            geometry: cfg.video.clone(),
        })
    }

    /// `frames: [T, H, W, C]` (a graph constant or input) to `[T, D]`.
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let shape = g.shape(frames).to_vec();
        let geo = &self.geometry;
        if shape.len() != 4 || shape[1..] != [geo.height, geo.width, geo.channels] {
            return Err(shape_err!(
                "visual front-end expects [T, {}, {}, {}], got {shape:?}",
                geo.height,
                geo.width,
                geo.channels
            ));
        }
        let mut grid = Grid {
            t: shape[0],
            h: shape[1],
            w: shape[2],
        };
        let mut x = g.reshape(frames, &[grid.cells(), shape[3]])?;
        for stage in &self.stages {
            (x, grid) = stage.forward(g, x, grid)?;
        }
        let pooled = g.group_mean(x, grid.h * grid.w)?;
        self.proj.forward(g, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamStore, RngStream};

    #[test]
    fn downsample_exact_division() {
        let video = Tensor::new(vec![6, 1, 1, 1], (0..6).map(f64::from).collect()).unwrap();
        let ds = video_downsample(&video, 2).unwrap();
        assert_eq!(ds.kept.data(), &[0.0, 2.0, 4.0]);
        assert_eq!(ds.plan.kept_len, 3);
        assert_eq!(ds.plan.pad_added, 0);
    }

    #[test]
    fn downsample_with_padding() {
        let video = Tensor::new(vec![7, 1, 1, 1], (0..7).map(f64::from).collect()).unwrap();
        let ds = video_downsample(&video, 2).unwrap();
        let expected: Vec<f64> = (0..7).step_by(2).map(f64::from).collect();
        assert_eq!(ds.kept.data(), &expected[..]);
        assert_eq!((ds.plan.kept_len, ds.plan.pad_added), (4, 1));
        assert_eq!(ds.retained.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 6.0]);
    }

    #[test]
    fn downsample_identity_and_errors() {
        let video = RngStream::new(1).normal_tensor(&[5, 2, 2, 1], 1.0);
        let ds = video_downsample(&video, 1).unwrap();
        assert_eq!(ds.kept, video);
        assert_eq!(ds.plan.pad_added, 0);
        assert!(matches!(video_downsample(&video, 0), Err(Error::Config(_))));
    }

    fn audio_frontend(features: usize, dim: usize) -> (ParamStore, AudioFrontend) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 5);
        let fe = AudioFrontend::new(&mut init, features, dim);
        (store, fe)
    }

    #[test]
    fn audio_frontend_lengths() {
        let (store, fe) = audio_frontend(80, 64);
        let mut g = Graph::with_params(&store);
        let a = g.constant(RngStream::new(2).normal_tensor(&[100, 80], 1.0));
        let out = fe.forward(&mut g, a).unwrap();
        assert_eq!(g.shape(out), &[25, 64]);

        let a = g.constant(Tensor::zeros(&[4, 80]));
        let out = fe.forward(&mut g, a).unwrap();
        assert_eq!(g.shape(out), &[1, 64]);

        let a = g.constant(Tensor::zeros(&[3, 80]));
        assert!(matches!(
            fe.forward(&mut g, a),
            Err(Error::InputTooShort { min: 4, got: 3 })
        ));
    }

    #[test]
    fn constant_zero_audio_is_time_invariant() {
        let (mut store, fe) = audio_frontend(8, 16);
        let mut rng = RngStream::new(8);
        for lin in [&fe.conv1, &fe.conv2, &fe.proj] {
            let b = lin.bias.unwrap();
            let shape = store.get(b).shape().to_vec();
            *store.get_mut(b) = rng.normal_tensor(&shape, 1.0);
        }
        let mut g = Graph::with_params(&store);
        let a = g.constant(Tensor::zeros(&[40, 8]));
        let out = fe.forward(&mut g, a).unwrap();
        let v = g.value(out);
        assert!(v.data().iter().any(|&x| x != 0.0));
        for t in 1..v.rows() {
            assert_eq!(v.row(t), v.row(0));
        }
    }

    #[test]
    fn equalize_trims_and_pads_by_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = equalize_length(&mut g, x, 4).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 3.0]);
        let y = equalize_length(&mut g, x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        assert!(equalize_length(&mut g, x, 5).is_err());
    }

    #[test]
    fn visual_frontend_shapes_and_time_invariance() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 3);
        let fe = VisualFrontend::new(&mut init, &cfg).unwrap();
        let mut g = Graph::with_params(&store);
        let frame = RngStream::new(4).normal_tensor(&[1, 16, 16, 1], 1.0);
        let clip = Tensor::new(vec![3, 16, 16, 1], frame.data().repeat(3)).unwrap();
        let x = g.constant(clip);
        let out = fe.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out), &[3, 64]);
        let v = g.value(out);
        for t in 1..3 {
            let diff = v.row(t).iter().zip(v.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn visual_frontend_rejects_small_frames() {
        let mut cfg = ModelConfig::desk();
        cfg.video.height = 4;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 3);
        assert!(matches!(VisualFrontend::new(&mut init, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn batch_rejects_bad_tokens_and_ratios() {
        let a = Tensor::zeros(&[8, 2]);
        let v = Tensor::zeros(&[2, 4, 4, 1]);
        assert!(AVBatch::from_sequences(&[a.clone()], &[v.clone()], &[vec![1, 2]], 5, 0).is_ok());
        assert!(AVBatch::from_sequences(&[a.clone()], &[v.clone()], &[vec![0]], 5, 0).is_err());
        assert!(AVBatch::from_sequences(&[a.clone()], &[v.clone()], &[vec![5]], 5, 0).is_err());
        let long = Tensor::zeros(&[20, 2]);
        assert!(AVBatch::from_sequences(&[long], &[v], &[vec![1]], 5, 0).is_err());
    }

    #[test]
    fn batch_padding_is_zero_and_unpads() {
        let mut rng = RngStream::new(1);
        let a1 = rng.normal_tensor(&[8, 2], 1.0);
        let a2 = rng.normal_tensor(&[12, 2], 1.0);
        let v1 = rng.normal_tensor(&[2, 4, 4, 1], 1.0);
        let v2 = rng.normal_tensor(&[3, 4, 4, 1], 1.0);
        let batch = AVBatch::from_sequences(
            &[a1.clone(), a2.clone()],
            &[v1.clone(), v2.clone()],
            &[vec![1], vec![2, 3]],
            5,
            7,
        )
        .unwrap();
        assert_eq!(batch.audio.shape(), &[2, 12, 2]);
        assert_eq!(batch.sample_audio(0), a1);
        assert_eq!(batch.sample_video(1), v2);
        assert!(batch.audio.data()[16..24].iter().all(|&x| x == 0.0));
        assert_eq!(batch.audio_mask(0).iter().filter(|&&m| m).count(), 8);
        assert_eq!(batch.video_mask(0), vec![true, true, false]);
    }
}
