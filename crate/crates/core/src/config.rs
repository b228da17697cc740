//! Model, loss and training configuration with named presets.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Raw video frame geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Residual 3-D convolution stack: one residual stage of two 3x3x3
/// convolutions per entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualFrontendConfig {
    pub channels: Vec<usize>,
    /// Spatial stride of the first convolution of each stage.
    pub spatial_strides: Vec<usize>,
}

impl VisualFrontendConfig {
    pub fn conv_layers(&self) -> usize {
        2 * self.channels.len()
    }

    pub fn total_stride(&self) -> usize {
        self.spatial_strides.iter().product()
    }
}

/// How the audio and visual streams are combined before CTC and decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Visual-audio and audio-visual cross-attention, concatenated.
    Full,
    /// Audio-visual cross-attention only; video stays at the reduced rate.
    AvOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    AudioOnly,
    AudioVisual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Alignment window: frames looked back.
    pub window_past: usize,
    /// Alignment window: frames looked ahead.
    pub window_future: usize,
    /// Weight of the alignment loss.
    pub lambda_align: f64,
    /// Weight of the CTC loss.
    pub lambda_ctc: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            window_past: 6,
            window_future: 6,
            lambda_align: 0.2,
            lambda_ctc: 0.3,
            label_smoothing: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_align < 0.0 || self.lambda_ctc < 0.0 {
            return Err(config_err!("loss weights must be non-negative"));
        }
        if self.lambda_align + self.lambda_ctc >= 1.0 {
            return Err(config_err!(
                "lambda_align + lambda_ctc = {} must be below 1",
                self.lambda_align + self.lambda_ctc
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err!("label smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn ce_weight(&self) -> f64 {
        1.0 - self.lambda_align - self.lambda_ctc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of feed-forward and convolutional-gating branches.
    pub mlp_hidden: usize,
    /// Depthwise kernel of the convolutional-gating branch (odd).
    pub conv_kernel: usize,
    pub audio_features: usize,
    pub audio_layers: usize,
    pub visual_layers: usize,
    pub decoder_layers: usize,
    /// Output vocabulary including blank (0) and start/end (last id).
    pub vocab_size: usize,
    pub video: VideoGeometry,
    pub visual_frontend: VisualFrontendConfig,
    /// Temporal downsampling factor of the video stream.
    pub downsample: usize,
    /// Side of the spatial grid raw frames are averaged onto before
    /// frame differencing.
    pub residual_grid: usize,
    pub modality: Modality,
    pub fusion: FusionMode,
    pub claf: bool,
    pub context_prediction: bool,
    pub residual_prediction: bool,
    pub loss: LossConfig,
}

impl ModelConfig {
    /// Full-size hyperparameters; used by the cost model, too large to train
    /// here.
    pub fn full_scale() -> Self {
        Self {
            dim: 256,
            heads: 4,
            mlp_hidden: 2048,
            conv_kernel: 31,
            audio_features: 80,
            audio_layers: 24,
            visual_layers: 12,
            decoder_layers: 6,
            vocab_size: 4000,
            video: VideoGeometry {
                height: 112,
                width: 112,
                channels: 3,
            },
            visual_frontend: VisualFrontendConfig {
                channels: vec![16, 32, 48, 64],
                spatial_strides: vec![2, 2, 2, 2],
            },
            downsample: 1,
            residual_grid: 4,
            modality: Modality::AudioVisual,
            fusion: FusionMode::Full,
            claf: true,
            context_prediction: true,
            residual_prediction: true,
            loss: LossConfig::default(),
        }
    }

    /// Small model that trains on a CPU in seconds to minutes.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            heads: 4,
            mlp_hidden: 128,
            conv_kernel: 7,
            audio_features: 20,
            audio_layers: 2,
            visual_layers: 2,
            decoder_layers: 2,
            vocab_size: 12,
            video: VideoGeometry {
                height: 16,
                width: 16,
                channels: 1,
            },
            visual_frontend: VisualFrontendConfig {
                channels: vec![8, 16],
                spatial_strides: vec![2, 2],
            },
            downsample: 2,
            residual_grid: 4,
            modality: Modality::AudioVisual,
            fusion: FusionMode::Full,
            claf: true,
            context_prediction: true,
            residual_prediction: true,
            loss: LossConfig::default(),
        }
    }

    /// The smallest configuration that still exercises every mechanism.
    pub fn tiny() -> Self {
        Self {
            dim: 16,
            heads: 2,
            mlp_hidden: 16,
            conv_kernel: 3,
            audio_features: 8,
            audio_layers: 1,
            visual_layers: 1,
            decoder_layers: 1,
            vocab_size: 6,
            video: VideoGeometry {
                height: 8,
                width: 8,
                channels: 1,
            },
            visual_frontend: VisualFrontendConfig {
                channels: vec![4, 4],
                spatial_strides: vec![2, 2],
            },
            downsample: 2,
            residual_grid: 2,
            ..Self::desk()
        }
    }

    pub fn sos_eos(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn has_video(&self) -> bool {
        self.modality == Modality::AudioVisual
    }

    /// Whether the upsampler runs (and the alignment loss exists).
    pub fn upsamples(&self) -> bool {
        self.has_video() && self.fusion == FusionMode::Full && self.downsample > 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(config_err!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.mlp_hidden < 2 || self.mlp_hidden % 2 != 0 {
            return Err(config_err!("mlp_hidden must be even and at least 2"));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(config_err!("conv_kernel must be odd"));
        }
        if self.vocab_size < 3 {
            return Err(config_err!("vocab needs blank, one token and start/end"));
        }
        if self.downsample == 0 {
            return Err(config_err!("downsampling factor must be at least 1"));
        }
        let vf = &self.visual_frontend;
        if vf.channels.is_empty() || vf.channels.len() != vf.spatial_strides.len() {
            return Err(config_err!("visual front-end needs one stride per stage"));
        }
        if vf.spatial_strides.contains(&0) {
            return Err(config_err!("visual front-end strides must be positive"));
        }
        let min_side = 2 * vf.total_stride();
        if self.video.height < min_side || self.video.width < min_side {
            return Err(config_err!(
                "video {}x{} too small for visual front-end pooling (need {}x{})",
                self.video.height,
                self.video.width,
                min_side,
                min_side
            ));
        }
        if self.residual_grid == 0
            || self.video.height % self.residual_grid != 0
            || self.video.width % self.residual_grid != 0
        {
            return Err(config_err!(
                "residual grid {} must divide frame size {}x{}",
                self.residual_grid,
                self.video.height,
                self.video.width
            ));
        }
        if self.upsamples() && !self.context_prediction && !self.residual_prediction {
            return Err(config_err!("upsampler needs context or residual prediction"));
        }
        self.loss.validate()
    }

    /// Features per frame after spatial averaging for frame differences.
    pub fn residual_features(&self) -> usize {
        self.residual_grid * self.residual_grid * self.video.channels
    }
}

/// Training and ablation modes; each is a single documented switch away
/// from `AvsrFull`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Audio-only recognizer.
    Asr,
    AvsrFull,
    /// Downsampled video fused by audio-visual cross-attention only.
    AvsrNoUpsample,
    AvsrNoClaf,
    /// Alignment loss weight set to zero.
    AvsrNoValign,
    /// Context prediction only, no residual branch and no alignment loss.
    AvsrContextOnly,
    /// Context prediction and alignment loss, no residual branch.
    AvsrNoResidual,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Asr,
        Mode::AvsrFull,
        Mode::AvsrNoUpsample,
        Mode::AvsrNoClaf,
        Mode::AvsrNoValign,
        Mode::AvsrContextOnly,
        Mode::AvsrNoResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Asr => "asr",
            Mode::AvsrFull => "avsr_full",
            Mode::AvsrNoUpsample => "avsr_no_upsample",
            Mode::AvsrNoClaf => "avsr_no_claf",
            Mode::AvsrNoValign => "avsr_no_valign",
            Mode::AvsrContextOnly => "avsr_context_only",
            Mode::AvsrNoResidual => "avsr_no_residual",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Applies this mode's switch to a full audio-visual configuration.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.modality = Modality::AudioVisual;
        c.fusion = FusionMode::Full;
        match self {
            Mode::AvsrFull => {}
            Mode::Asr => c.modality = Modality::AudioOnly,
            Mode::AvsrNoUpsample => c.fusion = FusionMode::AvOnly,
            Mode::AvsrNoClaf => c.claf = false,
            Mode::AvsrNoValign => c.loss.lambda_align = 0.0,
            Mode::AvsrContextOnly => {
                c.residual_prediction = false;
                c.loss.lambda_align = 0.0;
            }
            Mode::AvsrNoResidual => c.residual_prediction = false,
        }
        c
    }
}
