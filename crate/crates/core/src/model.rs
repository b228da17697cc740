//! End-to-end recognizer assembled from the component modules.
//!
//! Samples are processed one at a time at their true lengths, so padding in
//! a batch can never influence another sample or the loss.

use crate::config::ModelConfig;
use crate::encoders::{BranchformerBlockConfig, Encoder, VisualEncoder};
use crate::error::{contract_err, Result};
use crate::frontends::{equalize_length, video_downsample, AVBatch, AudioFrontend, VisualFrontend};
use crate::fusion_decoder::{decode_teacher_forced, recognize_greedy, CtcHead, Decoder, Fusion};
use crate::losses::{ce_loss, ctc_loss, joint_loss, mean_of, va_align_loss, window_mass, LossBundle};
use crate::numerics::{add_positions, Graph, Init, ParamStore, Tensor, Var};
use crate::upsampler::{UpsampleStageOutput, Upsampler};
use crate::Error;

#[derive(Clone, Debug)]
struct VisualPath {
    frontend: VisualFrontend,
    encoder: VisualEncoder,
    upsampler: Option<Upsampler>,
    fusion: Fusion,
}

/// Per-sample forward result.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[n, D]`.
    pub fused: Var,
    /// `[n, V]`.
    pub ctc_log_probs: Var,
    pub stages: Vec<UpsampleStageOutput>,
    pub n: usize,
}

/// Recognition output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Recognized {
    pub hypothesis: Vec<usize>,
    /// Within-window mass of the full-rate alignment attention, averaged
    /// over frames; `None` without an upsampler.
    pub window_mass: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct HourglassModel {
    config: ModelConfig,
    store: ParamStore,
    audio_frontend: AudioFrontend,
    audio_encoder: Encoder,
    visual: Option<VisualPath>,
    ctc_head: CtcHead,
    decoder: Decoder,
}

impl HourglassModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let block = BranchformerBlockConfig::from_model(&config);
        let audio_frontend = AudioFrontend::new(&mut init, config.audio_features, config.dim);
        let audio_encoder = Encoder::new(&mut init, "audio_encoder", config.audio_layers, &block)?;
        let visual = if config.has_video() {
            Some(VisualPath {
                frontend: VisualFrontend::new(&mut init, &config)?,
                encoder: VisualEncoder::new(&mut init, config.visual_layers, &block, config.claf)?,
                upsampler: config.upsamples().then(|| Upsampler::new(&mut init, &config)).transpose()?,
                fusion: Fusion::new(&mut init, config.dim, config.heads, config.fusion)?,
            })
        } else {
            None
        };
        let ctc_head = CtcHead::new(&mut init, config.dim, config.vocab_size);
        let decoder = Decoder::new(
            &mut init,
            config.decoder_layers,
            config.dim,
            config.heads,
            config.mlp_hidden,
            config.vocab_size,
        )?;
        Ok(Self {
            config,
            store,
            audio_frontend,
            audio_encoder,
            visual,
            ctc_head,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Encodes and fuses sample `b`; the fused length is the sample's video
    /// length.
    pub fn encode(&self, g: &mut Graph, batch: &AVBatch, b: usize) -> Result<Encoded> {
        let n = batch.video_len[b];
        let audio = g.constant(batch.sample_audio(b));
        let ha = self.audio_frontend.forward(g, audio)?;
        let ha = equalize_length(g, ha, n)?;
        let ha = add_positions(g, ha)?;
        let ha = self.audio_encoder.forward(g, ha, None)?;

        let (fused, stages) = match &self.visual {
            None => (ha, Vec::new()),
            Some(vp) => {
                let down = video_downsample(&batch.sample_video(b), self.config.downsample)?;
                let kept = g.constant(down.kept);
                let hv = vp.frontend.forward(g, kept)?;
                let hv = add_positions(g, hv)?;
                let (hv, _) = vp.encoder.forward(g, hv, vp.encoder.has_claf().then_some(ha))?;
                // Without an upsampler the video stays at the reduced rate,
                // which full fusion accepts only when nothing was dropped.
                let (p, stages) = match &vp.upsampler {
                    Some(up) => {
                        let out = up.forward(g, hv, &down.retained, ha)?;
                        (out.p, out.stages)
                    }
                    None => (hv, Vec::new()),
                };
                (vp.fusion.forward(g, ha, p)?, stages)
            }
        };
        let ctc_log_probs = self.ctc_head.forward(g, fused)?;
        Ok(Encoded {
            fused,
            ctc_log_probs,
            stages,
            n,
        })
    }

    /// Alignment loss of one sample: per-stage values averaged over stages,
    /// zero when there is no upsampler.
    fn align_loss(&self, g: &mut Graph, enc: &Encoded) -> Result<Var> {
        let cfg = &self.config.loss;
        let per: Vec<Var> = enc
            .stages
            .iter()
            .map(|s| va_align_loss(g, s.alpha, s.valid_queries, cfg.window_past, cfg.window_future))
            .collect::<Result<_>>()?;
        match mean_of(g, &per)? {
            Some(v) => Ok(v),
            None => Ok(g.constant(Tensor::scalar(0.0))),
        }
    }

    /// Joint loss over the batch: each component is the mean over samples.
    pub fn loss(&self, g: &mut Graph, batch: &AVBatch) -> Result<(Var, LossBundle)> {
        let sos_eos = self.config.sos_eos();
        let (mut ces, mut ctcs, mut vas) = (Vec::new(), Vec::new(), Vec::new());
        for b in 0..batch.size() {
            let enc = self.encode(g, batch, b)?;
            let tokens = &batch.tokens[b];
            let mut ce_targets = tokens.clone();
            ce_targets.push(sos_eos);
            let logits = decode_teacher_forced(g, &self.decoder, enc.fused, tokens, sos_eos)?;
            ces.push(ce_loss(g, logits, &ce_targets, self.config.loss.label_smoothing)?);
            ctcs.push(ctc_loss(g, enc.ctc_log_probs, tokens).map_err(|e| match e {
                Error::InfeasibleTarget {
                    target_len,
                    input_len,
                    needed,
                    ..
                } => Error::InfeasibleTarget {
                    sample: b,
                    target_len,
                    input_len,
                    needed,
                },
                other => other,
            })?);
            vas.push(self.align_loss(g, &enc)?);
        }
        let ce = mean_of(g, &ces)?.ok_or_else(|| contract_err!("empty batch"))?;
        let ctc = mean_of(g, &ctcs)?.expect("non-empty");
        let va = mean_of(g, &vas)?.expect("non-empty");
        joint_loss(g, ce, ctc, va, &self.config.loss)
    }

    /// Greedy recognition of every sample in the batch.
    pub fn recognize(&self, batch: &AVBatch, max_len: usize) -> Result<Vec<Recognized>> {
        let cfg = &self.config.loss;
        (0..batch.size())
            .map(|b| {
                let mut g = Graph::with_params(&self.store);
                let enc = self.encode(&mut g, batch, b)?;
                let window_mass = enc
                    .stages
                    .last()
                    .map(|s| window_mass(g.value(s.alpha), s.valid_queries, cfg.window_past, cfg.window_future))
                    .transpose()?
                    .map(|s| s / enc.n as f64);
                let hypothesis = recognize_greedy(&mut g, &self.decoder, enc.fused, self.config.sos_eos(), max_len)?;
                Ok(Recognized {
                    hypothesis,
                    window_mass,
                })
            })
            .collect()
    }
}
