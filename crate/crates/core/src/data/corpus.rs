//! Synthetic audio-visual corpus with known alignments.
//!
//! Every token owns an audio chirp (a Gaussian ridge sweeping across the
//! feature bins) and a visual blob moving across the frame. Both span the
//! same wall-clock duration, so token boundaries line up at a 4:1 audio to
//! video frame ratio. Noise and dropout corrupt the audio only.

use serde::{Deserialize, Serialize};

use crate::config::VideoGeometry;
use crate::error::Result;
use crate::frontends::AUDIO_FRAMES_PER_VIDEO_FRAME;
use crate::numerics::rng::mix_seed;
use crate::numerics::{RngStream, Tensor};
use crate::Error;

/// Shortest and longest token duration in audio frames.
pub const MIN_TOKEN_FRAMES: usize = 8;
pub const MAX_TOKEN_FRAMES: usize = 16;
/// Audio dropout zeroes whole segments of this many frames.
pub const DROPOUT_SEGMENT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Number of distinct tokens; ids are `1..=tokens` (0 is the CTC blank).
    pub tokens: usize,
    pub audio_features: usize,
    pub video: VideoGeometry,
    pub min_length: usize,
    pub max_length: usize,
    /// Audio signal-to-noise ratio in dB; `None` means clean.
    pub snr_db: Option<f64>,
    /// Probability that each audio segment is zeroed.
    pub dropout: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// Model vocabulary for this corpus: blank + tokens + start/end.
    pub fn vocab_size(&self) -> usize {
        self.tokens + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CorpusSpec(m));
        if self.tokens < 2 {
            return bad(format!("need at least 2 tokens, got {}", self.tokens));
        }
        if self.audio_features < 2 {
            return bad("need at least 2 audio features".into());
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return bad(format!("utterance length range {}..={} is empty", self.min_length, self.max_length));
        }
        if self.video.height < 4 || self.video.width < 4 || self.video.channels == 0 {
            return bad(format!("video frames of {}x{} are too small", self.video.height, self.video.width));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1]", self.dropout));
        }
        if self.snr_db.is_some_and(|s| s.is_nan()) {
            return bad("SNR is NaN".into());
        }
        Ok(())
    }

    /// Signatures derived from the corpus seed alone.
    pub fn templates(&self) -> Result<Vec<TokenTemplate>> {
        self.validate()?;
        let durations: Vec<usize> = (MIN_TOKEN_FRAMES..=MAX_TOKEN_FRAMES)
            .step_by(AUDIO_FRAMES_PER_VIDEO_FRAME)
            .collect();
        let mut rng = RngStream::new(mix_seed(self.seed, 0x7e_4d_1a7e));
        let fa = self.audio_features as f64;
        let (h, w) = (self.video.height as f64, self.video.width as f64);
        Ok((0..self.tokens)
            .map(|k| {
                // Spread start bins and blob positions evenly, then jitter, so
                // tokens stay distinguishable for any count.
                let phase = (k as f64 + rng.uniform_range(0.2, 0.8)) / self.tokens as f64;
                let audio_frames = durations[rng.int_range(0, durations.len() - 1)];
                TokenTemplate {
                    audio_frames,
                    bin_start: phase * (fa - 1.0),
                    bin_end: rng.uniform_range(0.0, fa - 1.0),
                    bin_width: rng.uniform_range(0.6, 1.4),
                    blob_start: (rng.uniform_range(0.15, 0.85) * (h - 1.0), phase * (w - 1.0)),
                    blob_end: (rng.uniform_range(0.15, 0.85) * (h - 1.0), rng.uniform_range(0.0, w - 1.0)),
                    blob_radius: rng.uniform_range(0.1, 0.25) * h.min(w),
                }
            })
            .collect())
    }
}

/// Audio and visual signature of one token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTemplate {
    pub audio_frames: usize,
    bin_start: f64,
    bin_end: f64,
    bin_width: f64,
    blob_start: (f64, f64),
    blob_end: (f64, f64),
    blob_radius: f64,
}

impl TokenTemplate {
    pub fn video_frames(&self) -> usize {
        self.audio_frames / AUDIO_FRAMES_PER_VIDEO_FRAME
    }

    fn audio_frame(&self, t: usize, features: usize, out: &mut [f64]) {
        let s = (t as f64 + 0.5) / self.audio_frames as f64;
        let centre = self.bin_start + s * (self.bin_end - self.bin_start);
        for (f, v) in out.iter_mut().enumerate().take(features) {
            let z = (f as f64 - centre) / self.bin_width;
            *v = (-0.5 * z * z).exp();
        }
    }

    fn video_frame(&self, t: usize, geo: &VideoGeometry, out: &mut [f64]) {
        let s = (t as f64 + 0.5) / self.video_frames() as f64;
        let cy = self.blob_start.0 + s * (self.blob_end.0 - self.blob_start.0);
        let cx = self.blob_start.1 + s * (self.blob_end.1 - self.blob_start.1);
        for y in 0..geo.height {
            for x in 0..geo.width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let v = (-(dy * dy + dx * dx) / (2.0 * self.blob_radius * self.blob_radius)).exp();
                for c in 0..geo.channels {
                    out[(y * geo.width + x) * geo.channels + c] = v;
                }
            }
        }
    }
}

/// One utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// `[Ta, Fa]` with `Ta = 4 * Tv`.
    pub audio: Tensor,
    /// `[Tv, H, W, C]`.
    pub video: Tensor,
    /// Position in `tokens` of the token shown in each video frame.
    pub alignment: Vec<usize>,
}

/// Generates sample `index`; a pure function of the spec and the index.
pub fn generate_sample(spec: &CorpusSpec, templates: &[TokenTemplate], index: u64) -> Result<Sample> {
    let mut rng = RngStream::new(mix_seed(spec.seed, index.wrapping_add(1)));
    let len = rng.int_range(spec.min_length, spec.max_length);
    let tokens: Vec<usize> = (0..len).map(|_| rng.int_range(1, spec.tokens)).collect();
    let fa = spec.audio_features;
    let geo = &spec.video;
    let pixels = geo.height * geo.width * geo.channels;

    let ta: usize = tokens.iter().map(|&k| templates[k - 1].audio_frames).sum();
    let tv = ta / AUDIO_FRAMES_PER_VIDEO_FRAME;
    let mut audio = vec![0.0; ta * fa];
    let mut video = vec![0.0; tv * pixels];
    let mut alignment = Vec::with_capacity(tv);
    let (mut at, mut vt) = (0, 0);
    for (pos, &k) in tokens.iter().enumerate() {
        let tpl = &templates[k - 1];
        for t in 0..tpl.audio_frames {
            tpl.audio_frame(t, fa, &mut audio[(at + t) * fa..(at + t + 1) * fa]);
        }
        for t in 0..tpl.video_frames() {
            tpl.video_frame(t, geo, &mut video[(vt + t) * pixels..(vt + t + 1) * pixels]);
            alignment.push(pos);
        }
        at += tpl.audio_frames;
        vt += tpl.video_frames();
    }

    if let Some(snr) = spec.snr_db {
        let power = audio.iter().map(|v| v * v).sum::<f64>() / audio.len() as f64;
        let std = (power / 10f64.powf(snr / 10.0)).sqrt();
        for v in &mut audio {
            *v += std * rng.normal();
        }
    }
    if spec.dropout > 0.0 {
        for seg in audio.chunks_mut(DROPOUT_SEGMENT * fa) {
            if rng.bernoulli(spec.dropout) {
                seg.fill(0.0);
            }
        }
    }
    Ok(Sample {
        tokens,
        audio: Tensor::new(vec![ta, fa], audio)?,
        video: Tensor::new(vec![tv, geo.height, geo.width, geo.channels], video)?,
        alignment,
    })
}

/// Samples `offset .. offset + count` of the corpus.
pub fn generate_corpus(spec: &CorpusSpec, offset: u64, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::CorpusSpec("sample count must be at least 1".into()));
    }
    let templates = spec.templates()?;
    (0..count as u64)
        .map(|i| generate_sample(spec, &templates, offset + i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec() -> CorpusSpec {
        CorpusSpec {
            tokens: 4,
            audio_features: 8,
            video: VideoGeometry {
                height: 8,
                width: 8,
                channels: 1,
            },
            min_length: 2,
            max_length: 4,
            snr_db: None,
            dropout: 0.0,
            seed: 9,
        }
    }

    #[test]
    fn deterministic_per_index() {
        let a = generate_corpus(&spec(), 0, 5).unwrap();
        let b = generate_corpus(&spec(), 3, 2).unwrap();
        assert_eq!(a[3], b[0]);
        assert_eq!(a[4], b[1]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn modalities_share_the_time_base() {
        for s in generate_corpus(&spec(), 0, 10).unwrap() {
            assert_eq!(s.audio.rows(), AUDIO_FRAMES_PER_VIDEO_FRAME * s.video.rows());
            assert_eq!(s.alignment.len(), s.video.rows());
            assert!(s.alignment.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
            assert_eq!(*s.alignment.last().unwrap(), s.tokens.len() - 1);
            assert!(s.tokens.iter().all(|&t| (1..=4).contains(&t)));
        }
    }

    #[test]
    fn full_dropout_silences_audio_only() {
        let mut sp = spec();
        sp.dropout = 1.0;
        sp.snr_db = Some(-5.0);
        let s = &generate_corpus(&sp, 0, 1).unwrap()[0];
        assert!(s.audio.data().iter().all(|&v| v == 0.0));
        let clean = &generate_corpus(&spec(), 0, 1).unwrap()[0];
        assert_eq!(s.video, clean.video);
    }

    #[test]
    fn noise_level_follows_snr() {
        let mut sp = spec();
        sp.snr_db = Some(0.0);
        let noisy = &generate_corpus(&sp, 0, 1).unwrap()[0];
        let clean = &generate_corpus(&spec(), 0, 1).unwrap()[0];
        let p = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        let noise: Vec<f64> = noisy.audio.data().iter().zip(clean.audio.data()).map(|(a, b)| a - b).collect();
        let ratio = p(&noise) / p(clean.audio.data());
        assert!((0.6..1.6).contains(&ratio), "noise/signal power {ratio}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut sp = spec();
        sp.tokens = 1;
        assert!(matches!(generate_corpus(&sp, 0, 1), Err(Error::CorpusSpec(_))));
        let mut sp = spec();
        sp.min_length = 5;
        assert!(sp.validate().is_err());
        assert!(generate_corpus(&spec(), 0, 0).is_err());
    }
}
