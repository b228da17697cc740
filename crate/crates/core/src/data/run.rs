//! TOML run configuration, run manifests, and the end-to-end run driver.
//!
//! ```toml
//! mode = "avsr_full"
//!
//! [model]            # full model config; see `ModelConfig`
//! [corpus]           # see `CorpusSpec`
//! [splits]
//! train = 64
//! valid = 16
//! test = 32
//! [train]            # see `TrainConfig`
//! steps = 200
//! [train.optimizer]  # see `AdamConfig`
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{config_hash, load_checkpoint_partial, Checkpoint, MappingPolicy, PartialLoadReport};
use super::corpus::{generate_corpus, CorpusSpec, Sample};
use super::train::{train, TrainConfig, TrainOutcome};
use super::optim::AdamConfig;
use crate::config::{Mode, ModelConfig, VideoGeometry, VisualFrontendConfig};
use crate::error::{config_err, Result};
use crate::model::HourglassModel;

/// Sample counts of the three corpus splits, drawn from consecutive index
/// ranges in the order train, valid, test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    /// Base model; the mode's switch is applied on top.
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub splits: Splits,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Noisy-audio setup where the visual stream carries real information:
    /// -5 dB SNR, 20% audio dropout, 8 tokens, 16x16 video.
    pub fn noisy_demo(mode: Mode, seed: u64) -> Self {
        let video = VideoGeometry {
            height: 16,
            width: 16,
            channels: 1,
        };
        let model = ModelConfig {
            dim: 32,
            heads: 2,
            mlp_hidden: 64,
            conv_kernel: 3,
            audio_features: 16,
            audio_layers: 1,
            visual_layers: 1,
            decoder_layers: 1,
            vocab_size: 10,
            video: video.clone(),
            visual_frontend: VisualFrontendConfig {
                channels: vec![8, 16],
                spatial_strides: vec![2, 2],
            },
            ..ModelConfig::desk()
        };
        Self {
            mode,
            model,
            corpus: CorpusSpec {
                tokens: 8,
                audio_features: 16,
                video,
                min_length: 2,
                max_length: 5,
                snr_db: Some(-5.0),
                dropout: 0.2,
                seed: 100 + seed,
            },
            splits: Splits {
                train: 512,
                valid: 0,
                test: 32,
            },
            train: TrainConfig {
                steps: 1200,
                batch_size: 8,
                eval_every: 0,
                seed,
                optimizer: AdamConfig {
                    lr: 3e-3,
                    warmup: 120,
                    ..AdamConfig::default()
                },
            },
        }
    }

    /// Seconds-scale configuration on the tiny model, for smoke tests.
    pub fn smoke(mode: Mode, seed: u64) -> Self {
        let model = ModelConfig::tiny();
        Self {
            mode,
            corpus: CorpusSpec {
                tokens: model.vocab_size - 2,
                audio_features: model.audio_features,
                video: model.video.clone(),
                min_length: 1,
                max_length: 3,
                snr_db: None,
                dropout: 0.0,
                seed,
            },
            model,
            splits: Splits {
                train: 8,
                valid: 4,
                test: 4,
            },
            train: TrainConfig {
                steps: 6,
                batch_size: 4,
                eval_every: 3,
                seed,
                optimizer: AdamConfig::default(),
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The model config actually trained.
    pub fn effective_model(&self) -> ModelConfig {
        self.mode.apply(&self.model)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.effective_model();
        m.validate()?;
        self.corpus.validate()?;
        if m.vocab_size != self.corpus.vocab_size() {
            return Err(config_err!(
                "model vocabulary {} != corpus tokens {} + blank + start/end",
                m.vocab_size,
                self.corpus.tokens
            ));
        }
        if m.audio_features != self.corpus.audio_features || m.video != self.corpus.video {
            return Err(config_err!("model and corpus feature geometry differ"));
        }
        if self.splits.train == 0 {
            return Err(config_err!("training split is empty"));
        }
        if self.train.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        Ok(())
    }

    pub fn split(&self, which: &str) -> Result<Vec<Sample>> {
        let s = self.splits;
        let (offset, count) = match which {
            "train" => (0, s.train),
            "valid" => (s.train, s.valid),
            "test" => (s.train + s.valid, s.test),
            _ => return Err(config_err!("unknown split `{which}`")),
        };
        if count == 0 {
            return Ok(Vec::new());
        }
        generate_corpus(&self.corpus, offset as u64, count)
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub mode: Mode,
    pub config: RunConfig,
    pub effective_model: ModelConfig,
    pub config_hash: String,
    pub init_from: Option<String>,
}

impl RunManifest {
    pub fn new(config: &RunConfig, init_from: Option<&Path>) -> Self {
        let effective_model = config.effective_model();
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            mode: config.mode,
            config_hash: format!("{:016x}", config_hash(&effective_model)),
            config: config.clone(),
            effective_model,
            init_from: init_from.map(|p| p.display().to_string()),
        }
    }
}

/// Result of [`run_training`] beyond the files it writes.
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub partial_load: Option<PartialLoadReport>,
}

/// Trains per `config` into `out_dir`: `manifest.json`, `metrics.jsonl`,
/// `best.ckpt` and `final.ckpt`. With `init_from`, the shared audio and
/// decoder weights are copied from that checkpoint first.
pub fn run_training(
    config: &RunConfig,
    train_set: &[Sample],
    valid_set: &[Sample],
    out_dir: &Path,
    init_from: Option<&Path>,
) -> Result<RunResult> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let manifest = RunManifest::new(config, init_from);
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let mut model = HourglassModel::new(config.effective_model(), config.train.seed)?;
    let partial_load = match init_from {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            Some(load_checkpoint_partial(&ck, &mut model, &MappingPolicy::audio_to_audio_visual())?)
        }
        None => None,
    };

    let mut metrics = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    let outcome = train(model, train_set, valid_set, &config.train, None, |r| {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n")?;
        Ok(())
    })?;
    metrics.flush()?;
    outcome.best.save(&out_dir.join("best.ckpt"))?;
    Checkpoint::from_model(&outcome.model, config.train.steps as u64, Some(&outcome.optimizer))
        .save(&out_dir.join("final.ckpt"))?;
    Ok(RunResult {
        outcome,
        partial_load,
    })
}
