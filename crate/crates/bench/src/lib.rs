//! Benchmark fixtures shared by the criterion suites.

use hourglass_core::data::{generate_corpus, make_batches, CorpusSpec};
use hourglass_core::{AVBatch, ModelConfig, Result};

/// One batch of clean synthetic utterances matching `cfg`.
pub fn batch_for(cfg: &ModelConfig, size: usize, seed: u64) -> Result<AVBatch> {
    let spec = CorpusSpec {
        tokens: cfg.vocab_size - 2,
        audio_features: cfg.audio_features,
        video: cfg.video.clone(),
        min_length: 3,
        max_length: 5,
        snr_db: None,
        dropout: 0.0,
        seed,
    };
    let samples = generate_corpus(&spec, 0, size)?;
    let mut batches = make_batches(&samples, size, cfg.vocab_size, None, 0)?;
    Ok(batches.remove(0))
}
