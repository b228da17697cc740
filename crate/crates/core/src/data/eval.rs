//! Token error rate and attention diagnostics.

use serde::{Deserialize, Serialize};

use super::corpus::Sample;
use super::features::make_batches;
use crate::error::Result;
use crate::model::HourglassModel;

/// Levenshtein distance between two token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Total edit distance over total reference length.
pub fn token_error_rate(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> f64 {
    let errors: usize = references.iter().zip(hypotheses).map(|(r, h)| edit_distance(r, h)).sum();
    let total: usize = references.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    errors as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ter: f64,
    /// Mean over video frames of the alignment attention mass inside the
    /// loss window; absent for models without an upsampler.
    pub within_window_attention_mass: Option<f64>,
    pub references: Vec<Vec<usize>>,
    pub hypotheses: Vec<Vec<usize>>,
}

/// Greedy recognition of every sample. Hypotheses are capped at the number
/// of video frames.
pub fn evaluate(model: &HourglassModel, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    let mut hypotheses = Vec::with_capacity(samples.len());
    let (mut mass, mut frames) = (0.0, 0usize);
    let mut has_mass = false;
    for batch in make_batches(samples, batch_size, model.config().vocab_size, None, 0)? {
        let max_len = *batch.video_len.iter().max().expect("non-empty batch");
        for (b, rec) in model.recognize(&batch, max_len)?.into_iter().enumerate() {
            if let Some(m) = rec.window_mass {
                has_mass = true;
                mass += m * batch.video_len[b] as f64;
                frames += batch.video_len[b];
            }
            hypotheses.push(rec.hypothesis);
        }
    }
    let references: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
    Ok(EvalReport {
        ter: token_error_rate(&references, &hypotheses),
        within_window_attention_mass: has_mass.then(|| mass / frames as f64),
        references,
        hypotheses,
    })
}
