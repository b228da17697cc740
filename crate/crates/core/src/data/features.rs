//! Feature files and on-disk datasets.
//!
//! A feature file is `b"HGFT"`, a `u32` format version, a `u32` rank, the
//! dimensions as `u64`, then the row-major little-endian `f64` payload.
//! A dataset directory holds `corpus.json` (spec, tokens, alignments) plus
//! one audio and one video feature file per sample.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::corpus::{CorpusSpec, Sample};
use crate::error::Result;
use crate::frontends::AVBatch;
use crate::numerics::{RngStream, Tensor};
use crate::Error;

pub const FEATURE_MAGIC: &[u8; 4] = b"HGFT";
pub const FEATURE_VERSION: u32 = 1;

pub(crate) fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub(crate) fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = r.read_u32::<LittleEndian>()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor rank {rank} is implausible")));
    }
    let shape = (0..rank)
        .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} too large")))?;
    let mut data = vec![0.0; numel];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Tensor::new(shape, data)
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_u32::<LittleEndian>(FEATURE_VERSION)?;
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("{} is not a feature file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("feature file version {version} unsupported")));
    }
    let t = read_tensor(&mut r)?;
    if r.read(&mut [0u8])? != 0 {
        return Err(Error::Format(format!("trailing bytes in {}", path.display())));
    }
    Ok(t)
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    tokens: Vec<usize>,
    alignment: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: CorpusSpec,
    offset: u64,
    samples: Vec<SampleMeta>,
}

fn sample_paths(dir: &Path, i: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{i:06}.audio.feat")),
        dir.join(format!("{i:06}.video.feat")),
    )
}

pub fn save_dataset(dir: &Path, spec: &CorpusSpec, offset: u64, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let (a, v) = sample_paths(dir, i);
        write_features(&a, &s.audio)?;
        write_features(&v, &s.video)?;
    }
    let meta = DatasetMeta {
        spec: spec.clone(),
        offset,
        samples: samples
            .iter()
            .map(|s| SampleMeta {
                tokens: s.tokens.clone(),
                alignment: s.alignment.clone(),
            })
            .collect(),
    };
    std::fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(CorpusSpec, Vec<Sample>)> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("corpus.json"))?)?;
    let samples = meta
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let (a, v) = sample_paths(dir, i);
            Ok(Sample {
                tokens: m.tokens,
                alignment: m.alignment,
                audio: read_features(&a)?,
                video: read_features(&v)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((meta.spec, samples))
}

/// Splits `samples` into padded batches. With `shuffle`, the order is a
/// seeded permutation; batch ids are consecutive from `first_id`.
pub fn make_batches(
    samples: &[Sample],
    batch_size: usize,
    vocab_size: usize,
    shuffle: Option<u64>,
    first_id: usize,
) -> Result<Vec<AVBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle {
        let mut rng = RngStream::new(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.int_range(0, i));
        }
    }
    order
        .chunks(batch_size)
        .enumerate()
        .map(|(j, idx)| {
            let pick = |f: fn(&Sample) -> &Tensor| idx.iter().map(|&i| f(&samples[i]).clone()).collect::<Vec<_>>();
            let tokens: Vec<Vec<usize>> = idx.iter().map(|&i| samples[i].tokens.clone()).collect();
            AVBatch::from_sequences(&pick(|s| &s.audio), &pick(|s| &s.video), &tokens, vocab_size, first_id + j)
        })
        .collect()
}
