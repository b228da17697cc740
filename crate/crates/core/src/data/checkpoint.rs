//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `b"HGLSCKPT"`, `u32` version, `u64` config
//! hash, `u64` training step, `u32` length + JSON model config, `u32` blob
//! count, then blobs of `u32` name length, UTF-8 name, `u32` rank, `u64`
//! dims and `f64` payload. Parameters are stored under their own names;
//! optimizer moments as `adam.m/<name>` and `adam.v/<name>` after a `u64`
//! optimizer step (0 when no optimizer state is stored).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::features::{read_tensor, write_tensor};
use super::optim::AdamState;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::HourglassModel;
use crate::numerics::Tensor;
use crate::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGLSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

/// First eight bytes of the SHA-256 of the config's JSON form.
pub fn config_hash(config: &ModelConfig) -> u64 {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &HourglassModel, step: u64, optimizer: Option<&AdamState>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(model.config()),
            config: model.config().clone(),
            step,
            params: model
                .store()
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(self.version)?;
        w.write_u64::<LittleEndian>(self.config_hash)?;
        w.write_u64::<LittleEndian>(self.step)?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_u32::<LittleEndian>(cfg.len() as u32)?;
        w.write_all(&cfg)?;
        let mut blobs: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for (i, (n, _)) in self.params.iter().enumerate() {
                blobs.push((format!("{FIRST_MOMENT}{n}"), &opt.first[i]));
            }
            for (i, (n, _)) in self.params.iter().enumerate() {
                blobs.push((format!("{SECOND_MOMENT}{n}"), &opt.second[i]));
            }
        }
        w.write_u64::<LittleEndian>(self.optimizer.as_ref().map_or(0, |o| o.step))?;
        w.write_u32::<LittleEndian>(blobs.len() as u32)?;
        for (name, t) in blobs {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version} unsupported")));
        }
        let hash = r.read_u64::<LittleEndian>()?;
        let step = r.read_u64::<LittleEndian>()?;
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut cfg = vec![0u8; len];
        r.read_exact(&mut cfg)?;
        let config: ModelConfig = serde_json::from_slice(&cfg)?;
        if config_hash(&config) != hash {
            return Err(Error::Format("checkpoint config does not match its hash".into()));
        }
        let opt_step = r.read_u64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let (mut params, mut first, mut second) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..count {
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
            let t = read_tensor(r)?;
            if name.starts_with(FIRST_MOMENT) {
                first.push(t);
            } else if name.starts_with(SECOND_MOMENT) {
                second.push(t);
            } else {
                params.push((name, t));
            }
        }
        let optimizer = if first.is_empty() && second.is_empty() {
            None
        } else if first.len() == params.len() && second.len() == params.len() {
            Some(AdamState {
                step: opt_step,
                first,
                second,
            })
        } else {
            return Err(Error::Format("optimizer moments do not match the parameters".into()));
        };
        Ok(Self {
            version,
            config_hash: hash,
            config,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let ck = Self::read_from(&mut r)?;
        if r.read(&mut [0u8])? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(ck)
    }

    /// Overwrites every parameter of `model`. A differing config hash is an
    /// error unless `allow_config_mismatch` is set; names and shapes must
    /// match in any case.
    pub fn restore(&self, model: &mut HourglassModel, allow_config_mismatch: bool) -> Result<()> {
        let expected = config_hash(model.config());
        if expected != self.config_hash && !allow_config_mismatch {
            return Err(Error::ConfigHashMismatch {
                expected,
                found: self.config_hash,
            });
        }
        let store = model.store_mut();
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} blobs, model has {} parameters",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("model has no parameter `{name}`")))?;
            check_shape(name, t, store.get(id))?;
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Builds the checkpoint's model and restores all weights.
    pub fn to_model(&self) -> Result<HourglassModel> {
        let mut model = HourglassModel::new(self.config.clone(), 0)?;
        self.restore(&mut model, false)?;
        Ok(model)
    }
}

fn check_shape(name: &str, source: &Tensor, target: &Tensor) -> Result<()> {
    if source.shape() != target.shape() {
        return Err(Error::BlobShapeMismatch {
            name: name.to_string(),
            source_shape: source.shape().to_vec(),
            target_shape: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Which checkpoint blobs a partial load copies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MappingPolicy {
    /// Every blob whose name the target model also has.
    SharedNames,
    /// Only blobs under these name prefixes.
    Prefixes(Vec<String>),
}

impl MappingPolicy {
    /// Audio front-end, audio encoder, CTC head and decoder: the parts an
    /// audio-only model shares with the audio-visual one.
    pub fn audio_to_audio_visual() -> Self {
        Self::Prefixes(
            ["audio_frontend.", "audio_encoder.", "ctc_head.", "decoder."]
                .map(String::from)
                .to_vec(),
        )
    }

    fn selects(&self, name: &str) -> bool {
        match self {
            Self::SharedNames => true,
            Self::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartialLoadReport {
    /// Copied from the checkpoint.
    pub copied: Vec<String>,
    /// In the checkpoint but not copied.
    pub skipped: Vec<String>,
    /// Target parameters left at their fresh initialization.
    pub fresh: Vec<String>,
}

/// Copies the selected blobs into `model` by name, ignoring the config
/// hash. A selected name whose shapes differ is a hard error; nothing is
/// modified in that case.
pub fn load_checkpoint_partial(
    checkpoint: &Checkpoint,
    model: &mut HourglassModel,
    policy: &MappingPolicy,
) -> Result<PartialLoadReport> {
    let store = model.store_mut();
    let mut report = PartialLoadReport::default();
    let mut plan = Vec::new();
    for (name, t) in &checkpoint.params {
        match store.id(name) {
            Some(id) if policy.selects(name) => {
                check_shape(name, t, store.get(id))?;
                plan.push((id, t));
                report.copied.push(name.clone());
            }
            _ => report.skipped.push(name.clone()),
        }
    }
    for (id, t) in plan {
        *store.get_mut(id) = t.clone();
    }
    report.fresh = store
        .iter()
        .map(|(_, n, _)| n)
        .filter(|n| !report.copied.iter().any(|c| c == n))
        .map(String::from)
        .collect();
    Ok(report)
}
