//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic, format version, SHA-256 of the config
//! echo, stage marker, RNG state, config echo (JSON), named `f64` blocks,
//! then a SHA-256 over everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::model::ModelState;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ACTNSET\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const RNG_LEN: usize = 32 + 8 + 16;
const HEADER_LEN: usize = 8 + 4 + DIGEST_LEN + 1 + RNG_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMarker {
    Pretrained = 1,
    Initialized = 2,
    Base = 3,
    Dual = 4,
    Unified = 5,
}

impl StageMarker {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::Pretrained,
            2 => Self::Initialized,
            3 => Self::Base,
            4 => Self::Dual,
            5 => Self::Unified,
            _ => return None,
        })
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stage: StageMarker,
    pub rng: RngState,
    pub model: ModelState,
}

/// SHA-256 of the canonical JSON form of a config.
pub fn config_digest(cfg: &TrainConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config_json = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&config_json));
        out.push(self.stage as u8);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&config_json);
        let blocks: Vec<(String, &[f64])> = self
            .model
            .named_blocks()
            .into_iter()
            .chain(self.model.norm_blocks())
            .collect();
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, data) in blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    /// Parse and verify a checkpoint. The checksum is checked before any
    /// field is interpreted, so a corrupted file never yields a model.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + DIGEST_LEN {
            return Err(CheckpointError::Truncated.into());
        }
        let (body, sum) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(CheckpointError::Checksum.into());
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let digest = r.take(DIGEST_LEN)?.to_vec();
        let stage = StageMarker::from_byte(r.take(1)?[0]).ok_or_else(|| malformed("unknown stage marker"))?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let cfg_len = r.u64()? as usize;
        let cfg_json = r.take(cfg_len)?;
        if Sha256::digest(cfg_json).as_slice() != digest.as_slice() {
            return Err(malformed("config digest does not match config echo"));
        }
        let config: TrainConfig =
            serde_json::from_slice(cfg_json).map_err(|e| malformed(&format!("config echo: {e}")))?;
        let n_blocks = r.u32()? as usize;
        let mut parsed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..n_blocks {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| malformed("block name is not UTF-8"))?
                .to_string();
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| malformed("block too large"))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if parsed.insert(name.clone(), values).is_some() {
                return Err(malformed(&format!("duplicate block {name}")));
            }
        }
        let mut model = ModelState::zeros(config.model_config()).map_err(|e| malformed(&e.to_string()))?;
        let mut filled = 0usize;
        let mut fill = |name: &str, dst: &mut [f64]| -> Result<()> {
            let src = parsed
                .get(name)
                .ok_or_else(|| malformed(&format!("missing block {name}")))?;
            if src.len() != dst.len() {
                return Err(malformed(&format!(
                    "block {name}: expected {} values, found {}",
                    dst.len(),
                    src.len()
                )));
            }
            dst.copy_from_slice(src);
            filled += 1;
            Ok(())
        };
        for (name, dst) in model.named_blocks_mut() {
            fill(&name, dst)?;
        }
        for (name, dst) in model.norm_blocks_mut() {
            fill(&name, dst)?;
        }
        if filled != n_blocks {
            return Err(malformed(&format!("expected {filled} blocks, found {n_blocks}")));
        }
        if r.pos != body.len() {
            return Err(malformed("trailing bytes after blocks"));
        }
        Ok(Self {
            config,
            stage,
            rng: RngState { seed, stream, word_pos },
            model,
        })
    }
}

fn malformed(msg: &str) -> Error {
    CheckpointError::Malformed(msg.to_string()).into()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated.into()),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write atomically: a temporary sibling file is renamed into place.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load and, when `expected` is given, reject a checkpoint whose model shape
/// differs from it.
pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(cfg) = expected {
        check_compatible(&ckpt.config, cfg)?;
    }
    Ok(ckpt)
}

pub fn check_compatible(stored: &TrainConfig, expected: &TrainConfig) -> Result<()> {
    let (a, b) = (stored.model_config(), expected.model_config());
    if a != b {
        return Err(CheckpointError::ConfigMismatch(format!(
            "checkpoint has K={}, D={}, T={}, hidden={:?}; config has K={}, D={}, T={}, hidden={:?}",
            a.num_actions,
            a.latent_dim,
            a.traj_dim / 2,
            a.hidden,
            b.num_actions,
            b.latent_dim,
            b.traj_dim / 2,
            b.hidden
        ))
        .into());
    }
    Ok(())
}
