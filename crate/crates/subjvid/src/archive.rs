//! Little-endian tensor archive and checkpoint files.
//!
//! Both share one layout; only the magic differs.
//!
//! ```text
//! offset  size        field
//! 0       4           magic: b"SVTA" (tensor archive) or b"SVCK" (checkpoint)
//! 4       4           u32 format version, currently 1
//! 8       4           u32 metadata entry count M
//!         M entries   u32 key length, key bytes (UTF-8),
//!                     u32 value length, value bytes (UTF-8)
//!         4           u32 tensor count K
//!         K entries   u32 name length, name bytes (UTF-8),
//!                     u32 rank R, R x u64 dims,
//!                     prod(dims) x f64 values in row-major order
//! ```
//!
//! Metadata and tensors are written sorted by name, so equal contents give
//! equal bytes. Trailing bytes after the last tensor are an error.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use subjvid_core::encoder::{ProxyEncoder, ENCODER_VERSION};
use subjvid_core::model::{ModelConfig, ModelWeights, Prediction, WEIGHTS_VERSION};
use subjvid_core::Tensor;

use crate::error::{HarnessError, Result};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"SVTA";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SVCK";
pub const FORMAT_VERSION: u32 = 1;

/// Guards against absurd lengths in corrupt files before allocating.
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Archive,
    Checkpoint,
}

impl Kind {
    fn magic(self) -> [u8; 4] {
        match self {
            Kind::Archive => ARCHIVE_MAGIC,
            Kind::Checkpoint => CHECKPOINT_MAGIC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| HarnessError::Format(format!("archive has no tensor named {name:?}")))
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| HarnessError::Format(format!("archive has no metadata key {key:?}")))
    }

    fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self.meta_value(key)?;
        v.parse()
            .map_err(|_| HarnessError::Format(format!("metadata {key:?} is not an integer: {v:?}")))
    }

    fn meta_f64(&self, key: &str) -> Result<f64> {
        let v = self.meta_value(key)?;
        v.parse()
            .map_err(|_| HarnessError::Format(format!("metadata {key:?} is not a number: {v:?}")))
    }

    pub fn to_bytes(&self, kind: Kind) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&kind.magic());
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], kind: Kind) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != kind.magic() {
            return Err(HarnessError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&kind.magic())
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(HarnessError::Format(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut archive = Archive::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            archive.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut count: u64 = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                count = count.saturating_mul(d);
                shape.push(d as usize);
            }
            if count > MAX_ELEMENTS {
                return Err(HarnessError::Format(format!("tensor {name:?} is implausibly large")));
            }
            let raw = r.take(count as usize * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            archive.tensors.insert(name, Tensor::new(&shape, data));
        }
        if r.pos != bytes.len() {
            return Err(HarnessError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path, kind: Kind) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            }
        }
        fs::write(path, self.to_bytes(kind)).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path, kind: Kind) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes, kind).map_err(|e| match e {
            HarnessError::Format(m) => HarnessError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| HarnessError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| HarnessError::Format("non-UTF-8 string".to_string()))
    }
}

const KIND_KEY: &str = "kind";

pub fn model_to_archive(w: &ModelWeights) -> Archive {
    let c = &w.config;
    let mut a = Archive::new()
        .with_meta(KIND_KEY, "model")
        .with_meta("weights_version", w.version)
        .with_meta("latent_channels", c.latent_channels)
        .with_meta("height", c.height)
        .with_meta("width", c.width)
        .with_meta("dim", c.dim)
        .with_meta("mlp_dim", c.mlp_dim)
        .with_meta("text_dim", c.text_dim)
        .with_meta("max_prompt", c.max_prompt)
        .with_meta("vocab", c.vocab)
        .with_meta("blocks", format!("{},{},{}", c.blocks[0], c.blocks[1], c.blocks[2]))
        .with_meta("prediction", c.prediction.name())
        .with_meta("schedule_steps", c.schedule_steps)
        // Display for f64 prints the shortest string that parses back exactly.
        .with_meta("beta_start", c.beta_start)
        .with_meta("beta_end", c.beta_end);
    for (name, t) in w.params() {
        a.insert(name, t.clone());
    }
    a
}

pub fn model_from_archive(a: &Archive) -> Result<ModelWeights> {
    expect_kind(a, "model")?;
    let version = a.meta_usize("weights_version")? as u32;
    if version != WEIGHTS_VERSION {
        return Err(HarnessError::Format(format!(
            "model weights version {version}, expected {WEIGHTS_VERSION}"
        )));
    }
    let blocks: Vec<usize> = a
        .meta_value("blocks")?
        .split(',')
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| HarnessError::Format("bad blocks metadata".to_string()))?;
    let blocks: [usize; 3] = blocks
        .try_into()
        .map_err(|_| HarnessError::Format("blocks metadata needs three levels".to_string()))?;
    let config = ModelConfig {
        latent_channels: a.meta_usize("latent_channels")?,
        height: a.meta_usize("height")?,
        width: a.meta_usize("width")?,
        dim: a.meta_usize("dim")?,
        mlp_dim: a.meta_usize("mlp_dim")?,
        text_dim: a.meta_usize("text_dim")?,
        max_prompt: a.meta_usize("max_prompt")?,
        vocab: a.meta_usize("vocab")?,
        blocks,
        prediction: Prediction::parse(a.meta_value("prediction")?)
            .ok_or_else(|| HarnessError::Format("unknown prediction type".to_string()))?,
        schedule_steps: a.meta_usize("schedule_steps")?,
        beta_start: a.meta_f64("beta_start")?,
        beta_end: a.meta_f64("beta_end")?,
    };
    Ok(ModelWeights::from_params(config, version, a.tensors.clone())?)
}

pub fn encoder_to_archive(e: &ProxyEncoder) -> Archive {
    let mut a = Archive::new()
        .with_meta(KIND_KEY, "encoder")
        .with_meta("encoder_version", e.version);
    for (name, t) in e.params() {
        a.insert(name, t.clone());
    }
    a
}

pub fn encoder_from_archive(a: &Archive) -> Result<ProxyEncoder> {
    expect_kind(a, "encoder")?;
    let version = a.meta_usize("encoder_version")? as u32;
    if version != ENCODER_VERSION {
        return Err(HarnessError::Format(format!(
            "encoder version {version}, expected {ENCODER_VERSION}"
        )));
    }
    Ok(ProxyEncoder::from_params(version, a.tensors.clone())?)
}

fn expect_kind(a: &Archive, kind: &str) -> Result<()> {
    let found = a.meta_value(KIND_KEY)?;
    if found != kind {
        return Err(HarnessError::Format(format!("checkpoint holds a {found}, expected a {kind}")));
    }
    Ok(())
}

pub fn save_model(w: &ModelWeights, path: &Path) -> Result<()> {
    model_to_archive(w).save(path, Kind::Checkpoint)
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    model_from_archive(&Archive::load(path, Kind::Checkpoint)?)
}

pub fn save_encoder(e: &ProxyEncoder, path: &Path) -> Result<()> {
    encoder_to_archive(e).save(path, Kind::Checkpoint)
}

pub fn load_encoder(path: &Path) -> Result<ProxyEncoder> {
    encoder_from_archive(&Archive::load(path, Kind::Checkpoint)?)
}
