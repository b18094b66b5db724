//! Checkpoint file:
//!
//! ```text
//! "MRDLCKPT"                         8 bytes
//! version: u32 = 1
//! config:  u32 byte length, UTF-8 key=value lines
//! arrays:  u32 count, then per array
//!          u32 name length, name, u32 rank, rank × u32 dims, f32 payload
//! rng:     32-byte seed, u64 stream, u64 word position low, u64 high
//! ```
//!
//! Little-endian throughout. The config block holds the training settings
//! plus `image_size` and `classes`, which is enough to rebuild the model
//! shape before the arrays are read into it.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::fusion::{Model, ModelParams};
use crate::optim::{parse_kv, RngState, TrainConfig};
use crate::texdata::Reader;

pub const CKPT_MAGIC: &[u8; 8] = b"MRDLCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub image_size: usize,
    pub classes: usize,
    pub params: ModelParams,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: &Model, rng: RngState) -> Self {
        Checkpoint {
            config,
            image_size: model.config.image_size,
            classes: model.config.classes,
            params: model.params.clone(),
            rng,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let mc = self.config.model_config(self.image_size, self.classes)?;
        Model::from_params(mc, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut out, CKPT_VERSION);
        let mut kv = self.config.to_kv();
        kv.push_str(&format!("image_size={}\nclasses={}\n", self.image_size, self.classes));
        put_u32(&mut out, kv.len() as u32);
        out.extend_from_slice(kv.as_bytes());
        let groups = self.params.groups();
        put_u32(&mut out, groups.len() as u32);
        for g in &groups {
            put_u32(&mut out, g.name.len() as u32);
            out.extend_from_slice(g.name.as_bytes());
            put_u32(&mut out, g.dims.len() as u32);
            for &d in &g.dims {
                put_u32(&mut out, d as u32);
            }
            for &v in g.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&(self.rng.word_pos as u64).to_le_bytes());
        out.extend_from_slice(&((self.rng.word_pos >> 64) as u64).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(CKPT_MAGIC.len()).map_err(|_| FormatError::BadMagic {
            expected: "MRDLCKPT",
        })?;
        if magic != CKPT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: "MRDLCKPT",
            }
            .into());
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let kv_len = r.u32()? as usize;
        let kv = std::str::from_utf8(r.take(kv_len)?)
            .map_err(|_| FormatError::InvalidHeader("config block is not UTF-8".into()))?;

        let mut config = TrainConfig::default();
        let (mut image_size, mut classes) = (None, None);
        for (key, value, line) in parse_kv(kv)? {
            let bad = |reason: String| FormatError::Config { line, reason };
            match key.as_str() {
                "image_size" => {
                    image_size = Some(value.parse().map_err(|_| bad(format!("bad image_size {value:?}")))?)
                }
                "classes" => {
                    classes = Some(value.parse().map_err(|_| bad(format!("bad classes {value:?}")))?)
                }
                _ => config.set(&key, &value).map_err(|e| bad(e.to_string()))?,
            }
        }
        let missing = |what: &str| FormatError::InvalidHeader(format!("config block lacks {what}"));
        let image_size: usize = image_size.ok_or_else(|| missing("image_size"))?;
        let classes: usize = classes.ok_or_else(|| missing("classes"))?;
        let mc = config
            .model_config(image_size, classes)
            .map_err(|e| FormatError::InvalidHeader(e.to_string()))?;
        let mut params = ModelParams::zeros(&mc)?;

        let expected: Vec<(String, Vec<usize>)> = params
            .groups()
            .into_iter()
            .map(|g| (g.name, g.dims))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(FormatError::InvalidHeader(format!(
                "{count} arrays, model needs {}",
                expected.len()
            ))
            .into());
        }
        let mut groups = params.groups_mut();
        for (index, (name, dims)) in expected.iter().enumerate() {
            let name_len = r.u32()? as usize;
            let got = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| FormatError::InvalidHeader("array name is not UTF-8".into()))?;
            if got != name {
                return Err(FormatError::InvalidHeader(format!(
                    "array {index} is {got:?}, expected {name:?}"
                ))
                .into());
            }
            let rank = r.u32()? as usize;
            let got_dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if &got_dims != dims {
                return Err(FormatError::InvalidHeader(format!(
                    "{name} has dims {got_dims:?}, expected {dims:?}"
                ))
                .into());
            }
            let values = &mut groups[index].values;
            let raw = r.take(4 * values.len())?;
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(FormatError::NonFinitePayload { level: index, index: i }.into());
                }
                values[i] = v as f64;
            }
        }
        drop(groups);

        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        if r.remaining() != 0 {
            return Err(FormatError::TrailingBytes(r.remaining()).into());
        }
        Ok(Checkpoint {
            config,
            image_size,
            classes,
            params,
            rng: RngState {
                seed,
                stream,
                word_pos: lo | (hi << 64),
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.as_ref().display()),
            ))
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
