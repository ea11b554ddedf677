//! Model checkpoints: the model config, its fingerprint, and every parameter
//! tensor by name.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic "RNNTCKPT" | version u32 | kind_len u32 kind | config_len u32 config JSON
//! | fingerprint [32] | tensor count u32
//! per tensor: name_len u32 name | rows u32 | cols u32 | rows*cols f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Transducer, TransducerConfig};
use crate::numerics::{Array2, Parameterized, RandomStream};
use crate::seq::{CharLm, CharLmConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RNNTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model that can be rebuilt from its config and then filled from tensors.
pub trait Checkpointable: Parameterized + Sized {
    type Config: Serialize + DeserializeOwned;
    const KIND: &'static str;
    fn config(&self) -> &Self::Config;
    fn from_config(config: Self::Config) -> Result<Self>;
}

impl Checkpointable for Transducer {
    type Config = TransducerConfig;
    const KIND: &'static str = "transducer";

    fn config(&self) -> &TransducerConfig {
        &self.config
    }

    fn from_config(config: TransducerConfig) -> Result<Self> {
        Transducer::new(config, &mut RandomStream::new(0, 0))
    }
}

impl Checkpointable for CharLm {
    type Config = CharLmConfig;
    const KIND: &'static str = "char_lm";

    fn config(&self) -> &CharLmConfig {
        &self.config
    }

    fn from_config(config: CharLmConfig) -> Result<Self> {
        CharLm::new(config, &mut RandomStream::new(0, 0))
    }
}

/// SHA-256 of any serializable value's JSON form, as lowercase hex.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(hex_digest(&json))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<M: Checkpointable>(model: &M) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, M::KIND.len())?;
    out.extend_from_slice(M::KIND.as_bytes());
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    out.extend_from_slice(&Sha256::digest(&config));
    let mut tensors: Vec<(String, Array2)> = Vec::new();
    model.visit_params("", &mut |name, a| tensors.push((name.to_string(), a.clone())));
    put_u32(&mut out, tensors.len())?;
    for (name, a) in &tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, a.rows())?;
        put_u32(&mut out, a.cols())?;
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint<M: Checkpointable>(bytes: &[u8]) -> Result<M> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()?;
    let kind = c.take(n)?;
    if kind != M::KIND.as_bytes() {
        return Err(Error::Checkpoint(format!(
            "expected a {} checkpoint, found {}",
            M::KIND,
            String::from_utf8_lossy(kind)
        )));
    }
    let n = c.u32()?;
    let config_bytes = c.take(n)?.to_vec();
    let stored = c.take(32)?;
    if Sha256::digest(&config_bytes).as_slice() != stored {
        return Err(Error::Checkpoint("config fingerprint mismatch".into()));
    }
    let config: M::Config = serde_json::from_slice(&config_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for _ in 0..c.u32()? {
        let n = c.u32()?;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (c.u32()?, c.u32()?);
        let raw = c.take(rows.checked_mul(cols).and_then(|k| k.checked_mul(8)).ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        tensors.insert(name, Array2::from_vec(rows, cols, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let mut model = M::from_config(config)?;
    let mut problem = None;
    model.visit_params_mut("", &mut |name, a| match tensors.remove(name) {
        Some(t) if t.shape() == a.shape() => *a = t,
        Some(t) => {
            problem.get_or_insert(format!("tensor {name} has shape {:?}, model expects {:?}", t.shape(), a.shape()));
        }
        None => {
            problem.get_or_insert(format!("tensor {name} is missing"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(model)
}

pub fn save_checkpoint<M: Checkpointable>(path: &Path, model: &M) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<M: Checkpointable>(path: &Path) -> Result<M> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joint::JointMode;
    use crate::numerics::flatten_params;
    use crate::seq::EncoderConfig;

    fn model() -> Transducer {
        let config = TransducerConfig {
            vocab: 3,
            encoder: EncoderConfig {
                input_dim: 2,
                aux_dim: 0,
                layers: 1,
                cells: 3,
                bidirectional: true,
                stack: 1,
                skip: 1,
                lookahead: 0,
            },
            prediction_embed: 2,
            prediction_cells: 3,
            joint_mode: JointMode::Multiplicative,
            joint_dim: 4,
            branch_biases: true,
        };
        Transducer::new(config, &mut RandomStream::new(9, 0)).unwrap()
    }

    #[test]
    fn transducer_round_trip() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        let back: Transducer = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(flatten_params(&back), flatten_params(&m));
    }

    #[test]
    fn corruption_is_detected() {
        let m = model();
        let mut bytes = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint::<CharLm>(&bytes).unwrap_err().to_string().contains("char_lm"));
        // Flip a byte inside the config JSON.
        bytes[30] ^= 0x01;
        assert!(decode_checkpoint::<Transducer>(&bytes).is_err());
        let good = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint::<Transducer>(&good[..good.len() - 3]).is_err());
    }
}
