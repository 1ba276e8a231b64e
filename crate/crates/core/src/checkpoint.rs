//! Versioned binary checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "DSPERTCK" | version u32
//! config:  len u64 | JSON bytes              | checksum u64
//! tensors: count u64 | per tensor: name len u32, name, rank u32,
//!          dims u64.., data f64..            | checksum u64
//! rng:     seed u64 | position u64           | checksum u64
//! ```
//!
//! Checksums are 64-bit FNV-1a over the section payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSPERTCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    vocab: Vocab,
    run: RunConfig,
}

/// A trained model together with everything needed to use it again.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub run: RunConfig,
    pub rng: SplitMix64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn push_section(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(payload);
    out.extend_from_slice(&fnv1a(payload).to_le_bytes());
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let meta = Meta {
        model: ck.model.config.clone(),
        vocab: ck.vocab.clone(),
        run: ck.run.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Integrity {
        section: "config",
        message: e.to_string(),
    })?;
    let mut config = (json.len() as u64).to_le_bytes().to_vec();
    config.extend_from_slice(&json);
    push_section(&mut out, &config);

    let mut tensors = (ck.model.store.len() as u64).to_le_bytes().to_vec();
    for (_, p) in ck.model.store.iter() {
        tensors.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        tensors.extend_from_slice(p.name.as_bytes());
        tensors.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            tensors.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            tensors.extend_from_slice(&x.to_le_bytes());
        }
    }
    push_section(&mut out, &tensors);

    let mut rng = ck.rng.seed().to_le_bytes().to_vec();
    rng.extend_from_slice(&ck.rng.position().to_le_bytes());
    push_section(&mut out, &rng);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
    section_start: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Integrity {
            section: self.section,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail("file truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("length {v} too large")))
    }

    fn begin(&mut self, section: &'static str) {
        self.section = section;
        self.section_start = self.pos;
    }

    fn finish(&mut self) -> Result<()> {
        let payload = &self.bytes[self.section_start..self.pos];
        let expected = fnv1a(payload);
        let stored = self.u64()?;
        if stored != expected {
            return Err(self.fail("checksum mismatch"));
        }
        Ok(())
    }
}

/// Named tensors as stored, in file order.
type NamedTensors = Vec<(String, Tensor)>;

fn decode_parts(bytes: &[u8]) -> Result<(Meta, NamedTensors, SplitMix64)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        section: "header",
        section_start: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(r.fail("not a checkpoint file (bad magic bytes)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}, expected {VERSION}")));
    }

    r.begin("config");
    let len = r.usize()?;
    let json = r.take(len)?;
    r.finish()?;
    let meta: Meta = serde_json::from_slice(json).map_err(|e| Error::Integrity {
        section: "config",
        message: e.to_string(),
    })?;

    r.begin("tensors");
    let count = r.usize()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.fail("parameter name not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.fail(format!("shape of `{name}` overflows")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    r.finish()?;

    r.begin("rng");
    let seed = r.u64()?;
    let position = r.u64()?;
    r.finish()?;
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after the last section"));
    }
    Ok((meta, tensors, SplitMix64::at(seed, position)))
}

/// Overwrites `model`'s parameters by name. A stored tensor whose shape
/// differs from the model's is a shape error naming the parameter.
pub fn restore_params(model: &mut Model, tensors: NamedTensors) -> Result<()> {
    if tensors.len() != model.store.len() {
        return Err(Error::Integrity {
            section: "tensors",
            message: format!(
                "{} stored tensors for a model with {} parameters",
                tensors.len(),
                model.store.len()
            ),
        });
    }
    for (name, t) in tensors {
        let id = model.store.find(&name).ok_or_else(|| Error::Integrity {
            section: "tensors",
            message: format!("stored parameter `{name}` does not exist in the model"),
        })?;
        let p = model.store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::Shape {
                name,
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        p.value = t;
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (meta, tensors, rng) = decode_parts(bytes)?;
    let mut model = Model::new(meta.model, 0)?;
    restore_params(&mut model, tensors)?;
    Ok(Checkpoint {
        model,
        vocab: meta.vocab,
        run: meta.run,
        rng,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads only the parameters into an existing model, whose configuration
/// must match the stored one shape for shape.
pub fn load_params_into(path: &Path, model: &mut Model) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, tensors, _) = decode_parts(&bytes)?;
    restore_params(model, tensors)
}
