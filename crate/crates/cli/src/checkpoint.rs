//! Binary checkpoint container.
//!
//! ```text
//! "MBRT" | u32 version | [u8; 32] config digest
//! { u16 name_len | name | u8 dtype | u8 rank | u64 dims[rank] | data }*
//! [u8; 8] checksum
//! ```
//! All integers and floats are little-endian. The checksum is the first eight
//! bytes of the SHA-256 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use membart_core::model::Model;
use membart_core::tensor::{DType, ParamStore, Scalar, Tensor};
use membart_core::train::{AdamW, AdamWConfig, TrainerState};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"MBRT";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 8;

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<F: Scalar>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        let mut data = Vec::with_capacity(t.len() * F::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut data);
        }
        Entry {
            name: name.into(),
            dtype: F::DTYPE,
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// A counter stored bit-for-bit in a rank-0 f64 entry.
    pub fn from_u64(name: impl Into<String>, v: u64) -> Self {
        Entry::from_tensor(name, &Tensor::scalar(f64::from_bits(v)))
    }

    pub fn to_tensor<F: Scalar>(&self) -> Result<Tensor<F>> {
        if self.dtype != F::DTYPE {
            return Err(CliError::Usage(format!(
                "entry {} holds {} data, expected {}",
                self.name,
                self.dtype,
                F::DTYPE
            )));
        }
        let data = self.data.chunks_exact(F::DTYPE.size()).map(F::read_le).collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| CliError::Runtime(format!("entry {}: {e}", self.name)))
    }

    pub fn to_u64(&self) -> Result<u64> {
        let t = self.to_tensor::<f64>()?;
        if t.rank() != 0 {
            return Err(CliError::Runtime(format!("entry {} is not a scalar", self.name)));
        }
        Ok(t.item().to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub entries: Vec<Entry>,
}

/// Cursor that reports the byte offset of a short read.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::Runtime(format!(
                "checkpoint truncated at offset {} while reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn checksum(bytes: &[u8]) -> [u8; CHECKSUM_LEN] {
    Sha256::digest(bytes)[..CHECKSUM_LEN].try_into().unwrap()
}

impl Checkpoint {
    pub fn new(digest: [u8; 32]) -> Self {
        Checkpoint {
            digest,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| CliError::Runtime(format!("checkpoint has no entry {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.data);
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CliError::Usage("not a checkpoint: bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CliError::Usage(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
        if bytes.len() < r.pos + CHECKSUM_LEN {
            r.take(CHECKSUM_LEN, "checksum")?;
        }
        let body_end = bytes.len() - CHECKSUM_LEN;
        if checksum(&bytes[..body_end]) != bytes[body_end..] {
            return Err(CliError::Runtime("checkpoint failed its integrity check".into()));
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: r.pos,
        };
        let mut entries = Vec::new();
        while r.pos < body_end {
            let len = r.u16("entry name length")? as usize;
            let name = String::from_utf8(r.take(len, "entry name")?.to_vec())
                .map_err(|_| CliError::Runtime(format!("entry name at offset {} is not UTF-8", r.pos - len)))?;
            let tag = r.u8("dtype tag")?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| CliError::Runtime(format!("entry {name}: unknown dtype tag {tag}")))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CliError::Runtime(format!("entry {name}: shape {shape:?} overflows")))?;
            let data = r.take(n, &format!("data of {name}"))?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                shape,
                data,
            });
        }
        Ok(Checkpoint { digest, entries })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
        })
    }

    pub fn check_digest(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.digest != expected {
            return Err(CliError::Usage(format!(
                "checkpoint was written for a different model config\n  checkpoint digest {}\n  config digest     {}",
                hex(&self.digest),
                hex(expected)
            )));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model and continue training.
#[derive(Debug, Clone)]
pub struct Snapshot<F: Scalar> {
    pub params: ParamStore<F>,
    pub optimizer: Option<AdamW<F>>,
    pub state: Option<TrainerState<F>>,
    pub seed: u64,
}

const PARAM: &str = "param.";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl<F: Scalar> Snapshot<F> {
    pub fn to_checkpoint(&self, digest: [u8; 32]) -> Checkpoint {
        let mut ck = Checkpoint::new(digest);
        for (_, name, t) in self.params.iter() {
            ck.push(Entry::from_tensor(format!("{PARAM}{name}"), t));
        }
        if let Some(opt) = &self.optimizer {
            for ((_, name, _), (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                ck.push(Entry::from_tensor(format!("{ADAM_M}{name}"), m));
                ck.push(Entry::from_tensor(format!("{ADAM_V}{name}"), v));
            }
            ck.push(Entry::from_u64("adam.t", opt.t));
        }
        if let Some(s) = &self.state {
            ck.push(Entry::from_tensor("memory", &s.memory));
            ck.push(Entry::from_u64("state.step", s.step));
            ck.push(Entry::from_u64("state.batches", s.batches_consumed));
            ck.push(Entry::from_u64("state.nan_streak", s.nan_streak as u64));
            ck.push(Entry::from_u64("state.skipped", s.skipped));
        }
        ck.push(Entry::from_u64("rng.seed", self.seed));
        ck
    }

    /// Restores into a freshly built `model`, whose parameter names and
    /// shapes must all be present.
    pub fn from_checkpoint(ck: &Checkpoint, model: &Model<F>, adam: AdamWConfig) -> Result<Self> {
        let mut params = model.params.clone();
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            let name = params.name(id).to_string();
            let t = ck.require(&format!("{PARAM}{name}"))?.to_tensor::<F>()?;
            if t.shape() != params.get(id).shape() {
                return Err(CliError::Usage(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    params.get(id).shape()
                )));
            }
            *params.get_mut(id) = t;
        }
        let expected = ids.len() + ck.entries.iter().filter(|e| !e.name.starts_with(PARAM)).count();
        if ck.entries.len() != expected {
            return Err(CliError::Usage("checkpoint holds parameters the model does not have".into()));
        }
        let optimizer = match ck.get("adam.t") {
            None => None,
            Some(t) => {
                let mut opt = AdamW::new(&params, adam);
                for (i, &id) in ids.iter().enumerate() {
                    let name = params.name(id);
                    opt.m[i] = ck.require(&format!("{ADAM_M}{name}"))?.to_tensor()?;
                    opt.v[i] = ck.require(&format!("{ADAM_V}{name}"))?.to_tensor()?;
                }
                opt.t = t.to_u64()?;
                Some(opt)
            }
        };
        let state = match ck.get("memory") {
            None => None,
            Some(m) => Some(TrainerState {
                step: ck.require("state.step")?.to_u64()?,
                batches_consumed: ck.require("state.batches")?.to_u64()?,
                memory: m.to_tensor()?,
                nan_streak: ck.require("state.nan_streak")?.to_u64()? as u32,
                skipped: ck.require("state.skipped")?.to_u64()?,
            }),
        };
        Ok(Snapshot {
            params,
            optimizer,
            state,
            seed: ck.require("rng.seed")?.to_u64()?,
        })
    }
}
