//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic "DCATTSCK" | version u32 | kind (u32 len + utf8) | step u64
//! config (u32 len + utf8) | params | aux
//! ```
//!
//! `params` and `aux` are each `count u32` followed by `count` records of
//! `name (u32 len + utf8) | ndim u32 | dims u64… | data f64…`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

use super::config::ExperimentConfig;

pub const MAGIC: &[u8; 8] = b"DCATTSCK";
pub const FORMAT_VERSION: u32 = 1;

/// Which network a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleKind {
    Encoder,
    Synth,
}

impl ModuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Encoder => "encoder",
            ModuleKind::Synth => "synth",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(ModuleKind::Encoder),
            "synth" => Ok(ModuleKind::Synth),
            other => Err(Error::Checkpoint(format!("unknown module kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModuleKind,
    pub step: u64,
    /// Resolved configuration text of the producing run.
    pub config: String,
    pub params: ParamStore,
    /// Tensors that are not model parameters, such as the conditioning
    /// d-vectors a synthesizer was trained with.
    pub aux: ParamStore,
}

/// Auxiliary tensor holding one d-vector per task speaker.
pub const DVECTORS_KEY: &str = "conditioning.dvectors";

impl Checkpoint {
    pub fn new(kind: ModuleKind, step: u64, config: &ExperimentConfig, params: &ParamStore) -> Self {
        Self {
            kind,
            step,
            config: config.to_text(),
            params: params.clone(),
            aux: ParamStore::new(),
        }
    }

    pub fn with_dvectors(mut self, dvectors: &[Vec<f64>]) -> Result<Self> {
        let t = Tensor::from_rows(dvectors)?;
        self.aux = ParamStore::new();
        self.aux.add(DVECTORS_KEY, t);
        Ok(self)
    }

    pub fn dvectors(&self) -> Option<Vec<Vec<f64>>> {
        let t = self.aux.get(self.aux.find(DVECTORS_KEY)?);
        Some((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config)
    }

    /// Copies every tensor into `store`, failing on any name or shape mismatch.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        store.load_from(&self.params)
    }

    pub fn expect_kind(&self, kind: ModuleKind) -> Result<&Self> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {} checkpoint, found {}",
                kind.as_str(),
                self.kind.as_str()
            )));
        }
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, self.kind.as_str());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config);
        put_tensors(&mut out, &self.params);
        put_tensors(&mut out, &self.aux);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let kind = ModuleKind::parse(&r.string()?)?;
        let step = r.u64()?;
        let config = r.string()?;
        let params = r.tensors()?;
        let aux = r.tensors()?;
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            kind,
            step,
            config,
            params,
            aux,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        put_str(out, name);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<ParamStore> {
        let count = self.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = self.string()?;
            if store.find(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            let ndim = self.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= self.remaining() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` shape {shape:?} exceeds file")))?;
            let data = (0..numel).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            store.add(name, t);
        }
        Ok(store)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not utf-8".into()))
    }
}
