//! Binary checkpoint: `MET1`, u32 version, u32-length config echo, u32 tensor
//! count, then per tensor a u16-length name, u8 rank, u32 dims and f32 data.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::Adam;

pub const MAGIC: [u8; 4] = *b"MET1";
pub const VERSION: u32 = 1;

const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";
const STEP_KEY: &str = "optimizer.step";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A decoded checkpoint, fully validated for structure but not yet matched
/// against a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub echo: String,
    pub tensors: Vec<NamedTensor>,
}

fn echo_entries(echo: &str) -> Vec<(&str, &str)> {
    echo.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim(), v.trim())).collect()
}

impl Checkpoint {
    /// Snapshot of parameters and optimizer moments. `model_echo` is the
    /// model's canonical description; the optimizer step is appended.
    pub fn capture(model_echo: &str, store: &ParamStore<f32>, adam: &Adam<f32>) -> Self {
        let mut tensors = Vec::with_capacity(3 * store.len());
        for (name, t) in store.iter() {
            tensors.push(NamedTensor { name: name.to_string(), shape: t.shape.clone(), data: t.data.clone() });
        }
        for (prefix, moments) in [(MOMENT1, &adam.m), (MOMENT2, &adam.v)] {
            for ((name, t), m) in store.iter().zip(moments) {
                tensors.push(NamedTensor { name: format!("{prefix}{name}"), shape: t.shape.clone(), data: m.clone() });
            }
        }
        let mut echo = model_echo.to_string();
        if !echo.is_empty() && !echo.ends_with('\n') {
            echo.push('\n');
        }
        echo.push_str(&format!("{STEP_KEY} = {}\n", adam.t));
        Checkpoint { echo, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.echo.len() as u32).to_le_bytes());
        out.extend_from_slice(self.echo.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let echo =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Malformed("config echo is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Malformed(format!("tensor {name} has an overflowing shape {shape:?}")))?;
            let data = r.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { echo, tensors })
    }

    /// Compares every `model.*` entry of `expected_echo` with this file.
    pub fn check_config(&self, expected_echo: &str) -> Result<()> {
        let found = echo_entries(&self.echo);
        for (key, want) in echo_entries(expected_echo).into_iter().filter(|(k, _)| k.starts_with("model.")) {
            let got = found.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
            if got != Some(want) {
                return Err(Error::ConfigMismatch {
                    field: key.to_string(),
                    expected: want.to_string(),
                    found: got.unwrap_or("<absent>").to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn step(&self) -> Result<u64> {
        echo_entries(&self.echo)
            .into_iter()
            .find(|(k, _)| *k == STEP_KEY)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("config echo lacks a valid `{STEP_KEY}`")))
    }

    /// Builds a parameter store laid out like `template` and the optimizer
    /// state from this checkpoint. Nothing is returned unless every tensor
    /// is present with the right shape.
    pub fn restore(&self, expected_echo: &str, template: &ParamStore<f32>) -> Result<(ParamStore<f32>, Adam<f32>)> {
        self.check_config(expected_echo)?;
        let t = self.step()?;
        let find = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let nt = self
                .tensors
                .iter()
                .find(|x| x.name == name)
                .ok_or_else(|| Error::Malformed(format!("checkpoint lacks tensor {name}")))?;
            if nt.shape != shape {
                return Err(Error::ConfigMismatch {
                    field: name.to_string(),
                    expected: format!("{shape:?}"),
                    found: format!("{:?}", nt.shape),
                });
            }
            Ok(nt.data.clone())
        };
        let mut store = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, p) in template.iter() {
            store.add(name, Tensor::new(p.shape.clone(), find(name, &p.shape)?)?);
            m.push(find(&format!("{MOMENT1}{name}"), &p.shape)?);
            v.push(find(&format!("{MOMENT2}{name}"), &p.shape)?);
        }
        if self.tensors.len() != 3 * template.len() {
            return Err(Error::Malformed(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                3 * template.len()
            )));
        }
        Ok((store, Adam { m, v, t }))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::Truncated { offset: self.pos, needed: n - left });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Checkpoint::from_bytes(&bytes)
}
