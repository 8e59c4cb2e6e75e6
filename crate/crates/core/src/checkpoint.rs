//! Parameter checkpoints.
//!
//! ```text
//! 8 bytes   magic "VSCKPT01"
//! u32       length of the config header, then that many bytes of TOML
//! u32       block count
//! per block: u32 name length, name (UTF-8), u32 rank, rank x u32 dims,
//!            f32 values (row major)
//! ```
//!
//! All integers and floats are little endian.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VSCKPT01";

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let header = toml::to_string(&params.config).expect("config serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            location: format!("byte {}", self.pos),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated, needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, n: usize) -> Result<String> {
        let start = self.pos;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| {
            self.pos = start;
            self.fail("invalid UTF-8")
        })
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected VSCKPT01"));
    }
    let hl = r.u32()?;
    let header = r.text(hl)?;
    let config: ModelConfig = toml::from_str(&header).map_err(|e| r.fail(format!("config header: {}", e.message())))?;
    config.validate()?;
    let mut params = ModelParams::zeros(&config)?;
    let count = r.u32()?;
    if count != params.tensors.len() {
        return Err(r.fail(format!("{count} blocks but the config needs {}", params.tensors.len())));
    }
    for i in 0..count {
        let nl = r.u32()?;
        let name = r.text(nl)?;
        if name != params.names[i] {
            return Err(r.fail(format!("block {i} is `{name}`, expected `{}`", params.names[i])));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape != params.tensors[i].shape() {
            return Err(r.fail(format!(
                "`{name}` has shape {shape:?}, expected {:?}",
                params.tensors[i].shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.tensors[i] = Tensor::new(&shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and requires its model config to equal `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load(path)?;
    check_config(&params.config, expected)?;
    Ok(params)
}

/// Names the first field where the two configs differ.
pub fn check_config(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let a = toml::Table::try_from(found).expect("config serializes");
    let b = toml::Table::try_from(expected).expect("config serializes");
    for (k, v) in &b {
        if a.get(k) != Some(v) {
            let got = a.get(k).map_or("missing".to_string(), |x| x.to_string());
            return Err(Error::Config(format!(
                "checkpoint model.{k} = {got} but the config has {v}"
            )));
        }
    }
    Ok(())
}
