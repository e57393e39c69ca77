//! Binary checkpoints.
//!
//! Layout, all integers little-endian: `b"QGAT"`, `u32` format version, `u64`
//! configuration hash, `u32` array count, then per array a `u32` name length,
//! the UTF-8 name, `u32` rows, `u32` cols and `rows·cols` `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{ModelError, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"QGAT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub arrays: Vec<(String, Mat)>,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, m) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != MAGIC {
            return Err(err("bad magic bytes"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {version}")));
        }
        let config_hash = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| err("truncated array name"))?;
            let name = String::from_utf8(name).map_err(|_| err("array name is not UTF-8"))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| err(format!("truncated data of {name}")))?;
                data.push(f64::from_le_bytes(b));
            }
            arrays.push((name, Mat::from_vec(rows, cols, data)));
        }
        if !r.is_empty() {
            return Err(err("trailing bytes after last array"));
        }
        Ok(Self { config_hash, arrays })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| err("truncated integer"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| err("truncated integer"))?;
    Ok(u64::from_le_bytes(b))
}

/// Model parameters, optimizer state and the number of completed epochs.
pub fn capture(model: &Model, adam: Option<&Adam>, epoch: usize) -> Checkpoint {
    let mut arrays: Vec<(String, Mat)> =
        model.store.iter().map(|(_, p)| (format!("param/{}", p.name), p.value.clone())).collect();
    arrays.push(("meta/epoch".into(), Mat::scalar(epoch as f64)));
    if let Some(adam) = adam {
        arrays.push(("meta/adam_step".into(), Mat::scalar(adam.step as f64)));
        for (id, p) in model.store.iter() {
            arrays.push((format!("adam/m/{}", p.name), adam.m[id.0].clone()));
            arrays.push((format!("adam/v/{}", p.name), adam.v[id.0].clone()));
        }
    }
    Checkpoint { config_hash: model.config.architecture_hash(), arrays }
}

/// Loads parameters into `model` (and optimizer state into `adam` when given);
/// returns the stored epoch.
pub fn restore(ckpt: &Checkpoint, model: &mut Model, adam: Option<&mut Adam>) -> Result<usize> {
    if ckpt.config_hash != model.config.architecture_hash() {
        return Err(err(format!(
            "configuration hash {:016x} does not match the model's {:016x}",
            ckpt.config_hash,
            model.config.architecture_hash()
        )));
    }
    let fetch = |name: &str, shape: (usize, usize)| -> Result<Mat> {
        let m = ckpt.get(name).ok_or_else(|| err(format!("missing array {name}")))?;
        if m.shape() != shape {
            return Err(err(format!("{name} has shape {:?}, expected {:?}", m.shape(), shape)));
        }
        Ok(m.clone())
    };
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        let p = model.store.param(id);
        let v = fetch(&format!("param/{}", p.name), p.value.shape())?;
        *model.store.get_mut(id) = v;
    }
    if let Some(adam) = adam {
        adam.step = fetch("meta/adam_step", (1, 1))?.item() as u64;
        for &id in &ids {
            let p = model.store.param(id);
            adam.m[id.0] = fetch(&format!("adam/m/{}", p.name), p.value.shape())?;
            adam.v[id.0] = fetch(&format!("adam/v/{}", p.name), p.value.shape())?;
        }
    }
    Ok(fetch("meta/epoch", (1, 1))?.item() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn tiny() -> Config {
        let mut c = Config::classical();
        c.encoder.d_x = 8;
        c.encoder.layers = 1;
        c.decoder.heads = 2;
        c
    }

    #[test]
    fn round_trip_and_header() {
        let model = Model::new(&tiny(), 1).unwrap();
        let adam = Adam::new(&model.store, 1e-3);
        let ck = capture(&model, Some(&adam), 4);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), tiny().architecture_hash());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut other = Model::new(&tiny(), 2).unwrap();
        let mut adam2 = Adam::new(&other.store, 1e-3);
        assert_eq!(restore(&back, &mut other, Some(&mut adam2)).unwrap(), 4);
        assert_eq!(other.store, model.store);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let model = Model::new(&tiny(), 1).unwrap();
        let bytes = capture(&model, None, 0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut wider = tiny();
        wider.encoder.d_x = 16;
        let mut other = Model::new(&wider, 1).unwrap();
        assert!(restore(&Checkpoint::from_bytes(&bytes).unwrap(), &mut other, None).is_err());
    }
}
