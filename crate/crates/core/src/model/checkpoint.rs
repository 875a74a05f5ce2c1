//! Binary checkpoint: magic "CRT1", version byte, JSON-serialized config,
//! named tensor records (little-endian f32, row-major), and an optional
//! trailing Adam block for both optimizers. Files are written to a temp
//! path and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CrtError, Result};
use crate::tensor::{AdamHyper, AdamState, TensorData};

use super::{ModelConfig, ParameterSet};

const MAGIC: &[u8; 4] = b"CRT1";
const VERSION: u8 = 1;

/// Everything a checkpoint holds.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterSet<f32>,
    pub adam: Option<(AdamState<f32>, AdamState<f32>)>,
}

fn put_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(CrtError::Data(format!("tensor name too long: {name}")));
    }
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    buf.reserve(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize and atomically write a checkpoint.
pub fn save(
    path: &Path,
    config: &ModelConfig,
    params: &ParameterSet<f32>,
    adam: Option<(&AdamState<f32>, &AdamState<f32>)>,
) -> Result<()> {
    params.validate_for(config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    let cfg_json = serde_json::to_vec(config)
        .map_err(|e| CrtError::Data(format!("cannot serialize model config: {e}")))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);

    buf.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for (name, t) in &params.entries {
        put_name(&mut buf, name)?;
        buf.push(t.shape.len() as u8);
        for &e in &t.shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        put_f32s(&mut buf, &t.data);
    }

    match adam {
        None => buf.push(0),
        Some((gen, disc)) => {
            buf.push(1);
            for state in [gen, disc] {
                buf.extend_from_slice(&state.t.to_le_bytes());
                for h in [state.hyper.beta1, state.hyper.beta2, state.hyper.eps] {
                    buf.extend_from_slice(&(h as f64).to_le_bytes());
                }
                let names: Vec<&String> = state.moment_names().collect();
                buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
                for name in names {
                    let (m, v) = state.moments_of(name).expect("name came from the state");
                    put_name(&mut buf, name)?;
                    buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
                    put_f32s(&mut buf, m);
                    put_f32s(&mut buf, v);
                }
            }
        }
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CrtError::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CrtError::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| CrtError::io(&tmp, e))?;
        f.flush().map_err(|e| CrtError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CrtError::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CrtError::Data(format!(
                "checkpoint {} truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CrtError::Data(format!("bad tensor name in {}", self.path.display())))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Read and validate a checkpoint.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| CrtError::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(CrtError::Data(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CrtError::Data(format!(
            "unsupported checkpoint version {version} in {}",
            path.display()
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| CrtError::Data(format!("bad config in {}: {e}", path.display())))?;

    let count = r.u32()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?;
        entries.insert(name, TensorData::new(shape, data));
    }
    let params = ParameterSet { entries };
    params.validate_for(&config)?;

    let adam = if r.u8()? == 1 {
        let mut states = Vec::with_capacity(2);
        for _ in 0..2 {
            let t = r.u64()?;
            let beta1 = r.f64()? as f32;
            let beta2 = r.f64()? as f32;
            let eps = r.f64()? as f32;
            let mut state = AdamState::new(AdamHyper { beta1, beta2, eps });
            state.t = t;
            let n = r.u32()? as usize;
            for _ in 0..n {
                let name = r.name()?;
                let len = r.u32()? as usize;
                let m = r.f32s(len)?;
                let v = r.f32s(len)?;
                state.insert_moments(name, m, v);
            }
            states.push(state);
        }
        let disc = states.pop().unwrap();
        let gen = states.pop().unwrap();
        Some((gen, disc))
    } else {
        None
    };
    Ok(Checkpoint { config, params, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::tensor::adam_step;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::toy();
        let params = init_params(&cfg, 5).unwrap();
        save(&path, &cfg, &params, None).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.params, params);
        assert!(back.adam.is_none());
        assert!(!path.with_extension("ckpt.tmp").exists());
    }

    #[test]
    fn round_trip_with_adam_states() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::toy();
        let mut params = init_params(&cfg, 5).unwrap();
        let mut adam_g = AdamState::default();
        let adam_d = AdamState::default();
        let grads: BTreeMap<String, Vec<f32>> = params
            .entries
            .iter()
            .filter(|(n, _)| n.starts_with("gen."))
            .map(|(n, t)| (n.clone(), vec![0.01; t.numel()]))
            .collect();
        adam_step(&mut params.entries, &grads, &mut adam_g, 1e-3).unwrap();
        save(&path, &cfg, &params, Some((&adam_g, &adam_d))).unwrap();
        let back = load(&path).unwrap();
        let (bg, bd) = back.adam.unwrap();
        assert_eq!(bg.t, 1);
        assert_eq!(bd.t, 0);
        let (m, _) = bg.moments_of("gen.head.weight").unwrap();
        let (m0, _) = adam_g.moments_of("gen.head.weight").unwrap();
        assert_eq!(m, m0);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());

        let good = dir.path().join("good.ckpt");
        let cfg = ModelConfig::toy();
        let params = init_params(&cfg, 1).unwrap();
        save(&good, &cfg, &params, None).unwrap();
        let bytes = fs::read(&good).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&path).is_err());
    }
}
