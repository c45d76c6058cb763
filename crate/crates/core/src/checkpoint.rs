//! Versioned binary checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic "SMCACKPT" | version u32
//! config: u64 length + UTF-8 TOML
//! epoch u64 | step u64 | best_ap50 f64
//! params: u64 count, then per parameter
//!     u32 name length + name | u32 rank + u64 dims | f64 values
//! optimizer: u8 present; if 1: u64 step, f64 lr_scale, then m and v
//!     values of every parameter in order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tensor::ParamStore;

const MAGIC: &[u8; 8] = b"SMCACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedOptimizer {
    pub step: u64,
    pub lr_scale: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    /// Number of completed epochs.
    pub epoch: u64,
    pub step: u64,
    pub best_ap50: f64,
    pub params: Vec<SavedParam>,
    pub optimizer: Option<SavedOptimizer>,
}

impl Checkpoint {
    pub fn capture(
        cfg: &RunConfig,
        epoch: u64,
        step: u64,
        best_ap50: f64,
        store: &ParamStore,
        opt: Option<&AdamW>,
    ) -> Self {
        Self {
            config: cfg.to_toml(),
            epoch,
            step,
            best_ap50,
            params: store
                .iter()
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.values().to_vec(),
                })
                .collect(),
            optimizer: opt.map(|o| SavedOptimizer {
                step: o.step,
                lr_scale: o.lr_scale,
                m: o.m.clone(),
                v: o.v.clone(),
            }),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config)
    }

    /// Copies saved values into `store`, which must hold the same
    /// parameters in the same order and shapes.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::format(
                "checkpoint",
                format!("holds {} parameters, model has {}", self.params.len(), store.len()),
            ));
        }
        for (saved, p) in self.params.iter().zip(store.iter_mut()) {
            if saved.name != p.name || saved.shape != p.tensor.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "parameter {} {:?} does not match model parameter {} {:?}",
                        saved.name,
                        saved.shape,
                        p.name,
                        p.tensor.shape()
                    ),
                ));
            }
            p.tensor.values_mut().copy_from_slice(&saved.values);
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        let saved = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::format("checkpoint", "no optimizer state"))?;
        let fits =
            |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !fits(&saved.m, &opt.m) || !fits(&saved.v, &opt.v) {
            return Err(Error::format("checkpoint", "optimizer state does not match the model"));
        }
        opt.step = saved.step;
        opt.lr_scale = saved.lr_scale;
        opt.m = saved.m.clone();
        opt.v = saved.v.clone();
        Ok(())
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.config.as_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.best_ap50.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_reals(&mut w, &p.values)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(o) => {
                w.write_all(&[1])?;
                w.write_all(&o.step.to_le_bytes())?;
                w.write_all(&o.lr_scale.to_le_bytes())?;
                for m in &o.m {
                    write_reals(&mut w, m)?;
                }
                for v in &o.v {
                    write_reals(&mut w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let config =
            String::from_utf8(read_bytes(&mut r)?).map_err(|_| Error::format("checkpoint", "config is not UTF-8"))?;
        let epoch = read_u64(&mut r)?;
        let step = read_u64(&mut r)?;
        let best_ap50 = f64::from_le_bytes(read_array(&mut r)?);
        let count = read_u64(&mut r)? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name =
                String::from_utf8(name).map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
            let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let values = read_reals(&mut r, shape.iter().product())?;
            params.push(SavedParam { name, shape, values });
        }
        let [flag] = read_array::<1>(&mut r)?;
        let optimizer = match flag {
            0 => None,
            1 => {
                let step = read_u64(&mut r)?;
                let lr_scale = f64::from_le_bytes(read_array(&mut r)?);
                let sizes: Vec<usize> = params.iter().map(|p| p.values.len()).collect();
                let m = sizes.iter().map(|&n| read_reals(&mut r, n)).collect::<Result<_>>()?;
                let v = sizes.iter().map(|&n| read_reals(&mut r, n)).collect::<Result<_>>()?;
                Some(SavedOptimizer { step, lr_scale, m, v })
            }
            other => return Err(Error::format("checkpoint", format!("bad optimizer flag {other}"))),
        };
        Ok(Self {
            config,
            epoch,
            step,
            best_ap50,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        // Write then rename so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, buf)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::format("checkpoint", "truncated file")
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u64).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn write_reals(w: &mut impl Write, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u64(r)? as usize;
    let mut b = Vec::new();
    r.take(len as u64).read_to_end(&mut b)?;
    if b.len() != len {
        return Err(Error::format("checkpoint", "truncated file"));
    }
    Ok(b)
}

fn read_reals(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut b = Vec::new();
    r.take(n as u64 * 8).read_to_end(&mut b)?;
    if b.len() != n * 8 {
        return Err(Error::format("checkpoint", "truncated file"));
    }
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
