//! Versioned binary checkpoint: config echo, every named parameter array
//! (name, shape, little-endian f64 data), every theta with its category
//! and parameter name, batch-norm running stats, and the iteration
//! counter. Round trips are byte-exact.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ReidModel};
use crate::reg::{AdaptiveRegularizer, Category, RegFactor, RegMode, Regularizer};
use crate::tape::ParamId;
use crate::tensor::Tensor;
use crate::Real;

const MAGIC: &[u8; 8] = b"AREGCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ThetaRecord {
    pub param_name: String,
    pub category: Category,
    pub theta: f64,
    pub amplitude: f64,
    pub half_width: f64,
}

#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub version: u32,
    pub config_text: String,
    pub num_classes: usize,
    pub iteration: u64,
    pub params: Vec<(String, Tensor<Real>)>,
    pub thetas: Vec<ThetaRecord>,
    pub state: Vec<(String, Vec<Real>)>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &ReidModel, reg: &Regularizer, iteration: u64, config_text: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut buf, config_text);
    buf.extend_from_slice(&(model.cfg.num_classes as u64).to_le_bytes());
    buf.extend_from_slice(&iteration.to_le_bytes());

    let params = model.param_values();
    let names: Vec<&str> = model.inventory().iter().map(|i| i.name.as_str()).collect();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (pid, tensor) in &params {
        put_str(&mut buf, names[pid.0]);
        buf.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut buf, tensor.data());
    }

    let factors: &[RegFactor<f64>] = reg.factors().map(|r| r.factors.as_slice()).unwrap_or(&[]);
    buf.extend_from_slice(&(factors.len() as u64).to_le_bytes());
    for f in factors {
        put_str(&mut buf, &f.param_name);
        put_str(&mut buf, f.category.as_str());
        buf.extend_from_slice(&f.theta_value().to_le_bytes());
        buf.extend_from_slice(&f.amplitude.to_le_bytes());
        buf.extend_from_slice(&f.half_width.to_le_bytes());
    }

    let mut state: Vec<(String, Vec<f64>)> = Vec::new();
    model.for_each_state(|name, vals| state.push((name, vals.to_vec())));
    buf.extend_from_slice(&(state.len() as u64).to_le_bytes());
    for (name, vals) in &state {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(vals.len() as u64).to_le_bytes());
        put_f64s(&mut buf, vals);
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.origin,
                format!(
                    "truncated checkpoint: need {} bytes at offset {}, have {}",
                    n,
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(self.origin, "invalid utf-8 in checkpoint string"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<LoadedCheckpoint> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        origin,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::format(origin, "not a checkpoint file (bad magic)"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported checkpoint version {}", version),
        ));
    }
    let config_text = cur.str()?;
    let num_classes = cur.u64()? as usize;
    let iteration = cur.u64()?;
    let n_params = cur.u64()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = cur.str()?;
        let rank = cur.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = cur.f64s(len)?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::format(origin, format!("parameter {}: {}", name, e)))?;
        params.push((name, tensor));
    }
    let n_thetas = cur.u64()? as usize;
    let mut thetas = Vec::with_capacity(n_thetas);
    for _ in 0..n_thetas {
        let param_name = cur.str()?;
        let category = Category::parse(&cur.str()?)
            .map_err(|e| Error::format(origin, format!("theta for {}: {}", param_name, e)))?;
        let theta = cur.f64()?;
        let amplitude = cur.f64()?;
        let half_width = cur.f64()?;
        thetas.push(ThetaRecord {
            param_name,
            category,
            theta,
            amplitude,
            half_width,
        });
    }
    let n_state = cur.u64()? as usize;
    let mut state = Vec::with_capacity(n_state);
    for _ in 0..n_state {
        let name = cur.str()?;
        let len = cur.u64()? as usize;
        state.push((name, cur.f64s(len)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            origin,
            format!("{} trailing bytes after checkpoint payload", bytes.len() - cur.pos),
        ));
    }
    Ok(LoadedCheckpoint {
        version,
        config_text,
        num_classes,
        iteration,
        params,
        thetas,
        state,
    })
}

pub fn save(path: &Path, model: &ReidModel, reg: &Regularizer, iteration: u64, config_text: &str) -> Result<()> {
    std::fs::write(path, encode(model, reg, iteration, config_text)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Rebuilds the model and regularizer from a loaded checkpoint. Every
/// parameter and state entry must match the topology implied by the
/// embedded config; missing or extra fields are rejected.
pub fn restore(loaded: &LoadedCheckpoint, origin: &Path) -> Result<(RunConfig, ReidModel, Regularizer)> {
    let cfg = RunConfig::parse(&loaded.config_text)
        .map_err(|e| Error::format(origin, format!("embedded config: {}", e)))?;
    let model_cfg = ModelConfig {
        num_classes: loaded.num_classes,
        input_h: cfg.data.height,
        input_w: cfg.data.width,
        ..cfg.model_config()
    };
    let mut model = ReidModel::build(model_cfg, None)?;

    let expected = model.inventory().len();
    if loaded.params.len() != expected {
        return Err(Error::format(
            origin,
            format!("checkpoint has {} parameters, topology needs {}", loaded.params.len(), expected),
        ));
    }
    let names: Vec<String> = model.inventory().iter().map(|i| i.name.clone()).collect();
    let mut filled = 0usize;
    model.for_each_param_mut(|id, value| {
        let (name, tensor) = &loaded.params[id.0];
        if *name == names[id.0] && tensor.shape() == value.shape() {
            *value = tensor.clone();
            filled += 1;
        }
    });
    if filled != expected {
        return Err(Error::format(
            origin,
            "checkpoint parameters do not match the model topology (name or shape mismatch)",
        ));
    }

    let mut state_map: std::collections::HashMap<&str, &Vec<f64>> = loaded
        .state
        .iter()
        .map(|(n, v)| (n.as_str(), v))
        .collect();
    let mut state_err: Option<String> = None;
    model.for_each_state_mut(|name, vals| {
        match state_map.remove(name.as_str()) {
            Some(v) if v.len() == vals.len() => *vals = v.clone(),
            Some(_) => state_err = Some(format!("state {} has wrong length", name)),
            None => state_err = Some(format!("state {} missing from checkpoint", name)),
        }
    });
    if let Some(err) = state_err {
        return Err(Error::format(origin, err));
    }
    if !state_map.is_empty() {
        let extra: Vec<&str> = state_map.keys().copied().collect();
        return Err(Error::format(
            origin,
            format!("unknown state entries in checkpoint: {:?}", extra),
        ));
    }

    let reg = match cfg.reg.mode {
        RegMode::Adaptive | RegMode::Unconstrained => {
            let infos = model.inventory();
            let categorized: Vec<&crate::layers::ParamInfo> =
                infos.iter().filter(|i| i.category.is_some()).collect();
            if loaded.thetas.len() != categorized.len() {
                return Err(Error::format(
                    origin,
                    format!(
                        "checkpoint has {} thetas, topology needs {}",
                        loaded.thetas.len(),
                        categorized.len()
                    ),
                ));
            }
            let mut factors = Vec::with_capacity(loaded.thetas.len());
            let mut next = infos.len();
            for (rec, info) in loaded.thetas.iter().zip(&categorized) {
                if rec.param_name != info.name || Some(rec.category) != info.category {
                    return Err(Error::format(
                        origin,
                        format!("theta record {} does not match parameter {}", rec.param_name, info.name),
                    ));
                }
                factors.push(RegFactor {
                    theta_id: ParamId(next),
                    theta: Tensor::scalar(rec.theta),
                    amplitude: rec.amplitude,
                    half_width: rec.half_width,
                    category: rec.category,
                    param_id: info.id,
                    param_name: info.name.clone(),
                });
                next += 1;
            }
            let ar = AdaptiveRegularizer { factors };
            if cfg.reg.mode == RegMode::Adaptive {
                Regularizer::Adaptive(ar)
            } else {
                Regularizer::Unconstrained(ar)
            }
        }
        RegMode::Constant => Regularizer::Constant {
            lambda: cfg.reg.constant_lambda,
        },
        RegMode::Off => Regularizer::Off,
    };
    Ok((cfg, model, reg))
}
