//! Checkpoints: a directory holding one little-endian blob per tensor and
//! a TOML manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};
use crate::unet::ParamStore;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    step: usize,
    seed: u64,
    dtype: DType,
    params: Vec<Entry>,
    optimizer: Vec<Entry>,
}

/// Contents of a checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub step: usize,
    pub seed: u64,
    pub params: ParamStore<T>,
    pub optimizer: Vec<(String, Tensor<T>)>,
}

fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.byte_len());
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    out
}

fn decode<T: Real>(bytes: &[u8], shape: &[usize], path: &Path) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let n: usize = shape.iter().product();
    if bytes.len() != n * size {
        return Err(Error::Config(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            n * size,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(size)
        .map(|c| match T::DTYPE {
            DType::F32 => T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
            _ => T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        })
        .collect();
    Tensor::from_vec(shape, data)
}

fn file_name(name: &str) -> String {
    format!("{}.bin", name.replace('/', "__"))
}

fn write_entries<T: Real>(dir: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<Entry>> {
    let mut out = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let file = file_name(name);
        let path = dir.join(&file);
        fs::write(&path, encode(t)).map_err(|e| Error::io(&path, e))?;
        out.push(Entry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    Ok(out)
}

/// Writes `dir/step_<step>/`, returning its path.
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    step: usize,
    seed: u64,
    params: &ParamStore<T>,
    optimizer: &[(String, Tensor<T>)],
) -> Result<PathBuf> {
    let out = dir.join(format!("step_{step:06}"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let named = params.named_tensors();
    let p = write_entries(&out, &named)?;
    let o: Vec<(String, &Tensor<T>)> = optimizer.iter().map(|(n, t)| (n.clone(), t)).collect();
    let o = write_entries(&out, &o)?;
    let manifest = Manifest {
        step,
        seed,
        dtype: T::DTYPE,
        params: p,
        optimizer: o,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = out.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

/// Loads a checkpoint directory written by [`save_checkpoint`]; `like`
/// fixes the expected layer ids and shapes.
pub fn load_checkpoint<T: Real>(dir: &Path, like: &ParamStore<T>) -> Result<Checkpoint<T>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if m.dtype != T::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, run uses {}",
            m.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let read = |e: &Entry| -> Result<Tensor<T>> {
        let p = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
        decode(&bytes, &e.shape, &p)
    };
    let expected = like.named_tensors();
    if expected.len() != m.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameter tensors, model has {}",
            m.params.len(),
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(like.param_count());
    for ((name, t), e) in expected.iter().zip(&m.params) {
        if *name != e.name || t.shape() != e.shape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint tensor `{}` {:?} does not match model `{name}` {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        flat.extend_from_slice(read(e)?.data());
    }
    let mut params = like.clone();
    params.assign_flat(&flat)?;
    let optimizer = m
        .optimizer
        .iter()
        .map(|e| Ok((e.name.clone(), read(e)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        step: m.step,
        seed: m.seed,
        params,
        optimizer,
    })
}

/// Latest `step_*` directory under `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(step) = name.strip_prefix("step_").and_then(|s| s.parse::<usize>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
