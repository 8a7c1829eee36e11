//! The `SPV1` volume format: 4-byte magic, dtype code (0 = f32, 1 = u8),
//! rank, little-endian u32 extents, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::SpvError;
use crate::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"SPV1";

/// A decoded volume of either supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum SpvVolume {
    F32(Tensor<f32>),
    U8(Tensor<u8>),
}

/// Element types storable in an SPV file.
pub trait SpvElement: crate::tensor::Element {
    const CODE: u8;
    fn put(v: &[Self], out: &mut Vec<u8>);
}

impl SpvElement for f32 {
    const CODE: u8 = 0;
    fn put(v: &[f32], out: &mut Vec<u8>) {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

impl SpvElement for u8 {
    const CODE: u8 = 1;
    fn put(v: &[u8], out: &mut Vec<u8>) {
        out.extend_from_slice(v);
    }
}

pub fn encode<T: SpvElement>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + t.byte_len());
    out.extend_from_slice(&MAGIC);
    out.push(T::CODE);
    out.push(t.ndim() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    T::put(t.data(), &mut out);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<SpvVolume, SpvError> {
    let truncated = |what, expected, found| SpvError::Truncated {
        path: path.to_path_buf(),
        what,
        expected,
        found,
    };
    if bytes.len() < 6 {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(SpvError::BadMagic {
                path: path.to_path_buf(),
                found: bytes[..4].try_into().expect("four bytes"),
            });
        }
        return Err(truncated("header", 6, bytes.len()));
    }
    if bytes[..4] != MAGIC {
        return Err(SpvError::BadMagic {
            path: path.to_path_buf(),
            found: bytes[..4].try_into().expect("four bytes"),
        });
    }
    let dtype = match bytes[4] {
        0 => DType::F32,
        1 => DType::U8,
        code => {
            return Err(SpvError::UnknownDtype {
                path: path.to_path_buf(),
                code,
            })
        }
    };
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated("extents", header, bytes.len()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("four bytes")) as usize)
        .collect();
    let payload = shape.iter().product::<usize>() * dtype.size();
    let body = &bytes[header..];
    if body.len() < payload {
        return Err(truncated("payload", payload, body.len()));
    }
    if body.len() > payload {
        return Err(SpvError::TrailingBytes {
            path: path.to_path_buf(),
            extra: body.len() - payload,
        });
    }
    Ok(match dtype {
        DType::F32 => SpvVolume::F32(
            Tensor::from_vec(
                &shape,
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                    .collect(),
            )
            .expect("length checked"),
        ),
        _ => SpvVolume::U8(Tensor::from_vec(&shape, body.to_vec()).expect("length checked")),
    })
}

pub fn write_volume<T: SpvElement>(path: &Path, t: &Tensor<T>) -> Result<(), SpvError> {
    fs::write(path, encode(t)).map_err(|source| SpvError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_volume(path: &Path) -> Result<SpvVolume, SpvError> {
    let bytes = fs::read(path).map_err(|source| SpvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

/// Reads an f32 intensity volume.
pub fn read_image(path: &Path) -> Result<Tensor<f32>, SpvError> {
    match read_volume(path)? {
        SpvVolume::F32(t) => Ok(t),
        SpvVolume::U8(_) => Err(SpvError::DtypeMismatch {
            path: path.to_path_buf(),
            expected: "f32",
            found: "u8",
        }),
    }
}

/// Reads a u8 label volume and checks every label is 0, 1 or 2.
pub fn read_labels(path: &Path) -> Result<Tensor<u8>, SpvError> {
    match read_volume(path)? {
        SpvVolume::U8(t) => {
            if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, &v)| v > 2) {
                return Err(SpvError::LabelRange {
                    path: path.to_path_buf(),
                    value,
                    index,
                });
            }
            Ok(t)
        }
        SpvVolume::F32(_) => Err(SpvError::DtypeMismatch {
            path: path.to_path_buf(),
            expected: "u8",
            found: "f32",
        }),
    }
}
