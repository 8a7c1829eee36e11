//! Synthetic liver/tumour volumes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split, VolumeRecord, LIVER, TUMOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intensities are rounded to this grid so that adding and removing a
/// grid-aligned offset is exact.
pub const INTENSITY_QUANTUM: f32 = 1.0 / 1024.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataConfig {
    pub background_std: f64,
    pub liver_offset: f32,
    pub tumor_offset: f32,
    /// Liver centre as a fraction of the extent.
    pub liver_center: (f64, f64),
    /// Liver semi-axes as a fraction of the extent.
    pub liver_radius: (f64, f64),
    pub tumor_count: (usize, usize),
    /// Tumour radius as a fraction of the extent.
    pub tumor_radius: (f64, f64),
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        SynthDataConfig {
            background_std: 0.1,
            liver_offset: 1.0,
            tumor_offset: 1.5,
            liver_center: (0.4, 0.6),
            liver_radius: (0.25, 0.35),
            tumor_count: (1, 3),
            tumor_radius: (0.08, 0.14),
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v / INTENSITY_QUANTUM).round() * INTENSITY_QUANTUM
}

/// One record drawn from `rng`: Gaussian background, an ellipsoidal liver,
/// and spherical tumours clipped to the liver.
pub fn generate_record(id: &str, extent: usize, cfg: &SynthDataConfig, rng: &mut impl Rng) -> VolumeRecord {
    let e = extent as f64;
    let noise = Normal::new(0.0, cfg.background_std).expect("valid std");
    let mut image = Tensor::from_fn(&[extent; 3], |_| noise.sample(rng) as f32);
    let mut labels = Tensor::<u8>::zeros(&[extent; 3]);
    let center: Vec<f64> = (0..3).map(|_| rng.random_range(cfg.liver_center.0..cfg.liver_center.1) * e).collect();
    let radius: Vec<f64> = (0..3).map(|_| rng.random_range(cfg.liver_radius.0..cfg.liver_radius.1) * e).collect();
    let mut liver = Vec::new();
    for i in 0..extent {
        for j in 0..extent {
            for k in 0..extent {
                let p = [i, j, k];
                let r2: f64 = (0..3)
                    .map(|a| ((p[a] as f64 + 0.5 - center[a]) / radius[a]).powi(2))
                    .sum();
                if r2 <= 1.0 {
                    labels.set(&p, LIVER);
                    liver.push(p);
                }
            }
        }
    }
    let n_tumors = rng.random_range(cfg.tumor_count.0..=cfg.tumor_count.1);
    for _ in 0..n_tumors {
        if liver.is_empty() {
            break;
        }
        let c = liver[rng.random_range(0..liver.len())];
        let r = rng.random_range(cfg.tumor_radius.0..cfg.tumor_radius.1) * e;
        for &p in &liver {
            let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a] as f64).powi(2)).sum();
            if d2 <= r * r {
                labels.set(&p, TUMOR);
            }
        }
    }
    for (v, &l) in image.data_mut().iter_mut().zip(labels.data()) {
        *v += match l {
            LIVER => cfg.liver_offset,
            TUMOR => cfg.tumor_offset,
            _ => 0.0,
        };
        *v = quantize(*v);
    }
    VolumeRecord {
        id: id.to_string(),
        image,
        labels,
    }
}

/// Writes `n` records of side `extent` into `dir`. The last `round(n / 4)`
/// records form the validation split.
pub fn generate_synthetic_dataset(dir: &Path, n: usize, extent: usize, seed: u64) -> Result<Dataset> {
    if extent < 2 || !extent.is_power_of_two() {
        return Err(Error::Config(format!("extent {extent} must be a power of two")));
    }
    let cfg = SynthDataConfig::default();
    let n_val = (n as f64 / 4.0).round() as usize;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let rec = generate_record(&format!("case{i:03}"), extent, &cfg, &mut rng);
        debug_assert!(rec.validate().is_ok());
        let split = if i + n_val >= n { Split::Val } else { Split::Train };
        records.push((rec, split));
    }
    Dataset::create(dir, &records)
}

/// Halves the resolution: intensities average each 2x2x2 cell, labels take
/// the most frequent class in the cell with ties going to the higher label.
pub fn downsample_record(rec: &VolumeRecord) -> Result<VolumeRecord> {
    let s = rec.image.shape();
    if s.iter().any(|e| e % 2 != 0) {
        return Err(Error::Config(format!("cannot halve odd extents {s:?}")));
    }
    let half = [s[0] / 2, s[1] / 2, s[2] / 2];
    let cell = |i: &[usize], d: usize| [2 * i[0] + (d >> 2), 2 * i[1] + ((d >> 1) & 1), 2 * i[2] + (d & 1)];
    let image = Tensor::from_fn(&half, |i| {
        let mut acc = 0.0f32;
        for d in 0..8 {
            acc += rec.image.get(&cell(i, d));
        }
        acc / 8.0
    });
    let labels = Tensor::from_fn(&half, |i| {
        let mut counts = [0u8; 3];
        for d in 0..8 {
            counts[rec.labels.get(&cell(i, d)) as usize] += 1;
        }
        let mut best = 0;
        for c in 1..3 {
            if counts[c] >= counts[best] {
                best = c;
            }
        }
        best as u8
    });
    VolumeRecord::new(rec.id.clone(), image, labels)
}
