//! Tumour removal and synthesis on liver volumes.
//!
//! The mean intensity gap between tumour and healthy liver is measured,
//! existing tumours are erased by subtracting it, and new tumours are
//! painted by adding it back on random ellipsoids inside the liver with a
//! blurred boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{VolumeRecord, LIVER, TUMOR};
use crate::tensor::Tensor;

/// Ellipsoids keeping less than this fraction of their voxels after
/// clipping to the liver are redrawn.
pub const MIN_INSIDE_FRACTION: f64 = 0.5;
pub const MAX_TRIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Inclusive range of ellipsoids per record.
    pub n_tumors: (usize, usize),
    /// Range of each semi-axis, in voxels.
    pub radius: (f64, f64),
    pub blur_sigma: f64,
    /// When false, the soft weight is the binary mask itself.
    pub blur: bool,
    pub seed: u64,
    /// Used when a record has no tumour to measure.
    pub default_delta: f32,
    /// The pipeline rounds delta to a multiple of this (0 disables), which
    /// keeps add-then-subtract exact on grid-aligned intensities.
    pub delta_quantum: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tumors: (1, 3),
            radius: (1.5, 4.0),
            blur_sigma: 1.5,
            blur: true,
            seed: 0,
            default_delta: 0.5,
            delta_quantum: 1.0 / 1024.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tumors.0 < 1 || self.n_tumors.1 < self.n_tumors.0 {
            return Err(Error::Augment(format!("tumour count range {:?} is invalid", self.n_tumors)));
        }
        if !(self.radius.0 >= 1.0 && self.radius.1 >= self.radius.0) {
            return Err(Error::Augment(format!("radius range {:?} must satisfy 1 <= min <= max", self.radius)));
        }
        if self.blur && !(self.blur_sigma > 0.0) {
            return Err(Error::Augment("blur sigma must be positive (or disable blur)".into()));
        }
        Ok(())
    }
}

/// `mean(image | tumour) - mean(image | liver)`, each mean a plain f64 sum
/// divided by the count.
pub fn intensity_delta(rec: &VolumeRecord) -> Result<f64> {
    let (mut st, mut nt, mut sl, mut nl) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &l) in rec.image.data().iter().zip(rec.labels.data()) {
        match l {
            TUMOR => {
                st += v as f64;
                nt += 1;
            }
            LIVER => {
                sl += v as f64;
                nl += 1;
            }
            _ => {}
        }
    }
    if nt == 0 {
        return Err(Error::Augment(format!("record `{}` has no tumour voxels", rec.id)));
    }
    if nl == 0 {
        return Err(Error::Augment(format!("record `{}` has no healthy liver voxels", rec.id)));
    }
    Ok(st / nt as f64 - sl / nl as f64)
}

/// Subtracts `delta` on tumour voxels and relabels them as liver.
pub fn remove_tumor(rec: &VolumeRecord, delta: f32) -> VolumeRecord {
    let mut out = rec.clone();
    for (v, l) in out.image.data_mut().iter_mut().zip(out.labels.data_mut()) {
        if *l == TUMOR {
            *v -= delta;
            *l = LIVER;
        }
    }
    out
}

/// Result of [`synthesize_tumor`] with the masks that produced it.
#[derive(Clone, Debug)]
pub struct Synthesized {
    pub record: VolumeRecord,
    /// Binary union of the clipped ellipsoids.
    pub mask: Tensor<f32>,
    /// Soft weight actually applied.
    pub weight: Tensor<f32>,
    /// Ellipsoids abandoned after [`MAX_TRIES`] degenerate draws.
    pub skipped: usize,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with zeros outside the volume.
pub fn gaussian_blur(x: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let shape = x.shape().to_vec();
    let mut cur: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let n = shape[axis] as i64;
        for (flat, out) in next.iter_mut().enumerate() {
            let pos = ((flat / strides[axis]) % shape[axis]) as i64;
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                let q = pos + t as i64 - r;
                if (0..n).contains(&q) {
                    acc += w * cur[(flat as i64 + (q - pos) * strides[axis] as i64) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    Tensor::from_vec(&shape, cur.into_iter().map(|v| v as f32).collect()).expect("same shape")
}

/// Paints `delta` onto random ellipsoids inside the liver of a tumour-free
/// record. Voxels outside the liver are never touched.
pub fn synthesize_tumor(rec: &VolumeRecord, delta: f32, cfg: &SynthConfig) -> Result<Synthesized> {
    cfg.validate()?;
    let shape = rec.image.shape().to_vec();
    let liver: Vec<usize> = rec
        .labels
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == LIVER)
        .map(|(i, _)| i)
        .collect();
    if liver.is_empty() {
        return Err(Error::Augment(format!("record `{}` has no liver voxels", rec.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask = Tensor::<f32>::zeros(&shape);
    let n = rng.random_range(cfg.n_tumors.0..=cfg.n_tumors.1);
    let mut skipped = 0;
    let coord = |flat: usize| [flat / (shape[1] * shape[2]), (flat / shape[2]) % shape[1], flat % shape[2]];
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let c = coord(liver[rng.random_range(0..liver.len())]);
            let radii: Vec<f64> = (0..3).map(|_| rng.random_range(cfg.radius.0..=cfg.radius.1)).collect();
            let lo: Vec<usize> = (0..3).map(|a| (c[a] as f64 - radii[a]).ceil().max(0.0) as usize).collect();
            let hi: Vec<usize> = (0..3)
                .map(|a| ((c[a] as f64 + radii[a]).floor() as usize).min(shape[a] - 1))
                .collect();
            let mut inside = Vec::new();
            let mut total = 0usize;
            for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        let p = [i, j, k];
                        let r2: f64 = (0..3).map(|a| ((p[a] as f64 - c[a] as f64) / radii[a]).powi(2)).sum();
                        if r2 <= 1.0 {
                            total += 1;
                            if rec.labels.get(&p) == LIVER {
                                inside.push(p);
                            }
                        }
                    }
                }
            }
            if total > 0 && inside.len() as f64 >= MIN_INSIDE_FRACTION * total as f64 {
                for p in inside {
                    mask.set(&p, 1.0);
                }
                placed = true;
                break;
            }
        }
        if !placed {
            skipped += 1;
            log::warn!(
                "record `{}`: ellipsoid stayed mostly outside the liver after {MAX_TRIES} draws; skipped",
                rec.id
            );
        }
    }
    let mut weight = if cfg.blur {
        gaussian_blur(&mask, cfg.blur_sigma)
    } else {
        mask.clone()
    };
    for (w, &l) in weight.data_mut().iter_mut().zip(rec.labels.data()) {
        *w = if l == LIVER { w.clamp(0.0, 1.0) } else { 0.0 };
    }
    let mut out = rec.clone();
    for ((v, l), &w) in out
        .image
        .data_mut()
        .iter_mut()
        .zip(out.labels.data_mut())
        .zip(weight.data())
    {
        if w > 0.0 {
            *v += delta * w;
            if w >= 0.5 {
                *l = TUMOR;
            }
        }
    }
    Ok(Synthesized {
        record: out,
        mask,
        weight,
        skipped,
    })
}

/// Rounds `delta` to the configured quantum.
pub fn snap_delta(delta: f64, quantum: f32) -> f32 {
    if quantum > 0.0 {
        ((delta / quantum as f64).round() * quantum as f64) as f32
    } else {
        delta as f32
    }
}

/// Measure, remove, re-synthesize. Records without tumour use the
/// configured default delta.
pub fn augment_pipeline(rec: &VolumeRecord, cfg: &SynthConfig) -> Result<VolumeRecord> {
    let delta = match intensity_delta(rec) {
        Ok(d) => d,
        Err(_) => cfg.default_delta as f64,
    };
    let delta = snap_delta(delta, cfg.delta_quantum);
    let clean = remove_tumor(rec, delta);
    Ok(synthesize_tumor(&clean, delta, cfg)?.record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_record() -> VolumeRecord {
        let labels = Tensor::from_fn(&[6, 6, 6], |i| match (i[0], i[1]) {
            (0, _) => 0,
            (1..=2, 0..=2) => TUMOR,
            _ => LIVER,
        });
        let image = Tensor::from_fn(&[6, 6, 6], |i| match labels.get(i) {
            TUMOR => 30.0,
            LIVER => 10.0,
            _ => -5.0,
        });
        VolumeRecord::new("c", image, labels).unwrap()
    }

    #[test]
    fn constant_delta_and_removal() {
        let rec = constant_record();
        assert_eq!(intensity_delta(&rec).unwrap(), 20.0);
        let clean = remove_tumor(&rec, 20.0);
        assert_eq!(clean.count(TUMOR), 0);
        assert!(clean
            .image
            .data()
            .iter()
            .zip(clean.labels.data())
            .all(|(&v, &l)| if l == LIVER { v == 10.0 } else { v == -5.0 }));
        let same = remove_tumor(&rec, 0.0);
        assert_eq!(same.image, rec.image);
    }

    #[test]
    fn tumour_free_record_has_no_delta() {
        let rec = remove_tumor(&constant_record(), 20.0);
        assert!(intensity_delta(&rec).is_err());
    }

    #[test]
    fn no_blur_paints_mask_exactly() {
        let rec = remove_tumor(&constant_record(), 20.0);
        let cfg = SynthConfig {
            blur: false,
            radius: (1.0, 2.0),
            seed: 4,
            ..SynthConfig::default()
        };
        let s = synthesize_tumor(&rec, 2.5, &cfg).unwrap();
        for i in 0..rec.image.len() {
            let diff = s.record.image.data()[i] - rec.image.data()[i];
            assert_eq!(diff, 2.5 * s.mask.data()[i]);
            assert_eq!(s.record.labels.data()[i] == TUMOR, s.mask.data()[i] == 1.0);
        }
        assert!(s.mask.data().iter().any(|&m| m == 1.0));
    }

    #[test]
    fn no_liver_is_an_error() {
        let rec = VolumeRecord::new("e", Tensor::zeros(&[4, 4, 4]), Tensor::zeros(&[4, 4, 4])).unwrap();
        assert!(synthesize_tumor(&rec, 1.0, &SynthConfig::default()).is_err());
        assert!(augment_pipeline(&rec, &SynthConfig::default()).is_err());
    }

    #[test]
    fn blur_preserves_mass_away_from_edges() {
        let mut t = Tensor::<f32>::zeros(&[15, 15, 15]);
        t.set(&[7, 7, 7], 1.0);
        let b = gaussian_blur(&t, 1.5);
        let s: f32 = b.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert_eq!(b.get(&[7, 7, 6]), b.get(&[6, 7, 7]));
    }
}
