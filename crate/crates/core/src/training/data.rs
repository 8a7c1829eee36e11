//! Batch schedule and the background loader.
//!
//! Which records make up the batch of a step, and how they are augmented,
//! is a pure function of (seed, step). Restarting from a checkpoint
//! therefore replays exactly the batches an uninterrupted run would see.

use std::ops::Range;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_pipeline, SynthConfig};
use crate::error::{Error, Result};
use crate::io::VolumeRecord;
use crate::tensor::{Real, Tensor};

/// One step's input: images `(b, x, y, z, 1)` and labels `(b, x, y, z, 1)`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub step: usize,
    pub images: Tensor<T>,
    pub labels: Tensor<u8>,
    pub ids: Vec<String>,
}

/// On-the-fly augmentation applied to each sample with probability `prob`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub config: SynthConfig,
    pub prob: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Record indices of the batch at `step`: epochs are seeded permutations
/// of `0..n` consumed in order.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for slot in 0..batch {
        let pos = step * batch + slot;
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream_rng(seed, epoch as u64));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[pos % n]);
    }
    out
}

/// Stacks 3-D records into `(b, x, y, z, 1)` tensors.
pub fn stack_records<T: Real>(records: &[&VolumeRecord]) -> Result<(Tensor<T>, Tensor<u8>)> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let s = first.image.shape();
    let mut images = Vec::with_capacity(records.len() * first.image.len());
    let mut labels = Vec::with_capacity(records.len() * first.image.len());
    for r in records {
        if r.image.shape() != s {
            return Err(Error::ShapeMismatch {
                what: format!("record `{}` in batch", r.id),
                expected: s.to_vec(),
                got: r.image.shape().to_vec(),
            });
        }
        images.extend(r.image.data().iter().map(|&v| T::from_f64(v as f64)));
        labels.extend_from_slice(r.labels.data());
    }
    let shape = [records.len(), s[0], s[1], s[2], 1];
    Ok((Tensor::from_vec(&shape, images)?, Tensor::from_vec(&shape, labels)?))
}

/// Builds the batch of `step`.
pub fn make_batch<T: Real>(
    records: &[VolumeRecord],
    seed: u64,
    step: usize,
    batch: usize,
    augment: Option<&AugmentPlan>,
) -> Result<Batch<T>> {
    if records.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    let idx = batch_indices(seed, step, batch, records.len());
    let mut owned = Vec::with_capacity(batch);
    for (slot, &i) in idx.iter().enumerate() {
        let rec = &records[i];
        let aug = match augment {
            Some(plan) => {
                // Distinct stream per (step, slot), away from the epoch streams.
                let mut rng = stream_rng(seed, (1u64 << 40) + (step * batch + slot) as u64);
                if rng.random_bool(plan.prob.clamp(0.0, 1.0)) {
                    let cfg = SynthConfig {
                        seed: rng.random(),
                        ..plan.config.clone()
                    };
                    Some(augment_pipeline(rec, &cfg)?)
                } else {
                    None
                }
            }
            None => None,
        };
        owned.push(aug.unwrap_or_else(|| rec.clone()));
    }
    let refs: Vec<&VolumeRecord> = owned.iter().collect();
    let (images, labels) = stack_records(&refs)?;
    Ok(Batch {
        step,
        images,
        labels,
        ids: owned.into_iter().map(|r| r.id).collect(),
    })
}

/// Produces batches for a range of steps on a separate thread, in step
/// order, through a bounded queue.
pub struct Loader<T> {
    rx: Receiver<Result<Batch<T>>>,
    handle: Option<JoinHandle<()>>,
}

impl<T: Real> Loader<T> {
    pub fn spawn(
        records: Arc<Vec<VolumeRecord>>,
        seed: u64,
        steps: Range<usize>,
        batch: usize,
        augment: Option<AugmentPlan>,
        depth: usize,
    ) -> Self {
        let (tx, rx) = bounded(depth.max(1));
        let handle = std::thread::spawn(move || {
            for step in steps {
                let b = make_batch(&records, seed, step, batch, augment.as_ref());
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        Loader {
            rx,
            handle: Some(handle),
        }
    }
}

impl<T> Iterator for Loader<T> {
    type Item = Result<Batch<T>>;
    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl<T> Drop for Loader<T> {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        let (_, dead) = bounded(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_cover_every_record() {
        let n = 5;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(9, s, 1, n)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(batch_indices(9, 7, 3, n), batch_indices(9, 7, 3, n));
    }
}
