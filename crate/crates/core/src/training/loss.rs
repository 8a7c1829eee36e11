//! Soft Dice and cross-entropy losses with globally reduced sums.

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{DeviceMesh, Worker};
use crate::ops::kernels;
use crate::sharded::ShardedTensor;
use crate::tensor::{Real, Tensor};

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;
/// Probabilities are clamped from below before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 0.9, ce: 0.1 }
    }
}

impl LossWeights {
    pub fn new(dice: f64, ce: f64) -> Result<Self> {
        if !(dice >= 0.0 && ce >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {dice}, {ce}")));
        }
        Ok(LossWeights { dice, ce })
    }
}

/// Classes averaged in the Dice term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceClasses {
    /// Every class except background (class 0).
    #[default]
    Foreground,
    /// Only the last class.
    Tumor,
}

impl FromStr for DiceClasses {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground" => Ok(DiceClasses::Foreground),
            "tumor" => Ok(DiceClasses::Tumor),
            _ => Err(Error::Config(format!("dice classes `{s}`: expected foreground or tumor"))),
        }
    }
}

impl DiceClasses {
    pub fn classes(self, num_classes: usize) -> Vec<usize> {
        match self {
            DiceClasses::Foreground => (1..num_classes).collect(),
            DiceClasses::Tumor => vec![num_classes - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub dice_classes: DiceClasses,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

pub fn combined_loss(w: &LossWeights, dice: f64, ce: f64) -> f64 {
    w.dice * dice + w.ce * ce
}

/// Global sums per class: intersection, prediction mass, label count; then
/// the summed negative log-likelihood and the voxel count.
#[derive(Clone, Debug, PartialEq)]
pub struct LossStats {
    nc: usize,
    v: Vec<f64>,
}

impl LossStats {
    fn zeros(nc: usize) -> Self {
        LossStats {
            nc,
            v: vec![0.0; 3 * nc + 2],
        }
    }
    fn inter(&self, c: usize) -> f64 {
        self.v[c]
    }
    fn pred(&self, c: usize) -> f64 {
        self.v[self.nc + c]
    }
    fn gt(&self, c: usize) -> f64 {
        self.v[2 * self.nc + c]
    }
    fn nll(&self) -> f64 {
        self.v[3 * self.nc]
    }
    fn count(&self) -> f64 {
        self.v[3 * self.nc + 1]
    }

    pub fn dice_loss(&self, classes: &[usize]) -> f64 {
        let score: f64 = classes
            .iter()
            .map(|&c| (2.0 * self.inter(c) + DICE_EPS) / (self.pred(c) + self.gt(c) + DICE_EPS))
            .sum();
        1.0 - score / classes.len() as f64
    }

    pub fn cross_entropy(&self) -> f64 {
        self.nll() / self.count()
    }
}

fn check_labels<T: crate::tensor::Element>(probs: &Tensor<T>, labels: &Tensor<u8>) -> Result<usize> {
    let (ps, ls) = (probs.shape(), labels.shape());
    if ps.len() != 5 || ls.len() != 5 || ps[..4] != ls[..4] || ls[4] != 1 {
        return Err(Error::ShapeMismatch {
            what: "labels vs probabilities".into(),
            expected: ps.iter().take(4).copied().chain([1]).collect(),
            got: ls.to_vec(),
        });
    }
    let nc = ps[4];
    if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= nc) {
        return Err(Error::Config(format!("label {bad} out of range for {nc} classes")));
    }
    Ok(nc)
}

/// Local sums of one block. Each batch element is summed on its own and
/// the per-element sums are then added in batch order, which lines a
/// batch-split mesh reduction up with the single-device result.
pub fn local_stats<T: Real>(probs: &Tensor<T>, labels: &Tensor<u8>) -> Result<LossStats> {
    let nc = check_labels(probs, labels)?;
    let b = probs.shape()[0];
    let per = labels.len() / b.max(1);
    let mut total = LossStats::zeros(nc);
    let mut part = LossStats::zeros(nc);
    for n in 0..b {
        part.v.fill(0.0);
        for v in n * per..(n + 1) * per {
            let lab = labels.data()[v] as usize;
            let row = &probs.data()[v * nc..(v + 1) * nc];
            for (c, p) in row.iter().enumerate() {
                part.v[nc + c] += p.as_f64();
            }
            let pl = row[lab].as_f64();
            part.v[lab] += pl;
            part.v[2 * nc + lab] += 1.0;
            part.v[3 * nc] -= pl.max(PROB_FLOOR).ln();
            part.v[3 * nc + 1] += 1.0;
        }
        if n == 0 {
            total.v.copy_from_slice(&part.v);
        } else {
            for (t, p) in total.v.iter_mut().zip(&part.v) {
                *t += p;
            }
        }
    }
    Ok(total)
}

/// Gradient of the combined loss with respect to the logits, given
/// probabilities and global sums.
fn logit_grad<T: Real>(probs: &Tensor<T>, labels: &Tensor<u8>, stats: &LossStats, cfg: &LossConfig) -> Tensor<T> {
    let nc = stats.nc;
    let classes = cfg.dice_classes.classes(nc);
    let k = classes.len() as f64;
    let n = stats.count();
    let (wd, wc) = (cfg.weights.dice, cfg.weights.ce);
    let mut grad = Tensor::zeros(probs.shape());
    let mut p = vec![0.0f64; nc];
    let mut gp = vec![0.0f64; nc];
    for (v, (&lab, out)) in labels.data().iter().zip(grad.data_mut().chunks_mut(nc)).enumerate() {
        let lab = lab as usize;
        for c in 0..nc {
            p[c] = probs.data()[v * nc + c].as_f64();
        }
        gp.fill(0.0);
        for &c in &classes {
            let den = stats.pred(c) + stats.gt(c) + DICE_EPS;
            let g = if c == lab { 1.0 } else { 0.0 };
            gp[c] -= wd / k * (2.0 * g * den - (2.0 * stats.inter(c) + DICE_EPS)) / (den * den);
        }
        let inner: f64 = (0..nc).map(|c| p[c] * gp[c]).sum();
        let ce_active = p[lab] > PROB_FLOOR;
        for c in 0..nc {
            let mut gz = p[c] * (gp[c] - inner);
            if ce_active {
                gz += wc * (p[c] - if c == lab { 1.0 } else { 0.0 }) / n;
            }
            out[c] = T::from_f64(gz);
        }
    }
    grad
}

/// Worker-side loss: softmax, local sums, all-reduce over `axes`, and
/// optionally the gradient with respect to the local logits.
pub fn loss_local<T: Real>(
    w: &mut Worker,
    logits: &Tensor<T>,
    labels: &Tensor<u8>,
    cfg: &LossConfig,
    axes: &[usize],
    want_grad: bool,
) -> Result<(LossValue, Option<Tensor<T>>)> {
    let probs = kernels::softmax_channels(logits);
    let mut stats = local_stats(&probs, labels)?;
    w.all_reduce_sum(&mut stats.v, axes)?;
    let classes = cfg.dice_classes.classes(stats.nc);
    let dice = stats.dice_loss(&classes);
    let ce = stats.cross_entropy();
    let value = LossValue {
        total: combined_loss(&cfg.weights, dice, ce),
        dice,
        ce,
    };
    let grad = want_grad.then(|| logit_grad(&probs, labels, &stats, cfg));
    Ok((value, grad))
}

fn global_stats<T: Real>(mesh: &DeviceMesh, probs: &ShardedTensor<T>, labels: &ShardedTensor<u8>) -> Result<LossStats> {
    probs.layout().check_mesh(mesh)?;
    labels.layout().check_mesh(mesh)?;
    if probs.layout().layout() != labels.layout().layout() {
        return Err(Error::Layout("probabilities and labels use different layouts".into()));
    }
    let mut axes: Vec<usize> = probs.layout().bindings().iter().flatten().map(|b| b.axis).collect();
    axes.sort_unstable();
    let axes = Arc::new(axes);
    let inputs: Vec<_> = probs.blocks().iter().cloned().zip(labels.blocks().iter().cloned()).collect();
    let mut out = mesh.run(inputs, move |w, (p, l)| {
        let mut s = local_stats(&p, &l)?;
        w.all_reduce_sum(&mut s.v, &axes)?;
        Ok(s)
    })?;
    Ok(out.swap_remove(0))
}

/// `1 - mean_c (2 sum(p g) + eps) / (sum p + sum g + eps)` over the chosen
/// classes, with sums taken over the whole global tensor. `labels` holds
/// class indices with a trailing channel of 1.
pub fn soft_dice_loss<T: Real>(
    mesh: &DeviceMesh,
    probs: &ShardedTensor<T>,
    labels: &ShardedTensor<u8>,
    classes: DiceClasses,
) -> Result<f64> {
    let s = global_stats(mesh, probs, labels)?;
    Ok(s.dice_loss(&classes.classes(s.nc)))
}

/// Mean negative log-likelihood of the labelled class.
pub fn cross_entropy_loss<T: Real>(
    mesh: &DeviceMesh,
    probs: &ShardedTensor<T>,
    labels: &ShardedTensor<u8>,
) -> Result<f64> {
    Ok(global_stats(mesh, probs, labels)?.cross_entropy())
}
