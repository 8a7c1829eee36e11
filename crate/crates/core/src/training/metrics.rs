//! Hard-label segmentation metrics.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Class of highest score per voxel; ties go to the lower class.
pub fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<u8> {
    let s = logits.shape();
    let nc = s[s.len() - 1];
    let mut shape = s.to_vec();
    *shape.last_mut().expect("non-empty shape") = 1;
    let data = logits
        .data()
        .chunks(nc)
        .map(|row| {
            let mut best = 0;
            for c in 1..nc {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Tensor::from_vec(&shape, data).expect("one label per voxel")
}

/// `(|pred ∩ gt|, |pred|, |gt|)` for one class.
pub fn overlap(pred: &[u8], gt: &[u8], class: u8) -> (u64, u64, u64) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        p += ia as u64;
        g += ib as u64;
        inter += (ia && ib) as u64;
    }
    (inter, p, g)
}

/// Hard Dice of one class; 1.0 if the class is absent from both.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let (i, p, g) = overlap(pred, gt, class);
    if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    }
}

fn check_lists(preds: &[Tensor<u8>], gts: &[Tensor<u8>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} ground-truth volumes",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                what: "prediction vs ground truth".into(),
                expected: g.shape().to_vec(),
                got: p.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Mean over cases of the per-case Dice of `class`.
pub fn dice_per_case(preds: &[Tensor<u8>], gts: &[Tensor<u8>], class: u8) -> Result<f64> {
    check_lists(preds, gts)?;
    if preds.is_empty() {
        return Err(Error::Config("no cases to score".into()));
    }
    let sum: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| dice_score(p.data(), g.data(), class))
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Dice of `class` over all cases pooled into one volume.
pub fn dice_global(preds: &[Tensor<u8>], gts: &[Tensor<u8>], class: u8) -> Result<f64> {
    check_lists(preds, gts)?;
    let (mut i, mut p, mut g) = (0, 0, 0);
    for (a, b) in preds.iter().zip(gts) {
        let (x, y, z) = overlap(a.data(), b.data(), class);
        i += x;
        p += y;
        g += z;
    }
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(v: Vec<u8>) -> Tensor<u8> {
        let n = v.len();
        Tensor::from_vec(&[n], v).unwrap()
    }

    #[test]
    fn two_cases_contrast() {
        // Case A: 10 tumour voxels, none found, 10 false alarms elsewhere.
        let mut ga = vec![0u8; 100];
        let mut pa = vec![0u8; 100];
        ga[..10].fill(2);
        pa[10..20].fill(2);
        // Case B: 90 tumour voxels, all found.
        let mut gb = vec![0u8; 100];
        gb[..90].fill(2);
        let preds = [vol(pa), vol(gb.clone())];
        let gts = [vol(ga), vol(gb)];
        assert!((dice_global(&preds, &gts, 2).unwrap() - 0.9).abs() < 1e-12);
        assert!((dice_per_case(&preds, &gts, 2).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        let empty = vol(vec![0, 1, 1]);
        assert_eq!(dice_score(empty.data(), empty.data(), 2), 1.0);
        assert_eq!(dice_score(&[2, 1, 1], empty.data(), 2), 0.0);
        assert_eq!(dice_global(&[vol(vec![2, 0])], &[vol(vec![0, 2])], 2).unwrap(), 0.0);
        assert!(dice_per_case(&[empty.clone()], &[], 2).is_err());
    }

    #[test]
    fn argmax_ties_to_lower_class() {
        let t = Tensor::from_vec(&[2, 3], vec![0.5f32, 0.5, 0.1, 0.0, 0.2, 0.9]).unwrap();
        assert_eq!(argmax_channels(&t).data(), &[0, 2]);
    }
}
