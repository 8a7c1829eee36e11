//! Dense reference network and loss.

use crate::tensor::{Real, Tensor};
use crate::training::{DiceClasses, LossConfig, LossValue};
use crate::unet::{LayerGraph, NodeOp, ParamStore};

/// The network evaluated on whole volumes, sharing the parameter store of
/// the distributed model.
#[derive(Clone, Debug)]
pub struct OracleModel<'a, T> {
    pub graph: &'a LayerGraph,
    pub params: &'a ParamStore<T>,
}

/// Every node's output, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct OracleTape<T> {
    acts: Vec<Tensor<T>>,
}

pub fn oracle_forward<T: Real>(model: &OracleModel<'_, T>, x: &Tensor<T>) -> (Tensor<T>, OracleTape<T>) {
    let mut acts: Vec<Tensor<T>> = Vec::with_capacity(model.graph.nodes().len());
    for node in model.graph.nodes() {
        let out = match &node.op {
            NodeOp::Input => x.clone(),
            NodeOp::Conv { param, relu } => {
                let p = &model.params.convs()[*param];
                let y = super::conv3d(&acts[node.inputs[0]], &p.weight, &p.bias);
                if *relu {
                    super::relu(&y)
                } else {
                    y
                }
            }
            NodeOp::MaxPool => super::maxpool2(&acts[node.inputs[0]]).0,
            NodeOp::Upsample => super::upsample2(&acts[node.inputs[0]]),
            NodeOp::Concat => Tensor::concat(&[&acts[node.inputs[0]], &acts[node.inputs[1]]], 4).expect("matching shapes"),
        };
        acts.push(out);
    }
    (acts.last().expect("non-empty graph").clone(), OracleTape { acts })
}

/// Parameter gradients and input gradient for an upstream gradient on the
/// logits.
pub fn oracle_backward<T: Real>(
    model: &OracleModel<'_, T>,
    tape: &OracleTape<T>,
    grad_logits: &Tensor<T>,
) -> (ParamStore<T>, Tensor<T>) {
    let nodes = model.graph.nodes();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
    grads[nodes.len() - 1] = Some(grad_logits.clone());
    let mut pg = ParamStore::zeros(model.graph.convs());
    let add = |grads: &mut Vec<Option<Tensor<T>>>, j: usize, g: Tensor<T>| match &mut grads[j] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    };
    for (i, node) in nodes.iter().enumerate().rev() {
        let g = grads[i].take().expect("every node feeds the output");
        match &node.op {
            NodeOp::Input => return (pg, g),
            NodeOp::Conv { param, relu } => {
                let g = if *relu {
                    let y = &tape.acts[i];
                    Tensor::from_fn(g.shape(), |idx| if y.get(idx) > T::zero() { g.get(idx) } else { T::zero() })
                } else {
                    g
                };
                let p = &model.params.convs()[*param];
                let (gx, gw, gb) = super::conv3d_backward(&tape.acts[node.inputs[0]], &p.weight, &g);
                pg.convs_mut()[*param].weight = gw;
                pg.convs_mut()[*param].bias = gb;
                add(&mut grads, node.inputs[0], gx);
            }
            NodeOp::MaxPool => {
                let x = &tape.acts[node.inputs[0]];
                let (_, arg) = super::maxpool2(x);
                add(&mut grads, node.inputs[0], super::maxpool2_backward(&g, &arg, x.shape()));
            }
            NodeOp::Upsample => add(&mut grads, node.inputs[0], super::upsample2_backward(&g)),
            NodeOp::Concat => {
                let ca = tape.acts[node.inputs[0]].shape()[4];
                let c = g.shape()[4];
                add(&mut grads, node.inputs[0], g.slice_dim(4, 0, ca));
                add(&mut grads, node.inputs[1], g.slice_dim(4, ca, c - ca));
            }
        }
    }
    unreachable!("graph starts with its input node")
}

/// Loss on dense logits `(b, x, y, z, classes)` and labels `(b, x, y, z, 1)`
/// with its gradient with respect to the logits. Sums run in f64 over the
/// whole volume.
pub fn oracle_loss<T: Real>(logits: &Tensor<T>, labels: &Tensor<u8>, cfg: &LossConfig) -> (LossValue, Tensor<T>) {
    let nc = logits.shape()[4];
    let probs = super::softmax_channels(logits);
    let classes: Vec<usize> = match cfg.dice_classes {
        DiceClasses::Foreground => (1..nc).collect(),
        DiceClasses::Tumor => vec![nc - 1],
    };
    let voxels = labels.len();
    let (mut inter, mut psum, mut gsum) = (vec![0.0f64; nc], vec![0.0f64; nc], vec![0.0f64; nc]);
    let mut ce = 0.0f64;
    for v in 0..voxels {
        let lab = labels.data()[v] as usize;
        for c in 0..nc {
            let p = probs.data()[v * nc + c].as_f64();
            psum[c] += p;
            if c == lab {
                inter[c] += p;
                gsum[c] += 1.0;
            }
        }
        ce -= probs.data()[v * nc + lab].as_f64().max(crate::training::PROB_FLOOR).ln();
    }
    let eps = crate::training::DICE_EPS;
    let k = classes.len() as f64;
    let mean_score: f64 = classes
        .iter()
        .map(|&c| (2.0 * inter[c] + eps) / (psum[c] + gsum[c] + eps))
        .sum::<f64>()
        / k;
    let dice = 1.0 - mean_score;
    let n = voxels as f64;
    let ce_mean = ce / n;
    let (wd, wc) = (cfg.weights.dice, cfg.weights.ce);

    let mut grad = Tensor::zeros(logits.shape());
    for v in 0..voxels {
        let lab = labels.data()[v] as usize;
        let p: Vec<f64> = (0..nc).map(|c| probs.data()[v * nc + c].as_f64()).collect();
        let mut gp = vec![0.0f64; nc];
        for &c in &classes {
            let den = psum[c] + gsum[c] + eps;
            let g = if c == lab { 1.0 } else { 0.0 };
            gp[c] -= wd / k * (2.0 * g * den - (2.0 * inter[c] + eps)) / (den * den);
        }
        let inner: f64 = (0..nc).map(|c| p[c] * gp[c]).sum();
        for c in 0..nc {
            let mut gz = p[c] * (gp[c] - inner);
            if p[lab] > crate::training::PROB_FLOOR {
                gz += wc * (p[c] - if c == lab { 1.0 } else { 0.0 }) / n;
            }
            grad.data_mut()[v * nc + c] = T::from_f64(gz);
        }
    }
    (
        LossValue {
            total: wd * dice + wc * ce_mean,
            dice,
            ce: ce_mean,
        },
        grad,
    )
}
