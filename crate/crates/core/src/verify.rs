//! Equivalence and gradient checks of the partitioned engine against the
//! dense oracles. Shared by the `verify` command and the test suites.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::halo::{analytic_exchange_bytes, halo_exchange, halo_exchange_backward, HaloSpec, PaddedBlock, PaddedShards};
use crate::mesh::{DeviceMesh, Layout};
use crate::ops::{conv3d_forward, ConvParams, OpTape};
use crate::oracle::{self, finite_difference_check, oracle_backward, oracle_forward, oracle_loss, FdReport, OracleModel};
use crate::sharded::{gather, shard, ShardedTensor, TensorSpec};
use crate::tensor::{Real, Tensor};
use crate::training::{loss_and_grads, LossConfig};
use crate::unet::{build, forward_local, init_params, LayerGraph, ParamStore, Profile, UNetConfig};

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// True when both tensors have the same shape and identical bit patterns.
pub fn bitwise_equal<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

fn random_tensor<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)))
}

fn axis_size(mesh: &DeviceMesh, layout: &Layout, dim: &str) -> usize {
    layout
        .axis_for(dim)
        .and_then(|a| mesh.shape().axis_index(a))
        .map_or(1, |i| mesh.shape().axis_size(i))
}

/// Distributed SAME 3x3x3 convolution of a random `12^3 x c` input against
/// the dense oracle, bitwise.
pub fn conv_equivalence(mesh: &DeviceMesh, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::conventional(mesh.shape());
    let batch = axis_size(mesh, &layout, "batch");
    let (ci, co) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let x = random_tensor::<f32>(&[batch, 12, 12, 12, ci], &mut rng);
    let w = random_tensor::<f32>(&[3, 3, 3, ci, co], &mut rng);
    let b = random_tensor::<f32>(&[co], &mut rng);
    let p = ConvParams::new(w.clone(), b.clone())?;
    let spec = TensorSpec::volume(batch, [12; 3], ci, crate::tensor::DType::F32)?;
    let xs = shard(&x, &spec, &layout, mesh)?;
    let y = gather(mesh, &conv3d_forward(mesh, &xs, &p, &mut OpTape::new(), "conv")?)?;
    let want = oracle::conv3d(&x, &w, &b);
    let ok = bitwise_equal(&y, &want);
    Ok(Check::new(
        format!("conv equivalence seed {seed}"),
        ok,
        format!("c_in {ci} c_out {co} max |diff| {:.3e}", y.max_abs_diff(&want)),
    ))
}

fn random_halo_case(mesh: &DeviceMesh, rng: &mut ChaCha8Rng) -> Result<(TensorSpec, Layout, HaloSpec)> {
    let layout = Layout::conventional(mesh.shape());
    let batch = axis_size(mesh, &layout, "batch") * rng.random_range(1..=2);
    let mut margins = Vec::new();
    let mut ext = [0usize; 3];
    for (d, name) in crate::sharded::SPATIAL.iter().enumerate() {
        let (lo, hi) = (rng.random_range(0..=2), rng.random_range(0..=2));
        let local = rng.random_range(lo.max(hi).max(1)..=4);
        ext[d] = local * axis_size(mesh, &layout, name);
        margins.push((*name, lo, hi));
    }
    let spec = TensorSpec::volume(batch, ext, rng.random_range(1..=3), crate::tensor::DType::F64)?;
    let halo = HaloSpec::new(&spec, &margins)?;
    Ok((spec, layout, halo))
}

/// Every padded block equals the matching window of the zero-padded global
/// tensor, and the bytes sent equal the surface formula.
pub fn halo_slice_of_global(mesh: &DeviceMesh, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (spec, layout, halo) = random_halo_case(mesh, &mut rng)?;
    let x = random_tensor::<f64>(&spec.extents(), &mut rng);
    let xs = shard(&x, &spec, &layout, mesh)?;
    let before = mesh.comm_stats().halo_bytes;
    let padded = halo_exchange(mesh, &xs, &halo)?;
    let sent = mesh.comm_stats().halo_bytes - before;
    let analytic = analytic_exchange_bytes(&padded.layout, &halo);
    // Zero-pad the global tensor by the margins on every dimension.
    let m = halo.margins();
    let grown: Vec<usize> = spec.extents().iter().zip(m).map(|(e, (lo, hi))| e + lo + hi).collect();
    let mut global = Tensor::<f64>::zeros(&grown);
    let starts: Vec<usize> = m.iter().map(|(lo, _)| *lo).collect();
    global.write_box(&starts, &x);
    let mut windows_ok = true;
    for (rank, b) in padded.blocks.iter().enumerate() {
        let off = padded.layout.block_offset(rank);
        let want = global.sub_box(&off, b.data.shape());
        windows_ok &= bitwise_equal(&b.data, &want);
    }
    Ok(Check::new(
        format!("halo slice-of-global seed {seed}"),
        windows_ok && sent == analytic,
        format!("shape {:?} margins {:?} bytes {sent} analytic {analytic}", spec.extents(), m),
    ))
}

/// `<E x, y> = <x, E* y>` for the halo exchange `E`; returns the relative
/// gap.
pub fn halo_adjoint_gap(mesh: &DeviceMesh, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (spec, layout, halo) = random_halo_case(mesh, &mut rng)?;
    let x = random_tensor::<f64>(&spec.extents(), &mut rng);
    let xs = shard(&x, &spec, &layout, mesh)?;
    let ex = halo_exchange(mesh, &xs, &halo)?;
    let ys: Vec<PaddedBlock<f64>> = ex
        .blocks
        .iter()
        .map(|b| PaddedBlock {
            data: random_tensor(b.data.shape(), &mut rng),
            faces: b.faces.clone(),
        })
        .collect();
    let lhs: f64 = ex.blocks.iter().zip(&ys).map(|(a, b)| a.data.dot(&b.data)).sum();
    let adj = halo_exchange_backward(
        mesh,
        PaddedShards {
            layout: ex.layout.clone(),
            halo: ex.halo.clone(),
            blocks: ys,
        },
    )?;
    let rhs: f64 = xs.blocks().iter().zip(adj.blocks()).map(|(a, b)| a.dot(b)).sum();
    Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE))
}

/// Gathered logits of the partitioned network for a global input batch.
pub fn distributed_logits<T: Real>(
    mesh: &DeviceMesh,
    graph: &Arc<LayerGraph>,
    params: &ParamStore<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let (b, e) = (s[0], graph.config().input_extent);
    let xl = graph.volume_layout(b, e, graph.config().in_channels, T::DTYPE)?;
    let ol = Arc::new(graph.volume_layout(b, e, graph.config().num_classes, T::DTYPE)?);
    let xs = ShardedTensor::from_blocks(
        Arc::new(xl.clone()),
        (0..mesh.worker_count())
            .map(|r| x.sub_box(&xl.block_offset(r), xl.local_shape()))
            .collect(),
    )?;
    let ctx = Arc::new((graph.clone(), params.clone()));
    let blocks = mesh.run(xs.into_blocks(), move |w, xb| {
        let (g, p) = &*ctx;
        let mut prof = Profile::for_graph(g);
        Ok(forward_local(g, p, w, xb, &mut prof)?.0)
    })?;
    gather(mesh, &ShardedTensor::from_blocks(ol, blocks)?)
}

fn small_net(mesh: &DeviceMesh, extent: usize) -> Result<Arc<LayerGraph>> {
    let cfg = UNetConfig::new(extent, vec![2, 4]).with_convs_per_block(2);
    Ok(Arc::new(build(&cfg, mesh.shape_arc(), &Layout::conventional(mesh.shape()))?))
}

fn random_labels(shape: &[usize], nc: u8, rng: &mut ChaCha8Rng) -> Tensor<u8> {
    Tensor::from_fn(shape, |_| rng.random_range(0..nc))
}

/// Small U-Net on `mesh` against the dense oracle: logits bitwise, loss
/// and parameter gradients to `1e-10` relative (f64).
pub fn network_equivalence(mesh: &DeviceMesh, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = small_net(mesh, 8)?;
    let batch = crate::training::batch_quantum(&graph);
    let params = init_params::<f64>(&graph, seed);
    let x = random_tensor::<f64>(&[batch, 8, 8, 8, 1], &mut rng);
    let y = random_labels(&[batch, 8, 8, 8, 1], 3, &mut rng);
    let logits = distributed_logits(mesh, &graph, &params, &x)?;
    let model = OracleModel {
        graph: &graph,
        params: &params,
    };
    let (want, tape) = oracle_forward(&model, &x);
    let fwd_ok = bitwise_equal(&logits, &want);
    let cfg = LossConfig::default();
    let (loss, grads) = loss_and_grads(mesh, &graph, &params, &x, &y, &cfg)?;
    let (oloss, glogits) = oracle_loss(&want, &y, &cfg);
    let (ograds, _) = oracle_backward(&model, &tape, &glogits);
    let (a, b) = (grads.flatten(), ograds.flatten());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let gerr = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())) / scale;
    let lerr = (loss.total - oloss.total).abs() / oloss.total.abs().max(1e-300);
    Ok(Check::new(
        format!("network equivalence seed {seed}"),
        fwd_ok && gerr <= 1e-10 && lerr <= 1e-12,
        format!("logits bitwise {fwd_ok}, loss rel {lerr:.2e}, grad rel {gerr:.2e}"),
    ))
}

/// Central differences of the loss against the partitioned backward pass
/// for a 2-block U-Net on a `6^3` input (f64). `mesh` must leave the
/// spatial dimensions whole.
pub fn gradient_check(mesh: &DeviceMesh, seed: u64, h: f64, tol: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = small_net(mesh, 6)?;
    let batch = crate::training::batch_quantum(&graph);
    // Zero biases put dead regions exactly on the ReLU kink, where central
    // differences see a one-sided slope; evaluate at a generic point instead.
    let mut params = init_params::<f64>(&graph, seed);
    for c in params.convs_mut() {
        c.bias = random_tensor::<f64>(c.bias.shape(), &mut rng).map(|v| 0.1 * v);
    }
    let x = random_tensor::<f64>(&[batch, 6, 6, 6, 1], &mut rng);
    let y = random_labels(&[batch, 6, 6, 6, 1], 3, &mut rng);
    let cfg = LossConfig::default();
    let (_, grads) = loss_and_grads(mesh, &graph, &params, &x, &y, &cfg)?;
    let named: Vec<(String, Vec<f64>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let analytic: Vec<Vec<f64>> = grads.named_tensors().into_iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut probe = params.clone();
    let f = |p: &[(String, Vec<f64>)]| {
        let flat: Vec<f64> = p.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        probe.assign_flat(&flat).expect("same layout");
        let model = OracleModel {
            graph: &graph,
            params: &probe,
        };
        oracle_loss(&oracle_forward(&model, &x).0, &y, &cfg).0.total
    };
    Ok(finite_difference_check(f, &named, &analytic, h, tol, 1))
}

/// Runs every check for `seeds` seeds on `mesh`, plus the gradient check on
/// a single worker.
pub fn run_suite(mesh: &DeviceMesh, seeds: u64, mut report: impl FnMut(&Check)) -> Result<bool> {
    let mut all = true;
    let mut emit = |c: Check| {
        all &= c.passed;
        report(&c);
    };
    for seed in 0..seeds {
        emit(conv_equivalence(mesh, seed)?);
    }
    for seed in 0..seeds.max(50) {
        emit(halo_slice_of_global(mesh, seed)?);
    }
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        worst = worst.max(halo_adjoint_gap(mesh, seed)?);
    }
    emit(Check::new("halo adjoint", worst <= 1e-12, format!("max relative gap {worst:.2e}")));
    for seed in 0..seeds.min(3) {
        match network_equivalence(mesh, seed) {
            Ok(c) => emit(c),
            // Meshes too fine for the small network skip this check.
            Err(Error::ShardTooSmall { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let single = DeviceMesh::parse("x=1")?;
    let fd = gradient_check(&single, 0, 1e-6, 1e-5)?;
    emit(Check::new(
        "finite differences",
        fd.passed(),
        format!("max relative error {:.2e} over {} blocks", fd.max_rel_err(), fd.blocks.len()),
    ));
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_unet_gradients_match_finite_differences() {
        let mesh = DeviceMesh::parse("x=1").unwrap();
        for seed in 0..3 {
            let r = gradient_check(&mesh, seed, 1e-6, 1e-5).unwrap();
            assert!(r.passed(), "seed {seed}: {:?}", r.failures());
        }
    }

    #[test]
    fn network_matches_oracle_on_split_mesh() {
        let mesh = DeviceMesh::parse("x=2,y=2").unwrap();
        let c = network_equivalence(&mesh, 4).unwrap();
        assert!(c.passed, "{}", c.detail);
    }
}
