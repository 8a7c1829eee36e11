use halomesh::halo::{halo_exchange, halo_exchange_backward, HaloSpec, PaddedBlock, PaddedShards};
use halomesh::{create_mesh, shard, DType, DeviceMesh, Layout, Tensor, TensorSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MESHES: &[&[(&str, usize)]] = &[
    &[("x", 1)],
    &[("x", 2)],
    &[("y", 2), ("z", 2)],
    &[("x", 2), ("y", 2), ("z", 2)],
    &[("b", 2), ("x", 2)],
    &[("x", 3)],
    &[("x", 2), ("r", 2)],
];

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn axis_size(mesh: &DeviceMesh, name: &str) -> usize {
    mesh.shape().axis_index(name).map_or(1, |a| mesh.shape().axis_size(a))
}

/// Window `[start - lo, start + local + hi)` of the global tensor on each
/// dimension, reading zeros outside the tensor.
fn expected_window(global: &Tensor<f64>, start: &[usize], local: &[usize], margins: &[(usize, usize)]) -> Tensor<f64> {
    let shape: Vec<usize> = local.iter().zip(margins).map(|(l, (lo, hi))| l + lo + hi).collect();
    Tensor::from_fn(&shape, |idx| {
        let mut g = Vec::with_capacity(idx.len());
        for d in 0..idx.len() {
            let p = (start[d] + idx[d]) as isize - margins[d].0 as isize;
            if p < 0 || p >= global.shape()[d] as isize {
                return 0.0;
            }
            g.push(p as usize);
        }
        global.get(&g)
    })
}

/// Bytes each worker receives from neighbours, summed. Exchange runs per
/// spatial dimension in order, so the face area includes margins already
/// filled on earlier dimensions.
fn received_bytes(mesh: &DeviceMesh, local: &[usize], margins: &[(usize, usize)], split: &[Option<&str>]) -> u64 {
    let mut total = 0usize;
    for rank in 0..mesh.worker_count() {
        let coord = mesh.shape().coord_of(rank);
        let mut cur = local.to_vec();
        for d in 0..local.len() {
            let (lo, hi) = margins[d];
            if let Some(axis) = split[d] {
                let a = mesh.shape().axis_index(axis).unwrap();
                let area: usize = (0..cur.len()).filter(|&j| j != d).map(|j| cur[j]).product();
                if coord[a] > 0 {
                    total += lo * area;
                }
                if coord[a] + 1 < mesh.shape().axis_size(a) {
                    total += hi * area;
                }
            }
            cur[d] += lo + hi;
        }
    }
    total as u64 * 8
}

fn run_case(mesh_axes: &[(&str, usize)], seed: u64) {
    let mesh = create_mesh(mesh_axes).unwrap();
    let layout = Layout::conventional(mesh.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["dimx", "dimy", "dimz"];
    let mut margins = vec![(0, 0)];
    let mut ext = [0; 3];
    for (d, name) in names.iter().enumerate() {
        let (lo, hi) = (rng.random_range(0..=2), rng.random_range(0..=2));
        let local = rng.random_range(lo.max(hi).max(1)..=4);
        ext[d] = local * axis_size(&mesh, &name[3..]);
        margins.push((lo, hi));
    }
    margins.push((0, 0));
    let batch = axis_size(&mesh, "b") * rng.random_range(1..=2);
    let channels = rng.random_range(1..=3);
    let spec = TensorSpec::volume(batch, ext, channels, DType::F64).unwrap();
    let named: Vec<(&str, usize, usize)> = names.iter().zip(&margins[1..4]).map(|(n, &(l, h))| (*n, l, h)).collect();
    let halo = HaloSpec::new(&spec, &named).unwrap();

    let x = random(&spec.extents(), &mut rng);
    let xs = shard(&x, &spec, &layout, &mesh).unwrap();
    let local = xs.layout().local_shape().to_vec();
    mesh.reset_stats();
    let ex = halo_exchange(&mesh, &xs, &halo).unwrap();
    let sent = mesh.comm_stats().halo_bytes;

    for (rank, block) in ex.blocks.iter().enumerate() {
        let start = xs.layout().block_offset(rank);
        let want = expected_window(&x, &start, &local, &margins);
        assert_eq!(block.data.shape(), want.shape());
        assert!(
            block.data.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "rank {rank} window differs (mesh {mesh_axes:?}, seed {seed})"
        );
    }
    let split = [None, Some("x"), Some("y"), Some("z"), None];
    let split: Vec<Option<&str>> = split
        .iter()
        .map(|a| a.filter(|a| mesh.shape().axis_index(a).is_some()))
        .collect();
    assert_eq!(sent, received_bytes(&mesh, &local, &margins, &split), "mesh {mesh_axes:?} seed {seed}");
}

#[test]
fn padded_blocks_are_windows_of_the_global_tensor() {
    let mut n = 0;
    for (m, axes) in MESHES.iter().enumerate() {
        for s in 0..10u64 {
            run_case(axes, 1000 * m as u64 + s);
            n += 1;
        }
    }
    assert!(n >= 50);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn windows_and_bytes_on_random_cases(m in 0..MESHES.len(), seed in any::<u64>()) {
        run_case(MESHES[m], seed);
    }

    #[test]
    fn backward_exchange_is_the_adjoint(m in 0..MESHES.len(), seed in any::<u64>()) {
        let mesh = create_mesh(MESHES[m]).unwrap();
        let layout = Layout::conventional(mesh.shape());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = [
            2 * axis_size(&mesh, "x") * rng.random_range(1..=2),
            2 * axis_size(&mesh, "y"),
            2 * axis_size(&mesh, "z"),
        ];
        let spec = TensorSpec::volume(axis_size(&mesh, "b"), ext, 2, DType::F64).unwrap();
        let halo = HaloSpec::new(&spec, &[("dimx", 1, 2), ("dimy", 1, 1), ("dimz", 2, 0)]).unwrap();
        let x = random(&spec.extents(), &mut rng);
        let xs = shard(&x, &spec, &layout, &mesh).unwrap();
        let ex = halo_exchange(&mesh, &xs, &halo).unwrap();
        let ys: Vec<PaddedBlock<f64>> = ex
            .blocks
            .iter()
            .map(|b| PaddedBlock { data: random(b.data.shape(), &mut rng), faces: b.faces.clone() })
            .collect();
        let lhs: f64 = ex.blocks.iter().zip(&ys).map(|(a, b)| a.data.dot(&b.data)).sum();
        let back = halo_exchange_backward(
            &mesh,
            PaddedShards { layout: ex.layout.clone(), halo: ex.halo.clone(), blocks: ys },
        )
        .unwrap();
        let rhs: f64 = xs.blocks().iter().zip(back.blocks()).map(|(a, b)| a.dot(b)).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }
}

#[test]
fn margin_wider_than_a_block_is_an_error() {
    let mesh = create_mesh(&[("x", 2)]).unwrap();
    let spec = TensorSpec::volume(1, [4, 4, 4], 1, DType::F64).unwrap();
    let xs = shard(&Tensor::<f64>::zeros(&[1, 4, 4, 4, 1]), &spec, &Layout::conventional(mesh.shape()), &mesh).unwrap();
    let halo = HaloSpec::new(&spec, &[("dimx", 3, 0)]).unwrap();
    assert!(halo_exchange(&mesh, &xs, &halo).is_err());
}
