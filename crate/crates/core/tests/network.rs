use std::sync::Arc;

use halomesh::oracle::{oracle_backward, oracle_forward, oracle_loss, OracleModel};
use halomesh::training::{batch_quantum, loss_and_grads, LossConfig};
use halomesh::verify::{distributed_logits, gradient_check, network_equivalence};
use halomesh::{build, create_mesh, init_params, Layout, LayerGraph, Tensor, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph_on(mesh: &halomesh::DeviceMesh, extent: usize, blocks: Vec<usize>) -> Arc<LayerGraph> {
    let cfg = UNetConfig::new(extent, blocks).with_convs_per_block(2);
    Arc::new(build(&cfg, mesh.shape_arc(), &Layout::conventional(mesh.shape())).unwrap())
}

#[test]
fn logits_are_bitwise_on_every_mesh_f32() {
    let meshes: &[&[(&str, usize)]] = &[
        &[("x", 1)],
        &[("x", 2)],
        &[("x", 2), ("y", 2), ("z", 2)],
        &[("b", 2), ("z", 2)],
        &[("y", 2), ("r", 2)],
    ];
    for axes in meshes {
        let mesh = create_mesh(axes).unwrap();
        let graph = graph_on(&mesh, 16, vec![4, 8, 8]);
        let params = init_params::<f32>(&graph, 3);
        let b = batch_quantum(&graph);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[b, 16, 16, 16, 1], |_| rng.random_range(-1.0f32..1.0));
        let got = distributed_logits(&mesh, &graph, &params, &x).unwrap();
        let (want, _) = oracle_forward(&OracleModel { graph: &graph, params: &params }, &x);
        assert_eq!(got.shape(), want.shape());
        assert!(
            got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "mesh {axes:?}: max diff {}",
            got.max_abs_diff(&want)
        );
    }
}

#[test]
fn loss_and_gradients_match_the_dense_network() {
    for (axes, seed) in [(&[("x", 2), ("y", 2)][..], 0u64), (&[("b", 2), ("x", 2)][..], 1), (&[("z", 2)][..], 2)] {
        let mesh = create_mesh(axes).unwrap();
        let c = network_equivalence(&mesh, seed).unwrap();
        assert!(c.passed, "{axes:?}: {}", c.detail);
    }
}

#[test]
fn batch_split_gradients_are_bitwise() {
    let one = create_mesh(&[("x", 1)]).unwrap();
    let two = create_mesh(&[("b", 2)]).unwrap();
    let g1 = graph_on(&one, 8, vec![2, 4]);
    let g2 = graph_on(&two, 8, vec![2, 4]);
    let params = init_params::<f32>(&g1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_fn(&[2, 8, 8, 8, 1], |_| rng.random_range(-1.0f32..1.0));
    let y = Tensor::from_fn(&[2, 8, 8, 8, 1], |_| rng.random_range(0..3u8));
    let cfg = LossConfig::default();
    let (l1, d1) = loss_and_grads(&one, &g1, &params, &x, &y, &cfg).unwrap();
    let (l2, d2) = loss_and_grads(&two, &g2, &params, &x, &y, &cfg).unwrap();
    assert_eq!(l1.total.to_bits(), l2.total.to_bits());
    assert!(d1.bitwise_eq(&d2));
}

#[test]
fn dense_backward_is_consistent_with_itself_across_dtypes() {
    // f32 and f64 oracle gradients agree to f32 precision.
    let mesh = create_mesh(&[("x", 1)]).unwrap();
    let graph = graph_on(&mesh, 8, vec![2, 4]);
    let p64 = init_params::<f64>(&graph, 5);
    let p32 = p64.cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x64 = Tensor::from_fn(&[1, 8, 8, 8, 1], |_| rng.random_range(-1.0f64..1.0));
    let x32 = x64.cast::<f32>();
    let y = Tensor::from_fn(&[1, 8, 8, 8, 1], |_| rng.random_range(0..3u8));
    let cfg = LossConfig::default();
    let m64 = OracleModel { graph: &graph, params: &p64 };
    let m32 = OracleModel { graph: &graph, params: &p32 };
    let (o64, t64) = oracle_forward(&m64, &x64);
    let (o32, t32) = oracle_forward(&m32, &x32);
    let (_, gl64) = oracle_loss(&o64, &y, &cfg);
    let (_, gl32) = oracle_loss(&o32, &y, &cfg);
    let (g64, _) = oracle_backward(&m64, &t64, &gl64);
    let (g32, _) = oracle_backward(&m32, &t32, &gl32);
    let (a, b) = (g64.flatten(), g32.cast::<f64>().flatten());
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    assert!(err <= 1e-4 * scale, "{err} vs {scale}");
}

#[test]
fn finite_differences_on_a_small_unet() {
    let mesh = create_mesh(&[("x", 1)]).unwrap();
    for seed in [11, 12] {
        let r = gradient_check(&mesh, seed, 1e-6, 1e-5).unwrap();
        assert!(r.passed(), "seed {seed}: {:?}", r.failures());
    }
}
