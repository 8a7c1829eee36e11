//! Per-layer, per-phase timing of training steps.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use crate::error::Result;
use crate::mesh::DeviceMesh;
use crate::tensor::{Real, Tensor};
use crate::training::{LossConfig, SgdMomentum, Trainer};
use crate::unet::exec::{GATHER, HALO, SHARD};
use crate::unet::{init_params, LayerGraph, Profile, PHASES};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub steps: usize,
    /// Untimed steps run first.
    pub warmup: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            steps: 3,
            warmup: 1,
            batch: 2,
            seed: 0,
        }
    }
}

/// Measured halo bytes of one convolution against the surface formula.
/// Forward and backward exchanges move the same volume, so a step moves
/// twice the forward amount.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBytes {
    pub layer: String,
    pub measured: u64,
    pub analytic: u64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub profile: Profile,
    pub steps: usize,
    /// Driver wall time over the timed steps.
    pub total_ns: u64,
    pub layers: Vec<LayerBytes>,
}

impl BenchReport {
    pub fn bytes_match(&self) -> bool {
        self.layers.iter().all(|l| l.measured == l.analytic)
    }

    /// CPU time summed over workers and phases.
    pub fn cpu_ns(&self) -> u64 {
        self.profile.phase_totals().ns.iter().sum()
    }

    /// (partitioning + reshaping + halo) CPU time over all CPU time.
    pub fn overhead_fraction(&self) -> f64 {
        let t = self.profile.phase_totals();
        (t.ns[SHARD] + t.ns[GATHER] + t.ns[HALO]) as f64 / self.cpu_ns().max(1) as f64
    }

    /// Convolution forward and backward CPU time over all CPU time.
    pub fn conv_fraction(&self) -> f64 {
        let t = self.profile.phase_totals();
        (t.ns[3] + t.ns[4]) as f64 / self.cpu_ns().max(1) as f64
    }

    /// `layer,phase,wall_ms,bytes`, one row per non-empty cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,phase,wall_ms,bytes\n");
        for (layer, t) in &self.profile.rows {
            for (p, name) in PHASES.iter().enumerate() {
                if t.ns[p] > 0 || t.bytes[p] > 0 {
                    let _ = writeln!(s, "{layer},{name},{:.4},{}", t.ns[p] as f64 / 1e6, t.bytes[p]);
                }
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let t = self.profile.phase_totals();
        let total_ms = self.cpu_ns() as f64 / 1e6;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} steps, {:.1} ms wall, {:.1} ms CPU over all workers",
            self.steps,
            self.total_ns as f64 / 1e6,
            total_ms
        );
        for (p, name) in PHASES.iter().enumerate() {
            let ms = t.ns[p] as f64 / 1e6;
            let _ = writeln!(
                s,
                "  {name:<11} {ms:>10.1} ms {:>6.1}%  {:>12} bytes",
                100.0 * ms / total_ms.max(1e-9),
                t.bytes[p]
            );
        }
        let _ = writeln!(s, "conv share: {:.1}%", 100.0 * self.conv_fraction());
        let _ = writeln!(
            s,
            "partitioning overhead (shard + gather + halo): {:.1}%",
            100.0 * self.overhead_fraction()
        );
        let bad: Vec<&LayerBytes> = self.layers.iter().filter(|l| l.measured != l.analytic).collect();
        if bad.is_empty() {
            let _ = writeln!(s, "halo bytes match the surface formula on all {} layers", self.layers.len());
        } else {
            for l in bad {
                let _ = writeln!(s, "halo bytes MISMATCH {}: measured {} analytic {}", l.layer, l.measured, l.analytic);
            }
        }
        s
    }
}

/// Times `cfg.steps` training steps on a random batch.
pub fn run_bench<T: Real>(mesh: &DeviceMesh, graph: Arc<LayerGraph>, cfg: &BenchConfig) -> Result<BenchReport> {
    use rand::{Rng, SeedableRng};
    let e = graph.config().input_extent;
    let nc = graph.config().num_classes as u8;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = [cfg.batch, e, e, e, graph.config().in_channels];
    let images = Tensor::from_fn(&shape, |_| T::from_f64(rng.random_range(-1.0..1.0)));
    let labels = Tensor::from_fn(&[cfg.batch, e, e, e, 1], |_| rng.random_range(0..nc));
    let params = init_params::<T>(&graph, cfg.seed);
    let opt = SgdMomentum::new(1e-3, 0.9, &params);
    let mut trainer = Trainer::new(mesh, graph.clone(), params, opt, LossConfig::default(), 0)?;
    for _ in 0..cfg.warmup {
        trainer.train_step(&images, &labels)?;
    }
    trainer.reset_profile();
    let start = Instant::now();
    for _ in 0..cfg.steps {
        trainer.train_step(&images, &labels)?;
    }
    let total_ns = start.elapsed().as_nanos() as u64;
    let profile = trainer.profile().clone();
    let layers = graph
        .halo_bytes_per_layer(cfg.batch, T::DTYPE)?
        .into_iter()
        .map(|(layer, fwd)| {
            let measured = profile
                .row_index(&layer)
                .map_or(0, |i| profile.rows[i].1.bytes[HALO]);
            LayerBytes {
                layer,
                measured,
                analytic: 2 * fwd * cfg.steps as u64,
            }
        })
        .collect();
    Ok(BenchReport {
        profile,
        steps: cfg.steps,
        total_ns,
        layers,
    })
}
