//! Losses, metrics, the optimizer, and the data-parallel / spatially
//! partitioned training loop.

pub mod checkpoint;
pub mod data;
mod loss;
mod metrics;
mod optim;

pub use checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{batch_indices, make_batch, stack_records, AugmentPlan, Batch, Loader};
pub use loss::{
    combined_loss, cross_entropy_loss, local_stats, loss_local, soft_dice_loss, DiceClasses, LossConfig, LossStats,
    LossValue, LossWeights, DICE_EPS, PROB_FLOOR,
};
pub use metrics::{argmax_channels, dice_global, dice_per_case, dice_score, overlap};
pub use optim::{Adam, Optimizer, SgdMomentum, StepOutcome};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use crate::augment::SynthConfig;
use crate::error::{Error, Result};
use crate::io::{VolumeRecord, TUMOR};
use crate::mesh::DeviceMesh;
use crate::sharded::{gather, ShardLayout, ShardedTensor};
use crate::tensor::{Real, Tensor};
use crate::unet::exec::{reduce_grads, SHARD};
use crate::unet::{backward_local, forward_local, LayerGraph, ParamStore, Profile};

/// Everything the training loop needs besides the model and data.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: Option<AugmentPlan>,
    /// Save a checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            batch: 2,
            lr: 0.003,
            momentum: 0.9,
            seed: 0,
            loss: LossConfig::default(),
            augment: None,
            checkpoint_every: 0,
            checkpoint_dir: None,
            metrics_csv: None,
            queue_depth: 2,
        }
    }
}

impl TrainConfig {
    pub fn with_augment(mut self, config: SynthConfig, prob: f64) -> Self {
        self.augment = Some(AugmentPlan { config, prob });
        self
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossValue,
    pub lr: f64,
    pub wall_ms: f64,
    pub outcome: StepOutcome,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,loss,dice_loss,ce_loss,lr,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{},{:.3}",
            self.step, self.loss.total, self.loss.dice, self.loss.ce, self.lr, self.wall_ms
        )
    }
}

#[derive(Clone, Debug)]
struct Replica<T, O> {
    params: ParamStore<T>,
    opt: O,
}

struct Ctx {
    graph: Arc<LayerGraph>,
    loss: LossConfig,
}

fn check_batch_shape<T: crate::tensor::Element>(graph: &LayerGraph, images: &Tensor<T>, labels: &Tensor<u8>) -> Result<(usize, usize)> {
    let s = images.shape();
    let e = graph.config().input_extent;
    let want = [s.first().copied().unwrap_or(0), e, e, e, graph.config().in_channels];
    if s != want {
        return Err(Error::ShapeMismatch {
            what: "batch images".into(),
            expected: want.to_vec(),
            got: s.to_vec(),
        });
    }
    let lwant = [want[0], e, e, e, 1];
    if labels.shape() != lwant {
        return Err(Error::ShapeMismatch {
            what: "batch labels".into(),
            expected: lwant.to_vec(),
            got: labels.shape().to_vec(),
        });
    }
    graph.local_batch(want[0])?;
    Ok((want[0], e))
}

/// Splits a global batch into per-worker image and label blocks.
fn shard_batch<T: Real>(
    graph: &LayerGraph,
    images: &Tensor<T>,
    labels: &Tensor<u8>,
    prof: &mut Profile,
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<u8>>, Arc<ShardLayout>)> {
    let (b, e) = check_batch_shape(graph, images, labels)?;
    let t = cpu_time::ThreadTime::now();
    let xl = graph.volume_layout(b, e, graph.config().in_channels, T::DTYPE)?;
    let yl = graph.volume_layout(b, e, 1, crate::tensor::DType::U8)?;
    let n = graph.mesh().worker_count();
    let mut bytes = 0u64;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for rank in 0..n {
        let x = images.sub_box(&xl.block_offset(rank), xl.local_shape());
        let y = labels.sub_box(&yl.block_offset(rank), yl.local_shape());
        bytes += (x.byte_len() + y.byte_len()) as u64;
        xs.push(x);
        ys.push(y);
    }
    prof.add_named("driver", SHARD, t, bytes);
    Ok((xs, ys, Arc::new(yl)))
}

/// Loss and globally reduced parameter gradients for one batch, without
/// updating anything. Used by gradient checks.
pub fn loss_and_grads<T: Real>(
    mesh: &DeviceMesh,
    graph: &Arc<LayerGraph>,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    labels: &Tensor<u8>,
    loss: &LossConfig,
) -> Result<(LossValue, ParamStore<T>)> {
    let mut prof = Profile::for_graph(graph);
    let (xs, ys, _) = shard_batch(graph, images, labels, &mut prof)?;
    let ctx = Arc::new(Ctx {
        graph: graph.clone(),
        loss: *loss,
    });
    let params = Arc::new(params.clone());
    let inputs: Vec<_> = xs.into_iter().zip(ys).collect();
    let mut out = mesh.run(inputs, move |w, (x, y)| {
        let g = &ctx.graph;
        let mut prof = Profile::for_graph(g);
        let (logits, tape) = forward_local(g, &params, w, x, &mut prof)?;
        let (value, grad) = loss_local(w, &logits, &y, &ctx.loss, g.data_axes(), true)?;
        drop(logits);
        let grad = grad.expect("requested");
        let (mut grads, _) = backward_local(g, &params, w, tape, grad, &mut prof)?;
        reduce_grads(g, w, &mut grads, &mut prof)?;
        Ok((value, grads))
    })?;
    Ok(out.swap_remove(0))
}

/// Holds one model/optimizer replica per worker and applies training
/// steps. Replicas are checked to stay bitwise identical after each step.
pub struct Trainer<'m, T, O = SgdMomentum<T>> {
    mesh: &'m DeviceMesh,
    ctx: Arc<Ctx>,
    replicas: Vec<Replica<T, O>>,
    step: usize,
    profile: Profile,
}

impl<'m, T: Real, O: Optimizer<T>> Trainer<'m, T, O> {
    pub fn new(
        mesh: &'m DeviceMesh,
        graph: Arc<LayerGraph>,
        params: ParamStore<T>,
        opt: O,
        loss: LossConfig,
        step: usize,
    ) -> Result<Self> {
        if graph.mesh().as_ref() != mesh.shape() {
            return Err(Error::Layout(format!(
                "model built for mesh {} but running on {}",
                graph.mesh(),
                mesh.shape()
            )));
        }
        if params.ids().len() != graph.convs().len() {
            return Err(Error::Config("parameters do not match the model".into()));
        }
        let replicas = vec![Replica { params, opt }; mesh.worker_count()];
        let profile = Profile::for_graph(&graph);
        Ok(Trainer {
            mesh,
            ctx: Arc::new(Ctx { graph, loss }),
            replicas,
            step,
            profile,
        })
    }

    pub fn graph(&self) -> &Arc<LayerGraph> {
        &self.ctx.graph
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.replicas[0].params
    }

    pub fn optimizer(&self) -> &O {
        &self.replicas[0].opt
    }

    /// Number of steps applied so far (including those restored from a
    /// checkpoint).
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Accumulated per-layer timings.
    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn reset_profile(&mut self) {
        self.profile = Profile::for_graph(&self.ctx.graph);
    }

    /// Parameters, optimizer state and step count of replica 0.
    pub fn into_parts(mut self) -> (ParamStore<T>, O, usize) {
        let r = self.replicas.swap_remove(0);
        (r.params, r.opt, self.step)
    }

    /// One optimizer step on a global batch.
    pub fn train_step(&mut self, images: &Tensor<T>, labels: &Tensor<u8>) -> Result<StepRecord> {
        let start = Instant::now();
        let mut prof = Profile::for_graph(&self.ctx.graph);
        let (xs, ys, _) = shard_batch(&self.ctx.graph, images, labels, &mut prof)?;
        let replicas = std::mem::take(&mut self.replicas);
        let inputs: Vec<_> = replicas.into_iter().zip(xs).zip(ys).map(|((r, x), y)| (r, x, y)).collect();
        let ctx = self.ctx.clone();
        let results = self.mesh.run(inputs, move |w, (mut rep, x, y): (Replica<T, O>, _, _)| {
            let g = &ctx.graph;
            let mut prof = Profile::for_graph(g);
            let (logits, tape) = forward_local(g, &rep.params, w, x, &mut prof)?;
            let t = cpu_time::ThreadTime::now();
            let (value, grad) = loss_local(w, &logits, &y, &ctx.loss, g.data_axes(), true)?;
            prof.add_named("loss", crate::unet::exec::OTHER, t, 0);
            drop(logits);
            let grad = grad.expect("requested");
            let (mut grads, _) = backward_local(g, &rep.params, w, tape, grad, &mut prof)?;
            reduce_grads(g, w, &mut grads, &mut prof)?;
            let t = cpu_time::ThreadTime::now();
            let outcome = rep.opt.step(&mut rep.params, &grads);
            prof.add_named("optimizer", crate::unet::exec::OTHER, t, 0);
            Ok((rep, value, outcome, prof))
        });
        let results = match results {
            Ok(r) => r,
            Err(e) => {
                // Replicas were moved into the failed job; the trainer
                // cannot continue.
                return Err(e);
            }
        };
        let mut value = LossValue::default();
        let mut outcome = StepOutcome::Applied;
        for (i, (rep, v, o, p)) in results.into_iter().enumerate() {
            if i == 0 {
                value = v;
                outcome = o;
            }
            prof.merge_workers(&p);
            self.replicas.push(rep);
        }
        let first = &self.replicas[0];
        if let Some(bad) = self.replicas[1..]
            .iter()
            .position(|r| !r.params.bitwise_eq(&first.params))
        {
            return Err(Error::Config(format!("replica {} diverged from replica 0", bad + 1)));
        }
        self.profile.accumulate(&prof);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss: value,
            lr: first.opt.learning_rate(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            outcome,
        })
    }
}

/// Predicted class volumes `(b, x, y, z, 1)` and the mean loss for a batch.
pub fn predict_batch<T: Real>(
    mesh: &DeviceMesh,
    graph: &Arc<LayerGraph>,
    params: &Arc<ParamStore<T>>,
    images: &Tensor<T>,
    labels: &Tensor<u8>,
    loss: &LossConfig,
) -> Result<(Tensor<u8>, LossValue)> {
    let mut prof = Profile::for_graph(graph);
    let (xs, ys, yl) = shard_batch(graph, images, labels, &mut prof)?;
    let ctx = Arc::new(Ctx {
        graph: graph.clone(),
        loss: *loss,
    });
    let params = params.clone();
    let inputs: Vec<_> = xs.into_iter().zip(ys).collect();
    let out = mesh.run(inputs, move |w, (x, y)| {
        let g = &ctx.graph;
        let mut prof = Profile::for_graph(g);
        let (logits, _) = forward_local(g, &params, w, x, &mut prof)?;
        let (value, _) = loss_local(w, &logits, &y, &ctx.loss, g.data_axes(), false)?;
        Ok((argmax_channels(&logits), value))
    })?;
    let value = out[0].1;
    let blocks = out.into_iter().map(|(p, _)| p).collect();
    let preds = ShardedTensor::from_blocks(yl, blocks)?;
    Ok((gather(mesh, &preds)?, value))
}

/// Validation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Mean of per-case tumour Dice.
    pub dice_per_case: f64,
    /// Tumour Dice with all cases pooled.
    pub dice_global: f64,
    /// Mean of the per-chunk losses.
    pub mean_loss: f64,
    pub cases: usize,
}

/// Predicted label volumes `[x, y, z]` for each record, evaluated in chunks
/// of `chunk` cases. A short last chunk is padded by repeating its final
/// case; padded predictions are dropped.
pub fn predict_records<T: Real>(
    mesh: &DeviceMesh,
    graph: &Arc<LayerGraph>,
    params: &ParamStore<T>,
    records: &[VolumeRecord],
    chunk: usize,
    loss: &LossConfig,
) -> Result<(Vec<Tensor<u8>>, Vec<LossValue>)> {
    if chunk == 0 {
        return Err(Error::Config("evaluation chunk must be positive".into()));
    }
    let params = Arc::new(params.clone());
    let mut preds = Vec::with_capacity(records.len());
    let mut losses = Vec::new();
    for part in records.chunks(chunk) {
        let mut refs: Vec<&VolumeRecord> = part.iter().collect();
        while refs.len() < chunk {
            refs.push(part.last().expect("chunks are non-empty"));
        }
        let (x, y) = stack_records::<T>(&refs)?;
        let (p, l) = predict_batch(mesh, graph, &params, &x, &y, loss)?;
        let s = p.shape().to_vec();
        for b in 0..part.len() {
            preds.push(p.slice_dim(0, b, 1).reshape(&s[1..4])?);
        }
        losses.push(l);
    }
    Ok((preds, losses))
}

/// Tumour Dice (per case and pooled) and mean loss over `records`.
pub fn evaluate<T: Real>(
    mesh: &DeviceMesh,
    graph: &Arc<LayerGraph>,
    params: &ParamStore<T>,
    records: &[VolumeRecord],
    chunk: usize,
    loss: &LossConfig,
) -> Result<EvalMetrics> {
    let (preds, losses) = predict_records(mesh, graph, params, records, chunk, loss)?;
    let gts: Vec<Tensor<u8>> = records.iter().map(|r| r.labels.clone()).collect();
    Ok(EvalMetrics {
        dice_per_case: dice_per_case(&preds, &gts, TUMOR)?,
        dice_global: dice_global(&preds, &gts, TUMOR)?,
        mean_loss: losses.iter().map(|l| l.total).sum::<f64>() / losses.len() as f64,
        cases: records.len(),
    })
}

/// Smallest batch that splits evenly over the graph's batch axis.
pub fn batch_quantum(graph: &LayerGraph) -> usize {
    graph.bindings()[0].map_or(1, |b| b.size)
}

struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    fn open(path: &std::path::Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        if !(append && exists) {
            writeln!(out, "{}", StepRecord::CSV_HEADER).map_err(|e| Error::io(path, e))?;
        }
        Ok(CsvLog { out })
    }

    fn write(&mut self, r: &StepRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        self.out.flush()
    }
}

/// Runs `cfg.steps` steps starting from the trainer's current step count,
/// reading batches from a loader thread. `on_step` sees every record.
pub fn train_loop<T: Real, O: Optimizer<T>>(
    trainer: &mut Trainer<'_, T, O>,
    records: Arc<Vec<VolumeRecord>>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let first = trainer.step_count();
    let end = cfg.steps;
    if first >= end {
        return Ok(Vec::new());
    }
    let mut csv = match &cfg.metrics_csv {
        Some(p) => Some((CsvLog::open(p, first > 0)?, p.clone())),
        None => None,
    };
    let loader = Loader::<T>::spawn(records, cfg.seed, first..end, cfg.batch, cfg.augment.clone(), cfg.queue_depth);
    let mut history = Vec::with_capacity(end - first);
    for batch in loader {
        let batch = batch?;
        let rec = trainer.train_step(&batch.images, &batch.labels)?;
        if let Some((log, path)) = csv.as_mut() {
            log.write(&rec).map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_step(&rec);
        if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(dir, rec.step, cfg.seed, trainer.params(), &trainer.optimizer().state())?;
            }
        }
        history.push(rec);
    }
    if history.len() != end - first {
        return Err(Error::Config("batch loader stopped early".into()));
    }
    Ok(history)
}

/// Restores a trainer's replicas from a checkpoint.
pub fn restore<T: Real, O: Optimizer<T>>(
    mesh: &DeviceMesh,
    graph: Arc<LayerGraph>,
    ckpt: Checkpoint<T>,
    mut opt: O,
    loss: LossConfig,
) -> Result<Trainer<'_, T, O>> {
    opt.load_state(ckpt.optimizer)?;
    Trainer::new(mesh, graph, ckpt.params, opt, loss, ckpt.step)
}
