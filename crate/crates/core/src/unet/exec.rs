//! Worker-side execution of a [`LayerGraph`] on one local block.

use cpu_time::ThreadTime;

use super::{LayerGraph, NodeOp, ParamStore};
use crate::error::{Error, Result};
use crate::halo::{exchange_block, exchange_block_backward, HaloSpec};
use crate::mesh::Worker;
use crate::ops::{block_spec, kernels};
use crate::tensor::{Real, Tensor};

/// Bench phases, in report order.
pub const PHASES: [&str; 7] = ["shard", "gather", "halo", "conv_fwd", "conv_bwd", "collective", "other"];

pub(crate) const SHARD: usize = 0;
pub(crate) const GATHER: usize = 1;
pub(crate) const HALO: usize = 2;
pub(crate) const CONV_FWD: usize = 3;
pub(crate) const CONV_BWD: usize = 4;
pub(crate) const COLLECTIVE: usize = 5;
pub(crate) const OTHER: usize = 6;

/// Thread CPU time (ns) and bytes moved per phase. CPU time rather than
/// wall time keeps blocking waits and time slicing between simulated
/// workers out of the phase totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseTimes {
    pub ns: [u64; 7],
    pub bytes: [u64; 7],
}

/// Per-layer phase times. Rows follow the graph's nodes, followed by
/// `loss`, `optimizer` and `driver` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Profile {
    pub rows: Vec<(String, PhaseTimes)>,
}

impl Profile {
    pub fn for_graph(graph: &LayerGraph) -> Self {
        let mut rows: Vec<(String, PhaseTimes)> = graph
            .nodes()
            .iter()
            .map(|n| (n.id.clone(), PhaseTimes::default()))
            .collect();
        for extra in ["loss", "optimizer", "driver"] {
            rows.push((extra.to_string(), PhaseTimes::default()));
        }
        Profile { rows }
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.rows.iter().position(|(r, _)| r == id)
    }

    pub(crate) fn add(&mut self, row: usize, phase: usize, since: ThreadTime, bytes: u64) {
        if let Some((_, t)) = self.rows.get_mut(row) {
            t.ns[phase] += since.elapsed().as_nanos() as u64;
            t.bytes[phase] += bytes;
        }
    }

    pub(crate) fn add_named(&mut self, row: &str, phase: usize, since: ThreadTime, bytes: u64) {
        if let Some(i) = self.row_index(row) {
            self.add(i, phase, since, bytes);
        }
    }

    /// Combines worker profiles: times and bytes add up across workers.
    pub fn merge_workers(&mut self, other: &Profile) {
        if self.rows.is_empty() {
            self.rows = other.rows.clone();
            return;
        }
        for ((_, a), (_, b)) in self.rows.iter_mut().zip(&other.rows) {
            for p in 0..PHASES.len() {
                a.ns[p] += b.ns[p];
                a.bytes[p] += b.bytes[p];
            }
        }
    }

    /// Sums another profile (e.g. a later step) into this one.
    pub fn accumulate(&mut self, other: &Profile) {
        if self.rows.is_empty() {
            self.rows = other.rows.clone();
            return;
        }
        for ((_, a), (_, b)) in self.rows.iter_mut().zip(&other.rows) {
            for p in 0..PHASES.len() {
                a.ns[p] += b.ns[p];
                a.bytes[p] += b.bytes[p];
            }
        }
    }

    pub fn phase_totals(&self) -> PhaseTimes {
        let mut t = PhaseTimes::default();
        for (_, r) in &self.rows {
            for p in 0..PHASES.len() {
                t.ns[p] += r.ns[p];
                t.bytes[p] += r.bytes[p];
            }
        }
        t
    }
}

#[derive(Debug)]
enum Saved<T> {
    Conv { padded: Tensor<T>, out: Option<Tensor<T>> },
    Pool { argmax: Vec<u8>, in_shape: Vec<usize> },
    Concat { a_channels: usize },
    Plain,
}

/// Forward state of one worker, one slot per graph node.
#[derive(Debug)]
pub struct LocalTape<T> {
    slots: Vec<Option<Saved<T>>>,
}

impl<T> LocalTape<T> {
    fn take(&mut self, i: usize, id: &str) -> Result<Saved<T>> {
        self.slots
            .get_mut(i)
            .and_then(Option::take)
            .ok_or_else(|| Error::MissingTape(id.to_string()))
    }
}

fn last_uses(graph: &LayerGraph) -> Vec<usize> {
    let mut last = vec![0; graph.nodes().len()];
    for (i, n) in graph.nodes().iter().enumerate() {
        for &j in &n.inputs {
            last[j] = i;
        }
    }
    last
}

/// Runs the network on this worker's input block and returns the logits
/// block together with the tape for [`backward_local`].
pub fn forward_local<T: Real>(
    graph: &LayerGraph,
    params: &ParamStore<T>,
    w: &mut Worker,
    x: Tensor<T>,
    prof: &mut Profile,
) -> Result<(Tensor<T>, LocalTape<T>)> {
    let nodes = graph.nodes();
    let last = last_uses(graph);
    let mut acts: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    let mut slots: Vec<Option<Saved<T>>> = (0..nodes.len()).map(|_| None).collect();
    let bindings = graph.bindings();
    for (i, node) in nodes.iter().enumerate() {
        let input = |k: usize| acts[node.inputs[k]].as_ref().expect("inputs precede consumers");
        let (out, saved) = match &node.op {
            NodeOp::Input => {
                if x.shape().len() != 5 || x.shape()[4] != node.channels {
                    return Err(Error::ChannelMismatch {
                        what: "network input".into(),
                        expected: node.channels,
                        got: x.shape().last().copied().unwrap_or(0),
                    });
                }
                (x.clone(), Saved::Plain)
            }
            NodeOp::Conv { param, relu } => {
                let p = &params.convs()[*param];
                let xin = input(0);
                let spec = block_spec(xin.shape());
                let halo = HaloSpec::for_kernel(&spec, p.k())?;
                let t = ThreadTime::now();
                let before = w.stats().halo_bytes;
                let padded = exchange_block(w, xin, &spec, bindings, &halo)?.data;
                prof.add(i, HALO, t, w.stats().halo_bytes - before);
                let t = ThreadTime::now();
                let mut out = kernels::conv3d_valid(&padded, &p.weight, p.bias.data())?;
                if *relu {
                    out = kernels::relu(&out);
                }
                prof.add(i, CONV_FWD, t, 0);
                let saved_out = relu.then(|| out.clone());
                (out, Saved::Conv { padded, out: saved_out })
            }
            NodeOp::MaxPool => {
                let t = ThreadTime::now();
                let xin = input(0);
                let (out, argmax) = kernels::maxpool2(xin)?;
                prof.add(i, OTHER, t, 0);
                (
                    out,
                    Saved::Pool {
                        argmax,
                        in_shape: xin.shape().to_vec(),
                    },
                )
            }
            NodeOp::Upsample => {
                let t = ThreadTime::now();
                let out = kernels::upsample2(input(0))?;
                prof.add(i, OTHER, t, 0);
                (out, Saved::Plain)
            }
            NodeOp::Concat => {
                let t = ThreadTime::now();
                let (a, b) = (input(0), input(1));
                let out = Tensor::concat(&[a, b], 4)?;
                prof.add(i, OTHER, t, 0);
                (
                    out,
                    Saved::Concat {
                        a_channels: a.shape()[4],
                    },
                )
            }
        };
        acts[i] = Some(out);
        slots[i] = Some(saved);
        for &j in &node.inputs {
            if last[j] == i {
                acts[j] = None;
            }
        }
    }
    let logits = acts[graph.output()].take().expect("output computed");
    Ok((logits, LocalTape { slots }))
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Backward pass on this worker. Returns this worker's partial parameter
/// gradients (not yet reduced over the mesh) and the gradient with respect
/// to its input block.
pub fn backward_local<T: Real>(
    graph: &LayerGraph,
    params: &ParamStore<T>,
    w: &mut Worker,
    mut tape: LocalTape<T>,
    grad_logits: Tensor<T>,
    prof: &mut Profile,
) -> Result<(ParamStore<T>, Tensor<T>)> {
    let nodes = graph.nodes();
    let bindings = graph.bindings();
    let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    let mut pgrads = ParamStore::zeros(graph.convs());
    grads[graph.output()] = Some(grad_logits);
    for (i, node) in nodes.iter().enumerate().rev() {
        let saved = tape.take(i, &node.id)?;
        if let NodeOp::Input = node.op {
            let g = grads[i].take().ok_or_else(|| Error::MissingTape(node.id.clone()))?;
            return Ok((pgrads, g));
        }
        let g = grads[i].take().ok_or_else(|| Error::MissingTape(format!("{} (gradient)", node.id)))?;
        match (&node.op, saved) {
            (NodeOp::Conv { param, .. }, Saved::Conv { padded, out }) => {
                let p = &params.convs()[*param];
                let t = ThreadTime::now();
                let g = match out {
                    Some(y) => kernels::relu_backward(&g, &y),
                    None => g,
                };
                let (gpad, gw, gb) = kernels::conv3d_valid_backward(&padded, &p.weight, &g)?;
                drop(padded);
                prof.add(i, CONV_BWD, t, 0);
                let t = ThreadTime::now();
                let before = w.stats().halo_bytes;
                let halo = HaloSpec::for_kernel(&block_spec(gpad.shape()), p.k())?;
                let gx = exchange_block_backward(w, gpad, bindings, &halo)?;
                prof.add(i, HALO, t, w.stats().halo_bytes - before);
                let dst = &mut pgrads.convs_mut()[*param];
                dst.weight = gw;
                dst.bias = gb;
                accumulate(&mut grads[node.inputs[0]], gx);
            }
            (NodeOp::MaxPool, Saved::Pool { argmax, in_shape }) => {
                let t = ThreadTime::now();
                let gx = kernels::maxpool2_backward(&g, &argmax, &in_shape)?;
                prof.add(i, OTHER, t, 0);
                accumulate(&mut grads[node.inputs[0]], gx);
            }
            (NodeOp::Upsample, Saved::Plain) => {
                let t = ThreadTime::now();
                let gx = kernels::upsample2_backward(&g)?;
                prof.add(i, OTHER, t, 0);
                accumulate(&mut grads[node.inputs[0]], gx);
            }
            (NodeOp::Concat, Saved::Concat { a_channels }) => {
                let t = ThreadTime::now();
                let (ga, gb) = kernels::split_channels(&g, a_channels);
                prof.add(i, OTHER, t, 0);
                accumulate(&mut grads[node.inputs[0]], ga);
                accumulate(&mut grads[node.inputs[1]], gb);
            }
            _ => return Err(Error::MissingTape(format!("{} (tape kind mismatch)", node.id))),
        }
    }
    Err(Error::Config("graph has no input node".into()))
}

/// Sums parameter gradients over the data axes of the mesh in place.
pub(crate) fn reduce_grads<T: Real>(
    graph: &LayerGraph,
    w: &mut Worker,
    grads: &mut ParamStore<T>,
    prof: &mut Profile,
) -> Result<()> {
    let t = ThreadTime::now();
    let before = w.stats().collective_bytes;
    let mut flat = grads.flatten();
    w.all_reduce_sum(&mut flat, graph.data_axes())?;
    grads.assign_flat(&flat)?;
    prof.add_named("optimizer", COLLECTIVE, t, w.stats().collective_bytes - before);
    Ok(())
}
