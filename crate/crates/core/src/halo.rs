//! Halo exchange: before a windowed operator, every worker pads its block
//! with margins received from its mesh neighbours; global boundaries are
//! padded with zeros.
//!
//! Axes are exchanged one after another, each phase operating on the block
//! already grown by the previous phases, so edge and corner regions are
//! filled from diagonal neighbours without diagonal links. The backward pass
//! walks the axes in reverse, returning margin gradients to their owners and
//! accumulating them by addition; it is the exact adjoint of the forward
//! exchange.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{DeviceMesh, Dir, MeshShape, Worker};
use crate::sharded::{AxisBinding, DimKind, ShardLayout, ShardedTensor, TensorSpec};
use crate::tensor::{Element, Real, Tensor};

/// Per-dimension (lo, hi) margin widths, aligned with the tensor dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HaloSpec {
    margins: Vec<(usize, usize)>,
}

impl HaloSpec {
    /// No margins at all.
    pub fn none(ndim: usize) -> Self {
        HaloSpec {
            margins: vec![(0, 0); ndim],
        }
    }

    /// Explicit margins by dimension name. Only spatial dimensions may carry
    /// a margin.
    pub fn new<S: AsRef<str>>(spec: &TensorSpec, margins: &[(S, usize, usize)]) -> Result<Self> {
        let mut out = HaloSpec::none(spec.ndim());
        for (name, lo, hi) in margins {
            let name = name.as_ref();
            let d = spec
                .dim_index(name)
                .ok_or_else(|| Error::Config(format!("halo on unknown dimension `{name}`")))?;
            if spec.kind(d) != DimKind::Spatial && (*lo > 0 || *hi > 0) {
                return Err(Error::Config(format!(
                    "dimension `{name}` is not spatial and cannot carry a halo"
                )));
            }
            out.margins[d] = (*lo, *hi);
        }
        Ok(out)
    }

    /// Margins `(k - 1) / 2` on every spatial dimension, for an odd kernel
    /// of extent `k`.
    pub fn for_kernel(spec: &TensorSpec, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        let m = (k - 1) / 2;
        let mut out = HaloSpec::none(spec.ndim());
        for d in 0..spec.ndim() {
            if spec.kind(d) == DimKind::Spatial {
                out.margins[d] = (m, m);
            }
        }
        Ok(out)
    }

    pub fn margins(&self) -> &[(usize, usize)] {
        &self.margins
    }

    pub fn is_zero(&self) -> bool {
        self.margins.iter().all(|&(lo, hi)| lo == 0 && hi == 0)
    }

    pub fn padded_shape(&self, local: &[usize]) -> Vec<usize> {
        local
            .iter()
            .zip(&self.margins)
            .map(|(&e, &(lo, hi))| e + lo + hi)
            .collect()
    }

    /// Single-hop rule: no margin may exceed the local extent it reaches into.
    pub fn check_local(&self, spec: &TensorSpec, local: &[usize]) -> Result<()> {
        for (d, (&(lo, hi), &ext)) in self.margins.iter().zip(local).enumerate() {
            let m = lo.max(hi);
            if m > ext {
                return Err(Error::HaloTooWide {
                    dim: spec.dims()[d].0.clone(),
                    margin: m,
                    local_extent: ext,
                });
            }
        }
        Ok(())
    }
}

/// Where a padded face came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaceSource {
    Neighbor,
    ZeroBoundary,
    NoMargin,
}

/// A local block grown by its halo, with per-dimension `[lo, hi]` face
/// provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBlock<T> {
    pub data: Tensor<T>,
    pub faces: Vec<[FaceSource; 2]>,
}

fn neighbors(w: &Worker, binding: Option<AxisBinding>) -> (Option<usize>, Option<usize>) {
    match binding {
        Some(b) => (w.neighbor(b.axis, Dir::Lo), w.neighbor(b.axis, Dir::Hi)),
        None => (None, None),
    }
}

fn slab_shape(shape: &[usize], dim: usize, len: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[dim] = len;
    s
}

/// Worker-side forward exchange of one local block.
pub fn exchange_block<T: Element>(
    w: &mut Worker,
    block: &Tensor<T>,
    spec: &TensorSpec,
    bindings: &[Option<AxisBinding>],
    halo: &HaloSpec,
) -> Result<PaddedBlock<T>> {
    halo.check_local(spec, block.shape())?;
    let mut cur = block.clone();
    let mut faces = vec![[FaceSource::NoMargin; 2]; block.ndim()];
    for d in 0..block.ndim() {
        let (lo, hi) = halo.margins[d];
        if lo == 0 && hi == 0 {
            continue;
        }
        let ext = cur.shape()[d];
        let (lo_nb, hi_nb) = neighbors(w, bindings[d]);
        if let Some(b) = bindings[d] {
            if hi_nb.is_some() && lo > 0 {
                w.send_halo(b.axis, Dir::Hi, d, cur.slice_dim(d, ext - lo, lo).into_vec())?;
            }
            if lo_nb.is_some() && hi > 0 {
                w.send_halo(b.axis, Dir::Lo, d, cur.slice_dim(d, 0, hi).into_vec())?;
            }
        }
        let lo_pad = match (bindings[d], lo_nb) {
            (Some(b), Some(_)) if lo > 0 => {
                Tensor::from_vec(&slab_shape(cur.shape(), d, lo), w.recv_halo(b.axis, Dir::Lo, d)?)?
            }
            _ => Tensor::zeros(&slab_shape(cur.shape(), d, lo)),
        };
        let hi_pad = match (bindings[d], hi_nb) {
            (Some(b), Some(_)) if hi > 0 => {
                Tensor::from_vec(&slab_shape(cur.shape(), d, hi), w.recv_halo(b.axis, Dir::Hi, d)?)?
            }
            _ => Tensor::zeros(&slab_shape(cur.shape(), d, hi)),
        };
        let source = |margin: usize, nb: Option<usize>| match (margin, nb) {
            (0, _) => FaceSource::NoMargin,
            (_, Some(_)) => FaceSource::Neighbor,
            (_, None) => FaceSource::ZeroBoundary,
        };
        faces[d] = [source(lo, lo_nb), source(hi, hi_nb)];
        cur = Tensor::concat(&[&lo_pad, &cur, &hi_pad], d)?;
    }
    Ok(PaddedBlock { data: cur, faces })
}

/// Worker-side adjoint of [`exchange_block`]: margin gradients travel back
/// to the neighbour that supplied them and are added to its interior;
/// zero-boundary margins are dropped.
pub fn exchange_block_backward<T: Real>(
    w: &mut Worker,
    grad_padded: Tensor<T>,
    bindings: &[Option<AxisBinding>],
    halo: &HaloSpec,
) -> Result<Tensor<T>> {
    if grad_padded.ndim() != halo.margins.len() {
        return Err(Error::ShapeMismatch {
            what: "padded gradient rank".into(),
            expected: vec![halo.margins.len()],
            got: vec![grad_padded.ndim()],
        });
    }
    let mut g = grad_padded;
    for d in (0..g.ndim()).rev() {
        let (lo, hi) = halo.margins[d];
        if lo == 0 && hi == 0 {
            continue;
        }
        let ext_p = g.shape()[d];
        if ext_p < lo + hi + 1 {
            return Err(Error::ShapeMismatch {
                what: format!("padded gradient extent on dim {d}"),
                expected: vec![lo + hi + 1],
                got: vec![ext_p],
            });
        }
        let ext = ext_p - lo - hi;
        let (lo_nb, hi_nb) = neighbors(w, bindings[d]);
        if let Some(b) = bindings[d] {
            if lo_nb.is_some() && lo > 0 {
                w.send_halo(b.axis, Dir::Lo, d, g.slice_dim(d, 0, lo).into_vec())?;
            }
            if hi_nb.is_some() && hi > 0 {
                w.send_halo(b.axis, Dir::Hi, d, g.slice_dim(d, ext_p - hi, hi).into_vec())?;
            }
        }
        let mut inner = g.slice_dim(d, lo, ext);
        if let Some(b) = bindings[d] {
            if hi_nb.is_some() && lo > 0 {
                let part = Tensor::from_vec(&slab_shape(inner.shape(), d, lo), w.recv_halo(b.axis, Dir::Hi, d)?)?;
                inner.add_slice_dim(d, ext - lo, &part);
            }
            if lo_nb.is_some() && hi > 0 {
                let part = Tensor::from_vec(&slab_shape(inner.shape(), d, hi), w.recv_halo(b.axis, Dir::Lo, d)?)?;
                inner.add_slice_dim(d, 0, &part);
            }
        }
        g = inner;
    }
    Ok(g)
}

/// Padded blocks for every worker, plus what is needed to undo the padding.
#[derive(Clone, Debug)]
pub struct PaddedShards<T> {
    pub layout: Arc<ShardLayout>,
    pub halo: HaloSpec,
    pub blocks: Vec<PaddedBlock<T>>,
}

/// Collective forward exchange of a sharded tensor.
pub fn halo_exchange<T: Element>(
    mesh: &DeviceMesh,
    x: &ShardedTensor<T>,
    halo: &HaloSpec,
) -> Result<PaddedShards<T>> {
    let layout = x.layout().clone();
    layout.check_mesh(mesh)?;
    halo.check_local(layout.spec(), layout.local_shape())?;
    let ctx = Arc::new((layout.clone(), halo.clone()));
    let blocks = mesh.run(x.blocks().to_vec(), move |w, block| {
        let (layout, halo) = &*ctx;
        exchange_block(w, &block, layout.spec(), layout.bindings(), halo)
    })?;
    Ok(PaddedShards {
        layout,
        halo: halo.clone(),
        blocks,
    })
}

/// Collective adjoint exchange; `grads.blocks[r].data` holds the gradient
/// with respect to worker `r`'s padded block.
pub fn halo_exchange_backward<T: Real>(mesh: &DeviceMesh, grads: PaddedShards<T>) -> Result<ShardedTensor<T>> {
    let layout = grads.layout.clone();
    layout.check_mesh(mesh)?;
    let padded = grads.halo.padded_shape(layout.local_shape());
    for b in &grads.blocks {
        if b.data.shape() != padded.as_slice() {
            return Err(Error::ShapeMismatch {
                what: "padded gradient".into(),
                expected: padded.clone(),
                got: b.data.shape().to_vec(),
            });
        }
    }
    let ctx = Arc::new((layout.clone(), grads.halo));
    let inputs = grads.blocks.into_iter().map(|b| b.data).collect();
    let blocks = mesh.run(inputs, move |w, g| {
        let (layout, halo) = &*ctx;
        exchange_block_backward(w, g, layout.bindings(), halo)
    })?;
    ShardedTensor::from_blocks(layout, blocks)
}

/// Bytes worker `rank` sends during one forward exchange, from geometry
/// alone: for each dimension in exchange order, margin width times the area
/// of the face (block already grown along earlier dimensions, including
/// batch and channels) times the element size, summed over faces that have
/// a neighbour. The backward exchange moves the same amount.
pub fn analytic_worker_bytes(
    local: &[usize],
    bindings: &[Option<AxisBinding>],
    mesh: &MeshShape,
    rank: usize,
    halo: &HaloSpec,
    elem_size: usize,
) -> u64 {
    let mut cur = local.to_vec();
    let mut bytes = 0usize;
    for d in 0..local.len() {
        let (lo, hi) = halo.margins[d];
        if lo == 0 && hi == 0 {
            continue;
        }
        let area: usize = cur
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != d)
            .map(|(_, &e)| e)
            .product();
        if let Some(b) = bindings[d] {
            if mesh.neighbor(rank, b.axis, Dir::Hi).is_some() {
                bytes += lo * area;
            }
            if mesh.neighbor(rank, b.axis, Dir::Lo).is_some() {
                bytes += hi * area;
            }
        }
        cur[d] += lo + hi;
    }
    (bytes * elem_size) as u64
}

/// [`analytic_worker_bytes`] summed over every worker.
pub fn analytic_exchange_bytes(layout: &ShardLayout, halo: &HaloSpec) -> u64 {
    let mesh = layout.mesh();
    (0..mesh.worker_count())
        .map(|r| {
            analytic_worker_bytes(
                layout.local_shape(),
                layout.bindings(),
                mesh,
                r,
                halo,
                layout.spec().dtype().size(),
            )
        })
        .sum()
}
