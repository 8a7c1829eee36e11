//! Distributed differentiable operators on `(batch, x, y, z, channels)`
//! volumes.
//!
//! Each operator exists at two levels. The worker-level functions
//! (`*_local`) run inside a [`DeviceMesh::run`] job on one block and perform
//! whatever halo traffic they need through the [`Worker`]; the network
//! executor calls these directly. The driver-level functions wrap them as
//! collectives over a [`ShardedTensor`] and keep backward state in an
//! [`OpTape`].

pub mod kernels;

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::halo::{exchange_block, exchange_block_backward, HaloSpec};
use crate::mesh::{DeviceMesh, Worker};
use crate::sharded::{AxisBinding, ShardLayout, ShardedTensor, TensorSpec};
use crate::tensor::{DType, Element, Real, Tensor};

/// Weights `[k, k, k, c_in, c_out]` and bias `[c_out]` of a stride-1 SAME
/// convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (_, _, co) = kernels::kernel_dims(&weight)?;
        if bias.shape() != [co] {
            return Err(Error::ShapeMismatch {
                what: "conv bias".into(),
                expected: vec![co],
                got: bias.shape().to_vec(),
            });
        }
        if weight.data().iter().chain(bias.data()).any(|v| !v.is_finite()) {
            return Err(Error::Config("convolution parameters must be finite".into()));
        }
        Ok(ConvParams { weight, bias })
    }

    pub fn zeros(k: usize, c_in: usize, c_out: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[k, k, k, c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[4]
    }

    pub fn margin(&self) -> usize {
        (self.k() - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Multiply-adds of a convolution counted as two flops each.
pub fn conv_flops(k: usize, c_in: usize, c_out: usize, out_voxels: usize) -> u64 {
    2 * (k * k * k * c_in * c_out * out_voxels) as u64
}

/// Names-only spec for a local volume block, used for diagnostics.
pub(crate) fn block_spec(shape: &[usize]) -> TensorSpec {
    let s = |i: usize| shape.get(i).copied().unwrap_or(1).max(1);
    TensorSpec::volume(s(0), [s(1), s(2), s(3)], s(4), DType::F32).expect("positive extents")
}

fn check_volume(shape: &[usize], what: &str) -> Result<()> {
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch {
            what: format!("{what}: expected (batch, x, y, z, channels)"),
            expected: vec![0; 5],
            got: shape.to_vec(),
        });
    }
    Ok(())
}

/// Halo-exchanged convolution of one local block. Returns the output block
/// and the padded input, which the backward pass needs.
pub fn conv3d_local<T: Real>(
    w: &mut Worker,
    x: &Tensor<T>,
    bindings: &[Option<AxisBinding>],
    p: &ConvParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_volume(x.shape(), "conv3d input")?;
    if x.shape()[4] != p.c_in() {
        return Err(Error::ChannelMismatch {
            what: "conv3d input".into(),
            expected: p.c_in(),
            got: x.shape()[4],
        });
    }
    let spec = block_spec(x.shape());
    let halo = HaloSpec::for_kernel(&spec, p.k())?;
    let padded = exchange_block(w, x, &spec, bindings, &halo)?.data;
    let out = kernels::conv3d_valid(&padded, &p.weight, p.bias.data())?;
    Ok((out, padded))
}

/// Backward of [`conv3d_local`]. Weight and bias gradients are this
/// worker's partial sums; reducing them over the mesh is the caller's job.
pub fn conv3d_local_backward<T: Real>(
    w: &mut Worker,
    grad_out: &Tensor<T>,
    padded: &Tensor<T>,
    bindings: &[Option<AxisBinding>],
    p: &ConvParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (gpad, gw, gb) = kernels::conv3d_valid_backward(padded, &p.weight, grad_out)?;
    let halo = HaloSpec::for_kernel(&block_spec(padded.shape()), p.k())?;
    let gx = exchange_block_backward(w, gpad, bindings, &halo)?;
    Ok((gx, gw, gb))
}

/// Saved forward state of a driver-level op, one item per worker.
#[derive(Clone, Debug)]
pub enum TapeEntry<T> {
    Conv { padded: Vec<Tensor<T>>, params: ConvParams<T> },
    Pool { argmax: Vec<Vec<u8>>, input: Arc<ShardLayout> },
    Relu { out: Vec<Tensor<T>> },
}

/// Named forward state; every entry is handed out at most once.
#[derive(Clone, Debug, Default)]
pub struct OpTape<T> {
    entries: HashMap<String, TapeEntry<T>>,
}

impl<T> OpTape<T> {
    pub fn new() -> Self {
        OpTape {
            entries: HashMap::new(),
        }
    }

    pub fn record(&mut self, name: &str, entry: TapeEntry<T>) -> Result<()> {
        if self.entries.insert(name.to_string(), entry).is_some() {
            return Err(Error::Config(format!("tape entry `{name}` recorded twice")));
        }
        Ok(())
    }

    pub fn take(&mut self, name: &str) -> Result<TapeEntry<T>> {
        self.entries
            .remove(name)
            .ok_or_else(|| Error::MissingTape(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gradients of a distributed convolution. Kernel and bias gradients are
/// summed over every mesh axis.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub grad_x: ShardedTensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn relayout(x: &ShardLayout, spec: &TensorSpec) -> Result<Arc<ShardLayout>> {
    Ok(Arc::new(x.with_spec(spec)?))
}

fn map_blocks<T, U, F>(mesh: &DeviceMesh, x: &ShardedTensor<T>, out: Arc<ShardLayout>, f: F) -> Result<ShardedTensor<U>>
where
    T: Element,
    U: Element,
    F: Fn(Tensor<T>) -> Result<Tensor<U>> + Send + Sync + 'static,
{
    x.layout().check_mesh(mesh)?;
    let blocks = mesh.run(x.blocks().to_vec(), move |_, b| f(b))?;
    ShardedTensor::from_blocks(out, blocks)
}

/// Distributed SAME convolution. The gathered output is bitwise equal to a
/// single-device direct convolution of the gathered input.
pub fn conv3d_forward<T: Real>(
    mesh: &DeviceMesh,
    x: &ShardedTensor<T>,
    p: &ConvParams<T>,
    tape: &mut OpTape<T>,
    name: &str,
) -> Result<ShardedTensor<T>> {
    x.layout().check_mesh(mesh)?;
    let spec = x.spec();
    check_volume(&spec.extents(), "conv3d input")?;
    if spec.extents()[4] != p.c_in() {
        return Err(Error::ChannelMismatch {
            what: "conv3d input".into(),
            expected: p.c_in(),
            got: spec.extents()[4],
        });
    }
    HaloSpec::for_kernel(spec, p.k())?.check_local(spec, x.layout().local_shape())?;
    let out_layout = relayout(x.layout(), &spec.with_extent(4, p.c_out()))?;
    let ctx = Arc::new((x.layout().bindings().to_vec(), p.clone()));
    let results = mesh.run(x.blocks().to_vec(), move |w, block| {
        let (bindings, p) = &*ctx;
        conv3d_local(w, &block, bindings, p)
    })?;
    let (outs, padded): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    tape.record(
        name,
        TapeEntry::Conv {
            padded,
            params: p.clone(),
        },
    )?;
    ShardedTensor::from_blocks(out_layout, outs)
}

/// Adjoint of [`conv3d_forward`].
pub fn conv3d_backward<T: Real>(
    mesh: &DeviceMesh,
    grad_out: &ShardedTensor<T>,
    tape: &mut OpTape<T>,
    name: &str,
) -> Result<ConvGrads<T>> {
    grad_out.layout().check_mesh(mesh)?;
    let TapeEntry::Conv { padded, params } = tape.take(name)? else {
        return Err(Error::MissingTape(format!("{name} (not a convolution)")));
    };
    let in_spec = grad_out.spec().with_extent(4, params.c_in());
    let in_layout = relayout(grad_out.layout(), &in_spec)?;
    let ctx = Arc::new((grad_out.layout().bindings().to_vec(), params));
    let inputs: Vec<_> = grad_out.blocks().iter().cloned().zip(padded).collect();
    let results = mesh.run(inputs, move |w, (g, pad)| {
        let (bindings, p) = &*ctx;
        let (gx, mut gw, mut gb) = conv3d_local_backward(w, &g, &pad, bindings, p)?;
        w.all_reduce_sum_all(gw.data_mut())?;
        w.all_reduce_sum_all(gb.data_mut())?;
        Ok((gx, gw, gb))
    })?;
    let mut grad_weight = None;
    let mut grad_bias = None;
    let mut gxs = Vec::with_capacity(results.len());
    for (gx, gw, gb) in results {
        gxs.push(gx);
        grad_weight.get_or_insert(gw);
        grad_bias.get_or_insert(gb);
    }
    Ok(ConvGrads {
        grad_x: ShardedTensor::from_blocks(in_layout, gxs)?,
        grad_weight: grad_weight.expect("at least one worker"),
        grad_bias: grad_bias.expect("at least one worker"),
    })
}

fn pooled_spec(spec: &TensorSpec) -> TensorSpec {
    let mut s = spec.clone();
    for d in 1..4 {
        s = s.with_extent(d, spec.extents()[d] / 2);
    }
    s
}

/// Shard-local 2x2x2 max-pool. Every local spatial extent must be even.
pub fn maxpool2_forward<T: Real>(
    mesh: &DeviceMesh,
    x: &ShardedTensor<T>,
    tape: &mut OpTape<T>,
    name: &str,
) -> Result<ShardedTensor<T>> {
    x.layout().check_mesh(mesh)?;
    let local = x.layout().local_shape();
    check_volume(local, "maxpool input")?;
    if local[1..4].iter().any(|e| e % 2 != 0) {
        return Err(Error::Config(format!(
            "max-pool needs even local extents, got {:?}",
            &local[1..4]
        )));
    }
    let out_layout = relayout(x.layout(), &pooled_spec(x.spec()))?;
    let results = mesh.run(x.blocks().to_vec(), |_, b| kernels::maxpool2(&b))?;
    let (outs, argmax): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    tape.record(
        name,
        TapeEntry::Pool {
            argmax,
            input: x.layout().clone(),
        },
    )?;
    ShardedTensor::from_blocks(out_layout, outs)
}

pub fn maxpool2_backward<T: Real>(
    mesh: &DeviceMesh,
    grad: &ShardedTensor<T>,
    tape: &mut OpTape<T>,
    name: &str,
) -> Result<ShardedTensor<T>> {
    grad.layout().check_mesh(mesh)?;
    let TapeEntry::Pool { argmax, input } = tape.take(name)? else {
        return Err(Error::MissingTape(format!("{name} (not a max-pool)")));
    };
    let in_shape = input.local_shape().to_vec();
    let inputs: Vec<_> = grad.blocks().iter().cloned().zip(argmax).collect();
    let blocks = mesh.run(inputs, move |_, (g, a)| kernels::maxpool2_backward(&g, &a, &in_shape))?;
    ShardedTensor::from_blocks(input, blocks)
}

/// Shard-local nearest-neighbour x2 upsampling.
pub fn upsample2_forward<T: Real>(mesh: &DeviceMesh, x: &ShardedTensor<T>) -> Result<ShardedTensor<T>> {
    check_volume(&x.spec().extents(), "upsample input")?;
    let mut spec = x.spec().clone();
    for d in 1..4 {
        spec = spec.with_extent(d, 2 * x.spec().extents()[d]);
    }
    let out = relayout(x.layout(), &spec)?;
    map_blocks(mesh, x, out, |b| kernels::upsample2(&b))
}

pub fn upsample2_backward<T: Real>(mesh: &DeviceMesh, grad: &ShardedTensor<T>) -> Result<ShardedTensor<T>> {
    check_volume(&grad.spec().extents(), "upsample gradient")?;
    let out = relayout(grad.layout(), &pooled_spec(grad.spec()))?;
    map_blocks(mesh, grad, out, |b| kernels::upsample2_backward(&b))
}

/// Channel concatenation `[a, b]`; both must share layout and spatial shape.
pub fn concat_channels<T: Real>(
    mesh: &DeviceMesh,
    a: &ShardedTensor<T>,
    b: &ShardedTensor<T>,
) -> Result<ShardedTensor<T>> {
    let (ea, eb) = (a.spec().extents(), b.spec().extents());
    check_volume(&ea, "concat input")?;
    if ea.len() != eb.len() || ea[..4] != eb[..4] || a.layout().layout() != b.layout().layout() {
        return Err(Error::ShapeMismatch {
            what: "concat_channels operands (layout or spatial shape)".into(),
            expected: ea,
            got: eb,
        });
    }
    a.layout().check_mesh(mesh)?;
    let out = relayout(a.layout(), &a.spec().with_extent(4, ea[4] + eb[4]))?;
    let inputs: Vec<_> = a.blocks().iter().cloned().zip(b.blocks().iter().cloned()).collect();
    let blocks = mesh.run(inputs, |_, (x, y)| Tensor::concat(&[&x, &y], 4))?;
    ShardedTensor::from_blocks(out, blocks)
}

/// Splits a concatenated gradient back into its `a` and `b` parts.
pub fn concat_channels_backward<T: Real>(
    mesh: &DeviceMesh,
    grad: &ShardedTensor<T>,
    a_channels: usize,
) -> Result<(ShardedTensor<T>, ShardedTensor<T>)> {
    let c = grad.spec().extents()[4];
    if a_channels > c {
        return Err(Error::ChannelMismatch {
            what: "concat backward split".into(),
            expected: c,
            got: a_channels,
        });
    }
    let la = relayout(grad.layout(), &grad.spec().with_extent(4, a_channels))?;
    let lb = relayout(grad.layout(), &grad.spec().with_extent(4, c - a_channels))?;
    let parts = mesh.run(grad.blocks().to_vec(), move |_, g| Ok(kernels::split_channels(&g, a_channels)))?;
    let (pa, pb): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok((ShardedTensor::from_blocks(la, pa)?, ShardedTensor::from_blocks(lb, pb)?))
}

pub fn relu<T: Real>(
    mesh: &DeviceMesh,
    x: &ShardedTensor<T>,
    tape: &mut OpTape<T>,
    name: &str,
) -> Result<ShardedTensor<T>> {
    let y = map_blocks(mesh, x, x.layout().clone(), |b| Ok(kernels::relu(&b)))?;
    tape.record(
        name,
        TapeEntry::Relu {
            out: y.blocks().to_vec(),
        },
    )?;
    Ok(y)
}

pub fn relu_backward<T: Real>(
    mesh: &DeviceMesh,
    grad: &ShardedTensor<T>,
    tape: &mut OpTape<T>,
    name: &str,
) -> Result<ShardedTensor<T>> {
    let TapeEntry::Relu { out } = tape.take(name)? else {
        return Err(Error::MissingTape(format!("{name} (not a relu)")));
    };
    grad.layout().check_mesh(mesh)?;
    let inputs: Vec<_> = grad.blocks().iter().cloned().zip(out).collect();
    let blocks = mesh.run(inputs, |_, (g, y)| Ok(kernels::relu_backward(&g, &y)))?;
    ShardedTensor::from_blocks(grad.layout().clone(), blocks)
}

/// Per-voxel softmax over channels.
pub fn softmax_channels<T: Real>(mesh: &DeviceMesh, x: &ShardedTensor<T>) -> Result<ShardedTensor<T>> {
    map_blocks(mesh, x, x.layout().clone(), |b| Ok(kernels::softmax_channels(&b)))
}
