//! Global tensors realised as equal-shaped local blocks, one per worker.

use std::sync::Arc;

use crate::error::{Error, MeshError, Result};
use crate::mesh::{DeviceMesh, Layout, MeshShape};
use crate::tensor::{DType, Element, Tensor};

pub const BATCH: &str = "batch";
pub const CHANNELS: &str = "channels";
pub const SPATIAL: [&str; 3] = ["dimx", "dimy", "dimz"];

/// Role of a tensor dimension. Only spatial dimensions ever carry halos.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimKind {
    Batch,
    Spatial,
    Channel,
}

/// Named dimensions and element type of a global tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    dims: Vec<(String, usize)>,
    dtype: DType,
}

impl TensorSpec {
    pub fn new<S: AsRef<str>>(dims: &[(S, usize)], dtype: DType) -> Result<Self> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, extent) in dims {
            let name = name.as_ref();
            if *extent == 0 {
                return Err(Error::Config(format!("dimension `{name}` has extent 0")));
            }
            if out.iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("dimension `{name}` listed twice")));
            }
            out.push((name.to_string(), *extent));
        }
        Ok(TensorSpec { dims: out, dtype })
    }

    /// `(batch, dimx, dimy, dimz, channels)` volume.
    pub fn volume(batch: usize, spatial: [usize; 3], channels: usize, dtype: DType) -> Result<Self> {
        TensorSpec::new(
            &[
                (BATCH, batch),
                (SPATIAL[0], spatial[0]),
                (SPATIAL[1], spatial[1]),
                (SPATIAL[2], spatial[2]),
                (CHANNELS, channels),
            ],
            dtype,
        )
    }

    pub fn dims(&self) -> &[(String, usize)] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.dims.iter().map(|(_, e)| *e).collect()
    }

    pub fn dim_index(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|(n, _)| n == name)
    }

    pub fn kind(&self, dim: usize) -> DimKind {
        match self.dims[dim].0.as_str() {
            BATCH => DimKind::Batch,
            CHANNELS => DimKind::Channel,
            _ => DimKind::Spatial,
        }
    }

    pub fn with_extent(&self, dim: usize, extent: usize) -> TensorSpec {
        let mut s = self.clone();
        s.dims[dim].1 = extent;
        s
    }

    pub fn with_dtype(&self, dtype: DType) -> TensorSpec {
        TensorSpec {
            dims: self.dims.clone(),
            dtype,
        }
    }
}

/// A tensor dimension bound to a mesh axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisBinding {
    pub axis: usize,
    pub size: usize,
}

/// A [`Layout`] checked against a tensor spec and a mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardLayout {
    spec: TensorSpec,
    layout: Layout,
    mesh: Arc<MeshShape>,
    bindings: Vec<Option<AxisBinding>>,
    local: Vec<usize>,
}

impl ShardLayout {
    pub fn resolve(spec: &TensorSpec, layout: &Layout, mesh: Arc<MeshShape>) -> Result<Self> {
        let mut bindings = vec![None; spec.ndim()];
        for (dim, axis) in layout.assignments() {
            // Layouts may name dimensions this tensor lacks (e.g. a label
            // volume without channels); those entries are ignored.
            let Some(d) = spec.dim_index(dim) else { continue };
            if spec.kind(d) == DimKind::Channel {
                return Err(Error::Layout(format!("channel dimension `{dim}` cannot be split")));
            }
            let a = mesh
                .axis_index(axis)
                .ok_or_else(|| MeshError::UnknownAxis(axis.clone()))?;
            let size = mesh.axis_size(a);
            let extent = spec.dims[d].1;
            if extent % size != 0 {
                return Err(Error::Indivisible {
                    dim: dim.clone(),
                    extent,
                    axis: axis.clone(),
                    axis_size: size,
                });
            }
            bindings[d] = Some(AxisBinding { axis: a, size });
        }
        let local = spec
            .extents()
            .iter()
            .zip(&bindings)
            .map(|(&e, b)| b.map_or(e, |b| e / b.size))
            .collect();
        Ok(ShardLayout {
            spec: spec.clone(),
            layout: layout.clone(),
            mesh,
            bindings,
            local,
        })
    }

    /// Same layout applied to a tensor of a different shape.
    pub fn with_spec(&self, spec: &TensorSpec) -> Result<ShardLayout> {
        ShardLayout::resolve(spec, &self.layout, self.mesh.clone())
    }

    pub fn spec(&self) -> &TensorSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn mesh(&self) -> &MeshShape {
        &self.mesh
    }

    pub fn bindings(&self) -> &[Option<AxisBinding>] {
        &self.bindings
    }

    pub fn local_shape(&self) -> &[usize] {
        &self.local
    }

    /// Global start index of `rank`'s block.
    pub fn block_offset(&self, rank: usize) -> Vec<usize> {
        let coord = self.mesh.coord_of(rank);
        self.bindings
            .iter()
            .zip(&self.local)
            .map(|(b, &l)| b.map_or(0, |b| coord[b.axis] * l))
            .collect()
    }

    /// Whether `rank` holds the canonical copy of its block (coordinate 0 on
    /// every mesh axis the layout leaves unused).
    pub fn is_primary(&self, rank: usize) -> bool {
        let coord = self.mesh.coord_of(rank);
        (0..self.mesh.ndim())
            .filter(|a| !self.bindings.iter().flatten().any(|b| b.axis == *a))
            .all(|a| coord[a] == 0)
    }

    pub fn check_mesh(&self, mesh: &DeviceMesh) -> Result<()> {
        if *mesh.shape() != *self.mesh {
            return Err(Error::Layout(format!(
                "tensor is laid out over mesh {} but was handed mesh {}",
                self.mesh,
                mesh.shape()
            )));
        }
        Ok(())
    }
}

/// A global tensor stored as one local block per worker, indexed by rank.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardedTensor<T> {
    layout: Arc<ShardLayout>,
    blocks: Vec<Tensor<T>>,
}

impl<T: Element> ShardedTensor<T> {
    pub fn from_blocks(layout: Arc<ShardLayout>, blocks: Vec<Tensor<T>>) -> Result<Self> {
        if T::DTYPE != layout.spec.dtype {
            return Err(Error::Config(format!(
                "blocks are {} but the tensor spec says {}",
                T::DTYPE.name(),
                layout.spec.dtype.name()
            )));
        }
        if blocks.len() != layout.mesh.worker_count() {
            return Err(MeshError::InputCount {
                expected: layout.mesh.worker_count(),
                got: blocks.len(),
            }
            .into());
        }
        for b in &blocks {
            if b.shape() != layout.local_shape() {
                return Err(Error::ShapeMismatch {
                    what: "local block".into(),
                    expected: layout.local_shape().to_vec(),
                    got: b.shape().to_vec(),
                });
            }
        }
        Ok(ShardedTensor { layout, blocks })
    }

    pub fn zeros(layout: Arc<ShardLayout>) -> Self {
        let blocks = (0..layout.mesh.worker_count())
            .map(|_| Tensor::zeros(layout.local_shape()))
            .collect();
        ShardedTensor { layout, blocks }
    }

    pub fn layout(&self) -> &Arc<ShardLayout> {
        &self.layout
    }

    pub fn spec(&self) -> &TensorSpec {
        &self.layout.spec
    }

    pub fn blocks(&self) -> &[Tensor<T>] {
        &self.blocks
    }

    pub fn block(&self, rank: usize) -> &Tensor<T> {
        &self.blocks[rank]
    }

    pub fn into_blocks(self) -> Vec<Tensor<T>> {
        self.blocks
    }
}

/// Splits `global` into per-worker blocks according to `layout`.
pub fn shard<T: Element>(
    global: &Tensor<T>,
    spec: &TensorSpec,
    layout: &Layout,
    mesh: &DeviceMesh,
) -> Result<ShardedTensor<T>> {
    if global.shape() != spec.extents().as_slice() {
        return Err(Error::ShapeMismatch {
            what: "shard input".into(),
            expected: spec.extents(),
            got: global.shape().to_vec(),
        });
    }
    let sl = Arc::new(ShardLayout::resolve(spec, layout, mesh.shape_arc())?);
    let mut bytes = 0u64;
    let blocks: Vec<Tensor<T>> = (0..mesh.worker_count())
        .map(|rank| {
            let b = global.sub_box(&sl.block_offset(rank), sl.local_shape());
            bytes += b.byte_len() as u64;
            b
        })
        .collect();
    mesh.record_partition_bytes(bytes);
    ShardedTensor::from_blocks(sl, blocks)
}

/// Reassembles the global tensor from the primary copy of every block.
pub fn gather<T: Element>(mesh: &DeviceMesh, x: &ShardedTensor<T>) -> Result<Tensor<T>> {
    x.layout.check_mesh(mesh)?;
    let mut out = Tensor::zeros(&x.spec().extents());
    let mut bytes = 0u64;
    for (rank, block) in x.blocks.iter().enumerate() {
        if x.layout.is_primary(rank) {
            out.write_box(&x.layout.block_offset(rank), block);
            bytes += block.byte_len() as u64;
        }
    }
    mesh.record_partition_bytes(bytes);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::create_mesh;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn even_split_of_a_line() {
        let mesh = create_mesh(&[("a", 2)]).unwrap();
        let spec = TensorSpec::new(&[("x", 8)], DType::F32).unwrap();
        let t = Tensor::from_vec(&[8], (0..8).map(|v| v as f32).collect()).unwrap();
        let s = shard(&t, &spec, &Layout::new(&[("x", "a")]).unwrap(), &mesh).unwrap();
        assert_eq!(s.block(0).data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(s.block(1).data(), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn indivisible_extent_names_everything() {
        let mesh = create_mesh(&[("a", 3)]).unwrap();
        let spec = TensorSpec::new(&[("x", 8)], DType::F32).unwrap();
        let t = Tensor::<f32>::zeros(&[8]);
        let err = shard(&t, &spec, &Layout::new(&[("x", "a")]).unwrap(), &mesh).unwrap_err();
        match err {
            Error::Indivisible {
                dim,
                extent,
                axis,
                axis_size,
            } => assert_eq!((dim.as_str(), extent, axis.as_str(), axis_size), ("x", 8, "a", 3)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn channels_are_never_split() {
        let mesh = create_mesh(&[("a", 2)]).unwrap();
        let spec = TensorSpec::volume(1, [2, 2, 2], 2, DType::F32).unwrap();
        let err = ShardLayout::resolve(&spec, &Layout::new(&[("channels", "a")]).unwrap(), mesh.shape_arc());
        assert!(matches!(err, Err(Error::Layout(_))));
    }

    #[test]
    fn roundtrip_5d_over_full_mesh() {
        let mesh = create_mesh(&[("b", 2), ("x", 2), ("y", 2), ("z", 2)]).unwrap();
        let layout = Layout::parse("batch=b,dimx=x,dimy=y,dimz=z").unwrap();
        let spec = TensorSpec::volume(4, [6, 6, 6], 3, DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::from_fn(&spec.extents(), |_| rng.random::<f64>());
        mesh.reset_stats();
        let s = shard(&t, &spec, &layout, &mesh).unwrap();
        assert_eq!(s.block(0).shape(), &[2, 3, 3, 3, 3]);
        // Full-coverage layout: every element crosses to exactly one worker.
        assert_eq!(mesh.comm_stats().partition_bytes, t.byte_len() as u64);
        let back = gather(&mesh, &s).unwrap();
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn single_worker_gather_is_the_block() {
        let mesh = create_mesh(&[("x", 1)]).unwrap();
        let spec = TensorSpec::volume(1, [2, 3, 4], 1, DType::F32).unwrap();
        let t = Tensor::from_fn(&spec.extents(), |i| (i[1] * 100 + i[2] * 10 + i[3]) as f32);
        let s = shard(&t, &spec, &Layout::parse("dimx=x").unwrap(), &mesh).unwrap();
        assert_eq!(s.block(0), &t);
        assert_eq!(gather(&mesh, &s).unwrap(), t);
    }

    #[test]
    fn zeros_gather_to_zeros() {
        let mesh = create_mesh(&[("x", 2), ("y", 2)]).unwrap();
        let spec = TensorSpec::volume(1, [4, 4, 2], 2, DType::F32).unwrap();
        let sl = ShardLayout::resolve(&spec, &Layout::parse("dimx=x,dimy=y").unwrap(), mesh.shape_arc()).unwrap();
        let z = ShardedTensor::<f32>::zeros(Arc::new(sl));
        assert_eq!(gather(&mesh, &z).unwrap(), Tensor::zeros(&[1, 4, 4, 2, 2]));
    }

    #[test]
    fn replicated_axes_hold_copies() {
        let mesh = create_mesh(&[("b", 2), ("x", 2)]).unwrap();
        let spec = TensorSpec::volume(1, [4, 2, 2], 1, DType::U8).unwrap();
        let t = Tensor::from_fn(&spec.extents(), |i| i[1] as u8);
        let s = shard(&t, &spec, &Layout::parse("dimx=x").unwrap(), &mesh).unwrap();
        assert_eq!(s.block(0), s.block(2));
        assert_eq!(gather(&mesh, &s).unwrap(), t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn gather_inverts_shard(
            mx in 1usize..=2, my in 1usize..=2, mb in 1usize..=2,
            lx in 1usize..=3, ly in 1usize..=3, lz in 1usize..=3, lb in 1usize..=2, c in 1usize..=3,
            seed in any::<u64>(),
        ) {
            let mesh = create_mesh(&[("b", mb), ("x", mx), ("y", my)]).unwrap();
            let layout = Layout::parse("batch=b,dimx=x,dimy=y").unwrap();
            let spec = TensorSpec::volume(lb * mb, [lx * mx, ly * my, lz], c, DType::F32).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_fn(&spec.extents(), |_| rng.random::<f32>());
            let back = gather(&mesh, &shard(&t, &spec, &layout, &mesh).unwrap()).unwrap();
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
