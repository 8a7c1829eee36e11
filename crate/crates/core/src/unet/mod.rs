//! U-Net architecture: the per-resolution recipe, the compiled layer graph
//! with validated shard geometry, and the parameter store.

pub mod exec;
mod params;

pub use exec::{backward_local, forward_local, LocalTape, PhaseTimes, Profile, PHASES};
pub use params::{init_params, ParamStore};

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halo::{analytic_exchange_bytes, HaloSpec};
use crate::mesh::{Layout, MeshShape};
use crate::sharded::{AxisBinding, ShardLayout, TensorSpec};
use crate::tensor::DType;

/// Architecture description. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Side of the cubic input volume.
    pub input_extent: usize,
    /// Filters of each encoder block, top to bottom.
    pub encoder_blocks: Vec<usize>,
    #[serde(default = "default_convs")]
    pub convs_per_block: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_convs() -> usize {
    4
}
fn default_classes() -> usize {
    3
}
fn default_in_channels() -> usize {
    1
}
fn default_kernel() -> usize {
    3
}

impl UNetConfig {
    pub fn new(input_extent: usize, encoder_blocks: Vec<usize>) -> Self {
        UNetConfig {
            input_extent,
            encoder_blocks,
            convs_per_block: default_convs(),
            num_classes: default_classes(),
            in_channels: default_in_channels(),
            kernel: default_kernel(),
        }
    }

    pub fn with_convs_per_block(mut self, n: usize) -> Self {
        self.convs_per_block = n;
        self
    }

    pub fn depth(&self) -> usize {
        self.encoder_blocks.len()
    }

    /// Number of max-pool layers: one between consecutive encoder blocks.
    pub fn pool_count(&self) -> usize {
        self.depth().saturating_sub(1)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_blocks.is_empty() || self.encoder_blocks.contains(&0) {
            return Err(Error::Config("encoder needs at least one block with ≥1 filter".into()));
        }
        if self.convs_per_block == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "convs_per_block, num_classes and in_channels must be positive".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::EvenKernel(self.kernel));
        }
        if self.input_extent == 0 || self.input_extent % (1 << self.pool_count()) != 0 {
            return Err(Error::Config(format!(
                "input extent {} is not divisible by 2^{} for {} pooling layers",
                self.input_extent,
                self.pool_count(),
                self.pool_count()
            )));
        }
        Ok(())
    }
}

/// Filter ladder for a cubic input of side `extent`.
///
/// At 64 the ladder is three blocks starting at 256 filters, doubling after
/// each pool. Every doubling of the resolution prepends a block with half
/// the filters of the current first block; every halving below 64 removes
/// the deepest block (never going below one block). `scale` multiplies
/// every filter count, rounding to the nearest integer with a floor of 1.
pub fn recipe_for_resolution(extent: usize, scale: f64) -> Result<UNetConfig> {
    if extent < 8 || !extent.is_power_of_two() {
        return Err(Error::Config(format!(
            "input extent {extent} must be a power of two no smaller than 8"
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("filter scale {scale} must be positive")));
    }
    let (first, count) = if extent >= 64 {
        let up = (extent / 64).trailing_zeros() as usize;
        (256 >> up, 3 + up)
    } else {
        let down = (64 / extent).trailing_zeros() as usize;
        (256, 3usize.saturating_sub(down).max(1))
    };
    let blocks = (0..count)
        .map(|i| (((first << i) as f64 * scale).round() as usize).max(1))
        .collect();
    Ok(UNetConfig::new(extent, blocks))
}

/// Operator of a graph node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeOp {
    Input,
    /// Convolution number `param` in the parameter store, optionally
    /// followed by ReLU.
    Conv { param: usize, relu: bool },
    MaxPool,
    Upsample,
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    /// Global spatial side of this node's output.
    pub extent: usize,
    pub channels: usize,
    pub level: usize,
}

/// Shape of one convolution in the parameter store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub id: String,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvSpec {
    pub fn fan_in(&self) -> usize {
        self.k * self.k * self.k * self.c_in
    }

    pub fn param_count(&self) -> usize {
        self.fan_in() * self.c_out + self.c_out
    }
}

/// Topologically ordered network with validated geometry for one mesh and
/// layout.
#[derive(Clone, Debug)]
pub struct LayerGraph {
    config: UNetConfig,
    nodes: Vec<Node>,
    convs: Vec<ConvSpec>,
    mesh: Arc<MeshShape>,
    layout: Layout,
    bindings: Vec<Option<AxisBinding>>,
    data_axes: Vec<usize>,
}

impl LayerGraph {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn convs(&self) -> &[ConvSpec] {
        &self.convs
    }

    pub fn mesh(&self) -> &Arc<MeshShape> {
        &self.mesh
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Mesh axis bound to each `(batch, x, y, z, channels)` dimension.
    pub fn bindings(&self) -> &[Option<AxisBinding>] {
        &self.bindings
    }

    /// Mesh axes that split data. Reductions run over these; any other
    /// axis holds replicas.
    pub fn data_axes(&self) -> &[usize] {
        &self.data_axes
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvSpec::param_count).sum()
    }

    /// Layout of a `(batch, e, e, e, c)` tensor.
    pub fn volume_layout(&self, batch: usize, extent: usize, channels: usize, dtype: DType) -> Result<ShardLayout> {
        let spec = TensorSpec::volume(batch, [extent; 3], channels, dtype)?;
        ShardLayout::resolve(&spec, &self.layout, self.mesh.clone())
    }

    /// Size of the batch dimension on each worker for a global `batch`.
    pub fn local_batch(&self, batch: usize) -> Result<usize> {
        match self.bindings[0] {
            Some(b) if batch % b.size != 0 => Err(Error::Indivisible {
                dim: "batch".into(),
                extent: batch,
                axis: self.mesh.axis_name(b.axis).to_string(),
                axis_size: b.size,
            }),
            Some(b) => Ok(batch / b.size),
            None => Ok(batch),
        }
    }

    /// Side of the input region that influences one output voxel.
    pub fn receptive_field(&self) -> usize {
        // (field, jump) per node, in input voxels.
        let mut rf: Vec<(usize, usize)> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                NodeOp::Input => (1, 1),
                NodeOp::Conv { param, .. } => {
                    let (f, j) = rf[node.inputs[0]];
                    (f + (self.convs[*param].k - 1) * j, j)
                }
                NodeOp::MaxPool => {
                    let (f, j) = rf[node.inputs[0]];
                    (f + j, 2 * j)
                }
                NodeOp::Upsample => {
                    let (f, j) = rf[node.inputs[0]];
                    (f, (j / 2).max(1))
                }
                NodeOp::Concat => {
                    let a = rf[node.inputs[0]];
                    let b = rf[node.inputs[1]];
                    (a.0.max(b.0), a.1.min(b.1))
                }
            };
            rf.push(v);
        }
        rf.last().map_or(1, |v| v.0)
    }

    /// Halo bytes moved by the forward exchange of every convolution for a
    /// global batch of `batch`, from the analytic surface formula.
    pub fn halo_bytes_per_layer(&self, batch: usize, dtype: DType) -> Result<Vec<(String, u64)>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let NodeOp::Conv { param, .. } = node.op {
                let input = &self.nodes[node.inputs[0]];
                let c = &self.convs[param];
                let layout = self.volume_layout(batch, input.extent, c.c_in, dtype)?;
                let halo = HaloSpec::for_kernel(layout.spec(), c.k)?;
                out.push((node.id.clone(), analytic_exchange_bytes(&layout, &halo)));
            }
        }
        Ok(out)
    }

    /// Human-readable layer table.
    pub fn describe(&self, batch: usize, dtype: DType) -> Result<String> {
        let bytes = self.halo_bytes_per_layer(batch, dtype)?;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:<8} {:>18} {:>14} {:>10} {:>12}",
            "layer", "op", "global", "local", "params", "halo_bytes"
        );
        for node in &self.nodes {
            let local: Vec<usize> = (1..4)
                .map(|d| self.bindings[d].map_or(node.extent, |b| node.extent / b.size))
                .collect();
            let (op, params, halo) = match &node.op {
                NodeOp::Input => ("input", 0, 0),
                NodeOp::Conv { param, relu } => {
                    let h = bytes.iter().find(|(id, _)| *id == node.id).map_or(0, |v| v.1);
                    (if *relu { "conv+relu" } else { "conv" }, self.convs[*param].param_count(), h)
                }
                NodeOp::MaxPool => ("maxpool", 0, 0),
                NodeOp::Upsample => ("upsample", 0, 0),
                NodeOp::Concat => ("concat", 0, 0),
            };
            let _ = writeln!(
                s,
                "{:<16} {:<8} {:>18} {:>14} {:>10} {:>12}",
                node.id,
                op,
                format!("{0}x{0}x{0}x{1}", node.extent, node.channels),
                format!("{}x{}x{}", local[0], local[1], local[2]),
                params,
                halo
            );
        }
        let _ = writeln!(
            s,
            "parameters: {}  receptive field: {}  mesh: {}  layout: {}",
            self.param_count(),
            self.receptive_field(),
            self.mesh,
            self.layout
        );
        Ok(s)
    }
}

/// Compiles `config` for a mesh and layout, checking that every level's
/// shards are large enough for the halo and evenly poolable.
pub fn build(config: &UNetConfig, mesh: Arc<MeshShape>, layout: &Layout) -> Result<LayerGraph> {
    config.validate()?;
    let spec = TensorSpec::volume(1, [config.input_extent; 3], config.in_channels, DType::F32)?;
    // Resolve once on the batch-free spec to validate axis names and channel
    // rules; batch divisibility is checked per call with the real batch.
    let probe_layout = Layout::new(
        &layout
            .assignments()
            .iter()
            .filter(|(d, _)| d != "batch")
            .map(|(d, a)| (d.clone(), a.clone()))
            .collect::<Vec<_>>(),
    )?;
    let resolved = ShardLayout::resolve(&spec, &probe_layout, mesh.clone())?;
    let mut bindings = resolved.bindings().to_vec();
    if let Some(axis) = layout.axis_for("batch") {
        let a = mesh
            .axis_index(axis)
            .ok_or_else(|| crate::error::MeshError::UnknownAxis(axis.to_string()))?;
        bindings[0] = Some(AxisBinding {
            axis: a,
            size: mesh.axis_size(a),
        });
    }
    let margin = (config.kernel - 1) / 2;
    for level in 0..config.depth() {
        let extent = config.input_extent >> level;
        let pooled_after = level + 1 < config.depth();
        for (d, b) in bindings.iter().enumerate().take(4).skip(1) {
            let Some(b) = b else { continue };
            let axis = mesh.axis_name(b.axis).to_string();
            let too_small = |reason: String| Error::ShardTooSmall {
                depth: level,
                axis: axis.clone(),
                reason,
            };
            if extent % b.size != 0 {
                return Err(too_small(format!(
                    "extent {extent} of {} does not split over {} workers (local extent < 1 or ragged)",
                    crate::sharded::SPATIAL[d - 1],
                    b.size
                )));
            }
            let local = extent / b.size;
            if local < margin.max(1) {
                return Err(too_small(format!("local extent {local} is below the halo margin {margin}")));
            }
            if pooled_after && local % 2 != 0 {
                return Err(too_small(format!("local extent {local} is odd but a max-pool follows")));
            }
        }
    }

    let mut nodes = Vec::new();
    let mut convs = Vec::new();
    let push = |nodes: &mut Vec<Node>, id: String, op, inputs: Vec<usize>, extent, channels, level| {
        nodes.push(Node {
            id,
            op,
            inputs,
            extent,
            channels,
            level,
        });
        nodes.len() - 1
    };
    let mut add_conv = |nodes: &mut Vec<Node>, id: String, x: usize, c_out: usize, k: usize, relu: bool| {
        let (extent, level, c_in) = (nodes[x].extent, nodes[x].level, nodes[x].channels);
        convs.push(ConvSpec {
            id: id.clone(),
            k,
            c_in,
            c_out,
        });
        nodes.push(Node {
            id,
            op: NodeOp::Conv {
                param: convs.len() - 1,
                relu,
            },
            inputs: vec![x],
            extent,
            channels: c_out,
            level,
        });
        nodes.len() - 1
    };

    let e0 = config.input_extent;
    let mut x = push(&mut nodes, "input".into(), NodeOp::Input, vec![], e0, config.in_channels, 0);
    let mut skips = Vec::new();
    for (level, &f) in config.encoder_blocks.iter().enumerate() {
        if level > 0 {
            let c = nodes[x].channels;
            x = push(&mut nodes, format!("enc{level}.pool"), NodeOp::MaxPool, vec![x], e0 >> level, c, level);
        }
        for i in 0..config.convs_per_block {
            x = add_conv(&mut nodes, format!("enc{level}.conv{i}"), x, f, config.kernel, true);
        }
        skips.push(x);
    }
    for level in (0..config.depth() - 1).rev() {
        let c = nodes[x].channels;
        x = push(&mut nodes, format!("dec{level}.up"), NodeOp::Upsample, vec![x], e0 >> level, c, level);
        let c = c + nodes[skips[level]].channels;
        x = push(&mut nodes, format!("dec{level}.concat"), NodeOp::Concat, vec![x, skips[level]], e0 >> level, c, level);
        for i in 0..config.convs_per_block {
            x = add_conv(&mut nodes, format!("dec{level}.conv{i}"), x, config.encoder_blocks[level], config.kernel, true);
        }
    }
    add_conv(&mut nodes, "head".into(), x, config.num_classes, 1, false);

    let mut data_axes: Vec<usize> = bindings.iter().flatten().map(|b| b.axis).collect();
    data_axes.sort_unstable();
    Ok(LayerGraph {
        config: config.clone(),
        nodes,
        convs,
        mesh,
        layout: layout.clone(),
        bindings,
        data_axes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(s: &str) -> Arc<MeshShape> {
        Arc::new(MeshShape::parse(s).unwrap())
    }

    #[test]
    fn recipe_ladders() {
        let table: [(usize, &[usize]); 4] = [
            (64, &[256, 512, 1024]),
            (128, &[128, 256, 512, 1024]),
            (256, &[64, 128, 256, 512, 1024]),
            (512, &[32, 64, 128, 256, 512, 1024]),
        ];
        for (e, blocks) in table {
            let c = recipe_for_resolution(e, 1.0).unwrap();
            assert_eq!(c.encoder_blocks, blocks, "extent {e}");
            assert_eq!(c.convs_per_block, 4);
        }
    }

    #[test]
    fn desk_ladders() {
        assert_eq!(recipe_for_resolution(32, 1.0 / 32.0).unwrap().encoder_blocks, vec![8, 16]);
        assert_eq!(recipe_for_resolution(16, 1.0 / 32.0).unwrap().encoder_blocks, vec![8]);
        assert_eq!(recipe_for_resolution(8, 1e-6).unwrap().encoder_blocks, vec![1]);
        assert!(recipe_for_resolution(48, 1.0).is_err());
        assert!(recipe_for_resolution(4, 1.0).is_err());
    }

    #[test]
    fn desk_net_fits_eight_workers() {
        let cfg = recipe_for_resolution(32, 1.0 / 32.0).unwrap();
        let g = build(&cfg, mesh("x=2,y=2,z=2"), &Layout::parse("dimx=x,dimy=y,dimz=z").unwrap()).unwrap();
        let deepest = g.nodes().iter().map(|n| n.extent).min().unwrap();
        assert_eq!(deepest / 2, 8);
        let out = &g.nodes()[g.output()];
        assert_eq!((out.extent, out.channels), (32, 3));
    }

    #[test]
    fn too_deep_for_mesh() {
        let cfg = UNetConfig::new(16, vec![2, 4, 8]);
        let err = build(&cfg, mesh("x=8"), &Layout::parse("dimx=x").unwrap()).unwrap_err();
        assert!(matches!(err, Error::ShardTooSmall { depth: 1 | 2, .. }), "{err}");
    }

    #[test]
    fn odd_local_extent_before_pool() {
        let cfg = UNetConfig::new(20, vec![2, 4]);
        let err = build(&cfg, mesh("x=4"), &Layout::parse("dimx=x").unwrap()).unwrap_err();
        assert!(matches!(err, Error::ShardTooSmall { depth: 0, .. }), "{err}");
    }

    #[test]
    fn graph_structure() {
        let cfg = UNetConfig::new(8, vec![2, 4]).with_convs_per_block(2);
        let g = build(&cfg, mesh("x=1"), &Layout::replicated()).unwrap();
        let ids: Vec<&str> = g.nodes().iter().map(|n| n.id.as_str()).collect();
        assert_eq!(
            ids,
            [
                "input", "enc0.conv0", "enc0.conv1", "enc1.pool", "enc1.conv0", "enc1.conv1", "dec0.up",
                "dec0.concat", "dec0.conv0", "dec0.conv1", "head"
            ]
        );
        assert_eq!(g.convs()[4].c_in, 6);
        // 2 encoder convs + pool + 2 convs + up + 2 decoder convs.
        assert_eq!(g.receptive_field(), 1 + 2 + 2 + 1 + 2 * (2 + 2) + 2 + 2);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = recipe_for_resolution(32, 0.25).unwrap();
        assert_eq!(UNetConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let c = UNetConfig::from_toml("input_extent = 16\nencoder_blocks = [4]\n").unwrap();
        assert_eq!(c.convs_per_block, 4);
    }
}
