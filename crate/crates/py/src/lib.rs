//! Python bindings. Volumes cross the boundary as flat row-major lists plus
//! a shape; see `python/smoke_test.py` for usage.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use halomesh::halo::{halo_exchange, HaloSpec};
use halomesh::io::{generate_synthetic_dataset, Dataset, Split};
use halomesh::ops::{conv3d_forward, ConvParams, OpTape};
use halomesh::training::{
    batch_quantum, evaluate, predict_batch, Adam, LossConfig, Optimizer, SgdMomentum, StepOutcome, StepRecord,
    Trainer,
};
use halomesh::{gather, init_params, DeviceMesh, Layout, LayerGraph, MeshShape, ParamStore, Tensor, TensorSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: halomesh::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn tensor<T: halomesh::Element>(data: Vec<T>, shape: &[usize]) -> PyResult<Tensor<T>> {
    Tensor::from_vec(shape, data).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn layout_for(mesh: &DeviceMesh, layout: Option<&str>) -> PyResult<Layout> {
    match layout {
        Some(s) => Layout::parse(s).map_err(err),
        None => Ok(Layout::conventional(mesh.shape())),
    }
}

/// A simulated device mesh, e.g. `Mesh("b=2,x=2")`.
#[pyclass(name = "Mesh", module = "halomesh", frozen)]
struct PyMesh {
    inner: Arc<DeviceMesh>,
}

#[pymethods]
impl PyMesh {
    #[new]
    #[pyo3(signature = (spec, timeout = 30.0))]
    fn new(spec: &str, timeout: f64) -> PyResult<Self> {
        let shape = MeshShape::parse(spec).map_err(err)?;
        let mesh = DeviceMesh::new(shape, Duration::from_secs_f64(timeout)).map_err(err)?;
        Ok(PyMesh { inner: Arc::new(mesh) })
    }

    #[getter]
    fn worker_count(&self) -> usize {
        self.inner.worker_count()
    }

    #[getter]
    fn axes(&self) -> Vec<(String, usize)> {
        self.inner.shape().axes().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Mesh('{}')", self.inner.shape())
    }
}

/// A volume split into per-worker blocks.
#[pyclass(name = "ShardedTensor", module = "halomesh", frozen)]
struct PySharded {
    mesh: Arc<DeviceMesh>,
    inner: halomesh::ShardedTensor<f32>,
}

#[pymethods]
impl PySharded {
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.spec().extents()
    }

    #[getter]
    fn local_shape(&self) -> Vec<usize> {
        self.inner.layout().local_shape().to_vec()
    }

    fn block(&self, rank: usize) -> PyResult<Vec<f32>> {
        self.inner
            .blocks()
            .get(rank)
            .map(|b| b.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no worker {rank}")))
    }

    /// Reassembles the global volume as a flat list.
    fn gather(&self) -> PyResult<Vec<f32>> {
        Ok(gather(&self.mesh, &self.inner).map_err(err)?.into_vec())
    }

    /// Padded blocks after exchanging `(dim, lo, hi)` margins with
    /// neighbours, as `(flat, shape)` pairs in rank order.
    fn halo_exchange(&self, margins: Vec<(String, usize, usize)>) -> PyResult<Vec<(Vec<f32>, Vec<usize>)>> {
        let halo = HaloSpec::new(self.inner.spec(), &margins).map_err(err)?;
        let padded = halo_exchange(&self.mesh, &self.inner, &halo).map_err(err)?;
        Ok(padded
            .blocks
            .into_iter()
            .map(|b| {
                let s = b.data.shape().to_vec();
                (b.data.into_vec(), s)
            })
            .collect())
    }

    /// Distributed SAME convolution; `weight` is `(k, k, k, c_in, c_out)`.
    fn conv3d(&self, weight: Vec<f32>, weight_shape: Vec<usize>, bias: Vec<f32>) -> PyResult<PySharded> {
        let co = bias.len();
        let p = ConvParams::new(tensor(weight, &weight_shape)?, tensor(bias, &[co])?).map_err(err)?;
        let y = conv3d_forward(&self.mesh, &self.inner, &p, &mut OpTape::new(), "conv").map_err(err)?;
        Ok(PySharded {
            mesh: self.mesh.clone(),
            inner: y,
        })
    }
}

/// Splits a `(batch, x, y, z, channels)` volume over `mesh`.
#[pyfunction]
#[pyo3(signature = (mesh, data, shape, layout = None))]
fn shard(mesh: &PyMesh, data: Vec<f32>, shape: Vec<usize>, layout: Option<&str>) -> PyResult<PySharded> {
    if shape.len() != 5 {
        return Err(PyValueError::new_err("shape must be (batch, x, y, z, channels)"));
    }
    let t = tensor(data, &shape)?;
    let spec = TensorSpec::volume(shape[0], [shape[1], shape[2], shape[3]], shape[4], halomesh::DType::F32)
        .map_err(err)?;
    let layout = layout_for(&mesh.inner, layout)?;
    let inner = halomesh::shard(&t, &spec, &layout, &mesh.inner).map_err(err)?;
    Ok(PySharded {
        mesh: mesh.inner.clone(),
        inner,
    })
}

/// Single-device reference convolution with zero padding.
#[pyfunction]
fn conv3d_reference(
    data: Vec<f32>,
    shape: Vec<usize>,
    weight: Vec<f32>,
    weight_shape: Vec<usize>,
    bias: Vec<f32>,
) -> PyResult<Vec<f32>> {
    let co = bias.len();
    let y = halomesh::oracle::conv3d(&tensor(data, &shape)?, &tensor(weight, &weight_shape)?, &tensor(bias, &[co])?);
    Ok(y.into_vec())
}

/// Encoder filter counts for a cubic input of side `extent`.
#[pyfunction]
#[pyo3(signature = (extent, scale = 1.0))]
fn recipe_for_resolution(extent: usize, scale: f64) -> PyResult<Vec<usize>> {
    Ok(halomesh::recipe_for_resolution(extent, scale).map_err(err)?.encoder_blocks)
}

/// Writes `n` synthetic liver/tumour records; returns the validation ids.
#[pyfunction]
#[pyo3(signature = (dir, n = 16, extent = 32, seed = 0))]
fn synth_dataset(dir: PathBuf, n: usize, extent: usize, seed: u64) -> PyResult<Vec<String>> {
    let ds = generate_synthetic_dataset(&dir, n, extent, seed).map_err(err)?;
    Ok(ds.ids(Split::Val).into_iter().map(String::from).collect())
}

/// Runs the distributed-versus-reference checks; returns
/// `(name, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (mesh, seeds = 3))]
fn verify(mesh: &PyMesh, seeds: u64) -> PyResult<Vec<(String, bool, String)>> {
    let mut rows = Vec::new();
    halomesh::verify::run_suite(&mesh.inner, seeds, |c| rows.push((c.name.clone(), c.passed, c.detail.clone())))
        .map_err(err)?;
    Ok(rows)
}

enum Opt {
    Sgd(SgdMomentum<f32>),
    Adam(Adam<f32>),
}

/// A U-Net with its optimizer state, trained on a mesh.
#[pyclass(name = "Model", module = "halomesh")]
struct PyModel {
    mesh: Arc<DeviceMesh>,
    graph: Arc<LayerGraph>,
    params: ParamStore<f32>,
    opt: Opt,
    loss: LossConfig,
    step: usize,
}

impl PyModel {
    fn step_with<O: Optimizer<f32>>(&mut self, opt: O, x: &Tensor<f32>, y: &Tensor<u8>) -> PyResult<(StepRecord, O)> {
        let mut trainer =
            Trainer::new(&self.mesh, self.graph.clone(), self.params.clone(), opt, self.loss, self.step).map_err(err)?;
        let rec = trainer.train_step(x, y).map_err(err)?;
        let (params, opt, step) = trainer.into_parts();
        (self.params, self.step) = (params, step);
        Ok((rec, opt))
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (mesh, extent, blocks = None, scale = 1.0 / 32.0, convs_per_block = 4, lr = 0.003, momentum = 0.9, seed = 0, optimizer = "sgd"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mesh: &PyMesh,
        extent: usize,
        blocks: Option<Vec<usize>>,
        scale: f64,
        convs_per_block: usize,
        lr: f64,
        momentum: f64,
        seed: u64,
        optimizer: &str,
    ) -> PyResult<Self> {
        let cfg = match blocks {
            Some(b) => halomesh::UNetConfig::new(extent, b),
            None => halomesh::recipe_for_resolution(extent, scale).map_err(err)?,
        }
        .with_convs_per_block(convs_per_block);
        let layout = Layout::conventional(mesh.inner.shape());
        let graph = Arc::new(halomesh::build(&cfg, mesh.inner.shape_arc(), &layout).map_err(err)?);
        let params = init_params::<f32>(&graph, seed);
        let opt = match optimizer {
            "sgd" => Opt::Sgd(SgdMomentum::new(lr, momentum, &params)),
            "adam" => Opt::Adam(Adam::new(lr, &params)),
            other => return Err(PyValueError::new_err(format!("unknown optimizer `{other}`"))),
        };
        Ok(PyModel {
            mesh: mesh.inner.clone(),
            graph,
            params,
            opt,
            loss: LossConfig::default(),
            step: 0,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    #[getter]
    fn step(&self) -> usize {
        self.step
    }

    /// Smallest batch that divides evenly over the mesh.
    #[getter]
    fn batch_quantum(&self) -> usize {
        batch_quantum(&self.graph)
    }

    fn describe(&self) -> PyResult<String> {
        let b = batch_quantum(&self.graph);
        self.graph.describe(b, halomesh::DType::F32).map_err(err)
    }

    /// Parameters in graph order as one flat list.
    fn parameters(&self) -> Vec<f32> {
        self.params.flatten()
    }

    /// One optimizer step on images `(b, e, e, e, 1)` and u8 labels of the
    /// same shape. Returns the loss terms.
    fn train_step<'py>(
        &mut self,
        py: Python<'py>,
        images: Vec<f32>,
        labels: Vec<u8>,
        shape: Vec<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let x = tensor(images, &shape)?;
        let y = tensor(labels, &shape)?;
        let rec = match &self.opt {
            Opt::Sgd(o) => {
                let (rec, o) = self.step_with(o.clone(), &x, &y)?;
                self.opt = Opt::Sgd(o);
                rec
            }
            Opt::Adam(o) => {
                let (rec, o) = self.step_with(o.clone(), &x, &y)?;
                self.opt = Opt::Adam(o);
                rec
            }
        };
        let d = PyDict::new(py);
        d.set_item("step", rec.step)?;
        d.set_item("loss", rec.loss.total)?;
        d.set_item("dice_loss", rec.loss.dice)?;
        d.set_item("ce_loss", rec.loss.ce)?;
        d.set_item("skipped", rec.outcome != StepOutcome::Applied)?;
        Ok(d)
    }

    /// Predicted class labels for a batch, flat.
    fn predict(&self, images: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<u8>> {
        let x = tensor(images, &shape)?;
        let y = Tensor::<u8>::zeros(&shape);
        let params = Arc::new(self.params.clone());
        let (p, _) = predict_batch(&self.mesh, &self.graph, &params, &x, &y, &self.loss).map_err(err)?;
        Ok(p.into_vec())
    }

    /// Tumour Dice on a dataset split written by `synth_dataset`.
    #[pyo3(signature = (dir, split = "val"))]
    fn evaluate<'py>(&self, py: Python<'py>, dir: PathBuf, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        let records = Dataset::open(&dir).and_then(|d| d.load_split(split)).map_err(err)?;
        let m = evaluate(&self.mesh, &self.graph, &self.params, &records, batch_quantum(&self.graph), &self.loss)
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("dice_per_case", m.dice_per_case)?;
        d.set_item("dice_global", m.dice_global)?;
        d.set_item("mean_loss", m.mean_loss)?;
        d.set_item("cases", m.cases)?;
        Ok(d)
    }
}

#[pymodule]
#[pyo3(name = "halomesh")]
fn pyhalomesh(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PySharded>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(shard, m)?)?;
    m.add_function(wrap_pyfunction!(conv3d_reference, m)?)?;
    m.add_function(wrap_pyfunction!(recipe_for_resolution, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
