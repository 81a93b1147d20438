//! Python bindings for the core grid types and operations: scene
//! generation, the mixture head, training, and the evaluation metrics.
//!
//! Build with `cargo build -p moedepth-py --release`; the resulting
//! `libmoedepth_py.so` imports as the module `moedepth_py` once renamed
//! (see `python/smoke_test.py`).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use moedepth::cloud;
use moedepth::eval;
use moedepth::grid;
use moedepth::mixture;
use moedepth::net;
use moedepth::scene;
use moedepth::train;

fn err(e: moedepth::Error) -> PyErr {
    match e {
        moedepth::Error::Contract(_) | moedepth::Error::Config(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// An H x W grid of float64 values in row-major order.
#[pyclass(name = "Grid", from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: grid::Grid,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: grid::Grid::new(height, width, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            inner: grid::Grid::constant(height, width, value),
        }
    }

    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.inner.at(y, x)
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Grid({}x{})", self.inner.height(), self.inner.width())
    }
}

/// K same-sized grids treated as channels.
#[pyclass(name = "GridStack", from_py_object)]
#[derive(Clone)]
struct PyGridStack {
    inner: grid::GridStack,
}

#[pymethods]
impl PyGridStack {
    #[new]
    fn new(channels: Vec<PyGrid>) -> PyResult<Self> {
        Ok(Self {
            inner: grid::GridStack::new(channels.into_iter().map(|g| g.inner).collect())
                .map_err(err)?,
        })
    }

    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.channels(), self.inner.height(), self.inner.width())
    }

    fn channel(&self, k: usize) -> PyResult<PyGrid> {
        if k >= self.inner.channels() {
            return Err(PyValueError::new_err(format!("channel {k} out of range")));
        }
        Ok(PyGrid {
            inner: self.inner.channel(k).clone(),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "GridStack({}x{}x{})",
            self.inner.channels(),
            self.inner.height(),
            self.inner.width()
        )
    }
}

/// An H x W boolean mask.
#[pyclass(name = "MaskGrid", from_py_object)]
#[derive(Clone)]
struct PyMaskGrid {
    inner: grid::MaskGrid,
}

#[pymethods]
impl PyMaskGrid {
    #[new]
    fn new(height: usize, width: usize, data: Vec<bool>) -> PyResult<Self> {
        Ok(Self {
            inner: grid::MaskGrid::new(height, width, data).map_err(err)?,
        })
    }

    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    fn count(&self) -> usize {
        self.inner.count_true()
    }

    fn tolist(&self) -> Vec<bool> {
        self.inner.data().to_vec()
    }
}

/// One synthetic sample: input channels, ground-truth depth, analytic edge
/// mask, and pinhole intrinsics.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: scene::Scene,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn input(&self) -> PyGridStack {
        PyGridStack {
            inner: self.inner.input.clone(),
        }
    }

    #[getter]
    fn gt_depth(&self) -> PyGrid {
        PyGrid {
            inner: self.inner.gt_depth.clone(),
        }
    }

    #[getter]
    fn gt_edges(&self) -> PyMaskGrid {
        PyMaskGrid {
            inner: self.inner.gt_edges.clone(),
        }
    }

    #[getter]
    fn intrinsics(&self) -> (f64, f64, f64, f64) {
        let i = self.inner.intrinsics;
        (i.fx, i.fy, i.cx, i.cy)
    }
}

#[pyfunction]
#[pyo3(signature = (height=64, width=64, seed=0, objects_min=1, objects_max=5, noise_std=0.05))]
fn generate_scene(
    height: usize,
    width: usize,
    seed: u64,
    objects_min: usize,
    objects_max: usize,
    noise_std: f64,
) -> PyResult<PyScene> {
    let spec = scene::SceneSpec {
        height,
        width,
        objects_min,
        objects_max,
        noise_std,
        seed,
        ..scene::SceneSpec::default()
    };
    Ok(PyScene {
        inner: scene::generate(&spec).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (count, seed=0, height=64, width=64))]
fn make_dataset(count: usize, seed: u64, height: usize, width: usize) -> PyResult<Vec<PyScene>> {
    let spec = scene::SceneSpec {
        height,
        width,
        ..scene::SceneSpec::default()
    };
    Ok(scene::make_dataset(&spec, count, seed)
        .map_err(err)?
        .into_iter()
        .map(|s| PyScene { inner: s })
        .collect())
}

/// Temperature-scaled softmax over logit channels.
#[pyfunction]
fn gate_softmax(logits: &PyGridStack, temperature: f64) -> PyResult<PyGridStack> {
    let gate = mixture::GateField::softmax(&logits.inner, temperature).map_err(err)?;
    Ok(PyGridStack {
        inner: gate.weights().clone(),
    })
}

/// Mean per-pixel gate entropy of a weight stack.
#[pyfunction]
fn gating_entropy(weights: &PyGridStack) -> PyResult<f64> {
    let gate = mixture::GateField::from_weights(weights.inner.clone()).map_err(err)?;
    Ok(mixture::gating_entropy(&gate, None).map_err(err)?.0)
}

/// Fuses expert depths: soft weighted combination or hard argmax.
#[pyfunction]
#[pyo3(signature = (expert_depths, logits, temperature=1.0, hard=false))]
fn combine(
    expert_depths: &PyGridStack,
    logits: &PyGridStack,
    temperature: f64,
    hard: bool,
) -> PyResult<PyGrid> {
    let gate = mixture::GateField::softmax(&logits.inner, temperature).map_err(err)?;
    Ok(PyGrid {
        inner: mixture::combine(&expert_depths.inner, &gate, hard).map_err(err)?,
    })
}

/// Mixture negative log-likelihood of expert depths under a gate.
#[pyfunction]
#[pyo3(signature = (expert_depths, logits, gt_depth, temperature=1.0, sigma=1.0))]
fn mixture_nll(
    expert_depths: &PyGridStack,
    logits: &PyGridStack,
    gt_depth: &PyGrid,
    temperature: f64,
    sigma: f64,
) -> PyResult<f64> {
    let gate = mixture::GateField::softmax(&logits.inner, temperature).map_err(err)?;
    let output = mixture::MixtureOutput::new(expert_depths.inner.clone(), gate).map_err(err)?;
    let cfg = mixture::LossConfig {
        sigma,
        ..mixture::LossConfig::default()
    };
    Ok(mixture::mixture_nll(&output, &gt_depth.inner, &cfg).map_err(err)?.0)
}

/// Sobel edge extraction from a depth map.
#[pyfunction]
#[pyo3(signature = (depth, threshold=50.0, scale_to_255=true))]
fn extract_edges(depth: &PyGrid, threshold: f64, scale_to_255: bool) -> PyResult<PyMaskGrid> {
    let cfg = eval::EdgeConfig {
        threshold,
        scale_to_255,
    };
    Ok(PyMaskGrid {
        inner: eval::extract_edges(&depth.inner, &cfg).map_err(err)?,
    })
}

#[pyfunction]
fn boundary_metrics<'py>(
    py: Python<'py>,
    pred: &PyMaskGrid,
    gt: &PyMaskGrid,
) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::boundary_metrics(&pred.inner, &gt.inner).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("miou", r.miou)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("f1", r.f1)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, median_scaling=true))]
fn depth_metrics<'py>(
    py: Python<'py>,
    pred: &PyGrid,
    gt: &PyGrid,
    median_scaling: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::depth_metrics(&pred.inner, &gt.inner, median_scaling).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("abs_rel", r.abs_rel)?;
    d.set_item("delta_1", r.delta_1)?;
    d.set_item("delta_2", r.delta_2)?;
    d.set_item("delta_3", r.delta_3)?;
    d.set_item("scale", r.scale)?;
    d.set_item("valid_pixels", r.valid_count)?;
    Ok(d)
}

/// Unprojects a depth map to a list of (x, y, z) points.
#[pyfunction]
fn unproject(depth: &PyGrid, fx: f64, fy: f64, cx: f64, cy: f64) -> PyResult<Vec<(f64, f64, f64)>> {
    let cloud = cloud::unproject(&depth.inner, &scene::Intrinsics { fx, fy, cx, cy }).map_err(err)?;
    Ok(cloud.points().iter().map(|p| (p[0], p[1], p[2])).collect())
}

/// Flying-point count of a depth map's cloud.
#[pyfunction]
#[pyo3(signature = (depth, fx, fy, cx, cy, k=8, ratio=3.0))]
fn flying_point_count(
    depth: &PyGrid,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    k: usize,
    ratio: f64,
) -> PyResult<usize> {
    let cloud = cloud::unproject(&depth.inner, &scene::Intrinsics { fx, fy, cx, cy }).map_err(err)?;
    Ok(cloud::detect_flying_points(&cloud, k, ratio).map_err(err)?.1)
}

/// A trainable mixture-of-experts depth network.
#[pyclass(name = "Network")]
struct PyNetwork {
    params: net::ParamStore,
    tau: f64,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (input_channels=3, feature_channels=16, experts=4, kernel_size=3, encoder_layers=2, seed=0))]
    fn new(
        input_channels: usize,
        feature_channels: usize,
        experts: usize,
        kernel_size: usize,
        encoder_layers: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = net::NetConfig {
            input_channels,
            feature_channels,
            num_experts: experts,
            kernel_size,
            encoder_layers,
            seed,
        };
        Ok(Self {
            params: net::ParamStore::init(&cfg).map_err(err)?,
            tau: 1.0,
        })
    }

    #[getter]
    fn num_experts(&self) -> usize {
        self.params.config().num_experts
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.len()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.tau
    }

    /// Forward pass; returns (fused_depth, expert_depths, gate_weights).
    fn forward(&self, input: &PyGridStack) -> PyResult<(PyGrid, PyGridStack, PyGridStack)> {
        let trace = net::forward(&self.params, &input.inner, self.tau).map_err(err)?;
        Ok((
            PyGrid {
                inner: trace.output().fused_depth().clone(),
            },
            PyGridStack {
                inner: trace.output().expert_depths().clone(),
            },
            PyGridStack {
                inner: trace.output().gate().weights().clone(),
            },
        ))
    }

    /// Hard-argmax prediction (single expert per pixel).
    fn predict(&self, input: &PyGridStack) -> PyResult<PyGrid> {
        let trace = net::forward(&self.params, &input.inner, self.tau).map_err(err)?;
        Ok(PyGrid {
            inner: mixture::combine(trace.output().expert_depths(), trace.output().gate(), true)
                .map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.params.save_checkpoint(std::path::Path::new(path)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            params: net::ParamStore::load_checkpoint(std::path::Path::new(path)).map_err(err)?,
            tau: 0.1,
        })
    }
}

/// Trains a network on scenes; returns the network and the per-step log as
/// (step, total, nll, entropy_term, tau, mean_gate_entropy) tuples.
#[pyfunction]
#[pyo3(signature = (scenes, steps=200, experts=4, feature_channels=8, lambda_e=1e-4, lr=1e-3, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_network(
    scenes: Vec<PyScene>,
    steps: usize,
    experts: usize,
    feature_channels: usize,
    lambda_e: f64,
    lr: f64,
    seed: u64,
) -> PyResult<(PyNetwork, Vec<(usize, f64, f64, f64, f64, f64)>)> {
    let inner: Vec<scene::Scene> = scenes.into_iter().map(|s| s.inner).collect();
    let mut cfg = train::TrainConfig {
        net: net::NetConfig {
            num_experts: experts,
            feature_channels,
            seed,
            ..net::NetConfig::default()
        },
        steps,
        lr,
        seed,
        ..train::TrainConfig::default()
    };
    cfg.loss.lambda_e = lambda_e;
    let result = train::train(&cfg, &inner).map_err(err)?;
    let log = result
        .log
        .iter()
        .map(|r| (r.step, r.total, r.nll, r.entropy_term, r.tau, r.mean_gate_entropy))
        .collect();
    Ok((
        PyNetwork {
            params: result.params,
            tau: result.final_tau,
        },
        log,
    ))
}

#[pymodule]
fn moedepth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    moedepth::parallel::configure_threads_from_env();
    m.add_class::<PyGrid>()?;
    m.add_class::<PyGridStack>()?;
    m.add_class::<PyMaskGrid>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gate_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(gating_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(mixture_nll, m)?)?;
    m.add_function(wrap_pyfunction!(extract_edges, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(unproject, m)?)?;
    m.add_function(wrap_pyfunction!(flying_point_count, m)?)?;
    m.add_function(wrap_pyfunction!(train_network, m)?)?;
    Ok(())
}
