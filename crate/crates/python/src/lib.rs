//! Python bindings for the `instmix` core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use instmix::clipstore::{read_clip, write_clip, Clip};
use instmix::evaluator::{average_precision, GroundTruth, Prediction};
use instmix::geometry::{self, BBox, Mask3D};
use instmix::mixer;
use instmix::model::{self, FeatureVector, ModelParams, ModelShape};
use instmix::rng::{stream, Purpose};
use instmix::trainer::{self, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Axis-aligned box in pixel coordinates, half-open on the right and bottom.
#[pyclass(name = "BBox", module = "instmix", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyBBox(BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        PyBBox(BBox::new(x1, y1, x2, y2))
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.0.x1
    }

    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1
    }

    #[getter]
    fn x2(&self) -> f64 {
        self.0.x2
    }

    #[getter]
    fn y2(&self) -> f64 {
        self.0.y2
    }

    fn width(&self) -> f64 {
        self.0.width()
    }

    fn height(&self) -> f64 {
        self.0.height()
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn as_tuple(&self) -> (f64, f64, f64, f64) {
        (self.0.x1, self.0.y1, self.0.x2, self.0.y2)
    }

    fn __repr__(&self) -> String {
        format!("BBox({}, {}, {}, {})", self.0.x1, self.0.y1, self.0.x2, self.0.y2)
    }
}

fn unwrap_boxes(boxes: &[PyBBox]) -> Vec<BBox> {
    boxes.iter().map(|b| b.0).collect()
}

#[pyfunction]
fn iou(a: PyBBox, b: PyBBox) -> f64 {
    geometry::iou(&a.0, &b.0)
}

/// Fraction of `target` covered by the union of `sources`.
#[pyfunction]
fn coverage(target: PyBBox, sources: Vec<PyBBox>) -> PyResult<f64> {
    geometry::coverage(&target.0, &unwrap_boxes(&sources)).map_err(value_err)
}

#[pyfunction]
fn expand_box(b: PyBBox, factor: f64, width: usize, height: usize) -> PyBBox {
    PyBBox(geometry::expand_box(&b.0, factor, width, height))
}

#[pyfunction]
fn resize_box_half(b: PyBBox, width: usize, height: usize) -> PyBBox {
    PyBBox(geometry::resize_box_half(&b.0, width, height))
}

/// Binary H x W mask of the union of `boxes`, returned as row-major bytes.
#[pyfunction]
fn rasterize<'py>(py: Python<'py>, boxes: Vec<PyBBox>, width: usize, height: usize) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &geometry::rasterize(&unwrap_boxes(&boxes), width, height).data)
}

/// T x H x W x C unsigned 8-bit video clip.
#[pyclass(name = "Clip", module = "instmix", frozen, from_py_object)]
#[derive(Clone)]
struct PyClip(Clip);

#[pymethods]
impl PyClip {
    #[new]
    fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<u8>) -> PyResult<Self> {
        Clip::new(frames, height, width, channels, data).map(PyClip).map_err(value_err)
    }

    #[staticmethod]
    fn filled(frames: usize, height: usize, width: usize, channels: usize, value: u8) -> Self {
        PyClip(Clip::filled(frames, height, width, channels, value))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        read_clip(&path).map(PyClip).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_clip(&self.0, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// `(frames, height, width, channels)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        (self.0.frames, self.0.height, self.0.width, self.0.channels)
    }

    #[getter]
    fn key_index(&self) -> usize {
        self.0.key_index
    }

    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.data)
    }

    fn get(&self, t: usize, row: usize, col: usize, ch: usize) -> PyResult<u8> {
        let c = &self.0;
        if t >= c.frames || row >= c.height || col >= c.width || ch >= c.channels {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(c.get(t, row, col, ch))
    }
}

/// Temporal mask: one key-frame mask replicated over every frame.
#[pyclass(name = "Mask3D", module = "instmix", frozen)]
struct PyMask3D(Mask3D);

#[pymethods]
impl PyMask3D {
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.frames, self.0.height, self.0.width)
    }

    fn slice_popcount(&self, t: usize) -> PyResult<usize> {
        if t >= self.0.frames {
            return Err(PyValueError::new_err("frame out of range"));
        }
        Ok(self.0.slice_popcount(t))
    }

    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.data)
    }
}

/// Mask of the selected boxes, each expanded by `expand_factor`.
#[pyfunction]
fn build_mask(boxes: Vec<PyBBox>, expand_factor: f64, frames: usize, height: usize, width: usize) -> PyMask3D {
    PyMask3D(mixer::build_mask(&unwrap_boxes(&boxes), expand_factor, frames, height, width))
}

/// Take source voxels where the mask is set and target voxels elsewhere.
#[pyfunction]
fn mix_clips(source: &PyClip, target: &PyClip, mask: &PyMask3D) -> PyResult<PyClip> {
    mixer::mix_clips(&source.0, &target.0, &mask.0).map(PyClip).map_err(value_err)
}

#[pyfunction]
fn downscale_clip(clip: &PyClip) -> PyClip {
    PyClip(mixer::downscale_clip(&clip.0))
}

#[pyfunction]
#[pyo3(signature = (confidences, threshold = 0.9))]
fn compute_lambda(confidences: Vec<f64>, threshold: f64) -> f64 {
    trainer::compute_lambda(&confidences, threshold)
}

/// Learning rate at a global step for a run of `epochs` epochs.
#[pyfunction]
#[pyo3(signature = (step, steps_per_epoch, epochs, lr_base = 1.25e-2, warmup_epochs = 1, lr_final_ratio = 0.01))]
fn lr_at(step: usize, steps_per_epoch: usize, epochs: usize, lr_base: f64, warmup_epochs: usize, lr_final_ratio: f64) -> f64 {
    let cfg = TrainConfig { epochs, lr_base, warmup_epochs, lr_final_ratio, ..TrainConfig::default() };
    trainer::lr_at(step, steps_per_epoch, &cfg)
}

#[pyfunction]
#[pyo3(signature = (clip, bbox, grid = 8))]
fn extract_features(clip: &PyClip, bbox: PyBBox, grid: usize) -> PyResult<Vec<f64>> {
    model::extract_features(&clip.0, &bbox.0, grid).map(|f| f.0).map_err(value_err)
}

/// One-hidden-layer classifier parameters.
#[pyclass(name = "Model", module = "instmix", from_py_object)]
#[derive(Clone)]
struct PyModel(ModelParams);

#[pymethods]
impl PyModel {
    /// Glorot-uniform weights and zero biases from `seed`.
    #[new]
    #[pyo3(signature = (num_classes, channels = 3, grid = 8, hidden_dim = 64, seed = 0))]
    fn new(num_classes: usize, channels: usize, grid: usize, hidden_dim: usize, seed: u64) -> Self {
        let shape = ModelShape { grid, channels, hidden_dim, num_classes };
        PyModel(ModelParams::init(shape, &mut stream(seed, Purpose::Init, 0)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ModelParams::load(&path).map(PyModel).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.shape.input_dim()
    }

    /// Class probabilities for one feature vector.
    fn forward(&self, features: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.forward(&FeatureVector(features)).map_err(value_err)
    }

    /// Weighted mean cross-entropy over `(features, label, weight)` items.
    fn loss(&self, batch: Vec<(Vec<f64>, usize, f64)>) -> PyResult<f64> {
        let feats: Vec<FeatureVector> = batch.iter().map(|(f, _, _)| FeatureVector(f.clone())).collect();
        let items: Vec<(&FeatureVector, usize, f64)> =
            feats.iter().zip(&batch).map(|(f, (_, l, w))| (f, *l, *w)).collect();
        self.0.loss_and_grad(&items).map(|(l, _)| l).map_err(value_err)
    }

    /// Flattened W1, b1, W2, b2.
    fn parameters(&self) -> Vec<f64> {
        self.0.tensors().concat()
    }
}

/// `alpha * teacher + (1 - alpha) * student`, entry-wise.
#[pyfunction]
fn ema_update(teacher: &PyModel, student: &PyModel, alpha: f64) -> PyResult<PyModel> {
    model::ema_update(&teacher.0, &student.0, alpha).map(PyModel).map_err(value_err)
}

/// Non-interpolated AP for one class.
///
/// `predictions` holds `(sample_id, box, class_id, score)` and
/// `ground_truth` holds `(sample_id, box, class_id)`.
#[pyfunction]
#[pyo3(signature = (predictions, ground_truth, class_id, iou_threshold = 0.5))]
fn average_precision_py(
    predictions: Vec<(String, PyBBox, usize, f64)>,
    ground_truth: Vec<(String, PyBBox, usize)>,
    class_id: usize,
    iou_threshold: f64,
) -> PyResult<f64> {
    let preds: Vec<Prediction> = predictions
        .into_iter()
        .map(|(sample_id, b, class_id, score)| Prediction { sample_id, bbox: b.0, class_id, score })
        .collect();
    let gts: Vec<GroundTruth> = ground_truth
        .into_iter()
        .map(|(sample_id, b, class_id)| GroundTruth { sample_id, bbox: b.0, class_id })
        .collect();
    average_precision(&preds, &gts, class_id, iou_threshold).map_err(value_err)
}

/// Run the command-line interface with the given arguments; returns the exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    instmix::cli::run(std::iter::once("instmix".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "instmix")]
pub fn instmix_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyClip>()?;
    m.add_class::<PyMask3D>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(expand_box, m)?)?;
    m.add_function(wrap_pyfunction!(resize_box_half, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(build_mask, m)?)?;
    m.add_function(wrap_pyfunction!(mix_clips, m)?)?;
    m.add_function(wrap_pyfunction!(downscale_clip, m)?)?;
    m.add_function(wrap_pyfunction!(compute_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(ema_update, m)?)?;
    m.add("average_precision", wrap_pyfunction!(average_precision_py, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
