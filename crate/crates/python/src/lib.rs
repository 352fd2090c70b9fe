//! Python bindings: configuration, datasets, training, evaluation, the exact
//! sampler, the AP metric and the oracle suites.

use std::path::PathBuf;

use ::discwsod::checkpoint::Checkpoint;
use ::discwsod::commands::{self, Command, Overrides};
use ::discwsod::config::RunConfig;
use ::discwsod::evalmetrics::{self, evaluate_model, Detection, EvalConfig, EvalReport, GtBox};
use ::discwsod::sampler;
use ::discwsod::synthdata;
use ::discwsod::trainer::{RoundMetrics, Trainer as CoreTrainer};
use ::discwsod::verify::{self, VerifyOptions};
use ::discwsod::{BoxGeometry, Error, ImageAnnotation, ImageSample, ScoreMatrix};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Corners = [f64; 4];

fn geometry(c: Corners) -> PyResult<BoxGeometry> {
    BoxGeometry::from_corners(c[0], c[1], c[2], c[3]).map_err(py_err)
}

/// Run configuration. `Config()` is the default; tables and keys follow
/// the TOML layout of `to_toml()`.
#[pyclass(module = "discwsod", skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml(text).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Copy with command-line style overrides applied and validated.
    #[pyo3(signature = (*, seed=None, rounds=None, lambda_=None, gamma=None, k=None, epsilon=None))]
    fn with_overrides(
        &self,
        seed: Option<u64>,
        rounds: Option<usize>,
        lambda_: Option<f64>,
        gamma: Option<f64>,
        k: Option<usize>,
        epsilon: Option<f64>,
    ) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        Overrides { seed, rounds, lambda: lambda_, gamma, k, epsilon, ..Overrides::default() }
            .apply(&mut inner, Command::Train)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.inner.hash())
    }
}

/// A list of images with proposals, features, annotations and optional
/// ground truth.
#[pyclass(module = "discwsod", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    images: Vec<ImageSample>,
}

#[pymethods]
impl Dataset {
    /// `n` images from the scene table of `config`, ids `0..n`.
    #[staticmethod]
    fn generate(config: &Config, n: usize) -> PyResult<Self> {
        synthdata::generate_dataset(&config.inner.scene, n).map(|images| Self { images }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        synthdata::load_dataset(&path).map(|images| Self { images }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        synthdata::save_dataset(&self.images, &path).map_err(py_err)
    }

    fn to_weak(&self) -> Self {
        Self { images: synthdata::to_weak(&self.images) }
    }

    /// Fraction of ground-truth objects covered by a proposal at `min_iou`.
    #[pyo3(signature = (min_iou=0.5))]
    fn recall(&self, min_iou: f64) -> f64 {
        synthdata::proposal_recall(&self.images, min_iou)
    }

    fn __len__(&self) -> usize {
        self.images.len()
    }

    /// One image as a dict: id, boxes (corners), features, annotation
    /// (presence per class) and ground_truth (list of (class, corners), or
    /// None).
    fn image<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyDict>> {
        let s = self
            .images
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range for {} images", self.images.len())))?;
        let d = PyDict::new(py);
        d.set_item("id", s.id)?;
        d.set_item("boxes", s.proposals.iter().map(|p| p.geometry.corners()).collect::<Vec<_>>())?;
        d.set_item("features", s.proposals.iter().map(|p| p.features.clone()).collect::<Vec<_>>())?;
        d.set_item(
            "annotation",
            (1..=s.annotation.num_classes()).map(|c| s.annotation.contains(c)).collect::<Vec<_>>(),
        )?;
        let gt = s.ground_truth.as_ref().map(|g| g.iter().map(|g| (g.class, g.geometry.corners())).collect::<Vec<_>>());
        d.set_item("ground_truth", gt)?;
        Ok(d)
    }
}

fn round_dict<'py>(py: Python<'py>, m: &RoundMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", m.round)?;
    d.set_item("eta", m.eta)?;
    d.set_item("cross", m.cross)?;
    d.set_item("self_cond", m.self_cond)?;
    d.set_item("self_pred", m.self_pred)?;
    d.set_item("disc", m.disc)?;
    d.set_item("pred_objective", m.pred_objective)?;
    d.set_item("pseudo_boxes", m.pseudo_boxes)?;
    d.set_item("corloc", m.corloc)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ap", r.ap.clone())?;
    d.set_item("map", r.map)?;
    d.set_item("corloc", r.corloc.per_class.clone())?;
    d.set_item("mean_corloc", r.corloc.mean)?;
    Ok(d)
}

/// Coordinate-descent trainer over a dataset; ground truth, when present,
/// only feeds the per-round CorLoc monitor.
#[pyclass(module = "discwsod")]
struct Trainer {
    inner: CoreTrainer,
    eval: EvalConfig,
    config_hash: String,
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(dataset: &Dataset, config: &Config) -> PyResult<Self> {
        let inner = CoreTrainer::new(&dataset.images, config.inner.train.clone()).map_err(py_err)?;
        Ok(Self { inner, eval: config.inner.eval, config_hash: config.inner.hash() })
    }

    #[getter]
    fn rounds_done(&self) -> usize {
        self.inner.rounds_done
    }

    fn is_finished(&self) -> bool {
        self.inner.is_finished()
    }

    /// Runs one outer round and returns its metrics.
    fn step_round<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = self.inner.step_round().map_err(py_err)?;
        round_dict(py, &m)
    }

    /// Runs the remaining rounds; returns their metrics in order.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut out = Vec::new();
        while !self.inner.is_finished() {
            let m = self.inner.step_round().map_err(py_err)?;
            out.push(round_dict(py, &m)?);
        }
        Ok(out)
    }

    /// AP, mAP and CorLoc of the prediction head on a dataset with ground
    /// truth, under the configuration's eval table.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let r = evaluate_model(&self.inner.pred, &dataset.images, &self.eval).map_err(py_err)?;
        report_dict(py, &r)
    }

    /// Writes a checkpoint and its sidecar.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint {
            pred: self.inner.pred.clone(),
            cond: self.inner.cond.clone(),
            rounds_done: self.inner.rounds_done,
        };
        ck.save(&path, &self.config_hash).map_err(py_err)
    }
}

fn problem(scores: Vec<Vec<f64>>, present: Vec<bool>) -> PyResult<(ScoreMatrix, ImageAnnotation)> {
    let g = ScoreMatrix::from_rows_unit(&scores).map_err(py_err)?;
    Ok((g, ImageAnnotation::new(present)))
}

/// Highest-scoring class vector that labels every present class at least
/// once. `scores[i][c]` scores class `c` (0 = background) for proposal `i`.
#[pyfunction]
fn constrained_argmax(scores: Vec<Vec<f64>>, present: Vec<bool>) -> PyResult<Vec<usize>> {
    let (g, a) = problem(scores, present)?;
    sampler::constrained_argmax(&g, &a).map(|y| y.classes).map_err(py_err)
}

/// Exhaustive reference for `constrained_argmax` on small instances.
#[pyfunction]
fn brute_force_argmax(scores: Vec<Vec<f64>>, present: Vec<bool>) -> PyResult<Vec<usize>> {
    let (g, a) = problem(scores, present)?;
    sampler::brute_force_argmax(&g, &a).map(|y| y.classes).map_err(py_err)
}

#[pyfunction]
fn iou(a: Corners, b: Corners) -> PyResult<f64> {
    Ok(evalmetrics::iou(&geometry(a)?, &geometry(b)?))
}

/// Single-class AP. Detections are `(image_id, corners, score)`, ground
/// truth `(image_id, corners)`. Returns None without ground truth.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou_thresh=0.5))]
fn average_precision(
    detections: Vec<(u64, Corners, f64)>,
    ground_truth: Vec<(u64, Corners)>,
    iou_thresh: f64,
) -> PyResult<Option<f64>> {
    let dets = detections
        .into_iter()
        .enumerate()
        .map(|(index, (image_id, c, score))| Ok(Detection { image_id, index, class: 1, geometry: geometry(c)?, score }))
        .collect::<PyResult<Vec<_>>>()?;
    let gts = ground_truth
        .into_iter()
        .map(|(image_id, c)| Ok(GtBox { image_id, class: 1, geometry: geometry(c)? }))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(evalmetrics::average_precision(&dets, &gts, iou_thresh))
}

/// Oracle suites at their default sizes; one dict per check.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn run_checks<'py>(py: Python<'py>, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let results = verify::run_all(&VerifyOptions { seed, ..VerifyOptions::default() }).map_err(py_err)?;
    results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("check", r.name)?;
            d.set_item("instances", r.instances)?;
            d.set_item("max_error", r.max_error)?;
            d.set_item("tolerance", r.tolerance)?;
            d.set_item("passed", r.passed)?;
            Ok(d)
        })
        .collect()
}

/// Writes train.jsonl and eval.jsonl under `out`; returns the artifacts.
#[pyfunction]
fn cmd_gen_data(config: &Config, out: PathBuf) -> PyResult<Vec<String>> {
    commands::gen_data(&config.inner, &out).map(|m| m.artifacts).map_err(py_err)
}

/// Trains on `dataset`, resuming from `checkpoint` if given.
#[pyfunction]
#[pyo3(signature = (config, dataset, out, checkpoint=None))]
fn cmd_train(config: &Config, dataset: PathBuf, out: PathBuf, checkpoint: Option<PathBuf>) -> PyResult<Vec<String>> {
    commands::train(&config.inner, &dataset, checkpoint.as_deref(), &out).map(|m| m.artifacts).map_err(py_err)
}

#[pyfunction]
fn cmd_eval<'py>(
    py: Python<'py>,
    config: &Config,
    checkpoint: PathBuf,
    dataset: PathBuf,
    out: PathBuf,
) -> PyResult<Bound<'py, PyDict>> {
    let (_, r) = commands::eval(&config.inner, &checkpoint, &dataset, &out).map_err(py_err)?;
    report_dict(py, &r)
}

#[pymodule]
#[pyo3(name = "discwsod")]
fn python_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(constrained_argmax, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_argmax, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_train, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_eval, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_wrappers_agree() {
        let scores = vec![vec![1.0, 0.0, -1.0], vec![2.0, 0.5, 0.0], vec![0.0, -3.0, 0.1]];
        let present = vec![true, true];
        let y = constrained_argmax(scores.clone(), present.clone()).unwrap();
        assert_eq!(y, brute_force_argmax(scores, present).unwrap());
        assert!(y.contains(&1) && y.contains(&2));
    }

    #[test]
    fn ap_wrapper_reproduces_the_hand_example() {
        let (g1, g2) = ([0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]);
        let ap = average_precision(
            vec![(0, g1, 0.9), (0, [50.0, 50.0, 60.0, 60.0], 0.8), (0, g2, 0.7)],
            vec![(0, g1), (0, g2)],
            0.5,
        )
        .unwrap()
        .unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(vec![], vec![], 0.5).unwrap(), None);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 1.0, 3.0]).is_err());
        assert!(constrained_argmax(vec![vec![0.0, 1.0]], vec![true, true]).is_err());
    }
}
