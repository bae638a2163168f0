//! Python bindings: volumes, grading, structure graphs, selection and classifiers.

use std::fmt::Display;
use std::path::PathBuf;

use gbsg_core::brain_graph::{self, GraphParams, SigmaMode, StructureHistogram};
use gbsg_core::classify::{self, EvalReport, ForestParams};
use gbsg_core::featsel::{self, ElasticNetParams, FeatureMatrix, L1Penalty};
use gbsg_core::grading::{self, GradingMap, GradingParams, SearchMethod, Status, TemplateEntry, TrainingLibrary};
use gbsg_core::pipeline::{self, PipelineConfig};
use gbsg_core::volio;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(module = "gbsg", frozen, from_py_object)]
#[derive(Clone)]
pub struct Volume {
    inner: volio::Volume3D,
}

#[pymethods]
impl Volume {
    #[new]
    #[pyo3(signature = (dims, data, spacing = [1.0, 1.0, 1.0]))]
    fn new(dims: [usize; 3], data: Vec<f32>, spacing: [f32; 3]) -> PyResult<Self> {
        let inner = volio::Volume3D::new(dims, spacing, data).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = volio::read_volume(path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        volio::write_volume(&self.inner, path).map_err(value_err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f32; 3] {
        self.inner.spacing()
    }

    /// Voxel values, x fastest.
    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn get(&self, i: usize, j: usize, k: usize) -> PyResult<f32> {
        let d = self.inner.dims();
        if i >= d[0] || j >= d[1] || k >= d[2] {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(i, j, k))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.inner.dims(), self.inner.spacing())
    }
}

#[pyclass(module = "gbsg", frozen, from_py_object)]
#[derive(Clone)]
pub struct LabelMap {
    inner: volio::LabelMap,
}

#[pymethods]
impl LabelMap {
    #[new]
    #[pyo3(signature = (dims, labels, spacing = [1.0, 1.0, 1.0]))]
    fn new(dims: [usize; 3], labels: Vec<u32>, spacing: [f32; 3]) -> PyResult<Self> {
        let inner = volio::LabelMap::new(dims, spacing, labels).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = volio::read_labelmap(path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        volio::write_labelmap(&self.inner, path).map_err(value_err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels().to_vec()
    }

    fn structure_ids(&self) -> Vec<u32> {
        self.inner.structure_ids()
    }

    fn __repr__(&self) -> String {
        format!("LabelMap(dims={:?})", self.inner.dims())
    }
}

/// Per-voxel grades; ungraded voxels read as `None`.
#[pyclass(module = "gbsg", frozen)]
pub struct Grades {
    inner: GradingMap,
}

#[pymethods]
impl Grades {
    #[staticmethod]
    fn load(grades_path: PathBuf, mask_path: PathBuf) -> PyResult<Self> {
        let inner = GradingMap::load(grades_path, mask_path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, grades_path: PathBuf, mask_path: PathBuf) -> PyResult<()> {
        self.inner.save(grades_path, mask_path).map_err(value_err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    fn values(&self) -> Vec<Option<f32>> {
        (0..self.inner.mask().len()).map(|v| self.inner.grade(v)).collect()
    }

    fn volume(&self) -> Volume {
        Volume {
            inner: self.inner.grades().clone(),
        }
    }

    fn graded_count(&self) -> usize {
        self.inner.graded_count()
    }
}

fn status_of(s: &str) -> PyResult<Status> {
    match s {
        "CN" => Ok(Status::Cn),
        "AD" => Ok(Status::Ad),
        _ => Err(PyValueError::new_err(format!("template status must be CN or AD, got {s}"))),
    }
}

/// Grades `volume` against `(volume, labels, "CN" | "AD")` templates.
#[pyfunction]
#[pyo3(signature = (volume, labels, templates, patch_radius = 2, k = 50, search_window = 3, method = "exact", seed = 0, epsilon = None))]
#[allow(clippy::too_many_arguments)]
fn grade(
    py: Python<'_>,
    volume: &Volume,
    labels: &LabelMap,
    templates: Vec<(Volume, LabelMap, String)>,
    patch_radius: usize,
    k: usize,
    search_window: usize,
    method: &str,
    seed: u64,
    epsilon: Option<f64>,
) -> PyResult<Grades> {
    let entries = templates
        .into_iter()
        .map(|(v, l, s)| TemplateEntry::new(v.inner, l.inner, status_of(&s)?).map_err(value_err))
        .collect::<PyResult<Vec<_>>>()?;
    let lib = TrainingLibrary::new(entries).map_err(value_err)?;
    let params = GradingParams {
        patch_radius,
        k,
        search_window,
        epsilon,
        method: method.parse::<SearchMethod>().map_err(value_err)?,
        seed,
        ..Default::default()
    };
    let (v, l) = (&volume.inner, &labels.inner);
    let inner = py
        .detach(|| grading::grade_volume(v, l, &lib, &params))
        .map_err(value_err)?;
    Ok(Grades { inner })
}

/// Weighted vote of `(distance², ±1)` neighbors.
#[pyfunction]
#[pyo3(signature = (neighbors, epsilon = 1e-12))]
fn grade_voxel(neighbors: Vec<(f64, i32)>, epsilon: f64) -> PyResult<f64> {
    let nn = neighbors
        .into_iter()
        .map(|(d, s)| Status::from_value(s).map(|s| (d, s)).ok_or_else(|| PyValueError::new_err("status must be +1 or -1")))
        .collect::<PyResult<Vec<_>>>()?;
    grading::grade_voxel(&nn, epsilon).map_err(value_err)
}

#[pyfunction]
fn sturges_bins(n: usize) -> usize {
    brain_graph::sturges_bins(n)
}

/// Distance between two normalized histograms on [-1, 1].
#[pyfunction]
fn wasserstein1(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let ha = StructureHistogram::from_masses(0, a, 0).map_err(value_err)?;
    let hb = StructureHistogram::from_masses(0, b, 0).map_err(value_err)?;
    brain_graph::wasserstein1(&ha, &hb).map_err(value_err)
}

#[pyfunction]
fn edge_weight(d: f64, sigma: f64) -> f64 {
    brain_graph::edge_weight(d, sigma)
}

/// Structure graph of one graded subject, as a dict.
#[pyfunction]
#[pyo3(signature = (grades, labels, sigma = None, min_voxels = 1))]
fn build_graph<'py>(
    py: Python<'py>,
    grades: &Grades,
    labels: &LabelMap,
    sigma: Option<f64>,
    min_voxels: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let params = GraphParams {
        sigma: sigma.map_or(SigmaMode::MedianHeuristic, SigmaMode::Fixed),
        min_voxels,
    };
    let g = brain_graph::build_graph(&grades.inner, &labels.inner, &params).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("structure_ids", &g.structure_ids)?;
    d.set_item("voxel_counts", &g.voxel_counts)?;
    d.set_item("vertex_values", &g.vertex_values)?;
    d.set_item("edge_distances", &g.edge_distances)?;
    d.set_item("edge_weights", &g.edge_weights)?;
    d.set_item("sigma", g.sigma)?;
    d.set_item("dropped", &g.dropped)?;
    Ok(d)
}

/// Elastic-net selection on ±1 labels. Give either `lambda1` or `target_nonzeros`.
#[pyfunction]
#[pyo3(signature = (rows, y, lambda1 = None, target_nonzeros = 50, lambda2 = 1.0))]
fn elastic_net<'py>(
    py: Python<'py>,
    rows: Vec<Vec<f64>>,
    y: Vec<f64>,
    lambda1: Option<f64>,
    target_nonzeros: usize,
    lambda2: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = rows.first().map_or(0, Vec::len);
    let ids = (0..rows.len()).map(|i| i.to_string()).collect();
    let names = (0..p).map(|c| format!("f{c}")).collect();
    let x = FeatureMatrix::from_rows(ids, names, &rows).map_err(value_err)?;
    let params = ElasticNetParams {
        l1: lambda1.map_or(L1Penalty::TargetNonzeros(target_nonzeros), L1Penalty::Fixed),
        lambda2,
        ..Default::default()
    };
    let m = featsel::elastic_net_fit(&x, &y, &params).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("selected", &m.selected)?;
    d.set_item("coefficients", &m.coefficients)?;
    d.set_item("lambda1", m.lambda1)?;
    d.set_item("lambda2", m.lambda2)?;
    d.set_item("converged", m.converged)?;
    d.set_item("target_met", m.target_met)?;
    Ok(d)
}

#[pyclass(module = "gbsg", frozen)]
pub struct Svm {
    inner: classify::SvmModel,
}

#[pymethods]
impl Svm {
    /// Linear soft-margin SVM; `c=None` picks C by cross-validated grid search.
    #[staticmethod]
    #[pyo3(signature = (rows, y, c = None, folds = 10, seed = 0))]
    fn train(py: Python<'_>, rows: Vec<Vec<f64>>, y: Vec<f64>, c: Option<f64>, folds: usize, seed: u64) -> PyResult<Self> {
        let inner = py
            .detach(|| match c {
                Some(c) => classify::svm_train(&rows, &y, c),
                None => classify::svm_grid_search(&rows, &y, folds, seed).map(|g| g.model),
            })
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict(&rows).map_err(value_err)
    }

    fn margins(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.margins(&rows).map_err(value_err)
    }

    #[getter]
    fn w(&self) -> Vec<f64> {
        self.inner.w.clone()
    }

    #[getter]
    fn b(&self) -> f64 {
        self.inner.b
    }

    #[getter]
    fn c(&self) -> f64 {
        self.inner.c
    }

    #[getter]
    fn duality_gap(&self) -> f64 {
        self.inner.duality_gap
    }
}

#[pyclass(module = "gbsg", frozen)]
pub struct Forest {
    inner: classify::ForestModel,
}

#[pymethods]
impl Forest {
    #[staticmethod]
    #[pyo3(signature = (rows, y, n_trees = 500, seed = 0, mtry = None, min_leaf = 1, max_depth = None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        rows: Vec<Vec<f64>>,
        y: Vec<f64>,
        n_trees: usize,
        seed: u64,
        mtry: Option<usize>,
        min_leaf: usize,
        max_depth: Option<usize>,
    ) -> PyResult<Self> {
        let params = ForestParams {
            n_trees,
            mtry,
            min_leaf,
            max_depth,
        };
        let inner = py
            .detach(|| classify::rf_train(&rows, &y, &params, seed))
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict(&rows).map_err(value_err)
    }

    fn vote_fraction(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.vote_fraction(&rows).map_err(value_err)
    }

    #[getter]
    fn oob_accuracy(&self) -> Option<f64> {
        self.inner.oob_accuracy
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.trees.len()
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("acc", r.mean.acc)?;
    d.set_item("sen", r.mean.sen)?;
    d.set_item("spe", r.mean.spe)?;
    d.set_item("acc_sd", r.sd.acc)?;
    d.set_item("runs", r.runs.len())?;
    let m = r.first();
    d.set_item("tp", m.tp)?;
    d.set_item("fp", m.fp)?;
    d.set_item("tn", m.tn)?;
    d.set_item("fn", m.fn_)?;
    Ok(d)
}

/// Accuracy, sensitivity and specificity of `preds` against `truth`.
#[pyfunction]
#[pyo3(signature = (preds, truth, positive = -1.0))]
fn evaluate<'py>(py: Python<'py>, preds: Vec<f64>, truth: Vec<f64>, positive: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = classify::evaluate(&preds, &truth, &positive).map_err(value_err)?;
    report_dict(py, &r)
}

#[pyclass(module = "gbsg")]
pub struct Config {
    inner: PipelineConfig,
}

#[pymethods]
impl Config {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = PipelineConfig::load(path).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, base_dir = PathBuf::from(".")))]
    fn parse(text: &str, base_dir: PathBuf) -> PyResult<Self> {
        let inner = PipelineConfig::parse(text, &base_dir).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn threads(&self) -> usize {
        self.inner.threads
    }

    #[setter]
    fn set_threads(&mut self, threads: usize) {
        self.inner.threads = threads;
    }

    #[getter]
    fn work_dir(&self) -> PathBuf {
        self.inner.work_dir.clone()
    }

    #[getter]
    fn manifest(&self) -> Option<PathBuf> {
        self.inner.manifest.clone()
    }

    #[setter]
    fn set_manifest(&mut self, path: Option<PathBuf>) {
        self.inner.manifest = path;
    }

    #[getter]
    fn grading_method(&self) -> &'static str {
        self.inner.grading.method.as_str()
    }

    #[setter]
    fn set_grading_method(&mut self, method: &str) -> PyResult<()> {
        self.inner.grading.method = method.parse().map_err(value_err)?;
        Ok(())
    }
}

/// Writes the configured synthetic cohort and points `config` at its manifest.
#[pyfunction]
fn run_synth(py: Python<'_>, config: &mut Config) -> PyResult<PathBuf> {
    let cfg = &config.inner;
    let out = py.detach(|| pipeline::run_synth(cfg)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    config.inner.manifest = Some(out.manifest.clone());
    Ok(out.manifest)
}

/// Runs every stage; returns the report text and per-classifier results.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let out = py
        .detach(|| pipeline::run_pipeline(cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("report", &out.report)?;
    d.set_item("report_path", &out.report_path)?;
    if let Some((c, rep, _)) = &out.outcome.svm {
        let s = report_dict(py, rep)?;
        s.set_item("c", c)?;
        d.set_item("svm", s)?;
    }
    if let Some((rep, oob)) = &out.outcome.rf {
        let r = report_dict(py, rep)?;
        r.set_item("oob", oob)?;
        d.set_item("rf", r)?;
    }
    Ok(d)
}

#[pymodule]
fn gbsg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Volume>()?;
    m.add_class::<LabelMap>()?;
    m.add_class::<Grades>()?;
    m.add_class::<Svm>()?;
    m.add_class::<Forest>()?;
    m.add_class::<Config>()?;
    m.add_function(wrap_pyfunction!(grade, m)?)?;
    m.add_function(wrap_pyfunction!(grade_voxel, m)?)?;
    m.add_function(wrap_pyfunction!(sturges_bins, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(edge_weight, m)?)?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(elastic_net, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("UNGRADED", grading::UNGRADED)?;
    Ok(())
}
