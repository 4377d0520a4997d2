//! Python bindings: `import catp`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

use catp_core::compensation::{aggregate_average, aggregate_high, aggregate_low};
use catp_core::config::parse_config as parse_config_text;
use catp_core::cost::{self, parse_grid, StageTokenCount};
use catp_core::harness::{self, compute_mae, default_image, load_model, to_json, DiskScene};
use catp_core::image::read_pnm;
use catp_core::pruning::{self, partition_tokens as partition};
use catp_core::refill::PredictionMap;
use catp_core::weights::write_weight_file;
use catp_core::{CatpModel, CompensationMode, Error, Image, Matrix, Origin, PruneThresholds, RunConfig, ScoringHead};

create_exception!(catp, CatpError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        other => CatpError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for catp_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_py_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let bytes = to_json(value).py()?;
    let text = String::from_utf8(bytes).expect("serde_json emits UTF-8");
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).py()
}

fn parse_mode(mode: &str) -> PyResult<CompensationMode> {
    mode.parse().py()
}

/// An image given as a PGM/PPM path, an `h x w` list of gray values or an
/// `h x w x c` nested list, all in `[0, 1]`.
#[derive(FromPyObject)]
enum ImageArg {
    Path(PathBuf),
    Gray(Vec<Vec<f64>>),
    Color(Vec<Vec<Vec<f64>>>),
}

impl ImageArg {
    fn load(self) -> PyResult<Image> {
        match self {
            ImageArg::Path(p) => read_pnm(&p).py(),
            ImageArg::Gray(rows) => {
                let h = rows.len();
                let w = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != w) {
                    return Err(PyValueError::new_err("ragged image rows"));
                }
                Image::new(h, w, 1, rows.concat()).py()
            }
            ImageArg::Color(rows) => {
                let h = rows.len();
                let w = rows.first().map_or(0, Vec::len);
                let c = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
                let mut data = Vec::with_capacity(h * w * c);
                for r in &rows {
                    if r.len() != w {
                        return Err(PyValueError::new_err("ragged image rows"));
                    }
                    for px in r {
                        if px.len() != c {
                            return Err(PyValueError::new_err("pixels differ in channel count"));
                        }
                        data.extend_from_slice(px);
                    }
                }
                Image::new(h, w, c, data).py()
            }
        }
    }
}

/// Parsed `key = value` run configuration.
#[pyclass(name = "Config", module = "catp", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_config_text(text).py()?,
        })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: catp_core::config::read_config(&path).py()?,
        })
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
    fn theta_d(&self) -> f64 {
        self.inner.thresholds.theta_d
    }

    #[getter]
    fn theta_u(&self) -> f64 {
        self.inner.thresholds.theta_u
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.thresholds.tau
    }

    #[getter]
    fn compensation(&self) -> String {
        self.inner.compensation.to_string()
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let e = &self.inner.encoder;
        (e.image_h, e.image_w, e.channels)
    }

    #[getter]
    fn grid_shape(&self) -> (usize, usize) {
        (self.inner.encoder.grid_h(), self.inner.encoder.grid_w())
    }

    #[getter]
    fn num_stages(&self) -> usize {
        self.inner.encoder.num_stages()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        let e = &self.inner.encoder;
        format!(
            "Config({}x{}x{}, P={}, C={}, L={}, boundaries={:?}, thresholds={}/{}, tau={}, {})",
            e.image_h,
            e.image_w,
            e.channels,
            e.patch_size,
            e.embed_dim,
            e.num_layers,
            e.stage_boundaries,
            self.inner.thresholds.theta_d,
            self.inner.thresholds.theta_u,
            self.inner.thresholds.tau,
            self.inner.compensation
        )
    }
}

/// A model bound to a configuration: weights come from `weights_path` when
/// set, the rest from the seed.
#[pyclass(name = "Pipeline", module = "catp")]
struct PyPipeline {
    config: RunConfig,
    model: CatpModel,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<PyConfig>) -> PyResult<Self> {
        let config = config.map(|c| c.inner).unwrap_or_default();
        let model = load_model(&config).py()?;
        Ok(Self { config, model })
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.config.clone(),
        }
    }

    /// Replaces the scoring head for the boundary entering `stage` (2..=S).
    fn set_head(&mut self, stage: usize, weight: Vec<f64>, bias: f64) -> PyResult<()> {
        let s = self.config.encoder.num_stages();
        if !(2..=s).contains(&stage) {
            return Err(PyValueError::new_err(format!("stage must be in 2..={s}")));
        }
        if weight.len() != self.config.encoder.embed_dim {
            return Err(PyValueError::new_err(format!(
                "head weight needs {} values",
                self.config.encoder.embed_dim
            )));
        }
        self.model.heads[stage - 2] = ScoringHead { weight, bias };
        Ok(())
    }

    fn head(&self, stage: usize) -> PyResult<(Vec<f64>, f64)> {
        let h = stage
            .checked_sub(2)
            .and_then(|i| self.model.heads.get(i))
            .ok_or_else(|| PyValueError::new_err("no scoring head for that stage"))?;
        Ok((h.weight.clone(), h.bias))
    }

    /// Runs one image. Returns the report as a dict; with `out_dir` the
    /// prediction, masks, heatmaps and report.json are written there too.
    #[pyo3(signature = (image, out_dir = None))]
    fn run<'py>(&self, py: Python<'py>, image: ImageArg, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        let image = image.load()?;
        let art = py.detach(|| harness::run(&self.config, &self.model, &image)).py()?;
        if let Some(dir) = out_dir {
            art.write_to(&dir).py()?;
        }
        to_py_json(py, &art.report)
    }

    /// Prediction map as `height` rows of `width` values.
    fn predict(&self, py: Python<'_>, image: ImageArg) -> PyResult<Vec<Vec<f64>>> {
        let image = image.load()?;
        let out = py
            .detach(|| catp_core::forward(&self.model, &image, &self.config.thresholds, self.config.compensation))
            .py()?;
        let p = out.prediction;
        Ok(p.values.chunks(p.width.max(1)).map(<[f64]>::to_vec).collect())
    }

    /// Threshold sweep over `"d/u,d/u,..."` pairs. Without an image a
    /// synthetic disk scene is used.
    #[pyo3(signature = (grid, image = None))]
    fn sweep<'py>(&self, py: Python<'py>, grid: &str, image: Option<ImageArg>) -> PyResult<Bound<'py, PyAny>> {
        let pairs = parse_grid(grid).py()?;
        let image = match image {
            Some(i) => i.load()?,
            None => default_image(&self.config.encoder, self.config.seed),
        };
        let report = py.detach(|| harness::sweep(&self.config, &self.model, &image, &pairs));
        to_py_json(py, &report)
    }

    fn save_weights(&self, path: PathBuf) -> PyResult<()> {
        write_weight_file(&path, &self.model.to_weight_map().py()?).py()
    }
}

/// Splits scores into `(low, mid, high)` slot lists.
#[pyfunction]
#[pyo3(signature = (scores, theta_d = 0.3, theta_u = 0.7))]
fn partition_tokens(scores: Vec<f64>, theta_d: f64, theta_u: f64) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let thr = PruneThresholds::new(theta_d, theta_u, pruning::DEFAULT_TAU).py()?;
    let p = partition(&scores, &thr);
    Ok((p.low, p.mid, p.high))
}

#[pyfunction]
#[pyo3(signature = (patches, weight, bias = 0.0, tau = 10.0))]
fn score_tokens(patches: Vec<Vec<f64>>, weight: Vec<f64>, bias: f64, tau: f64) -> PyResult<Vec<f64>> {
    pruning::score_tokens(&matrix(patches)?, &ScoringHead { weight, bias }, tau).py()
}

/// Derivative of each token's score with respect to its own features.
#[pyfunction]
#[pyo3(signature = (patches, weight, bias = 0.0, tau = 10.0))]
fn score_jacobian(patches: Vec<Vec<f64>>, weight: Vec<f64>, bias: f64, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let jac = pruning::score_jacobian(&matrix(patches)?, &ScoringHead { weight, bias }, tau).py()?;
    Ok(jac.row_iter().map(<[f64]>::to_vec).collect())
}

/// Prototype of a pruned subset: `(feature, weights)`, or `None` when the
/// subset is empty.
#[pyfunction]
#[pyo3(signature = (features, scores, origin, mode = "weighted"))]
fn aggregate(
    features: Vec<Vec<f64>>,
    scores: Vec<f64>,
    origin: &str,
    mode: &str,
) -> PyResult<Option<(Vec<f64>, Vec<f64>)>> {
    let x = if features.is_empty() {
        Matrix::zeros(0, 0)
    } else {
        matrix(features)?
    };
    let origin = match origin {
        "low" => Origin::Low,
        "high" => Origin::High,
        other => return Err(PyValueError::new_err(format!("origin must be low or high, got {other:?}"))),
    };
    let proto = match (parse_mode(mode)?, origin) {
        (CompensationMode::Weighted, Origin::Low) => aggregate_low(&x, &scores),
        (CompensationMode::Weighted, Origin::High) => aggregate_high(&x, &scores),
        (CompensationMode::Average, o) => aggregate_average(&x, &scores, o),
        (CompensationMode::None, _) => return Ok(None),
    }
    .py()?;
    Ok(proto.map(|p| (p.feature, p.weights)))
}

#[pyfunction]
#[pyo3(signature = (n_tokens, embed_dim, num_heads, mlp_ratio = 4.0))]
fn layer_flops(n_tokens: u64, embed_dim: u64, num_heads: u64, mlp_ratio: f64) -> PyResult<u64> {
    cost::layer_flops(n_tokens, embed_dim, num_heads, mlp_ratio).py()
}

/// Cost report for per-stage `(patches, prototypes)` counts.
#[pyfunction]
#[pyo3(signature = (config, stage_counts, mode = None))]
fn pipeline_flops<'py>(
    py: Python<'py>,
    config: &PyConfig,
    stage_counts: Vec<(usize, usize)>,
    mode: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = mode.map_or(Ok(config.inner.compensation), parse_mode)?;
    let counts: Vec<StageTokenCount> = stage_counts
        .into_iter()
        .map(|(patches, prototypes)| StageTokenCount { patches, prototypes })
        .collect();
    let report = cost::pipeline_flops(&config.inner.encoder, &counts, mode).py()?;
    to_py_json(py, &report)
}

#[pyfunction]
#[pyo3(signature = (config = None, draws = 100))]
fn gradcheck<'py>(py: Python<'py>, config: Option<&PyConfig>, draws: usize) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let report = py.detach(|| harness::gradcheck(&cfg, draws)).py()?;
    to_py_json(py, &report)
}

/// Mean absolute error between two gray image files.
#[pyfunction]
fn mae(pred: PathBuf, reference: PathBuf) -> PyResult<f64> {
    let p = PredictionMap::from_image(&read_pnm(&pred).py()?).py()?;
    compute_mae(&p, &read_pnm(&reference).py()?).py()
}

/// Synthetic disk scene as an `h x w x c` nested list.
#[pyfunction]
#[pyo3(signature = (height, width, channels = 3, seed = 0))]
fn disk_scene(height: usize, width: usize, channels: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let img = DiskScene::generate(height, width, channels, seed).image;
    (0..height)
        .map(|y| (0..width).map(|x| (0..channels).map(|c| img.get(y, x, c)).collect()).collect())
        .collect()
}

#[pymodule]
fn catp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CatpError", m.py().get_type::<CatpError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(partition_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(score_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(score_jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(layer_flops, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline_flops, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(disk_scene, m)?)?;
    Ok(())
}
