//! Python module `trailnav`.
//!
//! Vectors cross the boundary as 3-element lists, categories as the strings
//! `"left"`, `"center"`, `"right"`, and experiment outputs as `bytes`.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use trailnav::control::{turn_angle as core_turn_angle, ControlConfig};
use trailnav::geo::{self, Vec3};
use trailnav::loss::{self, LossWeights};
use trailnav::perception::{oracle_predict as core_oracle, Category, OracleParams, SoftLabel3, TrailEstimate};
use trailnav::trail::{self, Point2, RelativeState};
use trailnav::{config, experiments, scale_align, sim};

fn py_err(e: trailnav::Error) -> PyErr {
    match e {
        trailnav::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn category(name: &str) -> PyResult<Category> {
    Category::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown category `{name}`")))
}

fn label(p: [f64; 3]) -> PyResult<SoftLabel3> {
    SoftLabel3::new(p).map_err(py_err)
}

#[pyclass(name = "SimilarityTransform", frozen, from_py_object)]
#[derive(Clone)]
struct PySimilarity(geo::SimilarityTransform);

#[pymethods]
impl PySimilarity {
    #[new]
    fn new(scale: f64, rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
        let r = nalgebra::Matrix3::from_fn(|i, j| rotation[i][j]);
        geo::SimilarityTransform::new(scale, r, Vec3::from(translation))
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(geo::SimilarityTransform::identity())
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale()
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let r = self.0.rotation();
        std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]))
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        (*self.0.translation()).into()
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.apply(&Vec3::from(p)).into()
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// `self ∘ other`.
    fn compose(&self, other: &PySimilarity) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn __repr__(&self) -> String {
        format!("SimilarityTransform(scale={}, translation={:?})", self.0.scale(), self.translation())
    }
}

/// Least-squares similarity mapping `src` onto `dst`.
#[pyfunction]
fn umeyama(src: Vec<[f64; 3]>, dst: Vec<[f64; 3]>) -> PyResult<PySimilarity> {
    if src.len() != dst.len() {
        return Err(PyValueError::new_err("src and dst must have equal length"));
    }
    let s: Vec<Vec3> = src.into_iter().map(Vec3::from).collect();
    let d: Vec<Vec3> = dst.into_iter().map(Vec3::from).collect();
    scale_align::umeyama(&s, &d).map(PySimilarity).map_err(py_err)
}

#[pyfunction]
fn enu_to_ned(p: [f64; 3]) -> [f64; 3] {
    geo::enu_to_ned(&Vec3::from(p)).into()
}

#[pyfunction]
fn ned_to_enu(p: [f64; 3]) -> [f64; 3] {
    geo::ned_to_enu(&Vec3::from(p)).into()
}

#[pyclass(name = "Trail", frozen, from_py_object)]
#[derive(Clone)]
struct PyTrail(trail::Trail);

#[pymethods]
impl PyTrail {
    #[new]
    fn new(centerline: Vec<[f64; 2]>, width: f64) -> PyResult<Self> {
        let pts = centerline.into_iter().map(Point2::from).collect();
        trail::Trail::new(pts, width).map(Self).map_err(py_err)
    }

    /// Built-in trail by name.
    #[staticmethod]
    fn scenario(name: &str) -> PyResult<Self> {
        trail::make_scenario_by_name(name).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        trail::Trail::from_text(text).map(Self).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn length(&self) -> f64 {
        self.0.length()
    }

    #[getter]
    fn width(&self) -> f64 {
        self.0.width()
    }

    #[getter]
    fn centerline(&self) -> Vec<[f64; 2]> {
        self.0.centerline().iter().map(|p| [p.x, p.y]).collect()
    }

    /// `(s, d, heading)` of the closest centerline point.
    fn project(&self, x: f64, y: f64) -> (f64, f64, f64) {
        trail::project_to_centerline(&self.0, &Point2::new(x, y))
    }

    /// `(d, psi, s)` of an ENU pose.
    fn relative_state(&self, x: f64, y: f64, yaw: f64) -> PyResult<(f64, f64, f64)> {
        let r = trail::relative_state(&self.0, &geo::Pose3::enu(x, y, 0.0, yaw)).map_err(py_err)?;
        Ok((r.d, r.psi, r.s))
    }
}

/// Oracle soft labels `(vo, lo)` for a relative state, each `[left, center, right]`.
#[pyfunction]
#[pyo3(signature = (d, psi, label_noise = 0.0, seed = 0))]
fn oracle_predict(d: f64, psi: f64, label_noise: f64, seed: u64) -> PyResult<([f64; 3], [f64; 3])> {
    use rand::SeedableRng;
    let params = OracleParams {
        label_noise,
        ..Default::default()
    };
    params.validate().map_err(py_err)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let est = core_oracle(&RelativeState { d, psi, s: 0.0 }, &params, 0.0, &mut rng);
    Ok((est.vo.probs(), est.lo.probs()))
}

/// Steering angle in radians, counterclockwise positive.
#[pyfunction]
#[pyo3(signature = (vo, lo, beta1_deg = 10.0, beta2_deg = 10.0))]
fn turn_angle(vo: [f64; 3], lo: [f64; 3], beta1_deg: f64, beta2_deg: f64) -> PyResult<f64> {
    let est = TrailEstimate {
        vo: label(vo)?,
        lo: label(lo)?,
        timestamp: 0.0,
    };
    let cfg = ControlConfig {
        beta1: beta1_deg.to_radians(),
        beta2: beta2_deg.to_radians(),
        ..Default::default()
    };
    Ok(core_turn_angle(&est, &cfg))
}

#[pyfunction]
#[pyo3(signature = (y, truth, epsilon = 0.1, lambda1 = 0.1, lambda2 = 0.3))]
fn loss_value(y: [f64; 3], truth: &str, epsilon: f64, lambda1: f64, lambda2: f64) -> PyResult<f64> {
    let p = loss::smooth_labels(category(truth)?, epsilon);
    loss::loss_value(&label(y)?, &p, &LossWeights { lambda1, lambda2 }).map_err(py_err)
}

/// Gradient of the loss with respect to the logits.
#[pyfunction]
#[pyo3(signature = (z, truth, epsilon = 0.1, lambda1 = 0.1, lambda2 = 0.3))]
fn loss_grad(z: [f64; 3], truth: &str, epsilon: f64, lambda1: f64, lambda2: f64) -> PyResult<[f64; 3]> {
    let p = loss::smooth_labels(category(truth)?, epsilon);
    Ok(loss::loss_grad_logits(&z, &p, &LossWeights { lambda1, lambda2 }))
}

/// Largest relative gap between analytic and central-difference gradients.
#[pyfunction]
#[pyo3(signature = (z, truth, epsilon = 0.1, lambda1 = 0.1, lambda2 = 0.3, step = 1e-5))]
fn finite_diff_check(z: [f64; 3], truth: &str, epsilon: f64, lambda1: f64, lambda2: f64, step: f64) -> PyResult<f64> {
    if step.is_nan() || step <= 0.0 {
        return Err(PyValueError::new_err("step must be positive"));
    }
    let p = loss::smooth_labels(category(truth)?, epsilon);
    Ok(loss::finite_diff_check(&z, &p, &LossWeights { lambda1, lambda2 }, step))
}

/// Validates a TOML run config and returns it with defaults filled in.
#[pyfunction]
#[pyo3(signature = (text = ""))]
fn parse_config(text: &str) -> PyResult<String> {
    config::parse_config(text).map(|c| c.to_toml()).map_err(py_err)
}

/// One episode from a TOML run config; returns `(csv, summary_json)`.
#[pyfunction]
#[pyo3(signature = (config_toml = ""))]
fn run_episode(py: Python<'_>, config_toml: &str) -> PyResult<(String, String)> {
    let cfg = config::parse_config(config_toml).map_err(py_err)?;
    py.detach(|| {
        let perception = cfg.perception.variant(cfg.perception.variant)?;
        let ep = cfg.episode_config(cfg.trail.load()?, perception)?;
        let log = sim::run_episode(&ep)?;
        Ok((log.to_csv(), log.summary_json()))
    })
    .map_err(py_err)
}

/// Runs a subcommand in memory. Returns `(files, checks)` where `files` maps
/// names to bytes and `checks` is a list of `(name, passed, detail)`.
#[pyfunction]
#[pyo3(signature = (subcommand, config_toml = "", seed = None, scenario = None, perception = None, noise = None))]
#[allow(clippy::type_complexity)]
fn run_experiment(
    py: Python<'_>,
    subcommand: &str,
    config_toml: &str,
    seed: Option<u64>,
    scenario: Option<String>,
    perception: Option<String>,
    noise: Option<f64>,
) -> PyResult<(BTreeMap<String, Vec<u8>>, Vec<(String, bool, String)>)> {
    let cmd: experiments::Subcommand = subcommand.parse().map_err(py_err)?;
    let mut cfg = config::parse_config(config_toml).map_err(py_err)?;
    let overrides = experiments::Overrides {
        seed,
        scenario,
        perception: perception.as_deref().map(str::parse).transpose().map_err(py_err)?,
        noise,
    };
    experiments::apply_overrides(cmd, &mut cfg, &overrides).map_err(py_err)?;
    let art = py.detach(|| experiments::run_experiment(cmd, &cfg)).map_err(py_err)?;
    let checks = art.checks.into_iter().map(|c| (c.name, c.passed, c.detail)).collect();
    Ok((art.files, checks))
}

#[pymodule(name = "trailnav")]
fn trailnav_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySimilarity>()?;
    m.add_class::<PyTrail>()?;
    m.add_function(wrap_pyfunction!(umeyama, m)?)?;
    m.add_function(wrap_pyfunction!(enu_to_ned, m)?)?;
    m.add_function(wrap_pyfunction!(ned_to_enu, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_predict, m)?)?;
    m.add_function(wrap_pyfunction!(turn_angle, m)?)?;
    m.add_function(wrap_pyfunction!(loss_value, m)?)?;
    m.add_function(wrap_pyfunction!(loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(finite_diff_check, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
