//! Python bindings: generators, the alpha network, training and metrics.
//!
//! Images cross the boundary as nested lists `[3][m][m]` in `[-1, 1]`,
//! masks as `[m][m]`. Reports are returned as plain dicts.

use ganseg_core::alpha::AlphaNet;
use ganseg_core::background::{crop_source_codes, harvest_crops, score_layers, trim, CropRule, GradNorm};
use ganseg_core::dataset_eval::{compute_metrics as core_metrics, evaluate_oracle as core_evaluate, Aggregation};
use ganseg_core::layer_select::{ssim as core_ssim, trgb_noise_probe};
use ganseg_core::stylegen::{
    load_generator, save_generator, synthesize, AnyGenerator, Generator, GeneratorSpec, LatentCode, OracleGenerator, OracleSpec,
    StyleGenerator,
};
use ganseg_core::trainer::{run_training, Backgrounds, TrainConfig, TrainState};
use ganseg_core::Error;
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use std::path::PathBuf;
use std::sync::Arc;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Invalid(_) | Error::Shape(_) | Error::Config(_) | Error::MissingLayer { .. } | Error::Fingerprint(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, S: Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn image_to_list(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter().map(|c| c.outer_iter().map(|r| r.to_vec()).collect()).collect()
}

fn mask_to_list<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn image_from_list(v: Vec<Vec<Vec<f64>>>) -> PyResult<Array3<f64>> {
    let c = v.len();
    let h = v.first().map_or(0, Vec::len);
    let w = v.first().and_then(|x| x.first()).map_or(0, Vec::len);
    let flat: Vec<f64> = v.into_iter().flatten().flatten().collect();
    Array3::from_shape_vec((c, h, w), flat).map_err(|_| PyValueError::new_err("image must be a regular [c][h][w] list"))
}

fn mask_from_list(v: Vec<Vec<u8>>) -> PyResult<Array2<u8>> {
    let h = v.len();
    let w = v.first().map_or(0, Vec::len);
    let flat: Vec<u8> = v.into_iter().flatten().collect();
    Array2::from_shape_vec((h, w), flat).map_err(|_| PyValueError::new_err("mask must be a regular [h][w] list"))
}

/// A frozen generator (double precision).
#[pyclass(name = "Generator", module = "ganseg", frozen)]
struct PyGenerator {
    inner: Arc<AnyGenerator<f64>>,
}

impl PyGenerator {
    fn oracle(&self) -> PyResult<&OracleGenerator> {
        match self.inner.as_ref() {
            AnyGenerator::Oracle(o) => Ok(o),
            AnyGenerator::Style(_) => Err(PyValueError::new_err("only the oracle generator has analytic masks")),
        }
    }

    fn code(&self, seed: u64) -> LatentCode {
        LatentCode::sample(self.inner.spec(), seed)
    }
}

#[pymethods]
impl PyGenerator {
    /// Hand-built generator with analytic masks.
    #[staticmethod]
    #[pyo3(signature = (resolution = 32, edge_px = 1.0))]
    fn oracle_generator(resolution: usize, edge_px: f64) -> PyResult<Self> {
        let g = OracleGenerator::new(OracleSpec { resolution, edge_px }).map_err(py_err)?;
        Ok(Self {
            inner: Arc::new(AnyGenerator::Oracle(g)),
        })
    }

    /// Randomly initialised narrow style generator.
    #[staticmethod]
    #[pyo3(signature = (resolution = 16, width = 8, seed = 0))]
    fn toy(resolution: usize, width: usize, seed: u64) -> PyResult<Self> {
        let g = StyleGenerator::new(GeneratorSpec::small(resolution, width), seed).map_err(py_err)?;
        Ok(Self {
            inner: Arc::new(AnyGenerator::Style(g)),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(load_generator(&path).map_err(py_err)?),
        })
    }

    /// Writes a checkpoint and returns its SHA-256.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        save_generator(&self.inner, &path, serde_json::json!({})).map_err(py_err)
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.spec().resolution
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.spec().n_layers()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn spec<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.spec())
    }

    /// Image for the latent drawn from `seed`.
    fn sample(&self, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let fs = synthesize(self.inner.as_ref(), &[self.code(seed)], false).map_err(py_err)?;
        Ok(image_to_list(&fs.image_at(0)))
    }

    fn true_mask(&self, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        Ok(mask_to_list(&self.oracle()?.true_mask(&self.code(seed))))
    }

    #[pyo3(signature = (n_samples = 16, seed = 0))]
    fn trgb_probe<'py>(&self, py: Python<'py>, n_samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let r = trgb_noise_probe(self.inner.as_ref(), n_samples, seed).map_err(py_err)?;
        to_py(py, &r)
    }

    #[pyo3(signature = (n_crops = 16, n_codes = 8, seed = 0))]
    fn score_layers<'py>(&self, py: Python<'py>, n_crops: usize, n_codes: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let spec = self.inner.spec();
        let crops = harvest_crops(self.inner.as_ref(), n_crops, CropRule::default_for(spec.resolution), seed).map_err(py_err)?;
        let codes = crop_source_codes(spec, n_codes, seed.wrapping_add(1));
        let r = score_layers(self.inner.as_ref(), &crops, &codes, GradNorm::L2).map_err(py_err)?;
        to_py(py, &r)
    }
}

/// Trained alpha network bound to its generator.
#[pyclass(name = "AlphaNet", module = "ganseg", frozen)]
struct PyAlphaNet {
    inner: AlphaNet<f64>,
    gen: Arc<AnyGenerator<f64>>,
}

#[pymethods]
impl PyAlphaNet {
    #[staticmethod]
    fn load(path: PathBuf, generator: &PyGenerator) -> PyResult<Self> {
        let g = generator.inner.clone();
        let inner = AlphaNet::load(&path, g.spec(), &g.fingerprint()).map_err(py_err)?;
        Ok(Self { inner, gen: g })
    }

    fn save(&self, path: PathBuf) -> PyResult<String> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn selected_layers(&self) -> Vec<usize> {
        self.inner.spec.selected_layers.clone()
    }

    /// Soft mask in (0, 1) for the latent drawn from `seed`.
    fn predict_mask(&self, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let code = LatentCode::sample(self.gen.spec(), seed);
        let fs = synthesize(self.gen.as_ref(), &[code], true).map_err(py_err)?;
        let m = self.inner.predict_mask(self.gen.spec(), &fs).map_err(py_err)?;
        Ok(mask_to_list(&m[0].values))
    }
}

/// TOML text of a named recipe: "default", "ffhq", "lsun_car" or "oracle".
#[pyfunction]
#[pyo3(signature = (preset = "default"))]
fn train_config(preset: &str) -> PyResult<String> {
    let cfg = match preset {
        "default" => TrainConfig::default(),
        "ffhq" => TrainConfig::ffhq(),
        "lsun_car" => TrainConfig::lsun_car(),
        "oracle" => TrainConfig::oracle(),
        other => return Err(PyValueError::new_err(format!("unknown preset '{other}'"))),
    };
    Ok(cfg.to_toml())
}

/// Trims `trim_layer` for backgrounds, trains an alpha network with the given
/// TOML recipe and writes the run under `out_dir`. Returns the network and a
/// summary dict.
#[pyfunction]
#[pyo3(signature = (generator, trim_layer, config, out_dir))]
fn train_alpha<'py>(
    py: Python<'py>,
    generator: &PyGenerator,
    trim_layer: usize,
    config: &str,
    out_dir: PathBuf,
) -> PyResult<(PyAlphaNet, Bound<'py, PyAny>)> {
    let cfg = TrainConfig::from_toml(config).map_err(py_err)?;
    let g: Arc<dyn Generator<f64>> = generator.inner.clone();
    let bg = Arc::new(trim(g.clone(), trim_layer).map_err(py_err)?);
    let (alpha, out) = py
        .detach(|| -> ganseg_core::Result<_> {
            let mut st = TrainState::new(cfg, g, Backgrounds::Generator(bg))?;
            let out = run_training(&mut st, &out_dir)?;
            Ok((st.alpha, out))
        })
        .map_err(py_err)?;
    let summary = serde_json::json!({
        "alpha_checkpoint": out.alpha_checkpoint,
        "alpha_sha256": out.alpha_sha256,
        "steps": out.steps,
        "degenerate": out.degenerate,
    });
    Ok((
        PyAlphaNet {
            inner: alpha,
            gen: generator.inner.clone(),
        },
        to_py(py, &summary)?,
    ))
}

/// Scores an alpha network against the oracle's analytic masks.
#[pyfunction]
#[pyo3(signature = (alpha, n = 256, seed = 0, threshold = 0.9))]
fn evaluate_oracle<'py>(py: Python<'py>, alpha: &PyAlphaNet, n: usize, seed: u64, threshold: f64) -> PyResult<Bound<'py, PyAny>> {
    let oracle = match alpha.gen.as_ref() {
        AnyGenerator::Oracle(o) => o,
        AnyGenerator::Style(_) => return Err(PyValueError::new_err("evaluation needs the oracle generator")),
    };
    let r = core_evaluate(alpha.gen.as_ref(), oracle, &alpha.inner, n, seed, threshold, Aggregation::Macro).map_err(py_err)?;
    to_py(py, &r)
}

#[pyfunction]
fn ssim(a: Vec<Vec<Vec<f64>>>, b: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    core_ssim(&image_from_list(a)?, &image_from_list(b)?).map_err(py_err)
}

/// Pixel counts and IoU scores for one pair of 0/1 masks.
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<Bound<'py, PyAny>> {
    let r = core_metrics(&mask_from_list(pred)?, &mask_from_list(gt)?).map_err(py_err)?;
    to_py(py, &r)
}

#[pymodule]
fn ganseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyAlphaNet>()?;
    m.add_function(wrap_pyfunction!(train_config, m)?)?;
    m.add_function(wrap_pyfunction!(train_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    Ok(())
}
