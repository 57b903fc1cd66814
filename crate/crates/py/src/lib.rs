//! Python bindings. Images and feature maps cross the boundary as float64
//! arrays shaped `(channels, height, width)`.

use std::path::PathBuf;

use numpy::{IntoPyArray, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use styler::coarse::CoarseNetwork;
use styler::fine::FineNetwork;
use styler::losses::{gram_loss, meanvar_loss, perceptual_loss, remd_loss, RemdConfig};
use styler::pipeline::{SsimConfig, TrainConfig};
use styler::substrate::{FeatureMap, Image};
use styler::wct::WctConfig;

fn err(e: styler::Error) -> PyErr {
    let msg = e.to_string();
    match e {
        styler::Error::InvalidInput(_) | styler::Error::Config(_) | styler::Error::Load { .. } => {
            PyValueError::new_err(msg)
        }
        styler::Error::Io { .. } => PyOSError::new_err(msg),
        styler::Error::Numeric(_) => PyArithmeticError::new_err(msg),
        styler::Error::ContractViolation(_) => PyRuntimeError::new_err(msg),
    }
}

fn feature(a: PyReadonlyArray3<'_, f64>) -> PyResult<FeatureMap> {
    FeatureMap::new(a.as_array().to_owned()).map_err(err)
}

fn image(a: PyReadonlyArray3<'_, f64>) -> PyResult<Image> {
    Image::new(a.as_array().to_owned()).map_err(err)
}

/// Whitening and coloring of `f_c` with the statistics of `f_s`.
#[pyfunction]
#[pyo3(signature = (f_c, f_s, eig_floor = 1e-5))]
fn wct_transform<'py>(
    py: Python<'py>,
    f_c: PyReadonlyArray3<'py, f64>,
    f_s: PyReadonlyArray3<'py, f64>,
    eig_floor: f64,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let out = styler::wct::wct_transform(&feature(f_c)?, &feature(f_s)?, &WctConfig { eig_floor }).map_err(err)?;
    Ok(out.into_inner().into_pyarray(py))
}

#[pyfunction]
fn ssim(a: PyReadonlyArray3<'_, f64>, b: PyReadonlyArray3<'_, f64>) -> PyResult<f64> {
    styler::pipeline::ssim(&image(a)?, &image(b)?, &SsimConfig::default()).map_err(err)
}

/// Loss of `f_cs` against a reference feature; `kind` is one of
/// `perceptual`, `remd`, `gram`, `meanvar`.
#[pyfunction]
#[pyo3(signature = (kind, reference, f_cs, max_samples = 1024, seed = 0))]
fn loss(
    kind: &str,
    reference: PyReadonlyArray3<'_, f64>,
    f_cs: PyReadonlyArray3<'_, f64>,
    max_samples: usize,
    seed: u64,
) -> PyResult<f64> {
    let (r, f) = (feature(reference)?, feature(f_cs)?);
    match kind {
        "perceptual" => perceptual_loss(&r, &f),
        "remd" => remd_loss(&r, &f, &RemdConfig { max_samples, seed }),
        "gram" => gram_loss(&r, &f),
        "meanvar" => meanvar_loss(&r, &f),
        other => return Err(PyValueError::new_err(format!("unknown loss `{other}`"))),
    }
    .map_err(err)
}

#[pyfunction]
fn load_image<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyArray3<f64>>> {
    Ok(styler::substrate::load_image(path).map_err(err)?.into_inner().into_pyarray(py))
}

#[pyfunction]
fn save_image(img: PyReadonlyArray3<'_, f64>, path: PathBuf) -> PyResult<()> {
    styler::substrate::save_image(&image(img)?, path).map_err(err)
}

/// Loaded coarse and fine checkpoints.
#[pyclass(frozen)]
struct Stylizer {
    coarse: CoarseNetwork,
    fine: FineNetwork,
}

#[pymethods]
impl Stylizer {
    #[new]
    fn new(coarse: PathBuf, fine: PathBuf) -> PyResult<Self> {
        Ok(Self {
            coarse: CoarseNetwork::load(coarse).map_err(err)?,
            fine: FineNetwork::load(fine).map_err(err)?,
        })
    }

    fn stylize<'py>(
        &self,
        py: Python<'py>,
        content: PyReadonlyArray3<'py, f64>,
        style: PyReadonlyArray3<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let out = styler::fine::stylize(&self.coarse, &self.fine, &image(content)?, &image(style)?).map_err(err)?;
        Ok(out.into_inner().into_pyarray(py))
    }

    /// Coarse-stage output at the resolution of the given (already halved) inputs.
    fn stylize_coarse<'py>(
        &self,
        py: Python<'py>,
        content: PyReadonlyArray3<'py, f64>,
        style: PyReadonlyArray3<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let out = self
            .coarse
            .stylize(&image(content)?, &image(style)?, &WctConfig::default())
            .map_err(err)?;
        Ok(out.into_inner().into_pyarray(py))
    }
}

/// Runs coarse training from a TOML config; returns the checkpoint path and per-iteration `l_re`.
#[pyfunction]
fn train_coarse(config: PathBuf) -> PyResult<(PathBuf, Vec<f64>)> {
    let cfg = TrainConfig::load(config).map_err(err)?;
    let report = styler::pipeline::train_coarse(&cfg).map_err(err)?;
    Ok((report.checkpoint, report.l_re))
}

/// Runs fine training; returns the checkpoint path and a dict of per-iteration loss columns.
#[pyfunction]
fn train_fine<'py>(py: Python<'py>, config: PathBuf, coarse: PathBuf) -> PyResult<(PathBuf, Bound<'py, PyDict>)> {
    let cfg = TrainConfig::load(config).map_err(err)?;
    let report = styler::pipeline::train_fine(&cfg, &coarse).map_err(err)?;
    let h = &report.history;
    let columns = PyDict::new(py);
    columns.set_item("l_p", h.iter().map(|b| b.l_p).collect::<Vec<_>>())?;
    columns.set_item("l_r", h.iter().map(|b| b.l_r).collect::<Vec<_>>())?;
    columns.set_item("l_g", h.iter().map(|b| b.l_g).collect::<Vec<_>>())?;
    columns.set_item("l_m", h.iter().map(|b| b.l_m).collect::<Vec<_>>())?;
    columns.set_item("total", h.iter().map(|b| b.total).collect::<Vec<_>>())?;
    Ok((report.checkpoint, columns))
}

#[pymodule]
fn pystyler(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(wct_transform, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(train_coarse, m)?)?;
    m.add_function(wrap_pyfunction!(train_fine, m)?)?;
    m.add_class::<Stylizer>()?;
    Ok(())
}
