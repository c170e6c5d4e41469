//! Python bindings: metrics, conditioning maps, splat math, dataset access,
//! rendering and evaluation reports. Images cross the boundary as flat
//! row-major RGB lists in [0, 1] with explicit height and width.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use splathead::container::Container;
use splathead::head_model::{Mat3, Vec3};
use splathead::image::Image;
use splathead::render::{render, RenderSettings};
use splathead::splat::{GaussianSet, SH_LEN};
use splathead::synthetic::{generate_dataset, LoadedDataset, Split, SyntheticConfig};

type Flat = (usize, usize, Vec<f64>);

fn to_py(e: splathead::Error) -> PyErr {
    match e {
        splathead::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image(data: Vec<f64>, height: usize, width: usize) -> PyResult<Image> {
    Image::from_data(height, width, 3, data).map_err(to_py)
}

fn flat(img: Image) -> Flat {
    (img.height, img.width, img.data)
}

fn split(name: &str) -> PyResult<Option<Split>> {
    match name {
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    }
}

#[pyfunction]
pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// PSNR in dB, capped at 99 for identical images.
#[pyfunction]
#[pyo3(signature = (a, b, height, width, peak=1.0))]
pub fn psnr(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize, peak: f64) -> PyResult<f64> {
    splathead::metrics::psnr(&image(a, height, width)?, &image(b, height, width)?, peak).map_err(to_py)
}

#[pyfunction]
pub fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    splathead::metrics::ssim_metric(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)
}

/// Normalised Sobel `(gx, gy, |g|)` map of an RGB image.
#[pyfunction]
pub fn sobel_gradient_map(img: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
    Ok(splathead::conditioning::sobel_gradient_map(&image(img, height, width)?).map_err(to_py)?.data)
}

/// View-dependent colour of 48 degree-3 SH coefficients (coefficient-major RGB).
#[pyfunction]
pub fn sh_eval(sh: Vec<f64>, view_dir: [f64; 3]) -> PyResult<[f64; 3]> {
    let sh: [f64; SH_LEN] =
        sh.try_into().map_err(|v: Vec<f64>| PyValueError::new_err(format!("expected {SH_LEN} coefficients, got {}", v.len())))?;
    splathead::splat::sh_eval(&sh, &Vec3::from(view_dir)).map_err(to_py)
}

/// `R(q) diag(s²) R(q)ᵀ` for a unit quaternion `(w, x, y, z)`.
#[pyfunction]
pub fn covariance(rotation: [f64; 4], scale: [f64; 3]) -> PyResult<[[f64; 3]; 3]> {
    let c = splathead::splat::covariance_from(&rotation, &Vec3::from(scale)).map_err(to_py)?;
    Ok(std::array::from_fn(|i| std::array::from_fn(|j| c[(i, j)])))
}

#[pyfunction]
pub fn gaussian_pdf(x: [f64; 3], mean: [f64; 3], cov: [[f64; 3]; 3]) -> PyResult<f64> {
    let m = Mat3::from_fn(|i, j| cov[i][j]);
    splathead::splat::gaussian_pdf(&Vec3::from(x), &Vec3::from(mean), &m).map_err(to_py)
}

/// Writes a synthetic dataset; `config` is the TOML body of a `[data]` table.
/// Returns the number of files listed in the manifest.
#[pyfunction]
#[pyo3(signature = (root, config=""))]
pub fn generate(root: &str, config: &str) -> PyResult<usize> {
    let cfg: SyntheticConfig = toml::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(generate_dataset(root, &cfg).map_err(to_py)?.files().len())
}

/// One captured frame of a dataset sequence.
#[pyfunction]
#[pyo3(signature = (root, subject, sequence, frame, camera, split_name="all"))]
pub fn load_frame(root: &str, subject: usize, sequence: usize, frame: usize, camera: usize, split_name: &str) -> PyResult<Flat> {
    let data = LoadedDataset::load(root, split(split_name)?).map_err(to_py)?;
    let s = data.subjects.get(subject).ok_or_else(|| PyValueError::new_err("subject out of range"))?;
    let q = s.sequences.get(sequence).ok_or_else(|| PyValueError::new_err("sequence out of range"))?;
    let f = q.frames.get(frame).and_then(|f| f.get(camera)).ok_or_else(|| PyValueError::new_err("frame or camera out of range"))?;
    Ok(flat(f.image()))
}

/// Renders a saved Gaussian set from one of a dataset's cameras.
#[pyfunction]
pub fn render_gaussians(path: &str, root: &str, camera: usize) -> PyResult<Flat> {
    let set = GaussianSet::from_container(&Container::load(path).map_err(to_py)?).map_err(to_py)?;
    let data = LoadedDataset::load(root, Some(Split::Train)).map_err(to_py)?;
    let cam = data.cameras.get(camera).ok_or_else(|| PyValueError::new_err("camera out of range"))?;
    Ok(flat(render(&set, cam, &RenderSettings::default()).map_err(to_py)?.image))
}

/// Comparison table and JSON-lines records of saved evaluation reports.
#[pyfunction]
pub fn report(run_dirs: Vec<String>) -> PyResult<(String, String)> {
    let dirs: Vec<std::path::PathBuf> = run_dirs.into_iter().map(Into::into).collect();
    splathead::metrics::report(&dirs).map_err(to_py)
}

#[pymodule]
fn splathead_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(sobel_gradient_map, m)?)?;
    m.add_function(wrap_pyfunction!(sh_eval, m)?)?;
    m.add_function(wrap_pyfunction!(covariance, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_pdf, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_frame, m)?)?;
    m.add_function(wrap_pyfunction!(render_gaussians, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
