//! Python bindings. Arrays cross the boundary as flat x-fastest lists; the
//! `lesion_cascade` Python package wraps them as Fortran-ordered numpy arrays.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lesion_cascade::config::{canonical_mask, write_case, Case};
use lesion_cascade::io;
use lesion_cascade::metrics::{evaluate_case, EvalCase};
use lesion_cascade::networks::{NetworkConfig, TiramisuConfig, UNetConfig};
use lesion_cascade::orient::reorient_to_canonical;
use lesion_cascade::phantom::generate_case;
use lesion_cascade::pipeline::{run_predict, PostprocessConfig};
use lesion_cascade::{Dims, Error, Mask};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Dims3 = (usize, usize, usize);

fn dims(d: Dims) -> Dims3 {
    (d.0[0], d.0[1], d.0[2])
}

fn mask(data: Vec<u8>, shape: Dims3, spacing: [f64; 3]) -> PyResult<Mask> {
    Mask::new(Dims([shape.0, shape.1, shape.2]), data, spacing).map_err(py_err)
}

/// Reads a NIfTI-1 or container volume, reoriented to canonical axes.
/// Returns `(dims, spacing, values)`.
#[pyfunction]
fn load_volume(path: PathBuf) -> PyResult<(Dims3, [f64; 3], Vec<f32>)> {
    let v = io::load_any(&path).and_then(|v| reorient_to_canonical(&v)).map_err(py_err)?;
    Ok((dims(v.dims), v.spacing, v.data))
}

/// Reads a mask written by this library, reoriented to canonical axes.
#[pyfunction]
fn load_mask(path: PathBuf) -> PyResult<(Dims3, [f64; 3], Vec<u8>)> {
    let m = io::read_mask(&path).and_then(|m| canonical_mask(&m)).map_err(py_err)?;
    Ok((dims(m.dims), m.spacing, m.data))
}

#[pyfunction]
fn save_mask(path: PathBuf, shape: Dims3, spacing: [f64; 3], data: Vec<u8>) -> PyResult<()> {
    io::write_mask(&mask(data, shape, spacing)?, &path).map_err(py_err)
}

/// Synthetic case `index`; also written to `out_dir` when given.
#[pyfunction]
#[pyo3(signature = (index, size, seed=0, out_dir=None))]
fn phantom<'py>(py: Python<'py>, index: usize, size: Dims3, seed: u64, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let p = generate_case(index, [size.0, size.1, size.2], seed).map_err(py_err)?;
    let case = Case::from(p);
    if let Some(dir) = out_dir {
        write_case(&dir, &case).map_err(py_err)?;
    }
    let d = PyDict::new(py);
    d.set_item("id", &case.id)?;
    d.set_item("dims", dims(case.volume.dims))?;
    d.set_item("spacing", case.volume.spacing)?;
    d.set_item("image", case.volume.data)?;
    d.set_item("liver", case.liver.data)?;
    d.set_item("lesion", case.lesion.data)?;
    Ok(d)
}

fn network(kind: &str) -> PyResult<NetworkConfig> {
    match kind {
        "unet" => Ok(NetworkConfig::Unet(UNetConfig::default())),
        "tiramisu" => Ok(NetworkConfig::Tiramisu(TiramisuConfig::default())),
        other => Err(PyValueError::new_err(format!("unknown network {other:?}, expected unet or tiramisu"))),
    }
}

/// Layer table of a default network.
#[pyfunction]
fn describe(kind: &str) -> PyResult<String> {
    Ok(network(kind)?.build::<f32>(0).map_err(py_err)?.describe())
}

#[pyfunction]
fn param_count(kind: &str) -> PyResult<usize> {
    Ok(network(kind)?.build::<f32>(0).map_err(py_err)?.param_count())
}

/// Overlap and surface metrics of `pred` against `gt`. Surface distances are
/// `None` when either mask is empty.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    pred: Vec<u8>,
    gt: Vec<u8>,
    shape: Dims3,
    spacing: [f64; 3],
) -> PyResult<Bound<'py, PyDict>> {
    let case = EvalCase {
        id: String::new(),
        pred: mask(pred, shape, spacing)?,
        gt: mask(gt, shape, spacing)?,
        liver_gt: None,
        spacing,
    };
    let m = py.detach(|| evaluate_case(&case)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("dice", m.dice)?;
    d.set_item("voe", m.voe)?;
    d.set_item("rvd", m.rvd)?;
    d.set_item("assd", m.surface.map(|s| s.assd))?;
    d.set_item("mssd", m.surface.map(|s| s.mssd))?;
    d.set_item("rmsd", m.surface.map(|s| s.rmsd))?;
    Ok(d)
}

/// Runs the cascade on one volume file. Returns the liver and lesion mask paths
/// and the inference time in seconds.
#[pyfunction]
#[pyo3(signature = (liver_net, lesion_net, volume, out_dir, threshold=0.5, dilate=None, close=None, connectivity=26))]
#[allow(clippy::too_many_arguments)]
fn predict(
    py: Python<'_>,
    liver_net: PathBuf,
    lesion_net: PathBuf,
    volume: PathBuf,
    out_dir: PathBuf,
    threshold: f32,
    dilate: Option<usize>,
    close: Option<usize>,
    connectivity: usize,
) -> PyResult<(PathBuf, PathBuf, f64)> {
    let post = PostprocessConfig { threshold, dilate, close, connectivity };
    post.validate().map_err(py_err)?;
    let files = py.detach(|| run_predict(&liver_net, &lesion_net, &volume, &out_dir, &post)).map_err(py_err)?;
    Ok((files.liver, files.lesion, files.prediction.seconds))
}

#[pymodule]
fn _native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_volume, m)?)?;
    m.add_function(wrap_pyfunction!(load_mask, m)?)?;
    m.add_function(wrap_pyfunction!(save_mask, m)?)?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(describe, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    Ok(())
}
