//! Python bindings for `rotquant`: quantizer kernels, rotations, initialization,
//! sensitivity planning, error decomposition and the calibration command.
//!
//! Tensors cross the boundary as flat lists plus an optional shape.

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rotquant::commands::{self, CalibrateArgs, ModelArgs};
use rotquant::init::{init_quality_probe, mean_based_init, max_min_init, InitMethod, InitPolicy};
use rotquant::pipeline::InitMode;
use rotquant::quant::{self, Granularity, QuantParams, QuantSpec, TensorClass};
use rotquant::rotation;
use rotquant::sensitivity::{self, SensitivityReport};
use rotquant::{Error, RunningStats, Tensor};
use std::path::PathBuf;

fn to_py(e: Error) -> PyErr {
    match commands::exit_code(&e) {
        commands::EXIT_NUMERIC => PyArithmeticError::new_err(e.to_string()),
        commands::EXIT_INPUT => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f32>, shape: Option<Vec<usize>>) -> PyResult<Tensor> {
    let shape = shape.unwrap_or_else(|| vec![data.len()]);
    Tensor::new(shape, data).map_err(to_py)
}

fn spec(bits: u32, symmetric: bool) -> PyResult<QuantSpec> {
    QuantSpec::new(bits, symmetric, Granularity::PerTensor, symmetric, TensorClass::Rotated).map_err(to_py)
}

fn stats(values: &[f32]) -> RunningStats {
    let mut s = RunningStats::new();
    s.extend(values.iter().copied());
    s
}

fn method(name: &str) -> PyResult<InitMethod> {
    match name {
        "mean_based" => Ok(InitMethod::MeanBased),
        "max_min" => Ok(InitMethod::MaxMin),
        other => Err(PyValueError::new_err(format!("unknown init method {other:?}; use mean_based or max_min"))),
    }
}

/// Integer codes of a per-tensor quantizer. Symmetric quantizers are signed,
/// asymmetric ones unsigned.
#[pyfunction]
#[pyo3(signature = (x, scale, zero_point=0, bits=8, symmetric=true))]
fn quantize(x: Vec<f32>, scale: f32, zero_point: i32, bits: u32, symmetric: bool) -> PyResult<Vec<i32>> {
    let q = quant::quantize(&tensor(x, None)?, &QuantParams::per_tensor(scale, zero_point), &spec(bits, symmetric)?)
        .map_err(to_py)?;
    Ok(q.data().to_vec())
}

#[pyfunction]
#[pyo3(signature = (q, scale, zero_point=0))]
fn dequantize(q: Vec<i32>, scale: f32, zero_point: i32) -> PyResult<Vec<f32>> {
    let n = q.len();
    let q = rotquant::IntTensor::new(vec![n], q).map_err(to_py)?;
    let x = quant::dequantize_with(&q, &QuantParams::per_tensor(scale, zero_point), Granularity::PerTensor)
        .map_err(to_py)?;
    Ok(x.into_data())
}

#[pyfunction]
#[pyo3(signature = (x, scale, zero_point=0, bits=8, symmetric=true))]
fn fake_quantize(x: Vec<f32>, scale: f32, zero_point: i32, bits: u32, symmetric: bool) -> PyResult<Vec<f32>> {
    let fq =
        quant::fake_quantize(&tensor(x, None)?, &QuantParams::per_tensor(scale, zero_point), &spec(bits, symmetric)?)
            .map_err(to_py)?;
    Ok(fq.into_data())
}

#[pyfunction]
fn gradient_scale_factor(num_elements: usize, q_max: i32) -> PyResult<f32> {
    quant::gradient_scale_factor(num_elements, q_max).map_err(to_py)
}

/// Normalized Hadamard matrix as rows; randomized with a ±1 diagonal when `seed` is given.
#[pyfunction]
#[pyo3(signature = (n, seed=None))]
fn hadamard(n: usize, seed: Option<u64>) -> PyResult<Vec<Vec<f32>>> {
    let r = match seed {
        Some(s) => rotation::randomized_hadamard(n, s),
        None => rotation::sylvester_hadamard(n),
    }
    .map_err(to_py)?;
    Ok(r.matrix.data().chunks(n).map(<[f32]>::to_vec).collect())
}

/// Cayley rotation from the strictly upper triangle of a skew-symmetric matrix, row-major.
#[pyfunction]
fn cayley(theta: Vec<f32>, n: usize) -> PyResult<Vec<Vec<f32>>> {
    let r = rotation::cayley_from_params(&tensor(theta, None)?, n).map_err(to_py)?;
    Ok(r.matrix.data().chunks(n).map(<[f32]>::to_vec).collect())
}

#[pyfunction]
fn running_stats(py: Python<'_>, values: Vec<f32>) -> PyResult<Bound<'_, PyDict>> {
    let s = stats(&values);
    let d = PyDict::new(py);
    d.set_item("count", s.count)?;
    d.set_item("min", s.min)?;
    d.set_item("max", s.max)?;
    d.set_item("mean", s.mean)?;
    d.set_item("std", s.std())?;
    Ok(d)
}

/// Per-tensor symmetric scale from `method` (`mean_based` or `max_min`).
#[pyfunction]
#[pyo3(signature = (values, bits=8, method="mean_based"))]
fn init_scale(values: Vec<f32>, bits: u32, method: &str) -> PyResult<f32> {
    let s = stats(&values);
    let spec = spec(bits, true)?;
    let p = match self::method(method)? {
        InitMethod::MeanBased => mean_based_init(&s, &spec),
        InitMethod::MaxMin => max_min_init(&s, &spec),
    }
    .map_err(to_py)?;
    Ok(p.scale[0])
}

/// Relative squared error `‖fq(x) − x‖² / ‖x‖²` after initializing from `x`.
#[pyfunction]
#[pyo3(signature = (values, bits=8, method="mean_based"))]
fn init_error(values: Vec<f32>, bits: u32, method: &str) -> PyResult<f64> {
    let policy = InitPolicy { method: self::method(method)?, min_bits: bits };
    init_quality_probe(&tensor(values, None)?, &spec(bits, true)?, &policy).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (x, scale, bits=8))]
fn sensitivity_ratio(x: Vec<f32>, scale: f32, bits: u32) -> PyResult<f64> {
    sensitivity::sensitivity_ratio(&tensor(x, None)?, &QuantParams::per_tensor(scale, 0), &spec(bits, true)?)
        .map_err(to_py)
}

/// Bits per site (8 or 16) for the given sensitivity ratios.
#[pyfunction]
#[pyo3(signature = (ratios, promote_fraction=0.1))]
fn plan(ratios: Vec<f64>, promote_fraction: f64) -> PyResult<Vec<u32>> {
    let reports: Vec<SensitivityReport> = ratios
        .iter()
        .enumerate()
        .map(|(i, &ratio)| SensitivityReport { site_index: i, site: format!("site{i}"), ratio, bits: 8 })
        .collect();
    let plan = sensitivity::plan_mixed_precision(&reports, promote_fraction).map_err(to_py)?;
    Ok((0..ratios.len()).map(|i| plan.bits_for(i).unwrap_or(8)).collect())
}

#[pyfunction]
#[pyo3(signature = (x, scale, bits=8))]
fn error_decomposition(py: Python<'_>, x: Vec<f32>, scale: f32, bits: u32) -> PyResult<Bound<'_, PyDict>> {
    let e = sensitivity::error_decomposition(&tensor(x, None)?, &QuantParams::per_tensor(scale, 0), &spec(bits, true)?)
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("e_rounding", e.e_rounding)?;
    d.set_item("e_clipping", e.e_clipping)?;
    d.set_item("e_total", e.e_total)?;
    Ok(d)
}

/// Runs the calibration pipeline on seeded synthetic data and writes the manifest to `out`.
/// Returns the recorded output MSE.
#[pyfunction]
#[pyo3(signature = (out, steps=None, seed=0, promote_fraction=0.1, model_config=None, data=None))]
fn calibrate(
    py: Python<'_>,
    out: PathBuf,
    steps: Option<usize>,
    seed: u64,
    promote_fraction: f64,
    model_config: Option<PathBuf>,
    data: Option<PathBuf>,
) -> PyResult<f64> {
    let args = CalibrateArgs {
        model: ModelArgs { model_config, data, seed, weight_bits: None, act_bits: None },
        out,
        steps,
        promote_fraction,
        init_mode: InitMode::Policy,
        export_rotations: None,
    };
    let summary = py.detach(|| commands::cmd_calibrate(&args)).map_err(to_py)?;
    Ok(summary.manifest.eval_mse)
}

#[pymodule]
pub fn rotquant_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(fake_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_scale_factor, m)?)?;
    m.add_function(wrap_pyfunction!(hadamard, m)?)?;
    m.add_function(wrap_pyfunction!(cayley, m)?)?;
    m.add_function(wrap_pyfunction!(running_stats, m)?)?;
    m.add_function(wrap_pyfunction!(init_scale, m)?)?;
    m.add_function(wrap_pyfunction!(init_error, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(error_decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    Ok(())
}
