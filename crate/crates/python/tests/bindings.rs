use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn with_module<T>(f: impl FnOnce(&Bound<'_, PyModule>) -> PyResult<T>) -> T {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(rotquant_py::rotquant_py)(py);
        f(m.bind(py)).expect("python call")
    })
}

#[test]
fn quantizer_functions() {
    with_module(|m| {
        let q: Vec<i32> = m.getattr("quantize")?.call1((vec![0.3f32, 1.0, -5.0], 0.25f32, 0, 4))?.extract()?;
        assert_eq!(q, vec![1, 4, -8]);
        let dq: Vec<f32> = m.getattr("dequantize")?.call1((q, 0.25f32))?.extract()?;
        assert_eq!(dq, vec![0.25, 1.0, -2.0]);
        let fq: Vec<f32> = m.getattr("fake_quantize")?.call1((vec![0.3f32, 1.0, -5.0], 0.25f32, 0, 4))?.extract()?;
        assert_eq!(fq, dq);
        Ok(())
    });
}

#[test]
fn rotations_and_plans() {
    with_module(|m| {
        let h: Vec<Vec<f32>> = m.getattr("hadamard")?.call1((2,))?.extract()?;
        let k = std::f32::consts::FRAC_1_SQRT_2;
        assert_eq!(h, vec![vec![k, k], vec![k, -k]]);
        let r: Vec<Vec<f32>> = m.getattr("cayley")?.call1((vec![0.0f32], 2))?.extract()?;
        assert_eq!(r, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let bits: Vec<u32> = m.getattr("plan")?.call1((vec![0.1, 0.9, 0.5], 0.34))?.extract()?;
        assert_eq!(bits, vec![8, 16, 16]);
        Ok(())
    });
}

#[test]
fn errors_become_python_exceptions() {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(rotquant_py::rotquant_py)(py);
        let err = m.bind(py).getattr("quantize").unwrap().call1((vec![1.0f32], 0.5f32, 0, 3)).unwrap_err();
        assert!(err.is_instance_of::<PyValueError>(py));
        let err = m.bind(py).getattr("init_scale").unwrap().call1((vec![1.0f32], 8, "median")).unwrap_err();
        assert!(err.is_instance_of::<PyValueError>(py));
    });
}
