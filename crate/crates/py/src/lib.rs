//! Python bindings: schema access, toy dataset synthesis, the metric
//! primitives and checkpoint-backed generation.

use std::collections::HashMap;

use ndarray::Array2;
use portrait_core::checkpoint::load_checkpoint;
use portrait_core::dataset::{decode_png, encode_png, synth_dataset, ToyDatasetSpec};
use portrait_core::generator::Generator;
use portrait_core::metrics;
use portrait_core::training::{denormalize, normalize};
use portrait_core::{AttributeSchema, AttributeSet, Error};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> portrait_core::Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::LengthMismatch { expected: cols, actual: bad.len() });
    }
    let n = rows.len();
    Ok(Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).expect("rectangular"))
}

/// Loads a schema: a TOML file, the built-in toy schema, or the built-in
/// portrait schema.
pub fn load_schema(path: Option<&str>, toy: bool) -> portrait_core::Result<AttributeSchema> {
    match (path, toy) {
        (Some(p), _) => AttributeSchema::load_file(p),
        (None, true) => Ok(AttributeSchema::toy()),
        (None, false) => Ok(AttributeSchema::portrait_default()),
    }
}

fn schema_pairs(schema: &AttributeSchema) -> Vec<(String, Vec<String>)> {
    schema.types().iter().map(|t| (t.name.clone(), t.values.clone())).collect()
}

/// `[(type, [values…]), …]` in canonical order.
#[pyfunction]
#[pyo3(signature = (path=None, toy=false))]
fn schema(path: Option<&str>, toy: bool) -> PyResult<Vec<(String, Vec<String>)>> {
    Ok(schema_pairs(&load_schema(path, toy).map_err(py_err)?))
}

/// Writes a toy dataset under `out` and returns the sample count.
#[pyfunction]
#[pyo3(signature = (out, count=2000, seed=0))]
fn synth_toy(out: &str, count: usize, seed: u64) -> PyResult<usize> {
    synth_dataset(&ToyDatasetSpec::new(count, seed), out).map(|r| r.len()).map_err(py_err)
}

#[pyfunction]
fn frechet_distance(real: Vec<Vec<f64>>, generated: Vec<Vec<f64>>) -> PyResult<f64> {
    let (r, g) = (matrix(real).map_err(py_err)?, matrix(generated).map_err(py_err)?);
    metrics::frechet_distance(&r, &g).map_err(py_err)
}

/// `(is_mean, is_std, is_kl_mean)` for a row-stochastic posterior matrix.
#[pyfunction]
#[pyo3(signature = (posteriors, splits=10))]
fn inception_score(posteriors: Vec<Vec<f64>>, splits: usize) -> PyResult<(f64, f64, f64)> {
    let s = metrics::inception_score(&matrix(posteriors).map_err(py_err)?, splits).map_err(py_err)?;
    Ok((s.is_mean, s.is_std, s.is_kl_mean))
}

/// A generator loaded from a checkpoint directory.
#[pyclass(name = "Generator", frozen)]
pub struct PyGenerator {
    generator: Generator<f32>,
    schema: AttributeSchema,
    model_id: String,
}

impl PyGenerator {
    pub fn load(checkpoint: &str) -> portrait_core::Result<Self> {
        let ck = load_checkpoint(checkpoint, None)?;
        Ok(Self { generator: ck.state.generator, schema: ck.schema, model_id: ck.model_id })
    }

    /// PNG in, PNG out; attribute names may use underscores for spaces.
    pub fn generate_png(&self, photo_png: &[u8], attributes: &HashMap<String, String>) -> portrait_core::Result<Vec<u8>> {
        let mut attrs = AttributeSet::new();
        let mut keys: Vec<_> = attributes.iter().collect();
        keys.sort();
        for (t, v) in keys {
            let (t, v) = self.schema.parse_assignment(&format!("{t}={v}"))?;
            attrs.insert(t, v);
        }
        let img = decode_png(photo_png, self.generator.config.image_size)?;
        let out = self.generator.generate(&normalize(&img), &attrs, &self.schema)?;
        encode_png(&denormalize(&out))
    }
}

#[pymethods]
impl PyGenerator {
    #[new]
    fn new(checkpoint: &str) -> PyResult<Self> {
        Self::load(checkpoint).map_err(py_err)
    }

    #[getter]
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.generator.config.image_size
    }

    fn schema(&self) -> Vec<(String, Vec<String>)> {
        schema_pairs(&self.schema)
    }

    #[pyo3(signature = (photo_png, attributes=None))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        photo_png: &[u8],
        attributes: Option<HashMap<String, String>>,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let png = self.generate_png(photo_png, &attributes.unwrap_or_default()).map_err(py_err)?;
        Ok(PyBytes::new(py, &png))
    }
}

#[pymodule]
fn portrait(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(schema, m)?)?;
    m.add_function(wrap_pyfunction!(synth_toy, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(inception_score, m)?)?;
    m.add_class::<PyGenerator>()?;
    Ok(())
}
