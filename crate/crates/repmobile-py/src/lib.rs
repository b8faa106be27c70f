//! Python bindings for the core model types and operations.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use repmobile::audio::{Frontend, FrontendConfig, Waveform, SAMPLE_RATE};
use repmobile::complexity::{count_macs, count_macs_report, count_params};
use repmobile::distill::DistillConfig;
use repmobile::model::{build_model, BranchShape, ModelGraph, ModelMode};
use repmobile::reparam::{reparameterize_model, verify_equivalence};
use repmobile::tensor::{kernels, Tensor};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_branches(branches: &[String]) -> PyResult<Vec<BranchShape>> {
    branches
        .iter()
        .map(|s| BranchShape::parse(s).map_err(err))
        .collect()
}

/// A Rep-Mobile model (train or merged form).
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelGraph<f32>,
}

#[pymethods]
impl PyModel {
    /// Build a freshly initialized train-form model.
    #[staticmethod]
    #[pyo3(signature = (width, branches=None, seed=0))]
    fn build(width: usize, branches: Option<Vec<String>>, seed: u64) -> PyResult<Self> {
        let branches = match branches {
            Some(b) => parse_branches(&b)?,
            None => BranchShape::ALL.to_vec(),
        };
        Ok(PyModel {
            inner: build_model(width, &branches, seed).map_err(err)?,
        })
    }

    /// Load a model container directory (manifest.json + weights.bin).
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: ModelGraph::<f32>::load(std::path::Path::new(dir)).map_err(err)?,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(dir)).map_err(err)
    }

    /// Eval-mode logits for a row-major `[n, 1, f, t]` input.
    fn forward(
        &self,
        data: Vec<f32>,
        shape: (usize, usize, usize, usize),
    ) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let (n, c, f, t) = shape;
        let x = Tensor::from_vec(&[n, c, f, t], data).map_err(err)?;
        let logits = self.inner.forward_eval(&x).map_err(err)?;
        Ok((logits.shape().to_vec(), logits.into_data()))
    }

    /// Merge the multi-branch train form into the single-branch
    /// inference form (eval outputs preserved).
    fn merge(&self) -> PyResult<Self> {
        Ok(PyModel {
            inner: reparameterize_model(&self.inner).map_err(err)?,
        })
    }

    /// Remove one branch shape from every block.
    fn ablate(&self, shape: &str) -> PyResult<Self> {
        let s = BranchShape::parse(shape).map_err(err)?;
        Ok(PyModel {
            inner: self.inner.ablate_branch(s).map_err(err)?,
        })
    }

    /// Check train-form vs merged equivalence on `n` random inputs; returns
    /// `(worst_abs_diff, max_logit_abs, argmax_agree)`.
    fn verify_merge(&self, n: usize, seed: u64) -> PyResult<(f64, f64, bool)> {
        let merged = reparameterize_model(&self.inner).map_err(err)?;
        let r = verify_equivalence(&self.inner, &merged, n, seed).map_err(err)?;
        Ok((r.worst_abs_diff, r.max_logit_abs, r.argmax_agree))
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode {
            ModelMode::Train => "train",
            ModelMode::Merged => "merged",
        }
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.base_channels()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn param_count(&self) -> u64 {
        count_params(&self.inner)
    }

    /// Multiply-accumulate count for one `1 x 1 x f x t` forward pass.
    #[pyo3(signature = (f=256, t=57))]
    fn macs(&self, f: usize, t: usize) -> PyResult<u64> {
        count_macs(&self.inner, f, t).map_err(err)
    }

    /// Per-layer params/MACs breakdown as CSV.
    #[pyo3(signature = (f=256, t=57))]
    fn complexity_csv(&self, f: usize, t: usize) -> PyResult<String> {
        Ok(count_macs_report(&self.inner, f, t).map_err(err)?.to_csv())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(width={}, mode={}, params={})",
            self.inner.base_channels(),
            self.mode(),
            count_params(&self.inner)
        )
    }
}

/// Log-mel spectrogram of a 32 kHz waveform; returns `((bins, frames), values)`.
#[pyfunction]
fn log_mel(samples: Vec<f32>) -> PyResult<((usize, usize), Vec<f32>)> {
    let w = Waveform::new(samples, SAMPLE_RATE).map_err(err)?;
    let fe = Frontend::new(FrontendConfig::default(), SAMPLE_RATE);
    let spec = fe.log_mel(&w).map_err(err)?;
    let dims = (spec.bins(), spec.frames());
    Ok((dims, spec.into_values().into_data()))
}

/// Temperature softmax over one logits row.
#[pyfunction]
fn softmax_t(logits: Vec<f32>, tau: f64) -> PyResult<Vec<f32>> {
    let n = logits.len();
    let x = Tensor::from_vec(&[1, n], logits).map_err(err)?;
    Ok(kernels::softmax_t(&x, tau).map_err(err)?.into_data())
}

/// KL divergence `KL(q || p)` between two distributions.
#[pyfunction]
fn kl_divergence(p: Vec<f32>, q: Vec<f32>) -> PyResult<f32> {
    let n = p.len();
    let p = Tensor::from_vec(&[1, n], p).map_err(err)?;
    let q = Tensor::from_vec(&[1, n], q).map_err(err)?;
    kernels::kl_divergence(&p, &q).map_err(err)
}

/// Mean cross-entropy between `[n, c]` logits (row-major) and labels.
#[pyfunction]
fn cross_entropy(logits: Vec<f32>, classes: usize, labels: Vec<usize>) -> PyResult<f32> {
    if classes == 0 || logits.len() % classes != 0 {
        return Err(PyValueError::new_err("logits length must be a multiple of classes"));
    }
    let n = logits.len() / classes;
    let x = Tensor::from_vec(&[n, classes], logits).map_err(err)?;
    Ok(kernels::cross_entropy(&x, &labels).map_err(err)?.0)
}

/// Blended distillation loss over `[n, c]` student logits and a list of
/// teacher logit matrices of the same shape.
#[pyfunction]
#[pyo3(signature = (student, classes, teachers, labels, lambda_=0.5, tau=0.1))]
fn distill_loss(
    student: Vec<f32>,
    classes: usize,
    teachers: Vec<Vec<f32>>,
    labels: Vec<usize>,
    lambda_: f64,
    tau: f64,
) -> PyResult<f32> {
    if classes == 0 || student.len() % classes != 0 {
        return Err(PyValueError::new_err("logits length must be a multiple of classes"));
    }
    let n = student.len() / classes;
    let s = Tensor::from_vec(&[n, classes], student).map_err(err)?;
    let t: Vec<Tensor<f32>> = teachers
        .into_iter()
        .map(|v| Tensor::from_vec(&[n, classes], v).map_err(err))
        .collect::<PyResult<_>>()?;
    repmobile::distill::distill_loss(&s, &t, &labels, &DistillConfig { lambda: lambda_, tau })
        .map_err(err)
}

/// Warmup-cosine learning rate schedule.
#[pyfunction]
#[pyo3(signature = (epoch, total_epochs, warmup=5.0, peak=0.01))]
fn lr_schedule(epoch: f64, total_epochs: f64, warmup: f64, peak: f64) -> f64 {
    repmobile::train::lr_schedule(epoch, total_epochs, warmup, peak)
}

#[pymodule]
fn repmobile_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_t, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(distill_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    Ok(())
}
