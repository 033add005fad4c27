//! Python bindings: the variational distributions, the MNIST loader and a
//! full experiment run, enough to drive the engine from a notebook.

use ibpwf::data::{load_mnist, TaskStream};
use ibpwf::dist;
use ibpwf::experiment::{self, ExperimentConfig};
use ibpwf::tensor::{Tape, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::path::Path;

fn err(e: ibpwf::Error) -> PyErr {
    match e {
        ibpwf::Error::DataIo { .. } | ibpwf::Error::Data(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// KL(Kumaraswamy(a, b) || Kumaraswamy(alpha, beta)).
#[pyfunction]
#[pyo3(signature = (a, b, alpha, beta, terms = 10))]
fn kumaraswamy_kl(a: f64, b: f64, alpha: f64, beta: f64, terms: usize) -> f64 {
    dist::kumaraswamy::kl(a, b, alpha, beta, terms)
}

/// E[v^n] for v ~ Kumaraswamy(a, b).
#[pyfunction]
fn kumaraswamy_moment(n: f64, a: f64, b: f64) -> f64 {
    dist::kumaraswamy::moment(n, a, b)
}

/// Differential entropy of Kumaraswamy(a, b).
#[pyfunction]
fn kumaraswamy_entropy(a: f64, b: f64) -> f64 {
    dist::kumaraswamy::entropy(a, b)
}

/// Inverse-CDF sample of Kumaraswamy(a, b) at uniform u.
#[pyfunction]
fn kumaraswamy_sample(a: f64, b: f64, u: f64) -> f64 {
    let tape = Tape::new();
    let av = tape.constant(Tensor::scalar(a));
    let bv = tape.constant(Tensor::scalar(b));
    let uv = tape.constant(Tensor::scalar(u));
    dist::kumaraswamy::sample(&av, &bv, &uv).item()
}

/// Relaxed Bernoulli sample at location p, temperature t, uniform u.
#[pyfunction]
fn concrete_sample(p: f64, temperature: f64, u: f64) -> f64 {
    let tape = Tape::new();
    let pv = tape.constant(Tensor::scalar(p));
    let uv = tape.constant(Tensor::scalar(u));
    dist::concrete::sample(&pv, temperature, &uv).item()
}

/// Stick-breaking products pi_k = prod_{i<=k} v_i.
#[pyfunction]
fn stick_breaking(v: Vec<f64>) -> Vec<f64> {
    dist::stick::stick_breaking_pi_values(&v)
}

/// Built-in experiment presets as JSON.
#[pyfunction]
fn preset_config(name: &str) -> PyResult<String> {
    let cfg = match name {
        "split" => ExperimentConfig::split_mnist(),
        "permuted-reduced" => ExperimentConfig::permuted_mnist_reduced(),
        "permuted-full" => ExperimentConfig::permuted_mnist_full(),
        other => return Err(PyValueError::new_err(format!("unknown preset {other}"))),
    };
    Ok(cfg.to_json())
}

/// (train count, test count, pixel dimension) of an MNIST directory.
#[pyfunction]
fn mnist_summary(data_dir: &str) -> PyResult<(usize, usize, usize)> {
    let base = load_mnist(Path::new(data_dir)).map_err(err)?;
    Ok((base.n_train(), base.n_test(), base.dim))
}

/// Run a full experiment from config JSON; returns the metrics record JSON.
#[pyfunction]
fn run_experiment(config_json: &str, data_dir: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let base = load_mnist(Path::new(data_dir)).map_err(err)?;
    let metrics = if cfg.method == experiment::MethodConfig::NaiveFinetune {
        experiment::run_naive(&cfg, base).map_err(err)?
    } else {
        experiment::run_experiment(&cfg, base, &mut |_| {}).map_err(err)?.metrics
    };
    Ok(metrics.to_json())
}

/// Task split sizes (train, test) for a benchmark stream.
#[pyfunction]
fn stream_sizes(config_json: &str, data_dir: &str) -> PyResult<Vec<(usize, usize)>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let base = load_mnist(Path::new(data_dir)).map_err(err)?;
    let stream = experiment::build_stream(&cfg, base).map_err(err)?;
    Ok((0..stream.num_tasks())
        .map(|t| {
            let v = stream.task(t);
            (v.n_train(), v.n_test())
        })
        .collect())
}

/// Permutation sanity probe: the first task of a permuted stream is identity.
#[pyfunction]
fn permuted_first_task_is_identity(data_dir: &str, seed: u64) -> PyResult<bool> {
    let base = load_mnist(Path::new(data_dir)).map_err(err)?;
    let stream = TaskStream::permuted(base.clone(), 2, seed).map_err(err)?;
    let v0 = stream.task(0);
    let x = v0.inputs(ibpwf::data::Split::Train, &[0]);
    let direct: Vec<f64> = base.train_pixels[..base.dim]
        .iter()
        .map(|&b| ibpwf::data::normalize_pixel(b))
        .collect();
    Ok(x.data() == &direct[..])
}

#[pymodule]
fn ibpwf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kumaraswamy_kl, m)?)?;
    m.add_function(wrap_pyfunction!(kumaraswamy_moment, m)?)?;
    m.add_function(wrap_pyfunction!(kumaraswamy_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kumaraswamy_sample, m)?)?;
    m.add_function(wrap_pyfunction!(concrete_sample, m)?)?;
    m.add_function(wrap_pyfunction!(stick_breaking, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(mnist_summary, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(stream_sizes, m)?)?;
    m.add_function(wrap_pyfunction!(permuted_first_task_is_identity, m)?)?;
    Ok(())
}
