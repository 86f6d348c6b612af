//! Python bindings for the numeric kernels, weighting, losses, retrieval
//! metrics, dataset generation and the train/evaluate entry points.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use dmwa_core::config::RunConfig;
use dmwa_core::data::{self, DatasetConfig};
use dmwa_core::model::Model;
use dmwa_core::tensor::{kernels, Tensor};
use dmwa_core::{loss, retrieval, train, weighting};

fn py_err(e: dmwa_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn cube(batch: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let b = batch.len();
    let m = batch.first().map_or(0, Vec::len);
    let n = batch.first().and_then(|s| s.first()).map_or(0, Vec::len);
    let data: Vec<f64> = batch.into_iter().flatten().flatten().collect();
    Tensor::new(vec![b, m, n], data).map_err(py_err)
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    kernels::kl_divergence(&p, &q).map_err(py_err)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    kernels::cosine_similarity(&a, &b).map_err(py_err)
}

#[pyfunction]
fn softmax(x: Vec<f64>) -> PyResult<Vec<f64>> {
    let t = Tensor::vector(x);
    Ok(kernels::softmax(&t, 0).map_err(py_err)?.into_data())
}

/// Per-sample local scores from `[B][m][n]` nested lists.
#[pyfunction]
fn local_alignment_scores(sketch: Vec<Vec<Vec<f64>>>, image: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
    weighting::local_alignment_scores(&cube(sketch)?, &cube(image)?).map_err(py_err)
}

#[pyfunction]
fn global_alignment_scores(text: Vec<Vec<f64>>, sketch: Vec<Vec<f64>>, image: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    weighting::global_alignment_scores(&matrix(text)?, &matrix(sketch)?, &matrix(image)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (scores, threshold, mode = "attenuate"))]
fn apply_threshold(scores: Vec<f64>, threshold: f64, mode: &str) -> PyResult<Vec<f64>> {
    let mode: weighting::WeightMode = mode.parse().map_err(py_err)?;
    Ok(weighting::apply_threshold(&scores, threshold, mode))
}

#[pyfunction]
fn batch_threshold(scores: Vec<f64>) -> f64 {
    weighting::batch_threshold(&scores)
}

#[pyfunction]
fn final_weights(local_list: Vec<f64>, global_list: Vec<f64>) -> PyResult<Vec<f64>> {
    weighting::final_weights(&local_list, &global_list).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (anc, pos, neg, alpha = 0.3))]
fn triplet_original(anc: Vec<f64>, pos: Vec<f64>, neg: Vec<f64>, alpha: f64) -> f64 {
    loss::triplet_original(&anc, &pos, &neg, alpha)
}

#[pyfunction]
#[pyo3(signature = (anc_sketch, pos_image, neg_sketch, beta = 0.3))]
fn triplet_domain(anc_sketch: Vec<f64>, pos_image: Vec<f64>, neg_sketch: Vec<f64>, beta: f64) -> f64 {
    loss::triplet_domain(&anc_sketch, &pos_image, &neg_sketch, beta)
}

/// Retrieval metrics of a `[queries][gallery]` score matrix.
#[pyfunction]
#[pyo3(signature = (scores, query_labels, gallery_labels, k_list = vec![100, 200]))]
fn rank_and_score(
    scores: Vec<Vec<f64>>,
    query_labels: Vec<usize>,
    gallery_labels: Vec<usize>,
    k_list: Vec<usize>,
) -> PyResult<HashMap<String, f64>> {
    let r = retrieval::rank_and_score(&scores, &query_labels, &gallery_labels, &k_list, "python").map_err(py_err)?;
    let mut out = HashMap::new();
    out.insert("map_all".to_string(), r.map_all);
    out.insert("excluded_queries".to_string(), r.excluded_queries as f64);
    for m in &r.map_at_k {
        out.insert(format!("map@{}", m.k), m.value);
    }
    for m in &r.prec_at_k {
        out.insert(format!("prec@{}", m.k), m.value);
    }
    Ok(out)
}

/// Generates a synthetic dataset, writes it to `out` and returns split sizes.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, corruption_rate = 0.0, num_classes = 16, seen_classes = 12, grid = 32))]
fn generate_dataset(
    out: PathBuf,
    seed: u64,
    corruption_rate: f64,
    num_classes: usize,
    seen_classes: usize,
    grid: usize,
) -> PyResult<HashMap<String, usize>> {
    let cfg = DatasetConfig {
        seed,
        corruption_rate,
        num_classes,
        seen_classes,
        grid,
        ..DatasetConfig::default()
    };
    let ds = data::generate(&cfg).map_err(py_err)?;
    data::save(&ds, &out).map_err(py_err)?;
    Ok(HashMap::from([
        ("train".to_string(), ds.train.len()),
        ("corrupted".to_string(), ds.train.iter().filter(|p| p.corrupted).count()),
        ("queries".to_string(), ds.queries.len()),
        ("gallery".to_string(), ds.gallery.len()),
    ]))
}

fn run_config(config: &str) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply_text(config).map_err(py_err)?;
    Ok(cfg)
}

/// Trains on the dataset at `data_dir` with a `key = value` config and
/// returns the per-epoch mean losses. Checkpoints go to `out` if given.
#[pyfunction]
#[pyo3(signature = (data_dir, config = "", out = None))]
fn train_model(data_dir: PathBuf, config: &str, out: Option<PathBuf>) -> PyResult<Vec<f64>> {
    let cfg = run_config(config)?;
    let ds = data::load(&data_dir).map_err(py_err)?;
    let outcome = train::train(&cfg, &ds, out.as_deref()).map_err(py_err)?;
    Ok(train::epoch_mean_losses(&outcome.log))
}

/// Zero-shot evaluation of a checkpoint directory.
#[pyfunction]
#[pyo3(signature = (data_dir, checkpoint, config = ""))]
fn evaluate(data_dir: PathBuf, checkpoint: PathBuf, config: &str) -> PyResult<HashMap<String, f64>> {
    let cfg = run_config(config)?;
    let ds = data::load(&data_dir).map_err(py_err)?;
    let model = Model::load(&checkpoint, train::model_config(&cfg, &ds)).map_err(py_err)?;
    let r = train::evaluate(&model, &ds, &cfg).map_err(py_err)?;
    let mut out = HashMap::from([("map_all".to_string(), r.map_all)]);
    for m in &r.prec_at_k {
        out.insert(format!("prec@{}", m.k), m.value);
    }
    Ok(out)
}

#[pymodule]
fn dmwa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(local_alignment_scores, m)?)?;
    m.add_function(wrap_pyfunction!(global_alignment_scores, m)?)?;
    m.add_function(wrap_pyfunction!(apply_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(batch_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(final_weights, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_original, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_domain, m)?)?;
    m.add_function(wrap_pyfunction!(rank_and_score, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
