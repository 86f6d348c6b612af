//! Training loop, weight dumps, zero-shot evaluation and ablation runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::config::{Ablation, RunConfig};
use crate::data::{Dataset, SamplePair};
use crate::encoders::{patchify, Modality};
use crate::error::{Error, Result};
use crate::loss::{sample_quadruplets, weighted_quadruplet_loss, LossConfig, LossTerms, QuadrupletBatch};
use crate::model::{Model, ModelConfig};
use crate::nn::Bindings;
use crate::retrieval::{embed_split, rank_and_score, score_matrix, RetrievalReport};
use crate::rng::SeedTree;
use crate::tensor::{Graph, OptimizerState, Tensor, Var};
use crate::weighting::{global_alignment_scores, local_alignment_scores, WeightComputation, WeightMode};

/// Sketch/image pairs of one training batch.
#[derive(Clone, Debug)]
pub struct PairBatch<'a> {
    pub ids: Vec<usize>,
    pub sketches: Vec<&'a Tensor>,
    pub images: Vec<&'a Tensor>,
    pub classes: Vec<usize>,
}

impl<'a> PairBatch<'a> {
    pub fn new(pairs: &'a [SamplePair], ids: &[usize]) -> Self {
        Self {
            ids: ids.to_vec(),
            sketches: ids.iter().map(|&i| &pairs[i].sketch).collect(),
            images: ids.iter().map(|&i| &pairs[i].image).collect(),
            classes: ids.iter().map(|&i| pairs[i].class).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn single_class(&self) -> bool {
        self.classes.windows(2).all(|w| w[0] == w[1])
    }
}

/// Tape handles of one encoded batch after the cross block.
#[derive(Clone, Copy, Debug)]
pub struct BatchTokens {
    /// `[B·(n+1) × d]` sketch tokens attended over the paired image.
    pub sketch: Var,
    /// `[B·(n+1) × d]` image tokens attended over the paired sketch.
    pub image: Var,
    /// `[B × d]` global rows of the two.
    pub sketch_globals: Var,
    pub image_globals: Var,
    /// `[B × d]` global rows of the uni-modal encoder outputs.
    pub sketch_unimodal: Var,
    pub image_unimodal: Var,
}

/// Both encoders, then the shared cross block in each direction.
pub fn encode_pairs(model: &Model, g: &mut Graph, p: &Bindings, batch: &PairBatch) -> Result<BatchTokens> {
    let cfg = &model.config.encoder;
    let b = batch.len();
    let sp = g.constant(patchify(&batch.sketches, cfg)?);
    let ip = g.constant(patchify(&batch.images, cfg)?);
    let zs = model.sketch.forward(g, p, sp, b)?;
    let zi = model.image.forward(g, p, ip, b)?;
    let sketch = model.cross.forward(g, p, zs, zi, b)?;
    let image = model.cross.forward(g, p, zi, zs, b)?;
    let rows: Vec<usize> = (0..b).map(|i| i * (cfg.n_tokens() + 1)).collect();
    Ok(BatchTokens {
        sketch,
        image,
        sketch_globals: g.gather_rows(sketch, &rows)?,
        image_globals: g.gather_rows(image, &rows)?,
        sketch_unimodal: g.gather_rows(zs, &rows)?,
        image_unimodal: g.gather_rows(zi, &rows)?,
    })
}

/// `[B × n × d]` local tokens out of a stacked `[B·(n+1) × d]` token matrix.
fn locals(tokens: &Tensor, batch: usize) -> Result<Tensor> {
    let (rows, d) = tokens.matrix_dims();
    let per = rows / batch;
    let mut data = Vec::with_capacity(batch * (per - 1) * d);
    for chunk in tokens.data().chunks_exact(per * d) {
        data.extend_from_slice(&chunk[d..]);
    }
    Tensor::new(vec![batch, per - 1, d], data)
}

/// Alignment scores and weight lists of a batch, computed on tape values.
#[allow(clippy::too_many_arguments)]
pub fn batch_weights(
    model: &Model,
    g: &mut Graph,
    p: &Bindings,
    batch: &PairBatch,
    tokens: &BatchTokens,
    mode: WeightMode,
    ablation: Ablation,
    training: bool,
) -> Result<WeightComputation> {
    let b = batch.len();
    let local = local_alignment_scores(&locals(g.value(tokens.sketch), b)?, &locals(g.value(tokens.image), b)?)?;
    let text = model.text.forward(g, p, &batch.classes, training)?;
    let global = global_alignment_scores(g.value(text), g.value(tokens.sketch_globals), g.value(tokens.image_globals))?;
    WeightComputation::from_scores(local, global, mode, ablation.levels())
}

/// Everything one step produces.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub tokens: BatchTokens,
    pub weights: WeightComputation,
    pub loss: LossTerms,
}

/// Loss settings of an ablation: the domain term follows the selector.
pub fn ablation_loss(base: &LossConfig, ablation: Ablation) -> LossConfig {
    LossConfig {
        domain_term: ablation.domain_term(),
        ..*base
    }
}

/// Full forward pass of one batch. `fin_override` replaces the computed
/// final weights, which is how gradient checks hold the weights fixed.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch(
    model: &Model,
    g: &mut Graph,
    p: &Bindings,
    batch: &PairBatch,
    quads: &QuadrupletBatch,
    cfg: &RunConfig,
    fin_override: Option<&[f64]>,
    training: bool,
) -> Result<BatchForward> {
    let tokens = encode_pairs(model, g, p, batch)?;
    let weights = batch_weights(model, g, p, batch, &tokens, cfg.weight_mode, cfg.ablation, training)?;
    let fin = fin_override.unwrap_or(&weights.fin_list);
    let loss_cfg = ablation_loss(&cfg.loss, cfg.ablation);
    let loss = weighted_quadruplet_loss(g, tokens.sketch_unimodal, tokens.image_unimodal, quads, fin, &loss_cfg)?;
    Ok(BatchForward { tokens, weights, loss })
}

/// Shuffled batches of one epoch. A trailing batch of one sample is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seeds: &SeedTree, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeds.indexed_stream("shuffle", epoch as u64));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

pub fn model_config(cfg: &RunConfig, dataset: &Dataset) -> ModelConfig {
    ModelConfig {
        encoder: cfg.encoder,
        num_classes: dataset.config.num_classes,
        seen_classes: dataset.config.seen(),
        sharing: cfg.encoder_sharing,
    }
}

/// Fresh model for a run, initialised from the run seed.
pub fn init_model(cfg: &RunConfig, dataset: &Dataset) -> Result<Model> {
    let mut model = Model::new(model_config(cfg, dataset), &SeedTree::new(cfg.seed).child("model"))?;
    model.store.round_to(cfg.precision);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_o: f64,
    pub loss_d: f64,
    pub loss_total: f64,
    pub fin_mean: f64,
    pub fin_min: f64,
    pub fin_max: f64,
}

pub fn train_csv(log: &[StepRecord]) -> String {
    let mut out = String::from("epoch,step,loss_o,loss_d,loss_total,fin_mean,fin_min,fin_max\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.loss_o, r.loss_d, r.loss_total, r.fin_mean, r.fin_min, r.fin_max
        );
    }
    out
}

/// Mean `loss_total` per epoch, in epoch order.
pub fn epoch_mean_losses(log: &[StepRecord]) -> Vec<f64> {
    let epochs = log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let vals: Vec<f64> = log.iter().filter(|r| r.epoch == e).map(|r| r.loss_total).collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

/// Resolves `<out>/checkpoints/latest` to the checkpoint directory it names.
pub fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    let name = fs::read_to_string(out.join("checkpoints").join("latest"))?;
    Ok(out.join("checkpoints").join(name.trim()))
}

fn write_checkpoint(model: &Model, out: &Path, epoch: usize) -> Result<()> {
    let dir = checkpoint_dir(out, epoch);
    model.save(&dir)?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    fs::write(out.join("checkpoints").join("latest"), format!("{name}\n"))?;
    Ok(())
}

fn dump_diagnostic(out: &Path, epoch: usize, step: usize, batch: &PairBatch, err: &Error, log: &[StepRecord]) {
    let mut text = format!("error: {err}\nepoch: {epoch}\nstep: {step}\nbatch ids: {:?}\nclasses: {:?}\n", batch.ids, batch.classes);
    text.push_str("recent steps:\n");
    text.push_str(&train_csv(&log[log.len().saturating_sub(5)..]));
    if let Err(e) = fs::create_dir_all(out).and_then(|_| fs::write(out.join("diagnostic.txt"), text)) {
        warn!("could not write diagnostic dump: {e}");
    }
}

/// Trains a fresh model. With `out`, writes `train_log.csv`, the run config
/// and a checkpoint per epoch.
pub fn train(cfg: &RunConfig, dataset: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let model = init_model(cfg, dataset)?;
    train_from(model, cfg, dataset, out)
}

/// Trains `model` in place of a fresh initialisation.
pub fn train_from(mut model: Model, cfg: &RunConfig, dataset: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.config.grid != cfg.encoder.grid {
        return Err(Error::Config(format!(
            "dataset grid {} differs from encoder grid {}",
            dataset.config.grid, cfg.encoder.grid
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    let seeds = SeedTree::new(cfg.seed);
    let mut opt = OptimizerState::new(cfg.adam, model.store.tensors()).with_lr_scales(model.lr_scales())?;
    let mut log = Vec::new();
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        for (step, ids) in epoch_batches(dataset.train.len(), cfg.batch_size, &seeds, epoch).iter().enumerate() {
            let batch = PairBatch::new(&dataset.train, ids);
            global_step += 1;
            if batch.single_class() {
                warn!("epoch {epoch} step {step}: single-class batch skipped");
                continue;
            }
            let quads = sample_quadruplets(&batch.classes, &mut seeds.indexed_stream("quads", global_step))?;
            let mut g = Graph::new(cfg.precision);
            let p = model.store.bind(&mut g);
            let result = forward_batch(&model, &mut g, &p, &batch, &quads, cfg, None, true)
                .and_then(|fwd| g.backward(fwd.loss.total).map(|grads| (fwd, grads)));
            let (fwd, grads) = match result {
                Ok(v) => v,
                Err(err) => {
                    if let (Error::NonFinite { .. }, Some(dir)) = (&err, out) {
                        dump_diagnostic(dir, epoch, step, &batch, &err, &log);
                    }
                    return Err(err);
                }
            };
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
            opt.step(model.store.tensors_mut(), &grads)?;
            model.store.round_to(cfg.precision);
            let fin = &fwd.weights.fin_list;
            log.push(StepRecord {
                epoch,
                step,
                loss_o: fwd.loss.loss_o,
                loss_d: fwd.loss.loss_d,
                loss_total: g.value(fwd.loss.total).data()[0],
                fin_mean: fin.iter().sum::<f64>() / fin.len() as f64,
                fin_min: fin.iter().copied().fold(f64::INFINITY, f64::min),
                fin_max: fin.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
        if let Some(dir) = out {
            write_checkpoint(&model, dir, epoch)?;
            fs::write(dir.join("train_log.csv"), train_csv(&log))?;
        }
        if let Some(mean) = epoch_mean_losses(&log).get(epoch) {
            info!("epoch {epoch}: mean loss {mean:.6}");
        }
    }
    Ok(TrainOutcome { model, log })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub epoch: usize,
    pub step: usize,
    pub sample_id: usize,
    pub class_id: usize,
    pub corrupted: bool,
    pub local_score: f64,
    pub global_score: f64,
    pub local_weight: f64,
    pub global_weight: f64,
    pub final_weight: f64,
}

pub fn weights_csv(records: &[WeightRecord]) -> String {
    let mut out = String::from("epoch,step,sample_id,class_id,local_score,global_score,local_weight,global_weight,final_weight\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.sample_id, r.class_id, r.local_score, r.global_score, r.local_weight, r.global_weight, r.final_weight
        );
    }
    out
}

/// Forward passes only: the weighting of every training sample, batched
/// exactly as training would batch it. Single-class batches are skipped.
pub fn dump_weights(model: &Model, dataset: &Dataset, cfg: &RunConfig, epochs: usize) -> Result<Vec<WeightRecord>> {
    cfg.validate()?;
    let seeds = SeedTree::new(cfg.seed);
    let mut out = Vec::new();
    for epoch in 0..epochs {
        for (step, ids) in epoch_batches(dataset.train.len(), cfg.batch_size, &seeds, epoch).iter().enumerate() {
            let batch = PairBatch::new(&dataset.train, ids);
            if batch.single_class() {
                warn!("epoch {epoch} step {step}: single-class batch skipped");
                continue;
            }
            let mut g = Graph::new(cfg.precision);
            let p = model.store.bind_frozen(&mut g);
            let tokens = encode_pairs(model, &mut g, &p, &batch)?;
            let w = batch_weights(model, &mut g, &p, &batch, &tokens, cfg.weight_mode, cfg.ablation, true)?;
            for (k, &id) in batch.ids.iter().enumerate() {
                out.push(WeightRecord {
                    epoch,
                    step,
                    sample_id: id,
                    class_id: batch.classes[k],
                    corrupted: dataset.train[id].corrupted,
                    local_score: w.local_scores[k],
                    global_score: w.global_scores[k],
                    local_weight: w.local_list[k],
                    global_weight: w.global_list[k],
                    final_weight: w.fin_list[k],
                });
            }
        }
    }
    Ok(out)
}

/// Zero-shot retrieval on the unseen split.
pub fn evaluate(model: &Model, dataset: &Dataset, cfg: &RunConfig) -> Result<RetrievalReport> {
    let queries: Vec<&Tensor> = dataset.queries.iter().map(|s| &s.data).collect();
    let gallery: Vec<&Tensor> = dataset.gallery.iter().map(|s| &s.data).collect();
    let (ql, gl) = (dataset.query_labels(), dataset.gallery_labels());
    let q = embed_split(model, &queries, &ql, Modality::Sketch, cfg.strict_zs)?;
    let g = embed_split(model, &gallery, &gl, Modality::Image, cfg.strict_zs)?;
    let scores = score_matrix(&q, &g, &model.cross, &model.store, cfg.score_mode)?;
    rank_and_score(&scores, &ql, &gl, &cfg.k_list, "unseen")
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub report: RetrievalReport,
    pub final_epoch_loss: f64,
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("ablation,map_all");
    if let Some(first) = results.first() {
        for m in &first.report.map_at_k {
            let _ = write!(out, ",map@{}", m.k);
        }
        for m in &first.report.prec_at_k {
            let _ = write!(out, ",prec@{}", m.k);
        }
    }
    out.push_str(",final_epoch_loss\n");
    for r in results {
        let _ = write!(out, "{},{}", r.ablation, r.report.map_all);
        for m in r.report.map_at_k.iter().chain(&r.report.prec_at_k) {
            let _ = write!(out, ",{}", m.value);
        }
        let _ = writeln!(out, ",{}", r.final_epoch_loss);
    }
    out
}

/// Trains and evaluates every ablation with the same seed and data.
pub fn run_ablations(cfg: &RunConfig, dataset: &Dataset, out: Option<&Path>) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    for ablation in Ablation::ALL {
        let run = RunConfig {
            ablation,
            ..cfg.clone()
        };
        let dir = out.map(|o| o.join(ablation.to_string()));
        let outcome = train(&run, dataset, dir.as_deref())?;
        let report = evaluate(&outcome.model, dataset, &run)?;
        if let Some(d) = &dir {
            report.write(d, "eval")?;
        }
        results.push(AblationResult {
            ablation,
            report,
            final_epoch_loss: epoch_mean_losses(&outcome.log).last().copied().unwrap_or(f64::NAN),
        });
    }
    if let Some(o) = out {
        fs::write(o.join("ablation.csv"), ablation_csv(&results))?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetConfig};
    use crate::encoders::EncoderConfig;
    use crate::tensor::Precision;

    fn tiny() -> (RunConfig, Dataset) {
        let mut cfg = RunConfig {
            encoder: EncoderConfig {
                grid: 8,
                patch: 4,
                channels: 1,
                d: 8,
                layers: 1,
                heads: 2,
                d_text: 4,
            },
            batch_size: 4,
            epochs: 2,
            precision: Precision::F64,
            k_list: vec![2, 4],
            ..RunConfig::default()
        };
        cfg.dataset = DatasetConfig {
            num_classes: 4,
            seen_classes: 2,
            samples_per_class_train: 4,
            gallery_per_class_test: 3,
            queries_per_class_test: 2,
            grid: 8,
            corruption_rate: 0.25,
            seed: 1,
        };
        let ds = generate(&cfg.dataset).unwrap();
        (cfg, ds)
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let seeds = SeedTree::new(3);
        let batches = epoch_batches(10, 4, &seeds, 0);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(batches, epoch_batches(10, 4, &seeds, 1));
        assert_eq!(epoch_batches(9, 4, &seeds, 0).concat().len(), 8);
    }

    #[test]
    fn full_with_unit_weights_is_unweighted_triplet_plus_domain_term() {
        let (cfg, ds) = tiny();
        let model = init_model(&cfg, &ds).unwrap();
        let batch = PairBatch::new(&ds.train, &[0, 1, 4, 5]);
        let quads = sample_quadruplets(&batch.classes, &mut SeedTree::new(1).stream("q")).unwrap();
        let ones = vec![1.0; 4];
        let total = |ablation: Ablation| {
            let run = RunConfig { ablation, ..cfg.clone() };
            let mut g = Graph::new(Precision::F64);
            let p = model.store.bind(&mut g);
            let f = forward_batch(&model, &mut g, &p, &batch, &quads, &run, Some(&ones), true).unwrap();
            (g.value(f.loss.total).data()[0], f.loss.loss_o, f.loss.loss_d)
        };
        let (full, full_o, full_d) = total(Ablation::Full);
        let (no_gq, no_gq_o, no_gq_d) = total(Ablation::NoGlobalNoQuad);
        assert_eq!(no_gq_d, 0.0);
        assert_eq!(full_o, no_gq_o);
        assert_eq!(full, no_gq + full_d);
    }

    #[test]
    fn training_writes_log_and_checkpoints() {
        let (cfg, ds) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, &ds, Some(dir.path())).unwrap();
        assert_eq!(outcome.log.len(), 4);
        let csv = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(csv, train_csv(&outcome.log));
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), checkpoint_dir(dir.path(), 1));
        let back = Model::load(&checkpoint_dir(dir.path(), 1), model_config(&cfg, &ds)).unwrap();
        // Checkpoint files hold f32 values.
        let mut expected = outcome.model.store.clone();
        expected.round_to(Precision::F32);
        assert_eq!(back.store.tensors(), expected.tensors());
    }

    #[test]
    fn weight_dump_has_one_row_per_sample_and_epoch() {
        let (cfg, ds) = tiny();
        let model = init_model(&cfg, &ds).unwrap();
        let rows = dump_weights(&model, &ds, &cfg, 3).unwrap();
        assert_eq!(rows.len(), 3 * 2 * 4);
        for r in &rows {
            assert_eq!(r.final_weight, r.local_weight * r.global_weight);
        }
        assert_eq!(weights_csv(&rows).lines().count(), rows.len() + 1);
    }

    #[test]
    fn evaluation_reports_on_unseen_classes_in_both_modes() {
        let (mut cfg, ds) = tiny();
        let model = init_model(&cfg, &ds).unwrap();
        cfg.strict_zs = true;
        for mode in ["cross", "fast"] {
            cfg.score_mode = mode.parse().unwrap();
            let r = evaluate(&model, &ds, &cfg).unwrap();
            assert_eq!((r.num_queries, r.num_gallery, r.excluded_queries), (4, 6, 0));
        }
    }
}
