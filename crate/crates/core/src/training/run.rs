use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use super::{
    build_step, mix, Adam, Batch, BatchNeeds, RecipeName, Result, TrainConfig, TrainError, TrainMode, MIN_BATCH_SIZE,
};
use crate::data::{stratified_subsample, subset_hash, Dataset};
use crate::losses::{bce_multilabel, LabelMatrix};
use crate::metrics::{evaluate, mean_std, MetricReport};
use crate::model::{fuse, DualEncoderModel, Modality, ModelConfig, CLASSIFIER_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Probe,
    Joint,
}

/// Observes training without influencing it.
pub trait Monitor {
    /// Called after each optimization step with the batch it consumed.
    fn on_batch(&mut self, _phase: Phase, _batch: &Batch) {}
}

pub struct NoMonitor;

impl Monitor for NoMonitor {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub recipe: RecipeName,
    pub mode: TrainMode,
    pub seed: u64,
    pub subset_hash: String,
    pub labeled_samples: usize,
    /// Held-out evaluation of the final model.
    pub report: MetricReport,
    pub curve: Vec<CurvePoint>,
    pub evaluations: Vec<EvalPoint>,
    /// Count of steps per warning message.
    pub warnings: BTreeMap<String, usize>,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunResult {
    /// `step,term,value` rows.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,term,value\n");
        for p in &self.curve {
            let _ = writeln!(out, "{},{},{}", p.step, p.term, p.value);
        }
        out
    }
}

pub struct TrainedRun {
    pub result: RunResult,
    pub model: DualEncoderModel<f32>,
}

/// The splits one run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct RunData {
    /// Training pool (everything not held out).
    pub pool: Dataset,
    pub held_out: Dataset,
    /// Stratified labeled subset of the pool.
    pub labeled: Dataset,
    pub subset_hash: String,
}

/// Splits off the held-out set (fixed by `split_seed`) and draws this run's
/// stratified labeled subset (varies with `seed`).
pub fn prepare_run(dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<RunData> {
    let (pool, held_out) = dataset.split(cfg.held_out_fraction, cfg.split_seed);
    let (labeled, _) = stratified_subsample(&pool, cfg.label_fraction, seed)?;
    let hash = subset_hash(labeled.samples.iter().map(|s| s.id.as_str()));
    Ok(RunData {
        pool,
        held_out,
        labeled,
        subset_hash: hash,
    })
}

fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, &[0xe90c, epoch as u64])));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= MIN_BATCH_SIZE)
        .map(<[usize]>::to_vec)
        .collect()
}

fn needs_for(cfg: &TrainConfig) -> BatchNeeds {
    let r = &cfg.recipe;
    BatchNeeds {
        clean: r.needs_clean(),
        s1_views: r.needs_views(Modality::S1),
        s2_views: r.needs_views(Modality::S2),
        labels: true,
    }
}

struct Log {
    curve: Vec<CurvePoint>,
    warnings: BTreeMap<String, usize>,
    step: usize,
}

impl Log {
    fn new() -> Self {
        Self {
            curve: Vec::new(),
            warnings: BTreeMap::new(),
            step: 0,
        }
    }

    fn record(&mut self, terms: &BTreeMap<String, f64>, total: f64) -> Result<()> {
        for (term, value) in terms.iter().chain([(&"total".to_string(), &total)]) {
            if !value.is_finite() {
                return Err(TrainError::NonFinite(format!("{term} at step {}", self.step)));
            }
            self.curve.push(CurvePoint {
                step: self.step,
                term: term.clone(),
                value: *value,
            });
        }
        self.step += 1;
        Ok(())
    }
}

/// Runs the recipe's contrastive (or composite) objective for `epochs`
/// epochs over `data`, updating the parameters selected by `trainable`.
fn optimize(
    model: &mut DualEncoderModel<f32>,
    cfg: &TrainConfig,
    data: &Dataset,
    epochs: usize,
    phase: Phase,
    log: &mut Log,
    monitor: &mut dyn Monitor,
    mut after_epoch: impl FnMut(usize, &DualEncoderModel<f32>) -> Result<()>,
) -> Result<()> {
    if data.len() < MIN_BATCH_SIZE {
        return Err(TrainError::Config(format!(
            "need at least {MIN_BATCH_SIZE} training samples, got {}",
            data.len()
        )));
    }
    let trainable = |name: &str| phase == Phase::Joint || !name.starts_with(CLASSIFIER_PREFIX);
    let mut adam = Adam::new(model.params(), cfg.learning_rate, trainable);
    let needs = needs_for(cfg);
    for epoch in 0..epochs {
        for (b, idx) in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let batch = Batch::assemble(data, idx, needs, &cfg.augmentation, mix(cfg.seed, &[epoch as u64, b as u64]))?;
            let out = build_step(&cfg.recipe, &cfg.temperatures, &batch, model)?;
            for w in out.warnings {
                *log.warnings.entry(w).or_insert(0) += 1;
            }
            log.record(&out.loss.terms, out.loss.total)?;
            adam.step(model.params_mut(), &out.grads);
            monitor.on_batch(phase, &batch);
        }
        debug!(?phase, epoch, "epoch done");
        after_epoch(epoch + 1, model)?;
    }
    Ok(())
}

/// Per-modality features `h` of every sample, computed in chunks.
pub fn encode_dataset(model: &DualEncoderModel<f32>, data: &Dataset, m: Modality) -> Result<Array2<f32>> {
    const CHUNK: usize = 128;
    let d = model.config().encoder(m).out_dim;
    let mut parts = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(CHUNK) {
        parts.push(model.encode(m, &data.stack(idx, m)?)?);
    }
    if parts.is_empty() {
        return Ok(Array2::zeros((0, d)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths"))
}

/// Held-out probabilities from fused clean features.
pub fn predict_probs(model: &DualEncoderModel<f32>, data: &Dataset) -> Result<Array2<f64>> {
    let h1 = encode_dataset(model, data, Modality::S1)?;
    let h2 = encode_dataset(model, data, Modality::S2)?;
    Ok(model.classify(&fuse(&h1, &h2)?)?.mapv(f64::from))
}

pub fn evaluate_model(model: &DualEncoderModel<f32>, data: &Dataset, threshold: f64) -> Result<MetricReport> {
    let probs = predict_probs(model, data)?;
    Ok(evaluate(data.label_matrix().view(), probs.view(), threshold, data.vocabulary.names())?)
}

/// Trains only the classifier with BCE on frozen, un-augmented fused
/// features of `labeled`.
fn linear_probe(
    model: &mut DualEncoderModel<f32>,
    cfg: &TrainConfig,
    labeled: &Dataset,
    log: &mut Log,
    monitor: &mut dyn Monitor,
) -> Result<()> {
    let features = fuse(
        &encode_dataset(model, labeled, Modality::S1)?,
        &encode_dataset(model, labeled, Modality::S2)?,
    )?;
    let y = labeled.label_matrix();
    let mut adam = Adam::new(model.params(), cfg.probe_learning_rate, |n| n.starts_with(CLASSIFIER_PREFIX));
    for epoch in 0..cfg.probe_epochs {
        for idx in &epoch_batches(labeled.len(), cfg.batch_size, mix(cfg.seed, &[PROBE_STREAM]), epoch) {
            let batch = Batch::new(
                idx.iter().map(|&i| labeled.samples[i].id.clone()).collect(),
                Some(LabelMatrix::new(y.select(Axis(0), idx))?),
            );
            let x = features.select(Axis(0), idx);
            let logits = model.logits(&x)?;
            let ev = bce_multilabel(logits.mapv(f64::from).view(), batch.labels().expect("attached"))?;
            let mut grads = model.zero_grads();
            model.classifier_backward(&x, ev.grad.mapv(|v| v as f32).view(), &mut grads);
            let mut terms = BTreeMap::new();
            terms.insert("probe_bce".to_string(), ev.value.total);
            log.record(&terms, ev.value.total)?;
            adam.step(model.params_mut(), &grads);
            monitor.on_batch(Phase::Probe, &batch);
        }
    }
    Ok(())
}

const PROBE_STREAM: u64 = 0x9b0e;

fn finish(
    cfg: &TrainConfig,
    model: DualEncoderModel<f32>,
    held_out: &Dataset,
    labeled: &Dataset,
    log: Log,
    evaluations: Vec<EvalPoint>,
    started: Instant,
) -> Result<TrainedRun> {
    let report = evaluate_model(&model, held_out, cfg.eval_threshold)?;
    info!(recipe = %cfg.recipe.name(), seed = cfg.seed, micro_f1 = report.micro_f1, "run finished");
    Ok(TrainedRun {
        result: RunResult {
            recipe: cfg.recipe.name(),
            mode: cfg.recipe.mode(),
            seed: cfg.seed,
            subset_hash: subset_hash(labeled.samples.iter().map(|s| s.id.as_str())),
            labeled_samples: labeled.len(),
            report,
            curve: log.curve,
            evaluations,
            warnings: log.warnings,
            checkpoint: None,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        model,
    })
}

/// Contrastive pretraining of encoders and projection heads on
/// `pretrain` (labels never read), then a linear probe on `labeled` with
/// the encoders frozen. Evaluated on `held_out`.
pub fn train_sequential(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pretrain: &Dataset,
    labeled: &Dataset,
    held_out: &Dataset,
    monitor: &mut dyn Monitor,
) -> Result<TrainedRun> {
    if cfg.recipe.mode() != TrainMode::Sequential {
        return Err(TrainError::Mode(cfg.recipe.mode(), "sequential"));
    }
    cfg.validate(model_cfg)?;
    let started = Instant::now();
    let mut model = DualEncoderModel::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let mut log = Log::new();
    optimize(&mut model, cfg, pretrain, cfg.pretrain_epochs, Phase::Pretrain, &mut log, monitor, |_, _| Ok(()))?;
    linear_probe(&mut model, cfg, labeled, &mut log, monitor)?;
    finish(cfg, model, held_out, labeled, log, Vec::new(), started)
}

/// End-to-end optimization of the full composite on `labeled`.
pub fn train_joint(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    labeled: &Dataset,
    held_out: &Dataset,
    monitor: &mut dyn Monitor,
) -> Result<TrainedRun> {
    if cfg.recipe.mode() != TrainMode::Joint {
        return Err(TrainError::Mode(cfg.recipe.mode(), "joint"));
    }
    cfg.validate(model_cfg)?;
    let started = Instant::now();
    let mut model = DualEncoderModel::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let mut log = Log::new();
    let mut evaluations = Vec::new();
    let cadence = cfg.eval_cadence;
    optimize(&mut model, cfg, labeled, cfg.epochs, Phase::Joint, &mut log, monitor, |epoch, m| {
        if cadence > 0 && epoch % cadence == 0 {
            let r = evaluate_model(m, held_out, cfg.eval_threshold)?;
            evaluations.push(EvalPoint {
                epoch,
                micro_f1: r.micro_f1,
                macro_f1: r.macro_f1,
            });
        }
        Ok(())
    })?;
    finish(cfg, model, held_out, labeled, log, evaluations, started)
}

/// One full run: split, stratified subset for `seed`, train per the
/// recipe's mode, evaluate on the held-out split.
pub fn run_once(model_cfg: &ModelConfig, cfg: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<TrainedRun> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    cfg.validate(model_cfg)?;
    let data = prepare_run(dataset, &cfg, seed)?;
    match cfg.recipe.mode() {
        TrainMode::Sequential => {
            train_sequential(model_cfg, &cfg, &data.labeled, &data.labeled, &data.held_out, &mut NoMonitor)
        }
        TrainMode::Joint => train_joint(model_cfg, &cfg, &data.labeled, &data.held_out, &mut NoMonitor),
    }
}

/// Seeds of the protocol's runs, derived from the base seed.
pub fn run_seeds(base: u64, n_runs: usize) -> Vec<u64> {
    (0..n_runs as u64).map(|i| base.wrapping_add(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class: String,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub hamming: MeanStd,
    pub brier: MeanStd,
}

/// Mean and sample standard deviation of every metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_runs: usize,
    pub scalars: BTreeMap<String, MeanStd>,
    pub per_class: Vec<ClassAggregate>,
}

impl AggregateReport {
    pub fn scalar(&self, name: &str) -> Option<MeanStd> {
        self.scalars.get(name).copied()
    }
}

pub fn aggregate_reports(reports: &[MetricReport]) -> AggregateReport {
    let mut scalars = BTreeMap::new();
    if let Some(first) = reports.first() {
        for (k, (name, _)) in first.scalars().iter().enumerate() {
            let vals: Vec<f64> = reports.iter().map(|r| r.scalars()[k].1).collect();
            scalars.insert((*name).to_string(), MeanStd::of(&vals));
        }
    }
    let per_class = reports
        .first()
        .map(|first| {
            (0..first.per_class.len())
                .map(|c| {
                    let col = |f: fn(&crate::metrics::ClassMetrics) -> f64| {
                        MeanStd::of(&reports.iter().map(|r| f(&r.per_class[c])).collect::<Vec<_>>())
                    };
                    ClassAggregate {
                        class: first.per_class[c].class.clone(),
                        precision: col(|m| m.precision),
                        recall: col(|m| m.recall),
                        f1: col(|m| m.f1),
                        hamming: col(|m| m.hamming),
                        brier: col(|m| m.brier),
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    AggregateReport {
        n_runs: reports.len(),
        scalars,
        per_class,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub recipe: RecipeName,
    pub seeds: Vec<u64>,
    pub subset_hashes: Vec<String>,
    pub runs: Vec<RunResult>,
    pub aggregate: AggregateReport,
}

/// `n_runs` independent runs with seeds derived from `cfg.seed`; each run
/// draws its own stratified subset.
pub fn run_protocol(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    n_runs: usize,
) -> Result<(ProtocolResult, Vec<DualEncoderModel<f32>>)> {
    if n_runs < 2 {
        return Err(TrainError::Config(format!("protocol needs at least 2 runs, got {n_runs}")));
    }
    let seeds = run_seeds(cfg.seed, n_runs);
    let mut runs = Vec::with_capacity(n_runs);
    let mut models = Vec::with_capacity(n_runs);
    for &seed in &seeds {
        let trained = run_once(model_cfg, cfg, dataset, seed)?;
        runs.push(trained.result);
        models.push(trained.model);
    }
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok((
        ProtocolResult {
            recipe: cfg.recipe.name(),
            subset_hashes: runs.iter().map(|r| r.subset_hash.clone()).collect(),
            seeds,
            aggregate: aggregate_reports(&reports),
            runs,
        },
        models,
    ))
}
