//! Training loop, evaluation, split-MAE diagnostics, and the ablation and
//! tau-sweep runners.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_bool, parse_key_values, parse_num, render_key_values};
use crate::data::{EmbeddingRecord, SplitData, HWT, MGT};
use crate::error::{Error, Result};
use crate::model::{
    predict, AdamW, AdamWConfig, AlphaMode, DetectorModel, FsrInference, PipelineConfig,
    PreparedSample,
};
use crate::spectral::{Alphas, BandKeepMask, GlobalSpectrumStats};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub fsa_weight: f64,
    pub eval_interval: usize,
    pub seed: u64,
    pub refresh_stats: bool,
    pub pipeline: PipelineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 2e-5,
            weight_decay: 0.01,
            fsa_weight: 1.0,
            eval_interval: 1,
            seed: 0,
            refresh_stats: false,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.pipeline.fsa && self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 when alignment is enabled".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if !(self.fsa_weight.is_finite() && self.fsa_weight >= 0.0) {
            return Err(Error::Config("fsa_weight must be finite and >= 0".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("fsa_weight", format!("{:?}", self.fsa_weight)),
            ("eval_interval", self.eval_interval.to_string()),
            ("seed", self.seed.to_string()),
            ("refresh_stats", self.refresh_stats.to_string()),
        ];
        out.extend(self.pipeline.pairs());
        out
    }

    pub fn to_text(&self) -> String {
        render_key_values(self.pairs())
    }

    /// Applies one setting; unknown keys return false.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "fsa_weight" => self.fsa_weight = parse_num(key, value)?,
            "eval_interval" => self.eval_interval = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "refresh_stats" => self.refresh_stats = parse_bool(key, value)?,
            _ => return self.pipeline.set(key, value),
        }
        Ok(true)
    }

    /// Overlays settings from `key=value` text; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            if !self.set(&k, &v)? {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub fsa: f64,
    pub valid_acc: Option<f64>,
    pub valid_f1: Option<f64>,
}

/// One batch's loss decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub ce: f64,
    pub fsa: f64,
    pub fsa_applied: bool,
    pub alphas: Alphas,
    pub reconstructed_mu: (f64, f64),
}

/// Model, optimizer and frozen stats for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DetectorModel,
    pub optimizer: AdamW,
    pub stats: GlobalSpectrumStats,
    config: TrainConfig,
}

impl Trainer {
    /// Builds a fresh model and computes the frozen stats over `train`.
    pub fn new(config: TrainConfig, d: usize, train: &[PreparedSample]) -> Result<Self> {
        config.validate()?;
        let model = DetectorModel::new(d, config.pipeline)?;
        let stats = model.compute_stats(train)?;
        Ok(Self {
            optimizer: AdamW::new(config.optimizer(), d),
            model,
            stats,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Forward, backward and one optimizer step.
    pub fn step(&mut self, batch: &[&PreparedSample]) -> Result<BatchLoss> {
        if self.config.pipeline.fsa && batch.len() < 2 {
            log::warn!("batch of one sample: skipping the alignment term");
        }
        let obj = self
            .model
            .objective(batch, &self.stats, AlphaMode::Batch, self.config.fsa_weight)?;
        self.optimizer.step(&mut self.model.params, &obj.grads)?;
        if !self.model.params.is_finite() {
            return Err(Error::Diverged("non-finite parameters after update".into()));
        }
        Ok(BatchLoss {
            total: obj.total,
            ce: obj.ce,
            fsa: obj.fsa,
            fsa_applied: obj.fsa_applied,
            alphas: obj.alphas,
            reconstructed_mu: obj.reconstructed_mu,
        })
    }

    pub fn refresh_stats(&mut self, train: &[PreparedSample]) -> Result<()> {
        self.stats = self.model.compute_stats(train)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub stats: GlobalSpectrumStats,
    pub history: Vec<EpochLog>,
    /// Epoch of the returned checkpoint; `None` when no evaluation ran.
    pub best_epoch: Option<usize>,
    pub optimizer: AdamW,
}

fn with_coords(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

fn check_dims(records: &[EmbeddingRecord], d: usize) -> Result<()> {
    for r in records {
        if r.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: r.dim(),
            });
        }
    }
    Ok(())
}

/// Trains on `train` and returns the checkpoint with the best validation
/// F1, earliest on ties. With no validation data the final model is
/// returned; with zero epochs, the initial one.
pub fn train(
    config: &TrainConfig,
    train_set: &[EmbeddingRecord],
    valid_set: &[EmbeddingRecord],
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train_set.first().ok_or(Error::EmptyTrainingSet)?;
    let d = first.dim();
    check_dims(train_set, d)?;
    check_dims(valid_set, d)?;
    let probe = DetectorModel::new(d, config.pipeline)?;
    let train_samples = probe.prepare_all(train_set)?;
    let valid_samples = probe.prepare_all(valid_set)?;
    let mut trainer = Trainer::new(*config, d, &train_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, DetectorModel, GlobalSpectrumStats)> = None;

    for epoch in 1..=config.epochs {
        if config.refresh_stats && epoch > 1 {
            trainer.refresh_stats(&train_samples)?;
        }
        order.shuffle(&mut rng);
        let (mut tot, mut ce, mut fsa) = (0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let loss = trainer.step(&batch).map_err(|e| with_coords(e, epoch, b + 1))?;
            tot += loss.total;
            ce += loss.ce;
            fsa += loss.fsa;
            n_batches += 1;
        }
        let nb = n_batches as f64;
        let mut log_entry = EpochLog {
            epoch,
            train_loss: tot / nb,
            ce: ce / nb,
            fsa: fsa / nb,
            valid_acc: None,
            valid_f1: None,
        };
        if !valid_samples.is_empty() && epoch % config.eval_interval == 0 {
            let rep = evaluate_prepared(&trainer.model, &valid_samples, &trainer.stats, config.batch_size)?;
            log_entry.valid_acc = Some(rep.accuracy);
            log_entry.valid_f1 = Some(rep.f1);
            if best.as_ref().is_none_or(|(f1, ..)| rep.f1 > *f1) {
                best = Some((rep.f1, epoch, trainer.model.clone(), trainer.stats.clone()));
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.6} ce {:.6} fsa {:.6} valid_f1 {:?}",
            log_entry.train_loss,
            log_entry.ce,
            log_entry.fsa,
            log_entry.valid_f1
        );
        history.push(log_entry);
    }

    let (model, stats, best_epoch) = match best {
        Some((_, epoch, model, stats)) => (model, stats, Some(epoch)),
        None => (trainer.model, trainer.stats, None),
    };
    Ok(TrainOutcome {
        model,
        stats,
        history,
        best_epoch,
        optimizer: trainer.optimizer,
    })
}

/// History as JSON lines, one object per epoch.
pub fn history_jsonl(history: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in history {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, label: u8, pred: u8) {
        match (label, pred) {
            (MGT, MGT) => self.tp += 1,
            (HWT, MGT) => self.fp += 1,
            (MGT, _) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_confusion(c: Confusion) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            confusion: c,
        }
    }
}

/// Reconstruction-weight policy used at evaluation time.
pub fn inference_mode(model: &DetectorModel) -> AlphaMode {
    match model.config().fsr_inference {
        FsrInference::Batch => AlphaMode::Batch,
        FsrInference::Off => AlphaMode::Identity,
    }
}

fn evaluate_prepared(
    model: &DetectorModel,
    samples: &[PreparedSample],
    stats: &GlobalSpectrumStats,
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mode = inference_mode(model);
    let mut c = Confusion::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        for (s, l) in chunk.iter().zip(model.logits_batch(&refs, stats, mode)?) {
            c.add(s.label, predict(l));
        }
    }
    Ok(EvalReport::from_confusion(c))
}

/// Batched evaluation in record order; MGT is the positive class.
pub fn evaluate(
    model: &DetectorModel,
    test_set: &[EmbeddingRecord],
    stats: &GlobalSpectrumStats,
    batch_size: usize,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    evaluate_prepared(model, &model.prepare_all(test_set)?, stats, batch_size)
}

/// Reconstructed modulus spectra of `records`, batched as in evaluation.
pub fn feature_moduli(
    model: &DetectorModel,
    records: &[EmbeddingRecord],
    stats: &GlobalSpectrumStats,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let samples = model.prepare_all(records)?;
    let mode = inference_mode(model);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        out.extend(model.forward_batch(&refs, stats, mode)?.moduli());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitMaeCell {
    pub cell: String,
    pub same_label: bool,
    pub mae: f64,
    pub pairs: usize,
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Mean pairwise MAE between two populations. Every pair is used when there
/// are at most `cap`; otherwise `cap` pairs are drawn with replacement.
pub fn population_mae(a: &[Vec<f64>], b: &[Vec<f64>], cap: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let total = a.len() * b.len();
    if total <= cap {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += mean_abs(x, y);
            }
        }
        return (s / total as f64, total);
    }
    let mut s = 0.0;
    for _ in 0..cap {
        let x = &a[rng.random_range(0..a.len())];
        let y = &b[rng.random_range(0..b.len())];
        s += mean_abs(x, y);
    }
    (s / cap as f64, cap)
}

/// The four cross-split cells `Train_m:Test_m`, `Train_m:Test_h`,
/// `Test_m:Test_h`, `Train_h:Test_h` over the model's modulus spectra.
pub fn split_mae_report(
    train_set: &[EmbeddingRecord],
    test_set: &[EmbeddingRecord],
    model: &DetectorModel,
    stats: &GlobalSpectrumStats,
    batch_size: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<SplitMaeCell>> {
    let tr = feature_moduli(model, train_set, stats, batch_size)?;
    let te = feature_moduli(model, test_set, stats, batch_size)?;
    let pick = |m: &[Vec<f64>], recs: &[EmbeddingRecord], label: u8| -> Vec<Vec<f64>> {
        m.iter()
            .zip(recs)
            .filter(|(_, r)| r.label == label)
            .map(|(v, _)| v.clone())
            .collect()
    };
    let pops = [
        ("Train_m", pick(&tr, train_set, MGT)),
        ("Train_h", pick(&tr, train_set, HWT)),
        ("Test_m", pick(&te, test_set, MGT)),
        ("Test_h", pick(&te, test_set, HWT)),
    ];
    let get = |name: &str| -> &Vec<Vec<f64>> {
        pops.iter().find(|(n, _)| *n == name).map_or(&pops[0].1, |(_, p)| p)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = [
        ("Train_m", "Test_m", true),
        ("Train_m", "Test_h", false),
        ("Test_m", "Test_h", false),
        ("Train_h", "Test_h", true),
    ];
    let mut out = Vec::with_capacity(4);
    for (a, b, same) in cells {
        let name = format!("{a}:{b}");
        let (pa, pb) = (get(a), get(b));
        if pa.is_empty() || pb.is_empty() {
            return Err(Error::EmptyPopulation(name));
        }
        let (mae, pairs) = population_mae(pa, pb, cap, &mut rng);
        out.push(SplitMaeCell {
            cell: name,
            same_label: same,
            mae,
            pairs,
        });
    }
    Ok(out)
}

/// One configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub pipeline: PipelineConfig,
}

fn mark(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// The eight module combinations over (LFF, FSR, FSA): none, singles,
/// pairs, all.
pub fn module_grid(base: PipelineConfig) -> Vec<GridRow> {
    let combos = [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (false, false, true),
        (true, true, false),
        (true, false, true),
        (false, true, true),
        (true, true, true),
    ];
    combos
        .into_iter()
        .map(|(lff, fsr, fsa)| GridRow {
            label: format!("lff={} fsr={} fsa={}", mark(lff), mark(fsr), mark(fsa)),
            pipeline: PipelineConfig {
                lff,
                fsr,
                fsa,
                band_keep: if lff { BandKeepMask::LFF } else { BandKeepMask::ALL },
                ..base
            },
        })
        .collect()
}

/// Single-band rows plus the all-bands row, all other modules off.
pub fn band_grid(base: PipelineConfig) -> Vec<GridRow> {
    let masks = [
        BandKeepMask::new(true, false, false),
        BandKeepMask::new(false, true, false),
        BandKeepMask::new(false, false, true),
        Ok(BandKeepMask::ALL),
    ];
    masks
        .into_iter()
        .map(|m| {
            let band_keep = m.unwrap_or(BandKeepMask::ALL);
            GridRow {
                label: format!("keep={band_keep}"),
                pipeline: PipelineConfig {
                    lff: false,
                    fsr: false,
                    fsa: false,
                    band_keep,
                    ..base
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub pipeline: PipelineConfig,
    pub seeds: Vec<u64>,
    pub f1: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl AblationRow {
    pub fn mean_f1(&self) -> f64 {
        self.f1.iter().sum::<f64>() / self.f1.len().max(1) as f64
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len().max(1) as f64
    }
}

fn run_thread_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains one model per (row, seed) and evaluates it on that seed's test
/// split. Every row sees the same split and training seed for a given
/// seed, so rows are paired.
pub fn ablation_run<F>(
    base: &TrainConfig,
    grid: &[GridRow],
    seeds: &[u64],
    data: F,
    threads: usize,
) -> Result<Vec<AblationRow>>
where
    F: Fn(u64) -> Result<SplitData> + Sync,
{
    run_thread_pool(threads, || {
        let splits: Vec<SplitData> = seeds.par_iter().map(|&s| data(s)).collect::<Result<_>>()?;
        let jobs: Vec<(usize, usize)> = (0..grid.len())
            .flat_map(|r| (0..seeds.len()).map(move |s| (r, s)))
            .collect();
        let results: Vec<EvalReport> = jobs
            .par_iter()
            .map(|&(r, s)| {
                let cfg = TrainConfig {
                    seed: seeds[s],
                    pipeline: grid[r].pipeline,
                    ..*base
                };
                let split = &splits[s];
                let out = train(&cfg, &split.train, &split.valid)?;
                evaluate(&out.model, &split.test, &out.stats, cfg.batch_size)
            })
            .collect::<Result<_>>()?;
        Ok(grid
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let reps = &results[r * seeds.len()..(r + 1) * seeds.len()];
                AblationRow {
                    label: row.label.clone(),
                    pipeline: row.pipeline,
                    seeds: seeds.to_vec(),
                    f1: reps.iter().map(|e| e.f1).collect(),
                    accuracy: reps.iter().map(|e| e.accuracy).collect(),
                }
            })
            .collect())
    })?
}

/// One seeded run per tau value (and seed), on otherwise identical configs.
pub fn tau_sweep<F>(
    base: &TrainConfig,
    taus: &[f64],
    seeds: &[u64],
    data: F,
    threads: usize,
) -> Result<Vec<AblationRow>>
where
    F: Fn(u64) -> Result<SplitData> + Sync,
{
    for &t in taus {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTau(t));
        }
    }
    let grid: Vec<GridRow> = taus
        .iter()
        .map(|&tau| GridRow {
            label: format!("{tau}"),
            pipeline: PipelineConfig {
                tau,
                ..base.pipeline
            },
        })
        .collect();
    ablation_run(base, &grid, seeds, data, threads)
}
