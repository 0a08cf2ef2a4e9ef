//! The trainable detector: a linear adapter, the spectral pipeline, and a
//! linear two-class head, with hand-written reverse-mode gradients.
//!
//! Per sample, `z = A x + b` is transformed to a one-sided spectrum, masked
//! by band, optionally rescaled by batch reconstruction weights, and
//! transformed back to features `f`, which feed `logits = W f + c`.
//! Reconstruction weights are constants under differentiation.

mod checkpoint;
pub mod gradcheck;
mod config;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{FsrInference, PipelineConfig, SpectralAxis};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Params, BLOCK_NAMES};

use rayon::prelude::*;

use crate::alignment::fsa_loss;
use crate::data::{EmbeddingRecord, Payload};
use crate::error::{Error, Result};
use crate::numerics::{
    modulus, modulus_vjp, one_sided_bins, real_dft_adjoint, real_dft_one_sided, real_idft_adjoint,
    real_idft_one_sided, OneSidedSpectrum, Twiddles,
};
use crate::spectral::{
    apply_band_mask, band_scale, compute_alphas, compute_band_partition, scale_bands_in_place,
    Alphas, BandModulusAccumulator, BandPartition, BandSource, GlobalSpectrumStats,
};

/// Mean over the token axis; pooled vectors pass through.
pub fn pool(record: &EmbeddingRecord) -> Result<Vec<f64>> {
    match &record.payload {
        Payload::Pooled(v) => Ok(v.clone()),
        Payload::Tokens(m) if m.rows() == 0 => {
            Err(Error::InvalidRecord(format!("{}: empty token matrix", record.id)))
        }
        Payload::Tokens(m) => Ok(m.mean_row()),
    }
}

/// Model input for one record, pooled or truncated once up front.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub label: u8,
    pub t_num: u32,
    pub s_num: u32,
    /// Pooled vector (one row) or token rows, row-major.
    pub rows: Vec<f64>,
    pub n_rows: usize,
}

impl PreparedSample {
    fn row(&self, i: usize) -> &[f64] {
        let d = self.rows.len() / self.n_rows;
        &self.rows[i * d..(i + 1) * d]
    }
}

/// Pooled features paired with a label, as consumed by the feature-axis
/// pipeline; handy for tests and toy inputs.
pub fn prepared_from_vector(x: Vec<f64>, label: u8, t_num: u32, s_num: u32) -> PreparedSample {
    PreparedSample {
        label,
        t_num,
        s_num,
        rows: x,
        n_rows: 1,
    }
}

/// How reconstruction weights are chosen for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    /// From this batch's band means against the frozen stats.
    Batch,
    Fixed(Alphas),
    Identity,
}

#[derive(Debug, Clone)]
pub struct SampleTape<'a> {
    pub sample: &'a PreparedSample,
    pub partition: BandPartition,
    /// Masked spectra, one per channel.
    pub masked: Vec<OneSidedSpectrum>,
    /// Masked and rescaled spectra.
    pub reconstructed: Vec<OneSidedSpectrum>,
    pub features: Vec<f64>,
    pub logits: [f64; 2],
}

impl SampleTape<'_> {
    /// Reconstructed moduli, channels concatenated.
    pub fn moduli(&self) -> Vec<f64> {
        self.reconstructed.iter().flat_map(modulus).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BatchForward<'a> {
    pub tapes: Vec<SampleTape<'a>>,
    pub alphas: Alphas,
    /// Band means of the masked batch before rescaling.
    pub batch_mu: (f64, f64),
    config: PipelineConfig,
}

impl BatchForward<'_> {
    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn moduli(&self) -> Vec<Vec<f64>> {
        self.tapes.iter().map(SampleTape::moduli).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.tapes.iter().map(|t| t.sample.label).collect()
    }

    /// Band means of the reconstructed batch.
    pub fn reconstructed_mu(&self) -> Result<(f64, f64)> {
        let mut acc = BandModulusAccumulator::default();
        for t in &self.tapes {
            for s in &t.reconstructed {
                acc.add(s, &t.partition)?;
            }
        }
        Ok(acc.means())
    }
}

/// Stable softmax cross-entropy: `(loss, softmax - onehot)`.
pub fn cross_entropy(logits: [f64; 2], label: u8) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let lse = m + (e0 + e1).ln();
    let y = label as usize;
    let loss = lse - logits[y];
    let mut grad = [e0 / (e0 + e1), e1 / (e0 + e1)];
    grad[y] -= 1.0;
    (loss, grad)
}

/// Label 1 only when its logit is strictly larger.
pub fn predict(logits: [f64; 2]) -> u8 {
    (logits[1] > logits[0]) as u8
}

/// Loss terms and gradients of one batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub ce: f64,
    pub fsa: f64,
    /// Whether the alignment term was evaluated.
    pub fsa_applied: bool,
    pub alphas: Alphas,
    pub reconstructed_mu: (f64, f64),
    pub grads: Params,
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub params: Params,
    config: PipelineConfig,
    tw: Twiddles,
}

impl PartialEq for DetectorModel {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.config == other.config
    }
}

impl DetectorModel {
    /// Identity adapter, zero bias, zero head.
    pub fn new(d: usize, config: PipelineConfig) -> Result<Self> {
        Self::from_params(Params::identity(d), config)
    }

    pub fn from_params(params: Params, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if params.d() == 0 {
            return Err(Error::Config("model dimension must be >= 1".into()));
        }
        if !params.is_finite() {
            return Err(Error::Diverged("non-finite parameters".into()));
        }
        let n = match config.spectral_axis {
            SpectralAxis::Feature => params.d(),
            SpectralAxis::Token => config.max_tokens,
        };
        Ok(Self {
            params,
            config,
            tw: Twiddles::new(n),
        })
    }

    pub fn d(&self) -> usize {
        self.params.d()
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Same parameters under another configuration.
    pub fn with_config(&self, config: PipelineConfig) -> Result<Self> {
        Self::from_params(self.params.clone(), config)
    }

    /// Transform length: `d` on the feature axis, `max_tokens` on the token axis.
    pub fn signal_len(&self) -> usize {
        self.tw.len()
    }

    pub fn n_bins(&self) -> usize {
        one_sided_bins(self.signal_len())
    }

    pub fn prepare(&self, record: &EmbeddingRecord) -> Result<PreparedSample> {
        if record.dim() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                found: record.dim(),
            });
        }
        let (rows, n_rows) = match self.config.spectral_axis {
            SpectralAxis::Feature => (pool(record)?, 1),
            SpectralAxis::Token => {
                let m = record.tokens().ok_or(Error::MissingTokenMatrix)?;
                let n = m.rows().min(self.config.max_tokens);
                if n == 0 {
                    return Err(Error::InvalidRecord(format!("{}: empty token matrix", record.id)));
                }
                (m.as_slice()[..n * self.d()].to_vec(), n)
            }
        };
        Ok(PreparedSample {
            label: record.label,
            t_num: record.t_num,
            s_num: record.s_num,
            rows,
            n_rows,
        })
    }

    pub fn prepare_all(&self, records: &[EmbeddingRecord]) -> Result<Vec<PreparedSample>> {
        records.iter().map(|r| self.prepare(r)).collect()
    }

    fn partition(&self, s: &PreparedSample, stats: &GlobalSpectrumStats) -> Result<BandPartition> {
        match self.config.band_source {
            BandSource::PerSample => compute_band_partition(
                self.n_bins(),
                s.t_num as usize,
                s.s_num as usize,
                self.config.tau,
            ),
            BandSource::CorpusAverage => stats.fixed_partition.ok_or_else(|| {
                Error::Config("corpus_average bands need a fixed partition in the stats".into())
            }),
        }
    }

    fn adapt(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d();
        let p = &self.params;
        (0..d)
            .map(|i| {
                let row = &p.adapter_w[i * d..(i + 1) * d];
                row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + p.adapter_b[i]
            })
            .collect()
    }

    /// Unmasked channel spectra of the adapted input.
    fn spectra(&self, s: &PreparedSample) -> Vec<OneSidedSpectrum> {
        let d = self.d();
        match self.config.spectral_axis {
            SpectralAxis::Feature => vec![real_dft_one_sided(&self.tw, &self.adapt(s.row(0)))],
            SpectralAxis::Token => {
                let l = self.signal_len();
                let mut channels = vec![vec![0.0; l]; d];
                for j in 0..s.n_rows {
                    for (i, v) in self.adapt(s.row(j)).into_iter().enumerate() {
                        channels[i][j] = v;
                    }
                }
                channels.iter().map(|c| real_dft_one_sided(&self.tw, c)).collect()
            }
        }
    }

    fn features(&self, reconstructed: &[OneSidedSpectrum]) -> Vec<f64> {
        match self.config.spectral_axis {
            SpectralAxis::Feature => real_idft_one_sided(&self.tw, &reconstructed[0]),
            // readout at token position 0
            SpectralAxis::Token => {
                let l = self.signal_len();
                reconstructed
                    .iter()
                    .map(|s| {
                        (0..s.n_bins())
                            .map(|k| mirror_weight(k, l) * s.re[k])
                            .sum::<f64>()
                            / l as f64
                    })
                    .collect()
            }
        }
    }

    fn head(&self, f: &[f64]) -> [f64; 2] {
        let d = self.d();
        let p = &self.params;
        let dot = |r: usize| p.head_w[r * d..(r + 1) * d].iter().zip(f).map(|(w, v)| w * v).sum::<f64>();
        [dot(0) + p.head_b[0], dot(1) + p.head_b[1]]
    }

    fn check_stats(&self, stats: &GlobalSpectrumStats) -> Result<()> {
        if stats.n_bins != self.n_bins() {
            return Err(Error::DimensionMismatch {
                expected: self.n_bins(),
                found: stats.n_bins,
            });
        }
        if stats.tau != self.config.tau || stats.band_source != self.config.band_source {
            return Err(Error::ConfigMismatch);
        }
        Ok(())
    }

    /// Frozen band means of the current adapter's spectra over `samples`.
    /// Under corpus-average bands the fixed partition comes from the rounded
    /// mean token and sentence counts.
    pub fn compute_stats(&self, samples: &[PreparedSample]) -> Result<GlobalSpectrumStats> {
        if samples.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let fixed = match self.config.band_source {
            BandSource::PerSample => None,
            BandSource::CorpusAverage => {
                let n = samples.len() as f64;
                let t = samples.iter().map(|s| s.t_num as f64).sum::<f64>() / n;
                let s = samples.iter().map(|s| s.s_num as f64).sum::<f64>() / n;
                Some(compute_band_partition(
                    self.n_bins(),
                    (t.round() as usize).max(1),
                    (s.round() as usize).max(1),
                    self.config.tau,
                )?)
            }
        };
        let per_sample: Vec<(Vec<OneSidedSpectrum>, BandPartition)> = samples
            .par_iter()
            .map(|s| {
                let p = match fixed {
                    Some(p) => p,
                    None => compute_band_partition(
                        self.n_bins(),
                        s.t_num as usize,
                        s.s_num as usize,
                        self.config.tau,
                    )?,
                };
                Ok((self.spectra(s), p))
            })
            .collect::<Result<_>>()?;
        GlobalSpectrumStats::compute(per_sample, self.config.tau, self.config.band_source, fixed)
    }

    pub fn forward_batch<'a>(
        &self,
        samples: &[&'a PreparedSample],
        stats: &GlobalSpectrumStats,
        mode: AlphaMode,
    ) -> Result<BatchForward<'a>> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_stats(stats)?;
        for s in samples {
            if s.n_rows == 0 || s.rows.len() != s.n_rows * self.d() {
                return Err(Error::DimensionMismatch {
                    expected: self.d(),
                    found: s.rows.len() / s.n_rows.max(1),
                });
            }
        }
        let mask = self.config.effective_mask();
        let stage1: Vec<(BandPartition, Vec<OneSidedSpectrum>)> = samples
            .par_iter()
            .map(|s| {
                let p = self.partition(s, stats)?;
                let masked = self
                    .spectra(s)
                    .iter()
                    .map(|sp| apply_band_mask(sp, &p, mask))
                    .collect::<Result<Vec<_>>>()?;
                Ok((p, masked))
            })
            .collect::<Result<_>>()?;

        let mut acc = BandModulusAccumulator::default();
        for (p, masked) in &stage1 {
            for s in masked {
                acc.add(s, p)?;
            }
        }
        let batch_mu = acc.means();
        let alphas = if !self.config.fsr {
            Alphas::IDENTITY
        } else {
            match mode {
                AlphaMode::Batch => compute_alphas(stats, batch_mu.0, batch_mu.1),
                AlphaMode::Fixed(a) => a,
                AlphaMode::Identity => Alphas::IDENTITY,
            }
        };
        if !(alphas.mid.is_finite() && alphas.high.is_finite()) {
            return Err(Error::Diverged(format!("non-finite reconstruction weights {alphas:?}")));
        }

        let tapes = samples
            .par_iter()
            .zip(stage1)
            .map(|(s, (partition, masked))| {
                let mut reconstructed = masked.clone();
                for r in reconstructed.iter_mut() {
                    scale_bands_in_place(r, &partition, alphas);
                }
                let features = self.features(&reconstructed);
                let logits = self.head(&features);
                SampleTape {
                    sample: s,
                    partition,
                    masked,
                    reconstructed,
                    features,
                    logits,
                }
            })
            .collect();
        Ok(BatchForward {
            tapes,
            alphas,
            batch_mu,
            config: self.config,
        })
    }

    /// Logits for a batch without keeping a tape around.
    pub fn logits_batch(
        &self,
        samples: &[&PreparedSample],
        stats: &GlobalSpectrumStats,
        mode: AlphaMode,
    ) -> Result<Vec<[f64; 2]>> {
        Ok(self
            .forward_batch(samples, stats, mode)?
            .tapes
            .iter()
            .map(|t| t.logits)
            .collect())
    }

    /// Parameter gradients given upstream gradients on the logits and,
    /// optionally, on each sample's reconstructed moduli.
    pub fn backward_batch(
        &self,
        fwd: &BatchForward<'_>,
        grad_logits: &[[f64; 2]],
        grad_moduli: Option<&[Vec<f64>]>,
    ) -> Result<Params> {
        if fwd.config != self.config {
            return Err(Error::ConfigMismatch);
        }
        let b = fwd.tapes.len();
        if grad_logits.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                found: grad_logits.len(),
            });
        }
        if let Some(gm) = grad_moduli {
            if gm.len() != b {
                return Err(Error::DimensionMismatch {
                    expected: b,
                    found: gm.len(),
                });
            }
        }
        let d = self.d();
        let mask = self.config.effective_mask();
        let alphas = fwd.alphas;

        // per-sample gradients w.r.t. the adapted rows, computed in parallel
        let dz: Vec<Vec<Vec<f64>>> = fwd
            .tapes
            .par_iter()
            .enumerate()
            .map(|(n, tape)| {
                let g = grad_logits[n];
                let df: Vec<f64> = (0..d)
                    .map(|i| g[0] * self.params.head_w[i] + g[1] * self.params.head_w[d + i])
                    .collect();
                let channels = tape.reconstructed.len();
                let bins = self.n_bins();
                let mut out = Vec::with_capacity(channels);
                for c in 0..channels {
                    let (mut gre, mut gim) = match self.config.spectral_axis {
                        SpectralAxis::Feature => real_idft_adjoint(&self.tw, &df),
                        SpectralAxis::Token => {
                            let l = self.signal_len();
                            let gre = (0..bins).map(|k| df[c] * mirror_weight(k, l) / l as f64).collect();
                            (gre, vec![0.0; bins])
                        }
                    };
                    if let Some(gm) = grad_moduli {
                        let upstream = &gm[n][c * bins..(c + 1) * bins];
                        let (mr, mi) = modulus_vjp(&tape.reconstructed[c], upstream)?;
                        for k in 0..bins {
                            gre[k] += mr[k];
                            gim[k] += mi[k];
                        }
                    }
                    for k in 0..bins {
                        let a = if mask.keeps(tape.partition.band_of(k)) {
                            band_scale(&tape.partition, alphas, k)
                        } else {
                            0.0
                        };
                        gre[k] *= a;
                        gim[k] *= a;
                    }
                    out.push(real_dft_adjoint(&self.tw, &gre, &gim));
                }
                // regroup channel gradients into per-row gradients
                Ok(match self.config.spectral_axis {
                    SpectralAxis::Feature => out,
                    SpectralAxis::Token => (0..tape.sample.n_rows)
                        .map(|j| (0..d).map(|i| out[i][j]).collect())
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;

        // fixed-order reduction
        let mut grads = Params::zeros(d);
        for (n, tape) in fwd.tapes.iter().enumerate() {
            let g = grad_logits[n];
            for r in 0..2 {
                grads.head_b[r] += g[r];
                let row = &mut grads.head_w[r * d..(r + 1) * d];
                for (w, f) in row.iter_mut().zip(&tape.features) {
                    *w += g[r] * f;
                }
            }
            for (j, dzj) in dz[n].iter().enumerate() {
                let x = tape.sample.row(j);
                for i in 0..d {
                    let gi = dzj[i];
                    if gi == 0.0 {
                        continue;
                    }
                    grads.adapter_b[i] += gi;
                    let row = &mut grads.adapter_w[i * d..(i + 1) * d];
                    for (w, xv) in row.iter_mut().zip(x) {
                        *w += gi * xv;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// `L = mean CE + fsa_weight * L_MAE` with its parameter gradients. The
    /// alignment term is skipped when disabled or when the batch holds a
    /// single sample.
    pub fn objective(
        &self,
        samples: &[&PreparedSample],
        stats: &GlobalSpectrumStats,
        mode: AlphaMode,
        fsa_weight: f64,
    ) -> Result<Objective> {
        let fwd = self.forward_batch(samples, stats, mode)?;
        let b = fwd.tapes.len() as f64;
        let mut ce = 0.0;
        let mut grad_logits = Vec::with_capacity(fwd.tapes.len());
        for t in &fwd.tapes {
            let (l, g) = cross_entropy(t.logits, t.sample.label);
            ce += l;
            grad_logits.push([g[0] / b, g[1] / b]);
        }
        ce /= b;
        let fsa_applied = self.config.fsa && fwd.tapes.len() >= 2;
        let (fsa, grad_moduli) = if fsa_applied {
            let out = fsa_loss(&fwd.moduli(), &fwd.labels(), self.config.xi)?;
            let gm: Vec<Vec<f64>> = out
                .grads
                .into_iter()
                .map(|g| g.into_iter().map(|v| v * fsa_weight).collect())
                .collect();
            (out.loss, Some(gm))
        } else {
            (0.0, None)
        };
        let total = ce + fsa_weight * fsa;
        if !total.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {total}")));
        }
        let grads = self.backward_batch(&fwd, &grad_logits, grad_moduli.as_deref())?;
        Ok(Objective {
            total,
            ce,
            fsa,
            fsa_applied,
            alphas: fwd.alphas,
            reconstructed_mu: fwd.reconstructed_mu()?,
            grads,
        })
    }
}

#[inline]
fn mirror_weight(k: usize, n: usize) -> f64 {
    if k == 0 || 2 * k == n {
        1.0
    } else {
        2.0
    }
}
