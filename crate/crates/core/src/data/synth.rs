//! Synthetic token-embedding corpora with a controlled spectral layout.
//!
//! Every document is built in the frequency domain over the hidden axis and
//! transformed back to a real vector:
//!
//! * bin 0 holds a per-domain DC level (no noise), so domains differ by a
//!   constant offset;
//! * bin 1 holds per-domain energy plus a label-correlated term whose sign
//!   flips in the held-out domain, a spurious low-band cue;
//! * the signature bins carry a shared fixed-phase pattern of modulus
//!   `magnitude` plus a class term of modulus `class_gain * magnitude`,
//!   rotated by `CLASS_PHASE` and added for MGT, subtracted for HWT; the
//!   whole signature is scaled by the domain gain;
//! * token rows add per-token noise, strong on bins >= 2 and weak on bin 1.
//!
//! The last domain is the held-out one. Its signature gain is lower than any
//! source domain and its DC level sits `shift_amplitude` above the source
//! average.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    write_records, EmbeddingRecord, Manifest, ManifestEntry, Payload, PoolRecord, RecordFlags,
    RecordHeader, Scenario, SplitPlan, Tags, TokenMatrix, HWT, MGT,
};
use crate::error::{Error, Result};
use crate::numerics::{one_sided_bins, real_idft_one_sided, OneSidedSpectrum, Twiddles};

const CLASS_PHASE: f64 = PI / 3.0;

pub const HWT_GENERATOR: &str = "human";
pub const MGT_GENERATOR: &str = "machine";
const DATASET: &str = "synth";
const SCALE: &str = "base";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub d: usize,
    /// Number of domains including the held-out one.
    pub n_domains: usize,
    /// Records per domain; labels alternate so each domain is balanced.
    pub per_domain: usize,
    /// Inclusive bin range carrying the class signature.
    pub signature_bins: (usize, usize),
    pub signature_magnitude: f64,
    pub class_gain: f64,
    /// Source-domain signature gains are spread evenly over `1 +- spread`.
    pub domain_gain_spread: f64,
    pub held_out_gain: f64,
    pub domain_dc_spacing: f64,
    pub shift_amplitude: f64,
    pub low_energy: f64,
    pub low_confound: f64,
    /// Overall noise level; scales document and token noise together.
    pub noise: f64,
    pub token_noise_ratio: f64,
    pub token_noise_low_ratio: f64,
    /// Multiplies every stored value.
    pub amplitude: f64,
    pub tokens: (u32, u32),
    pub sentences: (u32, u32),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_domains: 4,
            per_domain: 500,
            signature_bins: (2, 32),
            signature_magnitude: 2.0,
            class_gain: 0.15,
            domain_gain_spread: 0.1,
            held_out_gain: 0.8,
            domain_dc_spacing: 0.5,
            shift_amplitude: 2.0,
            low_energy: 1.5,
            low_confound: 1.0,
            noise: 0.3,
            token_noise_ratio: 10.0,
            token_noise_low_ratio: 0.5,
            amplitude: 256.0,
            tokens: (36, 64),
            sentences: (3, 8),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        let n_bins = one_sided_bins(self.d);
        if self.d < 4 {
            return bad("d must be >= 4");
        }
        if self.n_domains < 2 {
            return bad("need at least one source and one held-out domain");
        }
        let (lo, hi) = self.signature_bins;
        if lo > hi || hi >= n_bins {
            return bad("signature bins must lie within [0, d/2]");
        }
        if self.tokens.0 == 0 || self.tokens.0 > self.tokens.1 {
            return bad("token range must be nonempty and start at >= 1");
        }
        if self.sentences.0 == 0 || self.sentences.0 > self.sentences.1 {
            return bad("sentence range must be nonempty and start at >= 1");
        }
        let finite = [
            self.signature_magnitude,
            self.class_gain,
            self.domain_gain_spread,
            self.held_out_gain,
            self.domain_dc_spacing,
            self.shift_amplitude,
            self.low_energy,
            self.low_confound,
            self.noise,
            self.token_noise_ratio,
            self.token_noise_low_ratio,
            self.amplitude,
        ];
        if finite.iter().any(|v| !v.is_finite()) || self.noise < 0.0 {
            return bad("parameters must be finite and noise >= 0");
        }
        if self.amplitude <= 0.0 {
            return bad("amplitude must be > 0");
        }
        Ok(())
    }

    fn n_source(&self) -> usize {
        self.n_domains - 1
    }

    fn domain_gain(&self, i: usize) -> f64 {
        let n = self.n_source();
        if i == n {
            self.held_out_gain
        } else if n == 1 {
            1.0
        } else {
            1.0 - self.domain_gain_spread + 2.0 * self.domain_gain_spread * i as f64 / (n - 1) as f64
        }
    }

    fn source_dc(&self, i: usize) -> f64 {
        self.domain_dc_spacing * i as f64
    }

    fn domain_dc(&self, i: usize) -> f64 {
        let n = self.n_source();
        if i == n {
            (0..n).map(|j| self.source_dc(j)).sum::<f64>() / n as f64 + self.shift_amplitude
        } else {
            self.source_dc(i)
        }
    }
}

pub fn domain_name(i: usize) -> String {
    format!("d{i}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub records: Vec<PoolRecord>,
}

impl SynthCorpus {
    pub fn held_out_domain(&self) -> String {
        domain_name(self.config.n_domains - 1)
    }

    /// Cross-domain plan holding out the last domain.
    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan::new(Scenario::CrossDomain, vec![self.held_out_domain()])
    }

    /// Writes one record file per (domain, generator) plus `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let mut manifest = Manifest::default();
        let header = RecordHeader {
            hidden_dim: self.config.d as u32,
            flags: RecordFlags {
                token_matrices: true,
                sentence_offsets: true,
            },
        };
        for i in 0..self.config.n_domains {
            let domain = domain_name(i);
            for generator in [HWT_GENERATOR, MGT_GENERATOR] {
                let recs: Vec<EmbeddingRecord> = self
                    .records
                    .iter()
                    .filter(|r| r.tags.domain == domain && r.tags.generator == generator)
                    .map(|r| r.record.clone())
                    .collect();
                let file = format!("{domain}_{generator}.mgpr");
                write_records(&dir.join(&file), header, &recs)?;
                manifest.entries.push(ManifestEntry {
                    file,
                    dataset: DATASET.into(),
                    domain: domain.clone(),
                    generator: generator.into(),
                    scale: SCALE.into(),
                });
            }
        }
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn offsets(rng: &mut ChaCha8Rng, t: u32, s: u32) -> Vec<u32> {
    let mut cuts: Vec<u32> = (1..t).collect();
    // partial Fisher-Yates for s-1 distinct cut points
    for i in 0..(s - 1) as usize {
        let j = rng.random_range(i..cuts.len());
        cuts.swap(i, j);
    }
    let mut out: Vec<u32> = cuts[..(s - 1) as usize].to_vec();
    out.push(0);
    out.sort_unstable();
    out
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let d = config.d;
    let n_bins = one_sided_bins(d);
    let nyquist = d.is_multiple_of(2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tw = Twiddles::new(d);
    let phases: Vec<f64> = (0..n_bins)
        .map(|k| {
            if k == 0 || (nyquist && k == n_bins - 1) {
                0.0
            } else {
                rng.random::<f64>() * 2.0 * PI
            }
        })
        .collect();
    // real-valued bins can only carry one sign of the pattern
    let polar = |k: usize, mag: f64, turn: f64| -> (f64, f64) {
        if k == 0 || (nyquist && k == n_bins - 1) {
            (mag * turn.cos().signum(), 0.0)
        } else {
            let p = phases[k] + turn;
            (mag * p.cos(), mag * p.sin())
        }
    };
    let is_real_bin = |k: usize| k == 0 || (nyquist && k == n_bins - 1);
    let (sig_lo, sig_hi) = config.signature_bins;
    let sigma_doc = config.noise;
    let sigma_tok = config.noise * config.token_noise_ratio;
    let sigma_tok_low = config.noise * config.token_noise_low_ratio;

    let mut records = Vec::with_capacity(config.n_domains * config.per_domain);
    for dom in 0..config.n_domains {
        let held_out = dom == config.n_source();
        let gain = config.domain_gain(dom);
        let dc = config.domain_dc(dom);
        let domain = domain_name(dom);
        for idx in 0..config.per_domain {
            let label = if idx % 2 == 0 { HWT } else { MGT };
            let mut re = vec![0.0; n_bins];
            let mut im = vec![0.0; n_bins];
            re[0] = dc;
            if n_bins > 1 {
                let sign = if (label == MGT) != held_out { 1.0 } else { -1.0 };
                let (r, i) = polar(1, config.low_energy + sign * config.low_confound, 0.0);
                re[1] += r;
                im[1] += i;
            }
            let common = config.signature_magnitude * gain;
            let class_sign = if label == MGT { 1.0 } else { -1.0 };
            let class_mag = class_sign * config.class_gain * common;
            for k in 1..n_bins {
                if (sig_lo..=sig_hi).contains(&k) {
                    let (r0, i0) = polar(k, common, 0.0);
                    let (r1, i1) = polar(k, class_mag, CLASS_PHASE);
                    re[k] += r0 + r1;
                    im[k] += i0 + i1;
                }
                re[k] += sigma_doc * gauss(&mut rng);
                if !is_real_bin(k) {
                    im[k] += sigma_doc * gauss(&mut rng);
                }
            }
            let doc = real_idft_one_sided(&tw, &OneSidedSpectrum::from_parts_unchecked(re, im, d));

            let t = rng.random_range(config.tokens.0..=config.tokens.1);
            let s = rng.random_range(config.sentences.0..=config.sentences.1).min(t);
            let mut data = Vec::with_capacity(t as usize * d);
            for _ in 0..t {
                let mut nre = vec![0.0; n_bins];
                let mut nim = vec![0.0; n_bins];
                for k in 1..n_bins {
                    let sd = if k == 1 { sigma_tok_low } else { sigma_tok };
                    nre[k] = sd * gauss(&mut rng);
                    if !is_real_bin(k) {
                        nim[k] = sd * gauss(&mut rng);
                    }
                }
                let noise = real_idft_one_sided(&tw, &OneSidedSpectrum::from_parts_unchecked(nre, nim, d));
                data.extend(doc.iter().zip(&noise).map(|(a, b)| ((a + b) * config.amplitude) as f32 as f64));
            }
            let generator = if label == MGT { MGT_GENERATOR } else { HWT_GENERATOR };
            let record = EmbeddingRecord {
                id: format!("{domain}-{idx:05}"),
                label,
                domain: domain.clone(),
                generator: generator.into(),
                t_num: t,
                s_num: s,
                sentence_offsets: Some(offsets(&mut rng, t, s)),
                payload: Payload::Tokens(TokenMatrix::new(d, data)?),
            };
            records.push(PoolRecord {
                tags: Tags {
                    dataset: DATASET.into(),
                    domain: domain.clone(),
                    generator: generator.into(),
                    scale: SCALE.into(),
                },
                record,
            });
        }
    }
    Ok(SynthCorpus {
        config: config.clone(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_split, load_pool};
    use crate::numerics::{modulus, real_dft_one_sided};

    fn small() -> SynthConfig {
        SynthConfig {
            per_domain: 60,
            ..SynthConfig::default()
        }
    }

    fn pooled(r: &EmbeddingRecord) -> Vec<f64> {
        r.tokens().unwrap().mean_row()
    }

    #[test]
    fn records_are_valid_and_seeded() {
        let a = synth_generate(&small()).unwrap();
        assert_eq!(a.records.len(), 240);
        for r in &a.records {
            r.record.validate().unwrap();
        }
        assert_eq!(synth_generate(&small()).unwrap(), a);
        let b = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.records[0].record, b.records[0].record);
    }

    #[test]
    fn held_out_dc_offset_equals_shift() {
        let cfg = small();
        let c = synth_generate(&cfg).unwrap();
        let tw = Twiddles::new(cfg.d);
        let held = c.held_out_domain();
        let (mut src, mut ns, mut tgt, mut nt) = (0.0, 0.0, 0.0, 0.0);
        for r in &c.records {
            let dc = real_dft_one_sided(&tw, &pooled(&r.record)).re[0];
            if r.tags.domain == held {
                tgt += dc;
                nt += 1.0;
            } else {
                src += dc;
                ns += 1.0;
            }
        }
        // single-precision storage bounds the error
        assert!((tgt / nt - src / ns - cfg.amplitude * cfg.shift_amplitude).abs() < 1e-4 * cfg.amplitude);
    }

    #[test]
    fn noiseless_classes_separate_on_any_signature_bin() {
        let cfg = SynthConfig {
            noise: 0.0,
            shift_amplitude: 0.0,
            per_domain: 20,
            ..SynthConfig::default()
        };
        let c = synth_generate(&cfg).unwrap();
        let tw = Twiddles::new(cfg.d);
        let spectra: Vec<(u8, Vec<f64>)> = c
            .records
            .iter()
            .map(|r| (r.record.label, modulus(&real_dft_one_sided(&tw, &pooled(&r.record)))))
            .collect();
        for dom in 0..cfg.n_domains {
            let name = &domain_name(dom);
            let in_dom = |l: u8| {
                spectra
                    .iter()
                    .zip(&c.records)
                    .filter(move |(s, r)| s.0 == l && r.tags.domain == *name)
                    .map(|(s, _)| s)
            };
            for k in cfg.signature_bins.0..=cfg.signature_bins.1 {
                let max0 = in_dom(HWT).map(|s| s.1[k]).fold(f64::MIN, f64::max);
                let min1 = in_dom(MGT).map(|s| s.1[k]).fold(f64::MAX, f64::min);
                assert!(max0 < min1, "domain {dom} bin {k}: {max0} vs {min1}");
            }
        }
    }

    #[test]
    fn nearest_centroid_on_mid_high_moduli() {
        let cfg = SynthConfig::default();
        let c = synth_generate(&cfg).unwrap();
        let tw = Twiddles::new(cfg.d);
        let train: Vec<(u8, Vec<f64>)> = c
            .records
            .iter()
            .filter(|r| r.tags.domain == domain_name(0))
            .map(|r| {
                let m = modulus(&real_dft_one_sided(&tw, &pooled(&r.record)));
                (r.record.label, m[2..].to_vec())
            })
            .collect();
        let mut cent = [vec![0.0; train[0].1.len()], vec![0.0; train[0].1.len()]];
        let mut counts = [0.0, 0.0];
        for (l, m) in &train {
            counts[*l as usize] += 1.0;
            for (c, v) in cent[*l as usize].iter_mut().zip(m) {
                *c += v;
            }
        }
        for l in 0..2 {
            cent[l].iter_mut().for_each(|v| *v /= counts[l]);
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let correct = train
            .iter()
            .filter(|(l, m)| ((dist(m, &cent[1]) < dist(m, &cent[0])) as u8) == *l)
            .count();
        let acc = correct as f64 / train.len() as f64;
        assert!(acc >= 0.9, "nearest-centroid train accuracy {acc}");
    }

    #[test]
    fn written_corpus_reloads_and_splits() {
        let c = synth_generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let pool = load_pool(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(pool.len(), c.records.len());
        let mut plan = c.split_plan();
        plan.train_cap = 100;
        plan.valid_cap = 40;
        plan.test_cap = 60;
        let s = build_split(&pool, &plan, 0).unwrap();
        assert!(s.train.iter().all(|r| r.domain != "d3"));
        assert!(s.test.iter().all(|r| r.domain == "d3"));
        assert_eq!(s.test.iter().filter(|r| r.label == 1).count(), 30);
    }
}
