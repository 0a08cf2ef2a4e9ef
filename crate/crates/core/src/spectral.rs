//! Band partitioning, band masking, global spectrum statistics and
//! frequency spectrum reconstruction.
//!
//! Bands are index ranges over the one-sided bins of a spectrum:
//! low `[0, d_low]`, mid `[d_low+1, d_mid]`, high `[d_mid+1, n_bins-1]`.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{from_one_sided, idft, modulus, OneSidedSpectrum};

/// Slack applied before taking the ceiling in the mid-boundary formula, so
/// that values which are integers in exact arithmetic do not round up.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    Low,
    Mid,
    High,
}

/// Low/mid/high split of `n_bins` one-sided bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandPartition {
    n_bins: usize,
    d_low: usize,
    d_mid: usize,
}

impl BandPartition {
    /// Builds a partition from explicit boundaries, clamping them into range.
    pub fn from_bounds(n_bins: usize, d_low: usize, d_mid: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::InvalidCounts {
                n_bins,
                t_num: 0,
                s_num: 0,
            });
        }
        let d_low = d_low.min(n_bins - 1);
        let d_mid = d_mid.clamp(d_low, n_bins - 1);
        Ok(Self {
            n_bins,
            d_low,
            d_mid,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn d_low(&self) -> usize {
        self.d_low
    }

    pub fn d_mid(&self) -> usize {
        self.d_mid
    }

    pub fn low(&self) -> RangeInclusive<usize> {
        0..=self.d_low
    }

    /// Mid band; empty when `d_mid == d_low`.
    pub fn mid(&self) -> std::ops::Range<usize> {
        self.d_low + 1..self.d_mid + 1
    }

    /// High band; empty when `d_mid == n_bins - 1`.
    pub fn high(&self) -> std::ops::Range<usize> {
        self.d_mid + 1..self.n_bins
    }

    pub fn band_of(&self, bin: usize) -> Band {
        if bin <= self.d_low {
            Band::Low
        } else if bin <= self.d_mid {
            Band::Mid
        } else {
            Band::High
        }
    }
}

/// Computes the partition from token count, sentence count and `tau`:
/// `d_low = ceil(n / t_num)`,
/// `d_mid = ceil((n / s_num) * tau + (n - d_low) * (1 - tau))`.
pub fn compute_band_partition(
    n_bins: usize,
    t_num: usize,
    s_num: usize,
    tau: f64,
) -> Result<BandPartition> {
    if n_bins == 0 || t_num == 0 || s_num == 0 {
        return Err(Error::InvalidCounts {
            n_bins,
            t_num,
            s_num,
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidTau(tau));
    }
    let d_low = n_bins.div_ceil(t_num);
    let n = n_bins as f64;
    let raw = (n / s_num as f64) * tau + (n - d_low as f64) * (1.0 - tau);
    let d_mid = (raw - CEIL_SLACK).ceil().max(0.0) as usize;
    BandPartition::from_bounds(n_bins, d_low, d_mid)
}

/// Which bands pass through a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandKeepMask {
    low: bool,
    mid: bool,
    high: bool,
}

impl BandKeepMask {
    pub const ALL: BandKeepMask = BandKeepMask {
        low: true,
        mid: true,
        high: true,
    };
    /// Low-frequency filtering: drop the low band.
    pub const LFF: BandKeepMask = BandKeepMask {
        low: false,
        mid: true,
        high: true,
    };

    pub fn new(low: bool, mid: bool, high: bool) -> Result<Self> {
        if !(low || mid || high) {
            return Err(Error::EmptyMask);
        }
        Ok(Self { low, mid, high })
    }

    pub fn keeps(&self, band: Band) -> bool {
        match band {
            Band::Low => self.low,
            Band::Mid => self.mid,
            Band::High => self.high,
        }
    }

    pub fn keep_low(&self) -> bool {
        self.low
    }

    pub fn keep_mid(&self) -> bool {
        self.mid
    }

    pub fn keep_high(&self) -> bool {
        self.high
    }
}

impl fmt::Display for BandKeepMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.low, "low"), (self.mid, "mid"), (self.high, "high")]
            .iter()
            .filter(|(k, _)| *k)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for BandKeepMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut low, mut mid, mut high) = (false, false, false);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "low" => low = true,
                "mid" => mid = true,
                "high" => high = true,
                other => return Err(Error::Config(format!("unknown band {other:?}"))),
            }
        }
        BandKeepMask::new(low, mid, high)
    }
}

fn check_bins(spectrum: &OneSidedSpectrum, partition: &BandPartition) -> Result<()> {
    if spectrum.n_bins() != partition.n_bins() {
        return Err(Error::DimensionMismatch {
            expected: partition.n_bins(),
            found: spectrum.n_bins(),
        });
    }
    Ok(())
}

/// Zeroes every bin whose band is dropped by `mask`.
pub fn apply_band_mask(
    spectrum: &OneSidedSpectrum,
    partition: &BandPartition,
    mask: BandKeepMask,
) -> Result<OneSidedSpectrum> {
    check_bins(spectrum, partition)?;
    let mut out = spectrum.clone();
    for k in 0..out.n_bins() {
        if !mask.keeps(partition.band_of(k)) {
            out.re[k] = 0.0;
            out.im[k] = 0.0;
        }
    }
    Ok(out)
}

/// Running sums of mid/high band moduli over (sample, bin) entries.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BandModulusAccumulator {
    mid_sum: f64,
    mid_count: u64,
    high_sum: f64,
    high_count: u64,
}

impl BandModulusAccumulator {
    pub fn add(&mut self, spectrum: &OneSidedSpectrum, partition: &BandPartition) -> Result<()> {
        check_bins(spectrum, partition)?;
        let m = modulus(spectrum);
        for k in partition.mid() {
            self.mid_sum += m[k];
        }
        for k in partition.high() {
            self.high_sum += m[k];
        }
        self.mid_count += partition.mid().len() as u64;
        self.high_count += partition.high().len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &BandModulusAccumulator) {
        self.mid_sum += other.mid_sum;
        self.mid_count += other.mid_count;
        self.high_sum += other.high_sum;
        self.high_count += other.high_count;
    }

    /// `(mu_mid, mu_high)`; an empty band yields 0.
    pub fn means(&self) -> (f64, f64) {
        let mean = |s: f64, c: u64| if c == 0 { 0.0 } else { s / c as f64 };
        (
            mean(self.mid_sum, self.mid_count),
            mean(self.high_sum, self.high_count),
        )
    }
}

/// Mean modulus of the mid and high bands over a batch sharing one partition.
pub fn batch_band_moduli(
    spectra: &[OneSidedSpectrum],
    partition: &BandPartition,
) -> Result<(f64, f64)> {
    if spectra.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = BandModulusAccumulator::default();
    for s in spectra {
        acc.add(s, partition)?;
    }
    Ok(acc.means())
}

/// Where band boundaries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandSource {
    /// Each record's own token and sentence counts.
    PerSample,
    /// One partition from the training corpus' average counts.
    CorpusAverage,
}

impl fmt::Display for BandSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BandSource::PerSample => "per_sample",
            BandSource::CorpusAverage => "corpus_average",
        })
    }
}

impl FromStr for BandSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" => Ok(BandSource::PerSample),
            "corpus_average" => Ok(BandSource::CorpusAverage),
            other => Err(Error::Config(format!("unknown band source {other:?}"))),
        }
    }
}

/// Training-set mean band moduli, frozen for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSpectrumStats {
    pub mu_bar_mid: f64,
    pub mu_bar_high: f64,
    pub n_bins: usize,
    pub tau: f64,
    pub band_source: BandSource,
    /// Fixed partition used when `band_source` is `CorpusAverage`.
    pub fixed_partition: Option<BandPartition>,
}

impl GlobalSpectrumStats {
    /// Folds per-sample spectra into global means. Every item carries all of
    /// one sample's channel spectra and that sample's partition.
    pub fn compute<I>(
        samples: I,
        tau: f64,
        band_source: BandSource,
        fixed_partition: Option<BandPartition>,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<OneSidedSpectrum>, BandPartition)>,
    {
        let mut acc = BandModulusAccumulator::default();
        let mut n_bins = None;
        let mut count = 0usize;
        for (spectra, partition) in samples {
            n_bins.get_or_insert(partition.n_bins());
            for s in &spectra {
                acc.add(s, &partition)?;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyTrainingSet);
        }
        let (mu_bar_mid, mu_bar_high) = acc.means();
        Ok(Self {
            mu_bar_mid,
            mu_bar_high,
            n_bins: n_bins.unwrap_or(0),
            tau,
            band_source,
            fixed_partition,
        })
    }

    /// Serializes to `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "mu_bar_mid={:?}\nmu_bar_high={:?}\nn_bins={}\ntau={:?}\nband_source={}\n",
            self.mu_bar_mid, self.mu_bar_high, self.n_bins, self.tau, self.band_source
        );
        if let Some(p) = self.fixed_partition {
            out.push_str(&format!("d_low={}\nd_mid={}\n", p.d_low(), p.d_mid()));
        }
        out
    }

    /// Parses the `key=value` form; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::config::parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Config(format!("stats missing key {k:?}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("stats key {k:?}: {e}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("stats key {k:?}: {e}")))
        };
        let n_bins = int("n_bins")?;
        let band_source: BandSource = get("band_source")?.parse()?;
        let fixed_partition = if kv.contains_key("d_low") {
            Some(BandPartition::from_bounds(n_bins, int("d_low")?, int("d_mid")?)?)
        } else {
            None
        };
        let stats = Self {
            mu_bar_mid: num("mu_bar_mid")?,
            mu_bar_high: num("mu_bar_high")?,
            n_bins,
            tau: num("tau")?,
            band_source,
            fixed_partition,
        };
        if !(stats.mu_bar_mid.is_finite() && stats.mu_bar_mid >= 0.0)
            || !(stats.mu_bar_high.is_finite() && stats.mu_bar_high >= 0.0)
        {
            return Err(Error::Config("stats means must be finite and >= 0".into()));
        }
        Ok(stats)
    }
}

/// Reconstruction weights for the mid and high bands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alphas {
    pub mid: f64,
    pub high: f64,
}

impl Alphas {
    pub const IDENTITY: Alphas = Alphas { mid: 1.0, high: 1.0 };
}

/// `alpha = mu_bar / mu`, with `alpha = 1` when the batch mean is zero.
pub fn compute_alphas(stats: &GlobalSpectrumStats, mu_mid: f64, mu_high: f64) -> Alphas {
    let ratio = |global: f64, batch: f64| if batch == 0.0 { 1.0 } else { global / batch };
    Alphas {
        mid: ratio(stats.mu_bar_mid, mu_mid),
        high: ratio(stats.mu_bar_high, mu_high),
    }
}

/// Scales mid bins by `alphas.mid` and high bins by `alphas.high`.
pub fn reconstruct_spectrum(
    filtered: &OneSidedSpectrum,
    partition: &BandPartition,
    alphas: Alphas,
) -> Result<OneSidedSpectrum> {
    check_bins(filtered, partition)?;
    if !(alphas.mid.is_finite() && alphas.mid >= 0.0 && alphas.high.is_finite() && alphas.high >= 0.0)
    {
        return Err(Error::InvalidBatch(format!(
            "alphas must be finite and >= 0, got {alphas:?}"
        )));
    }
    let mut out = filtered.clone();
    scale_bands_in_place(&mut out, partition, alphas);
    Ok(out)
}

pub(crate) fn band_scale(partition: &BandPartition, alphas: Alphas, bin: usize) -> f64 {
    match partition.band_of(bin) {
        Band::Low => 1.0,
        Band::Mid => alphas.mid,
        Band::High => alphas.high,
    }
}

pub(crate) fn scale_bands_in_place(s: &mut OneSidedSpectrum, partition: &BandPartition, alphas: Alphas) {
    for k in 0..s.n_bins() {
        let a = band_scale(partition, alphas, k);
        s.re[k] *= a;
        s.im[k] *= a;
    }
}

/// Back to the feature space: conjugate mirroring followed by the inverse DFT.
pub fn spectrum_to_features(spectrum: &OneSidedSpectrum) -> Result<Vec<f64>> {
    idft(&from_one_sided(spectrum)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dft, to_one_sided};

    fn spec(re: &[f64], im: &[f64], n: usize) -> OneSidedSpectrum {
        OneSidedSpectrum::new(re.to_vec(), im.to_vec(), n).unwrap()
    }

    #[test]
    fn partition_reproduces_cross_generator_row() {
        let p = compute_band_partition(385, 412, 28, 0.6).unwrap();
        assert_eq!((p.d_low(), p.d_mid()), (1, 162));
        assert_eq!(p.low(), 0..=1);
        assert_eq!(p.mid(), 2..163);
        assert_eq!(p.high(), 163..385);
    }

    #[test]
    fn partition_tau_endpoints() {
        let p = compute_band_partition(9, 3, 2, 1.0).unwrap();
        assert_eq!((p.d_low(), p.d_mid()), (3, 5));
        assert_eq!(p.high(), 6..9);
        let p = compute_band_partition(9, 3, 2, 0.0).unwrap();
        assert_eq!((p.d_low(), p.d_mid()), (3, 6));
        assert_eq!(p.high(), 7..9);
    }

    #[test]
    fn partition_errors_and_clamping() {
        assert!(matches!(
            compute_band_partition(9, 0, 2, 0.5),
            Err(Error::InvalidCounts { .. })
        ));
        assert!(matches!(
            compute_band_partition(9, 3, 0, 0.5),
            Err(Error::InvalidCounts { .. })
        ));
        assert!(matches!(compute_band_partition(9, 3, 2, 1.5), Err(Error::InvalidTau(_))));
        assert!(matches!(compute_band_partition(9, 3, 2, f64::NAN), Err(Error::InvalidTau(_))));
        let p = compute_band_partition(1, 5, 5, 0.6).unwrap();
        assert_eq!((p.d_low(), p.d_mid()), (0, 0));
        assert!(p.mid().is_empty() && p.high().is_empty());
        // one token: the low band swallows everything
        let p = compute_band_partition(10, 1, 1, 0.6).unwrap();
        assert_eq!((p.d_low(), p.d_mid()), (9, 9));
    }

    #[test]
    fn mask_examples() {
        let constant = to_one_sided(&dft(&[1.0; 4]).unwrap()).unwrap();
        let p = BandPartition::from_bounds(3, 0, 1).unwrap();
        let out = apply_band_mask(&constant, &p, BandKeepMask::LFF).unwrap();
        assert_eq!(out.re, vec![0.0; 3]);

        let s = spec(&[10.0, -2.0, -2.0], &[0.0, 2.0, 0.0], 4);
        assert_eq!(apply_band_mask(&s, &p, BandKeepMask::ALL).unwrap(), s);
        let mid_only = BandKeepMask::new(false, true, false).unwrap();
        let out = apply_band_mask(&s, &p, mid_only).unwrap();
        assert_eq!(out.re, vec![0.0, -2.0, 0.0]);
        assert_eq!(out.im, vec![0.0, 2.0, 0.0]);

        let wrong = BandPartition::from_bounds(5, 0, 1).unwrap();
        assert!(apply_band_mask(&s, &wrong, BandKeepMask::ALL).is_err());
        assert!(BandKeepMask::new(false, false, false).is_err());
    }

    #[test]
    fn band_mask_parse_roundtrip() {
        let m: BandKeepMask = "low,high".parse().unwrap();
        assert_eq!(m, BandKeepMask::new(true, false, true).unwrap());
        assert_eq!(m.to_string(), "low,high");
        assert!("".parse::<BandKeepMask>().is_err());
        assert!("treble".parse::<BandKeepMask>().is_err());
    }

    #[test]
    fn batch_moduli_examples() {
        let p = BandPartition::from_bounds(3, 0, 1).unwrap();
        let s = spec(&[10.0, -2.0, -2.0], &[0.0, 2.0, 0.0], 4);
        let (mid, high) = batch_band_moduli(std::slice::from_ref(&s), &p).unwrap();
        assert!((mid - 8f64.sqrt()).abs() < 1e-15);
        assert_eq!(high, 2.0);
        let (mid2, _) = batch_band_moduli(&[s.clone(), s.clone()], &p).unwrap();
        assert_eq!(mid, mid2);

        let p = BandPartition::from_bounds(4, 0, 2).unwrap();
        let a = spec(&[0.0, 1.0, 3.0, 0.0], &[0.0; 4], 6);
        let b = spec(&[0.0, 5.0, -7.0, 0.0], &[0.0; 4], 6);
        let (mid, high) = batch_band_moduli(&[a, b], &p).unwrap();
        assert_eq!(mid, 4.0);
        assert_eq!(high, 0.0);
        assert!(matches!(batch_band_moduli(&[], &p), Err(Error::EmptyBatch)));
    }

    fn stats(mid: f64, high: f64) -> GlobalSpectrumStats {
        GlobalSpectrumStats {
            mu_bar_mid: mid,
            mu_bar_high: high,
            n_bins: 3,
            tau: 0.6,
            band_source: BandSource::PerSample,
            fixed_partition: None,
        }
    }

    #[test]
    fn alpha_examples() {
        let a = compute_alphas(&stats(2.0, 3.0), 1.0, 3.0);
        assert_eq!(a, Alphas { mid: 2.0, high: 1.0 });
        let a = compute_alphas(&stats(2.0, 3.0), 0.0, 0.0);
        assert_eq!(a, Alphas::IDENTITY);
    }

    #[test]
    fn reconstruction_examples() {
        let p = BandPartition::from_bounds(3, 0, 1).unwrap();
        let s = spec(&[10.0, -2.0, -2.0], &[0.0, 2.0, 0.0], 4);
        assert_eq!(reconstruct_spectrum(&s, &p, Alphas::IDENTITY).unwrap(), s);
        let out = reconstruct_spectrum(&s, &p, Alphas { mid: 2.0, high: 1.0 }).unwrap();
        assert_eq!((out.re[1], out.im[1]), (-4.0, 4.0));
        assert_eq!(out.re[0], 10.0);

        // rescaling by the batch's own alphas lands exactly on the global means
        let batch = vec![
            spec(&[0.0, 1.0, 0.5], &[0.0, 2.0, 0.0], 4),
            spec(&[0.0, -3.0, 2.0], &[0.0, 0.25, 0.0], 4),
        ];
        let (mu_mid, mu_high) = batch_band_moduli(&batch, &p).unwrap();
        let st = stats(1.7, 0.9);
        let alphas = compute_alphas(&st, mu_mid, mu_high);
        let rebuilt: Vec<_> = batch
            .iter()
            .map(|s| reconstruct_spectrum(s, &p, alphas).unwrap())
            .collect();
        let (m2, h2) = batch_band_moduli(&rebuilt, &p).unwrap();
        assert!((m2 - 1.7).abs() < 1e-12 && (h2 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn features_examples() {
        let x = [0.5, -1.0, 2.0, 0.25, 3.0];
        let s = to_one_sided(&dft(&x).unwrap()).unwrap();
        let back = spectrum_to_features(&s).unwrap();
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));

        let c = to_one_sided(&dft(&[1.5; 6]).unwrap()).unwrap();
        let p = BandPartition::from_bounds(4, 0, 2).unwrap();
        let f = spectrum_to_features(&apply_band_mask(&c, &p, BandKeepMask::LFF).unwrap()).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-14));

        let mut dc = OneSidedSpectrum::zeros(6);
        dc.re[0] = 6.0 * 0.75;
        let f = spectrum_to_features(&dc).unwrap();
        assert!(f.iter().all(|v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn stats_text_roundtrip() {
        let mut st = stats(1.25, 0.1);
        assert_eq!(GlobalSpectrumStats::from_text(&st.to_text()).unwrap(), st);
        st.band_source = BandSource::CorpusAverage;
        st.fixed_partition = Some(BandPartition::from_bounds(3, 0, 1).unwrap());
        let text = format!("# echo\n{}", st.to_text());
        assert_eq!(GlobalSpectrumStats::from_text(&text).unwrap(), st);
        assert!(GlobalSpectrumStats::from_text("mu_bar_mid=1\n").is_err());
    }
}
