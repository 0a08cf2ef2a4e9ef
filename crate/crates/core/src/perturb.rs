//! Token-matrix perturbations and per-band MAE shift.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EmbeddingRecord, Payload, TokenMatrix};
use crate::error::{Error, Result};
use crate::model::pool;
use crate::numerics::{modulus, one_sided_bins, real_dft_one_sided, Twiddles};
use crate::spectral::compute_band_partition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbationKind {
    TokenDelete,
    TokenRepeat,
    TokenReplace,
    TokenInsert,
    SentenceReorder,
    ThemeShift,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::TokenReplace,
        PerturbationKind::TokenDelete,
        PerturbationKind::TokenRepeat,
        PerturbationKind::TokenInsert,
        PerturbationKind::SentenceReorder,
        PerturbationKind::ThemeShift,
    ];

    pub const TOKEN_LEVEL: [PerturbationKind; 4] = [
        PerturbationKind::TokenReplace,
        PerturbationKind::TokenDelete,
        PerturbationKind::TokenRepeat,
        PerturbationKind::TokenInsert,
    ];

    pub fn needs_donors(self) -> bool {
        matches!(self, PerturbationKind::TokenReplace | PerturbationKind::TokenInsert)
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbationKind::TokenDelete => "token_delete",
            PerturbationKind::TokenRepeat => "token_repeat",
            PerturbationKind::TokenReplace => "token_replace",
            PerturbationKind::TokenInsert => "token_insert",
            PerturbationKind::SentenceReorder => "sentence_reorder",
            PerturbationKind::ThemeShift => "theme_shift",
        })
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation kind {s:?}")))
    }
}

/// Token rows available for replacement and insertion.
#[derive(Debug, Clone)]
pub struct DonorPool<'a> {
    dim: usize,
    rows: Vec<&'a [f64]>,
}

impl<'a> DonorPool<'a> {
    /// Every token row of every record carrying a token matrix.
    pub fn from_records(records: &'a [EmbeddingRecord]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut dim = None;
        for r in records {
            if let Some(m) = r.tokens() {
                if *dim.get_or_insert(m.dim()) != m.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: dim.unwrap_or(0),
                        found: m.dim(),
                    });
                }
                rows.extend(m.iter_rows());
            }
        }
        match dim {
            Some(dim) if !rows.is_empty() => Ok(Self { dim, rows }),
            _ => Err(Error::MissingDonorPool),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> &'a [f64] {
        self.rows[rng.random_range(0..self.rows.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbOptions {
    /// Per-entry constant added by `theme_shift`.
    pub theme_offset: f64,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        Self { theme_offset: 0.05 }
    }
}

/// `round_half_up(rate * t)`, at least 1 when `rate > 0`.
pub fn affected_count(rate: f64, t: usize) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let n = (rate * t as f64 + 0.5 + 1e-9).floor() as usize;
    n.clamp(1, t)
}

fn distinct_positions(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = rand::seq::index::sample(rng, t, n).into_vec();
    pos.sort_unstable();
    pos
}

fn with_rows(record: &EmbeddingRecord, rows: Vec<Vec<f64>>, offsets: Option<Vec<u32>>) -> Result<EmbeddingRecord> {
    let dim = record.dim();
    let mut out = record.clone();
    out.t_num = rows.len() as u32;
    if let Some(off) = &offsets {
        out.s_num = off.len() as u32;
    }
    out.sentence_offsets = offsets;
    out.payload = Payload::Tokens(TokenMatrix::from_rows(dim, &rows)?);
    Ok(out)
}

/// One perturbed copy of `record`. Deterministic given `seed`.
pub fn perturb(
    record: &EmbeddingRecord,
    kind: PerturbationKind,
    rate: f64,
    seed: u64,
    donors: Option<&DonorPool<'_>>,
    opts: PerturbOptions,
) -> Result<EmbeddingRecord> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("perturbation rate must lie in [0, 1], got {rate}")));
    }
    let m = record.tokens().ok_or(Error::MissingTokenMatrix)?;
    if kind == PerturbationKind::SentenceReorder && record.sentence_offsets.is_none() {
        return Err(Error::MissingSentenceOffsets);
    }
    let donors = if kind.needs_donors() {
        let pool = donors.ok_or(Error::MissingDonorPool)?;
        if pool.dim != m.dim() {
            return Err(Error::DimensionMismatch {
                expected: m.dim(),
                found: pool.dim,
            });
        }
        Some(pool)
    } else {
        None
    };
    if rate == 0.0 {
        return Ok(record.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = m.rows();
    let n = affected_count(rate, t);
    let rows = m.to_rows();
    let offsets = record.sentence_offsets.as_deref();
    match kind {
        PerturbationKind::TokenDelete => {
            if t < 2 {
                return Err(Error::InvalidRecord(format!(
                    "{}: cannot delete from a single-token record",
                    record.id
                )));
            }
            let del = distinct_positions(&mut rng, t, n.min(t - 1));
            let keep: Vec<usize> = (0..t).filter(|i| del.binary_search(i).is_err()).collect();
            let new_rows = keep.iter().map(|&i| rows[i].clone()).collect();
            // map each sentence start to its surviving position, dropping emptied sentences
            let new_off = offsets.map(|off| {
                let mut out: Vec<u32> = Vec::new();
                for (s, &start) in off.iter().enumerate() {
                    let end = off.get(s + 1).copied().unwrap_or(t as u32);
                    let survives = (start..end).any(|i| del.binary_search(&(i as usize)).is_err());
                    if survives {
                        let before = keep.partition_point(|&k| k < start as usize) as u32;
                        out.push(before);
                    }
                }
                if let Some(first) = out.first_mut() {
                    *first = 0;
                }
                out.dedup();
                out
            });
            with_rows(record, new_rows, new_off)
        }
        PerturbationKind::TokenRepeat => {
            let rep = distinct_positions(&mut rng, t, n);
            let mut new_rows = Vec::with_capacity(t + n);
            for (i, r) in rows.iter().enumerate() {
                new_rows.push(r.clone());
                if rep.binary_search(&i).is_ok() {
                    new_rows.push(r.clone());
                }
            }
            let new_off = offsets.map(|off| {
                off.iter()
                    .map(|&o| o + rep.partition_point(|&p| p < o as usize) as u32)
                    .collect()
            });
            with_rows(record, new_rows, new_off)
        }
        PerturbationKind::TokenReplace => {
            let pool = donors.ok_or(Error::MissingDonorPool)?;
            let mut new_rows = rows;
            for p in distinct_positions(&mut rng, t, n) {
                new_rows[p] = pool.draw(&mut rng).to_vec();
            }
            with_rows(record, new_rows, offsets.map(<[u32]>::to_vec))
        }
        PerturbationKind::TokenInsert => {
            let pool = donors.ok_or(Error::MissingDonorPool)?;
            // gap g means "before original row g"; gap t appends
            let mut gaps: Vec<usize> = (0..n).map(|_| rng.random_range(0..=t)).collect();
            gaps.sort_unstable();
            let inserts: Vec<&[f64]> = (0..n).map(|_| pool.draw(&mut rng)).collect();
            let mut new_rows = Vec::with_capacity(t + n);
            let mut g = 0;
            for i in 0..=t {
                while g < n && gaps[g] == i {
                    new_rows.push(inserts[g].to_vec());
                    g += 1;
                }
                if i < t {
                    new_rows.push(rows[i].clone());
                }
            }
            let new_off = offsets.map(|off| {
                off.iter()
                    .map(|&o| {
                        if o == 0 {
                            0
                        } else {
                            o + gaps.partition_point(|&x| x <= o as usize) as u32
                        }
                    })
                    .collect()
            });
            with_rows(record, new_rows, new_off)
        }
        PerturbationKind::SentenceReorder => {
            let off = offsets.ok_or(Error::MissingSentenceOffsets)?;
            let spans: Vec<(usize, usize)> = off
                .iter()
                .enumerate()
                .map(|(s, &o)| (o as usize, off.get(s + 1).map_or(t, |&e| e as usize)))
                .collect();
            let mut order: Vec<usize> = (0..spans.len()).collect();
            order.shuffle(&mut rng);
            let mut new_rows = Vec::with_capacity(t);
            let mut new_off = Vec::with_capacity(spans.len());
            for &s in &order {
                new_off.push(new_rows.len() as u32);
                let (a, b) = spans[s];
                new_rows.extend(rows[a..b].iter().cloned());
            }
            with_rows(record, new_rows, Some(new_off))
        }
        PerturbationKind::ThemeShift => {
            let c = opts.theme_offset;
            let new_rows = rows
                .into_iter()
                .map(|r| r.into_iter().map(|v| v + c).collect())
                .collect();
            with_rows(record, new_rows, offsets.map(<[u32]>::to_vec))
        }
    }
}

/// Perturbs every record with seeds drawn from one stream and tags the
/// generator with `+kind@rate`.
pub fn perturb_corpus(
    records: &[EmbeddingRecord],
    kind: PerturbationKind,
    rate: f64,
    seed: u64,
    donors: Option<&DonorPool<'_>>,
    opts: PerturbOptions,
) -> Result<Vec<EmbeddingRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|r| {
            let mut p = perturb(r, kind, rate, rng.next_u64(), donors, opts)?;
            p.generator = format!("{}+{kind}@{rate}", r.generator);
            Ok(p)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BandShift {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

/// Per-band mean absolute difference between the pooled one-sided modulus
/// spectra, with bands taken from the original record's counts. Per-bin
/// differences at the level of floating-point noise count as zero.
pub fn mae_shift(original: &EmbeddingRecord, perturbed: &EmbeddingRecord, tau: f64) -> Result<BandShift> {
    if original.dim() != perturbed.dim() {
        return Err(Error::DimensionMismatch {
            expected: original.dim(),
            found: perturbed.dim(),
        });
    }
    let d = original.dim();
    let tw = Twiddles::new(d);
    let mo = modulus(&real_dft_one_sided(&tw, &pool(original)?));
    let mp = modulus(&real_dft_one_sided(&tw, &pool(perturbed)?));
    let p = compute_band_partition(
        one_sided_bins(d),
        original.t_num as usize,
        original.s_num as usize,
        tau,
    )?;
    let diff: Vec<f64> = mo
        .iter()
        .zip(&mp)
        .map(|(a, b)| {
            let delta = (a - b).abs();
            if delta <= 1e-9 * a.max(*b).max(1.0) {
                0.0
            } else {
                delta
            }
        })
        .collect();
    let mean = |r: &mut dyn Iterator<Item = usize>| {
        let (s, c) = r.fold((0.0, 0usize), |(s, c), k| (s + diff[k], c + 1));
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    };
    Ok(BandShift {
        low: mean(&mut p.low()),
        mid: mean(&mut p.mid()),
        high: mean(&mut p.high()),
    })
}

/// Summary of one perturbation kind over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeShiftRow {
    pub kind: PerturbationKind,
    pub rate: f64,
    pub shifts: Vec<BandShift>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl MaeShiftRow {
    pub fn mean(&self) -> BandShift {
        let n = self.shifts.len().max(1) as f64;
        let s = self.shifts.iter().fold(BandShift::default(), |a, b| BandShift {
            low: a.low + b.low,
            mid: a.mid + b.mid,
            high: a.high + b.high,
        });
        BandShift {
            low: s.low / n,
            mid: s.mid / n,
            high: s.high / n,
        }
    }

    pub fn median(&self) -> BandShift {
        BandShift {
            low: median(self.shifts.iter().map(|s| s.low).collect()),
            mid: median(self.shifts.iter().map(|s| s.mid).collect()),
            high: median(self.shifts.iter().map(|s| s.high).collect()),
        }
    }
}

/// Perturbs `records` with each kind and measures band shifts. Kinds whose
/// preconditions a record cannot meet propagate the error.
pub fn mae_shift_table(
    records: &[EmbeddingRecord],
    kinds: &[PerturbationKind],
    rate: f64,
    seed: u64,
    donors: Option<&DonorPool<'_>>,
    opts: PerturbOptions,
    tau: f64,
) -> Result<Vec<MaeShiftRow>> {
    kinds
        .iter()
        .map(|&kind| {
            let perturbed = perturb_corpus(records, kind, rate, seed, donors, opts)?;
            let shifts = records
                .iter()
                .zip(&perturbed)
                .map(|(o, p)| mae_shift(o, p, tau))
                .collect::<Result<_>>()?;
            Ok(MaeShiftRow { kind, rate, shifts })
        })
        .collect()
}
