//! Embedding records, the binary record file format, manifests, split
//! assembly, and the synthetic corpus generator.

mod format;
mod manifest;
mod split;
mod synth;

pub use format::{
    read_records, read_records_from, write_records, write_records_to, RecordFlags, RecordHeader,
    RECORD_MAGIC, RECORD_VERSION,
};
pub use manifest::{load_pool, Manifest, ManifestEntry, PoolRecord, Tags};
pub use split::{build_split, Scenario, SplitData, SplitPlan};
pub use synth::{domain_name, synth_generate, SynthConfig, SynthCorpus, HWT_GENERATOR, MGT_GENERATOR};

use crate::error::{Error, Result};

pub const HWT: u8 = 0;
pub const MGT: u8 = 1;

/// Row-major `rows x dim` token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidRecord(format!(
                "token matrix of {} values is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// Column means.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for r in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let n = self.rows() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tokens(TokenMatrix),
    Pooled(Vec<f64>),
}

/// One document's embeddings plus label and provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: u8,
    pub domain: String,
    pub generator: String,
    pub t_num: u32,
    pub s_num: u32,
    pub sentence_offsets: Option<Vec<u32>>,
    pub payload: Payload,
}

impl EmbeddingRecord {
    pub fn dim(&self) -> usize {
        match &self.payload {
            Payload::Tokens(m) => m.dim(),
            Payload::Pooled(v) => v.len(),
        }
    }

    pub fn tokens(&self) -> Option<&TokenMatrix> {
        match &self.payload {
            Payload::Tokens(m) => Some(m),
            Payload::Pooled(_) => None,
        }
    }

    /// Checks label, counts, offsets and payload shape.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRecord(format!("{}: {msg}", self.id)));
        if self.label > 1 {
            return bad(format!("label {} is not 0 or 1", self.label));
        }
        if self.t_num == 0 {
            return bad("t_num must be >= 1".into());
        }
        if self.s_num == 0 {
            return bad("s_num must be >= 1".into());
        }
        if self.dim() == 0 {
            return bad("hidden dimension must be >= 1".into());
        }
        match &self.payload {
            Payload::Tokens(m) => {
                if m.rows() != self.t_num as usize {
                    return bad(format!("t_num {} but {} token rows", self.t_num, m.rows()));
                }
                if m.as_slice().iter().any(|v| !v.is_finite()) {
                    return bad("non-finite token value".into());
                }
            }
            Payload::Pooled(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return bad("non-finite pooled value".into());
                }
            }
        }
        if let Some(off) = &self.sentence_offsets {
            if off.len() != self.s_num as usize {
                return bad(format!("{} offsets for s_num {}", off.len(), self.s_num));
            }
            if off.first() != Some(&0) {
                return bad("sentence offsets must start at 0".into());
            }
            if off.windows(2).any(|w| w[0] >= w[1]) {
                return bad("sentence offsets must be strictly increasing".into());
            }
            if off.last().is_some_and(|&o| o >= self.t_num) {
                return bad("sentence offset beyond last token".into());
            }
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_bad_offsets() {
        let mut r = testutil::token_record("a", 1, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, 0.0]], 2);
        assert!(r.validate().is_ok());
        r.sentence_offsets = Some(vec![0, 2]);
        assert!(r.validate().is_ok());
        r.sentence_offsets = Some(vec![1, 2]);
        assert!(r.validate().is_err());
        r.sentence_offsets = Some(vec![0, 0]);
        assert!(r.validate().is_err());
        r.sentence_offsets = Some(vec![0]);
        assert!(r.validate().is_err());
        r.sentence_offsets = None;
        r.t_num = 4;
        assert!(r.validate().is_err());
    }

    #[test]
    fn mean_row() {
        let m = TokenMatrix::from_rows(2, &[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(m.mean_row(), vec![2.0, 4.0]);
    }
}
