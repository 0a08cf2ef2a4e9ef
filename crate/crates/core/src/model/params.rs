use crate::error::{Error, Result};

/// The four trainable blocks. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    d: usize,
    /// `d x d`, maps pooled input to adapted features.
    pub adapter_w: Vec<f64>,
    pub adapter_b: Vec<f64>,
    /// `2 x d`
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

pub const BLOCK_NAMES: [&str; 4] = ["adapter_w", "adapter_b", "head_w", "head_b"];

impl Params {
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            adapter_w: vec![0.0; d * d],
            adapter_b: vec![0.0; d],
            head_w: vec![0.0; 2 * d],
            head_b: vec![0.0; 2],
        }
    }

    /// Identity adapter with zero bias and a zero head.
    pub fn identity(d: usize) -> Self {
        let mut p = Self::zeros(d);
        for i in 0..d {
            p.adapter_w[i * d + i] = 1.0;
        }
        p
    }

    pub fn from_blocks(d: usize, blocks: [Vec<f64>; 4]) -> Result<Self> {
        let [adapter_w, adapter_b, head_w, head_b] = blocks;
        let want = [d * d, d, 2 * d, 2];
        let got = [adapter_w.len(), adapter_b.len(), head_w.len(), head_b.len()];
        for (w, g) in want.iter().zip(got) {
            if *w != g {
                return Err(Error::DimensionMismatch {
                    expected: *w,
                    found: g,
                });
            }
        }
        Ok(Self {
            d,
            adapter_w,
            adapter_b,
            head_w,
            head_b,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.adapter_w, &self.adapter_b, &self.head_w, &self.head_b]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.adapter_w,
            &mut self.adapter_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= f);
        }
    }

    /// Flat copy in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    /// Mutable reference to the `i`-th scalar in block order.
    pub fn get_mut(&mut self, mut i: usize) -> &mut f64 {
        for b in self.blocks_mut() {
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }
}
