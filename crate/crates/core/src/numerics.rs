//! Real and complex signal arithmetic.
//!
//! Forward transforms are unnormalized, `X[k] = sum_n x[n] e^{-2 pi i k n / N}`,
//! and the inverse carries the `1/N` factor. Spectra are handled as pairs of
//! independent real components, so every adjoint here is the transpose of a
//! real-linear map.
//!
//! The direct `O(N^2)` summation is the reference path. [`fft_radix2`] is a
//! fast path for power-of-two lengths, checked against the direct form in the
//! tests.

use crate::error::{Error, Result};

/// Relative tolerance used for Hermitian-symmetry and imaginary-residue checks.
pub const HERMITIAN_TOL: f64 = 1e-9;

/// Full-length complex spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::DimensionMismatch {
                expected: re.len(),
                found: im.len(),
            });
        }
        if re.iter().chain(im.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSignal);
        }
        Ok(Self { re, im })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    fn max_modulus(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .fold(0.0, f64::max)
    }

    /// Largest deviation from `X[N-k] = conj(X[k])`.
    pub fn hermitian_deviation(&self) -> f64 {
        let n = self.len();
        let mut worst = 0.0f64;
        for k in 0..n {
            let j = (n - k) % n;
            let dr = self.re[j] - self.re[k];
            let di = self.im[j] + self.im[k];
            worst = worst.max(dr.hypot(di));
        }
        worst
    }

    fn check_hermitian(&self) -> Result<()> {
        let tolerance = HERMITIAN_TOL * self.max_modulus();
        let deviation = self.hermitian_deviation();
        if deviation > tolerance {
            return Err(Error::NonHermitian {
                deviation,
                tolerance,
            });
        }
        Ok(())
    }
}

/// Non-redundant half of a real signal's spectrum: bins `0..=N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneSidedSpectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    original_length: usize,
}

/// Number of one-sided bins for a real signal of length `n`.
pub fn one_sided_bins(n: usize) -> usize {
    n / 2 + 1
}

impl OneSidedSpectrum {
    /// Builds a one-sided spectrum, checking bin count and DC/Nyquist realness.
    pub fn new(re: Vec<f64>, im: Vec<f64>, original_length: usize) -> Result<Self> {
        if original_length == 0 {
            return Err(Error::InvalidOneSided("original length must be >= 1".into()));
        }
        let n_bins = one_sided_bins(original_length);
        if re.len() != n_bins || im.len() != n_bins {
            return Err(Error::InvalidOneSided(format!(
                "expected {n_bins} bins for length {original_length}, got re={} im={}",
                re.len(),
                im.len()
            )));
        }
        if re.iter().chain(im.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSignal);
        }
        if im[0] != 0.0 {
            return Err(Error::InvalidOneSided("DC bin must be real".into()));
        }
        if original_length.is_multiple_of(2) && im[n_bins - 1] != 0.0 {
            return Err(Error::InvalidOneSided("Nyquist bin must be real".into()));
        }
        Ok(Self {
            re,
            im,
            original_length,
        })
    }

    pub(crate) fn from_parts_unchecked(re: Vec<f64>, im: Vec<f64>, original_length: usize) -> Self {
        debug_assert_eq!(re.len(), one_sided_bins(original_length));
        Self {
            re,
            im,
            original_length,
        }
    }

    pub fn zeros(original_length: usize) -> Self {
        let n = one_sided_bins(original_length);
        Self::from_parts_unchecked(vec![0.0; n], vec![0.0; n], original_length)
    }

    pub fn n_bins(&self) -> usize {
        self.re.len()
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    /// True when the last bin is the (real) Nyquist bin.
    pub fn has_nyquist(&self) -> bool {
        self.original_length.is_multiple_of(2) && self.original_length > 1
    }

    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).sum()
    }
}

/// Cosine/sine table for one transform length, indexed by `(k * n) mod N`.
///
/// Quarter-turn entries are exact and the table is mirrored so that
/// `sin[N-m] == -sin[m]` bit for bit; this keeps DC and Nyquist bins exactly
/// real and makes `X[N-k]` the exact conjugate of `X[k]`.
#[derive(Debug, Clone)]
pub struct Twiddles {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "transform length must be >= 1");
        let mut cos = vec![0.0; n];
        let mut sin = vec![0.0; n];
        for m in 0..=n / 2 {
            let (s, c) = if m == 0 {
                (0.0, 1.0)
            } else if 2 * m == n {
                (0.0, -1.0)
            } else if 4 * m == n {
                (1.0, 0.0)
            } else if 4 * m == 3 * n {
                (-1.0, 0.0)
            } else {
                (2.0 * std::f64::consts::PI * m as f64 / n as f64).sin_cos()
            };
            cos[m] = c;
            sin[m] = s;
            if m != 0 && 2 * m != n {
                cos[n - m] = c;
                sin[n - m] = -s;
            }
        }
        Self { n, cos, sin }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    fn at(&self, k: usize, n: usize) -> (f64, f64) {
        let m = (k * n) % self.n;
        (self.cos[m], self.sin[m])
    }
}

fn check_finite(signal: &[f64]) -> Result<()> {
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSignal);
    }
    Ok(())
}

/// Direct-summation forward DFT.
pub fn dft(signal: &[f64]) -> Result<ComplexSpectrum> {
    if signal.is_empty() {
        return Err(Error::InvalidOneSided("signal length must be >= 1".into()));
    }
    check_finite(signal)?;
    let n = signal.len();
    let tw = Twiddles::new(n);
    let mut out = ComplexSpectrum::zeros(n);
    for k in 0..n {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &x) in signal.iter().enumerate() {
            let (c, s) = tw.at(k, t);
            re += x * c;
            im -= x * s;
        }
        out.re[k] = re;
        out.im[k] = im;
    }
    Ok(out)
}

/// Radix-2 decimation-in-time FFT; `signal.len()` must be a power of two.
pub fn fft_radix2(signal: &[f64]) -> Result<ComplexSpectrum> {
    let n = signal.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidOneSided(format!(
            "radix-2 transform needs a power-of-two length, got {n}"
        )));
    }
    check_finite(signal)?;
    let tw = Twiddles::new(n);
    let bits = n.trailing_zeros();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for (i, &x) in signal.iter().enumerate() {
        let j = if bits == 0 {
            0
        } else {
            i.reverse_bits() >> (usize::BITS - bits)
        };
        re[j] = x;
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let stride = n / size;
        for start in (0..n).step_by(size) {
            for j in 0..half {
                let (c, s) = tw.at(j, stride);
                // w = e^{-i theta} = c - i s
                let (br, bi) = (re[start + j + half], im[start + j + half]);
                let tr = br * c + bi * s;
                let ti = bi * c - br * s;
                let (ar, ai) = (re[start + j], im[start + j]);
                re[start + j] = ar + tr;
                im[start + j] = ai + ti;
                re[start + j + half] = ar - tr;
                im[start + j + half] = ai - ti;
            }
        }
        size *= 2;
    }
    Ok(ComplexSpectrum { re, im })
}

/// Forward DFT using the radix-2 path when the length allows it.
pub fn dft_fast(signal: &[f64]) -> Result<ComplexSpectrum> {
    if signal.len().is_power_of_two() {
        fft_radix2(signal)
    } else {
        dft(signal)
    }
}

/// Inverse DFT of a Hermitian spectrum, returning the real part.
pub fn idft(spectrum: &ComplexSpectrum) -> Result<Vec<f64>> {
    let n = spectrum.len();
    if n == 0 {
        return Err(Error::InvalidOneSided("spectrum length must be >= 1".into()));
    }
    check_finite(&spectrum.re)?;
    check_finite(&spectrum.im)?;
    spectrum.check_hermitian()?;
    let tw = Twiddles::new(n);
    let scale = 1.0 / n as f64;
    let residue_tol = HERMITIAN_TOL * spectrum.max_modulus().max(1.0);
    let mut out = vec![0.0; n];
    for (t, slot) in out.iter_mut().enumerate() {
        let (mut re, mut im) = (0.0, 0.0);
        for k in 0..n {
            let (c, s) = tw.at(k, t);
            re += spectrum.re[k] * c - spectrum.im[k] * s;
            im += spectrum.re[k] * s + spectrum.im[k] * c;
        }
        let im = im * scale;
        if im.abs() >= residue_tol {
            return Err(Error::NonHermitian {
                deviation: im.abs(),
                tolerance: residue_tol,
            });
        }
        *slot = re * scale;
    }
    Ok(out)
}

/// Keeps bins `0..=N/2` of a Hermitian spectrum.
///
/// DC and Nyquist imaginary parts are within tolerance of zero after the
/// symmetry check and are stored as exact zeros.
pub fn to_one_sided(spectrum: &ComplexSpectrum) -> Result<OneSidedSpectrum> {
    let n = spectrum.len();
    if n == 0 {
        return Err(Error::InvalidOneSided("spectrum length must be >= 1".into()));
    }
    check_finite(&spectrum.re)?;
    check_finite(&spectrum.im)?;
    spectrum.check_hermitian()?;
    let bins = one_sided_bins(n);
    let re = spectrum.re[..bins].to_vec();
    let mut im = spectrum.im[..bins].to_vec();
    im[0] = 0.0;
    if n.is_multiple_of(2) {
        im[bins - 1] = 0.0;
    }
    Ok(OneSidedSpectrum::from_parts_unchecked(re, im, n))
}

/// Rebuilds the full spectrum by conjugate mirroring.
pub fn from_one_sided(one_sided: &OneSidedSpectrum) -> Result<ComplexSpectrum> {
    // Re-validate: the fields are public and may have been edited.
    let checked = OneSidedSpectrum::new(
        one_sided.re.clone(),
        one_sided.im.clone(),
        one_sided.original_length,
    )?;
    let n = checked.original_length;
    let bins = checked.n_bins();
    let mut out = ComplexSpectrum::zeros(n);
    out.re[..bins].copy_from_slice(&checked.re);
    out.im[..bins].copy_from_slice(&checked.im);
    for k in bins..n {
        out.re[k] = checked.re[n - k];
        out.im[k] = -checked.im[n - k];
    }
    Ok(out)
}

/// Entry-wise modulus of a one-sided spectrum.
pub fn modulus(one_sided: &OneSidedSpectrum) -> Vec<f64> {
    one_sided
        .re
        .iter()
        .zip(&one_sided.im)
        .map(|(r, i)| r.hypot(*i))
        .collect()
}

/// Adjoint of the full forward DFT, with the spectrum gradient given as
/// independent real and imaginary parts.
pub fn dft_vjp(grad_re: &[f64], grad_im: &[f64]) -> Result<Vec<f64>> {
    if grad_re.len() != grad_im.len() {
        return Err(Error::DimensionMismatch {
            expected: grad_re.len(),
            found: grad_im.len(),
        });
    }
    let n = grad_re.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let tw = Twiddles::new(n);
    Ok(real_dft_adjoint(&tw, grad_re, grad_im))
}

/// Gradient of the modulus with respect to `(re, im)`; zero where `|z| = 0`.
pub fn modulus_vjp(one_sided: &OneSidedSpectrum, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if upstream.len() != one_sided.n_bins() {
        return Err(Error::DimensionMismatch {
            expected: one_sided.n_bins(),
            found: upstream.len(),
        });
    }
    let mut gre = vec![0.0; upstream.len()];
    let mut gim = vec![0.0; upstream.len()];
    for k in 0..upstream.len() {
        let (r, i) = (one_sided.re[k], one_sided.im[k]);
        let m = r.hypot(i);
        if m > 0.0 {
            gre[k] = upstream[k] * r / m;
            gim[k] = upstream[k] * i / m;
        }
    }
    Ok((gre, gim))
}

// ---------------------------------------------------------------------------
// One-sided real transforms used by the model's hot path.
// ---------------------------------------------------------------------------

/// Bins `0..=N/2` of the forward DFT of a real signal, computed directly.
pub fn real_dft_one_sided(tw: &Twiddles, signal: &[f64]) -> OneSidedSpectrum {
    let n = tw.len();
    debug_assert_eq!(signal.len(), n);
    let bins = one_sided_bins(n);
    let mut re = vec![0.0; bins];
    let mut im = vec![0.0; bins];
    for k in 0..bins {
        let (mut sr, mut si) = (0.0, 0.0);
        for (t, &x) in signal.iter().enumerate() {
            let (c, s) = tw.at(k, t);
            sr += x * c;
            si -= x * s;
        }
        re[k] = sr;
        im[k] = si;
    }
    OneSidedSpectrum::from_parts_unchecked(re, im, n)
}

/// Adjoint of [`real_dft_one_sided`] (and of the full DFT when the gradient
/// covers all `N` bins): `g[n] = sum_k gre[k] cos - gim[k] sin`.
pub fn real_dft_adjoint(tw: &Twiddles, grad_re: &[f64], grad_im: &[f64]) -> Vec<f64> {
    let n = tw.len();
    let mut out = vec![0.0; n];
    for (t, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..grad_re.len() {
            let (c, s) = tw.at(k, t);
            acc += grad_re[k] * c - grad_im[k] * s;
        }
        *slot = acc;
    }
    out
}

#[inline]
fn mirror_weight(k: usize, n: usize) -> f64 {
    if k == 0 || 2 * k == n {
        1.0
    } else {
        2.0
    }
}

/// Real signal whose one-sided spectrum is `spectrum`; equal to
/// `idft(from_one_sided(spectrum))` without materializing the mirror.
pub fn real_idft_one_sided(tw: &Twiddles, spectrum: &OneSidedSpectrum) -> Vec<f64> {
    let n = tw.len();
    debug_assert_eq!(spectrum.original_length(), n);
    let scale = 1.0 / n as f64;
    let mut out = vec![0.0; n];
    for (t, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..spectrum.n_bins() {
            let (c, s) = tw.at(k, t);
            let w = mirror_weight(k, n);
            // DC and Nyquist imaginary parts are zero by invariant
            let im = if w == 1.0 { 0.0 } else { spectrum.im[k] };
            acc += w * (spectrum.re[k] * c - im * s);
        }
        *slot = acc * scale;
    }
    out
}

/// Adjoint of [`real_idft_one_sided`].
pub fn real_idft_adjoint(tw: &Twiddles, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = tw.len();
    let bins = one_sided_bins(n);
    let scale = 1.0 / n as f64;
    let mut gre = vec![0.0; bins];
    let mut gim = vec![0.0; bins];
    for k in 0..bins {
        let w = mirror_weight(k, n) * scale;
        let (mut ar, mut ai) = (0.0, 0.0);
        for (t, &g) in upstream.iter().enumerate() {
            let (c, s) = tw.at(k, t);
            ar += g * c;
            ai -= g * s;
        }
        gre[k] = w * ar;
        gim[k] = if mirror_weight(k, n) == 1.0 { 0.0 } else { w * ai };
    }
    (gre, gim)
}
