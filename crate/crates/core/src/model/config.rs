use std::fmt;
use std::str::FromStr;

use crate::config::{parse_bool, parse_key_values, parse_num, render_key_values};
use crate::error::{Error, Result};
use crate::spectral::{BandKeepMask, BandSource};

/// Whether evaluation batches get their own reconstruction weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsrInference {
    Batch,
    Off,
}

impl fmt::Display for FsrInference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FsrInference::Batch => "batch",
            FsrInference::Off => "off",
        })
    }
}

impl FromStr for FsrInference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(FsrInference::Batch),
            "off" => Ok(FsrInference::Off),
            other => Err(Error::Config(format!("unknown fsr_inference {other:?}"))),
        }
    }
}

/// Axis the transform runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralAxis {
    /// Over the pooled hidden vector.
    Feature,
    /// Per hidden neuron over zero-padded token positions.
    Token,
}

impl fmt::Display for SpectralAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpectralAxis::Feature => "feature",
            SpectralAxis::Token => "token",
        })
    }
}

impl FromStr for SpectralAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" | "feature_axis" => Ok(SpectralAxis::Feature),
            "token" | "token_axis" => Ok(SpectralAxis::Token),
            other => Err(Error::Config(format!("unknown spectral axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub tau: f64,
    pub xi: f64,
    pub lff: bool,
    pub fsr: bool,
    pub fsa: bool,
    pub band_keep: BandKeepMask,
    pub band_source: BandSource,
    pub fsr_inference: FsrInference,
    pub spectral_axis: SpectralAxis,
    /// Padded sequence length in token-axis mode.
    pub max_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: 0.6,
            xi: 1.0,
            lff: true,
            fsr: true,
            fsa: true,
            band_keep: BandKeepMask::LFF,
            band_source: BandSource::PerSample,
            fsr_inference: FsrInference::Batch,
            spectral_axis: SpectralAxis::Feature,
            max_tokens: 512,
        }
    }
}

const KEYS: [&str; 10] = [
    "tau",
    "xi",
    "lff",
    "fsr",
    "fsa",
    "band_keep",
    "band_source",
    "fsr_inference",
    "spectral_axis",
    "max_tokens",
];

impl PipelineConfig {
    /// Defaults with the three module toggles set; the mask follows `lff`.
    pub fn with_modules(lff: bool, fsr: bool, fsa: bool) -> Self {
        Self {
            lff,
            fsr,
            fsa,
            band_keep: if lff { BandKeepMask::LFF } else { BandKeepMask::ALL },
            ..Self::default()
        }
    }

    pub fn all_off() -> Self {
        Self::with_modules(false, false, false)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidTau(self.tau));
        }
        if !(self.xi.is_finite() && self.xi > 0.0) {
            return Err(Error::Config(format!("xi must be positive, got {}", self.xi)));
        }
        if self.lff && self.band_keep != BandKeepMask::LFF {
            return Err(Error::Config(format!(
                "band_keep {} conflicts with lff (which keeps mid,high)",
                self.band_keep
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tau", format!("{:?}", self.tau)),
            ("xi", format!("{:?}", self.xi)),
            ("lff", self.lff.to_string()),
            ("fsr", self.fsr.to_string()),
            ("fsa", self.fsa.to_string()),
            ("band_keep", self.band_keep.to_string()),
            ("band_source", self.band_source.to_string()),
            ("fsr_inference", self.fsr_inference.to_string()),
            ("spectral_axis", self.spectral_axis.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        render_key_values(self.pairs())
    }

    /// Applies one `key=value` setting. Returns false for keys this type
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "tau" => self.tau = parse_num(key, value)?,
            "xi" => self.xi = parse_num(key, value)?,
            "lff" => self.lff = parse_bool(key, value)?,
            "fsr" => self.fsr = parse_bool(key, value)?,
            "fsa" => self.fsa = parse_bool(key, value)?,
            "band_keep" => self.band_keep = value.parse()?,
            "band_source" => self.band_source = value.parse()?,
            "fsr_inference" => self.fsr_inference = value.parse()?,
            "spectral_axis" => self.spectral_axis = value.parse()?,
            "max_tokens" => self.max_tokens = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses the text form written by [`PipelineConfig::to_text`]. Every
    /// key is required.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut cfg = Self::default();
        for key in KEYS {
            let v = kv
                .get(key)
                .ok_or_else(|| Error::Config(format!("pipeline config missing {key:?}")))?;
            cfg.set(key, v)?;
        }
        if let Some(extra) = kv.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown pipeline key {extra:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn effective_mask(&self) -> BandKeepMask {
        if self.lff {
            BandKeepMask::LFF
        } else {
            self.band_keep
        }
    }
}
