//! Input corruptions for masked pretraining.
//!
//! Two channels are combined for dual-domain pretraining:
//!
//! * spatial: a fixed-cardinality subset of tokens is replaced by a learnable
//!   mask embedding inside the model;
//! * frequency: each token's spectrum is transformed, a low-pass or high-pass
//!   filter with cutoff `α = ⌊γ·⌈B/2⌉⌋` is applied, and the result is
//!   transformed back to the band domain.
//!
//! Band masking (whole bands zeroed across all tokens) supports the
//! spectral-masking comparison arms.

pub mod dft;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dft::{half_len, irdft, rdft, RealDft};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{ComplexVector, Tensor};

// absorbs representation error in products like 0.7 * 5 before rounding
const ROUNDING_SLACK: f64 = 1e-9;

/// `round(ratio·n)` with halves rounded up.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5 + ROUNDING_SLACK).floor() as usize).min(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialMask {
    flags: Vec<bool>,
    ratio: f64,
}

impl SpatialMask {
    pub fn from_flags(flags: Vec<bool>) -> Self {
        let ratio = flags.iter().filter(|&&f| f).count() as f64 / flags.len().max(1) as f64;
        SpatialMask { flags, ratio }
    }

    pub fn none(n: usize) -> Self {
        SpatialMask {
            flags: vec![false; n],
            ratio: 0.0,
        }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i]).collect()
    }
}

/// Draws exactly `round(ratio·n)` masked positions uniformly without replacement.
pub fn sample_spatial_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<SpatialMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Contract(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let count = masked_count(n, ratio);
    let mut flags = vec![false; n];
    for i in index::sample(rng, n, count) {
        flags[i] = true;
    }
    Ok(SpatialMask { flags, ratio })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// Keeps bins `k ≤ α`.
    LowPass,
    /// Keeps bins `k > α`.
    HighPass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyFilterSpec {
    kind: FilterKind,
    gamma: f64,
    alpha: usize,
}

/// `⌊γ·⌈B/2⌉⌋`.
pub fn cutoff_bin(gamma: f64, bands: usize) -> usize {
    (gamma * bands.div_ceil(2) as f64 + ROUNDING_SLACK).floor() as usize
}

impl FrequencyFilterSpec {
    pub fn new(kind: FilterKind, gamma: f64, bands: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Contract(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        Ok(FrequencyFilterSpec {
            kind,
            gamma,
            alpha: cutoff_bin(gamma, bands),
        })
    }

    /// Filter with an explicit cutoff bin, `0 ≤ alpha ≤ ⌈B/2⌉`. Lets the
    /// `γ → 1` limit be expressed, which [`FrequencyFilterSpec::new`] rejects.
    pub fn with_alpha(kind: FilterKind, alpha: usize, bands: usize) -> Result<Self> {
        let half = bands.div_ceil(2);
        if alpha > half {
            return Err(Error::Contract(format!("cutoff bin {alpha} exceeds {half}")));
        }
        Ok(FrequencyFilterSpec {
            kind,
            gamma: alpha as f64 / half as f64,
            alpha,
        })
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn alpha(&self) -> usize {
        self.alpha
    }

    fn keeps(&self, k: usize) -> bool {
        match self.kind {
            FilterKind::LowPass => k <= self.alpha,
            FilterKind::HighPass => k > self.alpha,
        }
    }
}

pub fn apply_frequency_filter(xf: &ComplexVector, spec: &FrequencyFilterSpec) -> ComplexVector {
    let mut out = xf.clone();
    for k in 0..out.len() {
        if !spec.keeps(k) {
            out.set(k, (0.0, 0.0));
        }
    }
    out
}

impl RealDft {
    /// Forward transform, filter, inverse transform.
    pub fn mask_token(&self, y: &[f64], spec: &FrequencyFilterSpec) -> Result<Vec<f64>> {
        let xf = self.forward(y)?;
        self.inverse(&apply_frequency_filter(&xf, spec))
    }
}

pub fn frequency_mask_token(y: &[f64], spec: &FrequencyFilterSpec) -> Result<Vec<f64>> {
    RealDft::new(y.len())?.mask_token(y, spec)
}

/// Bands zeroed across every token of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMask {
    flags: Vec<bool>,
}

impl BandMask {
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

pub fn sample_band_mask<R: Rng + ?Sized>(bands: usize, ratio: f64, rng: &mut R) -> Result<BandMask> {
    Ok(BandMask {
        flags: sample_spatial_mask(bands, ratio, rng)?.flags,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Spatial,
    Spectral,
    Frequency,
    #[value(name = "spatial_spectral")]
    SpatialSpectral,
    Dual,
}

impl MaskMode {
    pub const ALL: [MaskMode; 5] = [
        MaskMode::Spatial,
        MaskMode::Spectral,
        MaskMode::Frequency,
        MaskMode::SpatialSpectral,
        MaskMode::Dual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Spatial => "spatial",
            MaskMode::Spectral => "spectral",
            MaskMode::Frequency => "frequency",
            MaskMode::SpatialSpectral => "spatial_spectral",
            MaskMode::Dual => "dual",
        }
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, MaskMode::Spatial | MaskMode::SpatialSpectral | MaskMode::Dual)
    }

    pub fn uses_frequency(self) -> bool {
        matches!(self, MaskMode::Frequency | MaskMode::Dual)
    }

    pub fn uses_bands(self) -> bool {
        matches!(self, MaskMode::Spectral | MaskMode::SpatialSpectral)
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = MaskMode::ALL.iter().map(|m| m.name()).collect();
                Error::Contract(format!("unknown mask mode '{s}'; valid modes: {}", valid.join(", ")))
            })
    }
}

/// Whether frequency filter kinds are drawn per token or once per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FilterScope {
    #[default]
    Token,
    Cube,
}

/// A realized corruption for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub mode: MaskMode,
    pub spatial: Option<SpatialMask>,
    pub frequency: Option<Vec<FrequencyFilterSpec>>,
    pub bands: Option<BandMask>,
    pub rng_seed: u64,
}

/// Parameters shared by every plan built during a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSettings {
    pub mode: MaskMode,
    pub ratio: f64,
    pub gamma: f64,
    pub scope: FilterScope,
}

/// Builds the plan for one sample.
///
/// Each channel draws from its own stream keyed by `seed`, so a dual plan
/// contains exactly the spatial mask and filter choices that the single-channel
/// plans with the same seed would contain.
pub fn build_mask_plan(settings: &MaskSettings, n: usize, bands: usize, seed: u64) -> Result<MaskPlan> {
    let mode = settings.mode;
    let spatial = if mode.uses_spatial() {
        let mut r = rng::stream(seed, &[tag::SPATIAL]);
        Some(sample_spatial_mask(n, settings.ratio, &mut r)?)
    } else {
        None
    };
    let frequency = if mode.uses_frequency() {
        let mut r = rng::stream(seed, &[tag::FREQUENCY]);
        let mut draw = || {
            let kind = if r.random_bool(0.5) {
                FilterKind::LowPass
            } else {
                FilterKind::HighPass
            };
            FrequencyFilterSpec::new(kind, settings.gamma, bands)
        };
        let specs = match settings.scope {
            FilterScope::Token => (0..n).map(|_| draw()).collect::<Result<Vec<_>>>()?,
            FilterScope::Cube => vec![draw()?; n],
        };
        Some(specs)
    } else {
        None
    };
    let band_mask = if mode.uses_bands() {
        let mut r = rng::stream(seed, &[tag::BANDS]);
        Some(sample_band_mask(bands, settings.ratio, &mut r)?)
    } else {
        None
    };
    Ok(MaskPlan {
        mode,
        spatial,
        frequency,
        bands: band_mask,
        rng_seed: seed,
    })
}

impl MaskPlan {
    /// Frequency-masked copy of an `N×B` token matrix.
    pub fn frequency_corrupt(&self, tokens: &Tensor, dft: &RealDft) -> Result<Option<Tensor>> {
        let Some(specs) = &self.frequency else {
            return Ok(None);
        };
        if specs.len() != tokens.rows() {
            return Err(Error::Shape(format!(
                "{} filter specs for {} tokens",
                specs.len(),
                tokens.rows()
            )));
        }
        let mut data = Vec::with_capacity(tokens.len());
        for (i, spec) in specs.iter().enumerate() {
            data.extend(dft.mask_token(tokens.row(i), spec)?);
        }
        Ok(Some(Tensor::new(tokens.shape().to_vec(), data)?))
    }

    /// Copy of the tokens with masked bands set to zero.
    pub fn band_corrupt(&self, tokens: &Tensor) -> Option<Tensor> {
        let mask = self.bands.as_ref()?;
        let b = tokens.cols();
        let mut out = tokens.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            if mask.flags[j % b] {
                *v = 0.0;
            }
        }
        Some(out)
    }
}
