//! Filter-bank canonical correlation analysis.
//!
//! The epoch is standardized per channel, split into sub-bands that share a
//! high cutoff at the 4th harmonic of the fastest stimulus and start at
//! successive multiples of the slowest one, and each sub-band is correlated
//! against sine/cosine references of every target. Target `k` scores
//! `Σₙ w(n)·ρ²ₙₖ` with `w(n) = n^(-a) + b`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{design_bandpass, FilterCoeffs};
use crate::error::{Error, Result};
use crate::synth::{EegEpoch, StimulusConfig, EVOKED_HARMONICS};

/// Relative singular-value floor below which a direction is dropped.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Sine/cosine reference rows for one target frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub target_hz: f64,
    pub n_harmonics: usize,
    /// `2 · n_harmonics` rows: sin(2π·m·f·t), cos(2π·m·f·t) for m = 1..=n_harmonics.
    pub signals: Vec<Vec<f64>>,
}

pub fn build_references(
    target_hz: f64,
    n_harmonics: usize,
    fs_hz: f64,
    n_samples: usize,
) -> Result<ReferenceSet> {
    if n_harmonics == 0 {
        return Err(Error::invalid("need at least one harmonic"));
    }
    if !(target_hz > 0.0) || !(fs_hz > 0.0) {
        return Err(Error::invalid("frequencies must be positive"));
    }
    if !(n_harmonics as f64 * target_hz < fs_hz / 2.0) {
        return Err(Error::invalid(format!(
            "harmonic {n_harmonics} of {target_hz} Hz is not below Nyquist ({} Hz)",
            fs_hz / 2.0
        )));
    }
    let mut signals = Vec::with_capacity(2 * n_harmonics);
    for m in 1..=n_harmonics {
        let w = 2.0 * PI * m as f64 * target_hz / fs_hz;
        signals.push((0..n_samples).map(|k| (w * k as f64).sin()).collect());
        signals.push((0..n_samples).map(|k| (w * k as f64).cos()).collect());
    }
    Ok(ReferenceSet {
        target_hz,
        n_harmonics,
        signals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub subbands: Vec<(f64, f64)>,
}

impl FilterBank {
    pub fn n_subbands(&self) -> usize {
        self.subbands.len()
    }
}

pub fn build_filter_bank(stimulus: &StimulusConfig, n_subbands: usize) -> Result<FilterBank> {
    if n_subbands == 0 {
        return Err(Error::invalid("need at least one sub-band"));
    }
    let hi = EVOKED_HARMONICS as f64 * stimulus.max_hz();
    let lo_top = n_subbands as f64 * stimulus.min_hz();
    if !(lo_top < hi) {
        return Err(Error::invalid(format!(
            "{n_subbands} sub-bands need {lo_top} Hz < {hi} Hz"
        )));
    }
    Ok(FilterBank {
        subbands: (1..=n_subbands)
            .map(|n| (n as f64 * stimulus.min_hz(), hi))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbccaConfig {
    pub stimulus: StimulusConfig,
    pub n_harmonics: usize,
    pub n_subbands: usize,
    pub weight_a: f64,
    pub weight_b: f64,
    pub decision_margin: f64,
    /// Order of each sub-band Butterworth filter.
    pub subband_order: usize,
    pub fs_hz: f64,
}

impl FbccaConfig {
    pub const DEFAULT_WEIGHT_A: f64 = 1.25;
    pub const DEFAULT_WEIGHT_B: f64 = 0.25;
    /// Rejects ~90 % of pure-noise 2 s epochs (runner-up margin q90 ≈ 0.099).
    pub const DEFAULT_MARGIN: f64 = 0.1;

    pub fn new(stimulus: StimulusConfig, fs_hz: f64) -> Self {
        Self {
            stimulus,
            n_harmonics: 4,
            n_subbands: 4,
            weight_a: Self::DEFAULT_WEIGHT_A,
            weight_b: Self::DEFAULT_WEIGHT_B,
            decision_margin: Self::DEFAULT_MARGIN,
            subband_order: 4,
            fs_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_harmonics == 0 {
            return Err(Error::invalid("n_harmonics must be at least 1"));
        }
        if self.n_subbands == 0 {
            return Err(Error::invalid("n_subbands must be at least 1"));
        }
        if !(self.decision_margin >= 0.0) {
            return Err(Error::invalid("decision_margin must be non-negative"));
        }
        if !(self.weight_a.is_finite() && self.weight_b.is_finite()) {
            return Err(Error::invalid("sub-band weights must be finite"));
        }
        let lo_top = self.n_subbands as f64 * self.stimulus.min_hz();
        if !(lo_top < EVOKED_HARMONICS as f64 * self.stimulus.max_hz()) {
            return Err(Error::invalid("filter bank has an empty sub-band"));
        }
        if !(self.n_harmonics as f64 * self.stimulus.max_hz() < self.fs_hz / 2.0) {
            return Err(Error::invalid("reference harmonics exceed Nyquist"));
        }
        Ok(())
    }

    pub fn subband_weight(&self, n: usize) -> f64 {
        (n as f64).powf(-self.weight_a) + self.weight_b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub predicted_index: usize,
    pub scores: Vec<f64>,
    pub margin: f64,
    pub recognized: bool,
}

impl Decision {
    /// Argmax (first index on ties) and best-minus-runner-up margin.
    pub fn from_scores(scores: Vec<f64>, decision_margin: f64) -> Self {
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        let runner_up = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != best)
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let margin = if runner_up.is_finite() {
            scores[best] - runner_up
        } else {
            scores[best]
        };
        Self {
            predicted_index: best,
            recognized: margin >= decision_margin,
            scores,
            margin,
        }
    }
}

/// Orthonormal basis (samples × rank) of the centred row space of `rows`.
fn row_space_basis(rows: &[Vec<f64>], n_samples: usize, what: &str) -> Result<DMatrix<f64>> {
    let c = rows.len();
    let mut m = DMatrix::<f64>::zeros(n_samples, c);
    for (j, row) in rows.iter().enumerate() {
        if row.len() != n_samples {
            return Err(Error::invalid(format!("{what}: ragged rows")));
        }
        let mean = row.iter().sum::<f64>() / n_samples as f64;
        for (i, v) in row.iter().enumerate() {
            m[(i, j)] = v - mean;
        }
    }
    let svd = m.svd(true, false);
    let u = svd.u.expect("requested U");
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if !(max_sv > 0.0) {
        return Err(Error::DegenerateInput(format!("{what} has no variance")));
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > RANK_TOLERANCE * max_sv)
        .map(|(i, _)| i)
        .collect();
    Ok(u.select_columns(keep.iter()))
}

fn largest_singular_value(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let cross = a.transpose() * b;
    cross
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .clamp(0.0, 1.0)
}

fn check_sample_counts(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<usize> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("CCA needs at least one row per set"));
    }
    let n = x[0].len();
    if y[0].len() != n {
        return Err(Error::invalid(format!(
            "sample count mismatch: {n} vs {}",
            y[0].len()
        )));
    }
    let needed = x.len().max(y.len()) + 2;
    if n < needed {
        return Err(Error::invalid(format!(
            "CCA needs at least {needed} samples, got {n}"
        )));
    }
    Ok(n)
}

/// Largest canonical correlation between the row sets `x` and `y`.
pub fn cca_max_corr(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let n = check_sample_counts(x, y)?;
    let qx = row_space_basis(x, n, "X")?;
    let qy = row_space_basis(y, n, "Y")?;
    Ok(largest_singular_value(&qx, &qy))
}

fn standardize(epoch: &EegEpoch) -> Result<EegEpoch> {
    let n = epoch.n_samples() as f64;
    let mut any_variance = false;
    let rows = epoch
        .samples()
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / n;
            let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                any_variance = true;
                row.iter().map(|v| (v - mean) / sd).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect();
    if !any_variance {
        return Err(Error::DegenerateInput("every channel is flat".into()));
    }
    Ok(epoch.with_samples(rows))
}

/// Filters and reference bases prepared for one epoch length.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: FbccaConfig,
    filters: Vec<FilterCoeffs>,
    weights: Vec<f64>,
    n_samples: usize,
    reference_bases: Vec<DMatrix<f64>>,
}

impl Decoder {
    pub fn new(config: &FbccaConfig, bank: &FilterBank, n_samples: usize) -> Result<Self> {
        config.validate()?;
        let expected = build_filter_bank(&config.stimulus, config.n_subbands)?;
        if bank.subbands.len() != config.n_subbands || *bank != expected {
            return Err(Error::invalid(format!(
                "filter bank {:?} does not match config ({} sub-bands over {:?} Hz)",
                bank.subbands,
                config.n_subbands,
                config.stimulus.frequencies_hz()
            )));
        }
        let filters = bank
            .subbands
            .iter()
            .map(|&(lo, hi)| design_bandpass(config.subband_order, lo, hi, config.fs_hz))
            .collect::<Result<Vec<_>>>()?;
        let weights = (1..=bank.n_subbands()).map(|n| config.subband_weight(n)).collect();
        let reference_bases = config
            .stimulus
            .frequencies_hz()
            .iter()
            .map(|&f| {
                let refs = build_references(f, config.n_harmonics, config.fs_hz, n_samples)?;
                row_space_basis(&refs.signals, n_samples, "references")
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            filters,
            weights,
            n_samples,
            reference_bases,
        })
    }

    pub fn config(&self) -> &FbccaConfig {
        &self.config
    }

    /// ρ for every (sub-band, target) pair.
    pub fn correlations(&self, epoch: &EegEpoch) -> Result<Vec<Vec<f64>>> {
        if epoch.n_samples() != self.n_samples {
            return Err(Error::invalid(format!(
                "decoder prepared for {} samples, epoch has {}",
                self.n_samples,
                epoch.n_samples()
            )));
        }
        if (epoch.fs_hz() - self.config.fs_hz).abs() > 1e-9 {
            return Err(Error::invalid("epoch sampling rate differs from decoder config"));
        }
        let refs_rows = 2 * self.config.n_harmonics;
        if self.n_samples < epoch.n_channels().max(refs_rows) + 2 {
            return Err(Error::invalid("epoch too short for CCA"));
        }
        let standardized = standardize(epoch)?;
        self.filters
            .par_iter()
            .map(|filter| {
                let rows: Vec<Vec<f64>> = standardized
                    .samples()
                    .iter()
                    .map(|ch| filter.filtfilt(ch))
                    .collect();
                let basis = row_space_basis(&rows, self.n_samples, "sub-band epoch")?;
                Ok(self
                    .reference_bases
                    .iter()
                    .map(|refs| largest_singular_value(&basis, refs))
                    .collect())
            })
            .collect()
    }

    pub fn classify(&self, epoch: &EegEpoch) -> Result<Decision> {
        let rho = self.correlations(epoch)?;
        let n_targets = self.config.stimulus.count();
        let scores = (0..n_targets)
            .map(|k| {
                rho.iter()
                    .zip(&self.weights)
                    .map(|(band, w)| w * band[k] * band[k])
                    .sum()
            })
            .collect();
        Ok(Decision::from_scores(scores, self.config.decision_margin))
    }
}

pub fn classify(epoch: &EegEpoch, config: &FbccaConfig, bank: &FilterBank) -> Result<Decision> {
    Decoder::new(config, bank, epoch.n_samples())?.classify(epoch)
}
