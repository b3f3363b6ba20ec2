//! Welch-style band power estimates around a set of harmonics.
//!
//! Only the bins that matter are evaluated (direct DFT), so the estimator is
//! cheap enough to run inside the generator's SNR calibration.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Half-width of the band centred on each harmonic.
pub const BAND_HALF_WIDTH_HZ: f64 = 0.5;
/// Outer edge of the flanking noise bands, measured from the harmonic.
pub const FLANK_OUTER_HZ: f64 = 1.5;
/// Welch segment length cap.
pub const SEGMENT_S: f64 = 2.0;

const EPS: f64 = 1e-9;

/// Mean per-bin PSD inside the harmonic bands and inside the flanking bands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandPowers {
    pub band: f64,
    pub flank: f64,
}

impl BandPowers {
    pub fn ratio_db(&self) -> f64 {
        10.0 * (self.band / self.flank).log10()
    }
}

fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Bin indices (of a length-`seg` DFT) in the band and flanks around `freq`.
fn bins_around(freq: f64, df: f64) -> (Vec<usize>, Vec<usize>) {
    let lo = ((freq - FLANK_OUTER_HZ - EPS) / df).ceil().max(1.0) as usize;
    let hi = ((freq + FLANK_OUTER_HZ + EPS) / df).floor() as usize;
    let mut band = Vec::new();
    let mut flank = Vec::new();
    for k in lo..=hi {
        let offset = (k as f64 * df - freq).abs();
        if offset <= BAND_HALF_WIDTH_HZ + EPS {
            band.push(k);
        } else if offset <= FLANK_OUTER_HZ + EPS {
            flank.push(k);
        }
    }
    (band, flank)
}

fn dft_power(segment: &[f64], window: &[f64], k: usize) -> f64 {
    let n = segment.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, (&x, &w)) in segment.iter().zip(window).enumerate() {
        let phase = -2.0 * PI * (k as f64) * (i as f64) / n;
        re += w * x * phase.cos();
        im += w * x * phase.sin();
    }
    re * re + im * im
}

/// Averaged Hann-windowed periodogram (50 % overlap) evaluated at the bins
/// around `target_hz` and its harmonics.
pub fn harmonic_band_powers(
    signal: &[f64],
    fs_hz: f64,
    target_hz: f64,
    n_harmonics: usize,
) -> Result<BandPowers> {
    if n_harmonics == 0 {
        return Err(Error::invalid("n_harmonics must be at least 1"));
    }
    if !(target_hz > 0.0) {
        return Err(Error::invalid("target frequency must be positive"));
    }
    let nyquist = fs_hz / 2.0;
    let top = target_hz * n_harmonics as f64 + FLANK_OUTER_HZ;
    if top >= nyquist {
        return Err(Error::invalid(format!(
            "harmonic {n_harmonics} of {target_hz} Hz (with flanks) exceeds Nyquist {nyquist} Hz"
        )));
    }
    let seg_len = ((SEGMENT_S * fs_hz).round() as usize).min(signal.len());
    if seg_len < 2 {
        return Err(Error::invalid("signal too short for a periodogram"));
    }
    let hop = (seg_len / 2).max(1);
    let window = hann(seg_len);
    let norm = fs_hz * window.iter().map(|w| w * w).sum::<f64>();
    let df = fs_hz / seg_len as f64;

    let mut band_bins = Vec::new();
    let mut flank_bins = Vec::new();
    for m in 1..=n_harmonics {
        let (b, f) = bins_around(target_hz * m as f64, df);
        band_bins.extend(b);
        flank_bins.extend(f);
    }
    if band_bins.is_empty() || flank_bins.is_empty() {
        return Err(Error::invalid("no spectral bins inside the analysis bands"));
    }

    let mut band_sum = 0.0;
    let mut flank_sum = 0.0;
    let mut n_segments = 0usize;
    let mut start = 0;
    let mut demeaned = vec![0.0; seg_len];
    while start + seg_len <= signal.len() {
        let seg = &signal[start..start + seg_len];
        let mean = seg.iter().sum::<f64>() / seg_len as f64;
        for (d, &x) in demeaned.iter_mut().zip(seg) {
            *d = x - mean;
        }
        band_sum += band_bins
            .iter()
            .map(|&k| dft_power(&demeaned, &window, k))
            .sum::<f64>();
        flank_sum += flank_bins
            .iter()
            .map(|&k| dft_power(&demeaned, &window, k))
            .sum::<f64>();
        n_segments += 1;
        start += hop;
    }
    let scale = norm * n_segments as f64;
    Ok(BandPowers {
        band: band_sum / scale / band_bins.len() as f64,
        flank: flank_sum / scale / flank_bins.len() as f64,
    })
}
