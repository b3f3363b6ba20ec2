//! Preprocessing: Butterworth band-pass and notch design as second-order
//! sections, forward-backward (zero-phase) application, and blink gating on
//! the frontal channels.

use std::f64::consts::PI;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{ChannelModel, EegEpoch, Region};

type C64 = Complex<f64>;

/// Largest pole radius accepted by the designers.
pub const MAX_POLE_RADIUS: f64 = 1.0 - 1e-6;

/// One biquad, `b0 + b1 z⁻¹ + b2 z⁻²` over `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: C64) -> C64 {
        let z2 = z_inv * z_inv;
        let num = C64::new(self.b[0], 0.0) + z_inv * self.b[1] + z2 * self.b[2];
        let den = C64::new(self.a[0], 0.0) + z_inv * self.a[1] + z2 * self.a[2];
        num / den
    }

    /// Roots of `z² + a1 z + a2`.
    pub fn poles(&self) -> [C64; 2] {
        let (a1, a2) = (self.a[1], self.a[2]);
        let disc = C64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

/// Cascade of second-order sections with an overall gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoeffs {
    pub sections: Vec<Biquad>,
    pub gain: f64,
}

impl FilterCoeffs {
    pub fn response(&self, freq_hz: f64, fs_hz: f64) -> C64 {
        let w = 2.0 * PI * freq_hz / fs_hz;
        let z_inv = C64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(C64::new(self.gain, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude_db(&self, freq_hz: f64, fs_hz: f64) -> f64 {
        20.0 * self.response(freq_hz, fs_hz).norm().log10()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .flat_map(|s| s.poles())
            .map(|p| p.norm())
            .fold(0.0, f64::max)
    }

    fn check_stable(self) -> Result<Self> {
        let r = self.max_pole_radius();
        if !(r <= MAX_POLE_RADIUS) {
            return Err(Error::Design(format!("unstable design: pole radius {r}")));
        }
        Ok(self)
    }

    /// Direct-form II transposed, with section states initialized to the
    /// steady state of a constant input equal to `x[0]`.
    fn filter_in_place(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let mut level = first * self.gain;
        let mut states: Vec<[f64; 2]> = Vec::with_capacity(self.sections.len());
        for s in &self.sections {
            let y = s.dc_gain() * level;
            let z2 = s.b[2] * level - s.a[2] * y;
            let z1 = s.b[1] * level - s.a[1] * y + z2;
            states.push([z1, z2]);
            level = y;
        }
        for v in x.iter_mut() {
            let mut u = *v * self.gain;
            for (s, z) in self.sections.iter().zip(states.iter_mut()) {
                let y = s.b[0] * u + z[0];
                z[0] = s.b[1] * u - s.a[1] * y + z[1];
                z[1] = s.b[2] * u - s.a[2] * y;
                u = y;
            }
            *v = u;
        }
    }

    /// Forward-backward filtering of one channel with odd reflection of
    /// `3 × 2 × sections` samples at each end.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * 2 * self.sections.len()).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.filter_in_place(&mut ext);
        ext.reverse();
        self.filter_in_place(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterSpec {
    Bandpass {
        order: usize,
        lo_hz: f64,
        hi_hz: f64,
        fs_hz: f64,
    },
    Notch {
        center_hz: f64,
        q: f64,
        fs_hz: f64,
    },
}

impl FilterSpec {
    pub fn design(&self) -> Result<FilterCoeffs> {
        match *self {
            FilterSpec::Bandpass {
                order,
                lo_hz,
                hi_hz,
                fs_hz,
            } => design_bandpass(order, lo_hz, hi_hz, fs_hz),
            FilterSpec::Notch { center_hz, q, fs_hz } => design_notch(center_hz, q, fs_hz),
        }
    }
}

/// Butterworth band-pass of total order `order` (2, 4, 6 or 8), from an
/// analog low-pass prototype of order `order / 2`, low-pass→band-pass
/// transform and bilinear transform with both edges prewarped.
pub fn design_bandpass(order: usize, lo_hz: f64, hi_hz: f64, fs_hz: f64) -> Result<FilterCoeffs> {
    if ![2, 4, 6, 8].contains(&order) {
        return Err(Error::Design(format!("band-pass order {order} not in {{2,4,6,8}}")));
    }
    if !(fs_hz > 0.0 && lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs_hz / 2.0) {
        return Err(Error::Design(format!(
            "band edges must satisfy 0 < lo < hi < fs/2 (lo {lo_hz}, hi {hi_hz}, fs {fs_hz})"
        )));
    }
    let n = order / 2;
    let fs2 = 2.0 * fs_hz;
    let wl = fs2 * (PI * lo_hz / fs_hz).tan();
    let wh = fs2 * (PI * hi_hz / fs_hz).tan();
    let w0 = (wl * wh).sqrt();
    let bw = wh - wl;

    let mut poles = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let proto = C64::from_polar(1.0, theta);
        let half = proto * (bw / 2.0);
        let root = (half * half - C64::new(w0 * w0, 0.0)).sqrt();
        for s in [half + root, half - root] {
            poles.push((C64::new(fs2, 0.0) + s) / (C64::new(fs2, 0.0) - s));
        }
    }

    // Conjugate pairs first (upper half-plane representative), then the
    // real poles two at a time.
    let mut sections = Vec::with_capacity(n);
    let mut reals = Vec::new();
    for p in &poles {
        if p.im.abs() <= 1e-12 * p.norm().max(1.0) {
            reals.push(p.re);
        } else if p.im > 0.0 {
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * p.re, p.norm_sqr()],
            });
        }
    }
    reals.sort_by(f64::total_cmp);
    for pair in reals.chunks(2) {
        let (p1, p2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(p1 + p2), p1 * p2],
        });
    }
    if sections.len() != n {
        return Err(Error::Design("pole pairing failed".into()));
    }

    // Unit gain at the digital image of the analog centre frequency.
    let centre_hz = fs_hz / PI * (w0 / fs2).atan();
    let mut coeffs = FilterCoeffs { sections, gain: 1.0 };
    let at_centre = coeffs.response(centre_hz, fs_hz).norm();
    if !(at_centre > 0.0 && at_centre.is_finite()) {
        return Err(Error::Design("degenerate band-pass response".into()));
    }
    coeffs.gain = 1.0 / at_centre;
    coeffs.check_stable()
}

/// Second-order IIR notch (`q` = centre / −3 dB bandwidth).
pub fn design_notch(center_hz: f64, q: f64, fs_hz: f64) -> Result<FilterCoeffs> {
    if !(fs_hz > 0.0 && center_hz > 0.0 && center_hz < fs_hz / 2.0) {
        return Err(Error::Design(format!(
            "notch centre {center_hz} Hz must lie in (0, fs/2)"
        )));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::Design(format!("notch q {q} must be positive")));
    }
    let w0 = 2.0 * PI * center_hz / fs_hz;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let c = -2.0 * w0.cos() / a0;
    FilterCoeffs {
        sections: vec![Biquad {
            b: [1.0 / a0, c, 1.0 / a0],
            a: [1.0, c, (1.0 - alpha) / a0],
        }],
        gain: 1.0,
    }
    .check_stable()
}

/// Zero-phase filtering of every channel.
pub fn apply_zero_phase(coeffs: &FilterCoeffs, epoch: &EegEpoch) -> Result<EegEpoch> {
    if epoch.is_empty() {
        return Err(Error::invalid("cannot filter an empty epoch"));
    }
    let samples = epoch.samples().iter().map(|ch| coeffs.filtfilt(ch)).collect();
    Ok(epoch.with_samples(samples))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "snake_case")]
pub enum GateOutcome {
    Clean,
    Contaminated { offending: Vec<String> },
}

impl GateOutcome {
    pub fn is_clean(&self) -> bool {
        matches!(self, GateOutcome::Clean)
    }
}

fn peak_to_peak(x: &[f64]) -> f64 {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if x.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Flags the epoch when any frontal channel's peak-to-peak amplitude exceeds
/// `threshold_uv`. Only channels the montage marks frontal can trigger it;
/// epoch channels absent from the montage are ignored.
pub fn gate_artifacts(epoch: &EegEpoch, montage: &ChannelModel, threshold_uv: f64) -> GateOutcome {
    let offending: Vec<String> = epoch
        .channel_names()
        .iter()
        .enumerate()
        .filter(|(_, name)| {
            montage
                .channels()
                .iter()
                .any(|c| &c.name == *name && c.region == Region::Frontal)
        })
        .filter(|(i, _)| peak_to_peak(epoch.channel(*i)) > threshold_uv)
        .map(|(_, name)| name.clone())
        .collect();
    if offending.is_empty() {
        GateOutcome::Clean
    } else {
        GateOutcome::Contaminated { offending }
    }
}

/// Preprocessing settings shared by the session and the CLI config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub bandpass_order: usize,
    pub bandpass_lo_hz: f64,
    pub bandpass_hi_hz: f64,
    /// `None` disables the mains notch.
    pub notch_hz: Option<f64>,
    pub notch_q: f64,
    pub gate_threshold_uv: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            bandpass_order: 4,
            bandpass_lo_hz: 6.0,
            bandpass_hi_hz: 60.0,
            notch_hz: Some(50.0),
            notch_q: 30.0,
            gate_threshold_uv: 100.0,
        }
    }
}

/// Designed filters for one sampling rate.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    bandpass: FilterCoeffs,
    notch: Option<FilterCoeffs>,
}

impl Preprocessor {
    pub fn new(config: &DspConfig, fs_hz: f64) -> Result<Self> {
        if !(config.gate_threshold_uv > 0.0) {
            return Err(Error::invalid("gate threshold must be positive"));
        }
        let bandpass = design_bandpass(
            config.bandpass_order,
            config.bandpass_lo_hz,
            config.bandpass_hi_hz,
            fs_hz,
        )?;
        let notch = config
            .notch_hz
            .map(|f| design_notch(f, config.notch_q, fs_hz))
            .transpose()?;
        Ok(Self { bandpass, notch })
    }

    pub fn filter(&self, epoch: &EegEpoch) -> Result<EegEpoch> {
        let mut out = apply_zero_phase(&self.bandpass, epoch)?;
        if let Some(notch) = &self.notch {
            out = apply_zero_phase(notch, &out)?;
        }
        Ok(out)
    }
}
