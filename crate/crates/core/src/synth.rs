//! Synthetic SSVEP EEG.
//!
//! Epochs are built as an evoked harmonic series at the attended stimulus
//! frequency, scaled per channel by the montage's SSVEP gain, on top of a
//! white + 1/f background and a weak alpha-band rhythm. The evoked amplitude
//! is set analytically from the noise model so that, on the highest-gain
//! channel, evoked harmonic power over background power in a
//! [`SNR_BANDWIDTH_HZ`]-wide band around each harmonic equals `snr_db`.
//!
//! Everything here is a pure function of its arguments: the same inputs and
//! seed always give bit-identical samples.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::harmonic_band_powers;

pub const MIN_STIMULUS_HZ: f64 = 6.0;
pub const MAX_STIMULUS_HZ: f64 = 15.0;
pub const MIN_STIMULUS_SPACING_HZ: f64 = 0.2;
/// Harmonics carried by the evoked response (and needed below Nyquist).
pub const EVOKED_HARMONICS: usize = 4;
pub const DEFAULT_FS_HZ: f64 = 250.0;

/// Flicker frequencies and phases of the stimulus tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStimulus", into = "RawStimulus")]
pub struct StimulusConfig {
    frequencies_hz: Vec<f64>,
    phases_rad: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawStimulus {
    frequencies_hz: Vec<f64>,
    #[serde(default)]
    phases_rad: Option<Vec<f64>>,
}

impl TryFrom<RawStimulus> for StimulusConfig {
    type Error = Error;

    fn try_from(raw: RawStimulus) -> Result<Self> {
        let phases = raw
            .phases_rad
            .unwrap_or_else(|| default_phases(raw.frequencies_hz.len()));
        StimulusConfig::new(raw.frequencies_hz, phases)
    }
}

impl From<StimulusConfig> for RawStimulus {
    fn from(s: StimulusConfig) -> Self {
        RawStimulus {
            frequencies_hz: s.frequencies_hz,
            phases_rad: Some(s.phases_rad),
        }
    }
}

fn default_phases(n: usize) -> Vec<f64> {
    (0..n).map(|k| (0.35 * PI * k as f64) % (2.0 * PI)).collect()
}

impl StimulusConfig {
    pub fn new(frequencies_hz: Vec<f64>, phases_rad: Vec<f64>) -> Result<Self> {
        if frequencies_hz.is_empty() {
            return Err(Error::invalid("stimulus set is empty"));
        }
        if phases_rad.len() != frequencies_hz.len() {
            return Err(Error::invalid(format!(
                "{} phases for {} frequencies",
                phases_rad.len(),
                frequencies_hz.len()
            )));
        }
        for &f in &frequencies_hz {
            if !(MIN_STIMULUS_HZ..=MAX_STIMULUS_HZ).contains(&f) {
                return Err(Error::invalid(format!(
                    "stimulus {f} Hz outside [{MIN_STIMULUS_HZ}, {MAX_STIMULUS_HZ}] Hz"
                )));
            }
        }
        for pair in frequencies_hz.windows(2) {
            if pair[1] - pair[0] < MIN_STIMULUS_SPACING_HZ - 1e-12 {
                return Err(Error::invalid(format!(
                    "stimuli must be increasing and {MIN_STIMULUS_SPACING_HZ} Hz apart ({} then {})",
                    pair[0], pair[1]
                )));
            }
        }
        if phases_rad.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite stimulus phase"));
        }
        Ok(Self {
            frequencies_hz,
            phases_rad,
        })
    }

    /// Evenly spaced frequencies with the default phase progression.
    pub fn with_frequencies(frequencies_hz: Vec<f64>) -> Result<Self> {
        let phases = default_phases(frequencies_hz.len());
        Self::new(frequencies_hz, phases)
    }

    /// Eight targets, 8–15 Hz in 1 Hz steps.
    pub fn eight_targets() -> Self {
        Self::with_frequencies((8..=15).map(f64::from).collect()).expect("valid default")
    }

    pub fn frequencies_hz(&self) -> &[f64] {
        &self.frequencies_hz
    }

    pub fn phases_rad(&self) -> &[f64] {
        &self.phases_rad
    }

    pub fn count(&self) -> usize {
        self.frequencies_hz.len()
    }

    pub fn min_hz(&self) -> f64 {
        self.frequencies_hz[0]
    }

    pub fn max_hz(&self) -> f64 {
        *self.frequencies_hz.last().expect("non-empty")
    }
}

impl Default for StimulusConfig {
    fn default() -> Self {
        Self::eight_targets()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Occipital,
    Parietal,
    Frontal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub region: Region,
    pub ssvep_gain: f64,
    pub blink_gain: f64,
}

impl Channel {
    pub fn new(name: &str, region: Region, ssvep_gain: f64, blink_gain: f64) -> Self {
        Self {
            name: name.to_string(),
            region,
            ssvep_gain,
            blink_gain,
        }
    }
}

/// Electrode montage with per-channel evoked and blink coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    channels: Vec<Channel>,
    reference_name: String,
    ground_name: String,
}

impl ChannelModel {
    pub const REFERENCE: &'static str = "CPz";
    pub const GROUND: &'static str = "AFz";

    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("montage has no channels"));
        }
        for ch in &channels {
            for (what, g) in [("ssvep_gain", ch.ssvep_gain), ("blink_gain", ch.blink_gain)] {
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::invalid(format!("{} {what} {g} outside [0,1]", ch.name)));
                }
            }
        }
        let max_of = |region: Region, f: fn(&Channel) -> f64| {
            channels
                .iter()
                .filter(|c| c.region == region)
                .map(f)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let frontal_ssvep = max_of(Region::Frontal, |c| c.ssvep_gain);
        let occipital_blink = max_of(Region::Occipital, |c| c.blink_gain);
        for ch in &channels {
            if ch.region == Region::Occipital && ch.ssvep_gain < frontal_ssvep {
                return Err(Error::invalid(format!(
                    "occipital {} ssvep_gain below a frontal channel's",
                    ch.name
                )));
            }
            if ch.region == Region::Frontal && ch.blink_gain < occipital_blink {
                return Err(Error::invalid(format!(
                    "frontal {} blink_gain below an occipital channel's",
                    ch.name
                )));
            }
        }
        Ok(Self {
            channels,
            reference_name: Self::REFERENCE.to_string(),
            ground_name: Self::GROUND.to_string(),
        })
    }

    /// Pz, PO3, POz, PO4, O1, Oz, O2 for SSVEP pickup plus Fp1, Fp2 for blinks.
    pub fn default_montage() -> Self {
        use Region::*;
        Self::new(vec![
            Channel::new("Pz", Parietal, 0.55, 0.10),
            Channel::new("PO3", Occipital, 0.80, 0.05),
            Channel::new("POz", Occipital, 0.85, 0.05),
            Channel::new("PO4", Occipital, 0.80, 0.05),
            Channel::new("O1", Occipital, 0.90, 0.03),
            Channel::new("Oz", Occipital, 1.00, 0.03),
            Channel::new("O2", Occipital, 0.90, 0.03),
            Channel::new("Fp1", Frontal, 0.05, 1.00),
            Channel::new("Fp2", Frontal, 0.05, 1.00),
        ])
        .expect("valid default montage")
    }

    /// O1, Oz, O2 plus Fp1, Fp2: the smallest montage that still gates blinks.
    pub fn occipital_montage() -> Self {
        use Region::*;
        Self::new(vec![
            Channel::new("O1", Occipital, 0.90, 0.03),
            Channel::new("Oz", Occipital, 1.00, 0.03),
            Channel::new("O2", Occipital, 0.90, 0.03),
            Channel::new("Fp1", Frontal, 0.05, 1.00),
            Channel::new("Fp2", Frontal, 0.05, 1.00),
        ])
        .expect("valid occipital montage")
    }

    pub const MONTAGE_NAMES: [&'static str; 2] = ["default", "occipital"];

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_montage()),
            "occipital" => Ok(Self::occipital_montage()),
            other => Err(Error::invalid(format!(
                "unknown montage `{other}`; known: {}",
                Self::MONTAGE_NAMES.join(", ")
            ))),
        }
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn reference_name(&self) -> &str {
        &self.reference_name
    }

    pub fn ground_name(&self) -> &str {
        &self.ground_name
    }

    /// Channels used for decoding (everything outside the frontal region).
    pub fn decode_indices(&self) -> Vec<usize> {
        self.region_indices(|r| r != Region::Frontal)
    }

    pub fn frontal_indices(&self) -> Vec<usize> {
        self.region_indices(|r| r == Region::Frontal)
    }

    fn region_indices(&self, pred: impl Fn(Region) -> bool) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| pred(c.region))
            .map(|(i, _)| i)
            .collect()
    }

    /// Index of the channel with the largest SSVEP gain (first on ties).
    pub fn strongest_ssvep_channel(&self) -> usize {
        let mut best = 0;
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.ssvep_gain > self.channels[best].ssvep_gain {
                best = i;
            }
        }
        best
    }

    /// Copy of the montage with one channel's SSVEP gain replaced.
    pub fn with_ssvep_gain(&self, index: usize, gain: f64) -> Result<Self> {
        let mut channels = self.channels.clone();
        let ch = channels
            .get_mut(index)
            .ok_or_else(|| Error::invalid(format!("channel {index} out of range")))?;
        ch.ssvep_gain = gain;
        Self::new(channels)
    }
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self::default_montage()
    }
}

/// Background activity and evoked-response shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub snr_db: f64,
    pub pink_fraction: f64,
    /// Amplitude of the alpha-band background rhythm (µV).
    pub alpha_amp: f64,
    /// Amplitude ratio between successive evoked harmonics.
    pub harmonic_decay: f64,
    /// Broadband RMS of the white + pink background on every channel (µV).
    pub noise_rms_uv: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            snr_db: 10.0,
            pink_fraction: 0.5,
            alpha_amp: 0.5,
            harmonic_decay: 0.5,
            noise_rms_uv: 8.0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pink_fraction) {
            return Err(Error::invalid("pink_fraction must lie in [0,1]"));
        }
        if !(self.harmonic_decay > 0.0 && self.harmonic_decay <= 1.0) {
            return Err(Error::invalid("harmonic_decay must lie in (0,1]"));
        }
        if !(self.noise_rms_uv >= 0.0) || !(self.alpha_amp >= 0.0) {
            return Err(Error::invalid("noise amplitudes must be non-negative"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::invalid("snr_db must be finite"));
        }
        Ok(())
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        Self {
            snr_db,
            ..self.clone()
        }
    }
}

/// Channels × samples block of scalp potentials (µV).
#[derive(Debug, Clone, PartialEq)]
pub struct EegEpoch {
    samples: Vec<Vec<f64>>,
    fs_hz: f64,
    channel_names: Vec<String>,
    pub attended_index: Option<usize>,
    pub seed: u64,
}

impl EegEpoch {
    pub fn new(samples: Vec<Vec<f64>>, fs_hz: f64, channel_names: Vec<String>) -> Result<Self> {
        if samples.len() != channel_names.len() {
            return Err(Error::invalid(format!(
                "{} rows for {} channel names",
                samples.len(),
                channel_names.len()
            )));
        }
        let n = samples.first().map_or(0, Vec::len);
        if samples.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("ragged epoch rows"));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite sample"));
        }
        if !(fs_hz > 0.0) {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        Ok(Self {
            samples,
            fs_hz,
            channel_names,
            attended_index: None,
            seed: 0,
        })
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.samples[index]
    }

    pub fn fs_hz(&self) -> f64 {
        self.fs_hz
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn n_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs_hz
    }

    pub fn is_empty(&self) -> bool {
        self.n_channels() == 0 || self.n_samples() == 0
    }

    /// Same metadata, new sample matrix of identical shape.
    pub(crate) fn with_samples(&self, samples: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(samples.len(), self.samples.len());
        Self {
            samples,
            fs_hz: self.fs_hz,
            channel_names: self.channel_names.clone(),
            attended_index: self.attended_index,
            seed: self.seed,
        }
    }

    pub fn select_channels(&self, indices: &[usize]) -> Result<Self> {
        let mut samples = Vec::with_capacity(indices.len());
        let mut names = Vec::with_capacity(indices.len());
        for &i in indices {
            let row = self
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("channel {i} out of range")))?;
            samples.push(row.clone());
            names.push(self.channel_names[i].clone());
        }
        Ok(Self {
            samples,
            fs_hz: self.fs_hz,
            channel_names: names,
            attended_index: self.attended_index,
            seed: self.seed,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.with_samples(
            self.samples
                .iter()
                .map(|r| r.iter().map(|v| v * factor).collect())
                .collect(),
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let attended = self
            .attended_index
            .map_or_else(|| "none".to_string(), |i| i.to_string());
        writeln!(out, "#meta attended_index={attended} seed={}", self.seed)?;
        writeln!(out, "fs_hz,{}", self.channel_names.join(","))?;
        let fs = format_sig6(self.fs_hz);
        let mut line = String::new();
        for t in 0..self.n_samples() {
            line.clear();
            line.push_str(&fs);
            for row in &self.samples {
                line.push(',');
                line.push_str(&format_sig6(row[t]));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut attended_index = None;
        let mut seed = 0u64;
        let mut names: Option<Vec<String>> = None;
        let mut fs_hz = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("#meta") {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("attended_index", "none")) => attended_index = None,
                        Some(("attended_index", v)) => {
                            attended_index = Some(v.parse().map_err(|_| {
                                Error::Parse(format!("line {}: bad attended_index", lineno + 1))
                            })?)
                        }
                        Some(("seed", v)) => {
                            seed = v.parse().map_err(|_| {
                                Error::Parse(format!("line {}: bad seed", lineno + 1))
                            })?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            match &names {
                None => {
                    if fields.first() != Some(&"fs_hz") {
                        return Err(Error::Parse("header must start with fs_hz".into()));
                    }
                    let n: Vec<String> = fields[1..].iter().map(|s| s.to_string()).collect();
                    rows = vec![Vec::new(); n.len()];
                    names = Some(n);
                }
                Some(n) => {
                    if fields.len() != n.len() + 1 {
                        return Err(Error::Parse(format!(
                            "line {}: expected {} fields, found {}",
                            lineno + 1,
                            n.len() + 1,
                            fields.len()
                        )));
                    }
                    let parse = |s: &str| {
                        s.trim().parse::<f64>().map_err(|_| {
                            Error::Parse(format!("line {}: bad number `{s}`", lineno + 1))
                        })
                    };
                    let fs = parse(fields[0])?;
                    if fs_hz.is_none() {
                        fs_hz = Some(fs);
                    }
                    for (row, f) in rows.iter_mut().zip(&fields[1..]) {
                        row.push(parse(f)?);
                    }
                }
            }
        }
        let names = names.ok_or_else(|| Error::Parse("missing header".into()))?;
        let fs_hz = fs_hz.ok_or_else(|| Error::Parse("no sample rows".into()))?;
        let mut epoch = EegEpoch::new(rows, fs_hz, names)?;
        epoch.attended_index = attended_index;
        epoch.seed = seed;
        Ok(epoch)
    }
}

/// `%.6g`-style formatting: six significant digits, trailing zeros trimmed.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".into() } else { format!("{v}") };
    }
    let exp = v.abs().log10().floor() as i32;
    let mut s = String::new();
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        write!(s, "{:.*}", decimals, v).unwrap();
        if s.contains('.') {
            while s.ends_with('0') {
                s.pop();
            }
            if s.ends_with('.') {
                s.pop();
            }
        }
    } else {
        write!(s, "{:.5e}", v).unwrap();
    }
    s
}

/// Pole/zero pairs of a three-section pinking filter (≈ −10 dB/decade).
const PINK_POLES: [f64; 3] = [0.995_727_54, 0.947_906_49, 0.535_675_05];
const PINK_ZEROS: [f64; 3] = [0.984_436_04, 0.833_923_34, 0.075_683_59];

fn pink_from_white(white: &[f64]) -> Vec<f64> {
    let mut x = white.to_vec();
    for (p, z) in PINK_POLES.iter().zip(PINK_ZEROS) {
        let (mut prev_in, mut prev_out) = (0.0, 0.0);
        for v in x.iter_mut() {
            let out = *v - z * prev_in + p * prev_out;
            prev_in = *v;
            prev_out = out;
            *v = out;
        }
    }
    x
}

/// Samples run through the pinking filter and discarded before each channel.
const PINK_WARMUP: usize = 1000;

/// Output variance of the pinking filter for unit-variance white input.
fn pink_power_gain() -> f64 {
    static GAIN: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *GAIN.get_or_init(|| {
        let mut impulse = vec![0.0; 40_000];
        impulse[0] = 1.0;
        pink_from_white(&impulse).iter().map(|h| h * h).sum()
    })
}

fn pink_response_sq(freq_hz: f64, fs_hz: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / fs_hz;
    let (c, s) = (w.cos(), w.sin());
    let mag_sq = |r: f64| (1.0 - r * c).powi(2) + (r * s).powi(2);
    PINK_POLES
        .iter()
        .zip(PINK_ZEROS)
        .map(|(&p, z)| mag_sq(z) / mag_sq(p))
        .product()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Lowest sampling rate that keeps the 4th harmonic of `max_hz` below Nyquist.
pub fn required_fs_hz(max_hz: f64) -> f64 {
    2.0 * EVOKED_HARMONICS as f64 * max_hz
}

/// Evoked harmonic series for one stimulus at unit fundamental amplitude.
pub fn evoked_template(freq_hz: f64, phase_rad: f64, decay: f64, fs_hz: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / fs_hz;
            (1..=EVOKED_HARMONICS)
                .map(|m| {
                    let m = m as f64;
                    decay.powf(m - 1.0) * (2.0 * PI * m * freq_hz * t + m * phase_rad).sin()
                })
                .sum()
        })
        .collect()
}

pub fn generate_epoch(
    stimulus: &StimulusConfig,
    attended_index: usize,
    channels: &ChannelModel,
    noise: &NoiseModel,
    duration_s: f64,
    fs_hz: f64,
    seed: u64,
) -> Result<EegEpoch> {
    if attended_index >= stimulus.count() {
        return Err(Error::invalid(format!(
            "attended index {attended_index} out of range for {} targets",
            stimulus.count()
        )));
    }
    if !(duration_s > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    let required = required_fs_hz(stimulus.max_hz());
    if !(fs_hz >= required) {
        return Err(Error::Aliasing {
            fs_hz,
            required_hz: required,
        });
    }
    noise.validate()?;
    let n = (duration_s * fs_hz).round() as usize;
    if n == 0 {
        return Err(Error::invalid("epoch would contain no samples"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Common alpha rhythm: three drifting components in 8.5–11.5 Hz.
    let alpha: Vec<f64> = {
        let comps: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(8.5..11.5), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let per = noise.alpha_amp / (comps.len() as f64).sqrt();
        (0..n)
            .map(|i| {
                let t = i as f64 / fs_hz;
                comps
                    .iter()
                    .map(|&(f, ph)| per * (2.0 * PI * f * t + ph).sin())
                    .sum()
            })
            .collect()
    };

    let white_w = (1.0 - noise.pink_fraction).sqrt();
    let pink_w = noise.pink_fraction.sqrt() / pink_power_gain().sqrt();
    let background: Vec<Vec<f64>> = (0..channels.len())
        .map(|_| {
            let white = normal_vec(&mut rng, n);
            let pink = pink_from_white(&normal_vec(&mut rng, n + PINK_WARMUP));
            white
                .iter()
                .zip(&pink[PINK_WARMUP..])
                .zip(&alpha)
                .map(|((w, p), a)| noise.noise_rms_uv * (white_w * w + pink_w * p) + a)
                .collect()
        })
        .collect();

    let freq = stimulus.frequencies_hz()[attended_index];
    let phase = stimulus.phases_rad()[attended_index];
    let template = evoked_template(freq, phase, noise.harmonic_decay, fs_hz, n);

    let peak_gain = channels.channels()[channels.strongest_ssvep_channel()].ssvep_gain;
    let amplitude = evoked_amplitude(noise, freq, fs_hz) / peak_gain.max(f64::MIN_POSITIVE);

    let samples = background
        .into_iter()
        .zip(channels.channels())
        .map(|(bg, ch)| {
            let g = ch.ssvep_gain * amplitude;
            bg.iter().zip(&template).map(|(b, e)| b + g * e).collect()
        })
        .collect();

    let mut epoch = EegEpoch::new(samples, fs_hz, channels.names())?;
    epoch.attended_index = Some(attended_index);
    epoch.seed = seed;
    Ok(epoch)
}

/// Equivalent noise bandwidth of the 2 s Hann segments used by
/// [`measure_snr`]; the evoked power of each harmonic is compared against the
/// background power in a band this wide around it.
pub const SNR_BANDWIDTH_HZ: f64 = 1.5;

/// One-sided background PSD (µV²/Hz) of the white + pink noise at `freq_hz`.
/// The alpha rhythm is treated as interference and left out.
pub fn background_psd(noise: &NoiseModel, freq_hz: f64, fs_hz: f64) -> f64 {
    let pink = pink_response_sq(freq_hz, fs_hz) / pink_power_gain();
    2.0 / fs_hz
        * noise.noise_rms_uv.powi(2)
        * ((1.0 - noise.pink_fraction) + noise.pink_fraction * pink)
}

/// Fundamental amplitude that puts the evoked harmonics `snr_db` above the
/// background on a channel with unit SSVEP gain.
///
/// With `n` analysable harmonics of powers `Pₘ` and background PSD `N(f)`:
/// `Σ Pₘ / (n · B) = 10^(snr/10) · mean N(m·f)`, `B` = [`SNR_BANDWIDTH_HZ`].
pub fn evoked_amplitude(noise: &NoiseModel, freq_hz: f64, fs_hz: f64) -> f64 {
    let n_harm = analysable_harmonics(freq_hz, fs_hz).max(1);
    let mean_psd = (1..=n_harm)
        .map(|m| background_psd(noise, m as f64 * freq_hz, fs_hz))
        .sum::<f64>()
        / n_harm as f64;
    let shape: f64 = (0..n_harm)
        .map(|m| noise.harmonic_decay.powi(2 * m as i32) / 2.0)
        .sum();
    let target = 10f64.powf(noise.snr_db / 10.0) * mean_psd * n_harm as f64 * SNR_BANDWIDTH_HZ;
    (target / shape).sqrt()
}

/// Harmonics (up to the evoked count) whose analysis bands fit below Nyquist.
pub(crate) fn analysable_harmonics(freq: f64, fs_hz: f64) -> usize {
    (1..=EVOKED_HARMONICS)
        .take_while(|&m| freq * m as f64 + crate::spectrum::FLANK_OUTER_HZ < fs_hz / 2.0)
        .count()
}

/// Narrowband SNR of one channel: harmonic-band power over flanking-band power.
pub fn measure_snr_channel(
    signal: &[f64],
    fs_hz: f64,
    target_hz: f64,
    n_harmonics: usize,
) -> Result<f64> {
    if (signal.len() as f64) < fs_hz.round() {
        return Err(Error::invalid("epoch shorter than 1 s"));
    }
    let p = harmonic_band_powers(signal, fs_hz, target_hz, n_harmonics)?;
    if p.flank <= 0.0 {
        return Ok(if p.band > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(p.ratio_db())
}

/// Narrowband SNR of channel `channel` of an epoch.
pub fn measure_snr(
    epoch: &EegEpoch,
    channel: usize,
    target_hz: f64,
    n_harmonics: usize,
) -> Result<f64> {
    if channel >= epoch.n_channels() {
        return Err(Error::invalid(format!("channel {channel} out of range")));
    }
    measure_snr_channel(epoch.channel(channel), epoch.fs_hz(), target_hz, n_harmonics)
}

pub const BLINK_DURATION_S: f64 = 0.3;

/// Adds a half-cosine blink transient, scaled per channel by `blink_gain`.
pub fn inject_blink(
    epoch: &EegEpoch,
    channels: &ChannelModel,
    onset_s: f64,
    amplitude_uv: f64,
) -> Result<EegEpoch> {
    if !(amplitude_uv > 0.0) {
        return Err(Error::invalid("blink amplitude must be positive"));
    }
    if !(onset_s >= 0.0 && onset_s < epoch.duration_s()) {
        return Err(Error::invalid(format!(
            "blink onset {onset_s} s outside epoch of {} s",
            epoch.duration_s()
        )));
    }
    if channels.len() != epoch.n_channels() {
        return Err(Error::invalid("montage does not match epoch channels"));
    }
    let fs = epoch.fs_hz();
    let samples = epoch
        .samples()
        .iter()
        .zip(channels.channels())
        .map(|(row, ch)| {
            let mut out = row.clone();
            if ch.blink_gain == 0.0 {
                return out;
            }
            for (i, v) in out.iter_mut().enumerate() {
                let dt = i as f64 / fs - onset_s;
                if (0.0..=BLINK_DURATION_S).contains(&dt) {
                    *v += ch.blink_gain * amplitude_uv * (PI * dt / BLINK_DURATION_S).sin();
                }
            }
            out
        })
        .collect();
    Ok(epoch.with_samples(samples))
}
