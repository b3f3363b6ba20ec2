//! Session configuration: one TOML file, every section optional.
//!
//! Errors carry the dotted path of the offending field, e.g.
//! `config error at `decoder.n_harmonics`: invalid type ...`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, World};
use crate::codec::{CommandTable, FEEDBACK_BLINK_MAX_HZ, FEEDBACK_BLINK_MIN_HZ};
use crate::dsp::{DspConfig, Preprocessor};
use crate::error::{Error, Result};
use crate::fbcca::FbccaConfig;
use crate::link::{LinkModel, RetryPolicy};
use crate::synth::{required_fs_hz, ChannelModel, NoiseModel, StimulusConfig};

/// Overrides `output.dir`. Science parameters have no environment overrides.
pub const OUT_DIR_ENV: &str = "BCILINK_OUT_DIR";

/// World used when the config names none.
pub const DEFAULT_WORLD: &str = include_str!("../../../worlds/outpost.txt");

pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const REPORT_KV_FILE: &str = "report.kv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSettings {
    pub n_harmonics: usize,
    pub n_subbands: usize,
    pub weight_a: f64,
    pub weight_b: f64,
    pub decision_margin: f64,
    pub subband_order: usize,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        let d = FbccaConfig::new(StimulusConfig::eight_targets(), 250.0);
        Self {
            n_harmonics: d.n_harmonics,
            n_subbands: d.n_subbands,
            weight_a: d.weight_a,
            weight_b: d.weight_b,
            decision_margin: d.decision_margin,
            subband_order: d.subband_order,
        }
    }
}

impl DecoderSettings {
    pub fn to_fbcca(&self, stimulus: &StimulusConfig, fs_hz: f64) -> FbccaConfig {
        FbccaConfig {
            stimulus: stimulus.clone(),
            n_harmonics: self.n_harmonics,
            n_subbands: self.n_subbands,
            weight_a: self.weight_a,
            weight_b: self.weight_b,
            decision_margin: self.decision_margin,
            subband_order: self.subband_order,
            fs_hz,
        }
    }
}

/// Trial order: `indices` (default: every target once) repeated `repeats`
/// times, optionally shuffled with the session seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub repeats: usize,
    pub indices: Option<Vec<usize>>,
    pub shuffle: bool,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            repeats: 10,
            indices: None,
            shuffle: false,
        }
    }
}

impl ScheduleSpec {
    pub fn expand(&self, n_targets: usize, seed: u64) -> Vec<usize> {
        let base: Vec<usize> = self.indices.clone().unwrap_or_else(|| (0..n_targets).collect());
        let mut out: Vec<usize> = (0..self.repeats).flat_map(|_| base.iter().copied()).collect();
        if self.shuffle {
            out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    /// Pause between trials; part of the selection time used for ITR.
    pub inter_trial_gap_s: f64,
    pub feedback_blink_hz: f64,
    pub feedback_duration_s: f64,
    /// Simulated duration of one agent tick.
    pub tick_ms: u64,
    /// Agent ticks allowed for a command to resolve.
    pub max_ticks_per_trial: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            inter_trial_gap_s: 0.5,
            feedback_blink_hz: 2.0,
            feedback_duration_s: 1.0,
            tick_ms: 100,
            max_ticks_per_trial: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl OutputPaths {
    pub fn transcript(&self) -> PathBuf {
        self.dir.join(TRANSCRIPT_FILE)
    }

    pub fn report_table(&self) -> PathBuf {
        self.dir.join(REPORT_TABLE_FILE)
    }

    pub fn report_kv(&self) -> PathBuf {
        self.dir.join(REPORT_KV_FILE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    pub montage: String,
    pub epoch_s: f64,
    pub fs_hz: f64,
    /// Probability that a trial's epoch carries an eye blink.
    pub blink_prob: f64,
    pub blink_amplitude_uv: f64,
    /// World file; relative paths resolve against the config file's directory.
    pub world: Option<PathBuf>,
    pub command_table: CommandTable,
    pub stimulus: StimulusConfig,
    pub noise: NoiseModel,
    pub dsp: DspConfig,
    pub decoder: DecoderSettings,
    /// Command direction.
    pub link: LinkModel,
    /// Acknowledgment direction.
    pub ack_link: LinkModel,
    pub retry: RetryPolicy,
    pub agent: AgentConfig,
    pub schedule: ScheduleSpec,
    pub timing: Timing,
    pub output: OutputPaths,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            montage: "default".into(),
            epoch_s: 2.0,
            fs_hz: 250.0,
            blink_prob: 0.0,
            blink_amplitude_uv: 150.0,
            world: None,
            command_table: CommandTable::default(),
            stimulus: StimulusConfig::eight_targets(),
            noise: NoiseModel::default(),
            dsp: DspConfig::default(),
            decoder: DecoderSettings::default(),
            link: LinkModel::default(),
            ack_link: LinkModel::default(),
            retry: RetryPolicy::default(),
            agent: AgentConfig::default(),
            schedule: ScheduleSpec::default(),
            timing: Timing::default(),
            output: OutputPaths::default(),
        }
    }
}

fn field_error<E: std::fmt::Display>(path: String, err: E) -> Error {
    let field = if path.is_empty() || path == "." { "<root>".to_string() } else { path };
    let message = err.to_string().replace('\n', " ").trim().to_string();
    Error::config(field, message)
}

impl SessionConfig {
    /// Parses and validates. `base_dir` anchors a relative `world` path.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut cfg: SessionConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            field_error(path, inner.message())
        })?;
        if let (Some(world), Some(base)) = (&cfg.world, base_dir) {
            if world.is_relative() {
                cfg.world = Some(base.join(world));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies [`OUT_DIR_ENV`] when set.
    pub fn apply_env_overrides(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output.dir = PathBuf::from(dir);
        }
    }

    pub fn n_targets(&self) -> usize {
        self.stimulus.count()
    }

    pub fn montage_model(&self) -> Result<ChannelModel> {
        ChannelModel::by_name(&self.montage)
    }

    pub fn fbcca(&self) -> FbccaConfig {
        self.decoder.to_fbcca(&self.stimulus, self.fs_hz)
    }

    pub fn load_world(&self) -> Result<World> {
        match &self.world {
            Some(path) => World::load(path),
            None => World::parse(DEFAULT_WORLD),
        }
    }

    pub fn world_text(&self) -> Result<String> {
        match &self.world {
            Some(path) => Ok(std::fs::read_to_string(path)?),
            None => Ok(DEFAULT_WORLD.to_string()),
        }
    }

    /// Selection time for ITR: epoch plus inter-trial gap.
    pub fn selection_time_s(&self) -> f64 {
        self.epoch_s + self.timing.inter_trial_gap_s
    }

    pub fn schedule(&self) -> Vec<usize> {
        self.schedule.expand(self.n_targets(), self.seed)
    }

    /// Cross-module consistency checks; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        fn wrap(field: &'static str) -> impl Fn(Error) -> Error {
            move |e| field_error(field.to_string(), strip_kind(e))
        }
        self.montage_model().map_err(wrap("montage"))?;
        if !(self.fs_hz > 0.0 && self.fs_hz.is_finite()) {
            return Err(Error::config("fs_hz", "must be positive"));
        }
        let need = required_fs_hz(self.stimulus.max_hz());
        if self.fs_hz < need {
            return Err(Error::config(
                "fs_hz",
                format!("{} Hz cannot carry the 4th harmonic of {} Hz; need {need} Hz", self.fs_hz, self.stimulus.max_hz()),
            ));
        }
        if !(0.25..=60.0).contains(&self.epoch_s) {
            return Err(Error::config("epoch_s", format!("{} s outside [0.25, 60] s", self.epoch_s)));
        }
        self.noise.validate().map_err(wrap("noise"))?;
        if self.command_table.len() != self.n_targets() {
            return Err(Error::config(
                "command_table",
                format!(
                    "{} entries for {} stimulus targets",
                    self.command_table.len(),
                    self.n_targets()
                ),
            ));
        }
        self.fbcca().validate().map_err(wrap("decoder"))?;
        Preprocessor::new(&self.dsp, self.fs_hz).map_err(wrap("dsp"))?;
        self.link.validate().map_err(wrap("link"))?;
        self.ack_link.validate().map_err(wrap("ack_link"))?;
        self.agent.validate().map_err(wrap("agent"))?;
        if self.schedule.repeats == 0 {
            return Err(Error::config("schedule.repeats", "must be at least 1"));
        }
        if let Some(indices) = &self.schedule.indices {
            if indices.is_empty() {
                return Err(Error::config("schedule.indices", "is empty"));
            }
            if let Some(bad) = indices.iter().find(|&&i| i >= self.n_targets()) {
                return Err(Error::config(
                    "schedule.indices",
                    format!("index {bad} outside 0..{}", self.n_targets()),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.blink_prob) {
            return Err(Error::config("blink_prob", "must lie in [0, 1]"));
        }
        if !(self.blink_amplitude_uv > 0.0) {
            return Err(Error::config("blink_amplitude_uv", "must be positive"));
        }
        let t = &self.timing;
        if !(FEEDBACK_BLINK_MIN_HZ..=FEEDBACK_BLINK_MAX_HZ).contains(&t.feedback_blink_hz) {
            return Err(Error::config(
                "timing.feedback_blink_hz",
                format!("must lie in [{FEEDBACK_BLINK_MIN_HZ}, {FEEDBACK_BLINK_MAX_HZ}] Hz"),
            ));
        }
        if !(t.feedback_duration_s > 0.0) {
            return Err(Error::config("timing.feedback_duration_s", "must be positive"));
        }
        if !(t.inter_trial_gap_s >= 0.0) {
            return Err(Error::config("timing.inter_trial_gap_s", "must be non-negative"));
        }
        if t.tick_ms == 0 {
            return Err(Error::config("timing.tick_ms", "must be at least 1"));
        }
        if t.max_ticks_per_trial == 0 {
            return Err(Error::config("timing.max_ticks_per_trial", "must be at least 1"));
        }
        self.load_world().map_err(wrap("world"))?;
        Ok(())
    }
}

fn strip_kind(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) | Error::Parse(m) | Error::Design(m) | Error::DegenerateInput(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_is_default() {
        let c = SessionConfig::from_toml_str("", None).unwrap();
        assert_eq!(c, SessionConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let c = SessionConfig::default();
        let back = SessionConfig::from_toml_str(&c.to_toml_string(), None).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn short_command_table_names_field() {
        let text = r#"command_table = ["ReconArea","Halt","ReturnToBase","MoveNorth","MoveSouth","MoveEast","MoveWest"]"#;
        let e = SessionConfig::from_toml_str(text, None).unwrap_err();
        assert_eq!(field_of(e), "command_table");
    }

    #[test]
    fn type_errors_carry_paths() {
        let e = SessionConfig::from_toml_str("[decoder]\nn_harmonics = \"four\"", None).unwrap_err();
        assert_eq!(field_of(e), "decoder.n_harmonics");
        let e = SessionConfig::from_toml_str("[stimulus]\nfrequencies_hz = [3.0]", None).unwrap_err();
        assert_eq!(field_of(e), "stimulus");
        let e = SessionConfig::from_toml_str("bogus = 1", None).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn semantic_errors_carry_paths() {
        let cases = [
            ("fs_hz = 100.0", "fs_hz"),
            ("epoch_s = 0.1", "epoch_s"),
            ("montage = \"frontal\"", "montage"),
            ("[link]\ndrop_prob = 1.5", "link"),
            ("[decoder]\nn_subbands = 9", "decoder"),
            ("[timing]\nfeedback_blink_hz = 10.0", "timing.feedback_blink_hz"),
            ("[schedule]\nindices = [8]", "schedule.indices"),
            ("world = \"/nonexistent/world.txt\"", "world"),
        ];
        for (text, field) in cases {
            let e = SessionConfig::from_toml_str(text, None).unwrap_err();
            assert_eq!(field_of(e), field, "{text}");
        }
    }

    #[test]
    fn schedule_expansion() {
        let s = ScheduleSpec {
            repeats: 2,
            indices: Some(vec![3, 1]),
            shuffle: false,
        };
        assert_eq!(s.expand(8, 0), vec![3, 1, 3, 1]);
        let s = ScheduleSpec {
            repeats: 3,
            indices: None,
            shuffle: true,
        };
        let mut v = s.expand(4, 9);
        assert_eq!(v, s.expand(4, 9));
        v.sort();
        assert_eq!(v, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn default_world_parses() {
        let w = SessionConfig::default().load_world().unwrap();
        assert_eq!((w.map.width(), w.map.height()), (16, 16));
    }
}
