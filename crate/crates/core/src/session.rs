//! Closed-loop trials, session scoring and replayable transcripts.
//!
//! One trial: generate epoch → (optional blink) → artifact gate on the raw
//! epoch → band-pass + notch on the decode channels → FBCCA → command table →
//! reliable send → agent ticks until the command resolves → execution status
//! → feedback frame. Everything runs on a simulated clock, so a session is a
//! pure function of its config, world and seed.

use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{execution_status, resolution, AgentEvent, AgentState, Heading, Mode, World};
use crate::codec::{
    encode_feedback, feedback_color, map_decision, Color, Command, CommandTable, FeedbackFrame, FeedbackStatus,
};
use crate::config::SessionConfig;
use crate::dsp::{gate_artifacts, Preprocessor};
use crate::error::{Error, Result};
use crate::fbcca::{build_filter_bank, Decision, Decoder};
use crate::link::{MsgType, ReliableLink, SendOutcome};
use crate::synth::{generate_epoch, inject_blink, ChannelModel, StimulusConfig, BLINK_DURATION_S};

pub const TRANSCRIPT_FORMAT: &str = "bcilink-transcript/1";

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `index`: `splitmix64(splitmix64(seed) ^ index)`.
pub fn trial_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

const BLINK_STREAM: u64 = 0xB11C_0000_0000_0001;
const FORWARD_STREAM: u64 = 0x11CC_0000_0000_0002;
const BACKWARD_STREAM: u64 = 0x11CC_0000_0000_0003;

/// Standard BCI information transfer rate in bits/min. Below chance the
/// value is clamped to zero.
pub fn compute_itr(n_targets: usize, accuracy: f64, selection_time_s: f64) -> Result<f64> {
    if n_targets < 2 {
        return Err(Error::invalid("ITR needs at least two targets"));
    }
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::invalid(format!("accuracy {accuracy} outside [0, 1]")));
    }
    if !(selection_time_s > 0.0 && selection_time_s.is_finite()) {
        return Err(Error::invalid("selection time must be positive"));
    }
    let n = n_targets as f64;
    let p = accuracy;
    if p <= 1.0 / n {
        return Ok(0.0);
    }
    let mut bits = n.log2();
    if p > 0.0 {
        bits += p * p.log2();
    }
    if p < 1.0 {
        bits += (1.0 - p) * ((1.0 - p) / (n - 1.0)).log2();
    }
    Ok(bits.max(0.0) * (60.0 / selection_time_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub outcome: SendOutcome,
    /// The agent received the command, even if every ack was lost.
    pub reached_agent: bool,
}

/// Simulated per-stage durations; they sum to `total_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Latencies {
    pub acquisition_ms: u64,
    pub link_ms: u64,
    pub execution_ms: u64,
    pub feedback_ms: u64,
    pub total_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
    pub mode: Mode,
    pub battery_pct: f64,
    pub sightings: usize,
}

impl AgentSnapshot {
    pub fn of(agent: &AgentState) -> Self {
        Self {
            x: agent.pos().0,
            y: agent.pos().1,
            heading: agent.heading(),
            mode: agent.mode(),
            battery_pct: agent.battery_pct(),
            sightings: agent.sightings().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub attended_index: usize,
    pub epoch_seed: u64,
    pub started_at_ms: u64,
    pub blink_onset_s: Option<f64>,
    /// Rejected by the artifact gate; no decoding happened.
    pub gated: bool,
    pub decision: Option<Decision>,
    pub command: Option<Command>,
    pub delivery: Option<Delivery>,
    pub status: FeedbackStatus,
    pub color: Color,
    pub feedback: FeedbackFrame,
    pub events: Vec<AgentEvent>,
    pub agent: AgentSnapshot,
    pub latencies: Latencies,
}

impl TrialRecord {
    /// Predicted target for the confusion matrix; `None` for NotRecognized.
    pub fn predicted(&self) -> Option<usize> {
        match (self.status, &self.decision) {
            (FeedbackStatus::NotRecognized, _) | (_, None) => None,
            (_, Some(d)) => Some(d.predicted_index),
        }
    }

    /// Argmax hit, ignoring the decision margin and the link.
    pub fn decoded_correctly(&self) -> bool {
        self.decision
            .as_ref()
            .is_some_and(|d| d.predicted_index == self.attended_index)
    }
}

/// One live closed loop: decoder, link and agent state.
pub struct Session {
    config: SessionConfig,
    world: World,
    world_text: String,
    montage: ChannelModel,
    decode_channels: Vec<usize>,
    preprocessor: Preprocessor,
    decoder: Decoder,
    agent: AgentState,
    link: ReliableLink,
    clock_ms: u64,
    tick: u64,
    next_trial: usize,
}

impl Session {
    pub fn new(config: &SessionConfig) -> Result<Self> {
        config.validate()?;
        let text = config.world_text()?;
        Self::with_world_text(config, &text)
    }

    /// Uses `world_text` instead of the config's world file (replay path).
    pub fn with_world_text(config: &SessionConfig, world_text: &str) -> Result<Self> {
        let mut checked = config.clone();
        checked.world = None;
        checked.validate()?;
        let world = World::parse(world_text).map_err(|e| Error::config("world", e.to_string()))?;
        let montage = config.montage_model()?;
        let decode_channels = montage.decode_indices();
        let fbcca = config.fbcca();
        let bank = build_filter_bank(&config.stimulus, fbcca.n_subbands)?;
        let n_samples = (config.epoch_s * config.fs_hz).round() as usize;
        let decoder = Decoder::new(&fbcca, &bank, n_samples)?;
        let preprocessor = Preprocessor::new(&config.dsp, config.fs_hz)?;
        let agent = AgentState::new(&world, config.agent.clone())?;
        let mut forward = config.link.clone();
        forward.seed = splitmix64(config.seed ^ forward.seed ^ FORWARD_STREAM);
        let mut backward = config.ack_link.clone();
        backward.seed = splitmix64(config.seed ^ backward.seed ^ BACKWARD_STREAM);
        let link = ReliableLink::new(forward, backward, config.retry)?;
        Ok(Self {
            config: config.clone(),
            world,
            world_text: world_text.to_string(),
            montage,
            decode_channels,
            preprocessor,
            decoder,
            agent,
            link,
            clock_ms: 0,
            tick: 0,
            next_trial: 0,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_text(&self) -> &str {
        &self.world_text
    }

    pub fn agent(&self) -> &AgentState {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut AgentState {
        &mut self.agent
    }

    pub fn trials_run(&self) -> usize {
        self.next_trial
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn header(&self) -> TranscriptHeader {
        TranscriptHeader::new(&self.config, &self.world_text)
    }

    /// Runs one trial with `attended` as the ground-truth target.
    pub fn run_trial(&mut self, attended: usize) -> Result<TrialRecord> {
        let n = self.config.n_targets();
        if attended >= n {
            return Err(Error::invalid(format!(
                "attended index {attended} outside 0..{n}"
            )));
        }
        let index = self.next_trial;
        self.next_trial += 1;
        let cfg = &self.config;
        let seed = trial_seed(cfg.seed, index as u64);
        let started = self.clock_ms;

        let mut epoch = generate_epoch(
            &cfg.stimulus,
            attended,
            &self.montage,
            &cfg.noise,
            cfg.epoch_s,
            cfg.fs_hz,
            seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ BLINK_STREAM));
        let blink_draw: f64 = rng.gen();
        let onset_draw: f64 = rng.gen();
        let blink_onset_s = (blink_draw < cfg.blink_prob)
            .then(|| onset_draw * (epoch.duration_s() - BLINK_DURATION_S).max(0.0));
        if let Some(onset) = blink_onset_s {
            epoch = inject_blink(&epoch, &self.montage, onset, cfg.blink_amplitude_uv)?;
        }

        let gated = !gate_artifacts(&epoch, &self.montage, cfg.dsp.gate_threshold_uv).is_clean();
        let decision = if gated {
            None
        } else {
            let picked = epoch.select_channels(&self.decode_channels)?;
            Some(self.decoder.classify(&self.preprocessor.filter(&picked)?)?)
        };

        let acquisition_ms = (cfg.epoch_s * 1000.0).round() as u64;
        let send_at = started + acquisition_ms;
        let command = match &decision {
            Some(d) => map_decision(d, &cfg.command_table, self.tick)?.command(),
            None => None,
        };

        let mut delivery = None;
        let mut events = Vec::new();
        let mut link_ms = 0;
        let mut execution_ms = 0;
        let mut status = FeedbackStatus::NotRecognized;
        if let Some(c) = command {
            let exchange = self.link.send(MsgType::Command, &c.payload(), send_at)?;
            link_ms = exchange.outcome.at_ms().saturating_sub(send_at);
            if let Some((_, frame)) = &exchange.delivered {
                let received = Command::from_payload(&frame.payload, c.issued_at)?;
                let ticks;
                (events, ticks) = self.execute(&received);
                execution_ms = ticks * self.config.timing.tick_ms;
            }
            if exchange.outcome.is_acked() {
                status = execution_status(&c, &events);
            }
            delivery = Some(Delivery {
                outcome: exchange.outcome,
                reached_agent: exchange.delivered.is_some(),
            });
        }

        let timing = &self.config.timing;
        let feedback = encode_feedback(status, timing.feedback_blink_hz, timing.feedback_duration_s)?;
        let feedback_ms = (timing.feedback_duration_s * 1000.0).round() as u64;
        let total_ms = acquisition_ms + link_ms + execution_ms + feedback_ms;
        let gap_ms = (timing.inter_trial_gap_s * 1000.0).round() as u64;
        self.clock_ms = started + total_ms + gap_ms;

        Ok(TrialRecord {
            trial_index: index,
            attended_index: attended,
            epoch_seed: seed,
            started_at_ms: started,
            blink_onset_s,
            gated,
            decision,
            command,
            delivery,
            status,
            color: feedback_color(status),
            feedback,
            events,
            agent: AgentSnapshot::of(&self.agent),
            latencies: Latencies {
                acquisition_ms,
                link_ms,
                execution_ms,
                feedback_ms,
                total_ms,
            },
        })
    }

    /// Steps the agent until the command resolves or the tick budget runs out.
    fn execute(&mut self, command: &Command) -> (Vec<AgentEvent>, u64) {
        let budget = self.config.timing.max_ticks_per_trial;
        let mut events = self.agent.step(&self.world, Some(command), self.tick);
        self.tick += 1;
        let mut used = 1;
        while used < budget && resolution(command.id, &events).is_none() {
            events.extend(self.agent.step(&self.world, None, self.tick));
            self.tick += 1;
            used += 1;
        }
        (events, used)
    }
}

/// Trial counts by attended (row) and predicted (column) target, with
/// NotRecognized trials in a separate rejection column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub rejected: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts
            .iter()
            .zip(&self.rejected)
            .map(|(row, r)| row.iter().sum::<u64>() + r)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }
}

pub fn confusion_matrix(trials: &[TrialRecord], n_targets: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix {
        counts: vec![vec![0; n_targets]; n_targets],
        rejected: vec![0; n_targets],
    };
    for t in trials {
        if t.attended_index >= n_targets {
            return Err(Error::invalid(format!(
                "trial {} attended {} outside 0..{n_targets}",
                t.trial_index, t.attended_index
            )));
        }
        match t.predicted() {
            Some(p) if p < n_targets => m.counts[t.attended_index][p] += 1,
            Some(p) => return Err(Error::invalid(format!("predicted index {p} outside 0..{n_targets}"))),
            None => m.rejected[t.attended_index] += 1,
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ColorCounts {
    pub red: u64,
    pub yellow: u64,
    pub green: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub seed: u64,
    pub config: SessionConfig,
    pub world: String,
    pub trials: Vec<TrialRecord>,
    pub n_targets: usize,
    /// Confusion-matrix trace over all trials; rejections count as misses.
    pub accuracy: f64,
    /// Argmax hit rate, ignoring the margin and the link.
    pub decode_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub selection_time_s: f64,
    pub itr_bits_per_min: f64,
    /// Mean FBCCA margin over decoded trials.
    pub mean_margin: f64,
    pub gated_trials: u64,
    pub colors: ColorCounts,
}

impl SessionReport {
    pub fn from_trials(config: &SessionConfig, world: &str, trials: Vec<TrialRecord>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::invalid("session has no trials"));
        }
        let n = config.n_targets();
        let confusion = confusion_matrix(&trials, n)?;
        let total = trials.len() as f64;
        let accuracy = confusion.trace() as f64 / total;
        let decode_accuracy = trials.iter().filter(|t| t.decoded_correctly()).count() as f64 / total;
        let margins: Vec<f64> = trials.iter().filter_map(|t| t.decision.as_ref().map(|d| d.margin)).collect();
        let mean_margin = if margins.is_empty() {
            0.0
        } else {
            margins.iter().sum::<f64>() / margins.len() as f64
        };
        let mut colors = ColorCounts::default();
        for t in &trials {
            match t.color {
                Color::Red => colors.red += 1,
                Color::Yellow => colors.yellow += 1,
                Color::Green => colors.green += 1,
            }
        }
        let selection_time_s = config.selection_time_s();
        Ok(Self {
            seed: config.seed,
            config: config.clone(),
            world: world.to_string(),
            n_targets: n,
            accuracy,
            decode_accuracy,
            itr_bits_per_min: compute_itr(n, accuracy, selection_time_s)?,
            selection_time_s,
            mean_margin,
            gated_trials: trials.iter().filter(|t| t.gated).count() as u64,
            colors,
            confusion,
            trials,
        })
    }

    pub fn header(&self) -> TranscriptHeader {
        TranscriptHeader::new(&self.config, &self.world)
    }

    /// Header line plus one JSON line per trial.
    pub fn transcript(&self) -> String {
        let mut out = self.header().to_line();
        out.push('\n');
        for t in &self.trials {
            out.push_str(&trial_line(t));
            out.push('\n');
        }
        out
    }

    /// Sorted `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut lines = vec![
            format!("accuracy={}", self.accuracy),
            format!("decode_accuracy={}", self.decode_accuracy),
            format!("itr_bits_per_min={}", self.itr_bits_per_min),
            format!("selection_time_s={}", self.selection_time_s),
            format!("mean_margin={}", self.mean_margin),
            format!("trials={}", self.trials.len()),
            format!("n_targets={}", self.n_targets),
            format!("seed={}", self.seed),
            format!("gated_trials={}", self.gated_trials),
            format!("color_red={}", self.colors.red),
            format!("color_yellow={}", self.colors.yellow),
            format!("color_green={}", self.colors.green),
            format!("snr_db={}", self.config.noise.snr_db),
            format!("epoch_s={}", self.config.epoch_s),
            format!("decision_margin={}", self.config.decoder.decision_margin),
            format!(
                "config_json={}",
                serde_json::to_string(&self.config).expect("config serializes")
            ),
        ];
        for (i, row) in self.confusion.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            lines.push(format!("confusion_{i}={},{}", cells.join(","), self.confusion.rejected[i]));
        }
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "trials {}  targets {}  seed {}  snr {} dB  epoch {} s\n",
            self.trials.len(),
            self.n_targets,
            self.seed,
            self.config.noise.snr_db,
            self.config.epoch_s
        ));
        s.push_str(&format!(
            "accuracy {:.4}  decode accuracy {:.4}  ITR {:.2} bits/min (T = {} s)\n",
            self.accuracy, self.decode_accuracy, self.itr_bits_per_min, self.selection_time_s
        ));
        s.push_str(&format!(
            "feedback  red {}  yellow {}  green {}  gated {}\n\n",
            self.colors.red, self.colors.yellow, self.colors.green, self.gated_trials
        ));
        s.push_str("attended\\predicted");
        for j in 0..self.n_targets {
            s.push_str(&format!("{j:>6}"));
        }
        s.push_str("   rej  command\n");
        for (i, row) in self.confusion.counts.iter().enumerate() {
            s.push_str(&format!("{i:>18}"));
            for c in row {
                s.push_str(&format!("{c:>6}"));
            }
            let name = self.config.command_table.get(i).map_or("-", |c| c.as_str());
            s.push_str(&format!("{:>6}  {name}\n", self.confusion.rejected[i]));
        }
        s
    }
}

/// Runs the configured schedule.
pub fn run_session(config: &SessionConfig) -> Result<SessionReport> {
    run_schedule(config, &config.schedule())
}

pub fn run_schedule(config: &SessionConfig, schedule: &[usize]) -> Result<SessionReport> {
    if schedule.is_empty() {
        return Err(Error::invalid("schedule is empty"));
    }
    let mut session = Session::new(config)?;
    let trials = schedule
        .iter()
        .map(|&k| session.run_trial(k))
        .collect::<Result<Vec<_>>>()?;
    SessionReport::from_trials(config, session.world_text(), trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub format: String,
    pub seed: u64,
    pub config: SessionConfig,
    /// World text, so replay does not depend on files.
    pub world: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(TranscriptHeader),
    Trial(TrialRecord),
}

impl TranscriptHeader {
    /// Output paths are reset to defaults so the header depends only on the run.
    pub fn new(config: &SessionConfig, world: &str) -> Self {
        let mut config = config.clone();
        config.output = Default::default();
        TranscriptHeader {
            format: TRANSCRIPT_FORMAT.to_string(),
            seed: config.seed,
            config,
            world: world.to_string(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(&Line::Header(self.clone())).expect("header serializes")
    }
}

pub fn trial_line(t: &TrialRecord) -> String {
    serde_json::to_string(&Line::Trial(t.clone())).expect("trial serializes")
}

/// Header and raw trial lines of a transcript.
pub fn read_transcript<R: BufRead>(input: R) -> Result<(TranscriptHeader, Vec<String>)> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse("transcript is empty".into()))??;
    let header = match serde_json::from_str::<Line>(&first) {
        Ok(Line::Header(h)) => h,
        Ok(_) => return Err(Error::Parse("transcript line 1 is not a header".into())),
        Err(e) => return Err(Error::Parse(format!("transcript line 1: {e}"))),
    };
    if header.format != TRANSCRIPT_FORMAT {
        return Err(Error::Parse(format!("unsupported transcript format `{}`", header.format)));
    }
    let trials = lines
        .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
        .collect::<std::io::Result<Vec<_>>>()?;
    Ok((header, trials))
}

pub fn parse_trial_line(line: &str) -> Result<TrialRecord> {
    match serde_json::from_str::<Line>(line) {
        Ok(Line::Trial(t)) => Ok(t),
        Ok(_) => Err(Error::Parse("expected a trial line".into())),
        Err(e) => Err(Error::Parse(e.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub trials: usize,
    /// 1-based transcript line of the first trial that did not reproduce.
    pub first_mismatch: Option<usize>,
}

/// Re-runs every trial from the header's config and compares bytes.
pub fn replay<R: BufRead>(input: R) -> Result<ReplayOutcome> {
    let (header, lines) = read_transcript(input)?;
    let mut session = Session::with_world_text(&header.config, &header.world)?;
    for (i, line) in lines.iter().enumerate() {
        let original = parse_trial_line(line)?;
        let again = session.run_trial(original.attended_index)?;
        if trial_line(&again) != *line {
            return Ok(ReplayOutcome {
                trials: i,
                first_mismatch: Some(i + 2),
            });
        }
    }
    Ok(ReplayOutcome {
        trials: lines.len(),
        first_mismatch: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    EpochS,
    NTargets,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr_db" => Ok(SweepAxis::SnrDb),
            "epoch_s" => Ok(SweepAxis::EpochS),
            "n_targets" => Ok(SweepAxis::NTargets),
            other => Err(Error::invalid(format!(
                "unknown sweep axis `{other}`; expected snr_db, epoch_s or n_targets"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::EpochS => "epoch_s",
            SweepAxis::NTargets => "n_targets",
        }
    }

    /// `base` with this axis set to `value` and a cell-specific seed.
    pub fn apply(self, base: &SessionConfig, value: f64, cell: usize) -> Result<SessionConfig> {
        let mut c = base.clone();
        c.seed = splitmix64(base.seed ^ splitmix64(0x5EED_0000 + cell as u64));
        match self {
            SweepAxis::SnrDb => c.noise.snr_db = value,
            SweepAxis::EpochS => c.epoch_s = value,
            SweepAxis::NTargets => {
                if value.fract() != 0.0 || !(2.0..=8.0).contains(&value) {
                    return Err(Error::config("values", format!("n_targets {value} must be an integer in 2..=8")));
                }
                let n = value as usize;
                c.stimulus = StimulusConfig::with_frequencies((8..8 + n).map(|f| f as f64).collect())?;
                c.command_table = CommandTable::default_for(n)?;
                c.schedule.indices = None;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub trials: usize,
    pub accuracy: f64,
    pub decode_accuracy: f64,
    pub itr_bits_per_min: f64,
    pub mean_margin: f64,
}

impl SweepRow {
    pub const TSV_HEADER: &'static str = "axis\tvalue\tseed\ttrials\taccuracy\tdecode_accuracy\titr_bits_per_min\tmean_margin";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{:.6}",
            self.axis.name(),
            self.value,
            self.seed,
            self.trials,
            self.accuracy,
            self.decode_accuracy,
            self.itr_bits_per_min,
            self.mean_margin
        )
    }
}

/// One independent session per value, run in parallel; rows keep the order of `values`.
pub fn sweep(base: &SessionConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    sweep_with(base, axis, values, |_, _, _| Ok(()))
}

/// [`sweep`], calling `on_cell(index, row, report)` from the worker as each cell finishes.
pub fn sweep_with<F>(base: &SessionConfig, axis: SweepAxis, values: &[f64], on_cell: F) -> Result<Vec<SweepRow>>
where
    F: Fn(usize, &SweepRow, &SessionReport) -> Result<()> + Sync,
{
    if values.is_empty() {
        return Err(Error::config("values", "empty value list"));
    }
    let configs = values
        .iter()
        .enumerate()
        .map(|(i, &v)| axis.apply(base, v, i))
        .collect::<Result<Vec<_>>>()?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .enumerate()
        .map(|(i, (cfg, &value))| {
            let r = run_session(cfg)?;
            let row = SweepRow {
                axis,
                value,
                seed: cfg.seed,
                trials: r.trials.len(),
                accuracy: r.accuracy,
                decode_accuracy: r.decode_accuracy,
                itr_bits_per_min: r.itr_bits_per_min,
                mean_margin: r.mean_margin,
            };
            on_cell(i, &row, &r)?;
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CommandId;

    fn open_config(snr: f64) -> SessionConfig {
        let mut c = SessionConfig::default();
        c.noise.snr_db = snr;
        c
    }

    #[test]
    fn itr_spot_values() {
        assert_eq!(compute_itr(8, 1.0, 1.0).unwrap(), 180.0);
        assert_eq!(compute_itr(2, 0.5, 1.0).unwrap(), 0.0);
        assert_eq!(compute_itr(8, 0.05, 1.0).unwrap(), 0.0);
        assert!(compute_itr(1, 1.0, 1.0).is_err());
        assert!(compute_itr(4, 1.1, 1.0).is_err());
        assert!(compute_itr(4, 0.5, 0.0).is_err());
    }

    #[test]
    fn seeds_are_distinct() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| trial_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(trial_seed(7, 0), trial_seed(8, 0));
    }

    #[test]
    fn confusion_conservation() {
        let cfg = open_config(-5.0);
        let sched: Vec<usize> = (0..16).map(|i| i % 8).collect();
        let r = run_schedule(&cfg, &sched).unwrap();
        assert_eq!(r.confusion.row_sums(), vec![2; 8]);
        assert_eq!(r.accuracy, r.confusion.trace() as f64 / 16.0);
        for t in &r.trials {
            assert_eq!(t.color, feedback_color(t.status));
            if t.decision.as_ref().is_some_and(|d| !d.recognized) {
                assert!(t.command.is_none());
                assert_eq!(t.status, FeedbackStatus::NotRecognized);
            }
            let l = t.latencies;
            assert_eq!(l.acquisition_ms + l.link_ms + l.execution_ms + l.feedback_ms, l.total_ms);
        }
    }

    #[test]
    fn dropped_link_is_red() {
        let mut cfg = open_config(20.0);
        cfg.link.drop_prob = 1.0;
        let r = run_schedule(&cfg, &[1, 3, 5]).unwrap();
        for t in &r.trials {
            assert!(t.decision.as_ref().unwrap().recognized);
            assert_eq!(t.color, Color::Red);
            assert_eq!(t.delivery.unwrap().outcome.attempts(), 4);
        }
    }

    #[test]
    fn blocked_move_is_yellow() {
        let mut cfg = open_config(20.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.txt");
        std::fs::write(&path, ".#.\n.S.\n...\n").unwrap();
        cfg.world = Some(path);
        let north = cfg.command_table.index_of(CommandId::MoveNorth).unwrap();
        let east = cfg.command_table.index_of(CommandId::MoveEast).unwrap();
        let r = run_schedule(&cfg, &[north, east]).unwrap();
        assert_eq!(r.trials[0].color, Color::Yellow);
        assert_eq!(r.trials[1].color, Color::Green);
    }

    #[test]
    fn gated_blinks_short_circuit() {
        let mut cfg = open_config(20.0);
        cfg.blink_prob = 1.0;
        let r = run_schedule(&cfg, &[0, 1, 2]).unwrap();
        for t in &r.trials {
            assert!(t.gated && t.decision.is_none() && t.command.is_none());
            assert_eq!(t.color, Color::Red);
        }
        assert_eq!(r.gated_trials, 3);
    }

    #[test]
    fn transcripts_replay_bit_identically() {
        let mut cfg = open_config(0.0);
        cfg.blink_prob = 0.3;
        cfg.link.drop_prob = 0.3;
        let sched = [0, 3, 4, 5, 6, 7, 2, 1, 0];
        let a = run_schedule(&cfg, &sched).unwrap().transcript();
        let b = run_schedule(&cfg, &sched).unwrap().transcript();
        assert_eq!(a, b);
        let out = replay(a.as_bytes()).unwrap();
        assert_eq!(out, ReplayOutcome { trials: 9, first_mismatch: None });
        let tampered = a.replacen("\"started_at_ms\":3500", "\"started_at_ms\":3501", 1);
        assert_eq!(replay(tampered.as_bytes()).unwrap().first_mismatch, Some(3));
    }

    #[test]
    fn empty_schedule_rejected() {
        assert!(run_schedule(&SessionConfig::default(), &[]).is_err());
        let mut s = Session::new(&SessionConfig::default()).unwrap();
        assert!(s.run_trial(8).is_err());
    }

    #[test]
    fn sweep_axis_parsing_and_rows() {
        assert!("bogus".parse::<SweepAxis>().is_err());
        let mut cfg = SessionConfig::default();
        cfg.schedule.repeats = 1;
        let rows = sweep(&cfg, SweepAxis::NTargets, &[2.0, 4.0]).unwrap();
        assert_eq!(rows.iter().map(|r| r.trials).collect::<Vec<_>>(), vec![2, 4]);
        assert!(sweep(&cfg, SweepAxis::SnrDb, &[]).is_err());
        assert!(sweep(&cfg, SweepAxis::NTargets, &[9.0]).is_err());
    }
}
