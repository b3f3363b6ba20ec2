//! Decisions to commands, execution status to flashing-block feedback.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbcca::Decision;

/// Feedback flashes stay below the lowest stimulus frequency.
pub const FEEDBACK_BLINK_MIN_HZ: f64 = 1.0;
pub const FEEDBACK_BLINK_MAX_HZ: f64 = 5.0;

/// Machine command vocabulary. The variant names are the wire ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CommandId {
    ReconArea,
    Halt,
    ReturnToBase,
    MoveNorth,
    MoveSouth,
    MoveEast,
    MoveWest,
    MarkTarget,
}

impl CommandId {
    pub const ALL: [CommandId; 8] = [
        CommandId::ReconArea,
        CommandId::Halt,
        CommandId::ReturnToBase,
        CommandId::MoveNorth,
        CommandId::MoveSouth,
        CommandId::MoveEast,
        CommandId::MoveWest,
        CommandId::MarkTarget,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CommandId::ReconArea => "ReconArea",
            CommandId::Halt => "Halt",
            CommandId::ReturnToBase => "ReturnToBase",
            CommandId::MoveNorth => "MoveNorth",
            CommandId::MoveSouth => "MoveSouth",
            CommandId::MoveEast => "MoveEast",
            CommandId::MoveWest => "MoveWest",
            CommandId::MarkTarget => "MarkTarget",
        }
    }

    pub fn is_move(self) -> bool {
        matches!(
            self,
            CommandId::MoveNorth | CommandId::MoveSouth | CommandId::MoveEast | CommandId::MoveWest
        )
    }
}

impl fmt::Display for CommandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CommandId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CommandId::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown command id `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub id: CommandId,
    pub issued_at: u64,
}

impl Command {
    /// Wire payload: the ASCII command id.
    pub fn payload(&self) -> Vec<u8> {
        self.id.as_str().as_bytes().to_vec()
    }

    pub fn from_payload(payload: &[u8], issued_at: u64) -> Result<Self> {
        let s = std::str::from_utf8(payload).map_err(|_| Error::Parse("command payload is not ASCII".into()))?;
        Ok(Self {
            id: s.parse()?,
            issued_at,
        })
    }
}

/// Bijection from stimulus target index to command id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CommandId>", into = "Vec<CommandId>")]
pub struct CommandTable {
    entries: Vec<CommandId>,
}

impl CommandTable {
    /// `entries[k]` is the command for target `k`.
    pub fn new(entries: Vec<CommandId>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("command table is empty"));
        }
        for (i, id) in entries.iter().enumerate() {
            if let Some(j) = entries[..i].iter().position(|e| e == id) {
                return Err(Error::invalid(format!(
                    "command {id} mapped from both index {j} and index {i}"
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Builds from explicit `index -> command` pairs; indices must be exactly `0..len`.
    pub fn from_map(map: &BTreeMap<usize, CommandId>) -> Result<Self> {
        let entries = (0..map.len())
            .map(|i| {
                map.get(&i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("command table has no entry for index {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    /// The first `n` ids of [`CommandId::ALL`].
    pub fn default_for(n: usize) -> Result<Self> {
        if n > CommandId::ALL.len() {
            return Err(Error::invalid(format!(
                "only {} commands exist, {n} requested",
                CommandId::ALL.len()
            )));
        }
        Self::new(CommandId::ALL[..n].to_vec())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<CommandId> {
        self.entries.get(index).copied()
    }

    pub fn index_of(&self, id: CommandId) -> Option<usize> {
        self.entries.iter().position(|&e| e == id)
    }

    pub fn entries(&self) -> &[CommandId] {
        &self.entries
    }
}

impl Default for CommandTable {
    fn default() -> Self {
        Self {
            entries: CommandId::ALL.to_vec(),
        }
    }
}

impl TryFrom<Vec<CommandId>> for CommandTable {
    type Error = Error;

    fn try_from(entries: Vec<CommandId>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<CommandTable> for Vec<CommandId> {
    fn from(t: CommandTable) -> Self {
        t.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeedbackStatus {
    NotRecognized,
    RecognizedNotExecuted,
    Executed,
}

impl FeedbackStatus {
    pub const ALL: [FeedbackStatus; 3] = [
        FeedbackStatus::NotRecognized,
        FeedbackStatus::RecognizedNotExecuted,
        FeedbackStatus::Executed,
    ];

    /// Feedback frame payload byte.
    pub fn to_byte(self) -> u8 {
        match self {
            FeedbackStatus::NotRecognized => 0,
            FeedbackStatus::RecognizedNotExecuted => 1,
            FeedbackStatus::Executed => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        FeedbackStatus::ALL
            .into_iter()
            .find(|s| s.to_byte() == b)
            .ok_or_else(|| Error::Parse(format!("unknown feedback status byte {b:#04x}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Yellow,
    Green,
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Red => "Red",
            Color::Yellow => "Yellow",
            Color::Green => "Green",
        })
    }
}

pub fn feedback_color(status: FeedbackStatus) -> Color {
    match status {
        FeedbackStatus::NotRecognized => Color::Red,
        FeedbackStatus::RecognizedNotExecuted => Color::Yellow,
        FeedbackStatus::Executed => Color::Green,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackFrame {
    pub color: Color,
    pub blink_hz: f64,
    pub duration_s: f64,
}

pub fn encode_feedback(status: FeedbackStatus, blink_hz: f64, duration_s: f64) -> Result<FeedbackFrame> {
    if !(FEEDBACK_BLINK_MIN_HZ..=FEEDBACK_BLINK_MAX_HZ).contains(&blink_hz) {
        return Err(Error::invalid(format!(
            "blink_hz {blink_hz} outside [{FEEDBACK_BLINK_MIN_HZ}, {FEEDBACK_BLINK_MAX_HZ}] Hz; it would collide with the stimulus band"
        )));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid("feedback duration must be positive"));
    }
    Ok(FeedbackFrame {
        color: feedback_color(status),
        blink_hz,
        duration_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mapped {
    Command(Command),
    NotRecognized,
}

impl Mapped {
    pub fn command(&self) -> Option<Command> {
        match self {
            Mapped::Command(c) => Some(*c),
            Mapped::NotRecognized => None,
        }
    }
}

pub fn map_decision(decision: &Decision, table: &CommandTable, tick: u64) -> Result<Mapped> {
    if decision.scores.len() != table.len() {
        return Err(Error::invalid(format!(
            "decision has {} scores but the command table has {} entries",
            decision.scores.len(),
            table.len()
        )));
    }
    if !decision.recognized {
        return Ok(Mapped::NotRecognized);
    }
    let id = table
        .get(decision.predicted_index)
        .ok_or_else(|| Error::invalid(format!("predicted index {} out of range", decision.predicted_index)))?;
    Ok(Mapped::Command(Command { id, issued_at: tick }))
}
