//! Scripted intervention schedules: JSON lines of
//! `{"at_step": N, "command": KIND, "args": {...}}` with an optional `uuid`.

use std::collections::HashSet;
use std::path::Path;

use serde::Deserialize;
use serde_json::{Map, Value};
use thiserror::Error;
use tracing::warn;

use crate::hub::Hub;
use crate::protocol::{CommandEnvelope, CommandRegistry, ProtocolError};
use crate::trainer::BoundaryHook;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: {source}")]
    Command {
        line: usize,
        #[source]
        source: ProtocolError,
    },
    #[error("line {line}: at_step {at_step} comes after a later step")]
    Unsorted { line: usize, at_step: u64 },
    #[error("line {line}: a second `{command}` command at step {at_step}")]
    DuplicateStep { line: usize, at_step: u64, command: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    at_step: u64,
    command: String,
    #[serde(default)]
    args: Map<String, Value>,
    #[serde(default)]
    uuid: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub at_step: u64,
    pub envelope: CommandEnvelope,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl InterventionSchedule {
    pub fn parse(text: &str, registry: &CommandRegistry) -> Result<Self, ScheduleError> {
        let mut entries: Vec<ScheduleEntry> = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let l: Line = serde_json::from_str(raw).map_err(|e| ScheduleError::Parse {
                line,
                reason: e.to_string(),
            })?;
            let cmd = |source| ScheduleError::Command { line, source };
            let kind = registry.resolve(&l.command).map_err(cmd)?;
            let args = Value::Object(l.args);
            registry
                .parse_args(&kind, &args.to_string())
                .map_err(cmd)?;
            if entries.last().is_some_and(|e| e.at_step > l.at_step) {
                return Err(ScheduleError::Unsorted {
                    line,
                    at_step: l.at_step,
                });
            }
            // One command of each kind per step. Different kinds at the same
            // step run in file order, so a pause can be followed by a resume.
            if !seen.insert((l.at_step, l.command.clone())) {
                return Err(ScheduleError::DuplicateStep {
                    line,
                    at_step: l.at_step,
                    command: l.command,
                });
            }
            let mut envelope = CommandEnvelope::new(kind, &args);
            if let Some(u) = l.uuid {
                if u.is_empty() || u.len() > crate::protocol::MAX_UUID_LEN {
                    return Err(ScheduleError::Parse {
                        line,
                        reason: "uuid must be 1 to 128 characters".into(),
                    });
                }
                envelope = envelope.with_uuid(u);
            }
            entries.push(ScheduleEntry {
                at_step: l.at_step,
                envelope,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path, registry: &CommandRegistry) -> Result<Self, ScheduleError> {
        Self::parse(&std::fs::read_to_string(path)?, registry)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Submits each entry at the first boundary whose step equals its `at_step`.
/// Entries fire once, so revisiting a step on a child branch does not repeat them.
pub struct ScheduleHook {
    pending: Vec<ScheduleEntry>,
}

impl ScheduleHook {
    pub fn new(schedule: InterventionSchedule) -> Self {
        Self {
            pending: schedule.entries,
        }
    }

    pub fn remaining(&self) -> usize {
        self.pending.len()
    }
}

impl BoundaryHook for ScheduleHook {
    fn before_boundary(&mut self, step: u64, _branch_id: &str, hub: &Hub) {
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|e| e.at_step == step);
        self.pending = rest;
        for e in due {
            if let Err(err) = hub.submit_envelope(e.envelope) {
                warn!(step, error = %err, "scheduled command rejected");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> CommandRegistry {
        CommandRegistry::builtin()
    }

    #[test]
    fn parses_and_keeps_uuid() {
        let s = InterventionSchedule::parse(
            "# comment\n{\"at_step\": 0, \"command\": \"update_optimizer\", \"args\": {\"lr\": {\"value\": 0.01}}}\n\
             {\"at_step\": 5, \"command\": \"save_checkpoint\", \"uuid\": \"ck-a\"}\n",
            &reg(),
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.entries[1].envelope.uuid, "ck-a");
        assert_eq!(s.entries[1].envelope.args, "{}");
    }

    #[test]
    fn rejects_bad_schedules() {
        let cases = [
            "{\"at_step\": 5, \"command\": \"pause_training\"}\n{\"at_step\": 4, \"command\": \"resume_training\"}",
            "{\"at_step\": 5, \"command\": \"pause_training\"}\n{\"at_step\": 5, \"command\": \"pause_training\"}",
            "{\"at_step\": 5, \"command\": \"warp_drive\"}",
            "{\"at_step\": 5, \"command\": \"update_optimizer\", \"args\": {\"lr\": -1}}",
            "{\"at_step\": -1, \"command\": \"pause_training\"}",
            "not json",
        ];
        for c in cases {
            assert!(InterventionSchedule::parse(c, &reg()).is_err(), "{c}");
        }
        // Same step, different commands is fine.
        InterventionSchedule::parse(
            "{\"at_step\": 5, \"command\": \"pause_training\"}\n{\"at_step\": 5, \"command\": \"resume_training\"}",
            &reg(),
        )
        .unwrap();
    }
}
