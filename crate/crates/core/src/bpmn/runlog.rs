use serde::{Deserialize, Serialize};

use super::token::TokenStats;
use crate::events::{Millis, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryPhase {
    Entered,
    Dispatched,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Failed,
    Aborted,
}

impl RunOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOutcome::Completed => "completed",
            RunOutcome::Failed => "failed",
            RunOutcome::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub at: Millis,
    pub node_id: String,
    pub phase: EntryPhase,
    #[serde(default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RunLogError {
    #[error("outcome already set to {0:?}")]
    OutcomeSet(RunOutcome),
    #[error("entry at {at} precedes previous entry at {previous}")]
    TimeOrder { at: Millis, previous: Millis },
    #[error("line {line}: {message}")]
    Ndjson { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLog {
    pub run_id: String,
    pub process_id: String,
    pub mode: Mode,
    pub entries: Vec<LogEntry>,
    pub outcome: Option<RunOutcome>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
    #[serde(default)]
    pub tokens: TokenStats,
}

/// One line of the NDJSON export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunLogLine {
    Run {
        run_id: String,
        process_id: String,
        mode: Mode,
    },
    Entry(LogEntry),
    Outcome {
        outcome: RunOutcome,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        detail: String,
        #[serde(default)]
        tokens: TokenStats,
    },
}

impl RunLog {
    pub fn new(run_id: impl Into<String>, process_id: impl Into<String>, mode: Mode) -> Self {
        RunLog {
            run_id: run_id.into(),
            process_id: process_id.into(),
            mode,
            entries: Vec::new(),
            outcome: None,
            detail: String::new(),
            tokens: TokenStats::default(),
        }
    }

    pub fn push(&mut self, entry: LogEntry) -> Result<(), RunLogError> {
        if let Some(prev) = self.entries.last() {
            if entry.at < prev.at {
                return Err(RunLogError::TimeOrder {
                    at: entry.at,
                    previous: prev.at,
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn finish(&mut self, outcome: RunOutcome, detail: impl Into<String>) -> Result<(), RunLogError> {
        if let Some(o) = self.outcome {
            return Err(RunLogError::OutcomeSet(o));
        }
        self.outcome = Some(outcome);
        self.detail = detail.into();
        Ok(())
    }

    /// Capability-bearing node ids in dispatch order.
    pub fn dispatched(&self) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter().filter(|e| e.phase == EntryPhase::Dispatched)
    }

    pub fn to_ndjson(&self) -> String {
        let mut lines = vec![RunLogLine::Run {
            run_id: self.run_id.clone(),
            process_id: self.process_id.clone(),
            mode: self.mode,
        }];
        lines.extend(self.entries.iter().cloned().map(RunLogLine::Entry));
        if let Some(outcome) = self.outcome {
            lines.push(RunLogLine::Outcome {
                outcome,
                detail: self.detail.clone(),
                tokens: self.tokens,
            });
        }
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("run log line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<RunLog, RunLogError> {
        let mut log: Option<RunLog> = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |message: String| RunLogError::Ndjson { line: i + 1, message };
            let parsed: RunLogLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            match (parsed, log.as_mut()) {
                (
                    RunLogLine::Run {
                        run_id,
                        process_id,
                        mode,
                    },
                    None,
                ) => log = Some(RunLog::new(run_id, process_id, mode)),
                (RunLogLine::Entry(e), Some(l)) => l.push(e)?,
                (
                    RunLogLine::Outcome {
                        outcome,
                        detail,
                        tokens,
                    },
                    Some(l),
                ) => {
                    l.finish(outcome, detail)?;
                    l.tokens = tokens;
                }
                (_, _) => return Err(err("run header must come first and only once".into())),
            }
        }
        log.ok_or(RunLogError::Ndjson {
            line: 0,
            message: "empty run log".into(),
        })
    }
}
