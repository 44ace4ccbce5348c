//! Append-only event log with periodic snapshots.
//!
//! Every accepted mutation is one JSON line in `events.jsonl`. Every
//! [`SNAPSHOT_EVERY`] events the full state is written to `snapshot.json`
//! together with the number of events it covers; startup loads the snapshot
//! and replays only the tail. The log itself is never rewritten, so replaying
//! it from the start always reconstructs the same state.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use evident_core::annotation::{
    AnnotationSession, AuditVerdict, EvidenceAnnotation, Likelihood, LikelihoodChange, ProtocolError,
    ServedEvidence, Stage,
};
use evident_core::annotation::LabelVerdict;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const SNAPSHOT_EVERY: u64 = 100;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: line {line}: {message}", path.display())]
    Corrupt { path: PathBuf, line: u64, message: String },
    #[error("event {index} cannot be replayed: {source}")]
    Replay {
        index: u64,
        #[source]
        source: ProtocolError,
    },
    #[error("snapshot covers {snapshot} events but the log has only {log}")]
    SnapshotAhead { snapshot: u64, log: u64 },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A state transition, timestamped so replay needs no clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SessionCreated {
        session: AnnotationSession,
    },
    /// First timeline fetch for a session still in review; restarts the timer.
    TimelineViewed {
        session_id: String,
        at: DateTime<Utc>,
    },
    ReviewFinished {
        session_id: String,
        at: DateTime<Utc>,
    },
    ExplicitAnswered {
        session_id: String,
        answers: BTreeMap<String, bool>,
        at: DateTime<Utc>,
    },
    LikelihoodsSubmitted {
        session_id: String,
        answers: BTreeMap<String, Likelihood>,
        at: DateTime<Utc>,
    },
    PredictionFeedback {
        session_id: String,
        aligns: BTreeMap<String, bool>,
        at: DateTime<Utc>,
    },
    EvidenceServed {
        session_id: String,
        item: ServedEvidence,
        at: DateTime<Utc>,
    },
    EvidenceAnnotated {
        session_id: String,
        annotation: EvidenceAnnotation,
        at: DateTime<Utc>,
    },
    FinalSubmitted {
        session_id: String,
        changed_mind: BTreeMap<String, Option<LikelihoodChange>>,
        at: DateTime<Utc>,
    },
    LabelVerdict {
        verdict: LabelVerdict,
    },
    AuditVerdict {
        verdict: AuditVerdict,
    },
}

/// Everything the service persists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub sessions: BTreeMap<String, AnnotationSession>,
    /// Sessions whose review timer was started by a timeline fetch.
    pub viewed: BTreeSet<String>,
    pub label_verdicts: Vec<LabelVerdict>,
    pub audit_verdicts: Vec<AuditVerdict>,
}

impl State {
    fn session_mut(&mut self, id: &str) -> Result<&mut AnnotationSession, ProtocolError> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| ProtocolError::Invalid(format!("unknown session `{id}`")))
    }

    /// Applies one event. Fails without modifying the state when the event
    /// is not allowed.
    pub fn apply(&mut self, event: &Event) -> Result<(), ProtocolError> {
        match event {
            Event::SessionCreated { session } => {
                if self.sessions.contains_key(&session.session_id) {
                    return Err(ProtocolError::Conflict(format!(
                        "session `{}` already exists",
                        session.session_id
                    )));
                }
                self.sessions.insert(session.session_id.clone(), session.clone());
            }
            Event::TimelineViewed { session_id, at } => {
                if self.viewed.contains(session_id) {
                    return Ok(());
                }
                let s = self.session_mut(session_id)?;
                if s.stage == Stage::Reviewing {
                    s.review_started_at = *at;
                }
                self.viewed.insert(session_id.clone());
            }
            Event::ReviewFinished { session_id, .. } => self.session_mut(session_id)?.finish_review()?,
            Event::ExplicitAnswered {
                session_id, answers, ..
            } => self.session_mut(session_id)?.submit_explicit(answers.clone())?,
            Event::LikelihoodsSubmitted { session_id, answers, at } => {
                self.session_mut(session_id)?.submit_likelihoods(answers.clone(), *at)?
            }
            Event::PredictionFeedback { session_id, aligns, .. } => {
                self.session_mut(session_id)?.submit_prediction_feedback(aligns.clone())?
            }
            Event::EvidenceServed { session_id, item, .. } => self.session_mut(session_id)?.record_served(item.clone())?,
            Event::EvidenceAnnotated {
                session_id, annotation, ..
            } => self.session_mut(session_id)?.annotate(annotation.clone())?,
            Event::FinalSubmitted {
                session_id,
                changed_mind,
                ..
            } => self.session_mut(session_id)?.submit_final(changed_mind.clone())?,
            Event::LabelVerdict { verdict } => {
                verdict.validate()?;
                self.label_verdicts.push(verdict.clone());
            }
            Event::AuditVerdict { verdict } => {
                verdict.validate()?;
                self.audit_verdicts.push(verdict.clone());
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    events: u64,
    state: State,
}

/// File-backed event log.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    writer: BufWriter<File>,
    events: u64,
}

impl Store {
    /// Opens (creating if needed) the store in `dir` and rebuilds the state
    /// from the latest snapshot plus the log tail.
    pub fn open(dir: &Path) -> Result<(Store, State), StoreError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let log_path = dir.join(EVENTS_FILE);
        let snapshot_path = dir.join(SNAPSHOT_FILE);

        let (mut state, covered) = match fs::read_to_string(&snapshot_path) {
            Ok(text) => {
                let snap: Snapshot = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                    path: snapshot_path.clone(),
                    line: 1,
                    message: e.to_string(),
                })?;
                (snap.state, snap.events)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (State::default(), 0),
            Err(e) => return Err(io(&snapshot_path)(e)),
        };

        let events = read_events(&log_path)?;
        let total = events.len() as u64;
        if covered > total {
            return Err(StoreError::SnapshotAhead {
                snapshot: covered,
                log: total,
            });
        }
        for (index, event) in events.iter().enumerate().skip(covered as usize) {
            state.apply(event).map_err(|source| StoreError::Replay {
                index: index as u64,
                source,
            })?;
        }

        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io(&log_path))?;
        let store = Store {
            dir: dir.to_path_buf(),
            writer: BufWriter::new(file),
            events: total,
        };
        Ok((store, state))
    }

    pub fn event_count(&self) -> u64 {
        self.events
    }

    /// Durably appends an already-applied event; `state` is the state after
    /// applying it and is snapshotted on the configured cadence.
    pub fn append(&mut self, event: &Event, state: &State) -> Result<(), StoreError> {
        let path = self.dir.join(EVENTS_FILE);
        let line = serde_json::to_string(event).expect("events serialize");
        writeln!(self.writer, "{line}").map_err(io(&path))?;
        self.writer.flush().map_err(io(&path))?;
        self.writer.get_ref().sync_data().map_err(io(&path))?;
        self.events += 1;
        if self.events.is_multiple_of(SNAPSHOT_EVERY) {
            self.snapshot(state)?;
        }
        Ok(())
    }

    fn snapshot(&self, state: &State) -> Result<(), StoreError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let body = serde_json::to_string(&Snapshot {
            events: self.events,
            state: state.clone(),
        })
        .expect("state serializes");
        fs::write(&tmp, body).map_err(io(&tmp))?;
        fs::rename(&tmp, &path).map_err(io(&path))
    }
}

/// Every event in the log, in order.
pub fn read_events(path: &Path) -> Result<Vec<Event>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io(path)(e)),
    };
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

/// State obtained by replaying the whole log, ignoring any snapshot.
pub fn replay(path: &Path) -> Result<State, StoreError> {
    let mut state = State::default();
    for (index, event) in read_events(path)?.iter().enumerate() {
        state.apply(event).map_err(|source| StoreError::Replay {
            index: index as u64,
            source,
        })?;
    }
    Ok(state)
}
