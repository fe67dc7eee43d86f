//! One elicitation session and its append-only event log.
//!
//! Every session owns a JSON-lines file `<data_dir>/<id>.jsonl`. The first
//! line is the `created` event holding the pool and config. Each answer is
//! written as an `answered` event *before* it is applied, and a `fit` event
//! summarises the model update that followed. Rebuilding a session replays
//! the answers in order; the session is seeded, so fits and queries come out
//! the same as the first time.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nestpref::pool::PoolRecord;
use nestpref::{NextQuery, Phase, Pool, Query, Session, SessionConfig};
use serde::{Deserialize, Serialize};

use crate::api::{Estimate, HistoryEntry, InstanceView, Progress, QueryPhase, QueryView, StateView, Status};
use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        at_ms: u64,
        feature_names: Vec<String>,
        instances: Vec<PoolRecord>,
        config: SessionConfig,
    },
    Answered {
        seq: usize,
        query_token: String,
        winner_id: u64,
        at_ms: u64,
    },
    Fit {
        seq: usize,
        at_ms: u64,
        status: Status,
        /// External ids of the next pair, if any.
        query: Option<(u64, u64)>,
        best: Option<u64>,
        seconds: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub fn log_path(data_dir: &Path, id: &str) -> PathBuf {
    data_dir.join(format!("{id}.jsonl"))
}

/// Session ids are 16 lowercase hex digits, which also keeps them safe as
/// file names.
pub fn valid_session_id(id: &str) -> bool {
    id.len() == 16 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub fn token(id: &str, seq: usize) -> String {
    format!("{id}-{seq}")
}

fn append(path: &Path, event: &Event) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(event).map_err(std::io::Error::other)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().append(true).open(path)?;
    f.write_all(&line)?;
    f.sync_data()
}

/// The mutable part of a session, guarded by the per-session mutex.
#[derive(Debug)]
pub struct Core {
    pub id: String,
    pub pool: Pool,
    /// `None` only while a fit runs on the blocking pool.
    pub session: Option<Session>,
    pub log: PathBuf,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub history: Vec<HistoryEntry>,
    /// Response for each answered token; `None` when the fit after it failed.
    pub responses: Vec<Option<Progress>>,
    pub last_error: Option<String>,
}

impl Core {
    /// Validates the pool, writes the `created` event and asks for the first
    /// pair.
    pub fn create(data_dir: &Path, id: String, pool: Pool, config: SessionConfig) -> Result<(Self, Progress), ApiError> {
        let session = Session::new(pool.instances(), config.clone())?;
        let log = log_path(data_dir, &id);
        let at_ms = now_ms();
        let event = Event::Created {
            session_id: id.clone(),
            at_ms,
            feature_names: pool.feature_names.clone(),
            instances: pool.records.clone(),
            config,
        };
        std::fs::OpenOptions::new().write(true).create_new(true).open(&log)?;
        append(&log, &event)?;
        let mut core = Self {
            id,
            pool,
            session: Some(session),
            log,
            created_at_ms: at_ms,
            updated_at_ms: at_ms,
            history: Vec::new(),
            responses: Vec::new(),
            last_error: None,
        };
        let next = core.session_mut().next_query();
        let progress = core.settle(next)?;
        Ok((core, progress))
    }

    /// Rebuilds a session from its log. A torn final line (a crash during a
    /// write) is skipped.
    pub fn replay(path: &Path) -> Result<Self, ApiError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
        let mut events = Vec::with_capacity(lines.len());
        for (k, line) in lines.iter().enumerate() {
            match serde_json::from_str::<Event>(line) {
                Ok(e) => events.push(e),
                Err(e) if k + 1 == lines.len() => tracing::warn!(path = %path.display(), "ignoring torn last line: {e}"),
                Err(e) => return Err(ApiError::Internal(format!("{}: line {}: {e}", path.display(), k + 1))),
            }
        }
        let mut events = events.into_iter();
        let Some(Event::Created { session_id, at_ms, feature_names, instances, config }) = events.next() else {
            return Err(ApiError::Internal(format!("{}: first event is not 'created'", path.display())));
        };
        let pool = Pool::new(feature_names, instances)?;
        let session = Session::new(pool.instances(), config)?;
        let mut core = Self {
            id: session_id,
            pool,
            session: Some(session),
            log: path.to_path_buf(),
            created_at_ms: at_ms,
            updated_at_ms: at_ms,
            history: Vec::new(),
            responses: Vec::new(),
            last_error: None,
        };
        let next = core.session_mut().next_query();
        let mut settled = core.settle(next).is_ok();
        for event in events {
            match event {
                Event::Created { .. } => return Err(ApiError::Internal("duplicate 'created' event".into())),
                Event::Answered { seq, query_token, winner_id, at_ms } => {
                    if seq != core.history.len() || query_token != token(&core.id, seq) {
                        return Err(ApiError::Internal(format!("answer {seq} is out of order")));
                    }
                    if !settled {
                        // a fit failed before this answer was accepted; redo it
                        let next = core.session_mut().next_query();
                        core.settle(next)?;
                    }
                    let pos = core.check_winner(winner_id)?;
                    core.apply(pos, at_ms)?;
                    let next = core.session_mut().next_query();
                    settled = core.settle(next).is_ok();
                }
                Event::Fit { at_ms, .. } => core.updated_at_ms = core.updated_at_ms.max(at_ms),
            }
        }
        Ok(core)
    }

    pub fn session(&self) -> &Session {
        self.session.as_ref().expect("session is present outside fits")
    }

    pub fn session_mut(&mut self) -> &mut Session {
        self.session.as_mut().expect("session is present outside fits")
    }

    pub fn current_token(&self) -> String {
        token(&self.id, self.history.len())
    }

    /// Position of `winner_id` if it is in the outstanding pair.
    pub fn check_winner(&mut self, winner_id: u64) -> Result<usize, ApiError> {
        let query = self
            .session_mut()
            .pending_query()
            .ok_or_else(|| ApiError::Conflict("no comparison is outstanding".into()))?;
        let (a, b) = query.pair();
        let pos = self.pool.position(winner_id);
        match pos {
            Some(p) if p == a || p == b => Ok(p),
            _ => Err(ApiError::bad_request(format!(
                "winner_id {winner_id} is not one of the outstanding pair ({}, {})",
                self.pool.external_id(a),
                self.pool.external_id(b)
            ))),
        }
    }

    /// Appends the `answered` event, then applies it.
    pub fn record(&mut self, pos: usize) -> Result<(), ApiError> {
        let at_ms = now_ms();
        let event = Event::Answered {
            seq: self.history.len(),
            query_token: self.current_token(),
            winner_id: self.pool.external_id(pos),
            at_ms,
        };
        append(&self.log, &event)?;
        self.apply(pos, at_ms)
    }

    fn apply(&mut self, pos: usize, at_ms: u64) -> Result<(), ApiError> {
        let query = self.session_mut().pending_query().expect("checked by check_winner");
        let (a, b) = query.pair();
        self.session_mut().answer(pos)?;
        self.history.push(HistoryEntry {
            seq: self.history.len(),
            phase: phase_of(&query),
            a: self.pool.external_id(a),
            b: self.pool.external_id(b),
            winner: self.pool.external_id(pos),
            at_ms,
        });
        self.responses.push(None);
        self.updated_at_ms = at_ms;
        Ok(())
    }

    /// Takes the result of `next_query` and stores the response for the last
    /// answer.
    pub fn settle(&mut self, next: nestpref::Result<NextQuery>) -> Result<Progress, ApiError> {
        match next {
            Ok(_) => {
                self.last_error = None;
                let progress = self.progress();
                if let Some(slot) = self.responses.last_mut() {
                    *slot = Some(progress.clone());
                }
                Ok(progress)
            }
            Err(e) => {
                self.last_error = Some(e.to_string());
                Err(ApiError::FitFailed(e.to_string()))
            }
        }
    }

    /// Appends the `fit` summary for the last answer.
    pub fn log_fit(&mut self, seconds: f64) -> Result<(), ApiError> {
        let at_ms = now_ms();
        let progress = self.progress();
        let event = Event::Fit {
            seq: self.history.len().saturating_sub(1),
            at_ms,
            status: progress.status,
            query: progress.query.as_ref().map(|q| (q.a.id, q.b.id)),
            best: progress.best.as_ref().map(|b| b.id),
            seconds,
            error: self.last_error.clone(),
        };
        append(&self.log, &event)?;
        self.updated_at_ms = at_ms;
        Ok(())
    }

    fn view(&self, pos: usize) -> InstanceView {
        InstanceView::from(&self.pool.records[pos])
    }

    fn status(&self) -> Status {
        let Some(session) = &self.session else { return Status::Fitting };
        match session.phase() {
            Phase::Finished(r) => Status::finished(r),
            _ if self.last_error.is_some() => Status::Fitting,
            _ => Status::AwaitingAnswer,
        }
    }

    fn query(&mut self) -> Option<QueryView> {
        if self.last_error.is_some() {
            return None;
        }
        let q = self.session.as_mut()?.pending_query()?;
        let (a, b) = q.pair();
        Some(QueryView { token: self.current_token(), phase: phase_of(&q), a: self.view(a), b: self.view(b) })
    }

    pub fn progress(&mut self) -> Progress {
        let (active, budget, best, stop) = match &self.session {
            Some(s) => (
                s.trace().len(),
                s.config().budget,
                s.x_best().map(|b| self.view(b)),
                match s.phase() {
                    Phase::Finished(r) => Some(r),
                    _ => None,
                },
            ),
            None => (0, 0, None, None),
        };
        Progress {
            session_id: self.id.clone(),
            status: self.status(),
            query: self.query(),
            queries_answered: self.history.len(),
            active_queries: active,
            budget,
            best,
            stop_reason: stop,
        }
    }

    pub fn state(&mut self) -> StateView {
        let progress = self.progress();
        let session = self.session();
        let estimates = session.estimates().map(|v| {
            v.into_iter().map(|(pos, mean, variance)| Estimate { id: self.pool.external_id(pos), mean, variance }).collect()
        });
        StateView {
            session_id: self.id.clone(),
            status: progress.status,
            created_at_ms: self.created_at_ms,
            updated_at_ms: self.updated_at_ms,
            config: session.config().clone(),
            feature_names: self.pool.feature_names.clone(),
            nest_names: self.pool.nest_names.clone(),
            instance_count: self.pool.len(),
            queries_answered: progress.queries_answered,
            active_queries: progress.active_queries,
            budget: progress.budget,
            query: progress.query,
            best: progress.best,
            estimates,
            history: self.history.clone(),
            stop_reason: progress.stop_reason,
            last_error: self.last_error.clone(),
        }
    }

    /// The snapshot shown while a fit is running.
    pub fn fitting_state(&self, previous: &StateView) -> StateView {
        StateView {
            status: Status::Fitting,
            query: None,
            queries_answered: self.history.len(),
            history: self.history.clone(),
            updated_at_ms: self.updated_at_ms,
            last_error: None,
            ..previous.clone()
        }
    }
}

fn phase_of(q: &Query) -> QueryPhase {
    match q {
        Query::Initialization { .. } => QueryPhase::Initialization,
        Query::Active { .. } => QueryPhase::Active,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_ids_are_strict_hex() {
        assert!(valid_session_id("0123456789abcdef"));
        assert!(!valid_session_id("0123456789ABCDEF"));
        assert!(!valid_session_id("../../etc/passwd"));
        assert!(!valid_session_id("0123"));
    }

    #[test]
    fn events_are_tagged_json_lines() {
        let e = Event::Answered { seq: 2, query_token: token("00000000000000aa", 2), winner_id: 9, at_ms: 5 };
        let text = serde_json::to_string(&e).unwrap();
        assert_eq!(text, r#"{"event":"answered","seq":2,"query_token":"00000000000000aa-2","winner_id":9,"at_ms":5}"#);
        assert_eq!(serde_json::from_str::<Event>(&text).unwrap(), e);
    }

    #[test]
    fn replay_rejects_a_log_without_creation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let e = Event::Answered { seq: 0, query_token: "t".into(), winner_id: 1, at_ms: 0 };
        std::fs::write(&path, format!("{}\n{}\n", serde_json::to_string(&e).unwrap(), serde_json::to_string(&e).unwrap()))
            .unwrap();
        assert!(matches!(Core::replay(&path), Err(ApiError::Internal(_))));
    }
}
