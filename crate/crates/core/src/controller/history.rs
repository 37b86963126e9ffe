use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fsutil;

use super::Action;

/// Reason logged for the first event of every run.
pub const INITIALIZATION_REASON: &str = "Initialization";

/// One loop iteration: the dataset size used, the metric obtained, why the
/// controller acted and what it did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub round: usize,
    pub k: usize,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub metric: f64,
    pub reason: String,
    pub action: Action,
    pub model_id: Option<String>,
    pub timestamp: DateTime<Utc>,
}

/// Non-finite metrics (diverged training) are written as the string `"inf"`.
fn ser_metric<S: Serializer>(m: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if m.is_finite() {
        s.serialize_f64(*m)
    } else {
        s.serialize_str("inf")
    }
}

fn de_metric<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid metric {t:?}"))),
    }
}

/// Append-only event log, optionally mirrored to a JSON file after every
/// append.
#[derive(Debug, Clone, Default)]
pub struct History {
    events: Vec<HistoryEvent>,
    path: Option<PathBuf>,
    zero_timestamps: bool,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Persists to `path` on every append.
    pub fn persisted(path: impl Into<PathBuf>) -> Self {
        Self {
            path: Some(path.into()),
            ..Self::default()
        }
    }

    /// Stamps every event with the Unix epoch so logs compare byte-for-byte.
    pub fn with_zeroed_timestamps(mut self, zero: bool) -> Self {
        self.zero_timestamps = zero;
        self
    }

    pub fn from_events(events: Vec<HistoryEvent>) -> Self {
        Self {
            events,
            ..Self::default()
        }
    }

    pub fn events(&self) -> &[HistoryEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last(&self) -> Option<&HistoryEvent> {
        self.events.last()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn current_k(&self) -> usize {
        self.last().map_or(0, |e| e.k)
    }

    /// Lowest metric over generate and test events.
    pub fn best_metric(&self) -> Option<f64> {
        self.events
            .iter()
            .filter(|e| e.action != Action::Done)
            .map(|e| e.metric)
            .min_by(f64::total_cmp)
    }

    pub fn now(&self) -> DateTime<Utc> {
        if self.zero_timestamps {
            DateTime::<Utc>::UNIX_EPOCH
        } else {
            Utc::now()
        }
    }

    /// Appends after checking the log invariants, then rewrites the file.
    pub fn append(&mut self, event: HistoryEvent) -> Result<()> {
        match self.events.last() {
            None => {
                if event.reason != INITIALIZATION_REASON || event.action != Action::Generate {
                    return Err(Error::Contract(
                        "the first history event must be the generate Initialization event".into(),
                    ));
                }
            }
            Some(prev) => {
                if event.round <= prev.round {
                    return Err(Error::Contract(format!(
                        "round {} does not follow round {}",
                        event.round, prev.round
                    )));
                }
                if event.k < prev.k {
                    return Err(Error::Contract(format!(
                        "dataset size decreased from {} to {}",
                        prev.k, event.k
                    )));
                }
            }
        }
        if event.metric.is_nan() || event.metric < 0.0 {
            return Err(Error::Contract(format!("invalid metric {}", event.metric)));
        }
        self.events.push(event);
        self.flush()
    }

    fn flush(&self) -> Result<()> {
        match &self.path {
            Some(p) => fsutil::write_json_atomic(p, &self.events),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.events)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let events: Vec<HistoryEvent> =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(Self {
            events,
            path: Some(path.to_path_buf()),
            zero_timestamps: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(round: usize, k: usize, metric: f64, action: Action, reason: &str) -> HistoryEvent {
        HistoryEvent {
            round,
            k,
            metric,
            reason: reason.into(),
            action,
            model_id: None,
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    #[test]
    fn first_event_must_be_initialization() {
        let mut h = History::new();
        assert!(h.append(event(0, 10, 0.1, Action::Test, "x")).is_err());
        h.append(event(0, 10, 0.1, Action::Generate, INITIALIZATION_REASON))
            .unwrap();
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn rejects_shrinking_k_and_stale_round() {
        let mut h = History::new();
        h.append(event(0, 10, 0.1, Action::Generate, INITIALIZATION_REASON))
            .unwrap();
        assert!(h.append(event(1, 9, 0.1, Action::Test, "x")).is_err());
        assert!(h.append(event(0, 12, 0.1, Action::Test, "x")).is_err());
        h.append(event(1, 12, 0.1, Action::Test, "x")).unwrap();
    }

    #[test]
    fn infinite_metric_round_trips_as_inf_string() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.json");
        let mut h = History::persisted(&p);
        h.append(event(0, 10, f64::INFINITY, Action::Generate, INITIALIZATION_REASON))
            .unwrap();
        h.append(event(1, 10, 0.25, Action::Done, "stop")).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"metric\": \"inf\""), "{text}");
        let back = History::load(&p).unwrap();
        assert_eq!(back.events(), h.events());
        assert_eq!(back.best_metric(), Some(f64::INFINITY));
    }

    #[test]
    fn file_is_valid_after_every_append() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.json");
        let mut h = History::persisted(&p).with_zeroed_timestamps(true);
        for round in 0..5 {
            let (action, reason) = if round == 0 {
                (Action::Generate, INITIALIZATION_REASON)
            } else {
                (Action::Test, "grow")
            };
            let mut e = event(round, 10 + round, 0.1, action, reason);
            e.timestamp = h.now();
            h.append(e).unwrap();
            assert_eq!(History::load(&p).unwrap().len(), round + 1);
        }
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .contains("1970-01-01T00:00:00Z"));
    }
}
