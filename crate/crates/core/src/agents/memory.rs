//! Per-session chat transcripts, one JSON file per session.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    pub session_id: String,
    pub sequence: u64,
}

pub type Transcript = Vec<ChatMessage>;

/// Session ids become file names, so they are restricted to
/// `[A-Za-z0-9_.-]` and may not start with a dot.
pub fn validate_session_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Domain(format!("invalid session id {id:?}")))
    }
}

/// Append-only transcript store. Every append rewrites the session file
/// atomically, so a crash never leaves a half-written transcript.
#[derive(Debug)]
pub struct MemoryStore {
    dir: PathBuf,
    cache: Mutex<HashMap<String, Transcript>>,
}

impl MemoryStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn session_path(&self, session: &str) -> PathBuf {
        self.dir.join(format!("{session}.json"))
    }

    fn load(&self, session: &str) -> Result<Transcript> {
        let path = self.session_path(session);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fsutil::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))
    }

    pub fn append(&self, session: &str, role: Role, content: &str) -> Result<ChatMessage> {
        validate_session_id(session)?;
        let mut cache = self.cache.lock().expect("memory lock");
        if !cache.contains_key(session) {
            let loaded = self.load(session)?;
            cache.insert(session.to_string(), loaded);
        }
        let transcript = cache.get_mut(session).expect("just inserted");
        let msg = ChatMessage {
            role,
            content: content.to_string(),
            session_id: session.to_string(),
            sequence: transcript.last().map_or(0, |m| m.sequence + 1),
        };
        transcript.push(msg.clone());
        fsutil::write_json_atomic(&self.session_path(session), transcript)?;
        Ok(msg)
    }

    /// Full ordered transcript; an unknown session yields an empty one.
    pub fn get(&self, session: &str) -> Result<Transcript> {
        validate_session_id(session)?;
        let cache = self.cache.lock().expect("memory lock");
        match cache.get(session) {
            Some(t) => Ok(t.clone()),
            None => self.load(session),
        }
    }
}
