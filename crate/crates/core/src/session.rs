//! SSO session records, their storage back-ends and the short-lived handler
//! cache.
//!
//! Expiry is lazy: a record is checked against the clock whenever it is read
//! and purged on the spot once `now >= expires_at`. [`SessionStore::sweep`]
//! exists for operators who want to reclaim space eagerly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::SharedClock;

pub const SID_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionKind {
    Sso,
    Persistent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub sid: String,
    pub uid: String,
    pub attributes: BTreeMap<String, String>,
    pub auth_level: u32,
    pub created_at: i64,
    pub expires_at: i64,
    pub kind: SessionKind,
}

impl Session {
    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }

    pub fn is_live(&self, now: i64) -> bool {
        now < self.expires_at
    }

    /// An attribute-less session used where rules or headers must be
    /// evaluated without a user (the `skip` rule).
    pub fn anonymous() -> Self {
        Session {
            sid: String::new(),
            uid: String::new(),
            attributes: BTreeMap::from([("uid".to_string(), String::new())]),
            auth_level: 0,
            created_at: 0,
            expires_at: i64::MAX,
            kind: SessionKind::Sso,
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session not found")]
    NotFound,
    #[error("session expired")]
    Expired,
    #[error("malformed session id")]
    InvalidSid,
    #[error("invalid session request: {0}")]
    Invalid(&'static str),
    #[error("session backend: {0}")]
    Backend(#[from] io::Error),
    #[error("corrupt session record: {0}")]
    Corrupt(#[from] serde_json::Error),
}

/// 16 random bytes, lowercase hex.
pub fn generate_sid() -> String {
    let mut bytes = [0u8; SID_LEN / 2];
    rand::rngs::OsRng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

pub fn is_valid_sid(sid: &str) -> bool {
    sid.len() == SID_LEN && sid.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// First eight characters of a secret, the only part that may be logged.
pub fn secret_prefix(secret: &str) -> String {
    if secret.is_empty() {
        return "-".to_string();
    }
    secret.chars().take(8).collect()
}

pub trait SessionBackend: Send + Sync {
    fn load(&self, sid: &str) -> Result<Option<Session>, SessionError>;
    fn save(&self, session: &Session) -> Result<(), SessionError>;
    fn remove(&self, sid: &str) -> Result<bool, SessionError>;
    fn all(&self) -> Result<Vec<Session>, SessionError>;
}

#[derive(Default)]
pub struct MemoryBackend {
    records: RwLock<HashMap<String, Session>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl SessionBackend for MemoryBackend {
    fn load(&self, sid: &str) -> Result<Option<Session>, SessionError> {
        Ok(self.records.read().get(sid).cloned())
    }

    fn save(&self, session: &Session) -> Result<(), SessionError> {
        self.records
            .write()
            .insert(session.sid.clone(), session.clone());
        Ok(())
    }

    fn remove(&self, sid: &str) -> Result<bool, SessionError> {
        Ok(self.records.write().remove(sid).is_some())
    }

    fn all(&self) -> Result<Vec<Session>, SessionError> {
        Ok(self.records.read().values().cloned().collect())
    }
}

/// One JSON file per sid under `root`.
pub struct FileBackend {
    root: PathBuf,
    // serialises writers so a rename never races a remove of the same sid
    write_lock: Mutex<()>,
}

impl FileBackend {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, sid: &str) -> Result<PathBuf, SessionError> {
        if !is_valid_sid(sid) {
            return Err(SessionError::InvalidSid);
        }
        Ok(self.root.join(sid))
    }
}

impl SessionBackend for FileBackend {
    fn load(&self, sid: &str) -> Result<Option<Session>, SessionError> {
        let path = self.path_for(sid)?;
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn save(&self, session: &Session) -> Result<(), SessionError> {
        let path = self.path_for(&session.sid)?;
        let body = serde_json::to_vec(session)?;
        let _guard = self.write_lock.lock();
        let tmp = self.root.join(format!(".{}.tmp", session.sid));
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&body)?;
        file.sync_data()?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn remove(&self, sid: &str) -> Result<bool, SessionError> {
        let path = self.path_for(sid)?;
        let _guard = self.write_lock.lock();
        match fs::remove_file(path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    fn all(&self) -> Result<Vec<Session>, SessionError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if !is_valid_sid(name) {
                continue;
            }
            if let Some(s) = self.load(name)? {
                out.push(s);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Memory,
    File,
}

/// Lifetime of persistent records; they outlive any SSO session.
pub const PERSISTENT_TTL: i64 = 10 * 365 * 24 * 3600;

#[derive(Clone)]
pub struct SessionStore {
    backend: Arc<dyn SessionBackend>,
    clock: SharedClock,
}

impl SessionStore {
    pub fn new(backend: Arc<dyn SessionBackend>, clock: SharedClock) -> Self {
        Self { backend, clock }
    }

    pub fn in_memory(clock: SharedClock) -> Self {
        Self::new(Arc::new(MemoryBackend::new()), clock)
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn create_session(
        &self,
        uid: &str,
        attributes: BTreeMap<String, String>,
        auth_level: u32,
        ttl_seconds: i64,
        kind: SessionKind,
    ) -> Result<Session, SessionError> {
        if uid.is_empty() {
            return Err(SessionError::Invalid("uid must not be empty"));
        }
        if ttl_seconds <= 0 {
            return Err(SessionError::Invalid("ttl must be positive"));
        }
        let now = self.clock.now();
        let mut attributes = attributes;
        attributes.insert("uid".to_string(), uid.to_string());
        loop {
            let sid = generate_sid();
            if self.backend.load(&sid)?.is_some() {
                continue;
            }
            let session = Session {
                sid,
                uid: uid.to_string(),
                attributes,
                auth_level,
                created_at: now,
                expires_at: now + ttl_seconds,
                kind,
            };
            self.backend.save(&session)?;
            return Ok(session);
        }
    }

    pub fn get_session(&self, sid: &str) -> Result<Session, SessionError> {
        if !is_valid_sid(sid) {
            return Err(SessionError::NotFound);
        }
        let session = self.backend.load(sid)?.ok_or(SessionError::NotFound)?;
        if !session.is_live(self.clock.now()) {
            self.backend.remove(sid)?;
            return Err(SessionError::Expired);
        }
        Ok(session)
    }

    pub fn delete_session(&self, sid: &str) -> Result<(), SessionError> {
        if !is_valid_sid(sid) {
            return Err(SessionError::NotFound);
        }
        if self.backend.remove(sid)? {
            Ok(())
        } else {
            Err(SessionError::NotFound)
        }
    }

    /// Overwrites an existing live record (used when plugins adjust it).
    pub fn update_session(&self, session: &Session) -> Result<(), SessionError> {
        self.get_session(&session.sid)?;
        self.backend.save(session)
    }

    /// Live SSO sessions, optionally restricted to one uid.
    pub fn list_sessions(&self, uid: Option<&str>) -> Result<Vec<Session>, SessionError> {
        let now = self.clock.now();
        let mut out: Vec<Session> = self
            .backend
            .all()?
            .into_iter()
            .filter(|s| s.kind == SessionKind::Sso && s.is_live(now))
            .filter(|s| uid.map_or(true, |u| s.uid == u))
            .collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.sid.cmp(&b.sid)));
        Ok(out)
    }

    /// Removes every expired record; returns how many were purged.
    pub fn sweep(&self) -> Result<usize, SessionError> {
        let now = self.clock.now();
        let mut purged = 0;
        for s in self.backend.all()? {
            if !s.is_live(now) && self.backend.remove(&s.sid)? {
                purged += 1;
            }
        }
        Ok(purged)
    }

    /// Key of the persistent record of `uid`. Persistent records are never
    /// accepted as SSO sessions, so the key need not be secret.
    pub fn persistent_sid(uid: &str) -> String {
        let digest = Sha256::digest(format!("persistent\0{uid}").as_bytes());
        hex::encode(&digest[..SID_LEN / 2])
    }

    pub fn load_persistent(&self, uid: &str) -> Result<Session, SessionError> {
        let sid = Self::persistent_sid(uid);
        match self.get_session(&sid) {
            Ok(s) => Ok(s),
            Err(SessionError::NotFound | SessionError::Expired) => {
                let now = self.clock.now();
                Ok(Session {
                    sid,
                    uid: uid.to_string(),
                    attributes: BTreeMap::from([("uid".to_string(), uid.to_string())]),
                    auth_level: 0,
                    created_at: now,
                    expires_at: now + PERSISTENT_TTL,
                    kind: SessionKind::Persistent,
                })
            }
            Err(e) => Err(e),
        }
    }

    pub fn save_persistent(&self, session: &Session) -> Result<(), SessionError> {
        debug_assert_eq!(session.kind, SessionKind::Persistent);
        self.backend.save(session)
    }
}

struct CacheEntry {
    session: Session,
    cached_until_ms: i64,
}

/// Per-process cache of sessions in front of the [`SessionStore`].
///
/// A session deleted from the store stays servable from here until its cache
/// entry lapses; that staleness window is bounded by `max_ttl`.
pub struct HandlerCache {
    entries: RwLock<HashMap<String, CacheEntry>>,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    clock: SharedClock,
    max_ttl: i64,
}

pub const DEFAULT_HANDLER_CACHE_TTL: i64 = 120;

impl HandlerCache {
    pub fn new(clock: SharedClock, max_ttl_seconds: i64) -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            inflight: Mutex::new(HashMap::new()),
            clock,
            max_ttl: max_ttl_seconds,
        }
    }

    pub fn max_ttl(&self) -> i64 {
        self.max_ttl
    }

    pub fn cache_get(&self, sid: &str) -> Option<Session> {
        let now_ms = self.clock.now_millis();
        let entries = self.entries.read();
        let entry = entries.get(sid)?;
        if now_ms >= entry.cached_until_ms || !entry.session.is_live(now_ms.div_euclid(1000)) {
            return None;
        }
        Some(entry.session.clone())
    }

    pub fn cache_put(&self, session: Session, ttl_seconds: i64) {
        let ttl = ttl_seconds.clamp(0, self.max_ttl);
        let cached_until_ms = self.clock.now_millis() + ttl * 1000;
        self.entries.write().insert(
            session.sid.clone(),
            CacheEntry {
                session,
                cached_until_ms,
            },
        );
    }

    pub fn invalidate(&self, sid: &str) {
        self.entries.write().remove(sid);
    }

    /// Cache lookup falling through to the store on a miss. Concurrent misses
    /// on the same sid share a single store read.
    pub fn get_or_fetch(&self, sid: &str, store: &SessionStore) -> Result<Session, SessionError> {
        if let Some(s) = self.cache_get(sid) {
            return Ok(s);
        }
        let slot = self
            .inflight
            .lock()
            .entry(sid.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(())))
            .clone();
        let result = {
            let _guard = slot.lock();
            match self.cache_get(sid) {
                Some(s) => Ok(s),
                // persistent records have a guessable key and are never SSO
                None => match store.get_session(sid) {
                    Ok(s) if s.kind != SessionKind::Sso => Err(SessionError::NotFound),
                    Err(e) => Err(e),
                    Ok(s) => {
                        self.cache_put(s.clone(), self.max_ttl);
                        Ok(s)
                    }
                },
            }
        };
        let mut inflight = self.inflight.lock();
        if Arc::strong_count(&slot) == 2 {
            inflight.remove(sid);
        }
        result
    }

    pub fn purge_expired(&self) {
        let now_ms = self.clock.now_millis();
        self.entries.write().retain(|_, e| now_ms < e.cached_until_ms);
    }
}
