//! Append-only audit trail: one JSON object per line.
//!
//! Secrets never reach the sink. Every identifier that could be replayed
//! (SIDs, tickets, codes, tokens) is reduced to its first eight characters by
//! [`AuditEvent::sid`] and [`AuditEvent::secret`] before it is stored.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::SharedClock;
use crate::session::secret_prefix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    AuthSuccess,
    AuthFailure,
    AuthLocked,
    AuthzAllow,
    AuthzDeny,
    SessionCreate,
    SessionDelete,
    TokenMint,
    TokenReject,
    CasValidate,
    OidcToken,
    AdminChange,
    PluginAbort,
    PluginError,
}

impl AuditKind {
    /// Kinds written durably before the triggering response is sent.
    pub fn is_durable(self) -> bool {
        matches!(
            self,
            AuditKind::AuthSuccess
                | AuditKind::AuthFailure
                | AuditKind::AuthLocked
                | AuditKind::TokenMint
                | AuditKind::TokenReject
                | AuditKind::AdminChange
        )
    }

    pub fn parse(text: &str) -> Option<Self> {
        serde_json::from_value(Value::String(text.to_string())).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    /// Unix milliseconds, stamped by [`Accounting::emit`].
    pub ts: i64,
    pub kind: AuditKind,
    pub uid: Option<String>,
    pub sid_prefix: String,
    pub vhost: String,
    pub uri: String,
    pub client_ip: String,
    pub detail: BTreeMap<String, Value>,
}

impl AuditEvent {
    pub fn new(kind: AuditKind) -> Self {
        Self {
            ts: 0,
            kind,
            uid: None,
            sid_prefix: "-".into(),
            vhost: String::new(),
            uri: String::new(),
            client_ip: String::new(),
            detail: BTreeMap::new(),
        }
    }

    pub fn uid(mut self, uid: impl Into<String>) -> Self {
        let uid = uid.into();
        if !uid.is_empty() {
            self.uid = Some(uid);
        }
        self
    }

    pub fn sid(mut self, sid: &str) -> Self {
        self.sid_prefix = secret_prefix(sid);
        self
    }

    pub fn vhost(mut self, vhost: impl Into<String>) -> Self {
        self.vhost = vhost.into();
        self
    }

    pub fn uri(mut self, uri: impl Into<String>) -> Self {
        self.uri = uri.into();
        self
    }

    pub fn ip(mut self, ip: impl ToString) -> Self {
        self.client_ip = ip.to_string();
        self
    }

    pub fn detail(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.detail.insert(key.to_string(), value.into());
        self
    }

    /// Records only the first eight characters of a ticket, code or token.
    pub fn secret(self, key: &str, secret: &str) -> Self {
        let prefix = secret_prefix(secret);
        self.detail(key, prefix)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditFilter {
    pub kind: Option<AuditKind>,
    pub uid: Option<String>,
    /// Inclusive bounds in unix milliseconds.
    pub since: Option<i64>,
    pub until: Option<i64>,
    pub limit: Option<usize>,
}

impl AuditFilter {
    fn accepts(&self, e: &AuditEvent) -> bool {
        self.kind.map_or(true, |k| e.kind == k)
            && self.uid.as_ref().map_or(true, |u| e.uid.as_ref() == Some(u))
            && self.since.map_or(true, |s| e.ts >= s)
            && self.until.map_or(true, |u| e.ts <= u)
    }
}

pub const DEFAULT_QUERY_LIMIT: usize = 1000;

enum Sink {
    File { path: PathBuf, file: Mutex<File> },
    Stderr,
    Memory(Mutex<Vec<String>>),
}

pub struct Accounting {
    sink: Sink,
    clock: SharedClock,
}

impl Accounting {
    pub fn to_file(path: impl AsRef<Path>, clock: SharedClock) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            sink: Sink::File {
                path,
                file: Mutex::new(file),
            },
            clock,
        })
    }

    pub fn to_stderr(clock: SharedClock) -> Self {
        Self {
            sink: Sink::Stderr,
            clock,
        }
    }

    pub fn in_memory(clock: SharedClock) -> Self {
        Self {
            sink: Sink::Memory(Mutex::new(Vec::new())),
            clock,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Appends one event. Sink failures never propagate: the line goes to
    /// stderr instead and the caller carries on.
    pub fn emit(&self, mut event: AuditEvent) {
        event.ts = self.clock.now_millis();
        let line = serde_json::to_string(&event).expect("audit events serialize");
        match &self.sink {
            Sink::File { file, .. } => {
                let mut file = file.lock();
                let res = writeln!(file, "{line}").and_then(|_| {
                    if event.kind.is_durable() {
                        file.sync_data()
                    } else {
                        Ok(())
                    }
                });
                if let Err(e) = res {
                    tracing::error!(error = %e, "audit sink write failed");
                    eprintln!("{line}");
                }
            }
            Sink::Stderr => eprintln!("{line}"),
            Sink::Memory(lines) => lines.lock().push(line),
        }
    }

    fn raw_lines(&self) -> io::Result<Vec<String>> {
        match &self.sink {
            Sink::File { path, file } => {
                // hold the writer so we never read a half-written line
                let _guard = file.lock();
                let f = match File::open(path) {
                    Ok(f) => f,
                    Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
                    Err(e) => return Err(e),
                };
                BufReader::new(f).lines().collect()
            }
            Sink::Stderr => Ok(Vec::new()),
            Sink::Memory(lines) => Ok(lines.lock().clone()),
        }
    }

    /// All events in emission order.
    pub fn events(&self) -> io::Result<Vec<AuditEvent>> {
        Ok(self
            .raw_lines()?
            .iter()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }

    /// Filtered events, newest first.
    pub fn query(&self, filter: &AuditFilter) -> io::Result<Vec<AuditEvent>> {
        if let (Some(s), Some(u)) = (filter.since, filter.until) {
            if s > u {
                return Ok(Vec::new());
            }
        }
        let limit = filter.limit.unwrap_or(DEFAULT_QUERY_LIMIT);
        let mut out: Vec<AuditEvent> = self
            .events()?
            .into_iter()
            .filter(|e| filter.accepts(e))
            .collect();
        out.reverse();
        out.truncate(limit);
        Ok(out)
    }

    /// Raw sink contents, used by secrecy scans.
    pub fn raw_text(&self) -> io::Result<String> {
        Ok(self.raw_lines()?.join("\n"))
    }
}

pub type SharedAccounting = Arc<Accounting>;
