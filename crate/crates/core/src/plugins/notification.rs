//! Messages shown to users at login. Per-user display and acceptance state
//! lives in the user's persistent session as `_notification_<id>`.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::RwLock;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EntryPoint, HookContext, Outcome, Plugin, PluginError};
use crate::session::{SessionError, SessionStore};

pub const ALL_USERS: &str = "_all";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub id: String,
    /// A uid or `_all`.
    pub target: String,
    pub title: String,
    pub body: String,
    pub created_at: i64,
    pub require_accept: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum UserState {
    Pending,
    Seen { at: i64 },
    Accepted { at: i64 },
}

#[derive(Debug, Error)]
pub enum NotificationError {
    #[error("unknown notification {0}")]
    Unknown(String),
    #[error("notification is not addressed to this user")]
    NotAddressed,
    #[error("title must not be empty")]
    EmptyTitle,
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("notification store: {0}")]
    Io(#[from] io::Error),
    #[error("notification store format: {0}")]
    Format(#[from] serde_json::Error),
}

pub struct NotificationStore {
    path: Option<PathBuf>,
    items: RwLock<Vec<Notification>>,
    sessions: Arc<SessionStore>,
}

fn state_key(id: &str) -> String {
    format!("_notification_{id}")
}

fn parse_state(value: Option<&str>) -> UserState {
    let Some(value) = value else {
        return UserState::Pending;
    };
    match value.split_once(':') {
        Some(("accepted", at)) => UserState::Accepted {
            at: at.parse().unwrap_or(0),
        },
        Some(("seen", at)) => UserState::Seen {
            at: at.parse().unwrap_or(0),
        },
        _ => UserState::Pending,
    }
}

impl NotificationStore {
    pub fn in_memory(sessions: Arc<SessionStore>) -> Self {
        Self {
            path: None,
            items: RwLock::new(Vec::new()),
            sessions,
        }
    }

    /// Notifications are kept as a JSON array at `path`.
    pub fn open(path: impl Into<PathBuf>, sessions: Arc<SessionStore>) -> Result<Self, NotificationError> {
        let path = path.into();
        let items = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            path: Some(path),
            items: RwLock::new(items),
            sessions,
        })
    }

    fn persist(&self, items: &[Notification]) -> Result<(), NotificationError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(items)?)?;
        f.sync_data()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn create(
        &self,
        target: &str,
        title: &str,
        body: &str,
        require_accept: bool,
        now: i64,
    ) -> Result<Notification, NotificationError> {
        if title.trim().is_empty() {
            return Err(NotificationError::EmptyTitle);
        }
        let mut id = [0u8; 8];
        rand::rngs::OsRng.fill_bytes(&mut id);
        let n = Notification {
            id: hex::encode(id),
            target: if target.is_empty() { ALL_USERS.into() } else { target.to_string() },
            title: title.to_string(),
            body: body.to_string(),
            created_at: now,
            require_accept,
        };
        let mut items = self.items.write();
        items.push(n.clone());
        self.persist(&items)?;
        Ok(n)
    }

    pub fn list(&self) -> Vec<Notification> {
        self.items.read().clone()
    }

    pub fn get(&self, id: &str) -> Option<Notification> {
        self.items.read().iter().find(|n| n.id == id).cloned()
    }

    fn addressed_to(n: &Notification, uid: &str) -> bool {
        n.target == ALL_USERS || n.target == uid
    }

    pub fn state(&self, uid: &str, id: &str) -> Result<UserState, NotificationError> {
        let ps = self.sessions.load_persistent(uid)?;
        Ok(parse_state(ps.attr(&state_key(id))))
    }

    /// Notifications still to show `uid`: never displayed, or displayed but
    /// awaiting acceptance.
    pub fn pending(&self, uid: &str) -> Result<Vec<Notification>, NotificationError> {
        let ps = self.sessions.load_persistent(uid)?;
        Ok(self
            .items
            .read()
            .iter()
            .filter(|n| Self::addressed_to(n, uid))
            .filter(|n| match parse_state(ps.attr(&state_key(&n.id))) {
                UserState::Pending => true,
                UserState::Seen { .. } => n.require_accept,
                UserState::Accepted { .. } => false,
            })
            .cloned()
            .collect())
    }

    /// Marks informational notifications seen. Acceptance is never
    /// downgraded.
    pub fn mark_seen(&self, uid: &str, ids: &[String], now: i64) -> Result<(), NotificationError> {
        let mut ps = self.sessions.load_persistent(uid)?;
        let mut changed = false;
        for id in ids {
            let key = state_key(id);
            if parse_state(ps.attr(&key)) == UserState::Pending {
                ps.attributes.insert(key, format!("seen:{now}"));
                changed = true;
            }
        }
        if changed {
            self.sessions.save_persistent(&ps)?;
        }
        Ok(())
    }

    /// Records acceptance; returns false if it was already accepted.
    pub fn accept(&self, uid: &str, id: &str, now: i64) -> Result<bool, NotificationError> {
        let n = self.get(id).ok_or_else(|| NotificationError::Unknown(id.to_string()))?;
        if !Self::addressed_to(&n, uid) {
            return Err(NotificationError::NotAddressed);
        }
        let mut ps = self.sessions.load_persistent(uid)?;
        let key = state_key(id);
        if matches!(parse_state(ps.attr(&key)), UserState::Accepted { .. }) {
            return Ok(false);
        }
        ps.attributes.insert(key, format!("accepted:{now}"));
        self.sessions.save_persistent(&ps)?;
        Ok(true)
    }
}

/// Collects pending notifications at afterAuthSuccess; the portal shows them
/// and withholds the redirect while any `require_accept` one is unaccepted.
pub struct NotificationPlugin {
    store: Arc<NotificationStore>,
}

impl NotificationPlugin {
    pub fn new(store: Arc<NotificationStore>) -> Self {
        Self { store }
    }
}

impl Plugin for NotificationPlugin {
    fn name(&self) -> &str {
        "Notification"
    }

    fn entry_points(&self) -> &[EntryPoint] {
        &[EntryPoint::AfterAuthSuccess]
    }

    fn run(&self, _: EntryPoint, ctx: &mut HookContext<'_>) -> Result<Outcome, PluginError> {
        ctx.notices = self.store.pending(ctx.uid)?;
        Ok(Outcome::Continue)
    }
}
