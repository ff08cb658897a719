//! Plugins hooked into the login and logout lifecycle.
//!
//! Plugins are registered in process against named entry points and run in
//! registration order. A plugin that errors or panics is reported with a
//! `plugin_error` audit event and skipped; a plugin that wants to stop a
//! login must return [`Outcome::Abort`].

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::accounting::{AuditEvent, AuditKind, SharedAccounting};
use crate::config::CompiledConfig;
use crate::rules::RequestInfo;
use crate::session::Session;

pub mod adaptive;
pub mod bruteforce;
pub mod checkuser;
pub mod notification;

pub use adaptive::AdaptativeAuthLevel;
pub use bruteforce::BruteForceProtection;
pub use checkuser::{check_user, CheckUserError, CheckUserResult};
pub use notification::{Notification, NotificationPlugin, NotificationStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EntryPoint {
    BeforeAuth,
    AfterAuthSuccess,
    AfterAuthFailure,
    AfterSessionCreate,
    EndSession,
}

impl fmt::Display for EntryPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntryPoint::BeforeAuth => "beforeAuth",
            EntryPoint::AfterAuthSuccess => "afterAuthSuccess",
            EntryPoint::AfterAuthFailure => "afterAuthFailure",
            EntryPoint::AfterSessionCreate => "afterSessionCreate",
            EntryPoint::EndSession => "endSession",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbortReason {
    AccountLocked { until: i64 },
    Other(String),
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::AccountLocked { .. } => f.write_str("account locked"),
            AbortReason::Other(reason) => f.write_str(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Continue,
    Abort(AbortReason),
}

pub struct HookContext<'a> {
    pub cfg: &'a CompiledConfig,
    pub now: i64,
    pub uid: &'a str,
    pub request: &'a RequestInfo,
    /// Present at afterSessionCreate and endSession.
    pub session: Option<&'a mut Session>,
    /// Filled by the notification plugin at afterAuthSuccess.
    pub notices: Vec<Notification>,
}

impl<'a> HookContext<'a> {
    pub fn new(cfg: &'a CompiledConfig, now: i64, uid: &'a str, request: &'a RequestInfo) -> Self {
        Self {
            cfg,
            now,
            uid,
            request,
            session: None,
            notices: Vec::new(),
        }
    }

    pub fn with_session(mut self, session: &'a mut Session) -> Self {
        self.session = Some(session);
        self
    }
}

pub type PluginError = Box<dyn std::error::Error + Send + Sync>;

pub trait Plugin: Send + Sync {
    fn name(&self) -> &str;
    fn entry_points(&self) -> &[EntryPoint];
    fn run(&self, entry: EntryPoint, ctx: &mut HookContext<'_>) -> Result<Outcome, PluginError>;
}

pub struct PluginEngine {
    plugins: Vec<Arc<dyn Plugin>>,
    audit: SharedAccounting,
}

impl PluginEngine {
    pub fn new(audit: SharedAccounting) -> Self {
        Self {
            plugins: Vec::new(),
            audit,
        }
    }

    pub fn register(&mut self, plugin: Arc<dyn Plugin>) -> &mut Self {
        self.plugins.push(plugin);
        self
    }

    pub fn plugin_names(&self) -> Vec<&str> {
        self.plugins.iter().map(|p| p.name()).collect()
    }

    /// Runs every plugin registered for `entry` until one aborts.
    pub fn run(&self, entry: EntryPoint, ctx: &mut HookContext<'_>) -> Outcome {
        for plugin in self.plugins.iter().filter(|p| p.entry_points().contains(&entry)) {
            let result = catch_unwind(AssertUnwindSafe(|| plugin.run(entry, ctx)));
            let error = match result {
                Ok(Ok(Outcome::Continue)) => continue,
                Ok(Ok(abort)) => return abort,
                Ok(Err(e)) => e.to_string(),
                Err(panic) => panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into()),
            };
            tracing::warn!(plugin = plugin.name(), %entry, %error, "plugin failed");
            self.audit.emit(
                AuditEvent::new(AuditKind::PluginError)
                    .uid(ctx.uid)
                    .ip(ctx.request.ip.map(|ip| ip.to_string()).unwrap_or_default())
                    .detail("plugin", plugin.name())
                    .detail("entry_point", entry.to_string())
                    .detail("error", error),
            );
        }
        Outcome::Continue
    }
}
