use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use llng_core::accounting::{Accounting, SharedAccounting};
use llng_core::clock::{SharedClock, SystemClock};
use llng_core::config::{self, CompiledConfig, ConfigLoadError, ConfigStore};
use llng_core::devops::DevOpsCache;
use llng_core::federation::cas::CasServer;
use llng_core::federation::oidc::{OidcKeys, OidcProvider};
use llng_core::plugins::{
    AdaptativeAuthLevel, BruteForceProtection, NotificationPlugin, NotificationStore, Plugin,
    PluginEngine,
};
use llng_core::portal::mail::{MailTransport, MemoryTransport, SpoolTransport};
use llng_core::portal::users::{HashCost, UserStore};
use llng_core::portal::{Portal, PortalDeps};
use llng_core::session::{BackendKind, FileBackend, HandlerCache, MemoryBackend, SessionBackend, SessionStore};
use parking_lot::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigLoadError),
    #[error("{what}: {source}")]
    Io {
        what: &'static str,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

/// Everything the three HTTP services share. One per process.
pub struct App {
    pub config: Arc<ConfigStore>,
    pub clock: SharedClock,
    pub sessions: Arc<SessionStore>,
    pub cache: HandlerCache,
    pub users: Arc<UserStore>,
    pub audit: SharedAccounting,
    pub portal: Portal,
    pub notifications: Arc<NotificationStore>,
    pub bruteforce: Arc<BruteForceProtection>,
    pub cas: CasServer,
    pub oidc: OidcProvider,
    pub devops: DevOpsCache,
    pub http: reqwest::Client,
    flights: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

pub type SharedApp = Arc<App>;

impl App {
    pub fn cfg(&self) -> Arc<CompiledConfig> {
        self.config.current()
    }

    /// The per-vhost lock that keeps DevOps refreshes single-flight.
    pub(crate) fn flight(&self, vhost: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.flights
            .lock()
            .entry(vhost.to_ascii_lowercase())
            .or_default()
            .clone()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_base(config: &ConfigStore) -> PathBuf {
    config.dir().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

/// The session store the configuration describes. File roots default to
/// `<config dir>/sessions`.
pub fn open_sessions(config: &ConfigStore, clock: SharedClock) -> Result<Arc<SessionStore>, BuildError> {
    let cfg = config.current();
    let settings = &cfg.raw.sessions;
    let backend: Arc<dyn SessionBackend> = match settings.backend {
        BackendKind::Memory => Arc::new(MemoryBackend::new()),
        BackendKind::File => {
            let base = config_base(config);
            let root = settings
                .root
                .as_deref()
                .map(|r| resolve(&base, r))
                .unwrap_or_else(|| base.join("sessions"));
            Arc::new(FileBackend::open(root).map_err(|e| BuildError::Other(e.to_string()))?)
        }
    };
    Ok(Arc::new(SessionStore::new(backend, clock)))
}

/// The file-backed user store, or `None` when `users_path` is unset.
pub fn open_users(config: &ConfigStore, cost: HashCost) -> Result<Option<Arc<UserStore>>, BuildError> {
    let cfg = config.current();
    let Some(p) = &cfg.raw.users_path else {
        return Ok(None);
    };
    let store = UserStore::open(resolve(&config_base(config), p), cost)
        .map_err(|e| BuildError::Other(format!("user store: {e}")))?;
    Ok(Some(Arc::new(store)))
}

/// The audit file the configuration names, or `None` when
/// `accounting.path` is unset.
pub fn open_accounting(config: &ConfigStore, clock: SharedClock) -> Result<Option<Accounting>, BuildError> {
    let cfg = config.current();
    let Some(p) = &cfg.raw.accounting.path else {
        return Ok(None);
    };
    Accounting::to_file(resolve(&config_base(config), p), clock)
        .map(Some)
        .map_err(|source| BuildError::Io { what: "audit sink", source })
}

/// Assembles an [`App`]. Paths in the configuration are relative to the
/// directory holding the configuration file.
pub struct AppBuilder {
    config: ConfigStore,
    clock: Option<SharedClock>,
    hash_cost: HashCost,
    mail: Option<Arc<dyn MailTransport>>,
    users: Option<Arc<UserStore>>,
    audit: Option<SharedAccounting>,
    oidc_keys: Option<OidcKeys>,
    plugins: Vec<Arc<dyn Plugin>>,
}

impl AppBuilder {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, BuildError> {
        Ok(Self::new(ConfigStore::open(path)?))
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, BuildError> {
        let text = value.to_string();
        Ok(Self::new(ConfigStore::from_compiled(config::parse_and_compile(&text)?)))
    }

    pub fn new(config: ConfigStore) -> Self {
        Self {
            config,
            clock: None,
            hash_cost: HashCost::Interactive,
            mail: None,
            users: None,
            audit: None,
            oidc_keys: None,
            plugins: Vec::new(),
        }
    }

    pub fn clock(mut self, clock: SharedClock) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn hash_cost(mut self, cost: HashCost) -> Self {
        self.hash_cost = cost;
        self
    }

    pub fn mail(mut self, mail: Arc<dyn MailTransport>) -> Self {
        self.mail = Some(mail);
        self
    }

    pub fn users(mut self, users: Arc<UserStore>) -> Self {
        self.users = Some(users);
        self
    }

    pub fn audit(mut self, audit: SharedAccounting) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn oidc_keys(mut self, keys: OidcKeys) -> Self {
        self.oidc_keys = Some(keys);
        self
    }

    /// Registered after the built-in plugins.
    pub fn plugin(mut self, plugin: Arc<dyn Plugin>) -> Self {
        self.plugins.push(plugin);
        self
    }

    pub fn build(self) -> Result<App, BuildError> {
        let cfg = self.config.current();
        let raw = &cfg.raw;
        let base = config_base(&self.config);
        let clock: SharedClock = self.clock.unwrap_or_else(|| Arc::new(SystemClock));

        let sessions = open_sessions(&self.config, clock.clone())?;

        let users = match self.users {
            Some(u) => u,
            None => match open_users(&self.config, self.hash_cost)? {
                Some(u) => u,
                None => {
                    tracing::warn!("no users_path configured; the user store is empty and in memory");
                    Arc::new(UserStore::in_memory(self.hash_cost))
                }
            },
        };

        let audit = match self.audit {
            Some(a) => a,
            None => Arc::new(
                open_accounting(&self.config, clock.clone())?
                    .unwrap_or_else(|| Accounting::to_stderr(clock.clone())),
            ),
        };

        let mail: Arc<dyn MailTransport> = match self.mail {
            Some(m) => m,
            None => match &raw.mfa.mail_spool {
                Some(dir) => Arc::new(
                    SpoolTransport::new(resolve(&base, dir))
                        .map_err(|source| BuildError::Io { what: "mail spool", source })?,
                ),
                None => {
                    if raw.mfa.mail_enabled {
                        tracing::warn!("mail second factor enabled without mfa.mail_spool; codes are not delivered");
                    }
                    Arc::new(MemoryTransport::new())
                }
            },
        };

        let notifications = Arc::new(match self.config.dir() {
            Some(dir) => NotificationStore::open(dir.join("notifications.json"), sessions.clone())
                .map_err(|e| BuildError::Other(format!("notification store: {e}")))?,
            None => NotificationStore::in_memory(sessions.clone()),
        });

        let bruteforce = Arc::new(BruteForceProtection::new(users.clone()));
        let mut engine = PluginEngine::new(audit.clone());
        engine
            .register(bruteforce.clone())
            .register(Arc::new(NotificationPlugin::new(notifications.clone())))
            .register(Arc::new(AdaptativeAuthLevel));
        for p in self.plugins {
            engine.register(p);
        }

        let keys = match self.oidc_keys {
            Some(k) => k,
            None => match &raw.keys.oidc_signing_key {
                Some(p) => OidcKeys::load_or_generate(&resolve(&base, p))
                    .map_err(|source| BuildError::Io { what: "OIDC signing key", source })?,
                None => {
                    if !raw.oidc.clients.is_empty() {
                        tracing::warn!("keys.oidc_signing_key unset; id_tokens are signed with a throwaway key");
                    }
                    OidcKeys::generate()
                }
            },
        };

        let http = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .no_proxy()
            .timeout(Duration::from_millis(raw.gateway.upstream_timeout_ms))
            .build()
            .map_err(|e| BuildError::Other(format!("HTTP client: {e}")))?;

        let portal = Portal::new(
            PortalDeps {
                sessions: sessions.clone(),
                users: users.clone(),
                plugins: Arc::new(engine),
                notifications: notifications.clone(),
                audit: audit.clone(),
                clock: clock.clone(),
                mail,
            },
            raw.mfa.mail_code_ttl,
        );

        Ok(App {
            cache: HandlerCache::new(clock.clone(), raw.sessions.handler_cache_ttl),
            cas: CasServer::new(audit.clone()),
            oidc: OidcProvider::new(keys, audit.clone()),
            devops: DevOpsCache::new(),
            flights: Mutex::new(HashMap::new()),
            config: Arc::new(self.config),
            clock,
            sessions,
            users,
            audit,
            portal,
            notifications,
            bruteforce,
            http,
        })
    }
}
