//! Global configuration: the JSON document edited through the Manager, its
//! validation, and the versioned store that swaps running snapshots.
//!
//! [`compile`] is the only validation routine. Loading from disk, the CLI
//! `check-config` command and Manager API writes all go through it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::accounting::{AuditEvent, AuditKind, Accounting};
use crate::rules::{
    parse_rule, AccessRules, ConfigLists, HeaderTemplates, Rule, RuleConfigError,
};
use crate::session::BackendKind;
use crate::token::{TokenKey, DEFAULT_SERVICE_TOKEN_MAX_AGE};

pub const CONFIG_FILE: &str = "lemonldap-ng.json";
pub const ARCHIVE_DIR: &str = "archive";
pub const DEFAULT_COOKIE_NAME: &str = "lemonldap";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HandlerType {
    #[default]
    Main,
    AuthBasic,
    SecureToken,
    ServiceToken,
    DevOps,
    OAuth2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub uri: String,
    pub rule: String,
}

fn default_deny() -> String {
    "deny".into()
}
fn default_st_max_age() -> i64 {
    DEFAULT_SERVICE_TOKEN_MAX_AGE
}
fn default_devops_ttl() -> i64 {
    600
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VHostConfig {
    pub vhost: String,
    #[serde(default)]
    pub handler_type: HandlerType,
    /// Evaluated in order; the first matching URI regex wins.
    #[serde(default)]
    pub rules: Vec<RuleConfig>,
    #[serde(default = "default_deny")]
    pub default_rule: String,
    #[serde(default)]
    pub headers: IndexMap<String, String>,
    #[serde(default)]
    pub required_auth_level: u32,
    pub upstream: String,
    /// Downstream vhosts this application may call with a ServiceToken.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub service_token_targets: Vec<String>,
    #[serde(default = "default_st_max_age")]
    pub service_token_max_age: i64,
    #[serde(default = "default_devops_ttl")]
    pub devops_cache_ttl: i64,
}

macro_rules! default_fn {
    ($name:ident, $ty:ty, $val:expr) => {
        fn $name() -> $ty {
            $val
        }
    };
}

default_fn!(default_cookie, String, DEFAULT_COOKIE_NAME.into());
default_fn!(default_true, bool, true);
default_fn!(default_timeout, i64, 72_000);
default_fn!(default_cache_ttl, i64, crate::session::DEFAULT_HANDLER_CACHE_TTL);
default_fn!(default_60, i64, 60);
default_fn!(default_3600, i64, 3600);
default_fn!(default_refresh, i64, 30 * 24 * 3600);
default_fn!(default_5, u32, 5);
default_fn!(default_300, i64, 300);
default_fn!(default_600, i64, 600);
default_fn!(default_1, u32, 1);
default_fn!(default_2, u32, 2);
default_fn!(default_6, u32, 6);
default_fn!(default_30u, u64, 30);
default_fn!(default_1u, u64, 1);
default_fn!(default_issuer, String, "LLNG".into());
default_fn!(default_https, String, "https".into());
default_fn!(default_upstream_timeout, u64, 10_000);
default_fn!(default_fetch_timeout, u64, 2_000);
default_fn!(default_realm, String, "LLNG".into());

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMaterial {
    /// 64 hex characters; seals ServiceTokens, SecureToken cookies and
    /// OAuth2 access tokens.
    pub token_key: String,
    /// PEM file holding the id_token signing key, generated on first start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oidc_signing_key: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSettings {
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout: i64,
    #[serde(default = "default_cache_ttl")]
    pub handler_cache_ttl: i64,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Memory,
            root: None,
            timeout: default_timeout(),
            handler_cache_ttl: default_cache_ttl(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AccountingSettings {
    /// Audit sink; stderr when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OidcClientConfig {
    pub client_id: String,
    /// `sha256:<hex>` of the client secret.
    pub client_secret_hash: String,
    pub redirect_uris: Vec<String>,
    #[serde(default)]
    pub allowed_scopes: Vec<String>,
    #[serde(default = "default_3600")]
    pub id_token_ttl: i64,
    #[serde(default = "default_3600")]
    pub access_ttl: i64,
    #[serde(default = "default_refresh")]
    pub refresh_ttl: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OidcSettings {
    /// Defaults to the portal URL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issuer: Option<String>,
    #[serde(default)]
    pub clients: Vec<OidcClientConfig>,
    #[serde(default = "default_60")]
    pub code_ttl: i64,
    /// Allows `http://` redirect URIs on loopback hosts.
    #[serde(default)]
    pub dev_mode: bool,
}

impl Default for OidcSettings {
    fn default() -> Self {
        Self {
            issuer: None,
            clients: Vec::new(),
            code_ttl: default_60(),
            dev_mode: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasSettings {
    /// Registered service URL prefixes.
    #[serde(default)]
    pub services: Vec<String>,
    #[serde(default = "default_60")]
    pub ticket_ttl: i64,
}

impl Default for CasSettings {
    fn default() -> Self {
        Self {
            services: Vec::new(),
            ticket_ttl: default_60(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BruteForceSettings {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_5")]
    pub max_failures: u32,
    #[serde(default = "default_300")]
    pub window_seconds: i64,
    #[serde(default = "default_300")]
    pub lock_seconds: i64,
}

impl Default for BruteForceSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            max_failures: 5,
            window_seconds: 300,
            lock_seconds: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelAction {
    /// Added to the current level (floored at 0).
    Delta(i64),
    /// Replaces the current level.
    Set(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelRule {
    pub condition: String,
    #[serde(flatten)]
    pub action: LevelAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MfaSettings {
    #[serde(default = "default_1")]
    pub password_level: u32,
    #[serde(default = "default_2")]
    pub totp_level: u32,
    #[serde(default = "default_2")]
    pub mail_level: u32,
    /// Offer mail codes to users with a mail address and no TOTP device.
    #[serde(default)]
    pub mail_enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mail_spool: Option<PathBuf>,
    #[serde(default = "default_issuer")]
    pub totp_issuer: String,
    #[serde(default = "default_6")]
    pub totp_digits: u32,
    #[serde(default = "default_30u")]
    pub totp_step: u64,
    #[serde(default = "default_1u")]
    pub totp_skew: u64,
    #[serde(default = "default_300")]
    pub pending_login_ttl: i64,
    #[serde(default = "default_600")]
    pub mail_code_ttl: i64,
}

impl Default for MfaSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ListenSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manager: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewaySettings {
    /// Scheme used to rebuild the original URL of a protected request.
    #[serde(default = "default_https")]
    pub public_scheme: String,
    #[serde(default = "default_upstream_timeout")]
    pub upstream_timeout_ms: u64,
    #[serde(default = "default_fetch_timeout")]
    pub devops_fetch_timeout_ms: u64,
    #[serde(default = "default_realm")]
    pub basic_realm: String,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalConfig {
    #[serde(default)]
    pub cfg_num: u64,
    /// Cookie domain, e.g. `.example.com`.
    pub sso_domain: String,
    #[serde(default = "default_cookie")]
    pub cookie_name: String,
    #[serde(default = "default_true")]
    pub secure_cookie: bool,
    pub portal_url: String,
    pub keys: KeyMaterial,
    #[serde(default)]
    pub sessions: SessionSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users_path: Option<PathBuf>,
    #[serde(default)]
    pub accounting: AccountingSettings,
    #[serde(default)]
    pub vhosts: Vec<VHostConfig>,
    #[serde(default)]
    pub oidc: OidcSettings,
    #[serde(default)]
    pub cas: CasSettings,
    #[serde(default)]
    pub bruteforce: BruteForceSettings,
    #[serde(default)]
    pub level_rules: Vec<LevelRule>,
    #[serde(default)]
    pub checkuser_admins: Vec<String>,
    #[serde(default)]
    pub manager_admins: Vec<String>,
    #[serde(default)]
    pub mfa: MfaSettings,
    #[serde(default)]
    pub listen: ListenSettings,
    #[serde(default)]
    pub gateway: GatewaySettings,
}

/// One validation failure, located by a dotted path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigError {
    pub location: String,
    pub message: String,
}

impl ConfigError {
    fn new(location: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            location: location.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct CompiledVHost {
    pub config: VHostConfig,
    pub access: AccessRules,
    pub headers: HeaderTemplates,
}

#[derive(Debug, Clone)]
pub struct CompiledLevelRule {
    pub condition: Rule,
    pub action: LevelAction,
}

/// A validated configuration snapshot with everything pre-parsed.
#[derive(Debug, Clone)]
pub struct CompiledConfig {
    pub raw: GlobalConfig,
    vhosts: HashMap<String, CompiledVHost>,
    pub token_key: TokenKey,
    pub level_rules: Vec<CompiledLevelRule>,
    pub lists: ConfigLists,
    pub manager_rule: Rule,
    pub checkuser_rule: Rule,
    pub portal_host: String,
}

pub const MANAGER_RULE: &str = "$uid in cfg.manager_admins";
pub const CHECKUSER_RULE: &str = "$uid in cfg.checkuser_admins";

impl CompiledConfig {
    pub fn cfg_num(&self) -> u64 {
        self.raw.cfg_num
    }

    pub fn vhost(&self, host: &str) -> Option<&CompiledVHost> {
        self.vhosts.get(&host.to_ascii_lowercase())
    }

    pub fn vhosts(&self) -> impl Iterator<Item = &CompiledVHost> {
        self.raw
            .vhosts
            .iter()
            .filter_map(|v| self.vhosts.get(&v.vhost.to_ascii_lowercase()))
    }

    pub fn oidc_client(&self, client_id: &str) -> Option<&OidcClientConfig> {
        self.raw.oidc.clients.iter().find(|c| c.client_id == client_id)
    }

    pub fn issuer(&self) -> String {
        self.raw
            .oidc
            .issuer
            .clone()
            .unwrap_or_else(|| self.raw.portal_url.trim_end_matches('/').to_string())
    }

    pub fn portal_base(&self) -> &str {
        self.raw.portal_url.trim_end_matches('/')
    }
}

fn check_https_uri(uri: &str, dev_mode: bool) -> Result<(), String> {
    let url = Url::parse(uri).map_err(|e| format!("invalid URL {uri:?}: {e}"))?;
    match url.scheme() {
        "https" => Ok(()),
        "http" if dev_mode
            && matches!(url.host_str(), Some("localhost" | "127.0.0.1" | "[::1]")) =>
        {
            Ok(())
        }
        _ => Err(format!("redirect URI {uri:?} must be absolute https")),
    }
}

fn push_rule_errors(errors: &mut Vec<ConfigError>, base: &str, rule_errors: Vec<RuleConfigError>) {
    for e in rule_errors {
        match e {
            RuleConfigError::Regex { key, message } => {
                errors.push(ConfigError::new(format!("{base}.rules[{key:?}]"), format!("invalid regex: {message}")))
            }
            RuleConfigError::Rule { key, error } if key == "default" => {
                errors.push(ConfigError::new(format!("{base}.default_rule"), error))
            }
            RuleConfigError::Rule { key, error } => {
                errors.push(ConfigError::new(format!("{base}.rules[{key:?}]"), error))
            }
        }
    }
}

/// Validates a whole configuration, collecting every error.
pub fn compile(raw: GlobalConfig) -> Result<CompiledConfig, Vec<ConfigError>> {
    let mut errors = Vec::new();

    if raw.sso_domain.trim().is_empty() {
        errors.push(ConfigError::new("sso_domain", "must not be empty"));
    }
    if raw.cookie_name.is_empty() || !crate::rules::is_valid_header_name(&raw.cookie_name) {
        errors.push(ConfigError::new("cookie_name", "invalid cookie name"));
    }
    let portal_host = match Url::parse(&raw.portal_url) {
        Ok(u) if matches!(u.scheme(), "http" | "https") && u.host_str().is_some() => {
            u.host_str().unwrap_or_default().to_ascii_lowercase()
        }
        _ => {
            errors.push(ConfigError::new("portal_url", "must be an absolute http(s) URL"));
            String::new()
        }
    };
    let token_key = match TokenKey::from_hex(&raw.keys.token_key) {
        Ok(k) => Some(k),
        Err(e) => {
            errors.push(ConfigError::new("keys.token_key", e));
            None
        }
    };
    if raw.sessions.timeout <= 0 {
        errors.push(ConfigError::new("sessions.timeout", "must be positive"));
    }
    if raw.sessions.handler_cache_ttl < 0 {
        errors.push(ConfigError::new("sessions.handler_cache_ttl", "must not be negative"));
    }
    if raw.sessions.backend == BackendKind::File && raw.sessions.root.is_none() {
        errors.push(ConfigError::new("sessions.root", "required by the file backend"));
    }

    let mut vhosts = HashMap::new();
    for v in &raw.vhosts {
        let base = format!("vhosts[{}]", v.vhost);
        let name = v.vhost.to_ascii_lowercase();
        if name.is_empty() || name.contains(['/', ':', ' ']) {
            errors.push(ConfigError::new(&base, "invalid virtual host name"));
        }
        if vhosts.contains_key(&name) {
            errors.push(ConfigError::new(&base, format!("duplicate virtual host {}", v.vhost)));
            continue;
        }
        if Url::parse(&v.upstream).map(|u| u.host_str().is_none()).unwrap_or(true) {
            errors.push(ConfigError::new(format!("{base}.upstream"), format!("invalid URL {:?}", v.upstream)));
        }
        if v.service_token_max_age < 0 {
            errors.push(ConfigError::new(format!("{base}.service_token_max_age"), "must not be negative"));
        }
        if v.devops_cache_ttl <= 0 {
            errors.push(ConfigError::new(format!("{base}.devops_cache_ttl"), "must be positive"));
        }
        let access = AccessRules::compile(
            v.rules.iter().map(|r| (r.uri.as_str(), r.rule.as_str())),
            &v.default_rule,
        );
        let headers = HeaderTemplates::compile(&v.headers);
        match (access, headers) {
            (Ok(access), Ok(headers)) => {
                vhosts.insert(
                    name,
                    CompiledVHost {
                        config: v.clone(),
                        access,
                        headers,
                    },
                );
            }
            (a, h) => {
                if let Err(e) = a {
                    push_rule_errors(&mut errors, &base, e);
                }
                if let Err(hs) = h {
                    for e in hs {
                        errors.push(ConfigError::new(format!("{base}.headers"), e));
                    }
                }
            }
        }
    }

    let mut level_rules = Vec::new();
    for (i, lr) in raw.level_rules.iter().enumerate() {
        match parse_rule(&lr.condition) {
            Ok(condition) => level_rules.push(CompiledLevelRule {
                condition,
                action: lr.action,
            }),
            Err(e) => errors.push(ConfigError::new(format!("level_rules[{i}].condition"), e)),
        }
    }

    let mut client_ids = HashSet::new();
    for c in &raw.oidc.clients {
        let base = format!("oidc.clients[{}]", c.client_id);
        if c.client_id.is_empty() || !client_ids.insert(c.client_id.clone()) {
            errors.push(ConfigError::new(&base, "missing or duplicate client_id"));
        }
        match c.client_secret_hash.strip_prefix("sha256:") {
            Some(h) if h.len() == 64 && hex::decode(h).is_ok() => {}
            _ => errors.push(ConfigError::new(
                format!("{base}.client_secret_hash"),
                "expected sha256:<64 hex>",
            )),
        }
        if c.redirect_uris.is_empty() {
            errors.push(ConfigError::new(format!("{base}.redirect_uris"), "at least one is required"));
        }
        for uri in &c.redirect_uris {
            if let Err(e) = check_https_uri(uri, raw.oidc.dev_mode) {
                errors.push(ConfigError::new(format!("{base}.redirect_uris"), e));
            }
        }
        if c.id_token_ttl <= 0 || c.access_ttl <= 0 || c.refresh_ttl <= 0 {
            errors.push(ConfigError::new(&base, "token lifetimes must be positive"));
        }
    }
    if raw.oidc.code_ttl <= 0 {
        errors.push(ConfigError::new("oidc.code_ttl", "must be positive"));
    }
    for (i, s) in raw.cas.services.iter().enumerate() {
        if Url::parse(s).is_err() {
            errors.push(ConfigError::new(format!("cas.services[{i}]"), format!("invalid URL {s:?}")));
        }
    }
    if raw.cas.ticket_ttl <= 0 {
        errors.push(ConfigError::new("cas.ticket_ttl", "must be positive"));
    }
    if raw.bruteforce.max_failures == 0 {
        errors.push(ConfigError::new("bruteforce.max_failures", "must be at least 1"));
    }
    if !(6..=9).contains(&raw.mfa.totp_digits) || raw.mfa.totp_step == 0 {
        errors.push(ConfigError::new("mfa", "totp_digits must be 6..9 and totp_step positive"));
    }

    if !errors.is_empty() {
        return Err(errors);
    }
    let lists: ConfigLists = BTreeMap::from([
        ("manager_admins".to_string(), raw.manager_admins.clone()),
        ("checkuser_admins".to_string(), raw.checkuser_admins.clone()),
    ]);
    Ok(CompiledConfig {
        vhosts,
        token_key: token_key.expect("checked above"),
        level_rules,
        lists,
        manager_rule: parse_rule(MANAGER_RULE).expect("static rule"),
        checkuser_rule: parse_rule(CHECKUSER_RULE).expect("static rule"),
        portal_host,
        raw,
    })
}

#[derive(Debug, Error)]
pub enum ConfigLoadError {
    #[error("config I/O: {0}")]
    Io(#[from] io::Error),
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ConfigError>),
}

pub fn parse_and_compile(text: &str) -> Result<CompiledConfig, ConfigLoadError> {
    let raw: GlobalConfig = serde_json::from_str(text)?;
    compile(raw).map_err(ConfigLoadError::Invalid)
}

pub fn load(path: impl AsRef<Path>) -> Result<CompiledConfig, ConfigLoadError> {
    parse_and_compile(&fs::read_to_string(path)?)
}

#[derive(Debug, Error)]
pub enum CommitError {
    #[error("validation failed")]
    Invalid(Vec<ConfigError>),
    #[error("configuration changed concurrently (current cfg_num {current})")]
    Conflict { current: u64 },
    #[error("config I/O: {0}")]
    Io(#[from] io::Error),
}

/// Holds the running snapshot. Readers clone the `Arc` once per request and
/// never see a partially applied commit.
pub struct ConfigStore {
    dir: Option<PathBuf>,
    file_name: String,
    current: RwLock<Arc<CompiledConfig>>,
    commit_lock: Mutex<()>,
}

impl ConfigStore {
    pub fn from_compiled(cfg: CompiledConfig) -> Self {
        Self {
            dir: None,
            file_name: CONFIG_FILE.into(),
            current: RwLock::new(Arc::new(cfg)),
            commit_lock: Mutex::new(()),
        }
    }

    /// Opens `<dir>/lemonldap-ng.json`, or the given file directly. Commits
    /// are written back to that file and archived as
    /// `<dir>/archive/<cfg_num>.json`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ConfigLoadError> {
        let path = path.into();
        let (dir, file_name) = if path.is_dir() {
            (path, CONFIG_FILE.to_string())
        } else {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| CONFIG_FILE.into());
            let dir = match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            (dir, name)
        };
        let cfg = load(dir.join(&file_name))?;
        Ok(Self {
            dir: Some(dir),
            file_name,
            current: RwLock::new(Arc::new(cfg)),
            commit_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn file(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&self.file_name))
    }

    pub fn current(&self) -> Arc<CompiledConfig> {
        self.current.read().clone()
    }

    /// Validates and installs `new`. `expected` is an optional optimistic
    /// concurrency precondition on the running cfg_num.
    pub fn commit(
        &self,
        mut new: GlobalConfig,
        expected: Option<u64>,
        actor: &str,
        audit: &Accounting,
    ) -> Result<u64, CommitError> {
        let _guard = self.commit_lock.lock();
        let old = self.current();
        if let Some(exp) = expected {
            if exp != old.cfg_num() {
                return Err(CommitError::Conflict {
                    current: old.cfg_num(),
                });
            }
        }
        new.cfg_num = old.cfg_num() + 1;
        let compiled = compile(new).map_err(CommitError::Invalid)?;
        if let Some(dir) = &self.dir {
            let body = serde_json::to_vec_pretty(&compiled.raw).expect("config serializes");
            let archive = dir.join(ARCHIVE_DIR);
            fs::create_dir_all(&archive)?;
            fs::write(archive.join(format!("{}.json", compiled.cfg_num())), &body)?;
            let tmp = dir.join(format!("{}.tmp", self.file_name));
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_data()?;
            fs::rename(tmp, dir.join(&self.file_name))?;
        }
        let num = compiled.cfg_num();
        *self.current.write() = Arc::new(compiled);
        audit.emit(
            AuditEvent::new(AuditKind::AdminChange)
                .uid(actor)
                .detail("cfg_num", num)
                .detail("previous", old.cfg_num()),
        );
        Ok(num)
    }
}
