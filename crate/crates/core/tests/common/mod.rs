#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use llng_core::accounting::{Accounting, AuditKind};
use llng_core::clock::ManualClock;
use llng_core::config::{compile, CompiledConfig};
use llng_core::plugins::{
    AdaptativeAuthLevel, BruteForceProtection, NotificationPlugin, NotificationStore, PluginEngine,
};
use llng_core::portal::mail::MemoryTransport;
use llng_core::portal::users::{HashCost, UserStore};
use llng_core::portal::{Portal, PortalDeps};
use llng_core::rules::RequestInfo;
use llng_core::session::SessionStore;

pub const T0: i64 = 1_700_000_000;

pub fn base_config() -> serde_json::Value {
    serde_json::json!({
        "cfg_num": 1,
        "sso_domain": ".example.com",
        "portal_url": "https://auth.example.com",
        "keys": {"token_key": "42".repeat(32)},
        "vhosts": [
            {
                "vhost": "app1.example.com",
                "rules": [{"uri": "^/admin", "rule": "$uid == \"admin\""}],
                "default_rule": "accept",
                "headers": {"Auth-User": "$uid"},
                "upstream": "http://127.0.0.1:9001"
            },
            {
                "vhost": "secure.example.com",
                "default_rule": "accept",
                "required_auth_level": 1,
                "upstream": "http://127.0.0.1:9002"
            }
        ],
        "mfa": {"mail_enabled": true},
        "manager_admins": ["admin"],
        "checkuser_admins": ["admin"]
    })
}

pub struct Harness {
    pub clock: Arc<ManualClock>,
    pub cfg: CompiledConfig,
    pub portal: Portal,
    pub users: Arc<UserStore>,
    pub sessions: Arc<SessionStore>,
    pub audit: Arc<Accounting>,
    pub mail: Arc<MemoryTransport>,
    pub notifications: Arc<NotificationStore>,
    pub bruteforce: Arc<BruteForceProtection>,
}

pub fn harness_with(cfg: serde_json::Value, extra: impl FnOnce(&mut PluginEngine)) -> Harness {
    let clock = Arc::new(ManualClock::at(T0));
    let cfg = compile(serde_json::from_value(cfg).unwrap()).unwrap();
    let users = Arc::new(UserStore::in_memory(HashCost::Low));
    users
        .add_user("alice", "alice-pw", BTreeMap::from([("cn".into(), "Alice".into())]), None)
        .unwrap();
    users
        .add_user("bob", "bob-pw", BTreeMap::new(), Some("bob@example.com".into()))
        .unwrap();
    users.add_user("admin", "admin-pw", BTreeMap::new(), None).unwrap();
    let sessions = Arc::new(SessionStore::in_memory(clock.clone()));
    let audit = Arc::new(Accounting::in_memory(clock.clone()));
    let mail = Arc::new(MemoryTransport::new());
    let notifications = Arc::new(NotificationStore::in_memory(sessions.clone()));
    let bruteforce = Arc::new(BruteForceProtection::new(users.clone()));
    let mut engine = PluginEngine::new(audit.clone());
    engine
        .register(bruteforce.clone())
        .register(Arc::new(NotificationPlugin::new(notifications.clone())))
        .register(Arc::new(AdaptativeAuthLevel));
    extra(&mut engine);
    let portal = Portal::new(
        PortalDeps {
            sessions: sessions.clone(),
            users: users.clone(),
            plugins: Arc::new(engine),
            notifications: notifications.clone(),
            audit: audit.clone(),
            clock: clock.clone(),
            mail: mail.clone(),
        },
        cfg.raw.mfa.mail_code_ttl,
    );
    Harness {
        clock,
        cfg,
        portal,
        users,
        sessions,
        audit,
        mail,
        notifications,
        bruteforce,
    }
}

pub fn harness() -> Harness {
    harness_with(base_config(), |_| {})
}

pub fn login_request(ip: &str) -> RequestInfo {
    RequestInfo::new("auth.example.com", "/login", Some(ip.parse().unwrap()))
}

impl Harness {
    pub fn kinds(&self) -> Vec<AuditKind> {
        self.audit.events().unwrap().iter().map(|e| e.kind).collect()
    }
}
