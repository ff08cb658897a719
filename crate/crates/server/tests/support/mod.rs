#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::State;
use axum::http::{Request, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use llng_core::accounting::{Accounting, AuditEvent, AuditKind};
use llng_core::clock::ManualClock;
use llng_core::federation::oidc::hash_client_secret;
use llng_core::portal::mail::MemoryTransport;
use llng_core::portal::users::{HashCost, UserStore};
use llng_server::{AppBuilder, Service, SharedApp};
use parking_lot::Mutex;
use reqwest::header::{HeaderMap, COOKIE, HOST, SET_COOKIE};
use reqwest::{Method, RequestBuilder};
use serde_json::{json, Value};

pub const T0: i64 = 1_700_000_000;
pub const PORTAL_HOST: &str = "auth.example.com";
pub const RP_SECRET: &str = "rp-secret";
pub const CAS_SERVICE: &str = "https://cas-app.example.com/";

#[derive(Debug, Clone)]
pub struct Seen {
    pub method: String,
    pub uri: String,
    pub headers: Vec<(String, String)>,
}

impl Seen {
    pub fn all(&self, name: &str) -> Vec<&str> {
        self.headers
            .iter()
            .filter(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.all(name).first().copied()
    }
}

#[derive(Default)]
struct EchoState {
    seen: Mutex<Vec<Seen>>,
    rules: Mutex<Option<String>>,
    rules_fetches: Mutex<usize>,
}

/// An upstream that records what reaches it and optionally publishes a
/// `rules.json`.
#[derive(Clone)]
pub struct Upstream {
    pub addr: SocketAddr,
    state: Arc<EchoState>,
}

async fn echo(State(st): State<Arc<EchoState>>, req: Request<Body>) -> Response {
    if req.uri().path() == "/rules.json" {
        *st.rules_fetches.lock() += 1;
        return match st.rules.lock().clone() {
            Some(doc) => ([("content-type", "application/json")], doc).into_response(),
            None => StatusCode::NOT_FOUND.into_response(),
        };
    }
    let seen = Seen {
        method: req.method().to_string(),
        uri: req.uri().to_string(),
        headers: req
            .headers()
            .iter()
            .map(|(k, v)| (k.to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
            .collect(),
    };
    st.seen.lock().push(seen);
    ([("x-upstream", "echo")], "hello from upstream\n").into_response()
}

impl Upstream {
    pub async fn start() -> Self {
        let state = Arc::new(EchoState::default());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let router = Router::new().fallback(echo).with_state(state.clone());
        tokio::spawn(async move { axum::serve(listener, router).await });
        Self { addr, state }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn set_rules(&self, doc: Option<&str>) {
        *self.state.rules.lock() = doc.map(str::to_string);
    }

    pub fn rules_fetches(&self) -> usize {
        *self.state.rules_fetches.lock()
    }

    pub fn seen(&self) -> Vec<Seen> {
        self.state.seen.lock().clone()
    }

    pub fn hits(&self) -> usize {
        self.state.seen.lock().len()
    }

    pub fn last(&self) -> Option<Seen> {
        self.state.seen.lock().last().cloned()
    }
}

/// A port nothing listens on.
pub async fn dead_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}

pub fn config(upstream: &str, dead: &str) -> Value {
    json!({
        "cfg_num": 1,
        "sso_domain": ".example.com",
        "portal_url": "https://auth.example.com",
        "keys": {"token_key": "5a".repeat(32)},
        "sessions": {"handler_cache_ttl": 2},
        "vhosts": [
            {
                "vhost": "app1.example.com",
                "rules": [
                    {"uri": "^/admin", "rule": "$uid == \"admin\""},
                    {"uri": "^/public", "rule": "unprotect"}
                ],
                "default_rule": "accept",
                "headers": {"Auth-User": "$uid", "Auth-Cn": "$cn"},
                "upstream": upstream
            },
            {
                "vhost": "chain.example.com",
                "default_rule": "accept",
                "headers": {"Auth-User": "$uid"},
                "upstream": upstream,
                "service_token_targets": ["app2.example.com"]
            },
            {
                "vhost": "app2.example.com",
                "handler_type": "servicetoken",
                "default_rule": "accept",
                "headers": {"Auth-User": "$uid"},
                "upstream": upstream,
                "service_token_max_age": 30
            },
            {
                "vhost": "app3.example.com",
                "handler_type": "servicetoken",
                "default_rule": "accept",
                "headers": {"Auth-User": "$uid"},
                "upstream": upstream
            },
            {
                "vhost": "devops.example.com",
                "handler_type": "devops",
                "upstream": upstream,
                "devops_cache_ttl": 2
            },
            {
                "vhost": "down.example.com",
                "handler_type": "devops",
                "upstream": dead,
                "devops_cache_ttl": 2
            },
            {
                "vhost": "basic.example.com",
                "handler_type": "authbasic",
                "default_rule": "accept",
                "headers": {"Auth-User": "$uid"},
                "upstream": upstream
            },
            {
                "vhost": "api.example.com",
                "handler_type": "oauth2",
                "default_rule": "accept",
                "headers": {"Auth-User": "$uid"},
                "upstream": upstream
            },
            {
                "vhost": "st.example.com",
                "handler_type": "securetoken",
                "default_rule": "accept",
                "headers": {"Auth-User": "$uid"},
                "upstream": upstream
            },
            {
                "vhost": "strong.example.com",
                "default_rule": "accept",
                "required_auth_level": 2,
                "upstream": upstream
            },
            {
                "vhost": "gone.example.com",
                "default_rule": "accept",
                "upstream": dead
            }
        ],
        "oidc": {
            "clients": [{
                "client_id": "rp",
                "client_secret_hash": hash_client_secret(RP_SECRET),
                "redirect_uris": ["https://rp.example.com/cb"],
                "allowed_scopes": ["openid", "profile", "email"],
                "id_token_ttl": 600
            }]
        },
        "cas": {"services": [CAS_SERVICE]},
        "manager_admins": ["admin"],
        "checkuser_admins": ["admin"]
    })
}

pub struct Stack {
    pub app: SharedApp,
    pub clock: Arc<ManualClock>,
    pub audit: Arc<Accounting>,
    pub mail: Arc<MemoryTransport>,
    pub users: Arc<UserStore>,
    pub portal: SocketAddr,
    pub gateway: SocketAddr,
    pub manager: SocketAddr,
    pub upstream: Upstream,
    pub client: reqwest::Client,
}

pub fn users() -> Arc<UserStore> {
    let users = Arc::new(UserStore::in_memory(HashCost::Low));
    users
        .add_user(
            "alice",
            "alice-pw",
            BTreeMap::from([("cn".into(), "Alice Liddell".into())]),
            Some("alice@example.com".into()),
        )
        .unwrap();
    users
        .add_user("bob", "bob-pw", BTreeMap::from([("cn".into(), "Bob".into())]), None)
        .unwrap();
    users.add_user("admin", "admin-pw", BTreeMap::new(), None).unwrap();
    users
}

pub async fn stack() -> Stack {
    stack_with(|_| {}).await
}

/// The full service set on ephemeral ports, with a manual clock at `T0`.
pub async fn stack_with(edit: impl FnOnce(&mut Value)) -> Stack {
    let upstream = Upstream::start().await;
    let mut cfg = config(&upstream.url(), &dead_url().await);
    edit(&mut cfg);
    let clock = Arc::new(ManualClock::at(T0));
    let audit = Arc::new(Accounting::in_memory(clock.clone()));
    let mail = Arc::new(MemoryTransport::new());
    let users = users();
    let app = Arc::new(
        AppBuilder::from_json(cfg)
            .unwrap()
            .clock(clock.clone())
            .audit(audit.clone())
            .mail(mail.clone())
            .users(users.clone())
            .build()
            .unwrap(),
    );
    let (portal, _) = llng_server::spawn(app.clone(), Service::Portal, "127.0.0.1:0").await.unwrap();
    let (gateway, _) = llng_server::spawn(app.clone(), Service::Gateway, "127.0.0.1:0").await.unwrap();
    let (manager, _) = llng_server::spawn(app.clone(), Service::Manager, "127.0.0.1:0").await.unwrap();
    let client = reqwest::Client::builder()
        .redirect(reqwest::redirect::Policy::none())
        .no_proxy()
        .build()
        .unwrap();
    Stack {
        app,
        clock,
        audit,
        mail,
        users,
        portal,
        gateway,
        manager,
        upstream,
        client,
    }
}

pub fn sid_cookie(headers: &HeaderMap, name: &str) -> Option<String> {
    headers
        .get_all(SET_COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .find_map(|c| {
            let first = c.split(';').next()?;
            let (k, v) = first.split_once('=')?;
            (k.trim() == name).then(|| v.trim().to_string())
        })
}

pub fn location(resp: &reqwest::Response) -> String {
    resp.headers()
        .get("location")
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string()
}

impl Stack {
    pub fn gw(&self, method: Method, host: &str, path: &str) -> RequestBuilder {
        self.client
            .request(method, format!("http://{}{}", self.gateway, path))
            .header(HOST, host)
    }

    pub fn gw_get(&self, host: &str, path: &str, sid: Option<&str>) -> RequestBuilder {
        let mut rb = self.gw(Method::GET, host, path);
        if let Some(sid) = sid {
            rb = rb.header(COOKIE, format!("lemonldap={sid}"));
        }
        rb
    }

    pub fn portal_req(&self, method: Method, path: &str) -> RequestBuilder {
        self.client
            .request(method, format!("http://{}{}", self.portal, path))
            .header(HOST, PORTAL_HOST)
    }

    pub fn manager_req(&self, method: Method, path: &str, sid: Option<&str>) -> RequestBuilder {
        let mut rb = self.client.request(method, format!("http://{}{}", self.manager, path));
        if let Some(sid) = sid {
            rb = rb.header(COOKIE, format!("lemonldap={sid}"));
        }
        rb
    }

    pub async fn post_login(&self, uid: &str, pw: &str, url: Option<&str>) -> reqwest::Response {
        let mut form = vec![("user", uid), ("password", pw)];
        if let Some(u) = url {
            form.push(("url", u));
        }
        self.portal_req(Method::POST, "/login").form(&form).send().await.unwrap()
    }

    /// Password login that must succeed; returns the SID.
    pub async fn login(&self, uid: &str, pw: &str) -> String {
        let resp = self.post_login(uid, pw, None).await;
        assert_eq!(resp.status(), 302, "login of {uid} failed");
        sid_cookie(resp.headers(), "lemonldap").expect("session cookie")
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.audit.events().unwrap()
    }

    pub fn kinds(&self) -> Vec<AuditKind> {
        self.events().iter().map(|e| e.kind).collect()
    }

    pub fn session_count(&self) -> usize {
        self.app.sessions.list_sessions(None).unwrap().len()
    }
}
