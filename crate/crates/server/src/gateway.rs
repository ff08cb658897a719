//! The protecting reverse proxy. One listener serves every configured
//! virtual host, picked by the Host header.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::State;
use axum::http::header::{self, HeaderMap, HeaderName, HeaderValue};
use axum::http::request::Parts;
use axum::http::{Request, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use indexmap::IndexMap;
use llng_core::access::{authorize, sessionless_decision, AccessResult, Policy};
use llng_core::accounting::{AuditEvent, AuditKind};
use llng_core::config::{CompiledConfig, CompiledVHost, HandlerType};
use llng_core::devops::{check_devops, Lookup, RulesDocument, RULES_PATH};
use llng_core::federation::oidc::open_access_token;
use llng_core::portal::{encode_target, LoginError};
use llng_core::rules::{sanitize_header_value, RequestInfo};
use llng_core::session::{is_valid_sid, Session, SessionKind};
use llng_core::token::{mint_service_token, unseal_sid, verify_service_token, ServiceTokenClaims, SERVICE_TOKEN_HEADER};

use crate::portal::ciphered_cookie_name;
use crate::state::SharedApp;
use crate::web;

const MAX_BODY: usize = 32 * 1024 * 1024;
const MAX_RULES_DOCUMENT: usize = 1024 * 1024;

const HOP_BY_HOP: &[&str] = &[
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

pub fn router(app: SharedApp) -> Router {
    Router::new().fallback(handle).with_state(app)
}

/// Header names listed in `Connection` plus the fixed hop-by-hop set.
fn hop_headers(headers: &HeaderMap) -> HashSet<String> {
    let mut set: HashSet<String> = HOP_BY_HOP.iter().map(|s| s.to_string()).collect();
    for v in headers.get_all(header::CONNECTION).iter().filter_map(|v| v.to_str().ok()) {
        set.extend(v.split(',').map(|t| t.trim().to_ascii_lowercase()).filter(|t| !t.is_empty()));
    }
    set
}

fn plain(status: StatusCode, msg: &'static str) -> Response {
    (status, msg).into_response()
}

struct Ctx<'a> {
    app: &'a SharedApp,
    cfg: &'a CompiledConfig,
    vh: &'a CompiledVHost,
    info: RequestInfo,
}

impl Ctx<'_> {
    fn event(&self, kind: AuditKind) -> AuditEvent {
        AuditEvent::new(kind)
            .vhost(self.vh.config.vhost.clone())
            .uri(self.info.uri.clone())
            .ip(self.info.ip.map(|i| i.to_string()).unwrap_or_default())
    }

    fn reject_token(&self, kind: &str, token: &str, error: impl ToString) {
        self.app.audit.emit(
            self.event(AuditKind::TokenReject)
                .detail("type", kind)
                .detail("error", error.to_string())
                .secret("token", token),
        );
    }
}

async fn handle(State(app): State<SharedApp>, req: Request<Body>) -> Response {
    let cfg = app.cfg();
    let (parts, body) = req.into_parts();
    let Some(host) = web::host(&parts.headers) else {
        return plain(StatusCode::MISDIRECTED_REQUEST, "unknown virtual host\n");
    };
    let Some(vh) = cfg.vhost(&host) else {
        return plain(StatusCode::MISDIRECTED_REQUEST, "unknown virtual host\n");
    };
    let uri = parts
        .uri
        .path_and_query()
        .map(|p| p.as_str().to_string())
        .unwrap_or_else(|| "/".into());
    let ctx = Ctx {
        app: &app,
        cfg: &cfg,
        vh,
        info: web::request_info(&vh.config.vhost, &uri, web::client_ip(&parts.extensions), &parts.headers),
    };

    let doc;
    let policy = if vh.config.handler_type == HandlerType::DevOps {
        doc = match devops_document(&app, vh).await {
            Some(d) => d,
            None => {
                app.audit.emit(
                    ctx.event(AuditKind::AuthzDeny)
                        .detail("reason", "no valid rules document"),
                );
                return plain(StatusCode::FORBIDDEN, "access denied\n");
            }
        };
        Policy {
            rules: &doc.rules,
            headers: &doc.headers,
            required_auth_level: vh.config.required_auth_level,
        }
    } else {
        Policy {
            rules: &vh.access,
            headers: &vh.headers,
            required_auth_level: vh.config.required_auth_level,
        }
    };
    let mut strip: HashSet<String> = policy
        .headers
        .names()
        .map(|n| n.to_ascii_lowercase().replace('_', "-"))
        .collect();
    strip.insert(SERVICE_TOKEN_HEADER.to_ascii_lowercase());
    if vh.config.handler_type == HandlerType::AuthBasic {
        // the application gets the identity, never the password
        strip.insert("authorization".into());
    }

    if let Some(result) = sessionless_decision(&policy, &uri) {
        app.audit.emit(
            ctx.event(AuditKind::AuthzAllow)
                .detail("rule", result.rule.clone())
                .detail("matched_rule", result.matched_rule.clone().unwrap_or_default()),
        );
        return forward(&ctx, parts, body, result.headers, &strip, None).await;
    }

    let (session, service_headers) = match resolve_session(&ctx, &parts).await {
        Ok(found) => found,
        Err(resp) => return resp,
    };

    let result = authorize(&policy, &cfg.lists, &session, &ctx.info);
    emit_decision(&ctx, &session, &result);
    if !result.forwards() {
        return plain(StatusCode::FORBIDDEN, "access denied\n");
    }
    let mut inject = result.headers;
    if let Some(extra) = service_headers {
        for (k, v) in extra {
            if llng_core::rules::is_valid_header_name(&k) {
                strip.insert(k.to_ascii_lowercase().replace('_', "-"));
                inject.insert(k, sanitize_header_value(&v));
            }
        }
    }
    forward(&ctx, parts, body, inject, &strip, Some(&session)).await
}

fn emit_decision(ctx: &Ctx<'_>, session: &Session, result: &AccessResult) {
    let kind = if result.forwards() {
        AuditKind::AuthzAllow
    } else {
        AuditKind::AuthzDeny
    };
    let mut ev = ctx
        .event(kind)
        .uid(session.uid.clone())
        .sid(&session.sid)
        .detail("rule", result.rule.clone())
        .detail("matched_rule", result.matched_rule.clone().unwrap_or_default());
    if let Some(r) = &result.reason {
        ev = ev.detail("reason", r.clone());
    }
    ctx.app.audit.emit(ev);
}

/// Where a request without usable credentials goes: the portal for
/// browsers, a bare 401 for everything else.
fn to_portal(ctx: &Ctx<'_>, parts: &Parts) -> Response {
    if !web::wants_html(&parts.headers) {
        return plain(StatusCode::UNAUTHORIZED, "authentication required\n");
    }
    let host = parts
        .headers
        .get(header::HOST)
        .and_then(|h| h.to_str().ok())
        .unwrap_or(&ctx.vh.config.vhost);
    let original = format!("{}://{}{}", ctx.cfg.raw.gateway.public_scheme, host, ctx.info.uri);
    web::redirect(&format!(
        "{}/login?url={}",
        ctx.cfg.portal_base(),
        encode_target(&original)
    ))
}

fn cached_session(ctx: &Ctx<'_>, sid: &str) -> Option<Session> {
    if !is_valid_sid(sid) {
        return None;
    }
    let s = ctx.app.cache.get_or_fetch(sid, &ctx.app.sessions).ok()?;
    s.is_live(ctx.app.clock.now()).then_some(s)
}

type Resolved = (Session, Option<BTreeMap<String, String>>);

/// SID lookup, by handler type.
async fn resolve_session(ctx: &Ctx<'_>, parts: &Parts) -> Result<Resolved, Response> {
    let cfg = ctx.cfg;
    match ctx.vh.config.handler_type {
        HandlerType::Main | HandlerType::DevOps => web::cookie(&parts.headers, &cfg.raw.cookie_name)
            .and_then(|sid| cached_session(ctx, &sid))
            .map(|s| (s, None))
            .ok_or_else(|| to_portal(ctx, parts)),
        HandlerType::SecureToken => {
            let Some(blob) = web::cookie(&parts.headers, &ciphered_cookie_name(cfg)).filter(|b| !b.is_empty()) else {
                return Err(to_portal(ctx, parts));
            };
            match unseal_sid(&blob, &cfg.token_key) {
                Ok(sid) => cached_session(ctx, &sid)
                    .map(|s| (s, None))
                    .ok_or_else(|| to_portal(ctx, parts)),
                Err(e) => {
                    ctx.reject_token("secure_cookie", &blob, e);
                    Err(to_portal(ctx, parts))
                }
            }
        }
        HandlerType::AuthBasic => {
            let challenge = || {
                let mut resp = plain(StatusCode::UNAUTHORIZED, "authentication required\n");
                let value = format!("Basic realm=\"{}\"", cfg.raw.gateway.basic_realm.replace('"', ""));
                if let Ok(v) = HeaderValue::from_str(&value) {
                    resp.headers_mut().insert(header::WWW_AUTHENTICATE, v);
                }
                resp
            };
            let Some((uid, password)) = web::basic_credentials(&parts.headers) else {
                return Err(challenge());
            };
            let app = ctx.app.clone();
            let cfg_arc = app.cfg();
            let info = ctx.info.clone();
            let outcome =
                tokio::task::spawn_blocking(move || app.portal.basic_login(&cfg_arc, &uid, &password, &info)).await;
            match outcome {
                Ok(Ok(s)) => Ok((s, None)),
                Ok(Err(LoginError::Internal(e))) => {
                    tracing::error!(error = %e, "basic login failed");
                    Err(plain(StatusCode::INTERNAL_SERVER_ERROR, "internal error\n"))
                }
                Ok(Err(_)) => Err(challenge()),
                Err(e) => {
                    tracing::error!(error = %e, "basic login task failed");
                    Err(plain(StatusCode::INTERNAL_SERVER_ERROR, "internal error\n"))
                }
            }
        }
        HandlerType::ServiceToken => {
            let Some(blob) = parts
                .headers
                .get(SERVICE_TOKEN_HEADER)
                .and_then(|v| v.to_str().ok())
                .map(str::trim)
                .filter(|b| !b.is_empty())
            else {
                return Err(plain(StatusCode::UNAUTHORIZED, "service token required\n"));
            };
            let now = ctx.app.clock.now();
            let claims = match verify_service_token(
                blob,
                &ctx.vh.config.vhost,
                now,
                &cfg.token_key,
                ctx.vh.config.service_token_max_age,
            ) {
                Ok(c) => c,
                Err(e) => {
                    ctx.reject_token("service_token", blob, &e);
                    return Err(plain(StatusCode::UNAUTHORIZED, "invalid service token\n"));
                }
            };
            // straight from the store: a killed session must stop service calls at once
            match ctx.app.sessions.get_session(&claims.sid) {
                Ok(s) if s.kind == SessionKind::Sso => Ok((s, claims.service_headers)),
                _ => {
                    ctx.reject_token("service_token", blob, "session ended");
                    Err(plain(StatusCode::UNAUTHORIZED, "invalid service token\n"))
                }
            }
        }
        HandlerType::OAuth2 => {
            let unauthorized = |error: bool| {
                let mut resp = plain(StatusCode::UNAUTHORIZED, "bearer token required\n");
                let value = if error { "Bearer error=\"invalid_token\"" } else { "Bearer" };
                resp.headers_mut()
                    .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static(value));
                resp
            };
            let Some(token) = web::bearer(&parts.headers) else {
                return Err(unauthorized(false));
            };
            match open_access_token(&cfg.token_key, &token, ctx.app.clock.now()) {
                Ok(claims) => match cached_session(ctx, &claims.sid) {
                    Some(s) => Ok((s, None)),
                    None => {
                        ctx.reject_token("access_token", &token, "session ended");
                        Err(unauthorized(true))
                    }
                },
                Err(e) => {
                    ctx.reject_token("access_token", &token, e);
                    Err(unauthorized(true))
                }
            }
        }
    }
}

/// Sends the request upstream and relays the answer.
async fn forward(
    ctx: &Ctx<'_>,
    parts: Parts,
    body: Body,
    inject: IndexMap<String, String>,
    strip: &HashSet<String>,
    session: Option<&Session>,
) -> Response {
    let vh = &ctx.vh.config;
    let url = format!("{}{}", vh.upstream.trim_end_matches('/'), ctx.info.uri);
    let hop = hop_headers(&parts.headers);

    let mut out = HeaderMap::new();
    for (name, value) in &parts.headers {
        let n = name.as_str();
        // CGI-style backends fold `_` into `-`, so `Auth_User` would spoof `Auth-User`
        let folded = n.replace('_', "-");
        if hop.contains(n) || strip.contains(&folded) || n == "x-forwarded-for" || n == "content-length" {
            continue;
        }
        out.append(name.clone(), value.clone());
    }
    let mut xff: Vec<String> = parts
        .headers
        .get_all("x-forwarded-for")
        .iter()
        .filter_map(|v| v.to_str().ok().map(str::to_string))
        .collect();
    if let Some(ip) = ctx.info.ip {
        xff.push(ip.to_string());
    }
    if let Ok(v) = HeaderValue::from_str(&xff.join(", ")) {
        if !xff.is_empty() {
            out.insert("x-forwarded-for", v);
        }
    }
    for (name, value) in &inject {
        match (HeaderName::from_bytes(name.as_bytes()), HeaderValue::from_bytes(value.as_bytes())) {
            (Ok(n), Ok(v)) => {
                out.insert(n, v);
            }
            _ => tracing::warn!(header = %name, "dropping header that is not valid on the wire"),
        }
    }
    if let Some(s) = session.filter(|_| !vh.service_token_targets.is_empty()) {
        let now = ctx.app.clock.now();
        let claims = ServiceTokenClaims::new(s.sid.clone(), vh.service_token_targets.clone(), now);
        match mint_service_token(&claims, &ctx.cfg.token_key) {
            Ok(token) => {
                ctx.app.audit.emit(
                    ctx.event(AuditKind::TokenMint)
                        .uid(s.uid.clone())
                        .sid(&s.sid)
                        .detail("type", "service_token")
                        .detail("targets", vh.service_token_targets.join(","))
                        .secret("token", &token),
                );
                if let Ok(v) = HeaderValue::from_str(&token) {
                    out.insert(SERVICE_TOKEN_HEADER, v);
                }
            }
            Err(e) => tracing::error!(error = %e, "could not mint service token"),
        }
    }

    let Ok(bytes) = axum::body::to_bytes(body, MAX_BODY).await else {
        return plain(StatusCode::PAYLOAD_TOO_LARGE, "request body too large\n");
    };
    let upstream = ctx
        .app
        .http
        .request(parts.method.clone(), &url)
        .headers(out)
        .body(bytes)
        .send()
        .await;
    let resp = match upstream {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(vhost = %vh.vhost, error = %e, "upstream unreachable");
            return plain(StatusCode::SERVICE_UNAVAILABLE, "upstream unavailable\n");
        }
    };
    let status = resp.status();
    let hop = hop_headers(resp.headers());
    let mut headers = HeaderMap::new();
    for (name, value) in resp.headers() {
        if !hop.contains(name.as_str()) {
            headers.append(name.clone(), value.clone());
        }
    }
    let body = match resp.bytes().await {
        Ok(b) => b,
        Err(e) => {
            tracing::warn!(vhost = %vh.vhost, error = %e, "upstream body failed");
            return plain(StatusCode::BAD_GATEWAY, "upstream failed\n");
        }
    };
    let mut out = Response::new(Body::from(body));
    *out.status_mut() = status;
    *out.headers_mut() = headers;
    out
}

/// Why a `rules.json` could not be used.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FetchError {
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("{}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// GETs and validates `<upstream>/rules.json`. The same check as the
/// `check-devops` command.
pub async fn fetch_rules(http: &reqwest::Client, upstream: &str, timeout: Duration) -> Result<RulesDocument, FetchError> {
    let url = format!("{}{}", upstream.trim_end_matches('/'), RULES_PATH);
    let resp = http
        .get(&url)
        .timeout(timeout)
        .send()
        .await
        .map_err(|e| FetchError::Unreachable(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(FetchError::Unreachable(format!("{url} answered {}", resp.status())));
    }
    let too_large = || FetchError::Invalid(vec!["rules document too large".into()]);
    if resp.content_length().is_some_and(|l| l as usize > MAX_RULES_DOCUMENT) {
        return Err(too_large());
    }
    let body = resp.bytes().await.map_err(|e| FetchError::Unreachable(e.to_string()))?;
    if body.len() > MAX_RULES_DOCUMENT {
        return Err(too_large());
    }
    let text = String::from_utf8(body.to_vec()).map_err(|_| FetchError::Invalid(vec!["invalid JSON: not UTF-8".into()]))?;
    check_devops(&text).map_err(FetchError::Invalid)
}

/// The document to enforce for a DevOps vhost, refreshing it when stale.
/// Refreshes are single-flight per vhost; `None` means deny everything.
async fn devops_document(app: &SharedApp, vh: &CompiledVHost) -> Option<Arc<RulesDocument>> {
    let name = &vh.config.vhost;
    let ttl = vh.config.devops_cache_ttl;
    match app.devops.lookup(name, app.clock.now_millis(), ttl) {
        Lookup::Fresh(d) => return Some(d),
        Lookup::Fallback(d) => return d,
        Lookup::Refresh => {}
    }
    let flight = app.flight(name);
    let _guard = flight.lock().await;
    // someone else may have refreshed while we waited
    match app.devops.lookup(name, app.clock.now_millis(), ttl) {
        Lookup::Fresh(d) => return Some(d),
        Lookup::Fallback(d) => return d,
        Lookup::Refresh => {}
    }
    let timeout = Duration::from_millis(app.cfg().raw.gateway.devops_fetch_timeout_ms);
    match fetch_rules(&app.http, &vh.config.upstream, timeout).await {
        Ok(doc) => Some(app.devops.store(name, doc, app.clock.now_millis())),
        Err(e) => {
            tracing::warn!(vhost = %name, error = %e, "rules.json refresh failed");
            app.devops.record_failure(name, e.to_string(), app.clock.now_millis(), ttl)
        }
    }
}
