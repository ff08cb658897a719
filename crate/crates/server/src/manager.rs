//! Manager REST API. Callers authenticate with their SSO cookie and must
//! pass the `manager_admins` rule. Every response carries `X-Cfg-Num`.

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::header::{HeaderMap, HeaderValue};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Extension, Json, Router};
use llng_core::accounting::{AuditEvent, AuditFilter, AuditKind};
use llng_core::config::{CommitError, ConfigError, GlobalConfig, VHostConfig};
use llng_core::devops::check_devops;
use llng_core::plugins::checkuser::CheckUserInputs;
use llng_core::plugins::{check_user, CheckUserError};
use llng_core::rules::{evaluate, Decision, EvalEnv, RequestInfo};
use llng_core::session::{is_valid_sid, Session, SessionError, SessionKind};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::portal::cookie_session;
use crate::state::SharedApp;
use crate::web::json_error;

pub const CFG_NUM_HEADER: &str = "x-cfg-num";

pub fn router(app: SharedApp) -> Router {
    Router::new()
        .route("/api/config", get(get_config).put(put_config))
        .route("/api/config/vhosts", get(get_vhosts))
        .route("/api/config/vhosts/:name", put(put_vhost))
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/:sid", delete(delete_session))
        .route("/api/notifications", get(list_notifications).post(create_notification))
        .route("/api/checkuser", post(checkuser))
        .route("/api/checkdevops", post(checkdevops))
        .route("/api/audit", get(audit))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_admin))
        .layer(middleware::from_fn_with_state(app.clone(), cfg_num_header))
        .with_state(app)
}

async fn cfg_num_header(State(app): State<SharedApp>, req: Request, next: Next) -> Response {
    let mut resp = next.run(req).await;
    let num = app.cfg().cfg_num().to_string();
    resp.headers_mut()
        .insert(CFG_NUM_HEADER, HeaderValue::from_str(&num).expect("digits"));
    resp
}

/// The acting administrator, for handlers.
#[derive(Clone)]
struct Admin(Session);

async fn require_admin(State(app): State<SharedApp>, mut req: Request, next: Next) -> Response {
    let cfg = app.cfg();
    let Some(session) = cookie_session(&app, &cfg, req.headers()) else {
        return json_error(StatusCode::UNAUTHORIZED, "authentication required");
    };
    let request = RequestInfo::new(cfg.portal_host.clone(), req.uri().path(), None);
    let env = EvalEnv {
        session: &session,
        request: &request,
        lists: &cfg.lists,
    };
    if evaluate(&cfg.manager_rule, &env) != Decision::Allow {
        return json_error(StatusCode::FORBIDDEN, "not a manager administrator");
    }
    req.extensions_mut().insert(Admin(session));
    next.run(req).await
}

async fn get_config(State(app): State<SharedApp>) -> Response {
    Json(&app.cfg().raw).into_response()
}

fn unprocessable(errors: Vec<ConfigError>) -> Response {
    (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "errors": errors }))).into_response()
}

fn parse_error(what: &str, e: serde_json::Error) -> Response {
    unprocessable(vec![ConfigError {
        location: what.to_string(),
        message: e.to_string(),
    }])
}

/// Optional optimistic-concurrency precondition.
fn expected_cfg_num(headers: &HeaderMap) -> Result<Option<u64>, Response> {
    match headers.get(CFG_NUM_HEADER) {
        None => Ok(None),
        Some(v) => v
            .to_str()
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .map(Some)
            .ok_or_else(|| json_error(StatusCode::BAD_REQUEST, "X-Cfg-Num must be an integer")),
    }
}

fn commit(app: &SharedApp, new: GlobalConfig, expected: Option<u64>, actor: &str) -> Response {
    match app.config.commit(new, expected, actor, &app.audit) {
        Ok(num) => Json(json!({ "cfg_num": num })).into_response(),
        Err(CommitError::Invalid(errors)) => unprocessable(errors),
        Err(CommitError::Conflict { current }) => (
            StatusCode::CONFLICT,
            Json(json!({ "error": "configuration changed concurrently", "current": current })),
        )
            .into_response(),
        Err(CommitError::Io(e)) => {
            tracing::error!(error = %e, "configuration commit failed");
            json_error(StatusCode::INTERNAL_SERVER_ERROR, "could not store configuration")
        }
    }
}

async fn put_config(
    State(app): State<SharedApp>,
    Extension(Admin(admin)): Extension<Admin>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let expected = match expected_cfg_num(&headers) {
        Ok(e) => e,
        Err(r) => return r,
    };
    match serde_json::from_slice::<GlobalConfig>(&body) {
        Ok(new) => commit(&app, new, expected, &admin.uid),
        Err(e) => parse_error("$", e),
    }
}

async fn get_vhosts(State(app): State<SharedApp>) -> Response {
    Json(&app.cfg().raw.vhosts).into_response()
}

async fn put_vhost(
    State(app): State<SharedApp>,
    Extension(Admin(admin)): Extension<Admin>,
    Path(name): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let expected = match expected_cfg_num(&headers) {
        Ok(e) => e,
        Err(r) => return r,
    };
    // the name may come from the URL alone
    let parsed = serde_json::from_slice::<Value>(&body).and_then(|mut v| {
        if let Some(obj) = v.as_object_mut() {
            obj.entry("vhost").or_insert_with(|| Value::String(name.clone()));
        }
        serde_json::from_value::<VHostConfig>(v)
    });
    let vhost = match parsed {
        Ok(v) => v,
        Err(e) => return parse_error(&format!("vhosts[{name}]"), e),
    };
    if !vhost.vhost.eq_ignore_ascii_case(&name) {
        return unprocessable(vec![ConfigError {
            location: format!("vhosts[{name}].vhost"),
            message: format!("body names {} but the URL names {name}", vhost.vhost),
        }]);
    }
    let mut new = app.cfg().raw.clone();
    match new.vhosts.iter_mut().find(|v| v.vhost.eq_ignore_ascii_case(&name)) {
        Some(slot) => *slot = vhost,
        None => new.vhosts.push(vhost),
    }
    commit(&app, new, expected, &admin.uid)
}

#[derive(Deserialize)]
struct UidQuery {
    uid: Option<String>,
}

async fn list_sessions(State(app): State<SharedApp>, Query(q): Query<UidQuery>) -> Response {
    let uid = q.uid.as_deref().filter(|u| !u.is_empty());
    match app.sessions.list_sessions(uid) {
        Ok(list) => Json(list).into_response(),
        Err(e) => {
            tracing::error!(error = %e, "listing sessions failed");
            json_error(StatusCode::INTERNAL_SERVER_ERROR, "session store unavailable")
        }
    }
}

async fn delete_session(
    State(app): State<SharedApp>,
    Extension(Admin(admin)): Extension<Admin>,
    Path(sid): Path<String>,
) -> Response {
    if !is_valid_sid(&sid) {
        return json_error(StatusCode::NOT_FOUND, "no such session");
    }
    let session = match app.sessions.get_session(&sid) {
        Ok(s) if s.kind == SessionKind::Sso => s,
        Ok(_) | Err(SessionError::NotFound | SessionError::Expired) => {
            return json_error(StatusCode::NOT_FOUND, "no such session")
        }
        Err(e) => {
            tracing::error!(error = %e, "session lookup failed");
            return json_error(StatusCode::INTERNAL_SERVER_ERROR, "session store unavailable");
        }
    };
    match app.sessions.delete_session(&sid) {
        Ok(()) => {
            app.cache.invalidate(&sid);
            app.audit.emit(
                AuditEvent::new(AuditKind::SessionDelete)
                    .uid(session.uid)
                    .sid(&sid)
                    .detail("reason", "admin")
                    .detail("by", admin.uid),
            );
            StatusCode::NO_CONTENT.into_response()
        }
        Err(SessionError::NotFound) => json_error(StatusCode::NOT_FOUND, "no such session"),
        Err(e) => {
            tracing::error!(error = %e, "session delete failed");
            json_error(StatusCode::INTERNAL_SERVER_ERROR, "session store unavailable")
        }
    }
}

#[derive(Deserialize)]
struct NewNotification {
    #[serde(default, alias = "uid")]
    target: String,
    title: String,
    #[serde(default)]
    body: String,
    #[serde(default)]
    require_accept: bool,
}

async fn create_notification(State(app): State<SharedApp>, body: Bytes) -> Response {
    let n: NewNotification = match serde_json::from_slice(&body) {
        Ok(n) => n,
        Err(e) => return json_error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    match app
        .notifications
        .create(&n.target, &n.title, &n.body, n.require_accept, app.clock.now())
    {
        Ok(created) => (StatusCode::CREATED, Json(created)).into_response(),
        Err(e) => json_error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

async fn list_notifications(State(app): State<SharedApp>) -> Response {
    Json(app.notifications.list()).into_response()
}

#[derive(Deserialize)]
struct CheckUserBody {
    uid: String,
    url: String,
}

async fn checkuser(
    State(app): State<SharedApp>,
    Extension(Admin(admin)): Extension<Admin>,
    body: Bytes,
) -> Response {
    let req: CheckUserBody = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return json_error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let cfg = app.cfg();
    let inputs = CheckUserInputs {
        cfg: &cfg,
        sessions: &app.sessions,
        users: &app.users,
        devops: &app.devops,
        now_ms: app.clock.now_millis(),
    };
    match check_user(&inputs, &admin, &req.uid, &req.url) {
        Ok(result) => Json(result).into_response(),
        Err(e @ CheckUserError::Forbidden) => json_error(StatusCode::FORBIDDEN, e.to_string()),
        Err(e @ CheckUserError::UnknownUser(_)) => json_error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e) => json_error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

#[derive(Deserialize)]
struct CheckDevOpsBody {
    document: Value,
}

/// `document` is either the file's text or the JSON value itself.
async fn checkdevops(body: Bytes) -> Response {
    let req: CheckDevOpsBody = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return json_error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let text = match req.document {
        Value::String(s) => s,
        other => other.to_string(),
    };
    let errors = check_devops(&text).err().unwrap_or_default();
    Json(json!({ "ok": errors.is_empty(), "errors": errors })).into_response()
}

#[derive(Deserialize)]
struct AuditQuery {
    kind: Option<String>,
    uid: Option<String>,
    since: Option<i64>,
    until: Option<i64>,
    limit: Option<usize>,
}

async fn audit(State(app): State<SharedApp>, Query(q): Query<AuditQuery>) -> Response {
    let kind = match q.kind.as_deref().filter(|k| !k.is_empty()) {
        None => None,
        Some(k) => match AuditKind::parse(k) {
            Some(kind) => Some(kind),
            None => return json_error(StatusCode::BAD_REQUEST, format!("unknown event kind {k}")),
        },
    };
    let filter = AuditFilter {
        kind,
        uid: q.uid.filter(|u| !u.is_empty()),
        since: q.since,
        until: q.until,
        limit: q.limit,
    };
    match app.audit.query(&filter) {
        Ok(events) => Json(events).into_response(),
        Err(e) => {
            tracing::error!(error = %e, "audit query failed");
            json_error(StatusCode::INTERNAL_SERVER_ERROR, "audit sink unreadable")
        }
    }
}
