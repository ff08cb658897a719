//! User-facing pages and the federation endpoints.

use axum::body::Bytes;
use axum::extract::{Query, RawForm, RawQuery, State};
use axum::http::header::{self, HeaderMap, HeaderValue};
use axum::http::{Request, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use llng_core::access::{authorize, Policy};
use llng_core::config::{CompiledConfig, HandlerType};
use llng_core::devops::Lookup;
use llng_core::federation::cas::{render_xml, service_redirect, service_registered};
use llng_core::federation::oidc::{AuthorizeOutcome, AuthorizeRequest, TokenRequest};
use llng_core::plugins::Notification;
use llng_core::portal::{
    encode_target, expired_cookie, session_cookie, validate_target, LoginError, LoginStep,
    NotificationOutcome, SecondFactor,
};
use llng_core::rules::{Decision, RequestInfo};
use llng_core::session::{is_valid_sid, Session, SessionKind};
use llng_core::token::seal_sid;
use percent_encoding::percent_decode_str;
use serde::Deserialize;
use url::form_urlencoded;

use crate::state::SharedApp;
use crate::web::{self, attr, page, redirect, text, with_cookies};

pub fn router(app: SharedApp) -> Router {
    Router::new()
        .route("/", get(|| async { redirect("/menu") }))
        .route("/login", get(login_page).post(login_submit))
        .route("/2fa", axum::routing::post(second_factor))
        .route("/menu", get(menu))
        .route("/logout", get(logout))
        .route("/2fa/register/totp", get(totp_start).post(totp_confirm))
        .route("/notifications/accept", axum::routing::post(accept_notifications))
        .route("/cas/login", get(cas_login))
        .route("/cas/serviceValidate", get(cas_validate))
        .route("/oauth2/authorize", get(oidc_authorize))
        .route("/oauth2/token", axum::routing::post(oidc_token))
        .route("/oauth2/userinfo", get(userinfo).post(userinfo))
        .route("/oauth2/jwks", get(jwks))
        .route("/.well-known/openid-configuration", get(discovery))
        .with_state(app)
}

/// Name of the cookie carrying the sealed SID read by SecureToken vhosts.
pub fn ciphered_cookie_name(cfg: &CompiledConfig) -> String {
    format!("{}_ciphered", cfg.raw.cookie_name)
}

fn has_secure_token_vhost(cfg: &CompiledConfig) -> bool {
    cfg.vhosts().any(|v| v.config.handler_type == HandlerType::SecureToken)
}

/// The plain SSO cookie, plus the sealed one when a SecureToken vhost
/// exists.
pub fn login_cookies(cfg: &CompiledConfig, sid: &str) -> Vec<String> {
    let mut out = vec![session_cookie(cfg, sid)];
    if has_secure_token_vhost(cfg) {
        let plain = session_cookie(cfg, sid);
        let rest = plain.split_once(';').map_or("", |(_, r)| r);
        out.push(format!(
            "{}={};{rest}",
            ciphered_cookie_name(cfg),
            seal_sid(sid, &cfg.token_key)
        ));
    }
    out
}

fn logout_cookies(cfg: &CompiledConfig) -> Vec<String> {
    let mut out = vec![expired_cookie(cfg)];
    if has_secure_token_vhost(cfg) {
        let plain = expired_cookie(cfg);
        let rest = plain.split_once(';').map_or("", |(_, r)| r);
        out.push(format!("{}=;{rest}", ciphered_cookie_name(cfg)));
    }
    out
}

/// The live SSO session named by the request's cookie, read from the store.
pub fn cookie_session(app: &SharedApp, cfg: &CompiledConfig, headers: &HeaderMap) -> Option<Session> {
    let sid = web::cookie(headers, &cfg.raw.cookie_name).filter(|s| is_valid_sid(s))?;
    app.sessions
        .get_session(&sid)
        .ok()
        .filter(|s| s.kind == SessionKind::Sso)
}

fn portal_request(cfg: &CompiledConfig, path: &str, req_parts: &axum::http::request::Parts) -> RequestInfo {
    web::request_info(&cfg.portal_host, path, web::client_ip(&req_parts.extensions), &req_parts.headers)
}

fn login_form(message: Option<&str>, url: Option<&str>) -> String {
    let mut body = String::new();
    if let Some(m) = message {
        body.push_str(&format!("<p class=\"error\">{}</p>\n", text(m)));
    }
    body.push_str("<form method=\"post\" action=\"/login\">\n");
    if let Some(u) = url {
        body.push_str(&format!("<input type=\"hidden\" name=\"url\" value=\"{}\">\n", attr(u)));
    }
    body.push_str(
        "<label>User <input type=\"text\" name=\"user\" autocomplete=\"username\" autofocus></label>\n\
         <label>Password <input type=\"password\" name=\"password\" autocomplete=\"current-password\"></label>\n\
         <button type=\"submit\">Sign in</button>\n</form>",
    );
    body
}

fn login_error(err: LoginError, url: Option<&str>) -> Response {
    let (status, msg) = match &err {
        LoginError::BadCredentials => (StatusCode::UNAUTHORIZED, "Authentication failed".to_string()),
        LoginError::AccountLocked { .. } => (
            StatusCode::FORBIDDEN,
            "Too many failed attempts; the account is temporarily locked".to_string(),
        ),
        LoginError::Aborted(why) => (StatusCode::FORBIDDEN, format!("Login refused: {why}")),
        LoginError::ExpiredLogin => (StatusCode::BAD_REQUEST, "Login expired, please start again".into()),
        LoginError::BadCode => (StatusCode::UNAUTHORIZED, "Invalid code, please start again".into()),
        LoginError::SecondFactorRequired => (StatusCode::UNAUTHORIZED, "A second factor is required".into()),
        LoginError::Internal(e) => {
            tracing::error!(error = %e, "login failed");
            (StatusCode::INTERNAL_SERVER_ERROR, "Internal error".into())
        }
    };
    page(status, "Sign in", &login_form(Some(&msg), url))
}

#[derive(Deserialize)]
struct UrlParam {
    url: Option<String>,
}

/// Keeps the encoded `url` only when it decodes to an allowed target.
fn checked_url(cfg: &CompiledConfig, url: Option<&str>) -> (Option<String>, Option<String>) {
    match url.and_then(|u| validate_target(cfg, u).map(|t| (u.trim().to_string(), t))) {
        Some((enc, target)) => (Some(enc), Some(target)),
        None => (None, None),
    }
}

async fn login_page(State(app): State<SharedApp>, Query(q): Query<UrlParam>, headers: HeaderMap) -> Response {
    let cfg = app.cfg();
    let (enc, target) = checked_url(&cfg, q.url.as_deref());
    if cookie_session(&app, &cfg, &headers).is_some() {
        let dest = target.unwrap_or_else(|| format!("{}/menu", cfg.portal_base()));
        return redirect(&dest);
    }
    page(StatusCode::OK, "Sign in", &login_form(None, enc.as_deref()))
}

#[derive(Deserialize)]
struct LoginForm {
    #[serde(default)]
    user: String,
    #[serde(default)]
    password: String,
    url: Option<String>,
}

async fn login_submit(State(app): State<SharedApp>, req: Request<axum::body::Body>) -> Response {
    let (parts, body) = req.into_parts();
    let Ok(bytes) = axum::body::to_bytes(body, 64 * 1024).await else {
        return StatusCode::PAYLOAD_TOO_LARGE.into_response();
    };
    let Ok(form) = serde_urlencoded_form::<LoginForm>(&bytes) else {
        return StatusCode::BAD_REQUEST.into_response();
    };
    let cfg = app.cfg();
    let info = portal_request(&cfg, "/login", &parts);
    let (enc, target) = checked_url(&cfg, form.url.as_deref());
    let uid = form.user.trim().to_string();
    let result = {
        let (app, cfg, info, target) = (app.clone(), cfg.clone(), info.clone(), target.clone());
        tokio::task::spawn_blocking(move || {
            app.portal
                .authenticate_password(&cfg, &uid, &form.password, target, &info)
        })
        .await
    };
    match result {
        Ok(Ok(step)) => finish_step(&app, &cfg, step, target, &info),
        Ok(Err(e)) => login_error(e, enc.as_deref()),
        Err(e) => login_error(LoginError::Internal(e.to_string()), enc.as_deref()),
    }
}

fn serde_urlencoded_form<T: serde::de::DeserializeOwned>(bytes: &Bytes) -> Result<T, ()> {
    let pairs: serde_json::Map<String, serde_json::Value> = form_urlencoded::parse(bytes)
        .map(|(k, v)| (k.into_owned(), serde_json::Value::String(v.into_owned())))
        .collect();
    serde_json::from_value(serde_json::Value::Object(pairs)).map_err(|_| ())
}

/// Turns a successful login step into the next page or the final redirect.
fn finish_step(
    app: &SharedApp,
    cfg: &CompiledConfig,
    step: LoginStep,
    target: Option<String>,
    info: &RequestInfo,
) -> Response {
    match step {
        LoginStep::SecondFactor { token, factor } => {
            let prompt = match factor {
                SecondFactor::Totp => "Enter the code shown by your authenticator app.",
                SecondFactor::Mail => "Enter the code sent to your e-mail address.",
            };
            let body = format!(
                "<p>{}</p>\n<form method=\"post\" action=\"/2fa\">\n\
                 <input type=\"hidden\" name=\"token\" value=\"{}\">\n\
                 <label>Code <input type=\"text\" name=\"code\" inputmode=\"numeric\" autocomplete=\"one-time-code\" autofocus></label>\n\
                 <button type=\"submit\">Verify</button>\n</form>",
                text(prompt),
                attr(&token)
            );
            page(StatusCode::OK, "Second factor", &body)
        }
        LoginStep::Authenticated { auth, notices } if !notices.is_empty() => {
            let token = app.portal.hold_for_notifications(cfg, auth, notices.clone(), target);
            notices_page(&token, &notices, None)
        }
        LoginStep::Authenticated { auth, .. } => match app.portal.complete_login(cfg, &auth, target, info) {
            Ok(done) => with_cookies(redirect(&done.redirect), &login_cookies(cfg, &done.session.sid)),
            Err(e) => login_error(e, None),
        },
    }
}

fn notices_page(token: &str, notices: &[Notification], message: Option<&str>) -> Response {
    let mut body = String::new();
    if let Some(m) = message {
        body.push_str(&format!("<p class=\"error\">{}</p>\n", text(m)));
    }
    body.push_str("<form method=\"post\" action=\"/notifications/accept\">\n");
    body.push_str(&format!("<input type=\"hidden\" name=\"token\" value=\"{}\">\n", attr(token)));
    for n in notices {
        body.push_str(&format!(
            "<div class=\"notice\"><h2>{}</h2><p>{}</p>",
            text(&n.title),
            text(&n.body)
        ));
        if n.require_accept {
            body.push_str(&format!(
                "<label><input type=\"checkbox\" name=\"accept\" value=\"{}\"> I have read and accept this</label>",
                attr(&n.id)
            ));
        }
        body.push_str("</div>\n");
    }
    body.push_str("<button type=\"submit\">Continue</button>\n</form>");
    page(StatusCode::OK, "Notifications", &body)
}

async fn second_factor(State(app): State<SharedApp>, req: Request<axum::body::Body>) -> Response {
    let (parts, body) = req.into_parts();
    let Ok(bytes) = axum::body::to_bytes(body, 16 * 1024).await else {
        return StatusCode::PAYLOAD_TOO_LARGE.into_response();
    };
    let mut token = String::new();
    let mut code = String::new();
    for (k, v) in form_urlencoded::parse(&bytes) {
        match &*k {
            "token" => token = v.into_owned(),
            "code" => code = v.into_owned(),
            _ => {}
        }
    }
    let cfg = app.cfg();
    let info = portal_request(&cfg, "/2fa", &parts);
    match app.portal.verify_second_factor(&cfg, &token, &code, &info) {
        Ok((step, target)) => finish_step(&app, &cfg, step, target, &info),
        Err(e) => login_error(e, None),
    }
}

async fn accept_notifications(State(app): State<SharedApp>, req: Request<axum::body::Body>) -> Response {
    let (parts, body) = req.into_parts();
    let Ok(bytes) = axum::body::to_bytes(body, 64 * 1024).await else {
        return StatusCode::PAYLOAD_TOO_LARGE.into_response();
    };
    let mut token = String::new();
    let mut accepted = Vec::new();
    for (k, v) in form_urlencoded::parse(&bytes) {
        match &*k {
            "token" => token = v.into_owned(),
            "accept" => accepted.push(v.into_owned()),
            _ => {}
        }
    }
    let cfg = app.cfg();
    let info = portal_request(&cfg, "/notifications/accept", &parts);
    match app.portal.accept_notifications(&cfg, &token, &accepted) {
        Ok(NotificationOutcome::Done { auth, target }) => {
            match app.portal.complete_login(&cfg, &auth, target, &info) {
                Ok(done) => with_cookies(redirect(&done.redirect), &login_cookies(&cfg, &done.session.sid)),
                Err(e) => login_error(e, None),
            }
        }
        Ok(NotificationOutcome::StillPending { token, notices }) => {
            notices_page(&token, &notices, Some("Some notifications must be accepted to continue"))
        }
        Err(e) => login_error(e, None),
    }
}

async fn menu(State(app): State<SharedApp>, req: Request<axum::body::Body>) -> Response {
    let cfg = app.cfg();
    let (parts, _) = req.into_parts();
    let Some(session) = cookie_session(&app, &cfg, &parts.headers) else {
        return redirect("/login");
    };
    let now_ms = app.clock.now_millis();
    let mut items = String::new();
    for v in cfg.vhosts() {
        let info = web::request_info(&v.config.vhost, "/", web::client_ip(&parts.extensions), &parts.headers);
        let devops_doc;
        let policy = if v.config.handler_type == HandlerType::DevOps {
            devops_doc = match app.devops.lookup(&v.config.vhost, now_ms, v.config.devops_cache_ttl) {
                Lookup::Fresh(d) | Lookup::Fallback(Some(d)) => d,
                _ => continue,
            };
            Policy {
                rules: &devops_doc.rules,
                headers: &devops_doc.headers,
                required_auth_level: v.config.required_auth_level,
            }
        } else {
            Policy {
                rules: &v.access,
                headers: &v.headers,
                required_auth_level: v.config.required_auth_level,
            }
        };
        if authorize(&policy, &cfg.lists, &session, &info).decision == Decision::Allow {
            let url = format!("{}://{}/", cfg.raw.gateway.public_scheme, v.config.vhost);
            items.push_str(&format!("<li><a href=\"{}\">{}</a></li>\n", attr(&url), text(&v.config.vhost)));
        }
    }
    let body = format!(
        "<p>Signed in as <strong>{}</strong> (level {}).</p>\n<ul>\n{}</ul>\n\
         <p><a href=\"/2fa/register/totp\">Register an authenticator app</a> · <a href=\"/logout\">Sign out</a></p>",
        text(&session.uid),
        session.auth_level,
        items
    );
    page(StatusCode::OK, "Applications", &body)
}

async fn logout(State(app): State<SharedApp>, req: Request<axum::body::Body>) -> Response {
    let cfg = app.cfg();
    let (parts, _) = req.into_parts();
    let info = portal_request(&cfg, "/logout", &parts);
    let sid = web::cookie(&parts.headers, &cfg.raw.cookie_name).filter(|s| is_valid_sid(s));
    app.portal.logout(&cfg, sid.as_deref(), &info);
    if let Some(sid) = &sid {
        app.cache.invalidate(sid);
    }
    with_cookies(redirect("/login"), &logout_cookies(&cfg))
}

async fn totp_start(State(app): State<SharedApp>, headers: HeaderMap) -> Response {
    let cfg = app.cfg();
    let Some(session) = cookie_session(&app, &cfg, &headers) else {
        return redirect(&format!(
            "/login?url={}",
            encode_target(&format!("{}/2fa/register/totp", cfg.portal_base()))
        ));
    };
    let (secret, uri) = app.portal.start_totp_registration(&cfg, &session.uid);
    page(StatusCode::OK, "Register an authenticator app", &totp_form(&secret, &uri, None))
}

fn totp_form(secret: &str, uri: &str, message: Option<&str>) -> String {
    let mut body = String::new();
    if let Some(m) = message {
        body.push_str(&format!("<p class=\"error\">{}</p>\n", text(m)));
    }
    body.push_str(&format!(
        "<p>Add this key to your authenticator app: <code>{}</code></p>\n\
         <p><a href=\"{}\">{}</a></p>\n\
         <form method=\"post\" action=\"/2fa/register/totp\">\n\
         <label>Current code <input type=\"text\" name=\"code\" inputmode=\"numeric\" autofocus></label>\n\
         <button type=\"submit\">Confirm</button>\n</form>",
        text(secret),
        attr(uri),
        text(uri)
    ));
    body
}

async fn totp_confirm(State(app): State<SharedApp>, headers: HeaderMap, RawForm(bytes): RawForm) -> Response {
    let cfg = app.cfg();
    let Some(session) = cookie_session(&app, &cfg, &headers) else {
        return redirect("/login");
    };
    let code = form_urlencoded::parse(&bytes)
        .find(|(k, _)| k == "code")
        .map(|(_, v)| v.into_owned())
        .unwrap_or_default();
    match app.portal.confirm_totp_registration(&cfg, &session.uid, &code) {
        Ok(()) => page(
            StatusCode::OK,
            "Authenticator registered",
            "<p>Your authenticator app is registered. It will be required at your next sign-in.</p>\n<p><a href=\"/menu\">Back</a></p>",
        ),
        Err(LoginError::BadCode) => {
            let secret = app.portal.registration_in_progress(&session.uid).unwrap_or_default();
            let uri = llng_core::portal::totp::otpauth_uri(
                &cfg.raw.mfa.totp_issuer,
                &session.uid,
                &secret,
                llng_core::portal::totp_params(&cfg),
            );
            page(StatusCode::BAD_REQUEST, "Register an authenticator app", &totp_form(&secret, &uri, Some("Invalid code")))
        }
        Err(LoginError::ExpiredLogin) => page(
            StatusCode::BAD_REQUEST,
            "Register an authenticator app",
            "<p class=\"error\">Registration expired.</p><p><a href=\"/2fa/register/totp\">Start again</a></p>",
        ),
        Err(e) => login_error(e, None),
    }
}

#[derive(Deserialize)]
struct CasLoginQuery {
    #[serde(default)]
    service: String,
}

async fn cas_login(State(app): State<SharedApp>, Query(q): Query<CasLoginQuery>, headers: HeaderMap) -> Response {
    let cfg = app.cfg();
    if !service_registered(&cfg, &q.service) {
        return page(
            StatusCode::BAD_REQUEST,
            "Unknown service",
            "<p class=\"error\">This application is not registered for single sign-on.</p>",
        );
    }
    match cookie_session(&app, &cfg, &headers) {
        Some(session) => match app.cas.issue(&cfg, &session, &q.service, app.clock.now()) {
            Ok(ticket) => redirect(&service_redirect(&q.service, &ticket)),
            Err(e) => page(StatusCode::BAD_REQUEST, "Unknown service", &format!("<p class=\"error\">{}</p>", text(&e.to_string()))),
        },
        None => {
            let back: String = form_urlencoded::Serializer::new(String::new())
                .append_pair("service", &q.service)
                .finish();
            redirect(&format!(
                "/login?url={}",
                encode_target(&format!("{}/cas/login?{back}", cfg.portal_base()))
            ))
        }
    }
}

#[derive(Deserialize)]
struct CasValidateQuery {
    #[serde(default)]
    service: String,
    #[serde(default)]
    ticket: String,
}

async fn cas_validate(State(app): State<SharedApp>, Query(q): Query<CasValidateQuery>) -> Response {
    let cfg = app.cfg();
    let result = app
        .cas
        .validate(&cfg, &app.sessions, &q.service, &q.ticket, app.clock.now());
    let mut resp = render_xml(&result).into_response();
    resp.headers_mut().insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("text/xml; charset=utf-8"),
    );
    web::no_store(resp)
}

async fn oidc_authorize(
    State(app): State<SharedApp>,
    RawQuery(raw): RawQuery,
    headers: HeaderMap,
) -> Response {
    let cfg = app.cfg();
    let raw = raw.unwrap_or_default();
    let mut fields = serde_json::Map::new();
    for (k, v) in form_urlencoded::parse(raw.as_bytes()) {
        fields.entry(k.into_owned()).or_insert(serde_json::Value::String(v.into_owned()));
    }
    let Ok(req) = serde_json::from_value::<AuthorizeRequest>(serde_json::Value::Object(fields)) else {
        return page(StatusCode::BAD_REQUEST, "Authorization error", "<p class=\"error\">invalid_request</p>");
    };
    let session = cookie_session(&app, &cfg, &headers);
    match app.oidc.authorize(&cfg, &req, session.as_ref(), app.clock.now()) {
        AuthorizeOutcome::Redirect(url) => redirect(&url),
        AuthorizeOutcome::ErrorPage { error, description } => page(
            StatusCode::BAD_REQUEST,
            "Authorization error",
            &format!("<p class=\"error\">{}: {}</p>", text(error), text(&description)),
        ),
        AuthorizeOutcome::Login => redirect(&format!(
            "/login?url={}",
            encode_target(&format!("{}/oauth2/authorize?{raw}", cfg.portal_base()))
        )),
    }
}

async fn oidc_token(State(app): State<SharedApp>, headers: HeaderMap, RawForm(bytes): RawForm) -> Response {
    let cfg = app.cfg();
    let mut fields = serde_json::Map::new();
    for (k, v) in form_urlencoded::parse(&bytes) {
        fields.entry(k.into_owned()).or_insert(serde_json::Value::String(v.into_owned()));
    }
    let mut req: TokenRequest = serde_json::from_value(serde_json::Value::Object(fields)).unwrap_or_default();
    let used_basic = match web::basic_credentials(&headers) {
        Some((id, secret)) => {
            // RFC 6749 form-encodes both parts before Basic encoding
            let dec = |s: &str| percent_decode_str(&s.replace('+', " ")).decode_utf8_lossy().into_owned();
            req.client_id = Some(dec(&id));
            req.client_secret = Some(dec(&secret));
            true
        }
        None => false,
    };
    let now = app.clock.now();
    let result = {
        let app = app.clone();
        let cfg = cfg.clone();
        tokio::task::spawn_blocking(move || app.oidc.token(&cfg, &app.sessions, &req, now)).await
    };
    let mut resp = match result {
        Ok(Ok(tokens)) => Json(tokens).into_response(),
        Ok(Err(e)) => {
            let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::BAD_REQUEST);
            let mut resp = (status, Json(&e)).into_response();
            if status == StatusCode::UNAUTHORIZED && used_basic {
                resp.headers_mut().insert(
                    header::WWW_AUTHENTICATE,
                    HeaderValue::from_static("Basic realm=\"oauth2\""),
                );
            }
            resp
        }
        Err(e) => web::json_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    resp.headers_mut().insert(header::PRAGMA, HeaderValue::from_static("no-cache"));
    web::no_store(resp)
}

async fn userinfo(State(app): State<SharedApp>, headers: HeaderMap) -> Response {
    let cfg = app.cfg();
    let Some(token) = web::bearer(&headers) else {
        let mut resp = StatusCode::UNAUTHORIZED.into_response();
        resp.headers_mut()
            .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        return resp;
    };
    match app.oidc.userinfo(&cfg, &app.sessions, &token, app.clock.now()) {
        Ok(claims) => web::no_store(Json(claims).into_response()),
        Err(e) => {
            let mut resp = (StatusCode::UNAUTHORIZED, Json(&e)).into_response();
            resp.headers_mut().insert(
                header::WWW_AUTHENTICATE,
                HeaderValue::from_static("Bearer error=\"invalid_token\""),
            );
            resp
        }
    }
}

async fn jwks(State(app): State<SharedApp>) -> Response {
    Json(app.oidc.keys().jwks()).into_response()
}

async fn discovery(State(app): State<SharedApp>) -> Response {
    let cfg = app.cfg();
    Json(app.oidc.discovery(&cfg)).into_response()
}
