//! The login state machine: password, optional second factor, optional
//! notifications, then session creation and the SSO cookie.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use base64::engine::general_purpose::{URL_SAFE, URL_SAFE_NO_PAD};
use base64::Engine;
use hmac::{Hmac, Mac};
use parking_lot::Mutex;
use rand::RngCore;
use serde::Serialize;
use sha2::Sha256;
use thiserror::Error;
use url::Url;

use super::mail::{MailCodeError, MailCodes, MailTransport};
use super::totp::{generate_secret, otpauth_uri, TotpParams, TotpVerifier};
use super::users::{UserError, UserRecord, UserStore};
use crate::accounting::{AuditEvent, AuditKind, SharedAccounting};
use crate::clock::SharedClock;
use crate::config::CompiledConfig;
use crate::plugins::{
    AbortReason, EntryPoint, HookContext, Notification, NotificationStore, Outcome, PluginEngine,
};
use crate::rules::RequestInfo;
use crate::session::{Session, SessionError, SessionKind, SessionStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AuthMethod {
    #[serde(rename = "password")]
    Password,
    #[serde(rename = "password+totp")]
    PasswordTotp,
    #[serde(rename = "password+mail")]
    PasswordMail,
}

impl AuthMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AuthMethod::Password => "password",
            AuthMethod::PasswordTotp => "password+totp",
            AuthMethod::PasswordMail => "password+mail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuthResult {
    pub uid: String,
    pub auth_level: u32,
    pub method: AuthMethod,
    #[serde(skip)]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SecondFactor {
    Totp,
    Mail,
}

#[derive(Debug, Clone)]
enum Stage {
    NeedSecondFactor(SecondFactor),
    NeedNotifications {
        auth: AuthResult,
        notices: Vec<Notification>,
    },
}

/// Server-side state between two login steps; the browser only holds the
/// opaque token.
#[derive(Debug, Clone)]
struct PendingLogin {
    uid: String,
    stage: Stage,
    created_at: i64,
    target: Option<String>,
}

#[derive(Debug, Clone)]
pub enum LoginStep {
    /// All factors passed. `notices` must be shown (see
    /// [`Portal::hold_for_notifications`]) before the session is created.
    Authenticated {
        auth: AuthResult,
        notices: Vec<Notification>,
    },
    SecondFactor {
        token: String,
        factor: SecondFactor,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoginError {
    /// Unknown user and wrong password are deliberately the same.
    #[error("bad credentials")]
    BadCredentials,
    #[error("account locked")]
    AccountLocked { until: i64 },
    #[error("login refused: {0}")]
    Aborted(String),
    #[error("login expired, please start again")]
    ExpiredLogin,
    #[error("invalid code")]
    BadCode,
    #[error("second factor required")]
    SecondFactorRequired,
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone)]
pub struct LoginComplete {
    pub session: Session,
    pub set_cookie: String,
    pub redirect: String,
}

#[derive(Debug, Clone)]
pub enum NotificationOutcome {
    /// Every required acceptance is recorded.
    Done {
        auth: AuthResult,
        target: Option<String>,
    },
    /// Some `require_accept` notifications are still unaccepted.
    StillPending {
        token: String,
        notices: Vec<Notification>,
    },
}

pub struct PortalDeps {
    pub sessions: Arc<SessionStore>,
    pub users: Arc<UserStore>,
    pub plugins: Arc<PluginEngine>,
    pub notifications: Arc<NotificationStore>,
    pub audit: SharedAccounting,
    pub clock: SharedClock,
    pub mail: Arc<dyn MailTransport>,
}

pub struct Portal {
    deps: PortalDeps,
    pending: Mutex<HashMap<String, PendingLogin>>,
    registrations: Mutex<HashMap<String, (String, i64)>>,
    basic_sessions: Mutex<HashMap<[u8; 32], String>>,
    basic_key: [u8; 32],
    totp: TotpVerifier,
    mail_codes: MailCodes,
}

fn random_token() -> String {
    let mut b = [0u8; 24];
    rand::rngs::OsRng.fill_bytes(&mut b);
    URL_SAFE_NO_PAD.encode(b)
}

pub fn totp_params(cfg: &CompiledConfig) -> TotpParams {
    TotpParams {
        step: cfg.raw.mfa.totp_step,
        digits: cfg.raw.mfa.totp_digits,
        skew: cfg.raw.mfa.totp_skew,
    }
}

/// Encodes a return URL for the `url` query parameter.
pub fn encode_target(url: &str) -> String {
    URL_SAFE_NO_PAD.encode(url.as_bytes())
}

/// Decodes and checks a `url` parameter. Only URLs on a configured vhost or
/// on the portal itself are kept; anything else is dropped.
pub fn validate_target(cfg: &CompiledConfig, encoded: &str) -> Option<String> {
    let encoded = encoded.trim();
    if encoded.is_empty() {
        return None;
    }
    let bytes = URL_SAFE_NO_PAD
        .decode(encoded)
        .or_else(|_| URL_SAFE.decode(encoded))
        .ok()?;
    let text = String::from_utf8(bytes).ok()?;
    let allowed = Url::parse(&text).ok().filter(|u| {
        matches!(u.scheme(), "http" | "https")
            && u.username().is_empty()
            && u.host_str().is_some_and(|h| {
                let h = h.to_ascii_lowercase();
                h == cfg.portal_host || cfg.vhost(&h).is_some()
            })
    });
    if allowed.is_none() {
        tracing::warn!(target = %text, "dropping return URL outside the SSO domain");
    }
    allowed.map(|_| text)
}

pub fn session_cookie(cfg: &CompiledConfig, sid: &str) -> String {
    let mut c = format!(
        "{}={}; Domain={}; Path=/; HttpOnly; SameSite=Lax",
        cfg.raw.cookie_name, sid, cfg.raw.sso_domain
    );
    if cfg.raw.secure_cookie {
        c.push_str("; Secure");
    }
    c
}

pub fn expired_cookie(cfg: &CompiledConfig) -> String {
    let mut c = format!(
        "{}=; Domain={}; Path=/; HttpOnly; SameSite=Lax; Max-Age=0",
        cfg.raw.cookie_name, cfg.raw.sso_domain
    );
    if cfg.raw.secure_cookie {
        c.push_str("; Secure");
    }
    c
}

impl Portal {
    pub fn new(deps: PortalDeps, mail_code_ttl: i64) -> Self {
        let mut basic_key = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut basic_key);
        Self {
            deps,
            pending: Mutex::new(HashMap::new()),
            registrations: Mutex::new(HashMap::new()),
            basic_sessions: Mutex::new(HashMap::new()),
            basic_key,
            totp: TotpVerifier::new(),
            mail_codes: MailCodes::new(mail_code_ttl),
        }
    }

    pub fn deps(&self) -> &PortalDeps {
        &self.deps
    }

    fn now(&self) -> i64 {
        self.deps.clock.now()
    }

    fn event(&self, kind: AuditKind, uid: &str, req: &RequestInfo) -> AuditEvent {
        AuditEvent::new(kind)
            .uid(uid)
            .vhost(req.vhost.clone())
            .uri(req.uri.clone())
            .ip(req.ip.map(|ip| ip.to_string()).unwrap_or_default())
    }

    fn store_pending(&self, cfg: &CompiledConfig, p: PendingLogin) -> String {
        let token = random_token();
        let ttl = cfg.raw.mfa.pending_login_ttl;
        let now = p.created_at;
        let mut pending = self.pending.lock();
        pending.retain(|_, old| now - old.created_at <= ttl);
        pending.insert(token.clone(), p);
        token
    }

    /// Removes and returns a pending login; a token works once.
    fn take_pending(&self, cfg: &CompiledConfig, token: &str) -> Option<PendingLogin> {
        let p = self.pending.lock().remove(token)?;
        (self.now() - p.created_at <= cfg.raw.mfa.pending_login_ttl).then_some(p)
    }

    /// Runs beforeAuth. Emits the one audit event for a refused attempt.
    fn before_auth(&self, cfg: &CompiledConfig, uid: &str, req: &RequestInfo) -> Result<(), LoginError> {
        let mut ctx = HookContext::new(cfg, self.now(), uid, req);
        match self.deps.plugins.run(EntryPoint::BeforeAuth, &mut ctx) {
            Outcome::Continue => Ok(()),
            Outcome::Abort(reason) => Err(self.refuse(uid, req, reason)),
        }
    }

    fn refuse(&self, uid: &str, req: &RequestInfo, reason: AbortReason) -> LoginError {
        match reason {
            AbortReason::AccountLocked { until } => {
                self.deps.audit.emit(
                    self.event(AuditKind::AuthLocked, uid, req)
                        .detail("locked_until", until),
                );
                LoginError::AccountLocked { until }
            }
            AbortReason::Other(why) => {
                self.deps.audit.emit(
                    self.event(AuditKind::PluginAbort, uid, req)
                        .detail("reason", why.clone()),
                );
                LoginError::Aborted(why)
            }
        }
    }

    fn fail(&self, cfg: &CompiledConfig, uid: &str, req: &RequestInfo, reason: &str) {
        let mut ctx = HookContext::new(cfg, self.now(), uid, req);
        self.deps.plugins.run(EntryPoint::AfterAuthFailure, &mut ctx);
        self.deps.audit.emit(
            self.event(AuditKind::AuthFailure, uid, req)
                .detail("reason", reason),
        );
    }

    /// All factors passed: afterAuthSuccess, then `auth_success`.
    fn succeed(
        &self,
        cfg: &CompiledConfig,
        user: &UserRecord,
        method: AuthMethod,
        level: u32,
        req: &RequestInfo,
    ) -> Result<LoginStep, LoginError> {
        let mut ctx = HookContext::new(cfg, self.now(), &user.uid, req);
        if let Outcome::Abort(reason) = self.deps.plugins.run(EntryPoint::AfterAuthSuccess, &mut ctx) {
            return Err(self.refuse(&user.uid, req, reason));
        }
        let notices = std::mem::take(&mut ctx.notices);
        self.deps.audit.emit(
            self.event(AuditKind::AuthSuccess, &user.uid, req)
                .detail("method", method.as_str())
                .detail("auth_level", level),
        );
        Ok(LoginStep::Authenticated {
            auth: AuthResult {
                uid: user.uid.clone(),
                auth_level: level,
                method,
                attributes: user.session_attributes(),
            },
            notices,
        })
    }

    pub fn authenticate_password(
        &self,
        cfg: &CompiledConfig,
        uid: &str,
        password: &str,
        target: Option<String>,
        req: &RequestInfo,
    ) -> Result<LoginStep, LoginError> {
        let uid = uid.trim();
        self.before_auth(cfg, uid, req)?;
        let user = match self.deps.users.check_password(uid, password) {
            Ok(u) => u,
            Err(UserError::BadCredentials) => {
                self.fail(cfg, uid, req, "bad_credentials");
                return Err(LoginError::BadCredentials);
            }
            Err(e) => return Err(LoginError::Internal(e.to_string())),
        };
        let mfa = &cfg.raw.mfa;
        let factor = if user.totp_secret.is_some() {
            Some(SecondFactor::Totp)
        } else if mfa.mail_enabled && user.mail.is_some() {
            Some(SecondFactor::Mail)
        } else {
            None
        };
        let Some(factor) = factor else {
            return self.succeed(cfg, &user, AuthMethod::Password, mfa.password_level, req);
        };
        if factor == SecondFactor::Mail {
            let sent = self.mail_codes.issue(
                &user.uid,
                user.mail.as_deref(),
                self.now(),
                self.deps.mail.as_ref(),
            );
            if let Err(e) = sent {
                self.fail(cfg, uid, req, "mail_delivery");
                return Err(LoginError::Internal(e.to_string()));
            }
        }
        let token = self.store_pending(
            cfg,
            PendingLogin {
                uid: user.uid.clone(),
                stage: Stage::NeedSecondFactor(factor),
                created_at: self.now(),
                target,
            },
        );
        Ok(LoginStep::SecondFactor { token, factor })
    }

    /// Target URL remembered with a pending login, without consuming it.
    pub fn pending_target(&self, token: &str) -> Option<String> {
        self.pending.lock().get(token).and_then(|p| p.target.clone())
    }

    /// Second step. The pending token is consumed whatever the outcome.
    pub fn verify_second_factor(
        &self,
        cfg: &CompiledConfig,
        token: &str,
        code: &str,
        req: &RequestInfo,
    ) -> Result<(LoginStep, Option<String>), LoginError> {
        let Some(pending) = self.take_pending(cfg, token) else {
            self.deps.audit.emit(
                self.event(AuditKind::AuthFailure, "", req)
                    .detail("reason", "expired_login"),
            );
            return Err(LoginError::ExpiredLogin);
        };
        let Stage::NeedSecondFactor(factor) = pending.stage else {
            self.deps.audit.emit(
                self.event(AuditKind::AuthFailure, &pending.uid, req)
                    .detail("reason", "expired_login"),
            );
            return Err(LoginError::ExpiredLogin);
        };
        let uid = pending.uid.as_str();
        let user = self
            .deps
            .users
            .get(uid)
            .ok_or_else(|| LoginError::Internal(format!("user {uid} vanished")))?;
        let now = self.now();
        let mfa = &cfg.raw.mfa;
        let (ok, method, level) = match factor {
            SecondFactor::Totp => {
                let secret = user.totp_secret.as_deref().unwrap_or_default();
                let ok = self.totp.verify(secret, code.trim(), now, totp_params(cfg));
                (Ok(ok), AuthMethod::PasswordTotp, mfa.totp_level)
            }
            SecondFactor::Mail => (
                self.mail_codes.verify(uid, code, now),
                AuthMethod::PasswordMail,
                mfa.mail_level,
            ),
        };
        match ok {
            Ok(true) => {
                let step = self.succeed(cfg, &user, method, level, req)?;
                Ok((step, pending.target))
            }
            Ok(false) => {
                self.fail(cfg, uid, req, "bad_code");
                Err(LoginError::BadCode)
            }
            Err(MailCodeError::ExpiredCode) => {
                self.fail(cfg, uid, req, "expired_code");
                Err(LoginError::BadCode)
            }
            Err(e) => {
                self.fail(cfg, uid, req, "mail_code");
                Err(LoginError::Internal(e.to_string()))
            }
        }
    }

    /// Parks an authenticated login until its notifications are handled.
    /// Informational ones are marked seen now, as they are being displayed.
    pub fn hold_for_notifications(
        &self,
        cfg: &CompiledConfig,
        auth: AuthResult,
        notices: Vec<Notification>,
        target: Option<String>,
    ) -> String {
        let now = self.now();
        let info: Vec<String> = notices
            .iter()
            .filter(|n| !n.require_accept)
            .map(|n| n.id.clone())
            .collect();
        if let Err(e) = self.deps.notifications.mark_seen(&auth.uid, &info, now) {
            tracing::warn!(uid = %auth.uid, error = %e, "could not record seen notifications");
        }
        self.store_pending(
            cfg,
            PendingLogin {
                uid: auth.uid.clone(),
                stage: Stage::NeedNotifications { auth, notices },
                created_at: now,
                target,
            },
        )
    }

    pub fn held_notifications(&self, token: &str) -> Option<Vec<Notification>> {
        match &self.pending.lock().get(token)?.stage {
            Stage::NeedNotifications { notices, .. } => Some(notices.clone()),
            Stage::NeedSecondFactor(_) => None,
        }
    }

    /// Records the accepted ids; releases the login once nothing that needs
    /// acceptance is left.
    pub fn accept_notifications(
        &self,
        cfg: &CompiledConfig,
        token: &str,
        accepted: &[String],
    ) -> Result<NotificationOutcome, LoginError> {
        let pending = self.take_pending(cfg, token).ok_or(LoginError::ExpiredLogin)?;
        let Stage::NeedNotifications { auth, notices } = pending.stage else {
            return Err(LoginError::ExpiredLogin);
        };
        let now = self.now();
        let store = &self.deps.notifications;
        for n in notices.iter().filter(|n| accepted.contains(&n.id)) {
            store
                .accept(&auth.uid, &n.id, now)
                .map_err(|e| LoginError::Internal(e.to_string()))?;
        }
        let still: Vec<Notification> = store
            .pending(&auth.uid)
            .map_err(|e| LoginError::Internal(e.to_string()))?
            .into_iter()
            .filter(|n| n.require_accept)
            .collect();
        if still.is_empty() {
            return Ok(NotificationOutcome::Done {
                auth,
                target: pending.target,
            });
        }
        let token = self.store_pending(
            cfg,
            PendingLogin {
                uid: auth.uid.clone(),
                stage: Stage::NeedNotifications {
                    auth,
                    notices: still.clone(),
                },
                created_at: pending.created_at,
                target: pending.target,
            },
        );
        Ok(NotificationOutcome::StillPending {
            token,
            notices: still,
        })
    }

    /// Creates the SSO session, runs afterSessionCreate and emits
    /// `session_create`.
    pub fn create_session(
        &self,
        cfg: &CompiledConfig,
        auth: &AuthResult,
        req: &RequestInfo,
    ) -> Result<Session, LoginError> {
        let store = &self.deps.sessions;
        let mut session = store
            .create_session(
                &auth.uid,
                auth.attributes.clone(),
                auth.auth_level,
                cfg.raw.sessions.timeout,
                SessionKind::Sso,
            )
            .map_err(|e| LoginError::Internal(e.to_string()))?;
        let before = session.clone();
        let mut ctx = HookContext::new(cfg, self.now(), &auth.uid, req).with_session(&mut session);
        self.deps.plugins.run(EntryPoint::AfterSessionCreate, &mut ctx);
        drop(ctx);
        if session != before {
            // plugins may only touch attributes and level
            session.sid = before.sid.clone();
            session.uid = before.uid.clone();
            session.kind = before.kind;
            store
                .update_session(&session)
                .map_err(|e| LoginError::Internal(e.to_string()))?;
        }
        self.deps.audit.emit(
            self.event(AuditKind::SessionCreate, &auth.uid, req)
                .sid(&session.sid)
                .detail("auth_level", session.auth_level)
                .detail("method", auth.method.as_str()),
        );
        Ok(session)
    }

    /// Session plus cookie and redirect: to the target, else the menu.
    pub fn complete_login(
        &self,
        cfg: &CompiledConfig,
        auth: &AuthResult,
        target: Option<String>,
        req: &RequestInfo,
    ) -> Result<LoginComplete, LoginError> {
        let session = self.create_session(cfg, auth, req)?;
        Ok(LoginComplete {
            set_cookie: session_cookie(cfg, &session.sid),
            redirect: target.unwrap_or_else(|| format!("{}/menu", cfg.portal_base())),
            session,
        })
    }

    /// Deletes the session if there is one. Returns the expired cookie.
    pub fn logout(&self, cfg: &CompiledConfig, sid: Option<&str>, req: &RequestInfo) -> String {
        if let Some(sid) = sid {
            if let Ok(mut session) = self.deps.sessions.get_session(sid) {
                if session.kind == SessionKind::Sso && self.deps.sessions.delete_session(sid).is_ok() {
                    let uid = session.uid.clone();
                    let mut ctx =
                        HookContext::new(cfg, self.now(), &uid, req).with_session(&mut session);
                    self.deps.plugins.run(EntryPoint::EndSession, &mut ctx);
                    self.deps.audit.emit(
                        self.event(AuditKind::SessionDelete, &uid, req)
                            .sid(sid)
                            .detail("reason", "logout"),
                    );
                }
            }
        }
        expired_cookie(cfg)
    }

    /// Starts (or restarts) TOTP enrolment. Nothing is stored on the user
    /// until [`Portal::confirm_totp_registration`] succeeds.
    pub fn start_totp_registration(&self, cfg: &CompiledConfig, uid: &str) -> (String, String) {
        let secret = generate_secret();
        let uri = otpauth_uri(&cfg.raw.mfa.totp_issuer, uid, &secret, totp_params(cfg));
        self.registrations
            .lock()
            .insert(uid.to_string(), (secret.clone(), self.now()));
        (secret, uri)
    }

    pub fn registration_in_progress(&self, uid: &str) -> Option<String> {
        self.registrations.lock().get(uid).map(|(s, _)| s.clone())
    }

    pub fn confirm_totp_registration(
        &self,
        cfg: &CompiledConfig,
        uid: &str,
        code: &str,
    ) -> Result<(), LoginError> {
        let now = self.now();
        let secret = {
            let regs = self.registrations.lock();
            match regs.get(uid) {
                Some((secret, started)) if now - started <= cfg.raw.mfa.pending_login_ttl => {
                    secret.clone()
                }
                _ => return Err(LoginError::ExpiredLogin),
            }
        };
        if !self.totp.verify(&secret, code.trim(), now, totp_params(cfg)) {
            return Err(LoginError::BadCode);
        }
        self.registrations.lock().remove(uid);
        self.deps
            .users
            .set_totp_secret(uid, Some(secret))
            .map_err(|e| LoginError::Internal(e.to_string()))
    }

    /// Basic authentication for AuthBasic vhosts. Repeated requests with the
    /// same credentials reuse one session while it lives.
    pub fn basic_login(
        &self,
        cfg: &CompiledConfig,
        uid: &str,
        password: &str,
        req: &RequestInfo,
    ) -> Result<Session, LoginError> {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.basic_key).expect("any key length");
        mac.update(uid.as_bytes());
        mac.update(&[0]);
        mac.update(password.as_bytes());
        let key: [u8; 32] = mac.finalize().into_bytes().into();
        let known = self.basic_sessions.lock().get(&key).cloned();
        if let Some(sid) = known {
            match self.deps.sessions.get_session(&sid) {
                Ok(s) => return Ok(s),
                Err(SessionError::NotFound | SessionError::Expired) => {
                    self.basic_sessions.lock().remove(&key);
                }
                Err(e) => return Err(LoginError::Internal(e.to_string())),
            }
        }
        self.before_auth(cfg, uid, req)?;
        let user = match self.deps.users.check_password(uid, password) {
            Ok(u) => u,
            Err(UserError::BadCredentials) => {
                self.fail(cfg, uid, req, "bad_credentials");
                return Err(LoginError::BadCredentials);
            }
            Err(e) => return Err(LoginError::Internal(e.to_string())),
        };
        if user.totp_secret.is_some() {
            self.fail(cfg, uid, req, "second_factor_required");
            return Err(LoginError::SecondFactorRequired);
        }
        let LoginStep::Authenticated { auth, .. } =
            self.succeed(cfg, &user, AuthMethod::Password, cfg.raw.mfa.password_level, req)?
        else {
            unreachable!("succeed always authenticates");
        };
        let session = self.create_session(cfg, &auth, req)?;
        self.basic_sessions.lock().insert(key, session.sid.clone());
        Ok(session)
    }
}
