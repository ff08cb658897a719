//! What-if evaluation of a user's access to a URL, without side effects.

use indexmap::IndexMap;
use serde::Serialize;
use thiserror::Error;
use url::Url;

use crate::access::{authorize, AccessResult, Policy};
use crate::config::{CompiledConfig, HandlerType};
use crate::devops::DevOpsCache;
use crate::portal::users::UserStore;
use crate::rules::{evaluate, Decision, EvalEnv, RequestInfo};
use crate::session::{Session, SessionKind, SessionStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckUserResult {
    pub uid: String,
    pub url: String,
    pub vhost: String,
    pub uri: String,
    /// `live` when one of the user's sessions was used, else `synthetic`.
    pub session: &'static str,
    pub auth_level: u32,
    #[serde(flatten)]
    pub access: AccessResult,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckUserError {
    #[error("not allowed to use CheckUser")]
    Forbidden,
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("invalid URL: {0}")]
    InvalidUrl(String),
    #[error("no virtual host {0}")]
    UnknownVhost(String),
}

pub struct CheckUserInputs<'a> {
    pub cfg: &'a CompiledConfig,
    pub sessions: &'a SessionStore,
    pub users: &'a UserStore,
    pub devops: &'a DevOpsCache,
    pub now_ms: i64,
}

/// The user's newest live session, or one built from the user record as a
/// fresh login would build it.
fn session_for(inputs: &CheckUserInputs<'_>, uid: &str) -> Result<(Session, &'static str), CheckUserError> {
    let live = inputs.sessions.list_sessions(Some(uid)).unwrap_or_default();
    if let Some(s) = live.into_iter().max_by_key(|s| s.created_at) {
        return Ok((s, "live"));
    }
    let user = inputs
        .users
        .get(uid)
        .ok_or_else(|| CheckUserError::UnknownUser(uid.to_string()))?;
    let mfa = &inputs.cfg.raw.mfa;
    let level = if user.totp_secret.is_some() {
        mfa.totp_level
    } else {
        mfa.password_level
    };
    let now = inputs.now_ms.div_euclid(1000);
    Ok((
        Session {
            sid: String::new(),
            uid: uid.to_string(),
            attributes: user.session_attributes(),
            auth_level: level,
            created_at: now,
            expires_at: now + inputs.cfg.raw.sessions.timeout,
            kind: SessionKind::Sso,
        },
        "synthetic",
    ))
}

pub fn check_user(
    inputs: &CheckUserInputs<'_>,
    admin: &Session,
    uid: &str,
    url: &str,
) -> Result<CheckUserResult, CheckUserError> {
    let cfg = inputs.cfg;
    let env = EvalEnv {
        session: admin,
        request: &RequestInfo::default(),
        lists: &cfg.lists,
    };
    if evaluate(&cfg.checkuser_rule, &env) != Decision::Allow {
        return Err(CheckUserError::Forbidden);
    }
    let parsed = Url::parse(url).map_err(|e| CheckUserError::InvalidUrl(e.to_string()))?;
    let host = parsed
        .host_str()
        .ok_or_else(|| CheckUserError::InvalidUrl("no host".into()))?
        .to_ascii_lowercase();
    let vhost = cfg
        .vhost(&host)
        .ok_or_else(|| CheckUserError::UnknownVhost(host.clone()))?;
    let mut uri = parsed.path().to_string();
    if let Some(q) = parsed.query() {
        uri.push('?');
        uri.push_str(q);
    }
    let (session, kind) = session_for(inputs, uid)?;
    let request = RequestInfo::new(host.clone(), uri.clone(), None);

    let access = if vhost.config.handler_type == HandlerType::DevOps {
        match inputs
            .devops
            .peek(&host, inputs.now_ms, vhost.config.devops_cache_ttl)
        {
            Some(doc) => authorize(
                &Policy {
                    rules: &doc.rules,
                    headers: &doc.headers,
                    required_auth_level: vhost.config.required_auth_level,
                },
                &cfg.lists,
                &session,
                &request,
            ),
            None => AccessResult {
                decision: Decision::Deny,
                matched_rule: None,
                rule: "deny".into(),
                headers: IndexMap::new(),
                reason: Some("no rules document fetched".into()),
            },
        }
    } else {
        authorize(
            &Policy {
                rules: &vhost.access,
                headers: &vhost.headers,
                required_auth_level: vhost.config.required_auth_level,
            },
            &cfg.lists,
            &session,
            &request,
        )
    };
    Ok(CheckUserResult {
        uid: uid.to_string(),
        url: url.to_string(),
        vhost: host,
        uri,
        session: kind,
        auth_level: session.auth_level,
        access,
    })
}
