//! CAS v2 server: service tickets and `serviceValidate`.

use std::collections::{BTreeMap, HashMap};

use parking_lot::Mutex;
use rand::RngCore;

use crate::accounting::{AuditEvent, AuditKind, SharedAccounting};
use crate::config::CompiledConfig;
use crate::session::{Session, SessionStore};

pub const TICKET_PREFIX: &str = "ST-";
pub const CAS_NS: &str = "http://www.yale.edu/tp/cas";

#[derive(Debug, Clone)]
struct ServiceTicket {
    service: String,
    sid: String,
    issued_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CasFailureCode {
    InvalidRequest,
    InvalidTicket,
    InvalidService,
}

impl CasFailureCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CasFailureCode::InvalidRequest => "INVALID_REQUEST",
            CasFailureCode::InvalidTicket => "INVALID_TICKET",
            CasFailureCode::InvalidService => "INVALID_SERVICE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CasValidation {
    Success {
        user: String,
        attributes: BTreeMap<String, String>,
    },
    Failure {
        code: CasFailureCode,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("service {0} is not registered")]
pub struct UnknownService(pub String);

/// True if `service` starts with a registered prefix.
pub fn service_registered(cfg: &CompiledConfig, service: &str) -> bool {
    !service.is_empty() && cfg.raw.cas.services.iter().any(|p| service.starts_with(p.as_str()))
}

pub struct CasServer {
    tickets: Mutex<HashMap<String, ServiceTicket>>,
    audit: SharedAccounting,
}

fn valid_xml_name(name: &str) -> bool {
    let mut chars = name.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl CasServer {
    pub fn new(audit: SharedAccounting) -> Self {
        Self {
            tickets: Mutex::new(HashMap::new()),
            audit,
        }
    }

    /// Mints a ticket for `service` on behalf of `session`.
    pub fn issue(
        &self,
        cfg: &CompiledConfig,
        session: &Session,
        service: &str,
        now: i64,
    ) -> Result<String, UnknownService> {
        if !service_registered(cfg, service) {
            return Err(UnknownService(service.to_string()));
        }
        let mut raw = [0u8; 20];
        rand::rngs::OsRng.fill_bytes(&mut raw);
        let ticket = format!("{TICKET_PREFIX}{}", hex::encode(raw));
        let ttl = cfg.raw.cas.ticket_ttl;
        let mut tickets = self.tickets.lock();
        tickets.retain(|_, t| now < t.issued_at + ttl);
        tickets.insert(
            ticket.clone(),
            ServiceTicket {
                service: service.to_string(),
                sid: session.sid.clone(),
                issued_at: now,
            },
        );
        drop(tickets);
        self.audit.emit(
            AuditEvent::new(AuditKind::TokenMint)
                .uid(session.uid.clone())
                .sid(&session.sid)
                .detail("type", "cas_ticket")
                .detail("service", service)
                .secret("ticket", &ticket),
        );
        Ok(ticket)
    }

    /// Validates and consumes a ticket. Any presentation of a known ticket
    /// consumes it, successful or not.
    pub fn validate(
        &self,
        cfg: &CompiledConfig,
        sessions: &SessionStore,
        service: &str,
        ticket: &str,
        now: i64,
    ) -> CasValidation {
        let result = self.check(cfg, sessions, service, ticket, now);
        let (event, uid) = match &result {
            CasValidation::Success { user, .. } => {
                (AuditEvent::new(AuditKind::CasValidate).detail("result", "success"), user.as_str())
            }
            CasValidation::Failure { code, .. } => (
                AuditEvent::new(AuditKind::CasValidate)
                    .detail("result", "failure")
                    .detail("code", code.as_str()),
                "",
            ),
        };
        self.audit.emit(
            event
                .uid(uid)
                .detail("service", service)
                .secret("ticket", ticket),
        );
        result
    }

    fn check(
        &self,
        cfg: &CompiledConfig,
        sessions: &SessionStore,
        service: &str,
        ticket: &str,
        now: i64,
    ) -> CasValidation {
        let fail = |code: CasFailureCode, message: String| CasValidation::Failure { code, message };
        if service.is_empty() || ticket.is_empty() {
            return fail(
                CasFailureCode::InvalidRequest,
                "service and ticket parameters are required".into(),
            );
        }
        let Some(st) = self.tickets.lock().remove(ticket) else {
            return fail(CasFailureCode::InvalidTicket, "ticket not recognized".into());
        };
        if now >= st.issued_at + cfg.raw.cas.ticket_ttl {
            return fail(CasFailureCode::InvalidTicket, "ticket expired".into());
        }
        if st.service != service {
            return fail(
                CasFailureCode::InvalidService,
                "ticket was issued for another service".into(),
            );
        }
        let Ok(session) = sessions.get_session(&st.sid) else {
            return fail(CasFailureCode::InvalidTicket, "session ended".into());
        };
        let attributes = session
            .attributes
            .iter()
            .filter(|(k, _)| !k.starts_with('_') && valid_xml_name(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        CasValidation::Success {
            user: session.uid,
            attributes,
        }
    }
}

/// CAS v2 `serviceValidate` response body.
pub fn render_xml(v: &CasValidation) -> String {
    use html_escape::{encode_double_quoted_attribute as attr, encode_text as text};
    let mut out = format!("<cas:serviceResponse xmlns:cas=\"{CAS_NS}\">\n");
    match v {
        CasValidation::Success { user, attributes } => {
            out.push_str("  <cas:authenticationSuccess>\n");
            out.push_str(&format!("    <cas:user>{}</cas:user>\n", text(user)));
            out.push_str("    <cas:attributes>\n");
            for (k, val) in attributes {
                if valid_xml_name(k) {
                    out.push_str(&format!("      <cas:{k}>{}</cas:{k}>\n", text(val)));
                }
            }
            out.push_str("    </cas:attributes>\n");
            out.push_str("  </cas:authenticationSuccess>\n");
        }
        CasValidation::Failure { code, message } => {
            out.push_str(&format!(
                "  <cas:authenticationFailure code=\"{}\">{}</cas:authenticationFailure>\n",
                attr(code.as_str()),
                text(message)
            ));
        }
    }
    out.push_str("</cas:serviceResponse>\n");
    out
}

/// Appends `ticket=` to a service URL.
pub fn service_redirect(service: &str, ticket: &str) -> String {
    let sep = if service.contains('?') { '&' } else { '?' };
    format!("{service}{sep}ticket={ticket}")
}
