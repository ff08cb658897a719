//! The authorization step shared by the gateway and CheckUser: select the
//! rule for a URI, evaluate it, apply the vhost's level requirement and
//! render the headers to inject.

use indexmap::IndexMap;
use serde::Serialize;

use crate::rules::{
    evaluate_checked, AccessRules, ConfigLists, Decision, EvalEnv, HeaderTemplates, RequestInfo,
    Rule, Special,
};
use crate::session::Session;

/// Rules and headers in force for one vhost. DevOps vhosts build this from
/// the fetched document, everything else from central configuration.
#[derive(Debug, Clone, Copy)]
pub struct Policy<'a> {
    pub rules: &'a AccessRules,
    pub headers: &'a HeaderTemplates,
    pub required_auth_level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccessResult {
    pub decision: Decision,
    /// URI regex that selected the rule; `None` for the default rule.
    pub matched_rule: Option<String>,
    pub rule: String,
    /// Headers that would be injected. Empty unless the request is
    /// forwarded with headers.
    pub headers: IndexMap<String, String>,
    /// Why an expression rule denied despite evaluating, if it did.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl AccessResult {
    pub fn forwards(&self) -> bool {
        self.decision != Decision::Deny
    }
}

/// Sessionless rules are decided before any SID is looked at.
pub fn sessionless_decision(policy: &Policy<'_>, uri: &str) -> Option<AccessResult> {
    let selected = policy.rules.select(uri);
    if !selected.rule.is_sessionless() {
        return None;
    }
    let decision = if matches!(selected.rule, Rule::Special(Special::Unprotect)) {
        Decision::Unprotect
    } else {
        Decision::Skip
    };
    let headers = if decision == Decision::Skip {
        policy.headers.render(&Session::anonymous())
    } else {
        IndexMap::new()
    };
    Some(AccessResult {
        decision,
        matched_rule: selected.pattern.map(str::to_string),
        rule: selected.rule.to_string(),
        headers,
        reason: None,
    })
}

/// Full decision for a request carried by `session`.
pub fn authorize(
    policy: &Policy<'_>,
    lists: &ConfigLists,
    session: &Session,
    request: &RequestInfo,
) -> AccessResult {
    if let Some(result) = sessionless_decision(policy, &request.uri) {
        return result;
    }
    let selected = policy.rules.select(&request.uri);
    let env = EvalEnv {
        session,
        request,
        lists,
    };
    let (mut decision, mut reason) = match evaluate_checked(selected.rule, &env) {
        Ok(d) => (d, None),
        Err(e) => (Decision::Deny, Some(e.to_string())),
    };
    if decision == Decision::Allow && session.auth_level < policy.required_auth_level {
        decision = Decision::Deny;
        reason = Some(format!(
            "authentication level {} below required {}",
            session.auth_level, policy.required_auth_level
        ));
    }
    let headers = if decision == Decision::Allow {
        policy.headers.render(session)
    } else {
        IndexMap::new()
    };
    AccessResult {
        decision,
        matched_rule: selected.pattern.map(str::to_string),
        rule: selected.rule.to_string(),
        headers,
        reason,
    }
}
