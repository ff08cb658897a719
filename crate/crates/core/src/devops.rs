//! Application-published access rules (`rules.json`).
//!
//! ```json
//! {
//!   "rules": { "^/admin": "$uid == \"admin\"", "default": "accept" },
//!   "headers": { "Auth-User": "$uid" }
//! }
//! ```
//!
//! Rules keep document order; the first matching URI regex wins and
//! `default` applies otherwise. [`check_devops`] is the only validator: the
//! gateway's fetch path, the CLI and the Manager API all call it.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::Mutex;
use serde_json::Value;

use crate::rules::{AccessRules, HeaderTemplates, RuleConfigError};

pub const RULES_PATH: &str = "/rules.json";
/// Last-known-good documents are served for at most this many TTLs after
/// their fetch when refreshing fails.
pub const STALE_FACTOR: i64 = 10;

#[derive(Debug, Clone)]
pub struct RulesDocument {
    pub rules: AccessRules,
    pub headers: HeaderTemplates,
    pub source: Value,
}

/// Validates a document, collecting every error.
pub fn check_devops(text: &str) -> Result<RulesDocument, Vec<String>> {
    let source: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return Err(vec![format!("invalid JSON: {e}")]),
    };
    let Some(top) = source.as_object() else {
        return Err(vec!["document must be a JSON object".into()]);
    };
    let mut errors = Vec::new();
    for key in top.keys() {
        if key != "rules" && key != "headers" {
            errors.push(format!("unknown key {key:?}"));
        }
    }

    let mut entries: Vec<(String, String)> = Vec::new();
    let mut default = None;
    match top.get("rules") {
        None => errors.push("rules missing".into()),
        Some(Value::Object(rules)) => {
            for (k, v) in rules {
                match v.as_str() {
                    Some(text) if k == "default" => default = Some(text.to_string()),
                    Some(text) => entries.push((k.clone(), text.to_string())),
                    None => errors.push(format!("rules[{k:?}] must be a string")),
                }
            }
            if !rules.contains_key("default") {
                errors.push("rules.default missing".into());
            }
        }
        Some(_) => errors.push("rules must be an object".into()),
    }

    let mut header_defs: IndexMap<String, String> = IndexMap::new();
    match top.get("headers") {
        None => {}
        Some(Value::Object(headers)) => {
            for (k, v) in headers {
                match v.as_str() {
                    Some(tpl) => {
                        header_defs.insert(k.clone(), tpl.to_string());
                    }
                    None => errors.push(format!("headers[{k:?}] must be a string")),
                }
            }
        }
        Some(_) => errors.push("headers must be an object".into()),
    }
    let headers = match HeaderTemplates::compile(&header_defs) {
        Ok(h) => Some(h),
        Err(bad) => {
            errors.extend(bad.into_iter().map(|e| e.to_string()));
            None
        }
    };

    // a missing default is already reported; compile against `deny` so the
    // remaining entries are still checked
    let rules = AccessRules::compile(
        entries.iter().map(|(k, v)| (k.as_str(), v.as_str())),
        default.as_deref().unwrap_or("deny"),
    );
    let rules = match rules {
        Ok(r) => Some(r),
        Err(errs) => {
            errors.extend(errs.into_iter().map(|e| match e {
                RuleConfigError::Rule { key, error } if key == "default" && default.is_some() => {
                    format!("rules.default: {error}")
                }
                other => other.to_string(),
            }));
            None
        }
    };

    match (rules, headers) {
        (Some(rules), Some(headers)) if errors.is_empty() => Ok(RulesDocument {
            rules,
            headers,
            source,
        }),
        _ => Err(errors),
    }
}

#[derive(Debug, Clone)]
pub enum Lookup {
    /// Fetched within the TTL.
    Fresh(Arc<RulesDocument>),
    /// The caller should fetch now, then call [`DevOpsCache::store`] or
    /// [`DevOpsCache::record_failure`].
    Refresh,
    /// A recent fetch failed; use the last-known-good document if there is
    /// one, otherwise deny.
    Fallback(Option<Arc<RulesDocument>>),
}

#[derive(Debug, Clone, Default)]
struct Entry {
    doc: Option<Arc<RulesDocument>>,
    fetched_at_ms: i64,
    failed_at_ms: Option<i64>,
    last_error: Option<String>,
}

/// Per-vhost document cache. Holds state only; fetching is done by the
/// gateway.
#[derive(Default)]
pub struct DevOpsCache {
    entries: Mutex<HashMap<String, Entry>>,
}

impl Entry {
    fn last_known_good(&self, now_ms: i64, ttl_s: i64) -> Option<Arc<RulesDocument>> {
        self.doc
            .clone()
            .filter(|_| now_ms - self.fetched_at_ms <= STALE_FACTOR * ttl_s * 1000)
    }
}

impl DevOpsCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, vhost: &str, now_ms: i64, ttl_s: i64) -> Lookup {
        let entries = self.entries.lock();
        let Some(e) = entries.get(vhost) else {
            return Lookup::Refresh;
        };
        if let Some(doc) = &e.doc {
            if now_ms - e.fetched_at_ms <= ttl_s * 1000 {
                return Lookup::Fresh(doc.clone());
            }
        }
        // after a failure, wait before hammering the upstream again
        let backoff_ms = ttl_s.min(5) * 1000;
        match e.failed_at_ms {
            Some(failed) if now_ms - failed < backoff_ms => {
                Lookup::Fallback(e.last_known_good(now_ms, ttl_s))
            }
            _ => Lookup::Refresh,
        }
    }

    pub fn store(&self, vhost: &str, doc: RulesDocument, now_ms: i64) -> Arc<RulesDocument> {
        let doc = Arc::new(doc);
        self.entries.lock().insert(
            vhost.to_string(),
            Entry {
                doc: Some(doc.clone()),
                fetched_at_ms: now_ms,
                failed_at_ms: None,
                last_error: None,
            },
        );
        doc
    }

    /// Records a failed fetch and returns the document still usable.
    pub fn record_failure(
        &self,
        vhost: &str,
        error: String,
        now_ms: i64,
        ttl_s: i64,
    ) -> Option<Arc<RulesDocument>> {
        let mut entries = self.entries.lock();
        let e = entries.entry(vhost.to_string()).or_default();
        e.failed_at_ms = Some(now_ms);
        e.last_error = Some(error);
        e.last_known_good(now_ms, ttl_s)
    }

    /// Document the gateway would currently use, without fetching.
    pub fn peek(&self, vhost: &str, now_ms: i64, ttl_s: i64) -> Option<Arc<RulesDocument>> {
        self.entries.lock().get(vhost)?.last_known_good(now_ms, ttl_s)
    }

    pub fn last_error(&self, vhost: &str) -> Option<String> {
        self.entries.lock().get(vhost)?.last_error.clone()
    }

    pub fn invalidate(&self, vhost: &str) {
        self.entries.lock().remove(vhost);
    }
}
