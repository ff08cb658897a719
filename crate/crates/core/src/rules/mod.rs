//! Access rules: a small closed expression language evaluated against a
//! session and the current request, plus first-match URI dispatch and
//! header templates.
//!
//! Regexes (in URI keys and `=~` operands) use the `regex` crate dialect and
//! are unanchored unless the pattern itself anchors.

mod ast;
mod eval;
mod headers;
mod parser;

use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ast::{CmpOp, Expr, Func, Pattern};
pub use eval::{eval_bool, split_values, ConfigLists, EvalEnv, EvalError, RequestInfo};
pub use headers::{
    is_valid_header_name, render_headers, sanitize_header_value, HeaderTemplate, HeaderTemplates,
    InvalidHeaderName,
};
pub use parser::{parse_expr, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Special {
    Accept,
    Deny,
    /// Forward without a session and without injected headers.
    Unprotect,
    /// Forward without a session; headers rendered from an empty session.
    Skip,
}

impl Special {
    fn from_keyword(word: &str) -> Option<Self> {
        match word.to_ascii_lowercase().as_str() {
            "accept" => Some(Special::Accept),
            "deny" => Some(Special::Deny),
            "unprotect" => Some(Special::Unprotect),
            "skip" => Some(Special::Skip),
            _ => None,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Special::Accept => "accept",
            Special::Deny => "deny",
            Special::Unprotect => "unprotect",
            Special::Skip => "skip",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    Special(Special),
    Expr(Expr),
}

impl Rule {
    /// True when the rule can be decided without a session.
    pub fn is_sessionless(&self) -> bool {
        matches!(self, Rule::Special(Special::Unprotect | Special::Skip))
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Special(s) => f.write_str(s.keyword()),
            Rule::Expr(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Deny,
    Unprotect,
    Skip,
}

pub fn parse_rule(text: &str) -> Result<Rule, ParseError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(ParseError {
            position: 0,
            message: "empty rule".into(),
        });
    }
    if let Some(special) = Special::from_keyword(trimmed) {
        return Ok(Rule::Special(special));
    }
    parse_expr(text).map(Rule::Expr)
}

/// Evaluates a rule; runtime errors are returned so callers can record them.
pub fn evaluate_checked(rule: &Rule, env: &EvalEnv<'_>) -> Result<Decision, EvalError> {
    match rule {
        Rule::Special(Special::Accept) => Ok(Decision::Allow),
        Rule::Special(Special::Deny) => Ok(Decision::Deny),
        Rule::Special(Special::Unprotect) => Ok(Decision::Unprotect),
        Rule::Special(Special::Skip) => Ok(Decision::Skip),
        Rule::Expr(e) => Ok(if eval_bool(e, env)? {
            Decision::Allow
        } else {
            Decision::Deny
        }),
    }
}

/// Total evaluation: any runtime error denies.
pub fn evaluate(rule: &Rule, env: &EvalEnv<'_>) -> Decision {
    evaluate_checked(rule, env).unwrap_or(Decision::Deny)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleConfigError {
    #[error("invalid URI regex {key:?}: {message}")]
    Regex { key: String, message: String },
    #[error("rule for {key:?}: {error}")]
    Rule { key: String, error: ParseError },
}

#[derive(Debug, Clone)]
pub struct RuleEntry {
    pub pattern: String,
    regex: Regex,
    pub rule: Rule,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected<'a> {
    /// The matching URI regex, or `None` when the default rule applied.
    pub pattern: Option<&'a str>,
    pub rule: &'a Rule,
}

/// Ordered `(uri regex, rule)` entries and a default rule.
#[derive(Debug, Clone)]
pub struct AccessRules {
    entries: Vec<RuleEntry>,
    default: Rule,
}

impl AccessRules {
    /// Compiles all entries, collecting every error. The default rule is
    /// reported under the key `"default"`.
    pub fn compile<'a>(
        entries: impl IntoIterator<Item = (&'a str, &'a str)>,
        default: &str,
    ) -> Result<Self, Vec<RuleConfigError>> {
        let mut errors = Vec::new();
        let mut compiled = Vec::new();
        for (pattern, text) in entries {
            let regex = Regex::new(pattern).map_err(|e| RuleConfigError::Regex {
                key: pattern.to_string(),
                message: e.to_string(),
            });
            let rule = parse_rule(text).map_err(|error| RuleConfigError::Rule {
                key: pattern.to_string(),
                error,
            });
            match (regex, rule) {
                (Ok(regex), Ok(rule)) => compiled.push(RuleEntry {
                    pattern: pattern.to_string(),
                    regex,
                    rule,
                }),
                (r, u) => {
                    errors.extend(r.err());
                    errors.extend(u.err());
                }
            }
        }
        let default = parse_rule(default).map_err(|error| RuleConfigError::Rule {
            key: "default".into(),
            error,
        });
        match default {
            Ok(default) if errors.is_empty() => Ok(Self {
                entries: compiled,
                default,
            }),
            Ok(_) => Err(errors),
            Err(e) => {
                errors.push(e);
                Err(errors)
            }
        }
    }

    pub fn entries(&self) -> &[RuleEntry] {
        &self.entries
    }

    pub fn default_rule(&self) -> &Rule {
        &self.default
    }

    /// First entry whose regex matches `uri` (path + query), else the default.
    pub fn select(&self, uri: &str) -> Selected<'_> {
        self.entries
            .iter()
            .find(|e| e.regex.is_match(uri))
            .map(|e| Selected {
                pattern: Some(&e.pattern),
                rule: &e.rule,
            })
            .unwrap_or(Selected {
                pattern: None,
                rule: &self.default,
            })
    }
}
