use std::collections::BTreeMap;
use std::net::IpAddr;

use ipnet::IpNet;
use thiserror::Error;

use super::ast::{CmpOp, Expr, Func};
use crate::session::Session;

/// Request facts a rule may refer to.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestInfo {
    pub vhost: String,
    /// Path and query.
    pub uri: String,
    pub ip: Option<IpAddr>,
    /// Lowercased header names.
    pub headers: BTreeMap<String, String>,
}

impl RequestInfo {
    pub fn new(vhost: impl Into<String>, uri: impl Into<String>, ip: Option<IpAddr>) -> Self {
        Self {
            vhost: vhost.into(),
            uri: uri.into(),
            ip,
            headers: BTreeMap::new(),
        }
    }
}

/// Named lists from configuration, reachable as `cfg.<name>`.
pub type ConfigLists = BTreeMap<String, Vec<String>>;

pub struct EvalEnv<'a> {
    pub session: &'a Session,
    pub request: &'a RequestInfo,
    pub lists: &'a ConfigLists,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("type error: {0}")]
    Type(String),
    #[error("unknown configuration list cfg.{0}")]
    UnknownList(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Int(i64),
    Bool(bool),
    List(Vec<String>),
}

impl Value {
    fn describe(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Int(_) => "integer",
            Value::Bool(_) => "boolean",
            Value::List(_) => "list",
        }
    }

    fn scalar(&self) -> Result<String, EvalError> {
        match self {
            Value::Str(s) => Ok(s.clone()),
            Value::Int(i) => Ok(i.to_string()),
            Value::Bool(b) => Ok(b.to_string()),
            Value::List(_) => Err(EvalError::Type("list used where a scalar is expected".into())),
        }
    }

    fn int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            Value::Str(s) => s.trim().parse().ok(),
            _ => None,
        }
    }

    fn boolean(&self) -> Result<bool, EvalError> {
        match self {
            Value::Bool(b) => Ok(*b),
            other => Err(EvalError::Type(format!(
                "expected boolean, found {}",
                other.describe()
            ))),
        }
    }
}

pub(crate) fn parse_cidr(text: &str) -> Option<IpNet> {
    text.parse::<IpNet>()
        .ok()
        .or_else(|| text.parse::<IpAddr>().ok().map(IpNet::from))
}

/// Splits a multi-valued attribute such as `groups` ("a,b; c").
pub fn split_values(s: &str) -> impl Iterator<Item = &str> {
    s.split([',', ';', ' ']).map(str::trim).filter(|v| !v.is_empty())
}

fn lookup_var(name: &str, env: &EvalEnv<'_>) -> Value {
    match name {
        "uri" => Value::Str(env.request.uri.clone()),
        "vhost" => Value::Str(env.request.vhost.clone()),
        "ip" => Value::Str(env.request.ip.map(|ip| ip.to_string()).unwrap_or_default()),
        "authLevel" => Value::Int(env.session.auth_level as i64),
        _ => {
            if let Some(header) = name.strip_prefix("http_") {
                let header = header.replace('_', "-").to_ascii_lowercase();
                return Value::Str(env.request.headers.get(&header).cloned().unwrap_or_default());
            }
            Value::Str(env.session.attr(name).unwrap_or_default().to_string())
        }
    }
}

fn eval(expr: &Expr, env: &EvalEnv<'_>) -> Result<Value, EvalError> {
    Ok(match expr {
        Expr::Str(s) => Value::Str(s.clone()),
        Expr::Int(i) => Value::Int(*i),
        Expr::Bool(b) => Value::Bool(*b),
        Expr::Var(v) => lookup_var(v, env),
        Expr::Cfg(name) => Value::List(
            env.lists
                .get(name)
                .cloned()
                .ok_or_else(|| EvalError::UnknownList(name.clone()))?,
        ),
        Expr::List(items) => Value::List(
            items
                .iter()
                .map(|i| eval(i, env)?.scalar())
                .collect::<Result<_, _>>()?,
        ),
        Expr::Not(e) => Value::Bool(!eval(e, env)?.boolean()?),
        Expr::And(a, b) => Value::Bool(eval(a, env)?.boolean()? && eval(b, env)?.boolean()?),
        Expr::Or(a, b) => Value::Bool(eval(a, env)?.boolean()? || eval(b, env)?.boolean()?),
        Expr::Cmp(op, a, b) => Value::Bool(compare(*op, &eval(a, env)?, &eval(b, env)?)?),
        Expr::Match {
            negated,
            subject,
            pattern,
        } => {
            let s = eval(subject, env)?.scalar()?;
            Value::Bool(pattern.regex.is_match(&s) != *negated)
        }
        Expr::In(needle, haystack) => {
            let needle = eval(needle, env)?.scalar()?;
            let found = match eval(haystack, env)? {
                Value::List(items) => items.iter().any(|i| *i == needle),
                Value::Str(s) => split_values(&s).any(|v| v == needle),
                other => {
                    return Err(EvalError::Type(format!(
                        "'in' needs a list or string, found {}",
                        other.describe()
                    )))
                }
            };
            Value::Bool(found)
        }
        Expr::Call(func, args) => {
            let arg = eval(&args[0], env)?.scalar()?;
            match func {
                Func::IpInRange => {
                    let net = parse_cidr(&arg)
                        .ok_or_else(|| EvalError::Type(format!("invalid CIDR block {arg:?}")))?;
                    Value::Bool(env.request.ip.is_some_and(|ip| net.contains(&ip)))
                }
                Func::InGroup => Value::Bool(
                    split_values(env.session.attr("groups").unwrap_or_default()).any(|g| g == arg),
                ),
            }
        }
    })
}

fn compare(op: CmpOp, a: &Value, b: &Value) -> Result<bool, EvalError> {
    match op {
        CmpOp::Eq | CmpOp::Ne => {
            let equal = match (a, b) {
                (Value::Bool(x), Value::Bool(y)) => x == y,
                (Value::Int(_), _) | (_, Value::Int(_)) => match (a.int(), b.int()) {
                    (Some(x), Some(y)) => x == y,
                    _ => a.scalar()? == b.scalar()?,
                },
                _ => a.scalar()? == b.scalar()?,
            };
            Ok(equal == (op == CmpOp::Eq))
        }
        _ => {
            let (Some(x), Some(y)) = (a.int(), b.int()) else {
                return Err(EvalError::Type(format!(
                    "'{}' needs integers, found {} and {}",
                    op.symbol(),
                    a.describe(),
                    b.describe()
                )));
            };
            Ok(match op {
                CmpOp::Lt => x < y,
                CmpOp::Le => x <= y,
                CmpOp::Gt => x > y,
                _ => x >= y,
            })
        }
    }
}

/// Evaluates an expression to a boolean verdict.
pub fn eval_bool(expr: &Expr, env: &EvalEnv<'_>) -> Result<bool, EvalError> {
    eval(expr, env)?.boolean()
}
