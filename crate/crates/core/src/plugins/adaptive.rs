//! Adjusts the authentication level of a new session from its context.

use super::{EntryPoint, HookContext, Outcome, Plugin, PluginError};
use crate::config::{CompiledLevelRule, LevelAction};
use crate::rules::{eval_bool, ConfigLists, EvalEnv, RequestInfo, Rule, Special};
use crate::session::Session;

/// Applies the first level rule whose condition holds. The result is never
/// negative.
pub fn adapt_level(
    session: &Session,
    request: &RequestInfo,
    lists: &ConfigLists,
    rules: &[CompiledLevelRule],
) -> u32 {
    let env = EvalEnv {
        session,
        request,
        lists,
    };
    for r in rules {
        let matched = match &r.condition {
            Rule::Special(Special::Accept) => true,
            Rule::Special(_) => false,
            Rule::Expr(e) => eval_bool(e, &env).unwrap_or(false),
        };
        if matched {
            return match r.action {
                LevelAction::Set(level) => level,
                LevelAction::Delta(d) => (session.auth_level as i64 + d).clamp(0, u32::MAX as i64) as u32,
            };
        }
    }
    session.auth_level
}

pub struct AdaptativeAuthLevel;

impl Plugin for AdaptativeAuthLevel {
    fn name(&self) -> &str {
        "AdaptativeAuthLevel"
    }

    fn entry_points(&self) -> &[EntryPoint] {
        &[EntryPoint::AfterSessionCreate]
    }

    fn run(&self, _: EntryPoint, ctx: &mut HookContext<'_>) -> Result<Outcome, PluginError> {
        if let Some(session) = ctx.session.as_deref_mut() {
            session.auth_level =
                adapt_level(session, ctx.request, &ctx.cfg.lists, &ctx.cfg.level_rules);
        }
        Ok(Outcome::Continue)
    }
}
