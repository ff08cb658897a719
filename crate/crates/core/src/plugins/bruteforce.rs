//! Locks an account after repeated login failures.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;

use super::{AbortReason, EntryPoint, HookContext, Outcome, Plugin, PluginError};
use crate::config::BruteForceSettings;
use crate::portal::users::UserStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockState {
    Ok,
    Locked { until: i64 },
}

#[derive(Default)]
struct Counter {
    failures: VecDeque<i64>,
    locked_until: Option<i64>,
}

/// Failure windows live in memory; lock deadlines are also written to the
/// user record so they survive a restart. Unknown uids are counted too, so
/// the lock response does not reveal which accounts exist.
pub struct BruteForceProtection {
    users: Arc<UserStore>,
    counters: Mutex<HashMap<String, Counter>>,
}

impl BruteForceProtection {
    pub fn new(users: Arc<UserStore>) -> Self {
        Self {
            users,
            counters: Mutex::new(HashMap::new()),
        }
    }

    pub fn check(&self, uid: &str, now: i64) -> LockState {
        let in_memory = self.counters.lock().get(uid).and_then(|c| c.locked_until);
        let persisted = self.users.get(uid).and_then(|u| u.locked_until);
        match in_memory.max(persisted) {
            Some(until) if now < until => LockState::Locked { until },
            _ => LockState::Ok,
        }
    }

    /// Records one failure; returns the lock state after it.
    pub fn record_failure(&self, uid: &str, now: i64, settings: &BruteForceSettings) -> LockState {
        let lock = {
            let mut counters = self.counters.lock();
            let c = counters.entry(uid.to_string()).or_default();
            while c.failures.front().is_some_and(|&t| now - t >= settings.window_seconds) {
                c.failures.pop_front();
            }
            c.failures.push_back(now);
            if c.failures.len() >= settings.max_failures as usize {
                c.failures.clear();
                let until = now + settings.lock_seconds;
                c.locked_until = Some(until);
                Some(until)
            } else {
                None
            }
        };
        match lock {
            Some(until) => {
                if self.users.get(uid).is_some() {
                    if let Err(e) = self.users.set_locked_until(uid, Some(until)) {
                        tracing::warn!(uid, error = %e, "could not persist account lock");
                    }
                }
                LockState::Locked { until }
            }
            None => LockState::Ok,
        }
    }

    pub fn failures(&self, uid: &str) -> usize {
        self.counters.lock().get(uid).map_or(0, |c| c.failures.len())
    }

    pub fn clear(&self, uid: &str) {
        self.counters.lock().remove(uid);
    }
}

impl Plugin for BruteForceProtection {
    fn name(&self) -> &str {
        "BruteForceProtection"
    }

    fn entry_points(&self) -> &[EntryPoint] {
        &[
            EntryPoint::BeforeAuth,
            EntryPoint::AfterAuthFailure,
            EntryPoint::AfterAuthSuccess,
        ]
    }

    fn run(&self, entry: EntryPoint, ctx: &mut HookContext<'_>) -> Result<Outcome, PluginError> {
        let settings = &ctx.cfg.raw.bruteforce;
        if !settings.enabled {
            return Ok(Outcome::Continue);
        }
        match entry {
            EntryPoint::BeforeAuth => match self.check(ctx.uid, ctx.now) {
                LockState::Locked { until } => {
                    Ok(Outcome::Abort(AbortReason::AccountLocked { until }))
                }
                LockState::Ok => Ok(Outcome::Continue),
            },
            EntryPoint::AfterAuthFailure => {
                self.record_failure(ctx.uid, ctx.now, settings);
                Ok(Outcome::Continue)
            }
            EntryPoint::AfterAuthSuccess => {
                self.clear(ctx.uid);
                if self.users.get(ctx.uid).is_some_and(|u| u.locked_until.is_some()) {
                    self.users.set_locked_until(ctx.uid, None)?;
                }
                Ok(Outcome::Continue)
            }
            _ => Ok(Outcome::Continue),
        }
    }
}
