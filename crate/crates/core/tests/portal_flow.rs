mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::*;
use llng_core::clock::Clock;
use llng_core::accounting::AuditKind;
use llng_core::plugins::{EntryPoint, HookContext, Outcome, Plugin, PluginError};
use llng_core::portal::totp::{decode_secret, totp_at};
use llng_core::portal::{
    encode_target, totp_params, validate_target, AuthMethod, LoginError, LoginStep,
    NotificationOutcome, SecondFactor,
};
use llng_core::session::is_valid_sid;
use proptest::prelude::*;

fn authenticated(step: LoginStep) -> llng_core::portal::AuthResult {
    match step {
        LoginStep::Authenticated { auth, notices } => {
            assert!(notices.is_empty());
            auth
        }
        other => panic!("expected authenticated, got {other:?}"),
    }
}

fn register_totp(h: &Harness, uid: &str) -> Vec<u8> {
    let (secret, uri) = h.portal.start_totp_registration(&h.cfg, uid);
    assert!(uri.starts_with("otpauth://totp/"));
    let key = decode_secret(&secret).unwrap();
    let code = totp_at(&key, h.clock.now() as u64, totp_params(&h.cfg));
    h.portal.confirm_totp_registration(&h.cfg, uid, &code).unwrap();
    // move past the enrolment step so the login code is not a replay
    h.clock.advance(30);
    key
}


#[test]
fn password_only_login() {
    let h = harness();
    let req = login_request("192.0.2.10");
    let step = h
        .portal
        .authenticate_password(&h.cfg, "alice", "alice-pw", None, &req)
        .unwrap();
    let auth = authenticated(step);
    assert_eq!(auth.auth_level, 1);
    assert_eq!(auth.method, AuthMethod::Password);
    let done = h.portal.complete_login(&h.cfg, &auth, None, &req).unwrap();
    assert!(is_valid_sid(&done.session.sid));
    assert_eq!(done.redirect, "https://auth.example.com/menu");
    assert!(done.set_cookie.starts_with(&format!("lemonldap={}; Domain=.example.com; Path=/; HttpOnly", done.session.sid)));
    assert!(done.set_cookie.contains("Secure"));
    assert_eq!(h.sessions.list_sessions(None).unwrap().len(), 1);
    assert_eq!(h.kinds(), vec![AuditKind::AuthSuccess, AuditKind::SessionCreate]);
}

#[test]
fn unknown_user_and_bad_password_identical() {
    let h = harness();
    let req = login_request("192.0.2.10");
    let a = h.portal.authenticate_password(&h.cfg, "alice", "nope", None, &req).unwrap_err();
    let b = h.portal.authenticate_password(&h.cfg, "ghost", "nope", None, &req).unwrap_err();
    assert_eq!(a, b);
    assert_eq!(a.to_string(), b.to_string());
    let events = h.audit.events().unwrap();
    assert_eq!(events.len(), 2);
    assert!(events.iter().all(|e| e.kind == AuditKind::AuthFailure && e.client_ip == "192.0.2.10"));
}

#[test]
fn totp_user_needs_second_factor() {
    let h = harness();
    let key = register_totp(&h, "alice");
    let req = login_request("192.0.2.10");
    let target = Some("https://app1.example.com/x".to_string());
    let LoginStep::SecondFactor { token, factor } = h
        .portal
        .authenticate_password(&h.cfg, "alice", "alice-pw", target.clone(), &req)
        .unwrap()
    else {
        panic!("expected second factor");
    };
    assert_eq!(factor, SecondFactor::Totp);
    assert!(h.sessions.list_sessions(None).unwrap().is_empty());
    let code = totp_at(&key, h.clock.now() as u64, totp_params(&h.cfg));
    let (step, got_target) = h.portal.verify_second_factor(&h.cfg, &token, &code, &req).unwrap();
    assert_eq!(got_target, target);
    let auth = authenticated(step);
    assert_eq!(auth.auth_level, 2);
    assert_eq!(auth.method, AuthMethod::PasswordTotp);
    // the pending login is single-use
    assert_eq!(
        h.portal.verify_second_factor(&h.cfg, &token, &code, &req).unwrap_err(),
        LoginError::ExpiredLogin
    );
}

#[test]
fn wrong_code_consumes_pending_and_counts() {
    let h = harness();
    register_totp(&h, "alice");
    let req = login_request("192.0.2.10");
    let LoginStep::SecondFactor { token, .. } = h
        .portal
        .authenticate_password(&h.cfg, "alice", "alice-pw", None, &req)
        .unwrap()
    else {
        panic!()
    };
    assert_eq!(
        h.portal.verify_second_factor(&h.cfg, &token, "000000", &req).unwrap_err(),
        LoginError::BadCode
    );
    assert_eq!(h.bruteforce.failures("alice"), 1);
    assert_eq!(
        h.portal.verify_second_factor(&h.cfg, &token, "000000", &req).unwrap_err(),
        LoginError::ExpiredLogin
    );
}

#[test]
fn pending_login_expires() {
    let h = harness();
    let key = register_totp(&h, "alice");
    let req = login_request("192.0.2.10");
    let LoginStep::SecondFactor { token, .. } = h
        .portal
        .authenticate_password(&h.cfg, "alice", "alice-pw", None, &req)
        .unwrap()
    else {
        panic!()
    };
    h.clock.advance(301);
    let code = totp_at(&key, h.clock.now() as u64, totp_params(&h.cfg));
    assert_eq!(
        h.portal.verify_second_factor(&h.cfg, &token, &code, &req).unwrap_err(),
        LoginError::ExpiredLogin
    );
}

#[test]
fn mail_second_factor() {
    let h = harness();
    let req = login_request("192.0.2.10");
    let first = h.portal.authenticate_password(&h.cfg, "bob", "bob-pw", None, &req).unwrap();
    let LoginStep::SecondFactor { token: t1, factor } = first else { panic!() };
    assert_eq!(factor, SecondFactor::Mail);
    let code1 = h.mail.last_code_for("bob@example.com").unwrap();
    let LoginStep::SecondFactor { token: t2, .. } =
        h.portal.authenticate_password(&h.cfg, "bob", "bob-pw", None, &req).unwrap()
    else {
        panic!()
    };
    let code2 = h.mail.last_code_for("bob@example.com").unwrap();
    if code1 != code2 {
        // only the latest code is valid
        assert_eq!(
            h.portal.verify_second_factor(&h.cfg, &t1, &code1, &req).unwrap_err(),
            LoginError::BadCode
        );
    }
    let (step, _) = h.portal.verify_second_factor(&h.cfg, &t2, &code2, &req).unwrap();
    let auth = authenticated(step);
    assert_eq!((auth.auth_level, auth.method), (2, AuthMethod::PasswordMail));
    // no mail content leaks into the audit trail
    let raw = h.audit.raw_text().unwrap();
    assert!(!raw.contains(&code2));
}

#[test]
fn bruteforce_threshold_through_portal() {
    let h = harness();
    let req = login_request("192.0.2.10");
    for _ in 0..4 {
        h.portal.authenticate_password(&h.cfg, "alice", "bad", None, &req).unwrap_err();
    }
    // four failures then success clears the counter
    h.portal.authenticate_password(&h.cfg, "alice", "alice-pw", None, &req).unwrap();
    assert_eq!(h.bruteforce.failures("alice"), 0);

    for _ in 0..5 {
        assert_eq!(
            h.portal.authenticate_password(&h.cfg, "alice", "bad", None, &req).unwrap_err(),
            LoginError::BadCredentials
        );
    }
    let err = h.portal.authenticate_password(&h.cfg, "alice", "alice-pw", None, &req).unwrap_err();
    assert_eq!(err, LoginError::AccountLocked { until: h.clock.now() + 300 });
    assert_eq!(h.kinds().last(), Some(&AuditKind::AuthLocked));
    h.clock.advance(299);
    assert!(matches!(
        h.portal.authenticate_password(&h.cfg, "alice", "alice-pw", None, &req),
        Err(LoginError::AccountLocked { .. })
    ));
    h.clock.advance(1);
    h.portal.authenticate_password(&h.cfg, "alice", "alice-pw", None, &req).unwrap();
    assert_eq!(h.users.get("alice").unwrap().locked_until, None);
}

#[test]
fn notifications_withhold_redirect_until_accepted() {
    let h = harness();
    let req = login_request("192.0.2.10");
    let info = h.notifications.create("alice", "Welcome", "hi", false, T0).unwrap();
    let terms = h.notifications.create("_all", "Terms", "accept", true, T0).unwrap();
    let LoginStep::Authenticated { auth, notices } = h
        .portal
        .authenticate_password(&h.cfg, "alice", "alice-pw", None, &req)
        .unwrap()
    else {
        panic!()
    };
    assert_eq!(notices.len(), 2);
    let token = h.portal.hold_for_notifications(&h.cfg, auth, notices, None);
    let NotificationOutcome::StillPending { token, notices } =
        h.portal.accept_notifications(&h.cfg, &token, &[]).unwrap()
    else {
        panic!("redirect must be withheld");
    };
    assert_eq!(notices, vec![terms.clone()]);
    let NotificationOutcome::Done { auth, .. } =
        h.portal.accept_notifications(&h.cfg, &token, &[terms.id.clone()]).unwrap()
    else {
        panic!()
    };
    assert_eq!(auth.uid, "alice");
    // second login: nothing left for alice, bob still sees the terms
    let LoginStep::Authenticated { notices, .. } = h
        .portal
        .authenticate_password(&h.cfg, "alice", "alice-pw", None, &req)
        .unwrap()
    else {
        panic!()
    };
    assert!(notices.is_empty(), "{notices:?} (info {})", info.id);
    assert_eq!(h.notifications.pending("admin").unwrap(), vec![terms]);
}

struct Counting(AtomicUsize);

impl Plugin for Counting {
    fn name(&self) -> &str {
        "counting"
    }
    fn entry_points(&self) -> &[EntryPoint] {
        &[EntryPoint::EndSession]
    }
    fn run(&self, _: EntryPoint, ctx: &mut HookContext<'_>) -> Result<Outcome, PluginError> {
        assert!(ctx.session.is_some());
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok(Outcome::Continue)
    }
}

#[test]
fn logout_fires_end_session_once() {
    let counter = Arc::new(Counting(AtomicUsize::new(0)));
    let h = harness_with(base_config(), |e| {
        e.register(counter.clone());
    });
    let req = login_request("192.0.2.10");
    let auth = authenticated(
        h.portal.authenticate_password(&h.cfg, "alice", "alice-pw", None, &req).unwrap(),
    );
    let done = h.portal.complete_login(&h.cfg, &auth, None, &req).unwrap();
    let cookie = h.portal.logout(&h.cfg, Some(&done.session.sid), &req);
    assert!(cookie.contains("Max-Age=0"));
    assert!(h.sessions.get_session(&done.session.sid).is_err());
    h.portal.logout(&h.cfg, Some(&done.session.sid), &req);
    h.portal.logout(&h.cfg, None, &req);
    assert_eq!(counter.0.load(Ordering::SeqCst), 1);
    assert_eq!(h.kinds().iter().filter(|k| **k == AuditKind::SessionDelete).count(), 1);
}

#[test]
fn target_validation() {
    let h = harness();
    let ok = "https://app1.example.com/x?y=1";
    assert_eq!(validate_target(&h.cfg, &encode_target(ok)).as_deref(), Some(ok));
    let padded = base64_padded(ok);
    assert_eq!(validate_target(&h.cfg, &padded).as_deref(), Some(ok));
    assert_eq!(validate_target(&h.cfg, &encode_target("https://auth.example.com/menu")).as_deref(), Some("https://auth.example.com/menu"));
    for bad in [
        "https://evil.example.net/",
        "https://app1.example.com.evil.net/",
        "javascript:alert(1)",
        "https://user@app1.example.com/",
    ] {
        assert_eq!(validate_target(&h.cfg, &encode_target(bad)), None, "{bad}");
    }
    assert_eq!(validate_target(&h.cfg, "%%%"), None);
    assert_eq!(validate_target(&h.cfg, ""), None);
}

fn base64_padded(s: &str) -> String {
    use base64::Engine;
    base64::engine::general_purpose::URL_SAFE.encode(s)
}

#[test]
fn totp_registration_rules() {
    let h = harness();
    let (secret, _) = h.portal.start_totp_registration(&h.cfg, "alice");
    let key = decode_secret(&secret).unwrap();
    let stale = totp_at(&key, (h.clock.now() - 120) as u64, totp_params(&h.cfg));
    assert_eq!(
        h.portal.confirm_totp_registration(&h.cfg, "alice", &stale).unwrap_err(),
        LoginError::BadCode
    );
    assert!(h.users.get("alice").unwrap().totp_secret.is_none());

    let old_key = register_totp(&h, "alice");
    // re-registration keeps the old device until confirmed
    let (new_secret, _) = h.portal.start_totp_registration(&h.cfg, "alice");
    assert_ne!(h.users.get("alice").unwrap().totp_secret.as_deref(), Some(new_secret.as_str()));
    let new_key = decode_secret(&new_secret).unwrap();
    let code = totp_at(&new_key, h.clock.now() as u64, totp_params(&h.cfg));
    h.portal.confirm_totp_registration(&h.cfg, "alice", &code).unwrap();
    h.clock.advance(30);
    let req = login_request("192.0.2.10");
    let LoginStep::SecondFactor { token, .. } = h
        .portal
        .authenticate_password(&h.cfg, "alice", "alice-pw", None, &req)
        .unwrap()
    else {
        panic!()
    };
    let old_code = totp_at(&old_key, h.clock.now() as u64, totp_params(&h.cfg));
    assert_eq!(
        h.portal.verify_second_factor(&h.cfg, &token, &old_code, &req).unwrap_err(),
        LoginError::BadCode
    );
}

#[test]
fn adaptive_level_set_zero_from_untrusted_network() {
    let mut cfg = base_config();
    cfg["level_rules"] = serde_json::json!([
        {"condition": "ipInRange(\"10.0.0.0/8\")", "delta": 1},
        {"condition": "not ipInRange(\"10.0.0.0/8\")", "set": 0}
    ]);
    let h = harness_with(cfg, |_| {});
    let inside = login_request("10.1.2.3");
    let auth = authenticated(h.portal.authenticate_password(&h.cfg, "alice", "alice-pw", None, &inside).unwrap());
    let s = h.portal.complete_login(&h.cfg, &auth, None, &inside).unwrap().session;
    assert_eq!(s.auth_level, 2);
    assert_eq!(h.sessions.get_session(&s.sid).unwrap().auth_level, 2);
    let outside = login_request("198.51.100.7");
    let auth = authenticated(h.portal.authenticate_password(&h.cfg, "alice", "alice-pw", None, &outside).unwrap());
    let s = h.portal.complete_login(&h.cfg, &auth, None, &outside).unwrap().session;
    assert_eq!(h.sessions.get_session(&s.sid).unwrap().auth_level, 0);
}

#[test]
fn basic_login_reuses_session() {
    let h = harness();
    let req = login_request("192.0.2.10");
    let a = h.portal.basic_login(&h.cfg, "alice", "alice-pw", &req).unwrap();
    let b = h.portal.basic_login(&h.cfg, "alice", "alice-pw", &req).unwrap();
    assert_eq!(a.sid, b.sid);
    assert_eq!(h.sessions.list_sessions(None).unwrap().len(), 1);
    assert_eq!(
        h.portal.basic_login(&h.cfg, "alice", "wrong", &req).unwrap_err(),
        LoginError::BadCredentials
    );
    register_totp(&h, "bob");
    assert_eq!(
        h.portal.basic_login(&h.cfg, "bob", "bob-pw", &req).unwrap_err(),
        LoginError::SecondFactorRequired
    );
}

#[derive(Debug, Clone)]
enum Action {
    Password { right: bool },
    Code { use_token: usize, garbage: bool },
    Tick,
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        any::<bool>().prop_map(|right| Action::Password { right }),
        (0usize..4, any::<bool>()).prop_map(|(use_token, garbage)| Action::Code { use_token, garbage }),
        Just(Action::Tick),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// A TOTP user never ends up authenticated without a valid code.
    #[test]
    fn totp_user_never_authenticated_by_password_alone(actions in prop::collection::vec(action(), 1..12)) {
        let h = harness();
        let key = register_totp(&h, "alice");
        let req = login_request("192.0.2.10");
        let mut tokens: Vec<String> = Vec::new();
        for a in actions {
            match a {
                Action::Password { right } => {
                    let pw = if right { "alice-pw" } else { "wrong" };
                    match h.portal.authenticate_password(&h.cfg, "alice", pw, None, &req) {
                        Ok(LoginStep::SecondFactor { token, .. }) => tokens.push(token),
                        Ok(LoginStep::Authenticated { .. }) => prop_assert!(false, "password alone authenticated"),
                        Err(_) => {}
                    }
                }
                Action::Code { use_token, garbage } => {
                    let token = tokens.get(use_token).cloned().unwrap_or_else(|| "bogus".into());
                    let code = if garbage {
                        "123456".to_string()
                    } else {
                        totp_at(&key, h.clock.now() as u64, totp_params(&h.cfg))
                    };
                    if let Ok((LoginStep::Authenticated { auth, .. }, _)) =
                        h.portal.verify_second_factor(&h.cfg, &token, &code, &req)
                    {
                        prop_assert_eq!(auth.auth_level, 2);
                        prop_assert!(!garbage || code == totp_at(&key, h.clock.now() as u64, totp_params(&h.cfg)));
                    }
                }
                Action::Tick => h.clock.advance(31),
            }
        }
    }
}
