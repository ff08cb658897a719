mod support;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use llng_core::accounting::AuditKind;
use llng_core::token::seal_sid;
use llng_core::token::TokenKey;
use reqwest::Method;
use serde_json::{json, Value};
use support::*;

#[tokio::test]
async fn unknown_or_missing_host_is_misdirected() {
    let s = stack().await;
    let r = s.gw_get("nope.example.com", "/", None).send().await.unwrap();
    assert_eq!(r.status(), 421);
    let r = s.gw_get("auth.example.com", "/", None).send().await.unwrap();
    assert_eq!(r.status(), 421);
    assert_eq!(s.upstream.hits(), 0);
}

#[tokio::test]
async fn host_matching_ignores_case_and_port() {
    let s = stack().await;
    let sid = s.login("alice", "alice-pw").await;
    let r = s.gw_get("APP1.Example.com:8443", "/", Some(&sid)).send().await.unwrap();
    assert_eq!(r.status(), 200);
}

#[tokio::test]
async fn api_clients_get_401_browsers_get_redirect() {
    let s = stack().await;
    let r = s.gw_get("app1.example.com", "/x", None).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let r = s
        .gw_get("app1.example.com", "/x", Some(&"0".repeat(32)))
        .header("accept", "text/html")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 302);
    assert!(location(&r).starts_with("https://auth.example.com/login?url="));
    assert_eq!(s.upstream.hits(), 0);
}

#[tokio::test]
async fn deny_rule_gives_403_and_audit() {
    let s = stack().await;
    let sid = s.login("alice", "alice-pw").await;
    let r = s.gw_get("app1.example.com", "/admin/panel", Some(&sid)).send().await.unwrap();
    assert_eq!(r.status(), 403);
    assert_eq!(s.upstream.hits(), 0);
    let ev = s.events().pop().unwrap();
    assert_eq!(ev.kind, AuditKind::AuthzDeny);
    assert_eq!(ev.uid.as_deref(), Some("alice"));
    assert_eq!(ev.detail["matched_rule"], "^/admin");

    let admin = s.login("admin", "admin-pw").await;
    let r = s.gw_get("app1.example.com", "/admin/panel", Some(&admin)).send().await.unwrap();
    assert_eq!(r.status(), 200);
}

#[tokio::test]
async fn unprotected_paths_need_no_session_and_carry_no_identity() {
    let s = stack().await;
    let r = s
        .gw_get("app1.example.com", "/public/a.css", None)
        .header("Auth-User", "admin")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    assert!(s.upstream.last().unwrap().all("auth-user").is_empty());
}

#[tokio::test]
async fn upstream_response_is_relayed_and_request_decorated() {
    let s = stack().await;
    let sid = s.login("alice", "alice-pw").await;
    let r = s
        .gw(Method::POST, "app1.example.com", "/submit?a=b")
        .header("cookie", format!("lemonldap={sid}"))
        .header("x-forwarded-for", "203.0.113.9")
        .header("te", "trailers")
        .body("payload")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(r.headers()["x-upstream"], "echo");
    let seen = s.upstream.last().unwrap();
    assert_eq!(seen.method, "POST");
    assert_eq!(seen.uri, "/submit?a=b");
    assert_eq!(seen.get("host"), Some("app1.example.com"));
    assert_eq!(seen.get("x-forwarded-for"), Some("203.0.113.9, 127.0.0.1"));
    assert_eq!(seen.get("auth-cn"), Some("Alice Liddell"));
    assert!(seen.get("te").is_none());
}

#[tokio::test]
async fn dead_upstream_gives_503() {
    let s = stack().await;
    let sid = s.login("alice", "alice-pw").await;
    let r = s.gw_get("gone.example.com", "/", Some(&sid)).send().await.unwrap();
    assert_eq!(r.status(), 503);
}

#[tokio::test]
async fn required_level_is_enforced() {
    let s = stack().await;
    let sid = s.login("alice", "alice-pw").await;
    let r = s.gw_get("strong.example.com", "/", Some(&sid)).send().await.unwrap();
    assert_eq!(r.status(), 403);
    let ev = s.events().pop().unwrap();
    assert_eq!(ev.kind, AuditKind::AuthzDeny);
}

#[tokio::test]
async fn logout_stops_access_immediately() {
    let s = stack().await;
    let sid = s.login("alice", "alice-pw").await;
    assert_eq!(s.gw_get("app1.example.com", "/", Some(&sid)).send().await.unwrap().status(), 200);
    let r = s
        .portal_req(Method::GET, "/logout")
        .header("cookie", format!("lemonldap={sid}"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 302);
    assert!(r
        .headers()
        .get_all("set-cookie")
        .iter()
        .any(|c| c.to_str().unwrap().starts_with("lemonldap=;")));
    assert_eq!(s.gw_get("app1.example.com", "/", Some(&sid)).send().await.unwrap().status(), 401);
}

#[tokio::test]
async fn session_expiry_ends_access() {
    let s = stack_with(|c| c["sessions"]["timeout"] = json!(600)).await;
    let sid = s.login("alice", "alice-pw").await;
    assert_eq!(s.gw_get("app1.example.com", "/", Some(&sid)).send().await.unwrap().status(), 200);
    s.clock.advance(600);
    assert_eq!(s.gw_get("app1.example.com", "/", Some(&sid)).send().await.unwrap().status(), 401);
}

fn basic(uid: &str, pw: &str) -> String {
    format!("Basic {}", STANDARD.encode(format!("{uid}:{pw}")))
}

#[tokio::test]
async fn authbasic_reuses_one_session_per_credential() {
    let s = stack().await;
    let r = s.gw_get("basic.example.com", "/", None).send().await.unwrap();
    assert_eq!(r.status(), 401);
    assert_eq!(r.headers()["www-authenticate"], "Basic realm=\"LLNG\"");
    for _ in 0..3 {
        let r = s
            .gw_get("basic.example.com", "/", None)
            .header("authorization", basic("alice", "alice-pw"))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), 200);
        assert_eq!(s.upstream.last().unwrap().get("auth-user"), Some("alice"));
        // credentials are not passed on
        assert!(s.upstream.last().unwrap().get("authorization").is_none());
    }
    assert_eq!(s.session_count(), 1);
    let r = s
        .gw_get("basic.example.com", "/", None)
        .header("authorization", basic("alice", "bad"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 401);
    assert_eq!(s.session_count(), 1);
}

async fn access_token(s: &Stack) -> String {
    let sid = s.login("alice", "alice-pw").await;
    let r = s
        .portal_req(
            Method::GET,
            "/oauth2/authorize?response_type=code&client_id=rp&redirect_uri=https%3A%2F%2Frp.example.com%2Fcb&scope=openid",
        )
        .header("cookie", format!("lemonldap={sid}"))
        .send()
        .await
        .unwrap();
    let loc = location(&r);
    let code = url::Url::parse(&loc)
        .unwrap()
        .query_pairs()
        .find(|(k, _)| k == "code")
        .unwrap()
        .1
        .into_owned();
    let tokens: Value = s
        .portal_req(Method::POST, "/oauth2/token")
        .basic_auth("rp", Some(RP_SECRET))
        .form(&[
            ("grant_type", "authorization_code"),
            ("code", code.as_str()),
            ("redirect_uri", "https://rp.example.com/cb"),
        ])
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    tokens["access_token"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn oauth2_vhost_takes_bearer_tokens() {
    let s = stack().await;
    let token = access_token(&s).await;
    let call = |t: String| s.gw_get("api.example.com", "/data", None).bearer_auth(t).send();

    let r = call(token.clone()).await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(s.upstream.last().unwrap().get("auth-user"), Some("alice"));

    let r = call(token[..token.len() - 4].to_string()).await.unwrap();
    assert_eq!(r.status(), 401);
    assert_eq!(r.headers()["www-authenticate"], "Bearer error=\"invalid_token\"");

    let r = s.gw_get("api.example.com", "/data", None).send().await.unwrap();
    assert_eq!(r.status(), 401);
    assert_eq!(r.headers()["www-authenticate"], "Bearer");

    // a cookie is not a bearer token
    let sid = s.login("bob", "bob-pw").await;
    assert_eq!(s.gw_get("api.example.com", "/data", Some(&sid)).send().await.unwrap().status(), 401);
}

#[tokio::test]
async fn securetoken_vhost_reads_the_ciphered_cookie() {
    let s = stack().await;
    let r = s.post_login("alice", "alice-pw", None).await;
    let sealed = sid_cookie(r.headers(), "lemonldap_ciphered").expect("ciphered cookie");
    let sid = sid_cookie(r.headers(), "lemonldap").unwrap();
    assert_ne!(sealed, sid);

    let call = |cookie: String| s.gw_get("st.example.com", "/", None).header("cookie", cookie).send();
    let r = call(format!("lemonldap_ciphered={sealed}")).await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(s.upstream.last().unwrap().get("auth-user"), Some("alice"));

    // the clear SID is not enough here
    assert_eq!(call(format!("lemonldap={sid}")).await.unwrap().status(), 401);
    // nor a cookie sealed under another key
    let other = seal_sid(&sid, &TokenKey::generate());
    assert_eq!(call(format!("lemonldap_ciphered={other}")).await.unwrap().status(), 401);
    assert_eq!(s.kinds().last(), Some(&AuditKind::TokenReject));
}

#[tokio::test]
async fn service_token_dies_with_its_session() {
    let s = stack().await;
    let sid = s.login("alice", "alice-pw").await;
    s.gw_get("chain.example.com", "/", Some(&sid)).send().await.unwrap();
    let token = s.upstream.last().unwrap().get("x-llng-token").unwrap().to_string();
    let call = || s.gw_get("app2.example.com", "/", None).header("X-LLNG-TOKEN", token.clone()).send();
    assert_eq!(call().await.unwrap().status(), 200);
    s.app.sessions.delete_session(&sid).unwrap();
    assert_eq!(call().await.unwrap().status(), 401);
}

#[tokio::test]
async fn devops_vhost_injects_document_headers() {
    let s = stack().await;
    s.upstream
        .set_rules(Some(r#"{"rules":{"^/open":"unprotect","default":"accept"},"headers":{"X-Who":"$uid"}}"#));
    let sid = s.login("bob", "bob-pw").await;
    let r = s.gw_get("devops.example.com", "/page", Some(&sid)).send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(s.upstream.last().unwrap().get("x-who"), Some("bob"));
    let r = s.gw_get("devops.example.com", "/open", None).send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(s.upstream.rules_fetches(), 1, "document is cached");
}

#[tokio::test]
async fn devops_keeps_last_good_document_through_an_outage() {
    let s = stack().await;
    let sid = s.login("bob", "bob-pw").await;
    s.upstream.set_rules(Some(r#"{"rules":{"default":"accept"}}"#));
    assert_eq!(s.gw_get("devops.example.com", "/", Some(&sid)).send().await.unwrap().status(), 200);
    s.upstream.set_rules(Some("garbage"));
    s.clock.advance(3);
    assert_eq!(s.gw_get("devops.example.com", "/", Some(&sid)).send().await.unwrap().status(), 200);
    assert!(s.app.devops.last_error("devops.example.com").is_some());
}

/// CheckUser must predict exactly what the gateway does.
#[tokio::test]
async fn checkuser_matches_gateway_decisions() {
    let s = stack().await;
    s.upstream.set_rules(Some(r#"{"rules":{"^/bob":"$uid == \"bob\"","default":"deny"},"headers":{"X-Who":"$uid"}}"#));
    let admin = s.login("admin", "admin-pw").await;
    let cases = [
        ("app1.example.com", "/"),
        ("app1.example.com", "/admin/x"),
        ("app1.example.com", "/public/x"),
        ("strong.example.com", "/"),
        ("chain.example.com", "/deep?q=1"),
        ("devops.example.com", "/bob/home"),
        ("devops.example.com", "/other"),
    ];
    let mut compared = 0;
    for (uid, pw) in [("alice", "alice-pw"), ("bob", "bob-pw"), ("admin", "admin-pw")] {
        let sid = s.login(uid, pw).await;
        for (host, path) in cases {
            let predicted: Value = s
                .manager_req(Method::POST, "/api/checkuser", Some(&admin))
                .json(&json!({"uid": uid, "url": format!("https://{host}{path}")}))
                .send()
                .await
                .unwrap()
                .json()
                .await
                .unwrap();
            let before = s.upstream.hits();
            let status = s.gw_get(host, path, Some(&sid)).send().await.unwrap().status();
            let decision = predicted["decision"].as_str().unwrap();
            let forwarded = s.upstream.hits() > before;
            assert_eq!(
                forwarded,
                decision != "deny",
                "{uid} {host}{path}: checkuser {predicted} vs gateway {status}"
            );
            if forwarded {
                let seen = s.upstream.last().unwrap();
                for (name, value) in predicted["headers"].as_object().unwrap() {
                    assert_eq!(seen.get(name), value.as_str(), "{uid} {host}{path} header {name}");
                }
            } else {
                assert_eq!(status, 403);
            }
            compared += 1;
        }
    }
    assert_eq!(compared, 21);
}
