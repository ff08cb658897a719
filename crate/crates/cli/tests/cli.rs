use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::{Arc, Mutex};

use axum::routing::get;
use axum::Router;
use llng_core::clock::SystemClock;
use llng_core::config::ConfigStore;
use llng_core::portal::users::{HashCost, UserStore};
use llng_core::session::SessionKind;
use llng_server::{AppBuilder, Service};
use serde_json::{json, Value};

const KEY: &str = "0f1e2d3c4b5a69788796a5b4c3d2e1f00f1e2d3c4b5a69788796a5b4c3d2e1f0";

fn llngctl(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_llngctl"));
    cmd.args(args)
        .env_remove("LLNG_CONFIG")
        .env_remove("LLNG_TOKEN_KEY")
        .env_remove("RUST_LOG");
    cmd
}

fn run(args: &[&str]) -> Output {
    llngctl(args).output().unwrap()
}

fn run_stdin(args: &[&str], input: &str) -> Output {
    let mut child = llngctl(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn base_config() -> Value {
    json!({
        "cfg_num": 1,
        "sso_domain": ".example.com",
        "portal_url": "https://auth.example.com",
        "keys": {"token_key": KEY},
        "vhosts": [
            {"vhost": "app1.example.com", "default_rule": "accept", "upstream": "http://127.0.0.1:9"},
            {"vhost": "app2.example.com", "handler_type": "servicetoken", "default_rule": "accept",
             "upstream": "http://127.0.0.1:9", "service_token_max_age": 5}
        ],
        "manager_admins": ["admin"],
        "checkuser_admins": ["admin"]
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("lemonldap-ng.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn corpus() -> Vec<(String, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/devops-corpus");
    let mut docs: Vec<(String, String)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap())
        })
        .collect();
    docs.sort();
    docs
}

#[tokio::test(flavor = "multi_thread")]
async fn check_devops_agrees_with_the_manager_api() {
    let users = Arc::new(UserStore::in_memory(HashCost::Low));
    users.add_user("admin", "admin-pw", BTreeMap::new(), None).unwrap();
    let app = Arc::new(AppBuilder::from_json(base_config()).unwrap().users(users).build().unwrap());
    let (portal, _) = llng_server::spawn(app.clone(), Service::Portal, "127.0.0.1:0").await.unwrap();
    let (manager, _) = llng_server::spawn(app.clone(), Service::Manager, "127.0.0.1:0").await.unwrap();
    let http = reqwest::Client::builder()
        .redirect(reqwest::redirect::Policy::none())
        .no_proxy()
        .build()
        .unwrap();
    let login = http
        .post(format!("http://{portal}/login"))
        .header("host", "auth.example.com")
        .form(&[("user", "admin"), ("password", "admin-pw")])
        .send()
        .await
        .unwrap();
    let cookie = login.headers()["set-cookie"].to_str().unwrap().split(';').next().unwrap().to_string();

    // an application publishing whatever document is current
    let current = Arc::new(Mutex::new(String::new()));
    let served = current.clone();
    let upstream = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let upstream_addr = upstream.local_addr().unwrap();
    let router = Router::new().route("/rules.json", get(move || async move { served.lock().unwrap().clone() }));
    tokio::spawn(async move { axum::serve(upstream, router).await });

    let docs = corpus();
    assert!(docs.len() >= 12);
    for (path, text) in docs {
        let api: Value = http
            .post(format!("http://{manager}/api/checkdevops"))
            .header("cookie", &cookie)
            .json(&json!({ "document": text }))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();

        let file = tokio::task::spawn_blocking({
            let path = path.clone();
            move || run(&["--json", "check-devops", &path])
        })
        .await
        .unwrap();
        let cli = stdout_json(&file);
        assert_eq!(cli, api, "{path}");
        assert_eq!(code(&file), if api["ok"] == true { 0 } else { 1 }, "{path}");

        *current.lock().unwrap() = text.clone();
        let url = format!("http://{upstream_addr}/rules.json");
        let fetched = tokio::task::spawn_blocking(move || run(&["--json", "check-devops", &url]))
            .await
            .unwrap();
        assert_eq!(stdout_json(&fetched), api, "{path} via URL");
        assert_eq!(code(&fetched), code(&file), "{path} via URL");

        // hand labels in the file names
        let name = Path::new(&path).file_name().unwrap().to_string_lossy().into_owned();
        assert_eq!(api["ok"] == true, name.starts_with("good-"), "{name}: {api}");
    }
}

#[test]
fn check_devops_human_output_and_errors() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/devops-corpus");
    let good = run(&["check-devops", dir.join("good-full.json").to_str().unwrap()]);
    assert_eq!(code(&good), 0);
    assert_eq!(String::from_utf8_lossy(&good.stdout).trim(), "ok");
    let bad = run(&["check-devops", dir.join("bad-many.json").to_str().unwrap()]);
    assert_eq!(code(&bad), 1);
    let lines = String::from_utf8_lossy(&bad.stdout).lines().count();
    assert!(lines >= 5, "every error on its own line");
    assert_eq!(code(&run(&["check-devops", "/nonexistent/rules.json"])), 2);
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let o = run(&["check-devops", &format!("http://{dead}/")]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unreachable"));
}

fn mint(args: &[&str]) -> std::process::Child {
    let mut full = vec!["token", "mint"];
    full.extend_from_slice(args);
    llngctl(&full).stdout(Stdio::piped()).spawn().unwrap()
}

fn verify_from(mint: std::process::Child, args: &[&str]) -> Output {
    let mut full = vec!["token", "verify"];
    full.extend_from_slice(args);
    let mut mint = mint;
    let out = llngctl(&full)
        .stdin(Stdio::from(mint.stdout.take().unwrap()))
        .output()
        .unwrap();
    assert!(mint.wait().unwrap().success());
    out
}

#[test]
fn token_mint_pipes_into_verify() {
    let sid = "a".repeat(32);
    let out = verify_from(
        mint(&["--sid", &sid, "--vhosts", "app2.example.com,app3.example.com", "--key", KEY]),
        &["--json", "--key", KEY, "--vhost", "app3.example.com"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["claims"]["sid"], sid.as_str());
    assert_eq!(v["claims"]["vhosts"], json!(["app2.example.com", "app3.example.com"]));

    // scope, key and age are all enforced
    let out = verify_from(
        mint(&["--sid", &sid, "--vhosts", "app2.example.com", "--key", KEY]),
        &["--key", KEY, "--vhost", "app4.example.com"],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not valid for this virtual host"));
    let other_key = "11".repeat(32);
    let out = verify_from(
        mint(&["--sid", &sid, "--vhosts", "app2.example.com", "--key", KEY]),
        &["--key", &other_key],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed authentication"));
    let old = (llng_core::clock::Clock::now(&SystemClock) - 100).to_string();
    let out = verify_from(
        mint(&["--sid", &sid, "--vhosts", "app2.example.com", "--key", KEY, "--issued-at", &old]),
        &["--key", KEY],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("expired"));
    let out = verify_from(
        mint(&["--sid", &sid, "--vhosts", "app2.example.com", "--key", KEY, "--issued-at", &old]),
        &["--key", KEY, "--max-age", "3600"],
    );
    assert_eq!(code(&out), 0);
}

#[test]
fn token_commands_use_the_configured_key_and_max_age() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config());
    let cfg = cfg.to_str().unwrap();
    let sid = "b".repeat(32);
    let ten_ago = (llng_core::clock::Clock::now(&SystemClock) - 10).to_string();
    let token = run(&["--config", cfg, "token", "mint", "--sid", &sid, "--vhosts", "app2.example.com", "--issued-at", &ten_ago]);
    assert_eq!(code(&token), 0);
    let token = String::from_utf8(token.stdout).unwrap();
    // app2 allows 5 s, the default is 30 s
    let strict = run_stdin(&["--config", cfg, "token", "verify", "--vhost", "app2.example.com"], &token);
    assert_eq!(code(&strict), 1);
    let loose = run_stdin(&["--config", cfg, "token", "verify"], &token);
    assert_eq!(code(&loose), 0, "{}", String::from_utf8_lossy(&loose.stderr));
    // a bit flip is caught
    let mut bytes = token.trim().as_bytes().to_vec();
    bytes[20] = if bytes[20] == b'A' { b'B' } else { b'A' };
    let flipped = String::from_utf8(bytes).unwrap();
    assert_eq!(code(&run(&["--config", cfg, "token", "verify", &flipped])), 1);

    assert_eq!(code(&run(&["token", "mint", "--sid", &sid, "--vhosts", "x", "--config", "/nonexistent"])), 2);
    assert_eq!(code(&run(&["token", "mint", "--sid", &sid, "--vhosts", "x", "--key", "zz"])), 2);
    assert_eq!(code(&run(&["token", "mint", "--sid", &sid])), 2);
}

#[test]
fn shipped_example_config_is_valid() {
    let example = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../conf/lemonldap-ng.json");
    let o = run(&["--json", "check-config", example.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(stdout_json(&o)["ok"], true);
    // and through LLNG_CONFIG
    let o = llngctl(&["check-config"]).env("LLNG_CONFIG", &example).output().unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn check_config_lists_located_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["keys"]["token_key"] = json!("short");
    cfg["vhosts"][0]["default_rule"] = json!("$uid ==");
    let path = write_config(dir.path(), &cfg);
    let o = run(&["--json", "check-config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let v = stdout_json(&o);
    let locations: Vec<&str> = v["errors"].as_array().unwrap().iter().map(|e| e["location"].as_str().unwrap()).collect();
    assert!(locations.contains(&"keys.token_key"), "{locations:?}");
    assert!(locations.iter().any(|l| l.starts_with("vhosts[app1.example.com]")), "{locations:?}");
    let human = run(&["check-config", path.to_str().unwrap()]);
    assert_eq!(code(&human), 1);
    assert!(String::from_utf8_lossy(&human.stdout).contains("keys.token_key: "));

    std::fs::write(&path, "{ not json").unwrap();
    assert_eq!(code(&run(&["check-config", path.to_str().unwrap()])), 1);
    assert_eq!(code(&run(&["check-config", "/nonexistent/llng.json"])), 2);
    // the directory form finds lemonldap-ng.json
    write_config(dir.path(), &base_config());
    assert_eq!(code(&run(&["check-config", dir.path().to_str().unwrap()])), 0);
}

#[test]
fn sessions_list_and_delete_on_the_file_backend() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["sessions"] = json!({"backend": "file", "root": "sessions"});
    cfg["accounting"] = json!({"path": "audit.log"});
    let path = write_config(dir.path(), &cfg);
    let cfg_arg = path.to_str().unwrap();

    let store = ConfigStore::open(&path).unwrap();
    let sessions = llng_server::open_sessions(&store, Arc::new(SystemClock)).unwrap();
    let alice = sessions.create_session("alice", BTreeMap::new(), 1, 600, SessionKind::Sso).unwrap();
    sessions.create_session("bob", BTreeMap::new(), 2, 600, SessionKind::Sso).unwrap();

    let o = run(&["--config", cfg_arg, "--json", "sessions", "list"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o).as_array().unwrap().len(), 2);
    let o = run(&["--config", cfg_arg, "--json", "sessions", "list", "--uid", "alice"]);
    let list = stdout_json(&o);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["sid"], alice.sid.as_str());
    let human = run(&["--config", cfg_arg, "sessions", "list"]);
    assert!(String::from_utf8_lossy(&human.stdout).contains(&alice.sid));

    assert_eq!(code(&run(&["--config", cfg_arg, "sessions", "delete", &alice.sid])), 0);
    assert!(sessions.get_session(&alice.sid).is_err());
    assert_eq!(code(&run(&["--config", cfg_arg, "sessions", "delete", &alice.sid])), 1);
    assert_eq!(code(&run(&["--config", cfg_arg, "sessions", "delete", "../../etc/passwd"])), 1);
    let audit = std::fs::read_to_string(dir.path().join("audit.log")).unwrap();
    assert!(audit.contains("session_delete") && audit.contains("llngctl"), "{audit}");
    assert!(!audit.contains(&alice.sid), "full SIDs never reach the audit log");

    // the in-memory backend has nothing to show from outside
    write_config(dir.path(), &base_config());
    assert_eq!(code(&run(&["--config", cfg_arg, "sessions", "list"])), 2);
}

#[test]
fn user_administration() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["users_path"] = json!("users.json");
    let path = write_config(dir.path(), &cfg);
    let c = path.to_str().unwrap();

    let o = run_stdin(
        &["--config", c, "user", "add", "carol", "--password-stdin", "--mail", "carol@example.com", "--attr", "cn=Carol C"],
        "first-pw\n",
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let users = || UserStore::open(dir.path().join("users.json"), HashCost::Interactive).unwrap();
    let carol = users().check_password("carol", "first-pw").unwrap();
    assert_eq!(carol.attributes["cn"], "Carol C");
    assert_eq!(carol.mail.as_deref(), Some("carol@example.com"));

    assert_eq!(code(&run(&["--config", c, "user", "add", "carol", "--password", "x"])), 1);
    assert_eq!(code(&run(&["--config", c, "user", "set-password", "carol", "--password", "second-pw"])), 0);
    assert!(users().check_password("carol", "first-pw").is_err());
    assert!(users().check_password("carol", "second-pw").is_ok());

    users().set_totp_secret("carol", Some("JBSWY3DPEHPK3PXP".into())).unwrap();
    users().set_locked_until("carol", Some(i64::MAX)).unwrap();
    assert_eq!(code(&run(&["--config", c, "user", "totp-reset", "carol"])), 0);
    assert_eq!(code(&run(&["--config", c, "user", "unlock", "carol"])), 0);
    let carol = users().get("carol").unwrap();
    assert_eq!(carol.totp_secret, None);
    assert_eq!(carol.locked_until, None);

    assert_eq!(code(&run(&["--config", c, "user", "totp-reset", "nobody"])), 1);
    // a password source is mandatory
    assert_eq!(code(&run(&["--config", c, "user", "add", "dave"])), 2);
    assert_eq!(code(&run(&["--config", c, "user", "add", "dave", "--password", ""])), 2);
    write_config(dir.path(), &base_config());
    assert_eq!(code(&run(&["--config", c, "user", "totp-reset", "carol"])), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["sessions"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn serve_runs_only_the_requested_services() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &base_config());
    let mut child = llngctl(&[
        "--config",
        path.to_str().unwrap(),
        "--json",
        "serve",
        "--services",
        "manager,portal",
        "--manager",
        "127.0.0.1:0",
        "--portal",
        "127.0.0.1:0",
    ])
    .stdout(Stdio::piped())
    .stderr(Stdio::null())
    .spawn()
    .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let started: Value = serde_json::from_str(&line).unwrap();
    let listening = started["listening"].as_array().unwrap();
    let names: Vec<&str> = listening.iter().map(|l| l["service"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["manager", "portal"]);
    let manager = listening[0]["addr"].as_str().unwrap();

    let resp = raw_get(manager, "/api/config");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 401"), "{resp}");
}

/// A plain HTTP/1.1 GET over a socket; returns the raw response.
fn raw_get(addr: &str, path: &str) -> String {
    use std::io::Read;
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}
