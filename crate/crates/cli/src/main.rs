//! `llngctl`: runs the portal, gateway and manager, and wraps the desk
//! operations (config and rules checks, sessions, service tokens, users).
//!
//! Exit status: 0 on success, 1 when a check or operation fails, 2 on a
//! usage or configuration error.

use std::collections::BTreeMap;
use std::io::{self, BufRead, IsTerminal};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use llng_core::accounting::{AuditEvent, AuditKind};
use llng_core::clock::{Clock, SharedClock, SystemClock};
use llng_core::config::{CompiledConfig, ConfigLoadError, ConfigStore};
use llng_core::devops::check_devops;
use llng_core::portal::users::{HashCost, UserError, UserStore};
use llng_core::session::{is_valid_sid, BackendKind, Session, SessionError, SessionKind, SessionStore};
use llng_core::token::{
    mint_service_token, open_service_token, verify_service_token, ServiceTokenClaims, TokenKey,
    DEFAULT_SERVICE_TOKEN_MAX_AGE,
};
use llng_server::gateway::{fetch_rules, FetchError};
use llng_server::{AppBuilder, Service};
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;

const DEFAULT_CONFIG: &str = "/etc/llng/lemonldap-ng.json";

#[derive(Parser)]
#[command(name = "llngctl", version, about = "Run and operate the llng SSO gateway")]
struct Cli {
    /// Configuration file, or the directory holding lemonldap-ng.json.
    #[arg(long, global = true, env = "LLNG_CONFIG", default_value = DEFAULT_CONFIG)]
    config: PathBuf,

    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the portal, gateway and manager (all three unless --services says otherwise).
    Serve(ServeArgs),
    /// Validate a configuration file and list every error with its location.
    CheckConfig {
        /// File or directory to check; defaults to --config.
        path: Option<PathBuf>,
    },
    /// Validate a DevOps rules.json, from a file or from an application URL.
    CheckDevops {
        /// Path to a rules.json, or http(s) URL of the application (or of its rules.json).
        source: String,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
    },
    /// Inspect or kill SSO sessions in a file-backed store.
    #[command(subcommand)]
    Sessions(SessionsCommand),
    /// Mint or verify handler-to-handler service tokens.
    #[command(subcommand)]
    Token(TokenCommand),
    /// Manage accounts in the JSON user store.
    #[command(subcommand)]
    User(UserCommand),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ServiceName {
    Portal,
    Gateway,
    Manager,
}

impl From<ServiceName> for Service {
    fn from(s: ServiceName) -> Self {
        match s {
            ServiceName::Portal => Service::Portal,
            ServiceName::Gateway => Service::Gateway,
            ServiceName::Manager => Service::Manager,
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    /// Which services this process runs.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ServiceName::Portal, ServiceName::Gateway, ServiceName::Manager])]
    services: Vec<ServiceName>,
    /// Portal listen address (overrides listen.portal).
    #[arg(long)]
    portal: Option<String>,
    /// Gateway listen address (overrides listen.gateway).
    #[arg(long)]
    gateway: Option<String>,
    /// Manager listen address (overrides listen.manager).
    #[arg(long)]
    manager: Option<String>,
    /// Seconds between sweeps of expired sessions.
    #[arg(long, default_value_t = 60)]
    sweep_every: u64,
}

#[derive(Subcommand)]
enum SessionsCommand {
    /// List live sessions.
    List {
        #[arg(long)]
        uid: Option<String>,
    },
    /// Delete one session; the user must log in again.
    Delete { sid: String },
}

#[derive(Subcommand)]
enum TokenCommand {
    /// Mint a service token for a session, scoped to some virtual hosts.
    Mint {
        #[arg(long)]
        sid: String,
        /// Target virtual hosts, comma separated or repeated.
        #[arg(long, required = true, value_delimiter = ',')]
        vhosts: Vec<String>,
        /// Token key as 64 hex digits; defaults to keys.token_key.
        #[arg(long, env = "LLNG_TOKEN_KEY", hide_env_values = true)]
        key: Option<String>,
        /// Issue time in unix seconds; defaults to now.
        #[arg(long)]
        issued_at: Option<i64>,
    },
    /// Verify a token given as argument or on stdin.
    Verify {
        token: Option<String>,
        /// Check the token as this virtual host would; without it only
        /// authenticity and age are checked.
        #[arg(long)]
        vhost: Option<String>,
        /// Maximum age in seconds; defaults to the vhost's service_token_max_age.
        #[arg(long)]
        max_age: Option<i64>,
        #[arg(long, env = "LLNG_TOKEN_KEY", hide_env_values = true)]
        key: Option<String>,
    },
}

#[derive(Args)]
#[command(group(ArgGroup::new("secret").required(true).args(["password", "password_stdin"])))]
struct PasswordSource {
    /// The password (visible in the process list; prefer --password-stdin).
    #[arg(long)]
    password: Option<String>,
    /// Read the password from the first line of stdin.
    #[arg(long)]
    password_stdin: bool,
}

#[derive(Subcommand)]
enum UserCommand {
    /// Create an account.
    Add {
        uid: String,
        #[command(flatten)]
        pw: PasswordSource,
        #[arg(long)]
        mail: Option<String>,
        /// Session attribute, e.g. --attr cn="Alice Liddell". Repeatable.
        #[arg(long = "attr", value_parser = parse_attr)]
        attrs: Vec<(String, String)>,
    },
    /// Replace a password.
    SetPassword {
        uid: String,
        #[command(flatten)]
        pw: PasswordSource,
    },
    /// Forget the TOTP secret; the user enrols again at next login.
    TotpReset { uid: String },
    /// Lift a brute-force lock.
    Unlock { uid: String },
}

fn parse_attr(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(format!("expected NAME=VALUE, got {s:?}")),
    }
}

enum Failure {
    /// Already printed; exit 1.
    Reported,
    Failed(String),
    Usage(String),
}

type Outcome = Result<(), Failure>;

struct Ctx {
    config: PathBuf,
    json: bool,
}

impl Ctx {
    fn store(&self) -> Result<ConfigStore, Failure> {
        ConfigStore::open(&self.config).map_err(|e| Failure::Usage(format!("{}: {e}", self.config.display())))
    }

    /// Prints `value` with --json, otherwise the human rendering.
    fn out(&self, value: Value, human: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            let text = human();
            if !text.is_empty() {
                println!("{text}");
            }
        }
    }
}

fn clock() -> SharedClock {
    Arc::new(SystemClock)
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(io::stderr)
        .init();

    let ctx = Ctx {
        config: cli.config,
        json: cli.json,
    };
    let outcome = match cli.command {
        Command::Serve(args) => serve(&ctx, args).await,
        Command::CheckConfig { path } => check_config(&ctx, path),
        Command::CheckDevops { source, timeout_ms } => check_devops_cmd(&ctx, &source, timeout_ms).await,
        Command::Sessions(cmd) => sessions(&ctx, cmd),
        Command::Token(cmd) => token(&ctx, cmd),
        Command::User(cmd) => user(&ctx, cmd),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Reported) => ExitCode::from(1),
        Err(Failure::Failed(msg)) => {
            report(&ctx, &msg);
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            report(&ctx, &msg);
            ExitCode::from(2)
        }
    }
}

fn report(ctx: &Ctx, msg: &str) {
    if ctx.json {
        println!("{}", json!({ "ok": false, "error": msg }));
    }
    eprintln!("llngctl: {msg}");
}

async fn serve(ctx: &Ctx, args: ServeArgs) -> Outcome {
    let store = ctx.store()?;
    let listen = store.current().raw.listen.clone();
    let app = Arc::new(AppBuilder::new(store).build().map_err(|e| Failure::Usage(e.to_string()))?);

    let mut running = tokio::task::JoinSet::new();
    let mut bound = Vec::new();
    let mut wanted = args.services.clone();
    wanted.dedup();
    for name in wanted {
        let service = Service::from(name);
        let (flag, configured) = match service {
            Service::Portal => (&args.portal, &listen.portal),
            Service::Gateway => (&args.gateway, &listen.gateway),
            Service::Manager => (&args.manager, &listen.manager),
        };
        let addr = flag
            .clone()
            .or_else(|| configured.clone())
            .unwrap_or_else(|| service.default_listen().to_string());
        let (local, handle) = llng_server::spawn(app.clone(), service, &addr)
            .await
            .map_err(|e| Failure::Failed(format!("cannot listen for {} on {addr}: {e}", service.name())))?;
        tracing::info!(service = service.name(), addr = %local, "listening");
        bound.push(json!({ "service": service.name(), "addr": local.to_string() }));
        running.spawn(async move { (service, handle.await) });
    }
    ctx.out(json!({ "ok": true, "listening": bound }), String::new);
    llng_server::spawn_housekeeping(app, Duration::from_secs(args.sweep_every.max(1)));

    tokio::select! {
        _ = shutdown_signal() => {
            tracing::info!("shutting down");
            Ok(())
        }
        Some(done) = running.join_next() => {
            let msg = match done {
                Ok((service, Ok(Ok(())))) => format!("{} stopped", service.name()),
                Ok((service, Ok(Err(e)))) => format!("{} failed: {e}", service.name()),
                Ok((service, Err(e))) => format!("{} panicked: {e}", service.name()),
                Err(e) => e.to_string(),
            };
            Err(Failure::Failed(msg))
        }
    }
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn check_config(ctx: &Ctx, path: Option<PathBuf>) -> Outcome {
    let path = path.unwrap_or_else(|| ctx.config.clone());
    match ConfigStore::open(&path) {
        Ok(store) => {
            let cfg = store.current();
            let vhosts = cfg.vhosts().count();
            ctx.out(
                json!({ "ok": true, "cfg_num": cfg.cfg_num(), "vhosts": vhosts, "errors": [] }),
                || format!("ok: cfg_num {}, {vhosts} virtual host(s)", cfg.cfg_num()),
            );
            Ok(())
        }
        Err(ConfigLoadError::Io(e)) => Err(Failure::Usage(format!("{}: {e}", path.display()))),
        Err(ConfigLoadError::Json(e)) => {
            let errors = json!([{ "location": "", "message": format!("not valid JSON: {e}") }]);
            ctx.out(json!({ "ok": false, "errors": errors }), || format!("not valid JSON: {e}"));
            Err(Failure::Reported)
        }
        Err(ConfigLoadError::Invalid(errors)) => {
            ctx.out(json!({ "ok": false, "errors": errors }), || {
                errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
            });
            Err(Failure::Reported)
        }
    }
}

async fn check_devops_cmd(ctx: &Ctx, source: &str, timeout_ms: u64) -> Outcome {
    let result = if source.starts_with("http://") || source.starts_with("https://") {
        let base = source.trim_end_matches('/');
        let base = base.strip_suffix("/rules.json").unwrap_or(base);
        let http = reqwest::Client::new();
        match fetch_rules(&http, base, Duration::from_millis(timeout_ms)).await {
            Ok(_) => Ok(()),
            Err(FetchError::Invalid(errors)) => Err(errors),
            Err(e @ FetchError::Unreachable(_)) => return Err(Failure::Failed(e.to_string())),
        }
    } else {
        let text = std::fs::read_to_string(source).map_err(|e| Failure::Usage(format!("{source}: {e}")))?;
        check_devops(&text).map(drop)
    };
    match result {
        Ok(()) => {
            ctx.out(json!({ "ok": true, "errors": [] }), || "ok".into());
            Ok(())
        }
        Err(errors) => {
            ctx.out(json!({ "ok": false, "errors": errors }), || errors.join("\n"));
            Err(Failure::Reported)
        }
    }
}

fn session_store(ctx: &Ctx) -> Result<(ConfigStore, Arc<SessionStore>), Failure> {
    let store = ctx.store()?;
    if matches!(store.current().raw.sessions.backend, BackendKind::Memory) {
        return Err(Failure::Usage(
            "sessions.backend is memory: sessions live inside the serving process; use the manager API".into(),
        ));
    }
    let sessions = llng_server::open_sessions(&store, clock()).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((store, sessions))
}

fn sessions(ctx: &Ctx, cmd: SessionsCommand) -> Outcome {
    let (store, sessions) = session_store(ctx)?;
    match cmd {
        SessionsCommand::List { uid } => {
            let list = sessions
                .list_sessions(uid.as_deref())
                .map_err(|e| Failure::Failed(e.to_string()))?;
            ctx.out(json!(list), || render_sessions(&list));
            Ok(())
        }
        SessionsCommand::Delete { sid } => {
            let gone = || Failure::Failed(format!("no such session {sid}"));
            if !is_valid_sid(&sid) {
                return Err(gone());
            }
            let session = match sessions.get_session(&sid) {
                Ok(s) if s.kind == SessionKind::Sso => s,
                Ok(_) | Err(SessionError::NotFound | SessionError::Expired) => return Err(gone()),
                Err(e) => return Err(Failure::Failed(e.to_string())),
            };
            match sessions.delete_session(&sid) {
                Ok(()) => {}
                Err(SessionError::NotFound) => return Err(gone()),
                Err(e) => return Err(Failure::Failed(e.to_string())),
            }
            if let Some(audit) = llng_server::open_accounting(&store, clock()).map_err(|e| Failure::Usage(e.to_string()))? {
                audit.emit(
                    AuditEvent::new(AuditKind::SessionDelete)
                        .uid(session.uid.clone())
                        .sid(&sid)
                        .detail("reason", "admin")
                        .detail("by", "llngctl"),
                );
            }
            ctx.out(json!({ "ok": true, "uid": session.uid }), || {
                format!("deleted session of {}", session.uid)
            });
            Ok(())
        }
    }
}

fn render_sessions(list: &[Session]) -> String {
    let mut lines = vec![format!("{:<32}  {:<20}  {:>5}  {}", "SID", "UID", "LEVEL", "EXPIRES")];
    for s in list {
        lines.push(format!("{:<32}  {:<20}  {:>5}  {}", s.sid, s.uid, s.auth_level, s.expires_at));
    }
    lines.join("\n")
}

/// The token key from --key, or from the configuration.
fn token_key(key: Option<&str>, cfg: Option<&CompiledConfig>) -> Result<TokenKey, Failure> {
    let (hex, origin) = match (key, cfg) {
        (Some(k), _) => (k.to_string(), "--key"),
        (None, Some(c)) => (c.raw.keys.token_key.clone(), "keys.token_key"),
        (None, None) => return Err(Failure::Usage("no token key: pass --key or a readable --config".into())),
    };
    TokenKey::from_hex(&hex).map_err(|e| Failure::Usage(format!("{origin}: {e}")))
}

fn token(ctx: &Ctx, cmd: TokenCommand) -> Outcome {
    match cmd {
        TokenCommand::Mint {
            sid,
            vhosts,
            key,
            issued_at,
        } => {
            let cfg = match key {
                Some(_) => None,
                None => Some(ctx.store()?.current()),
            };
            let key = token_key(key.as_deref(), cfg.as_deref())?;
            let claims = ServiceTokenClaims::new(sid, vhosts, issued_at.unwrap_or_else(|| SystemClock.now()));
            let token = mint_service_token(&claims, &key).map_err(|e| Failure::Usage(e.to_string()))?;
            ctx.out(json!({ "token": token }), || token.clone());
            Ok(())
        }
        TokenCommand::Verify {
            token,
            vhost,
            max_age,
            key,
        } => {
            let token = match token {
                Some(t) => t,
                None => read_stdin_line("token")?,
            };
            let token = token.trim();
            // The configuration is needed for the key, or for the vhost's max age.
            let cfg = if key.is_none() || (vhost.is_some() && max_age.is_none()) {
                match ctx.store() {
                    Ok(s) => Some(s.current()),
                    Err(e) if key.is_none() => return Err(e),
                    Err(_) => None,
                }
            } else {
                None
            };
            let key = token_key(key.as_deref(), cfg.as_deref())?;
            let max_age = max_age
                .or_else(|| {
                    let host = vhost.as_deref()?;
                    Some(cfg.as_deref()?.vhost(host)?.config.service_token_max_age)
                })
                .unwrap_or(DEFAULT_SERVICE_TOKEN_MAX_AGE);
            let now = SystemClock.now();
            let verified = open_service_token(token, &key).and_then(|claims| {
                let host = vhost.clone().unwrap_or_else(|| claims.vhosts[0].clone());
                verify_service_token(token, &host, now, &key, max_age)
            });
            match verified {
                Ok(claims) => {
                    let age = now - claims.issued_at;
                    ctx.out(json!({ "ok": true, "claims": claims, "age": age }), || {
                        format!(
                            "valid: sid {} for {} (age {age}s, max {max_age}s)",
                            claims.sid,
                            claims.vhosts.join(",")
                        )
                    });
                    Ok(())
                }
                Err(e) => Err(Failure::Failed(format!("token rejected: {e}"))),
            }
        }
    }
}

fn read_stdin_line(what: &str) -> Result<String, Failure> {
    let stdin = io::stdin();
    if stdin.is_terminal() {
        eprint!("{what}: ");
    }
    let mut line = String::new();
    stdin
        .lock()
        .read_line(&mut line)
        .map_err(|e| Failure::Usage(format!("reading {what}: {e}")))?;
    let line = line.trim_end_matches(['\r', '\n']).to_string();
    if line.is_empty() {
        return Err(Failure::Usage(format!("empty {what} on stdin")));
    }
    Ok(line)
}

impl PasswordSource {
    fn read(self) -> Result<String, Failure> {
        match self.password {
            Some(p) if p.is_empty() => Err(Failure::Usage("empty password".into())),
            Some(p) => Ok(p),
            None => read_stdin_line("password"),
        }
    }
}

fn user_store(ctx: &Ctx) -> Result<Arc<UserStore>, Failure> {
    let store = ctx.store()?;
    llng_server::open_users(&store, HashCost::Interactive)
        .map_err(|e| Failure::Usage(e.to_string()))?
        .ok_or_else(|| Failure::Usage("users_path is not set in the configuration".into()))
}

fn user_failure(e: UserError) -> Failure {
    Failure::Failed(e.to_string())
}

fn user(ctx: &Ctx, cmd: UserCommand) -> Outcome {
    let users = user_store(ctx)?;
    let (uid, done) = match cmd {
        UserCommand::Add { uid, pw, mail, attrs } => {
            let attrs: BTreeMap<String, String> = attrs.into_iter().collect();
            users.add_user(&uid, &pw.read()?, attrs, mail).map_err(user_failure)?;
            (uid, "created")
        }
        UserCommand::SetPassword { uid, pw } => {
            users.set_password(&uid, &pw.read()?).map_err(user_failure)?;
            (uid, "password changed")
        }
        UserCommand::TotpReset { uid } => {
            users.set_totp_secret(&uid, None).map_err(user_failure)?;
            (uid, "TOTP secret removed")
        }
        UserCommand::Unlock { uid } => {
            users.set_locked_until(&uid, None).map_err(user_failure)?;
            (uid, "unlocked")
        }
    };
    ctx.out(json!({ "ok": true, "uid": uid }), || format!("{uid}: {done}"));
    Ok(())
}
