//! OpenID Connect provider, authorization code flow only.
//!
//! id_tokens are ES256 JWTs signed with a P-256 key that is generated on
//! first start and published as a JWKS. Access tokens are sealed references
//! to the SSO session (so the OAuth2 handler can resolve them without a
//! lookup table); refresh tokens are random and kept server-side.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use p256::ecdsa::signature::Signer;
use p256::ecdsa::{Signature, SigningKey};
use p256::pkcs8::{DecodePrivateKey, EncodePrivateKey, LineEnding};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use url::Url;

use crate::accounting::{AuditEvent, AuditKind, SharedAccounting};
use crate::config::{CompiledConfig, OidcClientConfig};
use crate::session::{Session, SessionStore};
use crate::token::{open, seal, TokenError, TokenKey};

const PURPOSE_ACCESS_TOKEN: &[u8] = b"llng/oauth2-access/v1";

/// `sha256:<hex>` form stored in configuration.
pub fn hash_client_secret(secret: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(secret.as_bytes())))
}

fn client_secret_matches(client: &OidcClientConfig, secret: &str) -> bool {
    let computed = hash_client_secret(secret);
    bool::from(computed.as_bytes().ct_eq(client.client_secret_hash.as_bytes()))
}

fn random_b64(n: usize) -> String {
    let mut b = vec![0u8; n];
    rand::rngs::OsRng.fill_bytes(&mut b);
    URL_SAFE_NO_PAD.encode(b)
}

/// The id_token signing key.
pub struct OidcKeys {
    signing: SigningKey,
    kid: String,
}

impl OidcKeys {
    pub fn generate() -> Self {
        Self::from_signing_key(SigningKey::random(&mut rand::rngs::OsRng))
    }

    fn from_signing_key(signing: SigningKey) -> Self {
        let kid = jwk_thumbprint(&Self::public_jwk_parts(&signing));
        Self { signing, kid }
    }

    /// Loads the PKCS#8 PEM at `path`, creating it on first use.
    pub fn load_or_generate(path: &Path) -> io::Result<Self> {
        match fs::read_to_string(path) {
            Ok(pem) => SigningKey::from_pkcs8_pem(&pem)
                .map(Self::from_signing_key)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let keys = Self::generate();
                let pem = keys
                    .signing
                    .to_pkcs8_pem(LineEnding::LF)
                    .map_err(|e| io::Error::new(io::ErrorKind::Other, e.to_string()))?;
                if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                write_private(path, pem.as_bytes())?;
                Ok(keys)
            }
            Err(e) => Err(e),
        }
    }

    fn public_jwk_parts(signing: &SigningKey) -> (String, String) {
        let point = signing.verifying_key().to_encoded_point(false);
        (
            URL_SAFE_NO_PAD.encode(point.x().expect("uncompressed point")),
            URL_SAFE_NO_PAD.encode(point.y().expect("uncompressed point")),
        )
    }

    pub fn kid(&self) -> &str {
        &self.kid
    }

    pub fn jwks(&self) -> Value {
        let (x, y) = Self::public_jwk_parts(&self.signing);
        json!({"keys": [{
            "kty": "EC",
            "crv": "P-256",
            "x": x,
            "y": y,
            "use": "sig",
            "alg": "ES256",
            "kid": self.kid,
        }]})
    }

    /// Compact JWS over `claims`.
    pub fn sign(&self, claims: &Value) -> String {
        let header = json!({"alg": "ES256", "typ": "JWT", "kid": self.kid});
        let signing_input = format!(
            "{}.{}",
            URL_SAFE_NO_PAD.encode(header.to_string()),
            URL_SAFE_NO_PAD.encode(claims.to_string())
        );
        let sig: Signature = self.signing.sign(signing_input.as_bytes());
        format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(sig.to_bytes()))
    }
}

#[cfg(unix)]
fn write_private(path: &Path, bytes: &[u8]) -> io::Result<()> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .mode(0o600)
        .open(path)?
        .write_all(bytes)
}

#[cfg(not(unix))]
fn write_private(path: &Path, bytes: &[u8]) -> io::Result<()> {
    fs::write(path, bytes)
}

/// JWK thumbprint of an EC P-256 key.
fn jwk_thumbprint((x, y): &(String, String)) -> String {
    let canonical = format!(r#"{{"crv":"P-256","kty":"EC","x":"{x}","y":"{y}"}}"#);
    URL_SAFE_NO_PAD.encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone)]
struct AuthCode {
    client_id: String,
    redirect_uri: String,
    sid: String,
    scopes: Vec<String>,
    nonce: Option<String>,
    issued_at: i64,
}

#[derive(Debug, Clone)]
struct RefreshGrant {
    client_id: String,
    sid: String,
    scopes: Vec<String>,
    expires_at: i64,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct AuthorizeRequest {
    #[serde(default)]
    pub response_type: String,
    #[serde(default)]
    pub client_id: String,
    #[serde(default)]
    pub redirect_uri: String,
    #[serde(default)]
    pub scope: String,
    pub state: Option<String>,
    pub nonce: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthorizeOutcome {
    /// Shown to the user; never sent to an unverified redirect URI.
    ErrorPage { error: &'static str, description: String },
    Redirect(String),
    /// The user must log in first.
    Login,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct TokenRequest {
    #[serde(default)]
    pub grant_type: String,
    pub code: Option<String>,
    pub redirect_uri: Option<String>,
    pub refresh_token: Option<String>,
    pub client_id: Option<String>,
    pub client_secret: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenResponse {
    pub access_token: String,
    pub token_type: &'static str,
    pub expires_in: i64,
    pub refresh_token: String,
    pub id_token: String,
    pub scope: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("{error}: {error_description}")]
pub struct OidcError {
    pub error: &'static str,
    pub error_description: String,
}

impl OidcError {
    fn new(error: &'static str, description: impl Into<String>) -> Self {
        Self {
            error,
            error_description: description.into(),
        }
    }

    /// HTTP status for the token endpoint.
    pub fn status(&self) -> u16 {
        if self.error == "invalid_client" {
            401
        } else {
            400
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessClaims {
    pub sid: String,
    pub client_id: String,
    pub scope: String,
    pub exp: i64,
}

pub fn seal_access_token(key: &TokenKey, claims: &AccessClaims) -> String {
    seal(
        key,
        PURPOSE_ACCESS_TOKEN,
        &serde_json::to_vec(claims).expect("claims serialize"),
    )
}

/// Opens an access token and checks its expiry.
pub fn open_access_token(key: &TokenKey, token: &str, now: i64) -> Result<AccessClaims, TokenError> {
    let raw = open(key, PURPOSE_ACCESS_TOKEN, token)?;
    let claims: AccessClaims =
        serde_json::from_slice(&raw).map_err(|_| TokenError::InvalidClaims("not JSON"))?;
    if now >= claims.exp {
        return Err(TokenError::Expired);
    }
    Ok(claims)
}

pub struct OidcProvider {
    keys: OidcKeys,
    codes: Mutex<HashMap<String, AuthCode>>,
    refresh: Mutex<HashMap<String, RefreshGrant>>,
    audit: SharedAccounting,
}

fn with_params(base: &str, params: &[(&str, &str)]) -> String {
    let mut url = Url::parse(base).expect("redirect URIs are validated at config load");
    {
        let mut q = url.query_pairs_mut();
        for (k, v) in params {
            q.append_pair(k, v);
        }
    }
    url.to_string()
}

impl OidcProvider {
    pub fn new(keys: OidcKeys, audit: SharedAccounting) -> Self {
        Self {
            keys,
            codes: Mutex::new(HashMap::new()),
            refresh: Mutex::new(HashMap::new()),
            audit,
        }
    }

    pub fn keys(&self) -> &OidcKeys {
        &self.keys
    }

    pub fn discovery(&self, cfg: &CompiledConfig) -> Value {
        let base = cfg.portal_base();
        json!({
            "issuer": cfg.issuer(),
            "authorization_endpoint": format!("{base}/oauth2/authorize"),
            "token_endpoint": format!("{base}/oauth2/token"),
            "userinfo_endpoint": format!("{base}/oauth2/userinfo"),
            "jwks_uri": format!("{base}/oauth2/jwks"),
            "response_types_supported": ["code"],
            "grant_types_supported": ["authorization_code", "refresh_token"],
            "subject_types_supported": ["public"],
            "id_token_signing_alg_values_supported": ["ES256"],
            "scopes_supported": ["openid", "profile", "email"],
            "token_endpoint_auth_methods_supported": ["client_secret_basic", "client_secret_post"],
            "claims_supported": ["sub", "iss", "aud", "exp", "iat", "auth_time", "nonce", "auth_level", "name", "preferred_username", "email"],
        })
    }

    pub fn authorize(
        &self,
        cfg: &CompiledConfig,
        req: &AuthorizeRequest,
        session: Option<&Session>,
        now: i64,
    ) -> AuthorizeOutcome {
        let Some(client) = cfg.oidc_client(&req.client_id) else {
            return AuthorizeOutcome::ErrorPage {
                error: "invalid_client",
                description: "unknown client".into(),
            };
        };
        if !client.redirect_uris.iter().any(|u| *u == req.redirect_uri) {
            return AuthorizeOutcome::ErrorPage {
                error: "invalid_redirect_uri",
                description: "redirect_uri is not registered for this client".into(),
            };
        }
        let error_redirect = |error: &str, description: &str| {
            let mut params = vec![("error", error), ("error_description", description)];
            if let Some(state) = &req.state {
                params.push(("state", state));
            }
            AuthorizeOutcome::Redirect(with_params(&req.redirect_uri, &params))
        };
        if req.response_type != "code" {
            return error_redirect(
                "unsupported_response_type",
                "only the authorization code flow is supported",
            );
        }
        let scopes: Vec<String> = req
            .scope
            .split_ascii_whitespace()
            .map(str::to_string)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !scopes.iter().any(|s| s == "openid") {
            return error_redirect("invalid_scope", "the openid scope is required");
        }
        if !client.allowed_scopes.is_empty()
            && scopes.iter().any(|s| s != "openid" && !client.allowed_scopes.contains(s))
        {
            return error_redirect("invalid_scope", "scope not allowed for this client");
        }
        let Some(session) = session else {
            return AuthorizeOutcome::Login;
        };
        let code = random_b64(32);
        {
            let ttl = cfg.raw.oidc.code_ttl;
            let mut codes = self.codes.lock();
            codes.retain(|_, c| now < c.issued_at + ttl);
            codes.insert(
                code.clone(),
                AuthCode {
                    client_id: client.client_id.clone(),
                    redirect_uri: req.redirect_uri.clone(),
                    sid: session.sid.clone(),
                    scopes,
                    nonce: req.nonce.clone(),
                    issued_at: now,
                },
            );
        }
        self.audit.emit(
            AuditEvent::new(AuditKind::TokenMint)
                .uid(session.uid.clone())
                .sid(&session.sid)
                .detail("type", "authorization_code")
                .detail("client_id", client.client_id.clone())
                .secret("code", &code),
        );
        let mut params = vec![("code", code.as_str())];
        if let Some(state) = &req.state {
            params.push(("state", state));
        }
        AuthorizeOutcome::Redirect(with_params(&req.redirect_uri, &params))
    }

    /// Token endpoint. Client authentication happens before the code or
    /// refresh token is looked at, so a wrong secret never consumes one.
    pub fn token(
        &self,
        cfg: &CompiledConfig,
        sessions: &SessionStore,
        req: &TokenRequest,
        now: i64,
    ) -> Result<TokenResponse, OidcError> {
        let client_id = req.client_id.as_deref().unwrap_or_default();
        let result = self.token_inner(cfg, sessions, req, now);
        let event = match &result {
            Ok((t, session)) => AuditEvent::new(AuditKind::OidcToken)
                .uid(session.uid.clone())
                .sid(&session.sid)
                .secret("access_token", &t.access_token),
            Err(e) => AuditEvent::new(AuditKind::TokenReject).detail("error", e.error),
        };
        self.audit.emit(
            event
                .detail("client_id", client_id)
                .detail("grant_type", req.grant_type.clone()),
        );
        result.map(|(t, _)| t)
    }

    fn token_inner(
        &self,
        cfg: &CompiledConfig,
        sessions: &SessionStore,
        req: &TokenRequest,
        now: i64,
    ) -> Result<(TokenResponse, Session), OidcError> {
        let client = req
            .client_id
            .as_deref()
            .and_then(|id| cfg.oidc_client(id))
            .filter(|c| client_secret_matches(c, req.client_secret.as_deref().unwrap_or_default()))
            .ok_or_else(|| OidcError::new("invalid_client", "client authentication failed"))?;
        match req.grant_type.as_str() {
            "authorization_code" => {
                let code = req.code.as_deref().unwrap_or_default();
                // removal under the lock is the single point of consumption
                let grant = self
                    .codes
                    .lock()
                    .remove(code)
                    .ok_or_else(|| OidcError::new("invalid_grant", "unknown or used code"))?;
                if grant.client_id != client.client_id {
                    return Err(OidcError::new("invalid_grant", "code issued to another client"));
                }
                if now >= grant.issued_at + cfg.raw.oidc.code_ttl {
                    return Err(OidcError::new("invalid_grant", "code expired"));
                }
                if req.redirect_uri.as_deref() != Some(grant.redirect_uri.as_str()) {
                    return Err(OidcError::new("invalid_grant", "redirect_uri mismatch"));
                }
                let session = sessions
                    .get_session(&grant.sid)
                    .map_err(|_| OidcError::new("invalid_grant", "session ended"))?;
                Ok((self.issue_tokens(cfg, client, &session, grant.scopes, grant.nonce, now), session))
            }
            "refresh_token" => {
                let token = req.refresh_token.as_deref().unwrap_or_default();
                let grant = {
                    let mut refresh = self.refresh.lock();
                    match refresh.get(token) {
                        Some(g) if g.client_id == client.client_id => {
                            refresh.remove(token).expect("present")
                        }
                        _ => return Err(OidcError::new("invalid_grant", "unknown refresh token")),
                    }
                };
                if now >= grant.expires_at {
                    return Err(OidcError::new("invalid_grant", "refresh token expired"));
                }
                let session = sessions
                    .get_session(&grant.sid)
                    .map_err(|_| OidcError::new("invalid_grant", "session ended"))?;
                Ok((self.issue_tokens(cfg, client, &session, grant.scopes, None, now), session))
            }
            "" => Err(OidcError::new("invalid_request", "grant_type missing")),
            _ => Err(OidcError::new("unsupported_grant_type", "unsupported grant_type")),
        }
    }

    fn issue_tokens(
        &self,
        cfg: &CompiledConfig,
        client: &OidcClientConfig,
        session: &Session,
        scopes: Vec<String>,
        nonce: Option<String>,
        now: i64,
    ) -> TokenResponse {
        let scope = scopes.join(" ");
        let mut claims = json!({
            "iss": cfg.issuer(),
            "sub": session.uid,
            "aud": client.client_id,
            "iat": now,
            "exp": now + client.id_token_ttl,
            "auth_time": session.created_at,
            "auth_level": session.auth_level,
        });
        if let Some(nonce) = nonce {
            claims["nonce"] = Value::String(nonce);
        }
        let access_exp = (now + client.access_ttl).min(session.expires_at);
        let access_token = seal_access_token(
            &cfg.token_key,
            &AccessClaims {
                sid: session.sid.clone(),
                client_id: client.client_id.clone(),
                scope: scope.clone(),
                exp: access_exp,
            },
        );
        let refresh_token = random_b64(32);
        {
            let mut refresh = self.refresh.lock();
            refresh.retain(|_, g| now < g.expires_at);
            refresh.insert(
                refresh_token.clone(),
                RefreshGrant {
                    client_id: client.client_id.clone(),
                    sid: session.sid.clone(),
                    scopes,
                    expires_at: now + client.refresh_ttl,
                },
            );
        }
        TokenResponse {
            access_token,
            token_type: "Bearer",
            expires_in: access_exp - now,
            refresh_token,
            id_token: self.keys.sign(&claims),
            scope,
        }
    }

    /// Claims for the bearer of `access_token`.
    pub fn userinfo(
        &self,
        cfg: &CompiledConfig,
        sessions: &SessionStore,
        access_token: &str,
        now: i64,
    ) -> Result<Map<String, Value>, OidcError> {
        let invalid = |why: &str| OidcError::new("invalid_token", why.to_string());
        let result = open_access_token(&cfg.token_key, access_token, now)
            .map_err(|e| invalid(&e.to_string()))
            .and_then(|claims| {
                let session = sessions
                    .get_session(&claims.sid)
                    .map_err(|_| invalid("session ended"))?;
                Ok(scoped_claims(&session, &claims.scope))
            });
        if let Err(e) = &result {
            self.audit.emit(
                AuditEvent::new(AuditKind::TokenReject)
                    .detail("endpoint", "userinfo")
                    .detail("error", e.error_description.clone())
                    .secret("access_token", access_token),
            );
        }
        result
    }
}

/// `sub` always; `profile` adds names, `email` adds the address.
pub fn scoped_claims(session: &Session, scope: &str) -> Map<String, Value> {
    let scopes: BTreeSet<&str> = scope.split_ascii_whitespace().collect();
    let mut out = Map::new();
    out.insert("sub".into(), session.uid.clone().into());
    if scopes.contains("profile") {
        out.insert("preferred_username".into(), session.uid.clone().into());
        if let Some(cn) = session.attr("cn") {
            out.insert("name".into(), cn.into());
        }
    }
    if scopes.contains("email") {
        if let Some(mail) = session.attr("mail") {
            out.insert("email".into(), mail.into());
        }
    }
    out
}
