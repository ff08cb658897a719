//! Sealed tokens: the ServiceToken carried in `X-LLNG-TOKEN`, the ciphered
//! SSO cookie of the SecureToken handler, and any other opaque blob that must
//! be both confidential and tamper-evident.
//!
//! Wire form is unpadded base64url of `nonce (12) || ciphertext || tag (16)`,
//! sealed with ChaCha20-Poly1305. Each token family uses a distinct
//! associated-data label so a blob minted for one purpose never opens as
//! another.

use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SERVICE_TOKEN_HEADER: &str = "X-LLNG-TOKEN";
pub const DEFAULT_SERVICE_TOKEN_MAX_AGE: i64 = 30;

const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;

const PURPOSE_SERVICE_TOKEN: &[u8] = b"llng/service-token/v1";
const PURPOSE_SECURE_COOKIE: &[u8] = b"llng/secure-cookie/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("malformed token")]
    Malformed,
    #[error("token failed authentication")]
    Tampered,
    #[error("token not valid for this virtual host")]
    OutOfScope,
    #[error("token expired")]
    Expired,
    #[error("invalid claims: {0}")]
    InvalidClaims(&'static str),
    #[error("invalid key: {0}")]
    InvalidKey(&'static str),
}

/// 256-bit symmetric key.
#[derive(Clone, PartialEq, Eq)]
pub struct TokenKey([u8; 32]);

impl TokenKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn from_hex(text: &str) -> Result<Self, TokenError> {
        let bytes = hex::decode(text.trim()).map_err(|_| TokenError::InvalidKey("not hex"))?;
        let bytes: [u8; 32] = bytes
            .try_into()
            .map_err(|_| TokenError::InvalidKey("expected 32 bytes"))?;
        Ok(Self(bytes))
    }

    pub fn generate() -> Self {
        let mut bytes = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for TokenKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TokenKey(..)")
    }
}

/// Encrypts `plaintext` under `key`, binding it to `purpose`.
pub fn seal(key: &TokenKey, purpose: &[u8], plaintext: &[u8]) -> String {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut nonce = [0u8; NONCE_LEN];
    rand::rngs::OsRng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: purpose,
            },
        )
        .expect("in-memory AEAD encryption cannot fail");
    let mut blob = Vec::with_capacity(NONCE_LEN + ct.len());
    blob.extend_from_slice(&nonce);
    blob.extend_from_slice(&ct);
    URL_SAFE_NO_PAD.encode(blob)
}

/// Inverse of [`seal`].
pub fn open(key: &TokenKey, purpose: &[u8], blob: &str) -> Result<Vec<u8>, TokenError> {
    let raw = URL_SAFE_NO_PAD
        .decode(blob.trim())
        .map_err(|_| TokenError::Malformed)?;
    if raw.len() < NONCE_LEN + TAG_LEN {
        return Err(TokenError::Malformed);
    }
    let (nonce, ct) = raw.split_at(NONCE_LEN);
    ChaCha20Poly1305::new(Key::from_slice(&key.0))
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: ct,
                aad: purpose,
            },
        )
        .map_err(|_| TokenError::Tampered)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceTokenClaims {
    pub sid: String,
    pub vhosts: Vec<String>,
    pub issued_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_headers: Option<BTreeMap<String, String>>,
}

impl ServiceTokenClaims {
    pub fn new(sid: impl Into<String>, vhosts: Vec<String>, issued_at: i64) -> Self {
        Self {
            sid: sid.into(),
            vhosts,
            issued_at,
            service_headers: None,
        }
    }

    pub fn allows(&self, vhost: &str) -> bool {
        self.vhosts.iter().any(|v| v.eq_ignore_ascii_case(vhost))
    }
}

pub fn mint_service_token(claims: &ServiceTokenClaims, key: &TokenKey) -> Result<String, TokenError> {
    if claims.vhosts.is_empty() {
        return Err(TokenError::InvalidClaims("vhost list is empty"));
    }
    let body = serde_json::to_vec(claims).expect("claims serialize");
    Ok(seal(key, PURPOSE_SERVICE_TOKEN, &body))
}

/// Authenticates a token and returns its claims without checking age or
/// scope. For inspection only; the gateway uses [`verify_service_token`].
pub fn open_service_token(blob: &str, key: &TokenKey) -> Result<ServiceTokenClaims, TokenError> {
    let body = open(key, PURPOSE_SERVICE_TOKEN, blob)?;
    let claims: ServiceTokenClaims =
        serde_json::from_slice(&body).map_err(|_| TokenError::Malformed)?;
    if claims.vhosts.is_empty() {
        return Err(TokenError::Malformed);
    }
    Ok(claims)
}

pub fn verify_service_token(
    blob: &str,
    requesting_vhost: &str,
    now: i64,
    key: &TokenKey,
    max_age_seconds: i64,
) -> Result<ServiceTokenClaims, TokenError> {
    let claims = open_service_token(blob, key)?;
    if now - claims.issued_at > max_age_seconds {
        return Err(TokenError::Expired);
    }
    if !claims.allows(requesting_vhost) {
        return Err(TokenError::OutOfScope);
    }
    Ok(claims)
}

pub fn seal_sid(sid: &str, key: &TokenKey) -> String {
    seal(key, PURPOSE_SECURE_COOKIE, sid.as_bytes())
}

pub fn unseal_sid(blob: &str, key: &TokenKey) -> Result<String, TokenError> {
    let raw = open(key, PURPOSE_SECURE_COOKIE, blob)?;
    String::from_utf8(raw).map_err(|_| TokenError::Malformed)
}
