//! HOTP/TOTP second factor (HMAC-SHA1).

use std::collections::{BTreeSet, HashMap};

use data_encoding::BASE32_NOPAD;
use hmac::{Hmac, Mac};
use parking_lot::Mutex;
use rand::RngCore;
use sha1::Sha1;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TotpParams {
    pub step: u64,
    pub digits: u32,
    /// Number of neighbouring time-steps accepted on each side.
    pub skew: u64,
}

impl Default for TotpParams {
    fn default() -> Self {
        Self {
            step: 30,
            digits: 6,
            skew: 1,
        }
    }
}

pub fn hotp(key: &[u8], counter: u64, digits: u32) -> String {
    let mut mac = Hmac::<Sha1>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(&counter.to_be_bytes());
    let digest = mac.finalize().into_bytes();
    let offset = (digest[19] & 0x0f) as usize;
    let binary = u32::from_be_bytes([
        digest[offset] & 0x7f,
        digest[offset + 1],
        digest[offset + 2],
        digest[offset + 3],
    ]);
    let modulus = 10u64.pow(digits);
    format!("{:0width$}", binary as u64 % modulus, width = digits as usize)
}

pub fn totp_at(key: &[u8], unix_seconds: u64, params: TotpParams) -> String {
    hotp(key, unix_seconds / params.step, params.digits)
}

/// Decodes a base32 secret, ignoring case, spaces and `=` padding.
pub fn decode_secret(secret: &str) -> Option<Vec<u8>> {
    let cleaned: String = secret
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '=')
        .map(|c| c.to_ascii_uppercase())
        .collect();
    if cleaned.is_empty() {
        return None;
    }
    BASE32_NOPAD.decode(cleaned.as_bytes()).ok()
}

pub fn encode_secret(key: &[u8]) -> String {
    BASE32_NOPAD.encode(key)
}

/// 160-bit random secret, base32.
pub fn generate_secret() -> String {
    let mut key = [0u8; 20];
    rand::rngs::OsRng.fill_bytes(&mut key);
    encode_secret(&key)
}

pub fn otpauth_uri(issuer: &str, account: &str, secret: &str, params: TotpParams) -> String {
    let label = format!("{issuer}:{account}");
    let enc = |s: &str| url::form_urlencoded::byte_serialize(s.as_bytes()).collect::<String>();
    format!(
        "otpauth://totp/{}?secret={}&issuer={}&digits={}&period={}",
        enc(&label).replace('+', "%20"),
        secret,
        enc(issuer).replace('+', "%20"),
        params.digits,
        params.step
    )
}

/// Verifies codes and remembers which `(secret, time-step)` pairs have been
/// used so a code is accepted at most once.
#[derive(Default)]
pub struct TotpVerifier {
    used: Mutex<HashMap<[u8; 32], BTreeSet<u64>>>,
}

impl TotpVerifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn verify(&self, secret: &str, code: &str, now: i64, params: TotpParams) -> bool {
        let Some(key) = decode_secret(secret) else {
            return false;
        };
        if now < 0 || params.step == 0 || code.len() != params.digits as usize {
            return false;
        }
        let current = now as u64 / params.step;
        let first = current.saturating_sub(params.skew);
        let last = current + params.skew;
        let matched = (first..=last).find(|&counter| {
            bool::from(hotp(&key, counter, params.digits).as_bytes().ct_eq(code.as_bytes()))
        });
        let Some(counter) = matched else {
            return false;
        };
        let fingerprint: [u8; 32] = Sha256::digest(&key).into();
        let mut used = self.used.lock();
        let steps = used.entry(fingerprint).or_default();
        // anything older than the window can never match again
        steps.retain(|&s| s >= first);
        steps.insert(counter)
    }
}

pub fn verify_totp(
    verifier: &TotpVerifier,
    secret: &str,
    code: &str,
    now: i64,
    params: TotpParams,
) -> bool {
    verifier.verify(secret, code, now, params)
}
