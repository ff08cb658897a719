//! RFC 6238 appendix B vectors (SHA-1, 8 digits) against a self-contained
//! HOTP written from RFC 4226 section 5 and RFC 2104, sharing no code with
//! the crate.

use llng_core::portal::totp::{encode_secret, totp_at, TotpParams, TotpVerifier};
use sha1::{Digest, Sha1};

fn hmac_sha1(key: &[u8], msg: &[u8]) -> [u8; 20] {
    const BLOCK: usize = 64;
    let mut k = [0u8; BLOCK];
    if key.len() > BLOCK {
        k[..20].copy_from_slice(&Sha1::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let mut inner = Sha1::new();
    inner.update(k.map(|b| b ^ 0x36));
    inner.update(msg);
    let inner = inner.finalize();
    let mut outer = Sha1::new();
    outer.update(k.map(|b| b ^ 0x5c));
    outer.update(inner);
    outer.finalize().into()
}

fn oracle_hotp(key: &[u8], counter: u64, digits: u32) -> String {
    let hs = hmac_sha1(key, &counter.to_be_bytes());
    let offset = (hs[19] & 0xf) as usize;
    let snum = ((hs[offset] as u32 & 0x7f) << 24)
        | ((hs[offset + 1] as u32) << 16)
        | ((hs[offset + 2] as u32) << 8)
        | hs[offset + 3] as u32;
    let d = snum % 10u32.pow(digits);
    format!("{d:0>width$}", width = digits as usize)
}

const SECRET: &[u8] = b"12345678901234567890";

const VECTORS: [(u64, &str); 6] = [
    (59, "94287082"),
    (1111111109, "07081804"),
    (1111111111, "14050471"),
    (1234567890, "89005924"),
    (2000000000, "69279037"),
    (20000000000, "65353130"),
];

#[test]
fn oracle_reproduces_vectors() {
    for (t, want) in VECTORS {
        assert_eq!(oracle_hotp(SECRET, t / 30, 8), want, "T = {t}");
    }
}

#[test]
fn crate_matches_vectors_and_oracle() {
    let p = TotpParams {
        digits: 8,
        ..Default::default()
    };
    for (t, want) in VECTORS {
        assert_eq!(totp_at(SECRET, t, p), want, "T = {t}");
    }
    for counter in 0..2000u64 {
        let t = counter * 30 + 7;
        assert_eq!(totp_at(SECRET, t, p), oracle_hotp(SECRET, counter, 8));
        assert_eq!(
            totp_at(SECRET, t, TotpParams::default()),
            oracle_hotp(SECRET, counter, 6)
        );
    }
}

#[test]
fn verify_totp_accepts_vectors_once() {
    let p = TotpParams {
        digits: 8,
        ..Default::default()
    };
    let secret = encode_secret(SECRET);
    let v = TotpVerifier::new();
    for (t, want) in VECTORS {
        assert!(v.verify(&secret, want, t as i64, p), "T = {t}");
        assert!(!v.verify(&secret, want, t as i64, p), "replay at T = {t}");
    }
}
