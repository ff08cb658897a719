//! One-time codes delivered by e-mail.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use rand::Rng;
use subtle::ConstantTimeEq;
use thiserror::Error;

pub const DEFAULT_MAIL_CODE_TTL: i64 = 600;
const MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutgoingMail {
    pub to: String,
    pub subject: String,
    pub body: String,
}

pub trait MailTransport: Send + Sync {
    fn send(&self, mail: &OutgoingMail) -> io::Result<()>;
}

/// Writes each message as a file in a spool directory.
pub struct SpoolTransport {
    dir: PathBuf,
    seq: AtomicU64,
}

impl SpoolTransport {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            seq: AtomicU64::new(0),
        })
    }
}

impl MailTransport for SpoolTransport {
    fn send(&self, mail: &OutgoingMail) -> io::Result<()> {
        let n = self.seq.fetch_add(1, Ordering::SeqCst);
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let path = self.dir.join(format!("{nanos}-{n}.eml"));
        fs::write(
            path,
            format!("To: {}\r\nSubject: {}\r\n\r\n{}\r\n", mail.to, mail.subject, mail.body),
        )
    }
}

/// Keeps sent messages in memory.
#[derive(Default)]
pub struct MemoryTransport {
    sent: Mutex<Vec<OutgoingMail>>,
}

impl MemoryTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sent(&self) -> Vec<OutgoingMail> {
        self.sent.lock().clone()
    }

    pub fn last_code_for(&self, to: &str) -> Option<String> {
        self.sent
            .lock()
            .iter()
            .rev()
            .find(|m| m.to == to)
            .and_then(|m| m.body.split_whitespace().find(|w| w.len() == 6 && w.bytes().all(|b| b.is_ascii_digit())))
            .map(str::to_string)
    }
}

impl MailTransport for MemoryTransport {
    fn send(&self, mail: &OutgoingMail) -> io::Result<()> {
        self.sent.lock().push(mail.clone());
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MailCodeError {
    #[error("user has no mail address")]
    NoMailAddress,
    #[error("code expired")]
    ExpiredCode,
    #[error("mail delivery failed: {0}")]
    Delivery(#[from] io::Error),
}

struct IssuedCode {
    code: String,
    issued_at: i64,
    attempts: u32,
}

/// At most one outstanding code per user; issuing again replaces it.
pub struct MailCodes {
    codes: Mutex<HashMap<String, IssuedCode>>,
    ttl: i64,
}

impl MailCodes {
    pub fn new(ttl_seconds: i64) -> Self {
        Self {
            codes: Mutex::new(HashMap::new()),
            ttl: ttl_seconds,
        }
    }

    pub fn issue(
        &self,
        uid: &str,
        mail: Option<&str>,
        now: i64,
        transport: &dyn MailTransport,
    ) -> Result<(), MailCodeError> {
        let to = mail.filter(|m| !m.is_empty()).ok_or(MailCodeError::NoMailAddress)?;
        let code = format!("{:06}", rand::rngs::OsRng.gen_range(0..1_000_000u32));
        transport.send(&OutgoingMail {
            to: to.to_string(),
            subject: "Your login code".into(),
            body: format!("Your one-time login code is {code} . It expires in {} minutes.", self.ttl / 60),
        })?;
        self.codes.lock().insert(
            uid.to_string(),
            IssuedCode {
                code,
                issued_at: now,
                attempts: 0,
            },
        );
        Ok(())
    }

    /// Single use: a correct code is consumed. Too many wrong guesses void it.
    pub fn verify(&self, uid: &str, code: &str, now: i64) -> Result<bool, MailCodeError> {
        let mut codes = self.codes.lock();
        let Some(issued) = codes.get_mut(uid) else {
            return Ok(false);
        };
        if now - issued.issued_at > self.ttl {
            codes.remove(uid);
            return Err(MailCodeError::ExpiredCode);
        }
        if bool::from(issued.code.as_bytes().ct_eq(code.trim().as_bytes())) {
            codes.remove(uid);
            return Ok(true);
        }
        issued.attempts += 1;
        if issued.attempts >= MAX_ATTEMPTS {
            codes.remove(uid);
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_use() {
        let t = MemoryTransport::new();
        let codes = MailCodes::new(DEFAULT_MAIL_CODE_TTL);
        codes.issue("alice", Some("a@x"), 0, &t).unwrap();
        let code = t.last_code_for("a@x").unwrap();
        assert!(codes.verify("alice", &code, 10).unwrap());
        assert!(!codes.verify("alice", &code, 11).unwrap());
    }

    #[test]
    fn expiry() {
        let t = MemoryTransport::new();
        let codes = MailCodes::new(600);
        codes.issue("alice", Some("a@x"), 0, &t).unwrap();
        let code = t.last_code_for("a@x").unwrap();
        assert!(matches!(codes.verify("alice", &code, 601), Err(MailCodeError::ExpiredCode)));
    }

    #[test]
    fn only_latest_code_valid() {
        let t = MemoryTransport::new();
        let codes = MailCodes::new(600);
        codes.issue("alice", Some("a@x"), 0, &t).unwrap();
        let first = t.last_code_for("a@x").unwrap();
        codes.issue("alice", Some("a@x"), 1, &t).unwrap();
        let second = t.last_code_for("a@x").unwrap();
        if first != second {
            assert!(!codes.verify("alice", &first, 2).unwrap());
        }
        assert!(codes.verify("alice", &second, 3).unwrap());
    }

    #[test]
    fn no_address() {
        let codes = MailCodes::new(600);
        assert!(matches!(
            codes.issue("bob", None, 0, &MemoryTransport::new()),
            Err(MailCodeError::NoMailAddress)
        ));
    }

    #[test]
    fn spool_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = SpoolTransport::new(dir.path()).unwrap();
        MailCodes::new(600).issue("a", Some("a@x"), 0, &t).unwrap();
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let text = fs::read_to_string(files[0].as_ref().unwrap().path()).unwrap();
        assert!(text.starts_with("To: a@x\r\n"));
    }

    #[test]
    fn guessing_voids_code() {
        let t = MemoryTransport::new();
        let codes = MailCodes::new(600);
        codes.issue("alice", Some("a@x"), 0, &t).unwrap();
        let code = t.last_code_for("a@x").unwrap();
        let wrong = if code == "000000" { "000001" } else { "000000" };
        for _ in 0..MAX_ATTEMPTS {
            assert!(!codes.verify("alice", wrong, 1).unwrap());
        }
        assert!(!codes.verify("alice", &code, 1).unwrap());
    }
}
