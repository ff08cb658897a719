//! Local user store: a JSON array of [`UserRecord`]s with Argon2id password
//! hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Algorithm, Argon2, Params, Version};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub uid: String,
    pub password_hash: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub totp_secret: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locked_until: Option<i64>,
}

impl UserRecord {
    /// Attributes copied into a new session.
    pub fn session_attributes(&self) -> BTreeMap<String, String> {
        let mut attrs = self.attributes.clone();
        if let Some(mail) = &self.mail {
            attrs.entry("mail".into()).or_insert_with(|| mail.clone());
        }
        attrs.insert("uid".into(), self.uid.clone());
        attrs
    }
}

#[derive(Debug, Error)]
pub enum UserError {
    #[error("bad credentials")]
    BadCredentials,
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("user {0} already exists")]
    Exists(String),
    #[error("password hashing failed: {0}")]
    Hash(String),
    #[error("user store: {0}")]
    Io(#[from] io::Error),
    #[error("user store format: {0}")]
    Format(#[from] serde_json::Error),
}

/// Hash cost. `Interactive` is the Argon2id default; `Low` exists for tests
/// and desk demos.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HashCost {
    #[default]
    Interactive,
    Low,
}

impl HashCost {
    fn argon2(self) -> Argon2<'static> {
        let params = match self {
            HashCost::Interactive => Params::default(),
            HashCost::Low => Params::new(1024, 1, 1, None).expect("valid argon2 params"),
        };
        Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
    }
}

pub fn hash_password(password: &str, cost: HashCost) -> Result<String, UserError> {
    let salt = SaltString::generate(&mut rand::rngs::OsRng);
    cost.argon2()
        .hash_password(password.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| UserError::Hash(e.to_string()))
}

fn verify_hash(password: &str, hash: &str) -> bool {
    PasswordHash::new(hash)
        .map(|parsed| {
            Argon2::default()
                .verify_password(password.as_bytes(), &parsed)
                .is_ok()
        })
        .unwrap_or(false)
}

pub struct UserStore {
    path: Option<PathBuf>,
    users: RwLock<BTreeMap<String, UserRecord>>,
    cost: HashCost,
    dummy_hash: OnceLock<String>,
}

impl UserStore {
    pub fn in_memory(cost: HashCost) -> Self {
        Self {
            path: None,
            users: RwLock::new(BTreeMap::new()),
            cost,
            dummy_hash: OnceLock::new(),
        }
    }

    /// Opens the JSON store at `path`; a missing file is an empty store.
    pub fn open(path: impl Into<PathBuf>, cost: HashCost) -> Result<Self, UserError> {
        let path = path.into();
        let users = match fs::read(&path) {
            Ok(bytes) => {
                let list: Vec<UserRecord> = serde_json::from_slice(&bytes)?;
                list.into_iter().map(|u| (u.uid.clone(), u)).collect()
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            path: Some(path),
            users: RwLock::new(users),
            cost,
            dummy_hash: OnceLock::new(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn persist(&self, users: &BTreeMap<String, UserRecord>) -> Result<(), UserError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let list: Vec<&UserRecord> = users.values().collect();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(&list)?)?;
        f.sync_data()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn update<T>(
        &self,
        uid: &str,
        f: impl FnOnce(&mut UserRecord) -> T,
    ) -> Result<T, UserError> {
        let mut users = self.users.write();
        let user = users
            .get_mut(uid)
            .ok_or_else(|| UserError::UnknownUser(uid.to_string()))?;
        let out = f(user);
        self.persist(&users)?;
        Ok(out)
    }

    pub fn get(&self, uid: &str) -> Option<UserRecord> {
        self.users.read().get(uid).cloned()
    }

    pub fn uids(&self) -> Vec<String> {
        self.users.read().keys().cloned().collect()
    }

    pub fn add_user(
        &self,
        uid: &str,
        password: &str,
        attributes: BTreeMap<String, String>,
        mail: Option<String>,
    ) -> Result<UserRecord, UserError> {
        let record = UserRecord {
            uid: uid.to_string(),
            password_hash: hash_password(password, self.cost)?,
            attributes,
            totp_secret: None,
            mail,
            locked_until: None,
        };
        let mut users = self.users.write();
        if users.contains_key(uid) {
            return Err(UserError::Exists(uid.to_string()));
        }
        users.insert(uid.to_string(), record.clone());
        self.persist(&users)?;
        Ok(record)
    }

    pub fn set_password(&self, uid: &str, password: &str) -> Result<(), UserError> {
        let hash = hash_password(password, self.cost)?;
        self.update(uid, |u| u.password_hash = hash)
    }

    pub fn set_totp_secret(&self, uid: &str, secret: Option<String>) -> Result<(), UserError> {
        self.update(uid, |u| u.totp_secret = secret)
    }

    pub fn set_locked_until(&self, uid: &str, until: Option<i64>) -> Result<(), UserError> {
        self.update(uid, |u| u.locked_until = until)
    }

    /// Checks a password. Unknown users are verified against a dummy hash so
    /// both failure paths cost the same and return the same error.
    pub fn check_password(&self, uid: &str, password: &str) -> Result<UserRecord, UserError> {
        match self.get(uid) {
            Some(user) if verify_hash(password, &user.password_hash) => Ok(user),
            Some(_) => Err(UserError::BadCredentials),
            None => {
                let dummy = self.dummy_hash.get_or_init(|| {
                    hash_password("dummy password", self.cost).unwrap_or_default()
                });
                let _ = verify_hash(password, dummy);
                Err(UserError::BadCredentials)
            }
        }
    }
}
