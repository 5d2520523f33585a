//! Manager accounts, password hashing, and bearer sessions.
//!
//! Accounts, sessions and the audit trail live next to the project store as
//! `accounts.json`, `sessions.json` and `audit.jsonl`. Sessions are stored
//! under the SHA-256 of their token, so the files never hold a usable token.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::TryRngCore;
use retain_core::config::ServiceSettings;
use retain_core::store::{read_document, write_atomic, write_document};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::error::ServiceError;

pub const MIN_PASSWORD_LEN: usize = 10;
const MAX_LOGIN_LEN: usize = 128;
const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;
const TOKEN_BYTES: usize = 32;
const SCHEME: &str = "pbkdf2-sha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pending,
    Manager,
    Admin,
}

impl Role {
    /// Roles allowed to see demographic attributes.
    pub fn is_privileged(self) -> bool {
        matches!(self, Role::Manager | Role::Admin)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: String,
    pub login: String,
    pub password_hash: String,
    pub role: Role,
    pub created_at: i64,
}

/// What the API reveals about an account.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountView {
    pub account_id: String,
    pub login: String,
    pub role: Role,
    pub created_at: i64,
}

impl From<&Account> for AccountView {
    fn from(a: &Account) -> Self {
        AccountView {
            account_id: a.account_id.clone(),
            login: a.login.clone(),
            role: a.role,
            created_at: a.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub account_id: String,
    pub expires_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginGrant {
    pub token: String,
    pub expires_at: i64,
    pub account: AccountView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: i64,
    pub actor: String,
    pub action: String,
    pub target: String,
}

fn random_bytes<const N: usize>() -> [u8; N] {
    let mut buf = [0u8; N];
    rand::rngs::OsRng
        .try_fill_bytes(&mut buf)
        .expect("operating system RNG unavailable");
    buf
}

fn derive(password: &str, salt: &[u8], iterations: u32) -> [u8; HASH_LEN] {
    let mut out = [0u8; HASH_LEN];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, iterations, &mut out);
    out
}

/// Salted PBKDF2-HMAC-SHA256 in the form `pbkdf2-sha256$iter$salt$hash`.
pub fn hash_password(password: &str, iterations: u32) -> String {
    let salt: [u8; SALT_LEN] = random_bytes();
    format!(
        "{SCHEME}${iterations}${}${}",
        hex::encode(salt),
        hex::encode(derive(password, &salt, iterations))
    )
}

/// Constant-time check of `password` against a stored hash. Malformed
/// hashes never verify.
pub fn verify_password(password: &str, stored: &str) -> bool {
    let parts: Vec<&str> = stored.split('$').collect();
    let [scheme, iterations, salt, hash] = parts.as_slice() else {
        return false;
    };
    let (Ok(iterations), Ok(salt), Ok(hash)) = (iterations.parse::<u32>(), hex::decode(salt), hex::decode(hash)) else {
        return false;
    };
    if *scheme != SCHEME || iterations == 0 || hash.len() != HASH_LEN {
        return false;
    }
    derive(password, &salt, iterations).ct_eq(hash.as_slice()).into()
}

fn token_key(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

fn validate_login(login: &str) -> Result<(), ServiceError> {
    let ok = !login.is_empty()
        && login.len() <= MAX_LOGIN_LEN
        && login.chars().all(|c| !c.is_whitespace() && !c.is_control());
    if ok {
        Ok(())
    } else {
        Err(ServiceError::InvalidLogin)
    }
}

fn validate_password(password: &str) -> Result<(), ServiceError> {
    if password.chars().count() < MIN_PASSWORD_LEN {
        return Err(ServiceError::WeakPassword);
    }
    Ok(())
}

pub struct Accounts {
    dir: PathBuf,
    iterations: u32,
    ttl_secs: i64,
    request_cap: u64,
    accounts: Vec<Account>,
    sessions: BTreeMap<String, Session>,
    usage: HashMap<String, u64>,
    /// Verified against when the login is unknown, so that path costs the
    /// same as a wrong password.
    dummy_hash: String,
}

impl Accounts {
    pub fn open(dir: &Path, settings: &ServiceSettings) -> Result<Self, ServiceError> {
        let accounts: Vec<Account> = read_document(&dir.join("accounts.json"))?.unwrap_or_default();
        let sessions = read_document(&dir.join("sessions.json"))?.unwrap_or_default();
        Ok(Accounts {
            dir: dir.to_path_buf(),
            iterations: settings.password_iterations,
            ttl_secs: settings.session_ttl_secs,
            request_cap: settings.request_cap_per_token,
            accounts,
            sessions,
            usage: HashMap::new(),
            dummy_hash: hash_password("not a real password", settings.password_iterations),
        })
    }

    fn save_accounts(&self) -> Result<(), ServiceError> {
        Ok(write_document(&self.dir.join("accounts.json"), &self.accounts)?)
    }

    fn save_sessions(&self) -> Result<(), ServiceError> {
        Ok(write_document(&self.dir.join("sessions.json"), &self.sessions)?)
    }

    fn audit(&self, entry: AuditEntry) -> Result<(), ServiceError> {
        let path = self.dir.join("audit.jsonl");
        let mut text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(ServiceError::Io(e.to_string())),
        };
        text.push_str(&serde_json::to_string(&entry).map_err(|e| ServiceError::Io(e.to_string()))?);
        text.push('\n');
        Ok(write_atomic(&path, text.as_bytes())?)
    }

    pub fn audit_log(&self) -> Result<Vec<AuditEntry>, ServiceError> {
        let path = self.dir.join("audit.jsonl");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(ServiceError::Io(e.to_string())),
        };
        text.lines()
            .map(|l| serde_json::from_str(l).map_err(|e| ServiceError::Io(e.to_string())))
            .collect()
    }

    pub fn accounts(&self) -> &[Account] {
        &self.accounts
    }

    pub fn has_admin(&self) -> bool {
        self.accounts.iter().any(|a| a.role == Role::Admin)
    }

    fn create(&mut self, login: &str, password: &str, role: Role, now: i64) -> Result<AccountView, ServiceError> {
        validate_login(login)?;
        validate_password(password)?;
        if self.accounts.iter().any(|a| a.login == login) {
            return Err(ServiceError::DuplicateLogin);
        }
        let account = Account {
            account_id: format!("a-{}", hex::encode(random_bytes::<8>())),
            login: login.to_string(),
            password_hash: hash_password(password, self.iterations),
            role,
            created_at: now,
        };
        let view = AccountView::from(&account);
        self.accounts.push(account);
        self.save_accounts()?;
        Ok(view)
    }

    /// Open signup: the account waits for an administrator.
    pub fn signup(&mut self, login: &str, password: &str, now: i64) -> Result<AccountView, ServiceError> {
        let view = self.create(login, password, Role::Pending, now)?;
        self.audit(AuditEntry {
            at: now,
            actor: view.account_id.clone(),
            action: "signup".into(),
            target: view.account_id.clone(),
        })?;
        Ok(view)
    }

    /// First administrator. Refused once any administrator exists.
    pub fn init_admin(&mut self, login: &str, password: &str, now: i64) -> Result<AccountView, ServiceError> {
        if self.has_admin() {
            return Err(ServiceError::AdminExists);
        }
        let view = self.create(login, password, Role::Admin, now)?;
        self.audit(AuditEntry {
            at: now,
            actor: "init-admin".into(),
            action: "init_admin".into(),
            target: view.account_id.clone(),
        })?;
        Ok(view)
    }

    pub fn login(&mut self, login: &str, password: &str, now: i64) -> Result<LoginGrant, ServiceError> {
        let found = self.accounts.iter().find(|a| a.login == login);
        let stored = found.map_or(self.dummy_hash.as_str(), |a| a.password_hash.as_str());
        let matches = verify_password(password, stored);
        let account = match found {
            Some(a) if matches => a.clone(),
            _ => return Err(ServiceError::InvalidCredentials),
        };
        if account.role == Role::Pending {
            return Err(ServiceError::AwaitingApproval);
        }
        let token = hex::encode(random_bytes::<TOKEN_BYTES>());
        let expires_at = now + self.ttl_secs;
        // expired sessions linger one more lifetime so their holders get a
        // re-authenticate answer rather than an unknown-token one
        let grace = self.ttl_secs;
        self.sessions.retain(|_, s| s.expires_at + grace > now);
        self.sessions.insert(
            token_key(&token),
            Session {
                account_id: account.account_id.clone(),
                expires_at,
            },
        );
        self.save_sessions()?;
        Ok(LoginGrant {
            token,
            expires_at,
            account: AccountView::from(&account),
        })
    }

    /// Account behind a bearer token, counting the request against the
    /// token's cap.
    pub fn authenticate(&mut self, token: &str, now: i64) -> Result<AccountView, ServiceError> {
        let key = token_key(token);
        let session = self.sessions.get(&key).ok_or(ServiceError::InvalidToken)?;
        if session.expires_at <= now {
            return Err(ServiceError::SessionExpired);
        }
        let account = self
            .accounts
            .iter()
            .find(|a| a.account_id == session.account_id)
            .ok_or(ServiceError::InvalidToken)?;
        let used = self.usage.entry(key).or_default();
        if *used >= self.request_cap {
            return Err(ServiceError::RequestCap);
        }
        *used += 1;
        Ok(AccountView::from(account))
    }

    pub fn pending(&self) -> Vec<AccountView> {
        self.accounts
            .iter()
            .filter(|a| a.role == Role::Pending)
            .map(AccountView::from)
            .collect()
    }

    pub fn approve(&mut self, actor: &AccountView, account_id: &str, now: i64) -> Result<AccountView, ServiceError> {
        if actor.role != Role::Admin {
            return Err(ServiceError::Forbidden);
        }
        let target = self
            .accounts
            .iter_mut()
            .find(|a| a.account_id == account_id)
            .ok_or_else(|| ServiceError::UnknownAccount(account_id.to_string()))?;
        if target.role != Role::Pending {
            return Err(ServiceError::AlreadyApproved(account_id.to_string()));
        }
        target.role = Role::Manager;
        let view = AccountView::from(&*target);
        self.save_accounts()?;
        self.audit(AuditEntry {
            at: now,
            actor: actor.account_id.clone(),
            action: "approve".into(),
            target: account_id.to_string(),
        })?;
        Ok(view)
    }
}
