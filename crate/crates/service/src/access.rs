//! Who is calling and what they may see.

use serde_json::Value;

use crate::accounts::{AccountView, Role};
use crate::error::ServiceError;

/// Keys removed from every payload served to a caller below manager.
/// Contact details go too, since an email domain is an affiliation.
pub const REDACTED_KEYS: [&str; 6] = ["demographics", "affiliation", "gender", "region", "emails", "email"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Caller {
    Anonymous,
    Account(AccountView),
}

impl Caller {
    pub fn role(&self) -> Option<Role> {
        match self {
            Caller::Anonymous => None,
            Caller::Account(a) => Some(a.role),
        }
    }

    pub fn is_privileged(&self) -> bool {
        self.role().is_some_and(Role::is_privileged)
    }

    /// Dedicated demographic and operator endpoints.
    pub fn require_manager(&self) -> Result<(), ServiceError> {
        match self.role() {
            None => Err(ServiceError::Unauthenticated),
            Some(r) if r.is_privileged() => Ok(()),
            Some(_) => Err(ServiceError::Forbidden),
        }
    }

    pub fn require_admin(&self) -> Result<&AccountView, ServiceError> {
        match self {
            Caller::Anonymous => Err(ServiceError::Unauthenticated),
            Caller::Account(a) if a.role == Role::Admin => Ok(a),
            Caller::Account(_) => Err(ServiceError::Forbidden),
        }
    }
}

/// Drop redacted keys at every depth. Omitted rather than nulled, so a
/// redacted payload looks like one where the data never existed.
pub fn redact(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for key in REDACTED_KEYS {
                map.remove(key);
            }
            map.values_mut().for_each(redact);
        }
        Value::Array(items) => items.iter_mut().for_each(redact),
        _ => {}
    }
}
