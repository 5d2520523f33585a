//! Operator settings, read from `retain.json` in the data directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engagement::Precedence;
use crate::error::{RetainError, Result};
use crate::impact::{KindWeights, DEFAULT_MODERATE_SHARE};
use crate::ingest::{DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_PUBLIC_DOMAINS};
use crate::model::LifecyclePolicy;
use crate::survival::{FitOptions, DEFAULT_FEATURE_WINDOW_DAYS};

pub const CONFIG_FILE: &str = "retain.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySettings {
    pub inactive_after_days: u32,
    pub departed_after_days: u32,
    pub newcomer_within_days: u32,
}

impl Default for PolicySettings {
    fn default() -> Self {
        PolicySettings {
            inactive_after_days: LifecyclePolicy::DEFAULT_INACTIVE_AFTER_DAYS,
            departed_after_days: LifecyclePolicy::DEFAULT_DEPARTED_AFTER_DAYS,
            newcomer_within_days: LifecyclePolicy::DEFAULT_NEWCOMER_WITHIN_DAYS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub bind: String,
    pub session_ttl_secs: i64,
    pub password_iterations: u32,
    /// Requests one session token may make before it must log in again.
    pub request_cap_per_token: u64,
    /// Let a logged-in contributor read their own inferred record.
    pub contributor_self_view: bool,
    /// Seconds between engagement runs while serving; 0 disables the loop.
    pub scheduler_interval_secs: u64,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            bind: "127.0.0.1:8080".into(),
            session_ttl_secs: 24 * 3600,
            password_iterations: 100_000,
            request_cap_per_token: 10_000,
            contributor_self_view: false,
            scheduler_interval_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub policy: PolicySettings,
    pub inference_threshold: f64,
    pub public_domains: Vec<String>,
    pub default_seed: u64,
    /// Environment variable holding the remote API token.
    pub token_env: String,
    pub exclude_bots: bool,
    pub feature_window_days: u32,
    pub report_period_days: u32,
    pub moderate_share: f64,
    pub demographic_precedence: Precedence,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind_weights: Option<KindWeights>,
    pub survey_link: String,
    /// Messages per recipient per day; unlimited when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub daily_message_cap: Option<u32>,
    pub fit: FitOptions,
    pub service: ServiceSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            policy: PolicySettings::default(),
            inference_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            public_domains: DEFAULT_PUBLIC_DOMAINS.iter().map(|d| d.to_string()).collect(),
            default_seed: 42,
            token_env: "RETAIN_API_TOKEN".into(),
            exclude_bots: true,
            feature_window_days: DEFAULT_FEATURE_WINDOW_DAYS,
            report_period_days: 30,
            moderate_share: DEFAULT_MODERATE_SHARE,
            demographic_precedence: Precedence::default(),
            kind_weights: None,
            survey_link: String::new(),
            daily_message_cap: None,
            fit: FitOptions::default(),
            service: ServiceSettings::default(),
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> RetainError {
    RetainError::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl Settings {
    /// Parse settings text; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Settings> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let settings: Settings = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path == "." { "<root>" } else { &path }, e.inner().to_string())
        })?;
        settings.validate()?;
        Ok(settings)
    }

    /// Settings from `{data_dir}/retain.json`, or defaults when absent.
    pub fn load(data_dir: &Path) -> Result<Settings> {
        let path = data_dir.join(CONFIG_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => Settings::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Settings::default()),
            Err(e) => Err(RetainError::io(&path, e)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy_at(0).validate().map_err(|e| invalid("policy", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.inference_threshold) {
            return Err(invalid("inference_threshold", "must be within [0, 1]"));
        }
        if self.feature_window_days == 0 {
            return Err(invalid("feature_window_days", "must be at least 1"));
        }
        if self.report_period_days == 0 {
            return Err(invalid("report_period_days", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.moderate_share) {
            return Err(invalid("moderate_share", "must be within [0, 1]"));
        }
        if !(self.fit.train_fraction > 0.0 && self.fit.train_fraction <= 1.0) {
            return Err(invalid("fit.train_fraction", "must be within (0, 1]"));
        }
        if self.service.password_iterations == 0 {
            return Err(invalid("service.password_iterations", "must be at least 1"));
        }
        if self.service.session_ttl_secs <= 0 {
            return Err(invalid("service.session_ttl_secs", "must be positive"));
        }
        self.demographic_precedence.validate()
    }

    pub fn policy_at(&self, as_of: i64) -> LifecyclePolicy {
        LifecyclePolicy {
            inactive_after_days: self.policy.inactive_after_days,
            departed_after_days: self.policy.departed_after_days,
            newcomer_within_days: self.policy.newcomer_within_days,
            as_of,
        }
    }

    pub fn public_domain_set(&self) -> std::collections::BTreeSet<String> {
        self.public_domains.iter().map(|d| d.to_ascii_lowercase()).collect()
    }
}
