use std::collections::BTreeSet;

use crate::model::UNKNOWN;

/// Webmail providers whose addresses say nothing about an employer.
pub const DEFAULT_PUBLIC_DOMAINS: [&str; 7] = [
    "gmail.com",
    "outlook.com",
    "hotmail.com",
    "yahoo.com",
    "qq.com",
    "proton.me",
    "protonmail.com",
];

pub fn default_public_domains() -> BTreeSet<String> {
    DEFAULT_PUBLIC_DOMAINS.iter().map(|d| d.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffiliationGuess {
    pub affiliation: String,
    /// Present when the email could not be parsed.
    pub warning: Option<String>,
}

impl AffiliationGuess {
    fn unknown(warning: Option<String>) -> Self {
        AffiliationGuess {
            affiliation: UNKNOWN.to_string(),
            warning,
        }
    }
}

/// Organization implied by an email's registrable domain.
///
/// Public webmail domains map to `"unknown"`. Malformed emails also map to
/// `"unknown"` and carry a warning instead of failing.
pub fn infer_affiliation(email: &str, public_domains: &BTreeSet<String>) -> AffiliationGuess {
    let email = email.trim();
    let mut parts = email.split('@');
    let (Some(local), Some(host), None) = (parts.next(), parts.next(), parts.next()) else {
        return AffiliationGuess::unknown(Some(format!("malformed email `{email}`")));
    };
    let host = host.trim_end_matches('.').to_ascii_lowercase();
    if local.is_empty() || host.is_empty() || !host.contains('.') {
        return AffiliationGuess::unknown(Some(format!("malformed email `{email}`")));
    }
    let Some(registrable) = psl::domain_str(&host) else {
        return AffiliationGuess::unknown(Some(format!("no registrable domain in `{email}`")));
    };
    let is_public = |d: &str| public_domains.iter().any(|p| p.eq_ignore_ascii_case(d));
    if is_public(registrable) || is_public(&host) {
        return AffiliationGuess::unknown(None);
    }
    AffiliationGuess {
        affiliation: registrable.to_string(),
        warning: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aff(email: &str) -> String {
        infer_affiliation(email, &default_public_domains()).affiliation
    }

    #[test]
    fn corporate_vs_webmail() {
        assert_eq!(aff("a@google.com"), "google.com");
        assert_eq!(aff("a@gmail.com"), UNKNOWN);
    }

    /// Hand-written suffix table covering the fixtures below, independent of
    /// the embedded public-suffix list.
    fn reference_registrable(host: &str) -> String {
        const SUFFIXES: [&str; 5] = ["co.uk", "com.au", "com", "org", "io"];
        let labels: Vec<&str> = host.split('.').collect();
        for take in (1..labels.len()).rev() {
            let suffix = labels[labels.len() - take..].join(".");
            if SUFFIXES.contains(&suffix.as_str()) {
                return labels[labels.len() - take - 1..].join(".");
            }
        }
        unreachable!("fixture host {host} not covered")
    }

    #[test]
    fn registrable_domain_matches_reference_suffixes() {
        for host in [
            "sub.corp.co.uk",
            "corp.co.uk",
            "a.b.c.example.com",
            "dev.shop.com.au",
            "mail.apache.org",
            "x.y.io",
        ] {
            assert_eq!(aff(&format!("u@{host}")), reference_registrable(host), "{host}");
        }
        assert_eq!(aff("a@sub.corp.co.uk"), "corp.co.uk");
    }

    #[test]
    fn case_insensitive_and_subdomains_of_public() {
        assert_eq!(aff("a@Google.COM"), "google.com");
        assert_eq!(aff("a@GMAIL.com"), UNKNOWN);
        assert_eq!(aff("a@mail.gmail.com"), UNKNOWN);
    }

    #[test]
    fn malformed_is_tolerated() {
        for bad in ["nope", "a@b@c.com", "@corp.com", "a@", "a@localhost"] {
            let g = infer_affiliation(bad, &default_public_domains());
            assert_eq!(g.affiliation, UNKNOWN);
            assert!(g.warning.is_some(), "{bad}");
        }
    }

    #[test]
    fn operator_can_extend_denylist() {
        let mut public = default_public_domains();
        public.insert("fastmail.com".into());
        assert_eq!(infer_affiliation("x@fastmail.com", &public).affiliation, UNKNOWN);
    }
}
