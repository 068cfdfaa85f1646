//! Rust side of the in-page scripts used by the real driver: the consent
//! rule file, the homepage selector config, and the shapes the scripts
//! return.
//!
//! The scripts themselves live in the page-scripts package. The driver
//! loads three files from its scripts directory and calls one global
//! function in each through WebDriver's asynchronous execute:
//!
//! | file                   | call                                        | returns                         |
//! |------------------------|---------------------------------------------|---------------------------------|
//! | `accept_consent.js`    | `acceptConsent(rules, timeoutMs)`           | `"accepted" \| "none_found" \| "failed"` |
//! | `random_scroll.js`     | `randomScroll(k, fractions)`                | scroll event count              |
//! | `extract_homepage.js`  | `extractHomepage(selectors, maxK)`          | [`ExtractionResult`]            |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConsentOutcome, VideoRecord};

pub const CONSENT_SCRIPT: &str = "accept_consent.js";
pub const SCROLL_SCRIPT: &str = "random_scroll.js";
pub const EXTRACT_SCRIPT: &str = "extract_homepage.js";

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

/// One consent-banner recipe: on hosts matching `domain_pattern`, click the
/// selectors in order, waiting `wait_ms_between` between clicks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRule {
    pub domain_pattern: String,
    pub selector_sequence: Vec<String>,
    #[serde(default)]
    pub wait_ms_between: u64,
}

impl ConsentRule {
    pub fn applies_to(&self, host: &str) -> bool {
        glob_match(&self.domain_pattern.to_ascii_lowercase(), &host.to_ascii_lowercase())
    }
}

/// `consent_rules.json`: either a bare list of rules or a versioned object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRuleFile {
    pub version: u32,
    pub rules: Vec<ConsentRule>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RuleFileShape {
    Versioned(ConsentRuleFile),
    Bare(Vec<ConsentRule>),
}

pub fn parse_consent_rules(text: &str, origin: &str) -> Result<ConsentRuleFile, ScriptError> {
    let invalid = |message: String| ScriptError::Invalid {
        path: origin.to_string(),
        message,
    };
    let shape: RuleFileShape = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
    let file = match shape {
        RuleFileShape::Versioned(f) => f,
        RuleFileShape::Bare(rules) => ConsentRuleFile { version: 1, rules },
    };
    for (i, rule) in file.rules.iter().enumerate() {
        if rule.selector_sequence.is_empty() {
            return Err(invalid(format!("rule {i} ({}) has no selectors", rule.domain_pattern)));
        }
        if rule.domain_pattern.is_empty() {
            return Err(invalid(format!("rule {i} has an empty domain pattern")));
        }
    }
    Ok(file)
}

pub fn load_consent_rules(path: &Path) -> Result<ConsentRuleFile, ScriptError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_consent_rules(&text, &path.display().to_string())
}

/// Rules applicable to `host`, in file order.
pub fn rules_for_host<'a>(rules: &'a [ConsentRule], host: &str) -> Vec<&'a ConsentRule> {
    rules.iter().filter(|r| r.applies_to(host)).collect()
}

/// Shell-style match where `*` spans any run of characters.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let (p, t): (Vec<char>, Vec<char>) = (pattern.chars().collect(), text.chars().collect());
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|c| *c == '*')
}

/// CSS selectors locating recommendation tiles on a homepage layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomepageSelectors {
    pub version: u32,
    pub tile: String,
    pub video_link: String,
    pub title: String,
    pub channel: String,
}

impl Default for HomepageSelectors {
    fn default() -> Self {
        Self {
            version: 1,
            tile: "ytd-rich-item-renderer".into(),
            video_link: "a#video-title-link, a#thumbnail".into(),
            title: "#video-title".into(),
            channel: "ytd-channel-name a, #channel-name a".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedVideo {
    pub video_id: String,
    pub title: String,
    pub channel: String,
    pub position: u32,
}

impl From<ExtractedVideo> for VideoRecord {
    fn from(v: ExtractedVideo) -> Self {
        VideoRecord {
            video_id: v.video_id,
            title: v.title,
            channel: v.channel,
            position: v.position,
            transcript: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub videos: Vec<ExtractedVideo>,
    #[serde(default)]
    pub skipped: u32,
    /// Set when no tile matched the selectors.
    #[serde(default)]
    pub diagnostic: Option<String>,
}

pub fn parse_consent_outcome(value: &serde_json::Value) -> ConsentOutcome {
    match value.as_str() {
        Some("accepted") => ConsentOutcome::Accepted,
        Some("none_found") => ConsentOutcome::NoneFound,
        _ => ConsentOutcome::Failed,
    }
}
