//! Real-browser adapter speaking the W3C WebDriver protocol.
//!
//! Request construction is plain data and always compiled; the HTTP
//! transport needs the `webdriver` cargo feature. Each environment points
//! at its own WebDriver endpoint (for example chromedriver for the
//! tracking-permissive browser and a Brave-backed driver with shields up for
//! the tracking-restrictive one).
//!
//! Endpoint overrides: `AUDIT_WEBDRIVER_URL` applies to both environments,
//! `AUDIT_WEBDRIVER_URL_PERMISSIVE` and `AUDIT_WEBDRIVER_URL_RESTRICTIVE`
//! take precedence for one environment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::scripts::HomepageSelectors;
use super::{Environment, CONSENT_TIMEOUT, NAVIGATION_TIMEOUT};

pub const ENV_ENDPOINT: &str = "AUDIT_WEBDRIVER_URL";
pub const ENV_ENDPOINT_PERMISSIVE: &str = "AUDIT_WEBDRIVER_URL_PERMISSIVE";
pub const ENV_ENDPOINT_RESTRICTIVE: &str = "AUDIT_WEBDRIVER_URL_RESTRICTIVE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrowserSettings {
    pub endpoint: String,
    pub browser_name: String,
    /// Browser executable, e.g. the Brave binary for the restrictive side.
    pub binary: Option<String>,
    pub args: Vec<String>,
}

impl Default for BrowserSettings {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:9515".into(),
            browser_name: "chrome".into(),
            binary: None,
            args: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealDriverConfig {
    pub browsers: BTreeMap<Environment, BrowserSettings>,
    /// One user-data directory per puppet profile lives here.
    pub profiles_dir: PathBuf,
    pub scripts_dir: PathBuf,
    pub consent_rules: PathBuf,
    pub selectors: HomepageSelectors,
    /// Seed-video URLs by topic; the puppet seed picks one.
    pub seed_videos: BTreeMap<String, Vec<String>>,
    pub watch_seconds: u64,
    pub homepage_url: String,
    /// Wall-clock wait between experiment days.
    pub inter_day_gap_secs: u64,
}

impl Default for RealDriverConfig {
    fn default() -> Self {
        let restrictive = BrowserSettings {
            endpoint: "http://127.0.0.1:9516".into(),
            ..Default::default()
        };
        Self {
            browsers: [
                (Environment::TrackingPermissive, BrowserSettings::default()),
                (Environment::TrackingRestrictive, restrictive),
            ]
            .into_iter()
            .collect(),
            profiles_dir: PathBuf::from("profiles"),
            scripts_dir: PathBuf::from("page_scripts"),
            consent_rules: PathBuf::from("page_scripts/consent_rules.json"),
            selectors: HomepageSelectors::default(),
            seed_videos: BTreeMap::new(),
            watch_seconds: 60,
            homepage_url: "https://www.youtube.com/".into(),
            inter_day_gap_secs: 86_400,
        }
    }
}

impl RealDriverConfig {
    /// Endpoint for `env` after applying environment-variable overrides.
    pub fn endpoint(&self, env: Environment, vars: impl Fn(&str) -> Option<String>) -> Option<String> {
        let specific = match env {
            Environment::TrackingPermissive => ENV_ENDPOINT_PERMISSIVE,
            Environment::TrackingRestrictive => ENV_ENDPOINT_RESTRICTIVE,
        };
        vars(specific)
            .or_else(|| vars(ENV_ENDPOINT))
            .or_else(|| self.browsers.get(&env).map(|b| b.endpoint.clone()))
    }

    pub fn profile_dir(&self, profile_ref: &str) -> PathBuf {
        self.profiles_dir.join(profile_ref)
    }
}

/// One WebDriver HTTP request.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub method: &'static str,
    pub path: String,
    pub body: Option<Value>,
}

pub fn new_session(browser: &BrowserSettings, profile_dir: &Path) -> Command {
    let mut args = vec![format!("--user-data-dir={}", profile_dir.display())];
    args.extend(browser.args.iter().cloned());
    let mut options = json!({ "args": args });
    if let Some(binary) = &browser.binary {
        options["binary"] = json!(binary);
    }
    Command {
        method: "POST",
        path: "/session".into(),
        body: Some(json!({
            "capabilities": {
                "alwaysMatch": {
                    "browserName": browser.browser_name,
                    "goog:chromeOptions": options,
                }
            }
        })),
    }
}

pub fn set_timeouts(session_id: &str) -> Command {
    Command {
        method: "POST",
        path: format!("/session/{session_id}/timeouts"),
        body: Some(json!({
            "pageLoad": NAVIGATION_TIMEOUT.as_millis() as u64,
            "script": CONSENT_TIMEOUT.as_millis() as u64,
        })),
    }
}

pub fn navigate(session_id: &str, url: &str) -> Command {
    Command {
        method: "POST",
        path: format!("/session/{session_id}/url"),
        body: Some(json!({ "url": url })),
    }
}

pub fn delete_session(session_id: &str) -> Command {
    Command {
        method: "DELETE",
        path: format!("/session/{session_id}"),
        body: None,
    }
}

/// Wrap a script file so WebDriver's async execute calls `function` with
/// the supplied arguments and resolves with its (possibly async) result.
pub fn wrap_script(source: &str, function: &str) -> String {
    format!(
        "{source}\n\
         const __done = arguments[arguments.length - 1];\n\
         const __args = Array.prototype.slice.call(arguments, 0, arguments.length - 1);\n\
         Promise.resolve().then(() => {function}(...__args))\n\
         .then(__done, (e) => __done({{ \"__error\": String(e) }}));"
    )
}

pub fn execute_async(session_id: &str, script: String, args: Vec<Value>) -> Command {
    Command {
        method: "POST",
        path: format!("/session/{session_id}/execute/async"),
        body: Some(json!({ "script": script, "args": args })),
    }
}

/// Extract the `v=` parameter from a watch URL, falling back to the URL.
pub fn video_id_from_url(url: &str) -> String {
    url.split(['?', '&'])
        .find_map(|kv| kv.strip_prefix("v="))
        .map(|v| v.split('#').next().unwrap_or(v).to_string())
        .unwrap_or_else(|| url.to_string())
}

pub use transport::RealFactory;

#[cfg(feature = "webdriver")]
mod transport {
    use std::fs;
    use std::sync::Arc;
    use std::thread;
    use std::time::{Duration, Instant};

    use chrono::{DateTime, Utc};
    use serde_json::{json, Value};

    use super::*;
    use crate::experiment::PuppetSpec;
    use crate::session::scripts::{self, ConsentRule, ExtractionResult};
    use crate::session::{
        ConsentOutcome, Driver, DriverKind, Result, SessionError, SessionFactory, SessionHandle, VideoRecord,
    };
    use crate::timefmt;

    /// Supplies transcripts for captured videos. The default returns none and
    /// scoring falls back to titles.
    pub trait TranscriptProvider: Send + Sync {
        fn transcript(&self, video_id: &str) -> Option<String>;
    }

    struct NoTranscripts;

    impl TranscriptProvider for NoTranscripts {
        fn transcript(&self, _: &str) -> Option<String> {
            None
        }
    }

    pub struct RealFactory {
        config: RealDriverConfig,
        rules: Arc<Vec<ConsentRule>>,
        transcripts: Arc<dyn TranscriptProvider>,
    }

    impl RealFactory {
        pub fn new(config: RealDriverConfig) -> Result<Self> {
            let rules = scripts::load_consent_rules(&config.consent_rules)
                .map_err(|e| SessionError::Unavailable(e.to_string()))?
                .rules;
            Ok(Self {
                config,
                rules: Arc::new(rules),
                transcripts: Arc::new(NoTranscripts),
            })
        }

        pub fn with_transcripts(mut self, provider: Arc<dyn TranscriptProvider>) -> Self {
            self.transcripts = provider;
            self
        }

        fn script(&self, file: &str, function: &str) -> Result<String> {
            let path = self.config.scripts_dir.join(file);
            let source =
                fs::read_to_string(&path).map_err(|e| SessionError::Unavailable(format!("{}: {e}", path.display())))?;
            Ok(wrap_script(&source, function))
        }
    }

    impl SessionFactory for RealFactory {
        fn kind(&self) -> DriverKind {
            DriverKind::Real
        }

        fn open(&self, puppet: &PuppetSpec, fresh: bool, _day_index: u32) -> Result<Box<dyn Driver>> {
            let env = puppet.environment;
            let endpoint = self
                .config
                .endpoint(env, |k| std::env::var(k).ok())
                .ok_or_else(|| SessionError::Unavailable(format!("no endpoint for {env}")))?;
            let browser = self.config.browsers.get(&env).cloned().unwrap_or_default();
            let profile_dir = self.config.profile_dir(&puppet.profile_ref);
            if fresh && profile_dir.exists() {
                fs::remove_dir_all(&profile_dir).map_err(|e| SessionError::Unavailable(e.to_string()))?;
            }
            fs::create_dir_all(&profile_dir).map_err(|e| SessionError::Unavailable(e.to_string()))?;

            let client = Client { endpoint };
            let created = client.send(&new_session(&browser, &profile_dir))?;
            let session_id = created["sessionId"]
                .as_str()
                .ok_or_else(|| SessionError::Unavailable("no sessionId in response".into()))?
                .to_string();
            client.send(&set_timeouts(&session_id))?;
            Ok(Box::new(RealDriver {
                client,
                session_id,
                handle: SessionHandle {
                    puppet_id: puppet.puppet_id.clone(),
                    environment: env,
                    profile_ref: puppet.profile_ref.clone(),
                    driver_kind: DriverKind::Real,
                },
                seed: puppet.seed,
                consent_script: self.script(scripts::CONSENT_SCRIPT, "acceptConsent")?,
                scroll_script: self.script(scripts::SCROLL_SCRIPT, "randomScroll")?,
                extract_script: self.script(scripts::EXTRACT_SCRIPT, "extractHomepage")?,
                rules: Arc::clone(&self.rules),
                transcripts: Arc::clone(&self.transcripts),
                config: self.config.clone(),
                host: None,
                loaded_at: None,
            }))
        }
    }

    struct Client {
        endpoint: String,
    }

    impl Client {
        fn send(&self, cmd: &Command) -> Result<Value> {
            let url = format!("{}{}", self.endpoint.trim_end_matches('/'), cmd.path);
            let response = match (cmd.method, &cmd.body) {
                ("DELETE", _) => ureq::delete(&url).call(),
                (_, Some(body)) => ureq::post(&url).send_json(body),
                (_, None) => ureq::post(&url).send_empty(),
            };
            let mut response = response.map_err(|e| SessionError::Crashed(format!("{url}: {e}")))?;
            let body: Value = response
                .body_mut()
                .read_json()
                .map_err(|e| SessionError::Crashed(format!("{url}: {e}")))?;
            let value = body.get("value").cloned().unwrap_or(Value::Null);
            if let Some(err) = value.get("error").and_then(Value::as_str) {
                return Err(SessionError::Crashed(format!("{err}: {}", value["message"])));
            }
            Ok(value)
        }
    }

    struct RealDriver {
        client: Client,
        session_id: String,
        handle: SessionHandle,
        seed: u64,
        consent_script: String,
        scroll_script: String,
        extract_script: String,
        rules: Arc<Vec<ConsentRule>>,
        transcripts: Arc<dyn TranscriptProvider>,
        config: RealDriverConfig,
        host: Option<String>,
        loaded_at: Option<Instant>,
    }

    fn host_of(url: &str) -> String {
        url.split("://")
            .nth(1)
            .and_then(|r| r.split(['/', '?', '#']).next())
            .unwrap_or("")
            .to_string()
    }

    impl Driver for RealDriver {
        fn handle(&self) -> &SessionHandle {
            &self.handle
        }

        fn now(&self) -> DateTime<Utc> {
            timefmt::now_ms()
        }

        fn navigate(&mut self, url: &str) -> Result<()> {
            self.client
                .send(&navigate(&self.session_id, url))
                .map_err(|e| SessionError::VisitFailed {
                    url: url.to_string(),
                    reason: e.to_string(),
                })?;
            self.host = Some(host_of(url));
            self.loaded_at = Some(Instant::now());
            Ok(())
        }

        fn accept_consent(&mut self, timeout: Duration) -> ConsentOutcome {
            let host = self.host.clone().unwrap_or_default();
            let rules: Vec<&ConsentRule> = scripts::rules_for_host(&self.rules, &host);
            let cmd = execute_async(
                &self.session_id,
                self.consent_script.clone(),
                vec![json!(rules), json!(timeout.as_millis() as u64)],
            );
            match self.client.send(&cmd) {
                Ok(v) => scripts::parse_consent_outcome(&v),
                Err(_) => ConsentOutcome::Failed,
            }
        }

        fn scroll(&mut self, fractions: &[f64]) -> u32 {
            let cmd = execute_async(
                &self.session_id,
                self.scroll_script.clone(),
                vec![json!(fractions.len()), json!(fractions)],
            );
            self.client
                .send(&cmd)
                .ok()
                .and_then(|v| v.as_u64())
                .map_or(0, |n| n as u32)
        }

        fn dwell(&mut self, seconds: f64) {
            let target = Duration::from_secs_f64(seconds);
            let elapsed = self.loaded_at.map_or(Duration::ZERO, |t| t.elapsed());
            if let Some(rest) = target.checked_sub(elapsed) {
                thread::sleep(rest);
            }
        }

        fn trackers_fired(&self) -> u32 {
            0
        }

        fn watch_video(&mut self, topic: &str) -> Result<String> {
            let urls = self
                .config
                .seed_videos
                .get(topic)
                .filter(|u| !u.is_empty())
                .ok_or_else(|| SessionError::WatchFailed(topic.to_string()))?;
            let url = urls[(self.seed % urls.len() as u64) as usize].clone();
            self.client
                .send(&navigate(&self.session_id, &url))
                .map_err(|_| SessionError::WatchFailed(topic.to_string()))?;
            thread::sleep(Duration::from_secs(self.config.watch_seconds));
            Ok(video_id_from_url(&url))
        }

        fn homepage_tiles(&mut self) -> Result<Vec<VideoRecord>> {
            let home = self.config.homepage_url.clone();
            self.client
                .send(&navigate(&self.session_id, &home))
                .map_err(|e| SessionError::CaptureFailed(e.to_string()))?;
            let cmd = execute_async(
                &self.session_id,
                self.extract_script.clone(),
                vec![json!(self.config.selectors), json!(200)],
            );
            let value = self
                .client
                .send(&cmd)
                .map_err(|e| SessionError::CaptureFailed(e.to_string()))?;
            let result: ExtractionResult =
                serde_json::from_value(value).map_err(|e| SessionError::CaptureFailed(e.to_string()))?;
            if result.skipped > 0 {
                log::warn!(
                    "{}: {} homepage tiles without video id",
                    self.handle.puppet_id,
                    result.skipped
                );
            }
            Ok(result
                .videos
                .into_iter()
                .map(|v| {
                    let mut rec: VideoRecord = v.into();
                    rec.transcript = self.transcripts.transcript(&rec.video_id);
                    rec
                })
                .collect())
        }

        fn close(&mut self) -> Result<()> {
            self.client.send(&delete_session(&self.session_id)).map(|_| ())
        }
    }
}

#[cfg(not(feature = "webdriver"))]
mod transport {
    use super::RealDriverConfig;
    use crate::experiment::PuppetSpec;
    use crate::session::{Driver, DriverKind, Result, SessionError, SessionFactory};

    /// Placeholder used when the crate is built without the `webdriver`
    /// feature: every session fails to open.
    pub struct RealFactory {
        _config: RealDriverConfig,
    }

    impl RealFactory {
        pub fn new(config: RealDriverConfig) -> Result<Self> {
            Ok(Self { _config: config })
        }
    }

    impl SessionFactory for RealFactory {
        fn kind(&self) -> DriverKind {
            DriverKind::Real
        }

        fn open(&self, _: &PuppetSpec, _: bool, _: u32) -> Result<Box<dyn Driver>> {
            Err(SessionError::Unavailable(
                "real driver requires building with the `webdriver` feature".into(),
            ))
        }
    }
}
