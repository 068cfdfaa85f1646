//! Browser sessions for sock puppets.
//!
//! A [`Driver`] exposes the primitive browser actions (navigate, run the
//! consent script, scroll, wait, watch, read the homepage). The scripted
//! behaviours built on top of them ([`visit_article`], [`watch_video`],
//! [`capture_homepage`]) are shared by every driver, so the simulated and
//! real drivers follow the same protocol.

pub mod scripts;
pub mod simulated;
pub mod webdriver;

use std::collections::HashSet;
use std::fmt;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::experiment::PuppetSpec;
use crate::seeding::KeyedRng;

pub use simulated::SimulatedFactory;

/// Page load budget.
pub const NAVIGATION_TIMEOUT: Duration = Duration::from_secs(30);
/// Consent script budget. A timeout yields `ConsentOutcome::Failed` and the
/// visit proceeds.
pub const CONSENT_TIMEOUT: Duration = Duration::from_secs(10);

pub const MIN_DWELL_SECONDS: f64 = 20.0;
pub const MAX_DWELL_SECONDS: f64 = 60.0;
pub const MIN_SCROLLS: u64 = 3;
pub const MAX_SCROLLS: u64 = 8;

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("driver unavailable: {0}")]
    Unavailable(String),
    #[error("visit to {url} failed: {reason}")]
    VisitFailed { url: String, reason: String },
    #[error("could not watch a {0:?} video")]
    WatchFailed(String),
    #[error("homepage capture failed: {0}")]
    CaptureFailed(String),
    #[error("invalid argument: {0}")]
    Validation(String),
    #[error("session crashed: {0}")]
    Crashed(String),
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Environment {
    /// Default third-party cookie and tracker behaviour.
    TrackingPermissive,
    /// Third-party cookies and tracker requests blocked.
    TrackingRestrictive,
}

impl Environment {
    pub const ALL: [Environment; 2] = [Environment::TrackingPermissive, Environment::TrackingRestrictive];

    pub fn as_str(self) -> &'static str {
        match self {
            Environment::TrackingPermissive => "tracking-permissive",
            Environment::TrackingRestrictive => "tracking-restrictive",
        }
    }

    pub fn tracking_allowed(self) -> bool {
        self == Environment::TrackingPermissive
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Environment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Environment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown environment {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverKind {
    Simulated,
    Real,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub puppet_id: String,
    pub environment: Environment,
    pub profile_ref: String,
    pub driver_kind: DriverKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsentOutcome {
    Accepted,
    NoneFound,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitLog {
    pub url: String,
    pub day_index: u32,
    #[serde(with = "crate::timefmt")]
    pub started_at: DateTime<Utc>,
    pub dwell_seconds: f64,
    pub consent_outcome: ConsentOutcome,
    pub scroll_events: u32,
    pub substituted_for: Option<String>,
    /// Tracker requests that left the page. Zero when unknown (real driver).
    pub trackers_fired: u32,
}

impl VisitLog {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.dwell_seconds > 0.0 && self.dwell_seconds <= MAX_DWELL_SECONDS) {
            return Err(format!("dwell {} s outside (0, 60]", self.dwell_seconds));
        }
        if self.url.is_empty() {
            return Err("visit without url".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub title: String,
    pub channel: String,
    /// 1-based homepage rank.
    pub position: u32,
    pub transcript: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotPhase {
    /// After the seed-video watch, before any exposure.
    Baseline,
    /// Optional same-day capture before exposure.
    Pre,
    /// After the day's exposure.
    Post,
}

impl SnapshotPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            SnapshotPhase::Baseline => "baseline",
            SnapshotPhase::Pre => "pre",
            SnapshotPhase::Post => "post",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationSnapshot {
    pub puppet_id: String,
    pub day_index: u32,
    pub phase: SnapshotPhase,
    #[serde(with = "crate::timefmt")]
    pub captured_at: DateTime<Utc>,
    pub videos: Vec<VideoRecord>,
}

impl RecommendationSnapshot {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.phase == SnapshotPhase::Baseline && self.day_index != 0 {
            return Err(format!("baseline snapshot with day_index {}", self.day_index));
        }
        let mut ids = HashSet::new();
        let mut last = 0u32;
        for v in &self.videos {
            if v.position <= last {
                return Err(format!(
                    "positions not strictly increasing from 1 ({} after {last})",
                    v.position
                ));
            }
            last = v.position;
            if !ids.insert(v.video_id.as_str()) {
                return Err(format!("video {} listed twice", v.video_id));
            }
        }
        Ok(())
    }
}

/// Primitive browser actions. A driver is confined to one worker.
pub trait Driver: Send {
    fn handle(&self) -> &SessionHandle;

    /// Current session time: wall clock for real browsers, virtual for the
    /// simulator.
    fn now(&self) -> DateTime<Utc>;

    fn navigate(&mut self, url: &str) -> Result<()>;

    fn accept_consent(&mut self, timeout: Duration) -> ConsentOutcome;

    /// Scroll to each document fraction in turn; returns the number of
    /// scroll events performed.
    fn scroll(&mut self, fractions: &[f64]) -> u32;

    /// Stay on the current page until `seconds` have elapsed since it loaded.
    fn dwell(&mut self, seconds: f64);

    fn trackers_fired(&self) -> u32;

    /// Play one video of `topic` to completion; returns its id.
    fn watch_video(&mut self, topic: &str) -> Result<String>;

    /// Raw homepage tiles in on-page order. May contain duplicates.
    fn homepage_tiles(&mut self) -> Result<Vec<VideoRecord>>;

    /// Flush profile state. The profile outlives the session.
    fn close(&mut self) -> Result<()>;
}

/// Creates sessions for puppets. Shared by all workers.
pub trait SessionFactory: Send + Sync {
    fn kind(&self) -> DriverKind;

    /// Open a session on the puppet's profile. `fresh` wipes the profile
    /// first. `day_index` positions the session in the experiment calendar.
    fn open(&self, puppet: &PuppetSpec, fresh: bool, day_index: u32) -> Result<Box<dyn Driver>>;
}

pub fn open_session(
    factory: &dyn SessionFactory,
    puppet: &PuppetSpec,
    fresh: bool,
    day_index: u32,
) -> Result<Box<dyn Driver>> {
    factory.open(puppet, fresh, day_index)
}

/// Randomised on-page behaviour for one visit.
#[derive(Debug, Clone, PartialEq)]
pub struct Behavior {
    pub scroll_fractions: Vec<f64>,
    pub dwell_seconds: f64,
}

impl Behavior {
    /// Scroll count uniform on [3, 8], fractions uniform on [0, 1], dwell
    /// uniform on [20, 60] seconds, all keyed by `behavior_seed`.
    pub fn from_seed(behavior_seed: u64) -> Self {
        let mut rng = KeyedRng::new("behavior", &[behavior_seed.into()]);
        let k = rng.between(MIN_SCROLLS, MAX_SCROLLS);
        let scroll_fractions = (0..k).map(|_| rng.unit()).collect();
        let dwell = rng.uniform(MIN_DWELL_SECONDS, MAX_DWELL_SECONDS);
        // Millisecond resolution keeps the stored value exact.
        let dwell_seconds = (dwell * 1000.0).round() / 1000.0;
        Self {
            scroll_fractions,
            dwell_seconds,
        }
    }
}

/// Visit one article: load it, try the consent banner, scroll, and dwell.
pub fn visit_article(session: &mut dyn Driver, url: &str, behavior_seed: u64, day_index: u32) -> Result<VisitLog> {
    let behavior = Behavior::from_seed(behavior_seed);
    let started_at = session.now();
    session.navigate(url)?;
    let consent_outcome = session.accept_consent(CONSENT_TIMEOUT);
    let scroll_events = session.scroll(&behavior.scroll_fractions);
    session.dwell(behavior.dwell_seconds);
    Ok(VisitLog {
        url: url.to_string(),
        day_index,
        started_at,
        dwell_seconds: behavior.dwell_seconds,
        consent_outcome,
        scroll_events,
        substituted_for: None,
        trackers_fired: session.trackers_fired(),
    })
}

pub fn watch_video(session: &mut dyn Driver, topic: &str) -> Result<String> {
    session.watch_video(topic)
}

/// Keep the first occurrence of each video id (its best rank) in on-page
/// order, then truncate to `top_k`.
pub fn dedupe_tiles(mut tiles: Vec<VideoRecord>, top_k: usize) -> Vec<VideoRecord> {
    tiles.sort_by_key(|v| v.position);
    let mut seen = HashSet::new();
    tiles.retain(|v| seen.insert(v.video_id.clone()));
    tiles.truncate(top_k);
    tiles
}

pub fn capture_homepage(
    session: &mut dyn Driver,
    top_k: usize,
    phase: SnapshotPhase,
    day_index: u32,
) -> Result<RecommendationSnapshot> {
    if top_k == 0 {
        return Err(SessionError::Validation("top_k must be positive".into()));
    }
    let tiles = session.homepage_tiles()?;
    if tiles.is_empty() {
        return Err(SessionError::CaptureFailed("homepage shows no recommendations".into()));
    }
    let snapshot = RecommendationSnapshot {
        puppet_id: session.handle().puppet_id.clone(),
        day_index,
        phase,
        captured_at: session.now(),
        videos: dedupe_tiles(tiles, top_k),
    };
    snapshot.validate().map_err(SessionError::CaptureFailed)?;
    Ok(snapshot)
}
