//! In-process driver over a [`MockWorld`]. Time is virtual: loading,
//! scrolling and dwelling advance a per-profile clock and never sleep.

use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};

use super::{ConsentOutcome, Driver, DriverKind, Result, SessionError, SessionFactory, SessionHandle, VideoRecord};
use crate::experiment::PuppetSpec;
use crate::mockworld::{MockWorld, WorldError};

const PAGE_LOAD_MS: i64 = 1_500;
const WATCH_MS: i64 = 180_000;
const DAY_MS: i64 = 86_400_000;

pub struct SimulatedFactory {
    world: Arc<MockWorld>,
}

impl SimulatedFactory {
    pub fn new(world: Arc<MockWorld>) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &Arc<MockWorld> {
        &self.world
    }
}

impl SessionFactory for SimulatedFactory {
    fn kind(&self) -> DriverKind {
        DriverKind::Simulated
    }

    fn open(&self, puppet: &PuppetSpec, fresh: bool, day_index: u32) -> Result<Box<dyn Driver>> {
        let world_err = |e: WorldError| SessionError::Unavailable(e.to_string());
        if fresh {
            self.world.reset_profile(&puppet.profile_ref).map_err(world_err)?;
        }
        let state = self.world.profile(&puppet.profile_ref).map_err(world_err)?;
        let day_start = self.world.config().epoch.timestamp_millis() + i64::from(day_index) * DAY_MS;
        Ok(Box::new(SimulatedDriver {
            world: Arc::clone(&self.world),
            handle: SessionHandle {
                puppet_id: puppet.puppet_id.clone(),
                environment: puppet.environment,
                profile_ref: puppet.profile_ref.clone(),
                driver_kind: DriverKind::Simulated,
            },
            seed: puppet.seed,
            clock_ms: state.clock_ms.max(day_start),
            page: None,
        }))
    }
}

struct OpenPage {
    banner: bool,
    trackers_fired: u32,
    loaded_at_ms: i64,
}

pub struct SimulatedDriver {
    world: Arc<MockWorld>,
    handle: SessionHandle,
    seed: u64,
    clock_ms: i64,
    page: Option<OpenPage>,
}

impl Driver for SimulatedDriver {
    fn handle(&self) -> &SessionHandle {
        &self.handle
    }

    fn now(&self) -> DateTime<Utc> {
        Utc.timestamp_millis_opt(self.clock_ms)
            .single()
            .expect("clock in range")
    }

    fn navigate(&mut self, url: &str) -> Result<()> {
        self.page = None;
        self.clock_ms += PAGE_LOAD_MS;
        let trackers_fired = self
            .world
            .serve_article_visit(
                &self.handle.profile_ref,
                url,
                self.handle.environment.tracking_allowed(),
            )
            .map_err(|e| SessionError::VisitFailed {
                url: url.to_string(),
                reason: e.to_string(),
            })?;
        let banner = self.world.page(url).is_some_and(|p| p.banner);
        self.page = Some(OpenPage {
            banner,
            trackers_fired,
            loaded_at_ms: self.clock_ms,
        });
        Ok(())
    }

    fn accept_consent(&mut self, _timeout: Duration) -> ConsentOutcome {
        match &self.page {
            Some(p) if p.banner => ConsentOutcome::Accepted,
            Some(_) => ConsentOutcome::NoneFound,
            None => ConsentOutcome::Failed,
        }
    }

    fn scroll(&mut self, fractions: &[f64]) -> u32 {
        fractions.len() as u32
    }

    fn dwell(&mut self, seconds: f64) {
        let loaded = self.page.as_ref().map_or(self.clock_ms, |p| p.loaded_at_ms);
        self.clock_ms = self.clock_ms.max(loaded + (seconds * 1000.0).round() as i64);
    }

    fn trackers_fired(&self) -> u32 {
        self.page.as_ref().map_or(0, |p| p.trackers_fired)
    }

    fn watch_video(&mut self, topic: &str) -> Result<String> {
        let id = self
            .world
            .watch(&self.handle.profile_ref, topic, self.seed)
            .map_err(|_| SessionError::WatchFailed(topic.to_string()))?;
        self.clock_ms += WATCH_MS;
        Ok(id)
    }

    fn homepage_tiles(&mut self) -> Result<Vec<VideoRecord>> {
        self.page = None;
        self.clock_ms += PAGE_LOAD_MS;
        let videos = self
            .world
            .recommend_homepage(&self.handle.profile_ref, self.world.config().homepage_size)
            .map_err(|e| SessionError::CaptureFailed(e.to_string()))?;
        Ok(videos
            .into_iter()
            .enumerate()
            .map(|(i, v)| VideoRecord {
                video_id: v.video_id,
                title: v.title,
                channel: v.channel,
                position: i as u32 + 1,
                transcript: Some(v.transcript),
            })
            .collect())
    }

    fn close(&mut self) -> Result<()> {
        self.world
            .set_clock(&self.handle.profile_ref, self.clock_ms)
            .map_err(|e| SessionError::Crashed(e.to_string()))
    }
}
