//! Setting, exposure and measurement phases and the resumable driver loop.

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::time::Duration;

use log::{info, warn};
use rayon::prelude::*;

use super::{
    plan_experiment, Corpora, ExperimentConfig, ExperimentError, Group, PuppetSpec, Result, RunState, RunStatus, Triple,
};
use crate::corpus::{exposure_order, ArticlePool};
use crate::seeding::derive_seed;
use crate::session::{
    capture_homepage, open_session, visit_article, watch_video, Driver, RecommendationSnapshot, SessionError,
    SessionFactory, SnapshotPhase, VisitLog,
};
use crate::store::{MarkerOutcome, Phase, PhaseMarker, Record, RunArchive, StoreError, PLAN, RUNSTATE};

/// Per-run settings shared by the phase functions.
#[derive(Debug, Clone)]
pub struct PhaseContext {
    pub days: u32,
    pub articles_per_day: usize,
    pub homepage_top_k: usize,
    pub seed_topic: String,
    pub resample_daily: bool,
    pub capture_pre_exposure: bool,
}

impl From<&ExperimentConfig> for PhaseContext {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            days: c.days,
            articles_per_day: c.articles_per_day,
            homepage_top_k: c.homepage_top_k,
            seed_topic: c.seed_topic.clone(),
            resample_daily: c.resample_daily,
            capture_pre_exposure: c.capture_pre_exposure,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; defaults to the config value.
    pub workers: Option<usize>,
    /// Stop after this day's measurements, as if the process were killed.
    pub halt_after_day: Option<u32>,
    /// Wall-clock spacing between day starts (real driver only).
    pub inter_day_gap: Option<Duration>,
}

fn completed_for(archive: &RunArchive, puppet_id: &str) -> Result<BTreeSet<(u32, Phase)>> {
    let scan = archive.scan_puppet(puppet_id)?;
    Ok(scan
        .markers()
        .filter(|(_, m)| m.outcome == MarkerOutcome::Completed)
        .map(|(_, m)| (m.day_index, m.phase))
        .collect())
}

fn mark(
    archive: &RunArchive,
    driver: Option<&dyn Driver>,
    puppet_id: &str,
    day: u32,
    phase: Phase,
    commits: Vec<u64>,
) -> Result<()> {
    let at = driver.map_or_else(crate::timefmt::now_ms, |d| d.now());
    archive.append(
        puppet_id,
        &Record::Marker(PhaseMarker {
            day_index: day,
            phase,
            outcome: MarkerOutcome::Completed,
            commits,
            at,
            note: None,
        }),
    )?;
    Ok(())
}

/// Fresh profile, one seed-video watch, baseline homepage capture.
pub fn run_setting_phase(
    puppet: &PuppetSpec,
    factory: &dyn SessionFactory,
    archive: &RunArchive,
    ctx: &PhaseContext,
) -> Result<RecommendationSnapshot> {
    if !completed_for(archive, &puppet.puppet_id)?.is_empty() {
        return Err(ExperimentError::Precondition(format!(
            "{} already has completed phases",
            puppet.puppet_id
        )));
    }
    let failed = |source| ExperimentError::SettingFailed {
        puppet_id: puppet.puppet_id.clone(),
        source,
    };
    let mut session = open_session(factory, puppet, true, 0).map_err(failed)?;
    let snapshot = (|| {
        watch_video(session.as_mut(), &ctx.seed_topic)?;
        capture_homepage(session.as_mut(), ctx.homepage_top_k, SnapshotPhase::Baseline, 0)
    })()
    .map_err(failed)?;
    let seq = archive.append(&puppet.puppet_id, &Record::Snapshot(snapshot.clone()))?;
    session.close().map_err(failed)?;
    mark(
        archive,
        Some(session.as_ref()),
        &puppet.puppet_id,
        0,
        Phase::Setting,
        vec![seq],
    )?;
    Ok(snapshot)
}

fn behavior_seed(puppet: &PuppetSpec, day: u32, slot: usize, attempt: u32) -> u64 {
    derive_seed(
        "visit",
        &[puppet.seed.into(), day.into(), (slot as u64).into(), attempt.into()],
    )
}

/// Visit the day's sampled articles in order. Control puppets record an
/// empty exposure without opening a session.
pub fn run_exposure_phase(
    puppet: &PuppetSpec,
    day_index: u32,
    pool: Option<&ArticlePool>,
    factory: &dyn SessionFactory,
    archive: &RunArchive,
    ctx: &PhaseContext,
) -> Result<Vec<VisitLog>> {
    let done = completed_for(archive, &puppet.puppet_id)?;
    if !done.contains(&(0, Phase::Setting)) {
        return Err(ExperimentError::Precondition(format!(
            "{}: exposure before setting phase",
            puppet.puppet_id
        )));
    }
    if day_index >= ctx.days {
        return Err(ExperimentError::Precondition(format!(
            "day {day_index} outside a {}-day experiment",
            ctx.days
        )));
    }
    let failed = |reason: String| ExperimentError::ExposureFailed {
        puppet_id: puppet.puppet_id.clone(),
        day_index,
        reason,
    };

    if puppet.group == Group::Control && !ctx.capture_pre_exposure {
        mark(archive, None, &puppet.puppet_id, day_index, Phase::Exposure, Vec::new())?;
        return Ok(Vec::new());
    }

    let mut session = open_session(factory, puppet, false, day_index).map_err(|e| failed(e.to_string()))?;
    let mut commits = Vec::new();
    if ctx.capture_pre_exposure {
        let pre = capture_homepage(session.as_mut(), ctx.homepage_top_k, SnapshotPhase::Pre, day_index)
            .map_err(|e| failed(e.to_string()))?;
        commits.push(archive.append(&puppet.puppet_id, &Record::Snapshot(pre))?);
    }

    let mut logs = Vec::new();
    if puppet.group != Group::Control {
        let pool = pool.ok_or_else(|| failed(format!("no article pool for group {}", puppet.group)))?;
        if ctx.articles_per_day > pool.len() {
            return Err(failed(format!(
                "cannot sample {} articles from a pool of {}",
                ctx.articles_per_day,
                pool.len()
            )));
        }
        let key_day = if ctx.resample_daily { day_index } else { 0 };
        let mut order = exposure_order(pool, puppet.seed, &puppet.puppet_id, key_day);
        let planned: Vec<_> = order.by_ref().take(ctx.articles_per_day).collect();

        for (slot, article) in planned.into_iter().enumerate() {
            let mut target = article;
            let mut attempt = 0u32;
            let mut retried = false;
            let log = loop {
                match visit_article(
                    session.as_mut(),
                    &target.url,
                    behavior_seed(puppet, day_index, slot, attempt),
                    day_index,
                ) {
                    Ok(mut log) => {
                        if target.url != article.url {
                            log.substituted_for = Some(article.url.clone());
                        }
                        break log;
                    }
                    Err(SessionError::VisitFailed { url, reason }) => {
                        attempt += 1;
                        if !retried {
                            retried = true;
                            continue;
                        }
                        warn!("{}: {url} failed twice ({reason}); substituting", puppet.puppet_id);
                        target = order
                            .next()
                            .ok_or_else(|| failed("article pool exhausted while substituting".into()))?;
                        retried = false;
                    }
                    Err(other) => return Err(failed(other.to_string())),
                }
            };
            commits.push(archive.append(&puppet.puppet_id, &Record::Visit(log.clone()))?);
            logs.push(log);
        }
    }
    session.close().map_err(|e| failed(e.to_string()))?;
    mark(
        archive,
        Some(session.as_ref()),
        &puppet.puppet_id,
        day_index,
        Phase::Exposure,
        commits,
    )?;
    Ok(logs)
}

/// Return to the homepage and capture the day's post-exposure snapshot.
pub fn run_measurement_phase(
    puppet: &PuppetSpec,
    day_index: u32,
    factory: &dyn SessionFactory,
    archive: &RunArchive,
    ctx: &PhaseContext,
) -> Result<RecommendationSnapshot> {
    if day_index >= ctx.days {
        return Err(ExperimentError::Precondition(format!(
            "day {day_index} outside a {}-day experiment",
            ctx.days
        )));
    }
    if !completed_for(archive, &puppet.puppet_id)?.contains(&(day_index, Phase::Exposure)) {
        return Err(ExperimentError::Precondition(format!(
            "{}: measurement on day {day_index} before exposure",
            puppet.puppet_id
        )));
    }
    let failed = |source| ExperimentError::MeasurementFailed {
        puppet_id: puppet.puppet_id.clone(),
        day_index,
        source,
    };
    let mut session = open_session(factory, puppet, false, day_index).map_err(failed)?;
    let snapshot =
        capture_homepage(session.as_mut(), ctx.homepage_top_k, SnapshotPhase::Post, day_index).map_err(failed)?;
    let seq = archive.append(&puppet.puppet_id, &Record::Snapshot(snapshot.clone()))?;
    session.close().map_err(failed)?;
    mark(
        archive,
        Some(session.as_ref()),
        &puppet.puppet_id,
        day_index,
        Phase::Measurement,
        vec![seq],
    )?;
    Ok(snapshot)
}

struct Shared<'a> {
    archive: &'a RunArchive,
    state: Mutex<RunState>,
}

impl Shared<'_> {
    fn checkpoint(&self) -> std::result::Result<(), StoreError> {
        let state = self.state.lock().expect("run state poisoned");
        self.archive.write_json(RUNSTATE, &*state)
    }

    fn complete(&self, puppet_id: &str, day: u32, phase: Phase) -> std::result::Result<(), StoreError> {
        let mut state = self.state.lock().expect("run state poisoned");
        state.completed.insert(Triple::new(puppet_id, day, phase));
        self.archive.write_json(RUNSTATE, &*state)
    }

    fn fail(&self, puppet_id: &str, reason: String) -> std::result::Result<(), StoreError> {
        warn!("puppet {puppet_id} failed: {reason}");
        let mut state = self.state.lock().expect("run state poisoned");
        state.failed.insert(puppet_id.to_string(), reason);
        self.archive.write_json(RUNSTATE, &*state)
    }

    fn is_done(&self, puppet_id: &str, day: u32, phase: Phase) -> bool {
        self.state
            .lock()
            .expect("run state poisoned")
            .is_done(puppet_id, day, phase)
    }

    fn active(&self) -> Vec<PuppetSpec> {
        let state = self.state.lock().expect("run state poisoned");
        state
            .plan
            .puppets()
            .filter(|p| !state.failed.contains_key(&p.puppet_id))
            .cloned()
            .collect()
    }
}

/// Outcome of one unit of puppet work: store errors abort the run, any other
/// error only retires the puppet.
fn settle(shared: &Shared<'_>, puppet: &PuppetSpec, result: Result<()>) -> std::result::Result<(), StoreError> {
    match result {
        Ok(()) => Ok(()),
        Err(ExperimentError::Store(e)) => Err(e),
        Err(other) => shared.fail(&puppet.puppet_id, other.to_string()),
    }
}

/// Run (or resume) a full experiment. Completed (puppet, day, phase)
/// triples are read back from the archive and never repeated.
pub fn run_experiment(
    config: &ExperimentConfig,
    corpora: &Corpora,
    archive: &RunArchive,
    factory: &dyn SessionFactory,
    options: &RunOptions,
) -> Result<RunState> {
    config.validate()?;
    for g in &config.groups {
        if *g != Group::Control && corpora.pool(*g).is_none() {
            return Err(ExperimentError::Config(format!("no article pool loaded for group {g}")));
        }
    }
    let ctx = PhaseContext::from(config);
    let plan = plan_experiment(config)?;
    let mut state = match archive.read_json::<RunState>(RUNSTATE)? {
        Some(prev) => {
            if !prev.plan.same_layout(&plan) {
                return Err(ExperimentError::Config(
                    "archive plan differs from the configured plan".into(),
                ));
            }
            prev
        }
        None => RunState::new(plan.clone()),
    };
    if archive.read_plan()?.is_none() {
        archive.write_json(PLAN, &state.plan)?;
    }
    // Markers are the source of truth; the checkpoint may lag one phase.
    for (puppet_id, marker) in archive.scan()?.markers() {
        if marker.outcome == MarkerOutcome::Completed {
            state
                .completed
                .insert(Triple::new(puppet_id, marker.day_index, marker.phase));
        }
    }
    state.status = RunStatus::Running;

    let workers = options.workers.unwrap_or(config.workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))?;
    let shared = Shared {
        archive,
        state: Mutex::new(state),
    };

    let outcome = pool.install(|| -> std::result::Result<bool, StoreError> {
        shared.checkpoint()?;
        shared
            .active()
            .par_iter()
            .filter(|p| !shared.is_done(&p.puppet_id, 0, Phase::Setting))
            .map(|p| {
                let r = run_setting_phase(p, factory, archive, &ctx)
                    .map(|_| ())
                    .and_then(|_| shared.complete(&p.puppet_id, 0, Phase::Setting).map_err(Into::into));
                settle(&shared, p, r)
            })
            .collect::<std::result::Result<(), _>>()?;

        for day in 0..config.days {
            if options.halt_after_day.is_some_and(|h| day > h) {
                info!("halting before day {day}");
                return Ok(false);
            }
            if let Some(gap) = options.inter_day_gap.filter(|_| day > 0) {
                let started = shared.state.lock().expect("run state poisoned").started_at;
                let due = started + chrono::Duration::from_std(gap * day).unwrap_or_default();
                if let Ok(wait) = (due - crate::timefmt::now_ms()).to_std() {
                    info!("waiting {wait:?} for day {day}");
                    std::thread::sleep(wait);
                }
            }
            shared
                .active()
                .par_iter()
                .map(|p| {
                    let r = (|| -> Result<()> {
                        if !shared.is_done(&p.puppet_id, day, Phase::Exposure) {
                            run_exposure_phase(p, day, corpora.pool(p.group), factory, archive, &ctx)?;
                            shared.complete(&p.puppet_id, day, Phase::Exposure)?;
                        }
                        if !shared.is_done(&p.puppet_id, day, Phase::Measurement) {
                            run_measurement_phase(p, day, factory, archive, &ctx)?;
                            shared.complete(&p.puppet_id, day, Phase::Measurement)?;
                        }
                        Ok(())
                    })();
                    settle(&shared, p, r)
                })
                .collect::<std::result::Result<(), _>>()?;
            info!("day {day} complete");
        }
        Ok(true)
    });

    let mut state = shared.state.into_inner().expect("run state poisoned");
    match outcome {
        Ok(finished) => {
            if finished {
                state.status = RunStatus::Done;
            }
            archive.write_json(RUNSTATE, &state)?;
            Ok(state)
        }
        Err(e) => {
            state.status = RunStatus::Failed;
            if let Err(again) = archive.write_json(RUNSTATE, &state) {
                warn!("could not record failed status: {again}");
            }
            Err(e.into())
        }
    }
}
