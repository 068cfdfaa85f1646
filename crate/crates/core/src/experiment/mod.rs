//! Experiment planning and the phase state machine.

mod run;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_pool, load_articles, load_outlets, misinformation_pool, ArticlePool, ArticleRecord, CorpusError, DateWindow,
    OutletRecord, PoolLabel,
};
use crate::mockworld::{MockWorld, WorldConfig};
use crate::seeding::derive_seed;
use crate::session::webdriver::RealDriverConfig;
use crate::session::{DriverKind, Environment, SessionError};
use crate::store::{Phase, StoreError};
use crate::timefmt;

pub use run::{run_experiment, run_exposure_phase, run_measurement_phase, run_setting_phase, PhaseContext, RunOptions};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("setting phase failed for {puppet_id}: {source}")]
    SettingFailed {
        puppet_id: String,
        #[source]
        source: SessionError,
    },
    #[error("exposure on day {day_index} failed for {puppet_id}: {reason}")]
    ExposureFailed {
        puppet_id: String,
        day_index: u32,
        reason: String,
    },
    #[error("measurement on day {day_index} failed for {puppet_id}: {source}")]
    MeasurementFailed {
        puppet_id: String,
        day_index: u32,
        #[source]
        source: SessionError,
    },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Exposure group of a puppet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    ExtremeLeft,
    Left,
    Right,
    ExtremeRight,
    Misinformation,
    /// Visits no articles.
    Control,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::ExtremeLeft,
        Group::Left,
        Group::Right,
        Group::ExtremeRight,
        Group::Misinformation,
        Group::Control,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::ExtremeLeft => "extreme-left",
            Group::Left => "left",
            Group::Right => "right",
            Group::ExtremeRight => "extreme-right",
            Group::Misinformation => "misinformation",
            Group::Control => "control",
        }
    }

    /// Pool this group reads from; `None` for control.
    pub fn pool_label(self) -> Option<PoolLabel> {
        match self {
            Group::ExtremeLeft => Some(PoolLabel::ExtremeLeft),
            Group::Left => Some(PoolLabel::Left),
            Group::Right => Some(PoolLabel::Right),
            Group::ExtremeRight => Some(PoolLabel::ExtremeRight),
            Group::Misinformation => Some(PoolLabel::Misinformation),
            Group::Control => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown group {s:?}"))
    }
}

/// Corpus files for a run. Optional in simulated mode, where the world
/// generates its own corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub outlets: PathBuf,
    pub articles: PathBuf,
    /// Defaults to `articles`.
    #[serde(default)]
    pub misinformation: Option<PathBuf>,
    pub claims: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_puppets_per_cell: usize,
    pub groups: Vec<Group>,
    pub environments: Vec<Environment>,
    pub days: u32,
    pub articles_per_day: usize,
    pub homepage_top_k: usize,
    pub master_seed: u64,
    pub driver: DriverKind,
    /// Draw a fresh exposure sample every day (otherwise day 0's sample is reused).
    pub resample_daily: bool,
    /// Capture an extra homepage snapshot before each day's exposure.
    pub capture_pre_exposure: bool,
    /// Topic of the setting-phase seed video.
    pub seed_topic: String,
    pub workers: usize,
    pub articles_per_outlet: usize,
    pub misinformation_window: DateWindow,
    /// Archive directory.
    pub archive: PathBuf,
    pub corpora: Option<CorpusPaths>,
    pub simulated: Option<WorldConfig>,
    pub real: Option<RealDriverConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_puppets_per_cell: 1,
            groups: Group::ALL.to_vec(),
            environments: Environment::ALL.to_vec(),
            days: 5,
            articles_per_day: 20,
            homepage_top_k: 30,
            master_seed: 0,
            driver: DriverKind::Simulated,
            resample_daily: true,
            capture_pre_exposure: false,
            seed_topic: crate::mockworld::SPORTS.into(),
            workers: 4,
            articles_per_outlet: 20,
            misinformation_window: DateWindow::default_articles(),
            archive: PathBuf::from("archive"),
            corpora: None,
            simulated: None,
            real: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.n_puppets_per_cell == 0 {
            return bad("n_puppets_per_cell must be at least 1".into());
        }
        if self.groups.is_empty() {
            return bad("groups must not be empty".into());
        }
        if self.environments.is_empty() {
            return bad("environments must not be empty".into());
        }
        if self.days == 0 {
            return bad("days must be at least 1".into());
        }
        if self.homepage_top_k == 0 {
            return bad("homepage_top_k must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        let mut seen = BTreeSet::new();
        if let Some(g) = self.groups.iter().find(|g| !seen.insert(**g)) {
            return bad(format!("group {g} listed twice"));
        }
        let mut seen = BTreeSet::new();
        if let Some(e) = self.environments.iter().find(|e| !seen.insert(**e)) {
            return bad(format!("environment {e} listed twice"));
        }
        if self.driver == DriverKind::Simulated {
            if let Some(w) = &self.simulated {
                w.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring the worker count.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.workers = 0;
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PuppetSpec {
    pub puppet_id: String,
    pub group: Group,
    pub environment: Environment,
    pub seed: u64,
    pub profile_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub group: Group,
    pub environment: Environment,
    pub puppets: Vec<PuppetSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub cells: Vec<Cell>,
    #[serde(with = "crate::timefmt")]
    pub created_at: DateTime<Utc>,
}

impl ExperimentPlan {
    pub fn puppets(&self) -> impl Iterator<Item = &PuppetSpec> {
        self.cells.iter().flat_map(|c| c.puppets.iter())
    }

    pub fn puppet(&self, puppet_id: &str) -> Option<&PuppetSpec> {
        self.puppets().find(|p| p.puppet_id == puppet_id)
    }

    pub fn cell(&self, group: Group, environment: Environment) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.group == group && c.environment == environment)
    }

    /// Same cells and puppets, ignoring creation time.
    pub fn same_layout(&self, other: &ExperimentPlan) -> bool {
        self.cells == other.cells
    }
}

fn env_tag(env: Environment) -> &'static str {
    match env {
        Environment::TrackingPermissive => "perm",
        Environment::TrackingRestrictive => "restr",
    }
}

/// Assign puppets to every (group, environment) cell with seeds derived
/// from the master seed.
pub fn plan_experiment(config: &ExperimentConfig) -> Result<ExperimentPlan> {
    config.validate()?;
    let mut cells = Vec::with_capacity(config.groups.len() * config.environments.len());
    for &group in &config.groups {
        for &environment in &config.environments {
            let puppets = (0..config.n_puppets_per_cell)
                .map(|k| {
                    let puppet_id = format!("{group}-{}-{k:03}", env_tag(environment));
                    let seed = derive_seed("puppet", &[config.master_seed.into(), puppet_id.as_str().into()]);
                    PuppetSpec {
                        profile_ref: format!("profile-{puppet_id}"),
                        puppet_id,
                        group,
                        environment,
                        seed,
                    }
                })
                .collect();
            cells.push(Cell {
                group,
                environment,
                puppets,
            });
        }
    }
    Ok(ExperimentPlan {
        cells,
        created_at: timefmt::now_ms(),
    })
}

/// Article pools per exposure group.
#[derive(Debug, Clone, Default)]
pub struct Corpora {
    pub pools: BTreeMap<Group, ArticlePool>,
}

impl Corpora {
    pub fn pool(&self, group: Group) -> Option<&ArticlePool> {
        self.pools.get(&group)
    }

    /// Pools for every non-control group in `config`. Ideology pools take
    /// `articles_per_outlet` articles from each outlet with that label; the
    /// misinformation pool is filtered to the configured date window.
    pub fn build(
        config: &ExperimentConfig,
        outlets: &[OutletRecord],
        articles: &[ArticleRecord],
        misinformation: &[ArticleRecord],
    ) -> Result<Self> {
        let mut pools = BTreeMap::new();
        for &group in &config.groups {
            let pool = match group.pool_label() {
                None => continue,
                Some(PoolLabel::Misinformation) => {
                    misinformation_pool(misinformation.to_vec(), config.misinformation_window)?
                }
                Some(label) => {
                    let ideology = label.ideology().expect("ideology pool");
                    let mine: Vec<OutletRecord> =
                        outlets.iter().filter(|o| o.bias_label == ideology).cloned().collect();
                    if mine.is_empty() {
                        return Err(CorpusError::EmptyPool(label.to_string()).into());
                    }
                    let ids: BTreeSet<&str> = mine.iter().map(|o| o.outlet_id.as_str()).collect();
                    let theirs: Vec<ArticleRecord> = articles
                        .iter()
                        .filter(|a| a.outlet_id.as_deref().is_some_and(|id| ids.contains(id)))
                        .cloned()
                        .collect();
                    build_pool(&mine, &theirs, config.articles_per_outlet)?
                }
            };
            pools.insert(group, pool);
        }
        Ok(Self { pools })
    }

    /// Load the files named in `paths` and build the pools.
    pub fn load(config: &ExperimentConfig, paths: &CorpusPaths) -> Result<Self> {
        let outlets = load_outlets(&paths.outlets, None)?;
        let articles = load_articles(&paths.articles)?;
        let misinformation = match &paths.misinformation {
            Some(p) => load_articles(p)?,
            None => articles.clone(),
        };
        Self::build(config, &outlets, &articles, &misinformation)
    }
}

/// Build the mock world for a simulated run together with its pools.
///
/// Without corpus paths the world's generated corpora are used; otherwise
/// the files are loaded and their articles served by the world. Profiles
/// persist under `state_dir` when given.
pub fn simulated_setup(config: &ExperimentConfig, state_dir: Option<&Path>) -> Result<(MockWorld, Corpora)> {
    let world_config = config.simulated.clone().unwrap_or_else(|| WorldConfig {
        seed: config.master_seed,
        ..WorldConfig::default()
    });
    let world_err = |e: crate::mockworld::WorldError| ExperimentError::Config(e.to_string());
    let mut world = MockWorld::new(world_config).map_err(world_err)?;
    let corpora = match &config.corpora {
        Some(paths) => {
            let corpora = Corpora::load(config, paths)?;
            for pool in corpora.pools.values() {
                world.register_pool(pool);
            }
            corpora
        }
        None => {
            let generated = world.corpus();
            Corpora::build(config, &generated.outlets, &generated.articles, &generated.articles)?
        }
    };
    if let Some(dir) = state_dir {
        world = world.with_state_dir(dir).map_err(world_err)?;
    }
    Ok((world, corpora))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub puppet_id: String,
    pub day_index: u32,
    pub phase: Phase,
}

impl Triple {
    pub fn new(puppet_id: &str, day_index: u32, phase: Phase) -> Self {
        Self {
            puppet_id: puppet_id.to_string(),
            day_index,
            phase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

pub const RUNSTATE_FORMAT: u32 = 1;

/// Checkpoint persisted as `runstate.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub format_version: u32,
    pub plan: ExperimentPlan,
    pub completed: BTreeSet<Triple>,
    /// Puppets that failed, with the reason.
    pub failed: BTreeMap<String, String>,
    pub status: RunStatus,
    #[serde(with = "crate::timefmt")]
    pub started_at: DateTime<Utc>,
}

impl RunState {
    pub fn new(plan: ExperimentPlan) -> Self {
        Self {
            format_version: RUNSTATE_FORMAT,
            plan,
            completed: BTreeSet::new(),
            failed: BTreeMap::new(),
            status: RunStatus::Pending,
            started_at: timefmt::now_ms(),
        }
    }

    pub fn is_done(&self, puppet_id: &str, day_index: u32, phase: Phase) -> bool {
        self.completed.contains(&Triple::new(puppet_id, day_index, phase))
    }

    /// Ordering violations among the completed triples.
    pub fn inconsistencies(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.completed {
            if t.phase != Phase::Setting && !self.is_done(&t.puppet_id, 0, Phase::Setting) {
                out.push(format!(
                    "{} day {} {:?} without setting phase",
                    t.puppet_id, t.day_index, t.phase
                ));
            }
            if t.phase == Phase::Measurement && !self.is_done(&t.puppet_id, t.day_index, Phase::Exposure) {
                out.push(format!(
                    "{} day {} measurement without exposure",
                    t.puppet_id, t.day_index
                ));
            }
        }
        out
    }
}
