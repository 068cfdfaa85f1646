use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use audit_core::corpus::write_jsonl;
use audit_core::experiment::{run_experiment, simulated_setup, Corpora, ExperimentConfig, RunOptions, RunStatus};
use audit_core::session::webdriver::RealFactory;
use audit_core::session::{DriverKind, SessionFactory, SimulatedFactory};
use audit_core::store::{Durability, RunArchive, StoreError, MANIFEST};
use audit_core::{ExperimentError, RunState};

use crate::{CliError, CliResult};

/// Simulated profile state lives next to the records.
pub const WORLD_DIR: &str = "world";
/// Generated corpora of a simulated run, for `analyze --claims`.
pub const CORPUS_DIR: &str = "corpus";

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub resume: bool,
    pub workers: Option<usize>,
    /// Stop after this day, leaving the run resumable.
    pub halt_after_day: Option<u32>,
    /// Skip fsync after each record. For scratch runs.
    pub no_sync: bool,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Parse a JSON config. Relative paths are taken relative to the file.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(CliError::user)?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(CliError::user)?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(base, &mut config.archive);
    if let Some(c) = config.corpora.as_mut() {
        resolve(base, &mut c.outlets);
        resolve(base, &mut c.articles);
        resolve(base, &mut c.claims);
        if let Some(m) = c.misinformation.as_mut() {
            resolve(base, m);
        }
    }
    if let Some(r) = config.real.as_mut() {
        resolve(base, &mut r.profiles_dir);
        resolve(base, &mut r.scripts_dir);
        resolve(base, &mut r.consent_rules);
    }
    config.validate().map_err(CliError::user)?;
    Ok(config)
}

fn experiment_error(e: ExperimentError) -> CliError {
    match e {
        ExperimentError::Config(_) | ExperimentError::Corpus(_) | ExperimentError::Precondition(_) => CliError::user(e),
        other => CliError::runtime(other),
    }
}

fn open_archive(config: &ExperimentConfig, resume: bool) -> CliResult<RunArchive> {
    let root = &config.archive;
    let exists = root.join(MANIFEST).exists();
    match (exists, resume) {
        (true, false) => Err(CliError::user(anyhow!(
            "archive {} already exists; pass --resume to continue it",
            root.display()
        ))),
        (false, true) => Err(CliError::user(anyhow!("no archive to resume at {}", root.display()))),
        (false, false) => RunArchive::create(root, &config.hash()).map_err(CliError::runtime),
        (true, true) => RunArchive::open_for_resume(root, &config.hash()).map_err(|e| match e {
            StoreError::ConfigMismatch { .. } | StoreError::SchemaMismatch { .. } => CliError::user(e),
            other => CliError::runtime(other),
        }),
    }
}

/// Execute or resume the experiment described by `args.config`.
pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> CliResult<RunState> {
    let config = load_config(&args.config)?;

    // Everything that can be wrong with the inputs is checked before the
    // archive is touched or a session opens.
    let (factory, corpora): (Box<dyn SessionFactory>, Corpora) = match config.driver {
        DriverKind::Simulated => {
            let state_dir = config.archive.join(WORLD_DIR);
            let (world, corpora) = simulated_setup(&config, None).map_err(experiment_error)?;
            if config.corpora.is_none() && !args.resume {
                let generated = world.corpus();
                let dir = config.archive.join(CORPUS_DIR);
                if !config.archive.join(MANIFEST).exists() {
                    fs::create_dir_all(&dir).map_err(CliError::runtime)?;
                    write_jsonl(&dir.join("outlets.jsonl"), &generated.outlets).map_err(CliError::runtime)?;
                    write_jsonl(&dir.join("articles.jsonl"), &generated.articles).map_err(CliError::runtime)?;
                    write_jsonl(&dir.join("claims.jsonl"), &generated.claims).map_err(CliError::runtime)?;
                }
            }
            let world = world.with_state_dir(&state_dir).map_err(CliError::runtime)?;
            (Box::new(SimulatedFactory::new(Arc::new(world))), corpora)
        }
        DriverKind::Real => {
            if !cfg!(feature = "webdriver") {
                return Err(CliError::user(anyhow!(
                    "driver \"real\" needs a build with the `webdriver` feature"
                )));
            }
            let paths = config
                .corpora
                .as_ref()
                .ok_or_else(|| CliError::user(anyhow!("driver \"real\" needs corpora paths")))?;
            let corpora = Corpora::load(&config, paths).map_err(experiment_error)?;
            let real = config.real.clone().unwrap_or_default();
            let factory = RealFactory::new(real).map_err(CliError::user)?;
            (Box::new(factory), corpora)
        }
    };

    let mut archive = open_archive(&config, args.resume)?;
    if args.no_sync {
        archive.set_durability(Durability::Flush);
    }
    let inter_day_gap = match config.driver {
        DriverKind::Real => Some(Duration::from_secs(
            config.real.as_ref().map_or(86_400, |r| r.inter_day_gap_secs),
        )),
        DriverKind::Simulated => None,
    };
    let options = RunOptions {
        workers: args.workers,
        halt_after_day: args.halt_after_day,
        inter_day_gap,
    };
    let state = run_experiment(&config, &corpora, &archive, factory.as_ref(), &options).map_err(experiment_error)?;

    let w = |e| CliError::runtime(e);
    writeln!(
        out,
        "archive {}: {:?}, {} completed phases, {} failed puppet(s)",
        config.archive.display(),
        state.status,
        state.completed.len(),
        state.failed.len()
    )
    .map_err(w)?;
    for (puppet, reason) in &state.failed {
        writeln!(out, "  failed {puppet}: {reason}").map_err(w)?;
    }
    if state.status == RunStatus::Done && state.failed.len() == state.plan.puppets().count() {
        return Err(CliError::runtime(anyhow!("every puppet failed")));
    }
    Ok(state)
}
