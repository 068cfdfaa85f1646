use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context};
use audit_core::corpus::{load_claims, DateWindow};
use audit_core::matcher::{
    score_archive, Aggregate, Bootstrap, CommandEmbedder, Embedder, HashEmbedder, MatchError, ScoredArchive,
    ENV_EMBEDDER_CMD,
};
use audit_core::session::SnapshotPhase;
use audit_core::store::{RunArchive, StoreError, RUNSTATE};
use audit_core::{Comparison, RunState};
use serde::Serialize;

use crate::plot::write_cell_plot;
use crate::{CliError, CliResult};

pub const ENV_EMBEDDER_DIM: &str = "AUDIT_EMBEDDER_DIM";
pub const ENV_EMBEDDER_MAX_TOKENS: &str = "AUDIT_EMBEDDER_MAX_TOKENS";
pub const DEFAULT_EMBEDDER_CMD: &str = "python3 scripts/embed.py";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderChoice {
    Hash,
    /// External sentence-embedding model behind `AUDIT_EMBEDDER_CMD`.
    Model,
}

impl FromStr for EmbedderChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hash" => Ok(Self::Hash),
            "model" => Ok(Self::Model),
            other => Err(format!("unknown embedder {other:?} (expected hash or model)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub archive: PathBuf,
    pub claims: PathBuf,
    pub aggregate: Aggregate,
    pub embedder: EmbedderChoice,
    pub out: PathBuf,
    /// Bootstrap resamples for the delta interval; 0 turns it off.
    pub bootstrap: usize,
}

impl AnalyzeArgs {
    pub fn new(archive: impl Into<PathBuf>, claims: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            archive: archive.into(),
            claims: claims.into(),
            aggregate: Aggregate::Max,
            embedder: EmbedderChoice::Hash,
            out: out.into(),
            bootstrap: Bootstrap::default().resamples,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub puppets: usize,
    pub failed_puppets: usize,
    pub snapshots: BTreeMap<String, usize>,
    pub videos: BTreeMap<String, usize>,
    pub visits: usize,
    pub claims: usize,
    pub claims_without_embedding: usize,
    pub videos_without_embedding: usize,
    pub truncated_records: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportBundle {
    pub aggregate: Aggregate,
    pub comparisons: Vec<Comparison>,
    /// day_index → "group/environment" → delta.
    pub per_day: BTreeMap<u32, BTreeMap<String, f64>>,
    pub run_summary: RunSummary,
    pub warnings: Vec<String>,
}

fn build_embedder(choice: EmbedderChoice) -> CliResult<Box<dyn Embedder<f64>>> {
    match choice {
        EmbedderChoice::Hash => Ok(Box::new(HashEmbedder::default())),
        EmbedderChoice::Model => {
            let var = |k: &str| std::env::var(k).ok();
            let line = var(ENV_EMBEDDER_CMD).unwrap_or_else(|| DEFAULT_EMBEDDER_CMD.into());
            let parse = |k: &str, default: usize| -> CliResult<usize> {
                var(k).map_or(Ok(default), |v| {
                    v.parse()
                        .map_err(|_| CliError::user(anyhow!("{k}={v:?} is not a positive integer")))
                })
            };
            let dim = parse(ENV_EMBEDDER_DIM, 768)?;
            let max_tokens = parse(ENV_EMBEDDER_MAX_TOKENS, 384)?;
            let e = CommandEmbedder::from_command_line(&line, dim, max_tokens).map_err(CliError::user)?;
            Ok(Box::new(e))
        }
    }
}

fn cell_key(c: &Comparison) -> String {
    format!("{}/{}", c.group, c.environment)
}

fn summarize(archive: &RunArchive, scored: &ScoredArchive<f64>) -> CliResult<RunSummary> {
    let mut s = RunSummary {
        puppets: scored.plan.puppets().count(),
        claims: scored.claim_count,
        claims_without_embedding: scored.claims_dropped,
        videos_without_embedding: scored.unscorable,
        truncated_records: scored.truncated_lines,
        ..Default::default()
    };
    if let Some(state) = archive.read_json::<RunState>(RUNSTATE).map_err(CliError::runtime)? {
        s.failed_puppets = state.failed.len();
    }
    let snapshots = archive.load_snapshots(&Default::default()).map_err(CliError::runtime)?;
    for snap in &snapshots {
        *s.snapshots.entry(snap.phase.as_str().into()).or_default() += 1;
        *s.videos.entry(snap.phase.as_str().into()).or_default() += snap.videos.len();
    }
    for p in scored.plan.puppets() {
        s.visits += archive.load_visits(&p.puppet_id).map_err(CliError::runtime)?.len();
    }
    Ok(s)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::runtime)?;
    bytes.push(b'\n');
    fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(CliError::runtime)
}

fn print_table(out: &mut dyn Write, aggregate: Aggregate, rows: &[Comparison]) -> std::io::Result<()> {
    writeln!(out, "aggregate = {aggregate}")?;
    writeln!(
        out,
        "{:<16} {:<22} {:>8} {:>8} {:>9} {:>10} {:>6} {:>6}",
        "group", "environment", "base", "post", "delta", "p", "n_b", "n_p"
    )?;
    for c in rows {
        writeln!(
            out,
            "{:<16} {:<22} {:>8.4} {:>8.4} {:>+9.4} {:>10.3e} {:>6} {:>6}",
            c.group.as_str(),
            c.environment.as_str(),
            c.baseline_mean,
            c.post_mean,
            c.delta,
            c.p_value,
            c.n_baseline,
            c.n_post
        )?;
    }
    writeln!(out)
}

/// Score an archive against claims and write the report files to `out`.
/// The archive is only read.
pub fn cmd_analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> CliResult<ReportBundle> {
    let archive = RunArchive::open(&args.archive).map_err(|e| match e {
        StoreError::Io { .. } => CliError::runtime(e),
        other => CliError::user(other),
    })?;
    let claims = load_claims(&args.claims, DateWindow::default_claims()).map_err(CliError::user)?;
    if claims.is_empty() {
        return Err(CliError::user(anyhow!(
            "{} has no false or misleading claims in the default window",
            args.claims.display()
        )));
    }
    let embedder = build_embedder(args.embedder)?;
    let scored = score_archive(&archive, &claims, embedder.as_ref()).map_err(|e| match e {
        MatchError::MissingPlan | MatchError::NoClaims => CliError::user(anyhow!("{e} ({})", args.archive.display())),
        other => CliError::runtime(other),
    })?;

    let has = |phase| scored.videos.iter().any(|v| v.phase == phase);
    if scored.videos.is_empty() {
        return Err(CliError::user(anyhow!(
            "archive {} has no committed snapshots",
            args.archive.display()
        )));
    }
    if !has(SnapshotPhase::Post) {
        return Err(CliError::user(anyhow!(
            "archive {} has baseline snapshots but no post-exposure snapshots to compare",
            args.archive.display()
        )));
    }
    if !has(SnapshotPhase::Baseline) {
        return Err(CliError::user(anyhow!(
            "archive {} has no baseline snapshots",
            args.archive.display()
        )));
    }

    let bootstrap = (args.bootstrap > 0).then(|| Bootstrap {
        resamples: args.bootstrap,
        ..Bootstrap::default()
    });
    let mut tables: BTreeMap<Aggregate, (Vec<Comparison>, Vec<String>)> = BTreeMap::new();
    for aggregate in Aggregate::ALL {
        tables.insert(aggregate, scored.comparisons(aggregate, bootstrap.as_ref()));
    }
    let (comparisons, warnings) = tables[&args.aggregate].clone();
    if comparisons.is_empty() {
        return Err(CliError::user(anyhow!("no cell has both baseline and post snapshots")));
    }

    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))
        .map_err(CliError::runtime)?;
    write_json(&args.out.join("comparisons.json"), &comparisons)?;
    for (aggregate, (rows, _)) in &tables {
        write_json(&args.out.join(format!("comparisons_{aggregate}.json")), rows)?;
    }

    let scores_path = args.out.join("scores.jsonl");
    let mut w = BufWriter::new(File::create(&scores_path).map_err(CliError::runtime)?);
    for v in &scored.videos {
        serde_json::to_writer(&mut w, v).map_err(CliError::runtime)?;
        w.write_all(b"\n").map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)?;

    let mut per_day: BTreeMap<u32, BTreeMap<String, f64>> = BTreeMap::new();
    for d in scored.per_day(args.aggregate) {
        per_day
            .entry(d.day_index)
            .or_default()
            .insert(format!("{}/{}", d.group, d.environment), d.delta);
    }

    let plots = args.out.join("plots");
    for c in &comparisons {
        let pick = |phase| -> Vec<f64> {
            scored
                .videos
                .iter()
                .filter(|v| v.group == c.group && v.environment == c.environment && v.phase == phase)
                .map(|v| v.result.score(args.aggregate))
                .collect()
        };
        let name = format!("{}_{}", c.group, c.environment);
        let title = format!("{} ({} similarity)", cell_key(c), args.aggregate);
        write_cell_plot(
            &plots,
            &name,
            &title,
            &pick(SnapshotPhase::Baseline),
            &pick(SnapshotPhase::Post),
        )
        .map_err(CliError::runtime)?;
    }

    let bundle = ReportBundle {
        aggregate: args.aggregate,
        comparisons,
        per_day,
        run_summary: summarize(&archive, &scored)?,
        warnings,
    };
    write_json(&args.out.join("report.json"), &bundle)?;

    let io = CliError::runtime;
    let mut order = vec![args.aggregate];
    order.extend(Aggregate::ALL.into_iter().filter(|a| *a != args.aggregate));
    for aggregate in order {
        print_table(out, aggregate, &tables[&aggregate].0).map_err(io)?;
    }
    for warning in &bundle.warnings {
        writeln!(out, "warning: {warning}").map_err(io)?;
    }
    writeln!(out, "wrote {}", args.out.display()).map_err(io)?;
    Ok(bundle)
}
