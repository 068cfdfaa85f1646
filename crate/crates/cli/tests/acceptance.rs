//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p audit-cli --test acceptance`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use audit_cli::{cmd_analyze, cmd_run, AnalyzeArgs, RunArgs};
use audit_core::corpus::{build_pool, ArticleRecord, Ideology, OutletRecord, PoolLabel};
use audit_core::experiment::{ExperimentConfig, Group, RunStatus};
use audit_core::matcher::{cosine, mann_whitney, score_video, ClaimIndex, EmbeddingVector, HashEmbedder};
use audit_core::mockworld::WorldConfig;
use audit_core::seeding::KeyedRng;
use audit_core::session::{Environment, SnapshotPhase, VideoRecord};
use audit_core::store::{MarkerOutcome, RunArchive, SnapshotFilter};
use audit_core::{ClaimRecord, Comparison};

const EFFECT: f64 = 0.5;
const ALPHA: f64 = 0.05;
const PUPPETS: usize = 10;
const EFFECT_SEED: u64 = 2;
const NULL_PUPPETS: usize = 20;
/// World and master seeds run 0..NULL_SEEDS.
const NULL_SEEDS: u64 = 20;
const NULL_MAX_HITS: usize = 2;
const NULL_BAND_QUANTILE: f64 = 0.95;
const ORACLE_INSTANCES: usize = 20;
const ORACLE_TOL: f64 = 1e-9;
const MW_INSTANCES: usize = 200;
const COS_TOL: f64 = 1e-8;
const COS_IDENTITY_TOL: f64 = 1e-12;
const SCALE_PAIRS: usize = 1000;
const SCALE_TOL: f64 = 1e-9;
const LIMIT_EFFECT: Duration = Duration::from_secs(120);
const LIMIT_PRIVACY: Duration = Duration::from_secs(120);
const LIMIT_NULL: Duration = Duration::from_secs(300);

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn config(
    archive: &Path,
    groups: &[Group],
    environments: &[Environment],
    n: usize,
    effect: f64,
    seed: u64,
) -> ExperimentConfig {
    ExperimentConfig {
        n_puppets_per_cell: n,
        groups: groups.to_vec(),
        environments: environments.to_vec(),
        master_seed: seed,
        archive: archive.to_path_buf(),
        simulated: Some(WorldConfig {
            seed,
            effect_size: effect,
            ..WorldConfig::default()
        }),
        ..ExperimentConfig::default()
    }
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(config_path: &Path, workers: Option<usize>) -> Result<(), String> {
    let args = RunArgs {
        config: config_path.to_path_buf(),
        workers,
        no_sync: true,
        ..RunArgs::default()
    };
    cmd_run(&args, &mut Vec::new())
        .map(drop)
        .map_err(|e| format!("run failed: {e}"))
}

fn analyze(archive: &Path, out: &Path, bootstrap: usize) -> Result<Vec<Comparison>, String> {
    let mut args = AnalyzeArgs::new(archive, archive.join("corpus/claims.jsonl"), out);
    args.bootstrap = bootstrap;
    cmd_analyze(&args, &mut Vec::new())
        .map(|b| b.comparisons)
        .map_err(|e| format!("analyze failed: {e}"))
}

fn cell(rows: &[Comparison], group: Group, env: Environment) -> Result<&Comparison, String> {
    rows.iter()
        .find(|c| c.group == group && c.environment == env)
        .ok_or_else(|| format!("no {group}/{env} row"))
}

fn timed(limit: Duration, start: Instant) -> Result<String, String> {
    let t = start.elapsed();
    ensure(
        t < limit,
        format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()),
    )?;
    Ok(format!("{:.1}s", t.as_secs_f64()))
}

fn effect_detection(tmp: &Path) -> Check {
    let start = Instant::now();
    let archive = tmp.join("effect");
    let cfg = config(
        &archive,
        &[Group::Misinformation, Group::Control],
        &[Environment::TrackingPermissive],
        PUPPETS,
        EFFECT,
        EFFECT_SEED,
    );
    run(&write_config(tmp, "effect", &cfg), None)?;
    let rows = analyze(&archive, &tmp.join("effect-out"), 10_000)?;
    let m = cell(&rows, Group::Misinformation, Environment::TrackingPermissive)?;
    let c = cell(&rows, Group::Control, Environment::TrackingPermissive)?;
    let detail = format!(
        "delta(misinfo)={:+.4} p={:.2e}, delta(control)={:+.4}",
        m.delta, m.p_value, c.delta
    );
    ensure(m.delta > 0.0 && m.p_value < ALPHA, detail.clone())?;
    ensure(m.delta - c.delta > 0.0, detail.clone())?;
    Ok(format!("{detail}, {}", timed(LIMIT_EFFECT, start)?))
}

/// The (misinformation, permissive) cell in ε=0 worlds; also yields the
/// null band for criterion 2.
fn null_calibration(tmp: &Path) -> (Check, Option<f64>) {
    match null_runs(tmp) {
        Ok((hits, band, elapsed)) => {
            let detail =
                format!("{hits}/{NULL_SEEDS} seeds with p<{ALPHA} (max {NULL_MAX_HITS}), null band |delta|<{band:.4}");
            let check = ensure(hits <= NULL_MAX_HITS, detail.clone())
                .and_then(|()| timed(LIMIT_NULL, elapsed))
                .map(|t| format!("{detail}, {t}"));
            (check, Some(band))
        }
        Err(e) => (Err(e), None),
    }
}

fn null_runs(tmp: &Path) -> Result<(usize, f64, Instant), String> {
    let start = Instant::now();
    let mut hits = 0;
    let mut deltas = Vec::new();
    for seed in 0..NULL_SEEDS {
        let archive = tmp.join(format!("null-{seed}"));
        let cfg = config(
            &archive,
            &[Group::Misinformation],
            &[Environment::TrackingPermissive],
            NULL_PUPPETS,
            0.0,
            seed,
        );
        run(&write_config(tmp, &format!("null-{seed}"), &cfg), None)?;
        let rows = analyze(&archive, &tmp.join(format!("null-{seed}-out")), 0)?;
        let c = cell(&rows, Group::Misinformation, Environment::TrackingPermissive)?;
        if c.p_value < ALPHA {
            hits += 1;
        }
        deltas.push(c.delta.abs());
    }
    deltas.sort_by(f64::total_cmp);
    let band = audit_core::matcher::quantile(&deltas, NULL_BAND_QUANTILE);
    Ok((hits, band, start))
}

fn privacy(tmp: &Path, band: f64) -> Check {
    let start = Instant::now();
    let archive = tmp.join("privacy");
    let cfg = config(
        &archive,
        &[Group::Misinformation],
        &[Environment::TrackingRestrictive],
        PUPPETS,
        EFFECT,
        EFFECT_SEED,
    );
    run(&write_config(tmp, "privacy", &cfg), None)?;
    let rows = analyze(&archive, &tmp.join("privacy-out"), 10_000)?;
    let m = cell(&rows, Group::Misinformation, Environment::TrackingRestrictive)?;

    let store = RunArchive::open(&archive).map_err(|e| e.to_string())?;
    let plan = store.read_plan().map_err(|e| e.to_string())?.ok_or("no plan")?;
    let mut visits = 0;
    for p in plan.puppets() {
        for v in store.load_visits(&p.puppet_id).map_err(|e| e.to_string())? {
            visits += 1;
            ensure(
                v.trackers_fired == 0,
                format!("{} fired {} trackers", p.puppet_id, v.trackers_fired),
            )?;
        }
    }
    ensure(visits > 0, "no visits recorded")?;
    let detail = format!(
        "|delta|={:.4} < band {band:.4}, {visits} visits with 0 trackers",
        m.delta.abs()
    );
    ensure(m.delta.abs() < band, detail.clone())?;
    Ok(format!("{detail}, {}", timed(LIMIT_PRIVACY, start)?))
}

// Hash embedding written out from its definition: FNV-1a 64 over lowercased
// alphanumeric runs, bucket h mod 64, sign from bit 32.
fn oracle_embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 64];
    for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let mut h: u64 = 14_695_981_039_346_656_037;
        for b in token.to_lowercase().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(1_099_511_628_211);
        }
        let sign = if h & (1 << 32) == 0 { 1.0 } else { -1.0 };
        v[(h % 64) as usize] += sign;
    }
    v
}

fn oracle_cos(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

const WORDS: [&str; 24] = [
    "vaccine", "chip", "ballot", "fraud", "moon", "landing", "fake", "water", "fluoride", "secret", "cure", "cancer",
    "election", "stolen", "tower", "signal", "virus", "lab", "leak", "flat", "earth", "climate", "hoax", "plane",
];

fn random_text(rng: &mut KeyedRng) -> String {
    let n = 1 + rng.below(8) as usize;
    (0..n)
        .map(|_| WORDS[rng.below(WORDS.len() as u64) as usize])
        .collect::<Vec<_>>()
        .join(" ")
}

fn brute_u(first: &[f64], second: &[f64]) -> f64 {
    let pooled: Vec<f64> = first.iter().chain(second).copied().collect();
    let mut rank_sum = 0.0;
    for x in second {
        let below = pooled.iter().filter(|y| *y < x).count() as f64;
        let equal = pooled.iter().filter(|y| *y == x).count() as f64;
        rank_sum += below + (equal + 1.0) / 2.0;
    }
    let n2 = second.len() as f64;
    rank_sum - n2 * (n2 + 1.0) / 2.0
}

fn oracle_equivalence() -> Check {
    let e = HashEmbedder::default();
    let mut rng = KeyedRng::new("acceptance-oracle", &[]);
    let mut pairs = 0;
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    while instances < ORACLE_INSTANCES {
        let n_claims = 1 + rng.below(20) as usize;
        let n_videos = 1 + rng.below(20) as usize;
        let claim_texts: Vec<String> = (0..n_claims).map(|_| random_text(&mut rng)).collect();
        if claim_texts.iter().any(|t| oracle_embed(t).iter().all(|x| *x == 0.0)) {
            continue;
        }
        instances += 1;
        let claims: Vec<ClaimRecord> = claim_texts
            .iter()
            .enumerate()
            .map(|(i, t)| ClaimRecord {
                claim_id: format!("c{i:02}"),
                text: t.clone(),
                verdict: audit_core::corpus::Verdict::False,
                checked_at: chrono::NaiveDate::from_ymd_opt(2022, 1, 1).unwrap(),
            })
            .collect();
        let index: ClaimIndex<f64> = ClaimIndex::build(&claims, &e).map_err(|e| e.to_string())?;
        for v in 0..n_videos {
            let title = random_text(&mut rng);
            let video = VideoRecord {
                video_id: format!("v{v}"),
                title: title.clone(),
                channel: "c".into(),
                position: v as u32 + 1,
                transcript: None,
            };
            let vv = oracle_embed(&title);
            let sims: Option<Vec<f64>> = claim_texts.iter().map(|c| oracle_cos(&vv, &oracle_embed(c))).collect();
            let got = score_video(&video, &index, &e);
            let Some(sims) = sims else {
                ensure(got.is_err(), format!("zero-vector video {title:?} was scored"))?;
                continue;
            };
            let got = got.map_err(|e| e.to_string())?;
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            worst = worst.max((got.max_sim - max).abs()).max((got.mean_sim - mean).abs());
            pairs += sims.len();
        }
    }
    ensure(worst <= ORACLE_TOL, format!("score_video off by {worst:.2e}"))?;

    for _ in 0..MW_INSTANCES {
        let n1 = 1 + rng.below(30) as usize;
        let n2 = 1 + rng.below(30) as usize;
        let mut draw = |n| (0..n).map(|_| rng.below(6) as f64).collect::<Vec<f64>>();
        let (a, b) = (draw(n1), draw(n2));
        let got = mann_whitney(&a, &b).map_err(|e| e.to_string())?.u;
        let want = brute_u(&a, &b);
        ensure(got == want, format!("U={got} but ranks give {want} for {a:?} vs {b:?}"))?;
    }
    Ok(format!(
        "{ORACLE_INSTANCES} instances, {pairs} pairs, max error {worst:.1e}; {MW_INSTANCES} tied U samples exact"
    ))
}

fn cosine_analytics() -> Check {
    let v = |x: Vec<f64>| EmbeddingVector::new(x);
    let c = |a: &EmbeddingVector<f64>, b: &EmbeddingVector<f64>| cosine(a, b).map_err(|e| e.to_string());
    let a = v(vec![0.3, -1.2, 2.5]);
    let identity = c(&a, &a)?;
    ensure(
        (identity - 1.0).abs() <= COS_IDENTITY_TOL,
        format!("identity {identity}"),
    )?;
    let orthogonal = c(&v(vec![1.0, 0.0]), &v(vec![0.0, 1.0]))?;
    ensure(orthogonal == 0.0, format!("orthogonal {orthogonal}"))?;
    let diag = c(&v(vec![1.0, 0.0]), &v(vec![1.0, 1.0]))?;
    ensure(
        (diag - std::f64::consts::FRAC_1_SQRT_2).abs() <= COS_TOL,
        format!("diagonal {diag}"),
    )?;

    let mut rng = KeyedRng::new("acceptance-scale", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..SCALE_PAIRS {
        let dim = 2 + rng.below(63) as usize;
        let x: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (s, t) = (10f64.powf(rng.uniform(-3.0, 3.0)), 10f64.powf(rng.uniform(-3.0, 3.0)));
        let base = c(&v(x.clone()), &v(y.clone()))?;
        let scaled = c(
            &v(x.iter().map(|e| e * s).collect()),
            &v(y.iter().map(|e| e * t).collect()),
        )?;
        worst = worst.max((base - scaled).abs());
    }
    ensure(worst <= SCALE_TOL, format!("scale drift {worst:.2e}"))?;
    Ok(format!(
        "identity {identity}, orthogonal {orthogonal}, diagonal {diag:.12}, scale drift {worst:.1e}"
    ))
}

fn pool_of_thousand() -> Result<usize, String> {
    let outlets: Vec<OutletRecord> = (0..50)
        .map(|k| OutletRecord {
            outlet_id: format!("out-{k:02}"),
            domain: format!("out{k}.example"),
            bias_label: Ideology::Left,
        })
        .collect();
    let articles: Vec<ArticleRecord> = (0..50)
        .flat_map(|k| {
            (0..25).map(move |j| ArticleRecord {
                url: format!("https://out{k}.example/a/{j}"),
                outlet_id: Some(format!("out-{k:02}")),
                pool_label: PoolLabel::Left,
                published_at: None,
            })
        })
        .collect();
    let pool = build_pool(&outlets, &articles, 20).map_err(|e| e.to_string())?;
    ensure(pool.len() == 1000, format!("pool has {} articles", pool.len()))?;
    let distinct: HashSet<_> = pool.articles.iter().map(|a| &a.url).collect();
    ensure(distinct.len() == 1000, "pool repeats urls")?;
    Ok(pool.len())
}

fn check_archive(archive: &Path, articles_per_day: usize, days: u32) -> Result<usize, String> {
    let err = |e: audit_core::StoreError| e.to_string();
    let store = RunArchive::open(archive).map_err(err)?;
    let plan = store.read_plan().map_err(err)?.ok_or("no plan")?;

    let mut triples = HashSet::new();
    for (puppet, m) in store.scan().map_err(err)?.markers() {
        if m.outcome == MarkerOutcome::Completed {
            ensure(
                triples.insert((puppet.to_string(), m.day_index, m.phase)),
                format!("duplicate triple {puppet}/{}/{:?}", m.day_index, m.phase),
            )?;
        }
    }

    let snaps = store.load_snapshots(&SnapshotFilter::default()).map_err(err)?;
    let with_baseline: HashSet<&str> = snaps
        .iter()
        .filter(|s| s.phase == SnapshotPhase::Baseline)
        .map(|s| s.puppet_id.as_str())
        .collect();
    for s in &snaps {
        if s.phase == SnapshotPhase::Post {
            ensure(
                with_baseline.contains(s.puppet_id.as_str()),
                format!("{} has post without baseline", s.puppet_id),
            )?;
        }
    }

    let mut visits = 0;
    for p in plan.puppets() {
        let log = store.load_visits(&p.puppet_id).map_err(err)?;
        if p.group == Group::Control {
            ensure(
                log.is_empty(),
                format!("control puppet {} has {} visits", p.puppet_id, log.len()),
            )?;
            continue;
        }
        let mut per_day: BTreeMap<u32, HashSet<&str>> = BTreeMap::new();
        for v in &log {
            ensure(
                (20.0..=60.0).contains(&v.dwell_seconds),
                format!("dwell {}", v.dwell_seconds),
            )?;
            ensure(
                per_day.entry(v.day_index).or_default().insert(&v.url),
                format!("repeated visit {}", v.url),
            )?;
        }
        ensure(
            per_day.len() == days as usize && per_day.values().all(|d| d.len() == articles_per_day),
            format!("{} has an incomplete visit log", p.puppet_id),
        )?;
        visits += log.len();
    }
    Ok(visits)
}

fn protocol_invariants(tmp: &Path) -> Check {
    let pool = pool_of_thousand()?;

    let archive = tmp.join("protocol");
    let cfg = config(&archive, &Group::ALL, &Environment::ALL, 2, EFFECT, 11);
    let path = write_config(tmp, "protocol", &cfg);
    run(&path, None)?;
    let visits = check_archive(&archive, cfg.articles_per_day, cfg.days)?;

    // Kill a real process mid-run, then resume it.
    let archive = tmp.join("killed");
    let cfg = config(&archive, &Group::ALL, &Environment::ALL, 2, EFFECT, 12);
    let path = write_config(tmp, "killed", &cfg);
    let exe = env!("CARGO_BIN_EXE_audit");
    let mut child = Command::new(exe)
        .args(["run", "--config"])
        .arg(&path)
        .args(["--workers", "1"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let records = archive.join("records");
    let deadline = Instant::now() + Duration::from_secs(30);
    while Instant::now() < deadline {
        let written: u64 = fs::read_dir(&records)
            .map(|d| d.flatten().filter_map(|f| f.metadata().ok()).map(|m| m.len()).sum())
            .unwrap_or(0);
        if written > 20_000 {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    let killed_early = child.try_wait().map_err(|e| e.to_string())?.is_none();
    child.kill().ok();
    child.wait().map_err(|e| e.to_string())?;
    let status = Command::new(exe)
        .args(["run", "--resume", "--config"])
        .arg(&path)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), format!("resume exited with {status}"))?;
    let state: audit_core::RunState =
        serde_json::from_slice(&fs::read(archive.join("runstate.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(
        state.status == RunStatus::Done,
        format!("resumed run is {:?}", state.status),
    )?;
    ensure(
        state.completed.len() == 12 * 2 * (1 + 2 * 5),
        format!("{} completed phases", state.completed.len()),
    )?;
    let resumed = check_archive(&archive, cfg.articles_per_day, cfg.days)?;

    Ok(format!(
        "pool {pool}, {visits} visits checked, resume after kill ({}) left {resumed} visits and no duplicate triples",
        if killed_early { "mid-run" } else { "after finish" }
    ))
}

fn determinism(tmp: &Path) -> Check {
    let mut outputs = Vec::new();
    for (i, workers) in [(0, 1), (1, 4)] {
        let archive = tmp.join(format!("det-{i}"));
        let cfg = config(&archive, &Group::ALL, &Environment::ALL, 2, EFFECT, 7);
        let path = write_config(tmp, &format!("det-{i}"), &cfg);
        run(&path, Some(workers))?;
        let out = tmp.join(format!("det-{i}-out"));
        analyze(&archive, &out, 10_000)?;
        outputs.push(fs::read(out.join("comparisons.json")).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], "comparisons.json differs between runs")?;
    Ok(format!("{} identical bytes (workers 1 and 4)", outputs[0].len()))
}

fn report(n: u32, name: &str, result: &Check) -> bool {
    match result {
        Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
        Err(detail) => println!("criterion {n} {name}: FAIL ({detail})"),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let tmp = tmp.path();
    let mut ok = true;

    ok &= report(1, "effect detection", &effect_detection(tmp));
    let (null, band) = null_calibration(tmp);
    let privacy = match band {
        Some(band) => privacy(tmp, band),
        None => Err("no null band: the null runs failed".into()),
    };
    ok &= report(2, "privacy protection", &privacy);
    ok &= report(3, "null calibration", &null);
    ok &= report(4, "matcher oracle equivalence", &oracle_equivalence());
    ok &= report(5, "cosine analytics", &cosine_analytics());
    ok &= report(6, "protocol invariants", &protocol_invariants(tmp));
    ok &= report(7, "determinism", &determinism(tmp));

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
