//! Per-video claim similarity and group comparisons.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embed::{embed_texts, embed_texts_lenient, Embedder, EmbeddingVector};
use super::stats::{mann_whitney, mean, Bootstrap};
use super::{MatchError, Result};
use crate::corpus::ClaimRecord;
use crate::experiment::{ExperimentPlan, Group};
use crate::scalar::Scalar;
use crate::seeding::KeyPart;
use crate::session::{Environment, SnapshotPhase, VideoRecord};
use crate::store::{RunArchive, SnapshotFilter};

const EMBED_BATCH: usize = 256;

/// How one video's similarities to all claims collapse to a single score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Max,
    Mean,
}

impl Aggregate {
    pub const ALL: [Aggregate; 2] = [Aggregate::Max, Aggregate::Mean];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregate::Max => "max",
            Aggregate::Mean => "mean",
        }
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "max" => Ok(Aggregate::Max),
            "mean" => Ok(Aggregate::Mean),
            other => Err(format!("unknown aggregate {other:?} (expected max or mean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult<T> {
    pub video_id: String,
    pub max_sim: T,
    pub mean_sim: T,
    pub top_claim_id: String,
    pub used_transcript: bool,
}

impl<T: Scalar> SimilarityResult<T> {
    pub fn score(&self, aggregate: Aggregate) -> T {
        match aggregate {
            Aggregate::Max => self.max_sim,
            Aggregate::Mean => self.mean_sim,
        }
    }
}

/// Claim embeddings, computed once per analysis. Claims whose text embeds
/// to the zero vector are left out and counted.
#[derive(Debug, Clone)]
pub struct ClaimIndex<T> {
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector<T>>,
    dropped: usize,
}

impl<T: Scalar> ClaimIndex<T> {
    pub fn build<E: Embedder<T> + ?Sized>(claims: &[ClaimRecord], embedder: &E) -> Result<Self> {
        let texts: Vec<String> = claims.iter().map(|c| embedder.truncate(&c.text).into_owned()).collect();
        let mut ids = Vec::with_capacity(claims.len());
        let mut vectors = Vec::with_capacity(claims.len());
        let mut dropped = 0;
        for (claim, v) in claims.iter().zip(embed_batched(embedder, &texts)?) {
            match v {
                Some(v) => {
                    ids.push(claim.claim_id.clone());
                    vectors.push(v);
                }
                None => {
                    log::warn!("claim {} has no usable embedding; left out", claim.claim_id);
                    dropped += 1;
                }
            }
        }
        if ids.is_empty() {
            return Err(MatchError::NoClaims);
        }
        Ok(Self { ids, vectors, dropped })
    }

    pub fn from_parts(ids: Vec<String>, vectors: Vec<EmbeddingVector<T>>) -> Result<Self> {
        if ids.is_empty() {
            return Err(MatchError::NoClaims);
        }
        if ids.len() != vectors.len() {
            return Err(MatchError::Config(format!(
                "{} claim ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        Ok(Self {
            ids,
            vectors,
            dropped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[EmbeddingVector<T>] {
        &self.vectors
    }

    /// Claims left out for lack of a usable embedding.
    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

fn embed_batched<T: Scalar, E: Embedder<T> + ?Sized>(
    embedder: &E,
    texts: &[String],
) -> Result<Vec<Option<EmbeddingVector<T>>>> {
    let chunks: Vec<Vec<Option<EmbeddingVector<T>>>> = texts
        .par_chunks(EMBED_BATCH)
        .map(|chunk| {
            let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
            embed_texts_lenient(embedder, &refs)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(MatchError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.norm() == T::zero() || b.norm() == T::zero() {
        return Err(MatchError::ZeroNorm);
    }
    let dot: T = a.values().iter().zip(b.values()).map(|(x, y)| *x * *y).sum();
    let c = dot / (a.norm() * b.norm());
    if !c.is_finite() {
        return Err(MatchError::NonFinite);
    }
    Ok(c.max(-T::one()).min(T::one()))
}

/// Text embedded for a video: the title, followed by the transcript when
/// one was captured. The flag reports whether a transcript was used.
pub fn video_text(video: &VideoRecord) -> (String, bool) {
    match video.transcript.as_deref().map(str::trim) {
        Some(t) if !t.is_empty() => (format!("{} {}", video.title, t), true),
        _ => (video.title.clone(), false),
    }
}

/// Score an already embedded video against every claim.
pub fn score_vector<T: Scalar>(
    video_id: &str,
    vector: &EmbeddingVector<T>,
    used_transcript: bool,
    claims: &ClaimIndex<T>,
) -> Result<SimilarityResult<T>> {
    let mut best: Option<(T, &str)> = None;
    let mut total = T::zero();
    for (id, cv) in claims.ids.iter().zip(&claims.vectors) {
        let s = cosine(vector, cv)?;
        total = total + s;
        best = match best {
            Some((b, bid)) if b > s || (b == s && bid <= id.as_str()) => Some((b, bid)),
            _ => Some((s, id.as_str())),
        };
    }
    let (max_sim, top) = best.ok_or(MatchError::NoClaims)?;
    Ok(SimilarityResult {
        video_id: video_id.to_string(),
        max_sim,
        mean_sim: total / T::of_usize(claims.len()),
        top_claim_id: top.to_string(),
        used_transcript,
    })
}

pub fn score_video<T: Scalar, E: Embedder<T> + ?Sized>(
    video: &VideoRecord,
    claims: &ClaimIndex<T>,
    embedder: &E,
) -> Result<SimilarityResult<T>> {
    let (text, used_transcript) = video_text(video);
    let text = embedder.truncate(&text);
    let vector = embed_texts(embedder, &[text.as_ref()])?.remove(0);
    score_vector(&video.video_id, &vector, used_transcript, claims)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison<T> {
    pub group: Group,
    pub environment: Environment,
    pub aggregate: Aggregate,
    pub baseline_mean: T,
    pub post_mean: T,
    pub delta: T,
    /// Mann–Whitney U of post over baseline.
    pub test_statistic: T,
    pub z: T,
    pub p_value: T,
    pub n_baseline: usize,
    pub n_post: usize,
    pub ci_low: Option<T>,
    pub ci_high: Option<T>,
    /// Mean over puppets of each puppet's own post minus baseline mean.
    pub per_puppet_delta: Option<T>,
}

/// Compare post-exposure against baseline video scores.
pub fn compare_phases<T: Scalar>(
    group: Group,
    environment: Environment,
    baseline: &[SimilarityResult<T>],
    post: &[SimilarityResult<T>],
    aggregate: Aggregate,
    bootstrap: Option<&Bootstrap>,
) -> Result<GroupComparison<T>> {
    let b: Vec<T> = baseline.iter().map(|r| r.score(aggregate)).collect();
    let p: Vec<T> = post.iter().map(|r| r.score(aggregate)).collect();
    compare_scores(group, environment, &b, &p, aggregate, bootstrap)
}

fn compare_scores<T: Scalar>(
    group: Group,
    environment: Environment,
    baseline: &[T],
    post: &[T],
    aggregate: Aggregate,
    bootstrap: Option<&Bootstrap>,
) -> Result<GroupComparison<T>> {
    let baseline_mean = mean(baseline).ok_or(MatchError::EmptySample)?;
    let post_mean = mean(post).ok_or(MatchError::EmptySample)?;
    let mw = mann_whitney(baseline, post)?;
    let ci = match bootstrap {
        Some(b) => {
            let key = [
                KeyPart::from(group.as_str()),
                KeyPart::from(environment.as_str()),
                KeyPart::from(aggregate.as_str()),
            ];
            Some(b.interval(baseline, post, &key)?)
        }
        None => None,
    };
    Ok(GroupComparison {
        group,
        environment,
        aggregate,
        baseline_mean,
        post_mean,
        delta: post_mean - baseline_mean,
        test_statistic: mw.u,
        z: mw.z,
        p_value: mw.p_value,
        n_baseline: baseline.len(),
        n_post: post.len(),
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        per_puppet_delta: None,
    })
}

/// One scored homepage tile with its provenance in the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredVideo<T> {
    pub puppet_id: String,
    pub group: Group,
    pub environment: Environment,
    pub phase: SnapshotPhase,
    pub day_index: u32,
    pub position: u32,
    #[serde(flatten)]
    pub result: SimilarityResult<T>,
}

/// Every committed snapshot video of a run, scored.
#[derive(Debug, Clone)]
pub struct ScoredArchive<T> {
    pub plan: ExperimentPlan,
    pub videos: Vec<ScoredVideo<T>>,
    pub truncated_lines: usize,
    pub claim_count: usize,
    pub claims_dropped: usize,
    /// Captured videos whose text has no usable embedding.
    pub unscorable: usize,
}

/// Score all committed snapshots of `archive`. The archive is only read.
pub fn score_archive<T: Scalar, E: Embedder<T> + ?Sized>(
    archive: &RunArchive,
    claims: &[ClaimRecord],
    embedder: &E,
) -> Result<ScoredArchive<T>> {
    let plan = archive.read_plan()?.ok_or(MatchError::MissingPlan)?;
    let index = ClaimIndex::build(claims, embedder)?;
    let truncated_lines = archive.scan()?.truncated_lines;
    let snapshots = archive.load_snapshots(&SnapshotFilter::default())?;
    let cells: HashMap<&str, (Group, Environment)> = plan
        .puppets()
        .map(|p| (p.puppet_id.as_str(), (p.group, p.environment)))
        .collect();

    // Identical (id, text) pairs recur across days and puppets; embed each once.
    let mut unique: BTreeMap<(String, String), bool> = BTreeMap::new();
    for s in &snapshots {
        for v in &s.videos {
            let (text, used) = video_text(v);
            let text = embedder.truncate(&text).into_owned();
            unique.insert((v.video_id.clone(), text), used);
        }
    }
    let keys: Vec<(&(String, String), bool)> = unique.iter().map(|(k, u)| (k, *u)).collect();
    let texts: Vec<String> = keys.iter().map(|(k, _)| k.1.clone()).collect();
    let vectors = embed_batched(embedder, &texts)?;
    let scored: Vec<Option<SimilarityResult<T>>> = keys
        .par_iter()
        .zip(vectors.par_iter())
        .map(|((k, used), v)| v.as_ref().map(|v| score_vector(&k.0, v, *used, &index)).transpose())
        .collect::<Result<_>>()?;
    let lookup: HashMap<(&str, &str), Option<&SimilarityResult<T>>> = keys
        .iter()
        .zip(&scored)
        .map(|((k, _), r)| ((k.0.as_str(), k.1.as_str()), r.as_ref()))
        .collect();

    let mut videos = Vec::new();
    let mut unscorable = 0;
    for s in &snapshots {
        let Some(&(group, environment)) = cells.get(s.puppet_id.as_str()) else {
            log::warn!("snapshot of unplanned puppet {} ignored", s.puppet_id);
            continue;
        };
        for v in &s.videos {
            let (text, _) = video_text(v);
            let text = embedder.truncate(&text);
            let Some(result) = lookup[&(v.video_id.as_str(), text.as_ref())].cloned() else {
                unscorable += 1;
                continue;
            };
            videos.push(ScoredVideo {
                puppet_id: s.puppet_id.clone(),
                group,
                environment,
                phase: s.phase,
                day_index: s.day_index,
                position: v.position,
                result,
            });
        }
    }
    Ok(ScoredArchive {
        plan,
        videos,
        truncated_lines,
        claim_count: index.len(),
        claims_dropped: index.dropped(),
        unscorable,
    })
}

/// Post-minus-baseline delta of one cell on one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayDelta<T> {
    pub group: Group,
    pub environment: Environment,
    pub day_index: u32,
    pub delta: T,
    pub p_value: T,
    pub n_post: usize,
}

impl<T: Scalar> ScoredArchive<T> {
    fn scores(
        &self,
        group: Group,
        environment: Environment,
        phase: SnapshotPhase,
        day: Option<u32>,
        aggregate: Aggregate,
    ) -> Vec<T> {
        self.videos
            .iter()
            .filter(|v| {
                v.group == group
                    && v.environment == environment
                    && v.phase == phase
                    && day.is_none_or(|d| d == v.day_index)
            })
            .map(|v| v.result.score(aggregate))
            .collect()
    }

    /// One comparison per planned cell. Cells missing either phase are
    /// skipped with a warning.
    pub fn comparisons(
        &self,
        aggregate: Aggregate,
        bootstrap: Option<&Bootstrap>,
    ) -> (Vec<GroupComparison<T>>, Vec<String>) {
        let results: Vec<Result<GroupComparison<T>, String>> = self
            .plan
            .cells
            .par_iter()
            .map(|cell| {
                let baseline = self.scores(cell.group, cell.environment, SnapshotPhase::Baseline, None, aggregate);
                let post = self.scores(cell.group, cell.environment, SnapshotPhase::Post, None, aggregate);
                if baseline.is_empty() || post.is_empty() {
                    return Err(format!(
                        "cell {}/{} has {} baseline and {} post scores; skipped",
                        cell.group,
                        cell.environment,
                        baseline.len(),
                        post.len()
                    ));
                }
                let mut c = compare_scores(cell.group, cell.environment, &baseline, &post, aggregate, bootstrap)
                    .map_err(|e| format!("cell {}/{}: {e}", cell.group, cell.environment))?;
                c.per_puppet_delta = self.per_puppet_delta(&cell.puppets, aggregate);
                Ok(c)
            })
            .collect();
        let mut out = Vec::new();
        let mut warnings = Vec::new();
        for r in results {
            match r {
                Ok(c) => out.push(c),
                Err(w) => warnings.push(w),
            }
        }
        (out, warnings)
    }

    fn per_puppet_delta(&self, puppets: &[crate::experiment::PuppetSpec], aggregate: Aggregate) -> Option<T> {
        let deltas: Vec<T> = puppets
            .iter()
            .filter_map(|p| {
                let mine = |phase| -> Vec<T> {
                    self.videos
                        .iter()
                        .filter(|v| v.puppet_id == p.puppet_id && v.phase == phase)
                        .map(|v| v.result.score(aggregate))
                        .collect()
                };
                Some(mean(&mine(SnapshotPhase::Post))? - mean(&mine(SnapshotPhase::Baseline))?)
            })
            .collect();
        mean(&deltas)
    }

    /// Per-cell, per-day deltas of post snapshots against the baseline.
    pub fn per_day(&self, aggregate: Aggregate) -> Vec<DayDelta<T>> {
        let mut out = Vec::new();
        for cell in &self.plan.cells {
            let baseline = self.scores(cell.group, cell.environment, SnapshotPhase::Baseline, None, aggregate);
            let Some(base_mean) = mean(&baseline) else { continue };
            let mut days: Vec<u32> = self
                .videos
                .iter()
                .filter(|v| {
                    v.group == cell.group && v.environment == cell.environment && v.phase == SnapshotPhase::Post
                })
                .map(|v| v.day_index)
                .collect();
            days.sort_unstable();
            days.dedup();
            for day in days {
                let post = self.scores(cell.group, cell.environment, SnapshotPhase::Post, Some(day), aggregate);
                let (Some(post_mean), Ok(mw)) = (mean(&post), mann_whitney(&baseline, &post)) else {
                    continue;
                };
                out.push(DayDelta {
                    group: cell.group,
                    environment: cell.environment,
                    day_index: day,
                    delta: post_mean - base_mean,
                    p_value: mw.p_value,
                    n_post: post.len(),
                });
            }
        }
        out
    }
}

/// Comparisons and per-day deltas for one aggregate.
#[derive(Debug, Clone)]
pub struct RunScores<T> {
    pub comparisons: Vec<GroupComparison<T>>,
    pub per_day: Vec<DayDelta<T>>,
    pub scored: ScoredArchive<T>,
    pub warnings: Vec<String>,
}

pub fn score_run<T: Scalar, E: Embedder<T> + ?Sized>(
    archive: &RunArchive,
    claims: &[ClaimRecord],
    embedder: &E,
    aggregate: Aggregate,
    bootstrap: Option<&Bootstrap>,
) -> Result<RunScores<T>> {
    let scored = score_archive(archive, claims, embedder)?;
    let (comparisons, mut warnings) = scored.comparisons(aggregate, bootstrap);
    if scored.unscorable > 0 {
        warnings.push(format!(
            "{} video(s) without a usable embedding left out",
            scored.unscorable
        ));
    }
    if scored.truncated_lines > 0 {
        warnings.push(format!("{} truncated archive line(s) ignored", scored.truncated_lines));
    }
    let per_day = scored.per_day(aggregate);
    Ok(RunScores {
        comparisons,
        per_day,
        scored,
        warnings,
    })
}
