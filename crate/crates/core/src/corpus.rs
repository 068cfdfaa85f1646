//! Exposure material and fact-checked claims.
//!
//! Corpora are newline-delimited JSON files assembled by the operator:
//!
//! * `outlets.jsonl`  – `{"outlet_id", "domain", "bias_label"}`
//! * `articles.jsonl` – `{"url", "outlet_id"|null, "pool_label", "published_at"|null}`
//! * `claims.jsonl`   – `{"claim_id", "text", "verdict", "checked_at"}`
//!
//! Dates are `YYYY-MM-DD`. Blank lines are ignored.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::seeding::{KeyedRng, Permutation};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("outlet {outlet_id} has {available} articles, {required} required")]
    InsufficientArticles {
        outlet_id: String,
        available: usize,
        required: usize,
    },
    #[error("pool {0} is empty after filtering")]
    EmptyPool(String),
    #[error("cannot sample {requested} articles from a pool of {available}")]
    SampleTooLarge { requested: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Political leaning of an outlet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ideology {
    ExtremeLeft,
    Left,
    Right,
    ExtremeRight,
}

impl Ideology {
    pub const ALL: [Ideology; 4] = [
        Ideology::ExtremeLeft,
        Ideology::Left,
        Ideology::Right,
        Ideology::ExtremeRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ideology::ExtremeLeft => "extreme-left",
            Ideology::Left => "left",
            Ideology::Right => "right",
            Ideology::ExtremeRight => "extreme-right",
        }
    }
}

impl fmt::Display for Ideology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ideology {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ideology::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| format!("unknown bias label {s:?}"))
    }
}

/// Which article pool a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolLabel {
    ExtremeLeft,
    Left,
    Right,
    ExtremeRight,
    Misinformation,
}

impl PoolLabel {
    pub const ALL: [PoolLabel; 5] = [
        PoolLabel::ExtremeLeft,
        PoolLabel::Left,
        PoolLabel::Right,
        PoolLabel::ExtremeRight,
        PoolLabel::Misinformation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolLabel::Misinformation => "misinformation",
            other => other.ideology().expect("ideology label").as_str(),
        }
    }

    pub fn ideology(self) -> Option<Ideology> {
        match self {
            PoolLabel::ExtremeLeft => Some(Ideology::ExtremeLeft),
            PoolLabel::Left => Some(Ideology::Left),
            PoolLabel::Right => Some(Ideology::Right),
            PoolLabel::ExtremeRight => Some(Ideology::ExtremeRight),
            PoolLabel::Misinformation => None,
        }
    }
}

impl From<Ideology> for PoolLabel {
    fn from(i: Ideology) -> Self {
        match i {
            Ideology::ExtremeLeft => PoolLabel::ExtremeLeft,
            Ideology::Left => PoolLabel::Left,
            Ideology::Right => PoolLabel::Right,
            Ideology::ExtremeRight => PoolLabel::ExtremeRight,
        }
    }
}

impl fmt::Display for PoolLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        PoolLabel::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown pool label {s:?}"))
    }
}

/// Fact-check rating. Ratings other than `false` and `misleading` collapse
/// to `other` (for example "true" or "half-true").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    False,
    Misleading,
    Other,
}

impl Verdict {
    pub fn parse(s: &str) -> Verdict {
        match s.trim().to_ascii_lowercase().as_str() {
            "false" => Verdict::False,
            "misleading" => Verdict::Misleading,
            _ => Verdict::Other,
        }
    }

    pub fn default_misinformation_set() -> BTreeSet<Verdict> {
        [Verdict::False, Verdict::Misleading].into_iter().collect()
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Verdict::parse(&s))
    }
}

/// Inclusive date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > end {
            return Err(CorpusError::Invalid(format!(
                "date window starts after it ends ({start} > {end})"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    /// January 2020 through October 2025, the default claim window.
    pub fn default_claims() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2025, 10, 31).expect("valid date"),
        }
    }

    /// Calendar years 2020 through 2025, the default misinformation-article window.
    pub fn default_articles() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2025, 12, 31).expect("valid date"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutletRecord {
    pub outlet_id: String,
    pub domain: String,
    pub bias_label: Ideology,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub url: String,
    pub outlet_id: Option<String>,
    pub pool_label: PoolLabel,
    pub published_at: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticlePool {
    pub pool_label: PoolLabel,
    pub articles: Vec<ArticleRecord>,
}

impl ArticlePool {
    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub claim_id: String,
    pub text: String,
    pub verdict: Verdict,
    pub checked_at: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureSequence {
    pub puppet_id: String,
    pub day_index: u32,
    pub articles: Vec<ArticleRecord>,
    pub seed: u64,
}

/// Absolute http(s) URL with a host.
pub fn is_absolute_url(url: &str) -> bool {
    let rest = url.strip_prefix("https://").or_else(|| url.strip_prefix("http://"));
    match rest {
        Some(rest) => {
            let host = rest.split(['/', '?', '#']).next().unwrap_or("");
            !host.is_empty() && !host.contains(char::is_whitespace)
        }
        None => false,
    }
}

/// Iterate the non-blank lines of a JSONL file, deserialising each one.
fn read_jsonl<T, F>(path: &Path, mut each: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, T) -> Result<()>,
{
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        each(line_no, row)?;
    }
    Ok(())
}

fn invalid(path: &Path, line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Validation {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct RawOutlet {
    outlet_id: String,
    domain: String,
    bias_label: String,
}

#[derive(Deserialize)]
struct RawArticle {
    url: String,
    #[serde(default)]
    outlet_id: Option<String>,
    pool_label: String,
    #[serde(default)]
    published_at: Option<String>,
}

#[derive(Deserialize)]
struct RawClaim {
    claim_id: String,
    text: String,
    verdict: Verdict,
    checked_at: String,
}

fn parse_date(path: &Path, line: usize, s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| invalid(path, line, format!("bad date {s:?}, expected YYYY-MM-DD")))
}

/// Load outlets, optionally keeping only one bias label. File order is kept.
pub fn load_outlets(path: &Path, bias_filter: Option<Ideology>) -> Result<Vec<OutletRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    read_jsonl(path, |line, raw: RawOutlet| {
        let bias_label: Ideology = raw.bias_label.parse().map_err(|m| invalid(path, line, m))?;
        if raw.domain.trim().is_empty() {
            return Err(invalid(path, line, "empty domain"));
        }
        if !seen.insert(raw.outlet_id.clone()) {
            return Err(invalid(path, line, format!("duplicate outlet_id {:?}", raw.outlet_id)));
        }
        if bias_filter.is_none_or(|f| f == bias_label) {
            out.push(OutletRecord {
                outlet_id: raw.outlet_id,
                domain: raw.domain,
                bias_label,
            });
        }
        Ok(())
    })?;
    Ok(out)
}

/// Load every article row, validating labels, URLs and dates.
pub fn load_articles(path: &Path) -> Result<Vec<ArticleRecord>> {
    let mut out = Vec::new();
    read_jsonl(path, |line, raw: RawArticle| {
        let pool_label: PoolLabel = raw.pool_label.parse().map_err(|m| invalid(path, line, m))?;
        if !is_absolute_url(&raw.url) {
            return Err(invalid(path, line, format!("not an absolute URL: {:?}", raw.url)));
        }
        let published_at = raw
            .published_at
            .as_deref()
            .map(|d| parse_date(path, line, d))
            .transpose()?;
        out.push(ArticleRecord {
            url: raw.url,
            outlet_id: raw.outlet_id,
            pool_label,
            published_at,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Build an ideology pool taking the first `articles_per_outlet` articles of
/// each outlet in input order. Pool order follows outlet order.
pub fn build_pool(
    outlets: &[OutletRecord],
    articles: &[ArticleRecord],
    articles_per_outlet: usize,
) -> Result<ArticlePool> {
    let first = outlets
        .first()
        .ok_or_else(|| CorpusError::Invalid("no outlets supplied".into()))?;
    let label = first.bias_label;
    if let Some(odd) = outlets.iter().find(|o| o.bias_label != label) {
        return Err(CorpusError::Invalid(format!(
            "mixed bias labels: {} is {}, expected {}",
            odd.outlet_id, odd.bias_label, label
        )));
    }

    let mut by_outlet: HashMap<&str, Vec<&ArticleRecord>> =
        outlets.iter().map(|o| (o.outlet_id.as_str(), Vec::new())).collect();
    for article in articles {
        let Some(outlet_id) = article.outlet_id.as_deref() else {
            continue;
        };
        match by_outlet.get_mut(outlet_id) {
            Some(list) => list.push(article),
            None => {
                return Err(CorpusError::Invalid(format!(
                    "article {} references unknown outlet {outlet_id}",
                    article.url
                )))
            }
        }
    }

    let mut pool = Vec::with_capacity(outlets.len() * articles_per_outlet);
    let mut urls = HashSet::new();
    for outlet in outlets {
        let list = &by_outlet[outlet.outlet_id.as_str()];
        if list.len() < articles_per_outlet {
            return Err(CorpusError::InsufficientArticles {
                outlet_id: outlet.outlet_id.clone(),
                available: list.len(),
                required: articles_per_outlet,
            });
        }
        for article in list.iter().take(articles_per_outlet) {
            if !urls.insert(article.url.as_str()) {
                return Err(CorpusError::Invalid(format!("duplicate url {}", article.url)));
            }
            let mut record = (*article).clone();
            record.pool_label = label.into();
            pool.push(record);
        }
    }
    Ok(ArticlePool {
        pool_label: label.into(),
        articles: pool,
    })
}

/// Misinformation-labelled articles published inside `window`.
pub fn load_misinformation_pool(path: &Path, window: DateWindow) -> Result<ArticlePool> {
    let articles = load_articles(path)?;
    misinformation_pool(articles, window)
}

pub fn misinformation_pool(articles: Vec<ArticleRecord>, window: DateWindow) -> Result<ArticlePool> {
    let mut urls = HashSet::new();
    let mut pool = Vec::new();
    for article in articles {
        if article.pool_label != PoolLabel::Misinformation {
            continue;
        }
        if !article.published_at.is_some_and(|d| window.contains(d)) {
            continue;
        }
        if !urls.insert(article.url.clone()) {
            return Err(CorpusError::Invalid(format!("duplicate url {}", article.url)));
        }
        pool.push(article);
    }
    if pool.is_empty() {
        return Err(CorpusError::EmptyPool(PoolLabel::Misinformation.to_string()));
    }
    Ok(ArticlePool {
        pool_label: PoolLabel::Misinformation,
        articles: pool,
    })
}

/// Claims rated `false` or `misleading` and checked inside `window`.
pub fn load_claims(path: &Path, window: DateWindow) -> Result<Vec<ClaimRecord>> {
    load_claims_with(path, window, &Verdict::default_misinformation_set())
}

pub fn load_claims_with(path: &Path, window: DateWindow, verdicts: &BTreeSet<Verdict>) -> Result<Vec<ClaimRecord>> {
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    read_jsonl(path, |line, raw: RawClaim| {
        if !ids.insert(raw.claim_id.clone()) {
            return Err(invalid(path, line, format!("duplicate claim_id {:?}", raw.claim_id)));
        }
        if raw.text.trim().is_empty() {
            return Err(invalid(path, line, format!("claim {:?} has empty text", raw.claim_id)));
        }
        let checked_at = parse_date(path, line, &raw.checked_at)?;
        if window.contains(checked_at) && verdicts.contains(&raw.verdict) {
            out.push(ClaimRecord {
                claim_id: raw.claim_id,
                text: raw.text,
                verdict: raw.verdict,
                checked_at,
            });
        }
        Ok(())
    })?;
    Ok(out)
}

/// Lazily drawn exposure order for one (seed, puppet, day) key.
///
/// The first `n` items are the day's exposure sequence; later items are
/// replacements for articles that fail to load.
pub fn exposure_order<'a>(
    pool: &'a ArticlePool,
    seed: u64,
    puppet_id: &str,
    day_index: u32,
) -> impl Iterator<Item = &'a ArticleRecord> + 'a {
    let rng = KeyedRng::new("exposure", &[seed.into(), puppet_id.into(), day_index.into()]);
    Permutation::new(pool.len(), rng).map(move |i| &pool.articles[i])
}

/// Sample `n` distinct articles without replacement, keyed by
/// `(seed, puppet_id, day_index)`.
pub fn sample_exposure(
    pool: &ArticlePool,
    n: usize,
    seed: u64,
    puppet_id: &str,
    day_index: u32,
) -> Result<ExposureSequence> {
    if n > pool.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: pool.len(),
        });
    }
    let articles = exposure_order(pool, seed, puppet_id, day_index)
        .take(n)
        .cloned()
        .collect();
    Ok(ExposureSequence {
        puppet_id: puppet_id.to_string(),
        day_index,
        articles,
        seed,
    })
}

/// Write records as JSONL.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
