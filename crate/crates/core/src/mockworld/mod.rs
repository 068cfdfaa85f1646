//! Deterministic simulated ecosystem: synthetic news sites carrying
//! third-party trackers and a video platform whose homepage recommender
//! reacts to tracked browsing with a tunable effect size.
//!
//! The recommender draws `k` distinct videos by weighted sampling without
//! replacement (Efraimidis–Spirakis keys). A video of topic `t` has weight
//!
//! ```text
//! base_rank_weight * (1 + effect_size * topic_counts[t] / max(1, sum(topic_counts)))
//! ```
//!
//! The uniforms behind the keys depend only on (world seed, profile,
//! request counter), so raising the effect size can only move videos of the
//! tracked topics up the ranking of a given draw.

mod text;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{ArticlePool, ArticleRecord, ClaimRecord, Ideology, OutletRecord, PoolLabel, Verdict};
use crate::seeding::{derive_seed, KeyedRng};

pub use text::{MISINFO, SPORTS};

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("404: no simulated page at {0}")]
    NotFound(String),
    #[error("no video tagged {0:?} in the catalog")]
    NoSuchTopic(String),
    #[error("homepage size must be positive")]
    BadK,
    #[error("profile store: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile store: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, WorldError>;

fn default_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 11, 3, 0, 0, 0)
        .single()
        .expect("valid epoch")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    /// Number of topics, between 6 and 12. The first six are always sports,
    /// misinfo and the four ideology topics.
    pub n_topics: usize,
    pub effect_size: f64,
    pub catalog_size: usize,
    /// Fraction of the catalog in the misinfo topic. The rest is spread
    /// evenly over the other topics.
    pub misinfo_share: f64,
    pub trackers_per_article: u32,
    pub homepage_size: usize,
    pub outlets_per_ideology: usize,
    pub articles_per_outlet: usize,
    pub misinformation_articles: usize,
    pub claims: usize,
    /// Probability that a generated article page shows a consent banner.
    pub banner_rate: f64,
    /// URLs that always fail to load.
    pub dead_urls: Vec<String>,
    /// Virtual time of day 0.
    pub epoch: DateTime<Utc>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_topics: 8,
            effect_size: 0.0,
            catalog_size: 500,
            misinfo_share: 0.35,
            trackers_per_article: 2,
            homepage_size: 50,
            outlets_per_ideology: 50,
            articles_per_outlet: 20,
            misinformation_articles: 2000,
            claims: 300,
            banner_rate: 0.6,
            dead_urls: Vec::new(),
            epoch: default_epoch(),
        }
    }
}

impl WorldConfig {
    fn misinfo_videos(&self) -> usize {
        (self.misinfo_share * self.catalog_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WorldError::Config(m.into()));
        if !(6..=text::TOPICS.len()).contains(&self.n_topics) {
            return bad("n_topics must be between 6 and 12");
        }
        if !(0.0..=1.0).contains(&self.effect_size) {
            return bad("effect_size must lie in [0, 1]");
        }
        if !(self.misinfo_share > 0.0 && self.misinfo_share < 1.0) {
            return bad("misinfo_share must lie in (0, 1)");
        }
        let misinfo = self.misinfo_videos();
        if misinfo == 0 || self.catalog_size - misinfo < self.n_topics - 1 {
            return bad("catalog_size must cover every topic");
        }
        if self.homepage_size == 0 {
            return bad("homepage_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.banner_rate) {
            return bad("banner_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockVideo {
    pub video_id: String,
    pub topic: String,
    pub title: String,
    pub channel: String,
    pub transcript: String,
    pub base_rank_weight: f64,
}

/// Topic visits linked to one profile through third-party trackers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerProfile {
    pub profile_ref: String,
    pub topic_counts: BTreeMap<String, u64>,
}

impl TrackerProfile {
    pub fn total(&self) -> u64 {
        self.topic_counts.values().sum()
    }
}

/// Everything the simulator keeps about one browser profile: client storage
/// (platform identifier, watch history, virtual clock) and what the
/// platform's trackers learned about it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileState {
    pub identifier: Option<String>,
    pub watched: Vec<String>,
    pub tracker: TrackerProfile,
    pub homepage_requests: u64,
    pub clock_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticlePage {
    pub topic: String,
    pub banner: bool,
    pub trackers: u32,
}

/// Synthetic corpora matching the world's article pages and claim texts.
#[derive(Debug, Clone, Default)]
pub struct GeneratedCorpus {
    pub outlets: Vec<OutletRecord>,
    /// Ideology articles followed by misinformation articles.
    pub articles: Vec<ArticleRecord>,
    pub claims: Vec<ClaimRecord>,
}

pub struct MockWorld {
    config: WorldConfig,
    topics: Vec<&'static str>,
    catalog: Vec<MockVideo>,
    by_topic: HashMap<&'static str, Vec<usize>>,
    pages: HashMap<String, ArticlePage>,
    corpus: GeneratedCorpus,
    profiles: Mutex<HashMap<String, ProfileState>>,
    state_dir: Option<PathBuf>,
}

pub fn topic_for_pool(label: PoolLabel) -> &'static str {
    match label {
        PoolLabel::Misinformation => MISINFO,
        other => other.ideology().expect("ideology").as_str(),
    }
}

fn random_date(rng: &mut KeyedRng, from: NaiveDate, to: NaiveDate) -> NaiveDate {
    let span = (to - from).num_days().max(0) as u64;
    from + Duration::days(rng.below(span + 1) as i64)
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

impl MockWorld {
    /// Build the catalog, article pages and corpora for `config`.
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let topics: Vec<&'static str> = text::TOPICS[..config.n_topics].iter().map(|t| t.name).collect();

        let mut rng = KeyedRng::new("world-catalog", &[config.seed.into()]);
        let mut catalog = Vec::with_capacity(config.catalog_size);
        let mut by_topic: HashMap<&'static str, Vec<usize>> = HashMap::new();
        let others: Vec<&text::Topic> = text::TOPICS[..config.n_topics]
            .iter()
            .filter(|t| t.name != MISINFO)
            .collect();
        let (n, m) = (config.catalog_size, config.misinfo_videos());
        let mut next_other = 0;
        for i in 0..n {
            // Misinfo videos are spread evenly through the id range.
            let topic = if (i + 1) * m / n > i * m / n {
                text::topic(MISINFO).expect("misinfo topic")
            } else {
                next_other += 1;
                others[(next_other - 1) % others.len()]
            };
            let title = text::video_title(&mut rng, topic);
            let transcript = text::video_transcript(&mut rng, topic);
            let channel = format!("{}-channel-{:02}", topic.name, rng.below(20));
            let base_rank_weight = rng.uniform(0.5, 1.5);
            by_topic.entry(topic.name).or_default().push(i);
            catalog.push(MockVideo {
                video_id: format!("sim-v{i:05}"),
                topic: topic.name.to_string(),
                title,
                channel,
                transcript,
                base_rank_weight,
            });
        }

        let mut world = Self {
            topics,
            catalog,
            by_topic,
            pages: HashMap::new(),
            corpus: GeneratedCorpus::default(),
            profiles: Mutex::new(HashMap::new()),
            state_dir: None,
            config,
        };
        world.generate_corpus();
        Ok(world)
    }

    fn generate_corpus(&mut self) {
        let cfg = &self.config;
        let mut rng = KeyedRng::new("world-corpus", &[cfg.seed.into()]);
        let mut corpus = GeneratedCorpus::default();

        for ideology in Ideology::ALL {
            for k in 0..cfg.outlets_per_ideology {
                let outlet_id = format!("{ideology}-{k:02}");
                let domain = format!("{ideology}-news-{k:02}.example");
                for j in 0..cfg.articles_per_outlet {
                    corpus.articles.push(ArticleRecord {
                        url: format!("https://{domain}/article/{j:03}"),
                        outlet_id: Some(outlet_id.clone()),
                        pool_label: ideology.into(),
                        published_at: Some(random_date(&mut rng, ymd(2020, 1, 1), ymd(2025, 10, 31))),
                    });
                }
                corpus.outlets.push(OutletRecord {
                    outlet_id,
                    domain,
                    bias_label: ideology,
                });
            }
        }
        for i in 0..cfg.misinformation_articles {
            let site = rng.below(40);
            corpus.articles.push(ArticleRecord {
                url: format!("https://misinfo-site-{site:02}.example/story/{i:05}"),
                outlet_id: None,
                pool_label: PoolLabel::Misinformation,
                // A slice falls outside the default 2020-2025 window.
                published_at: Some(random_date(&mut rng, ymd(2019, 1, 1), ymd(2025, 12, 31))),
            });
        }

        let misinfo = text::topic(MISINFO).expect("misinfo topic");
        let other = text::topic("finance").expect("finance topic");
        for i in 0..cfg.claims {
            let roll = rng.unit();
            let (verdict, topic) = if roll < 0.7 {
                (Verdict::False, misinfo)
            } else if roll < 0.9 {
                (Verdict::Misleading, misinfo)
            } else {
                (Verdict::Other, other)
            };
            corpus.claims.push(ClaimRecord {
                claim_id: format!("claim-{i:05}"),
                text: text::claim_text(&mut rng, topic),
                verdict,
                checked_at: random_date(&mut rng, ymd(2019, 6, 1), ymd(2026, 3, 31)),
            });
        }

        let articles = std::mem::take(&mut corpus.articles);
        for a in &articles {
            self.register_article(a);
        }
        corpus.articles = articles;
        self.corpus = corpus;
    }

    /// Serve `article` as a page tagged with its pool's topic. Idempotent.
    pub fn register_article(&mut self, article: &ArticleRecord) {
        if self.pages.contains_key(&article.url) {
            return;
        }
        let banner = KeyedRng::new("banner", &[self.config.seed.into(), article.url.as_str().into()])
            .chance(self.config.banner_rate);
        self.pages.insert(
            article.url.clone(),
            ArticlePage {
                topic: topic_for_pool(article.pool_label).to_string(),
                banner,
                trackers: self.config.trackers_per_article,
            },
        );
    }

    pub fn register_pool(&mut self, pool: &ArticlePool) {
        for a in &pool.articles {
            self.register_article(a);
        }
    }

    /// Persist profile state as `<dir>/<profile_ref>.json` and load it back
    /// lazily, so simulated profiles survive process restarts.
    pub fn with_state_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        self.state_dir = Some(dir);
        Ok(self)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn topics(&self) -> &[&'static str] {
        &self.topics
    }

    pub fn catalog(&self) -> &[MockVideo] {
        &self.catalog
    }

    pub fn corpus(&self) -> &GeneratedCorpus {
        &self.corpus
    }

    pub fn page(&self, url: &str) -> Option<&ArticlePage> {
        self.pages.get(url)
    }

    pub fn is_dead(&self, url: &str) -> bool {
        self.config.dead_urls.iter().any(|u| u == url)
    }

    fn state_path(&self, profile_ref: &str) -> Option<PathBuf> {
        self.state_dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", sanitize(profile_ref))))
    }

    fn with_profile<R>(&self, profile_ref: &str, f: impl FnOnce(&mut ProfileState) -> R) -> Result<R> {
        let mut profiles = self.profiles.lock().expect("profile lock poisoned");
        if !profiles.contains_key(profile_ref) {
            let state = match self.state_path(profile_ref) {
                Some(p) if p.exists() => serde_json::from_slice(&fs::read(&p)?)?,
                _ => ProfileState {
                    tracker: TrackerProfile {
                        profile_ref: profile_ref.to_string(),
                        ..Default::default()
                    },
                    ..Default::default()
                },
            };
            profiles.insert(profile_ref.to_string(), state);
        }
        let state = profiles.get_mut(profile_ref).expect("inserted above");
        let out = f(state);
        if let Some(path) = self.state_path(profile_ref) {
            write_atomic(&path, &serde_json::to_vec_pretty(state)?)?;
        }
        Ok(out)
    }

    /// Wipe all state of a profile: storage, history and tracker linkage.
    pub fn reset_profile(&self, profile_ref: &str) -> Result<()> {
        self.with_profile(profile_ref, |s| {
            *s = ProfileState {
                tracker: TrackerProfile {
                    profile_ref: profile_ref.to_string(),
                    ..Default::default()
                },
                ..Default::default()
            }
        })
    }

    pub fn profile(&self, profile_ref: &str) -> Result<ProfileState> {
        self.with_profile(profile_ref, |s| s.clone())
    }

    pub fn tracker_profile(&self, profile_ref: &str) -> Result<TrackerProfile> {
        self.with_profile(profile_ref, |s| s.tracker.clone())
    }

    pub fn set_clock(&self, profile_ref: &str, clock_ms: i64) -> Result<()> {
        self.with_profile(profile_ref, |s| s.clock_ms = clock_ms)
    }

    /// A page view on a news article. With tracking allowed, the article's
    /// trackers fire and the visit is linked to the profile.
    pub fn serve_article_visit(&self, profile_ref: &str, url: &str, tracking_allowed: bool) -> Result<u32> {
        if self.is_dead(url) {
            return Err(WorldError::NotFound(url.to_string()));
        }
        let page = self
            .pages
            .get(url)
            .ok_or_else(|| WorldError::NotFound(url.to_string()))?;
        if !tracking_allowed {
            return Ok(0);
        }
        self.with_profile(profile_ref, |s| {
            *s.tracker.topic_counts.entry(page.topic.clone()).or_default() += 1;
            if s.identifier.is_none() {
                s.identifier = Some(format!("sim-id-{}", derive_seed("identifier", &[profile_ref.into()])));
            }
        })?;
        Ok(page.trackers)
    }

    /// Watch one video of `topic`, chosen by `choice`. Returns its id.
    pub fn watch(&self, profile_ref: &str, topic: &str, choice: u64) -> Result<String> {
        let candidates = self
            .by_topic
            .get(topic)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| WorldError::NoSuchTopic(topic.to_string()))?;
        let video = &self.catalog[candidates[(choice % candidates.len() as u64) as usize]];
        let id = video.video_id.clone();
        self.with_profile(profile_ref, |s| {
            if s.identifier.is_none() {
                s.identifier = Some(format!("sim-id-{}", derive_seed("identifier", &[profile_ref.into()])));
            }
            s.watched.push(id.clone());
        })?;
        Ok(id)
    }

    /// Topic weight multiplier for a tracker profile.
    fn boost(&self, tracker: &TrackerProfile, topic: &str) -> f64 {
        if self.config.effect_size == 0.0 {
            return 1.0;
        }
        let total = tracker.total().max(1) as f64;
        let count = tracker.topic_counts.get(topic).copied().unwrap_or(0) as f64;
        1.0 + self.config.effect_size * count / total
    }

    /// Homepage for a profile. Empty until the profile has watched a video.
    pub fn recommend_homepage(&self, profile_ref: &str, k: usize) -> Result<Vec<MockVideo>> {
        if k == 0 {
            return Err(WorldError::BadK);
        }
        let drawn = self.with_profile(profile_ref, |s| {
            if s.watched.is_empty() {
                return None;
            }
            let request = s.homepage_requests;
            s.homepage_requests += 1;
            Some((s.tracker.clone(), request))
        })?;
        let Some((tracker, request)) = drawn else {
            return Ok(Vec::new());
        };
        Ok(self.draw_homepage(&tracker, profile_ref, request, k))
    }

    /// One weighted draw without replacement, fully determined by the key.
    pub fn draw_homepage(&self, tracker: &TrackerProfile, profile_ref: &str, request: u64, k: usize) -> Vec<MockVideo> {
        let mut rng = KeyedRng::new(
            "homepage",
            &[self.config.seed.into(), profile_ref.into(), request.into()],
        );
        let boosts: HashMap<&str, f64> = self.topics.iter().map(|t| (*t, self.boost(tracker, t))).collect();
        let mut keyed: Vec<(f64, usize)> = self
            .catalog
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let w = v.base_rank_weight * boosts[v.topic.as_str()];
                (rng.unit_open().ln() / w, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        keyed
            .into_iter()
            .take(k)
            .map(|(_, i)| self.catalog[i].clone())
            .collect()
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}
