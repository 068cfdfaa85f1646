use std::collections::HashSet;

use audit_core::corpus::{
    build_pool, exposure_order, sample_exposure, ArticlePool, ArticleRecord, DateWindow, Ideology, OutletRecord,
    PoolLabel,
};
use audit_core::experiment::Group;
use audit_core::matcher::{
    compare_phases, cosine, embed_texts, fnv1a, mann_whitney, score_video, tokenize, Aggregate, ClaimIndex,
    EmbeddingVector, HashEmbedder,
};
use audit_core::session::{dedupe_tiles, Behavior, Environment, SnapshotPhase, VideoRecord};
use audit_core::{ClaimRecord, Similarity};
use chrono::NaiveDate;
use proptest::prelude::*;

fn pool(n: usize) -> ArticlePool {
    ArticlePool {
        pool_label: PoolLabel::Misinformation,
        articles: (0..n)
            .map(|i| ArticleRecord {
                url: format!("https://site.example/{i}"),
                outlet_id: None,
                pool_label: PoolLabel::Misinformation,
                published_at: None,
            })
            .collect(),
    }
}

const WORDS: [&str; 16] = [
    "vaccine", "chip", "ballot", "rigged", "moon", "staged", "goal", "match", "flood", "hoax", "secret", "tax",
    "border", "cure", "market", "storm",
];

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..12).prop_map(|w| w.join(" "))
}

fn claims(texts: &[String]) -> Vec<ClaimRecord> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| ClaimRecord {
            claim_id: format!("c{i:02}"),
            text: t.clone(),
            verdict: audit_core::corpus::Verdict::False,
            checked_at: NaiveDate::from_ymd_opt(2023, 5, 1).unwrap(),
        })
        .collect()
}

fn video(id: &str, title: &str) -> VideoRecord {
    VideoRecord {
        video_id: id.into(),
        title: title.into(),
        channel: "ch".into(),
        position: 1,
        transcript: None,
    }
}

/// Signed hashed counts written out directly from the definition.
fn oracle_vector(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for token in text.split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        let h = fnv1a(token.to_lowercase().as_bytes());
        v[(h % dim as u64) as usize] += if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
    }
    v
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[test]
fn single_draws_are_uniform() {
    let p = pool(5);
    let draws = 10_000u32;
    let mut counts = [0u32; 5];
    for day in 0..draws {
        let s = sample_exposure(&p, 1, 77, "uniform", day).unwrap();
        let idx: usize = s.articles[0].url.rsplit('/').next().unwrap().parse().unwrap();
        counts[idx] += 1;
    }
    let n = f64::from(draws);
    let se = (0.2 * 0.8 / n).sqrt();
    for c in counts {
        let freq = f64::from(c) / n;
        assert!((freq - 0.2).abs() <= 5.0 * se, "{counts:?}");
    }
}

#[test]
fn cosine_reference_values() {
    let e = |v: Vec<f64>| EmbeddingVector::new(v);
    assert!((cosine(&e(vec![0.6, 0.8]), &e(vec![0.6, 0.8])).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cosine(&e(vec![1.0, 0.0]), &e(vec![0.0, 1.0])).unwrap(), 0.0);
    let diag = cosine(&e(vec![1.0, 0.0]), &e(vec![1.0, 1.0])).unwrap();
    assert!((diag - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
}

#[test]
fn mann_whitney_sanity() {
    let x: Vec<f64> = (0..50).map(|i| f64::from(i % 7)).collect();
    assert!(mann_whitney(&x, &x).unwrap().p_value >= 0.99);
    let low: Vec<f64> = (0..50).map(|i| f64::from(i) / 100.0).collect();
    let high: Vec<f64> = (0..50).map(|i| 1.0 + f64::from(i) / 100.0).collect();
    assert!(mann_whitney(&low, &high).unwrap().p_value <= 0.001);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exposure_has_no_duplicates(len in 1usize..200, frac in 0.0f64..=1.0, seed: u64, day in 0u32..10) {
        let p = pool(len);
        let n = ((len as f64) * frac) as usize;
        let s = sample_exposure(&p, n, seed, "pp", day).unwrap();
        prop_assert_eq!(s.articles.len(), n);
        let urls: HashSet<_> = s.articles.iter().map(|a| &a.url).collect();
        prop_assert_eq!(urls.len(), n);
        let again = sample_exposure(&p, n, seed, "pp", day).unwrap();
        prop_assert_eq!(s, again);
        prop_assert!(sample_exposure(&p, len + 1, seed, "pp", day).is_err());
    }

    #[test]
    fn exposure_order_is_a_permutation(len in 1usize..120, seed: u64) {
        let p = pool(len);
        let mut seen: Vec<&str> = exposure_order(&p, seed, "perm", 0).map(|a| a.url.as_str()).collect();
        prop_assert_eq!(seen.len(), len);
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), len);
    }

    #[test]
    fn pool_size_is_outlets_times_quota(outlets in 1usize..8, quota in 1usize..6, extra in 0usize..3) {
        let outlet_records: Vec<OutletRecord> = (0..outlets)
            .map(|k| OutletRecord { outlet_id: format!("o{k}"), domain: format!("o{k}.example"), bias_label: Ideology::Right })
            .collect();
        let articles: Vec<ArticleRecord> = (0..outlets)
            .flat_map(|k| (0..quota + extra).map(move |j| ArticleRecord {
                url: format!("https://o{k}.example/{j}"),
                outlet_id: Some(format!("o{k}")),
                pool_label: PoolLabel::Right,
                published_at: None,
            }))
            .collect();
        let built = build_pool(&outlet_records, &articles, quota).unwrap();
        prop_assert_eq!(built.len(), outlets * quota);
    }

    #[test]
    fn date_window_includes_both_ends(start in 0i64..3000, span in 0i64..3000) {
        let base = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
        let a = base + chrono::Duration::days(start);
        let b = a + chrono::Duration::days(span);
        let w = DateWindow::new(a, b).unwrap();
        prop_assert!(w.contains(a));
        prop_assert!(w.contains(b));
        prop_assert!(!w.contains(a - chrono::Duration::days(1)));
        prop_assert!(!w.contains(b + chrono::Duration::days(1)));
    }

    #[test]
    fn cosine_is_symmetric_and_scale_free(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        scale in 0.001f64..1000.0,
    ) {
        let va = EmbeddingVector::new(a);
        let vb = EmbeddingVector::new(b);
        prop_assume!(va.norm() > 1e-6 && vb.norm() > 1e-6);
        let ab = cosine(&va, &vb).unwrap();
        prop_assert!((ab - cosine(&vb, &va).unwrap()).abs() <= 1e-12);
        prop_assert!((cosine(&va.scaled(scale), &vb).unwrap() - ab).abs() <= 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
        let unit = va.normalized().unwrap();
        prop_assert!((cosine(&unit, &unit).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn embeddings_are_unit_and_batch_invariant(texts in prop::collection::vec(text_strategy(), 1..10)) {
        prop_assume!(texts.iter().all(|t| oracle_vector(t, 64).iter().any(|x| *x != 0.0)));
        let e = HashEmbedder::default();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let batch: Vec<EmbeddingVector<f64>> = embed_texts(&e, &refs).unwrap();
        for (text, v) in refs.iter().zip(&batch) {
            let single: Vec<EmbeddingVector<f64>> = embed_texts(&e, &[*text]).unwrap();
            prop_assert_eq!(&single[0], v);
            prop_assert!((v.norm() - 1.0).abs() <= 1e-6);
            prop_assert_eq!(v.dim(), 64);
        }
        let f32s: Vec<EmbeddingVector<f32>> = embed_texts(&e, &refs).unwrap();
        prop_assert!(f32s.iter().all(|v| (v.norm() - 1.0).abs() <= 1e-6));
    }

    #[test]
    fn scores_match_brute_force(
        videos in prop::collection::vec(text_strategy(), 1..20),
        claim_texts in prop::collection::vec(text_strategy(), 1..20),
    ) {
        let e = HashEmbedder::default();
        let nonzero = |t: &String| oracle_vector(t, 64).iter().any(|x| *x != 0.0);
        prop_assume!(claim_texts.iter().all(nonzero));
        let index: ClaimIndex<f64> = ClaimIndex::build(&claims(&claim_texts), &e).unwrap();
        for (i, title) in videos.iter().enumerate() {
            let v = video(&format!("v{i}"), title);
            if !nonzero(title) {
                prop_assert!(score_video(&v, &index, &e).is_err());
                continue;
            }
            let got = score_video(&v, &index, &e).unwrap();
            let vv = oracle_vector(title, 64);
            let mut best = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for c in &claim_texts {
                let s = oracle_cosine(&vv, &oracle_vector(c, 64));
                sum += s;
                if s > best {
                    best = s;
                }
            }
            prop_assert!((got.max_sim - best).abs() <= 1e-9);
            prop_assert!((got.mean_sim - sum / claim_texts.len() as f64).abs() <= 1e-9);
            prop_assert!(got.mean_sim <= got.max_sim + 1e-12);
            let top = claim_texts[got.top_claim_id[1..].parse::<usize>().unwrap()].clone();
            prop_assert!((oracle_cosine(&vv, &oracle_vector(&top, 64)) - got.max_sim).abs() <= 1e-9);
        }
    }

    #[test]
    fn adding_a_claim_never_lowers_max(
        title in text_strategy(),
        claim_texts in prop::collection::vec(text_strategy(), 1..10),
        extra in text_strategy(),
    ) {
        let nonzero = |t: &String| oracle_vector(t, 64).iter().any(|x| *x != 0.0);
        prop_assume!(nonzero(&title) && nonzero(&extra) && claim_texts.iter().all(nonzero));
        let e = HashEmbedder::default();
        let before: ClaimIndex<f64> = ClaimIndex::build(&claims(&claim_texts), &e).unwrap();
        let mut more = claim_texts.clone();
        more.push(extra);
        let after: ClaimIndex<f64> = ClaimIndex::build(&claims(&more), &e).unwrap();
        let v = video("v", &title);
        prop_assert!(score_video(&v, &after, &e).unwrap().max_sim >= score_video(&v, &before, &e).unwrap().max_sim);
    }

    #[test]
    fn u_statistic_matches_pair_count(
        x in prop::collection::vec(0u8..6, 1..30),
        y in prop::collection::vec(0u8..6, 1..30),
    ) {
        let xf: Vec<f64> = x.iter().map(|v| f64::from(*v)).collect();
        let yf: Vec<f64> = y.iter().map(|v| f64::from(*v)).collect();
        let mut pairs = 0.0;
        for a in &xf {
            for b in &yf {
                pairs += if b > a { 1.0 } else if b == a { 0.5 } else { 0.0 };
            }
        }
        let r = mann_whitney(&xf, &yf).unwrap();
        prop_assert_eq!(r.u, pairs);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn delta_is_difference_of_means(
        base in prop::collection::vec(-1.0f64..1.0, 1..40),
        post in prop::collection::vec(-1.0f64..1.0, 1..40),
    ) {
        let wrap = |v: &f64| Similarity {
            video_id: "v".into(),
            max_sim: *v,
            mean_sim: *v,
            top_claim_id: "c".into(),
            used_transcript: false,
        };
        let b: Vec<_> = base.iter().map(wrap).collect();
        let p: Vec<_> = post.iter().map(wrap).collect();
        let c = compare_phases(Group::Left, Environment::TrackingPermissive, &b, &p, Aggregate::Max, None).unwrap();
        let mb = base.iter().sum::<f64>() / base.len() as f64;
        let mp = post.iter().sum::<f64>() / post.len() as f64;
        prop_assert!((c.delta - (mp - mb)).abs() <= 1e-12);
        prop_assert!((c.delta - (c.post_mean - c.baseline_mean)).abs() <= 1e-12);
        prop_assert_eq!((c.n_baseline, c.n_post), (base.len(), post.len()));
    }

    #[test]
    fn deduped_tiles_form_valid_snapshots(
        raw in prop::collection::vec((0u8..15, 1u32..40), 1..60),
        top_k in 1usize..30,
    ) {
        let tiles: Vec<VideoRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, (id, _))| VideoRecord { position: i as u32 + 1, ..video(&format!("v{id}"), "t") })
            .collect();
        let kept = dedupe_tiles(tiles, top_k);
        prop_assert!(kept.len() <= top_k);
        prop_assert_eq!(kept[0].position, 1);
        let snap = audit_core::RecommendationSnapshot {
            puppet_id: "p".into(),
            day_index: 0,
            phase: SnapshotPhase::Baseline,
            captured_at: chrono::Utc::now(),
            videos: kept,
        };
        prop_assert!(snap.validate().is_ok());
    }

    #[test]
    fn behaviour_is_bounded_and_deterministic(seed: u64) {
        let b = Behavior::from_seed(seed);
        prop_assert!((20.0..=60.0).contains(&b.dwell_seconds));
        prop_assert!((3..=8).contains(&b.scroll_fractions.len()));
        prop_assert!(b.scroll_fractions.iter().all(|f| (0.0..=1.0).contains(f)));
        prop_assert_eq!(b, Behavior::from_seed(seed));
    }

    #[test]
    fn tokens_are_lowercase_alphanumeric(text in "[A-Za-z0-9 ,.!?-]{0,40}") {
        for t in tokenize(&text) {
            prop_assert!(!t.is_empty());
            prop_assert!(t.chars().all(|c| c.is_alphanumeric() && !c.is_uppercase()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stored_visits_round_trip(
        ms in 1_600_000_000_000i64..1_900_000_000_000,
        dwell_ms in 20_000u32..=60_000,
        scrolls in 0u32..9,
        substituted in prop::option::of("[a-z]{1,8}"),
        trackers in 0u32..5,
    ) {
        use audit_core::session::{ConsentOutcome, VisitLog};
        use audit_core::store::{Record, RunArchive};
        let dir = tempfile::tempdir().unwrap();
        let archive = RunArchive::create(dir.path().join("a"), "h").unwrap();
        let log = VisitLog {
            url: "https://x.example/a".into(),
            day_index: 3,
            started_at: chrono::DateTime::from_timestamp_millis(ms).unwrap(),
            dwell_seconds: f64::from(dwell_ms) / 1000.0,
            consent_outcome: ConsentOutcome::NoneFound,
            scroll_events: scrolls,
            substituted_for: substituted.map(|s| format!("https://{s}.example/")),
            trackers_fired: trackers,
        };
        let seq = archive.append("p", &Record::Visit(log.clone())).unwrap();
        let scan = archive.scan_puppet("p").unwrap();
        prop_assert_eq!(scan.records.len(), 1);
        prop_assert_eq!(scan.records[0].seq, seq);
        prop_assert_eq!(&scan.records[0].record, &Record::Visit(log));
    }
}
