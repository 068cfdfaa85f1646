use std::collections::BTreeMap;

use audit_core::matcher::{score_video, ClaimIndex, HashEmbedder};
use audit_core::mockworld::{MockWorld, TrackerProfile, WorldConfig, MISINFO, SPORTS};
use audit_core::session::VideoRecord;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn world(effect: f64) -> MockWorld {
    MockWorld::new(WorldConfig {
        seed: 5,
        effect_size: effect,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn concentrated(topic: &str, count: u64) -> TrackerProfile {
    TrackerProfile {
        profile_ref: "p".into(),
        topic_counts: BTreeMap::from([(topic.to_string(), count)]),
    }
}

/// Exact first-position probability of each topic: the first key of an
/// Efraimidis–Spirakis draw picks item i with probability w_i / Σw.
fn first_pick_probabilities(world: &MockWorld, boost: impl Fn(&str) -> f64) -> BTreeMap<String, f64> {
    let mut mass: BTreeMap<String, f64> = BTreeMap::new();
    for v in world.catalog() {
        *mass.entry(v.topic.clone()).or_default() += v.base_rank_weight * boost(&v.topic);
    }
    let total: f64 = mass.values().sum();
    mass.values_mut().for_each(|m| *m /= total);
    mass
}

fn chi_square_p(world: &MockWorld, tracker: &TrackerProfile, expected: &BTreeMap<String, f64>, draws: u64) -> f64 {
    let mut observed: BTreeMap<String, f64> = expected.keys().map(|k| (k.clone(), 0.0)).collect();
    for r in 0..draws {
        let top = world.draw_homepage(tracker, "chi", r, 1);
        *observed.get_mut(&top[0].topic).unwrap() += 1.0;
    }
    let n = draws as f64;
    let stat: f64 = expected
        .iter()
        .map(|(t, p)| {
            let e = p * n;
            (observed[t] - e).powi(2) / e
        })
        .sum();
    let dof = (expected.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

#[test]
fn zero_effect_ignores_tracking() {
    let w = world(0.0);
    let expected = first_pick_probabilities(&w, |_| 1.0);
    let p = chi_square_p(&w, &concentrated(MISINFO, 500), &expected, 3000);
    assert!(p > 0.001, "chi-square p = {p}");
    for r in 0..20 {
        assert_eq!(
            w.draw_homepage(&concentrated(MISINFO, 500), "x", r, 30),
            w.draw_homepage(&TrackerProfile::default(), "x", r, 30)
        );
    }
}

#[test]
fn boosted_first_pick_matches_formula() {
    let effect = 0.5;
    let w = world(effect);
    let tracker = TrackerProfile {
        profile_ref: "p".into(),
        topic_counts: BTreeMap::from([(MISINFO.to_string(), 30), (SPORTS.to_string(), 10)]),
    };
    let expected = first_pick_probabilities(&w, |t| match t {
        MISINFO => 1.0 + effect * 30.0 / 40.0,
        SPORTS => 1.0 + effect * 10.0 / 40.0,
        _ => 1.0,
    });
    let p = chi_square_p(&w, &tracker, &expected, 3000);
    assert!(p > 0.001, "chi-square p = {p}");
}

fn share(world: &MockWorld, tracker: &TrackerProfile, request: u64) -> f64 {
    let page = world.draw_homepage(tracker, "share", request, 30);
    page.iter().filter(|v| v.topic == MISINFO).count() as f64 / page.len() as f64
}

#[test]
fn effect_is_monotone_in_epsilon() {
    let tracker = concentrated(MISINFO, 40);
    let levels = [0.0, 0.25, 0.5, 1.0];
    let worlds: Vec<MockWorld> = levels.iter().map(|e| world(*e)).collect();
    let mut means = Vec::new();
    for w in &worlds {
        means.push((0..50).map(|r| share(w, &tracker, r)).sum::<f64>() / 50.0);
    }
    for pair in means.windows(2) {
        assert!(pair[1] >= pair[0], "{means:?}");
    }
    assert!(means[2] > means[0], "{means:?}");
    // Paired draws share uniforms, so the boosted share never falls.
    for r in 0..50 {
        assert!(share(&worlds[2], &tracker, r) >= share(&worlds[0], &tracker, r));
    }
}

#[test]
fn restrictive_visits_leave_no_trace() {
    let w = world(0.5);
    let urls: Vec<String> = w.corpus().articles.iter().take(40).map(|a| a.url.clone()).collect();
    for url in &urls {
        assert_eq!(w.serve_article_visit("private", url, false).unwrap(), 0);
        assert!(w.serve_article_visit("open", url, true).unwrap() >= 1);
    }
    assert_eq!(w.tracker_profile("private").unwrap().total(), 0);
    assert_eq!(w.tracker_profile("open").unwrap().total(), 40);
    w.watch("private", SPORTS, 0).unwrap();
    w.watch("pristine", SPORTS, 0).unwrap();
    let a = w.recommend_homepage("private", 30).unwrap();
    let b = w.draw_homepage(&TrackerProfile::default(), "private", 0, 30);
    assert_eq!(a, b);
}

#[test]
fn misinformation_videos_match_claims_better_than_sports() {
    let w = world(0.5);
    let embedder = HashEmbedder::default();
    let index: ClaimIndex<f64> = ClaimIndex::build(&w.corpus().claims, &embedder).unwrap();
    let mut misinfo_min = f64::INFINITY;
    let mut sports_max = f64::NEG_INFINITY;
    for v in w.catalog() {
        if v.topic != MISINFO && v.topic != SPORTS {
            continue;
        }
        let record = VideoRecord {
            video_id: v.video_id.clone(),
            title: v.title.clone(),
            channel: v.channel.clone(),
            position: 1,
            transcript: Some(v.transcript.clone()),
        };
        let s = score_video(&record, &index, &embedder).unwrap().max_sim;
        if v.topic == MISINFO {
            misinfo_min = misinfo_min.min(s);
        } else {
            sports_max = sports_max.max(s);
        }
    }
    assert!(
        misinfo_min > sports_max,
        "misinfo min {misinfo_min} vs sports max {sports_max}"
    );
}

#[test]
fn same_config_same_world() {
    let a = world(0.3);
    let b = world(0.3);
    assert_eq!(a.catalog(), b.catalog());
    assert_eq!(a.corpus().claims, b.corpus().claims);
    for r in 0..5 {
        let t = concentrated(MISINFO, 3);
        assert_eq!(a.draw_homepage(&t, "q", r, 50), b.draw_homepage(&t, "q", r, 50));
    }
}
