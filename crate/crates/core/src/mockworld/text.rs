//! Topic vocabularies for generated titles, transcripts and claims.
//!
//! Every topic owns a disjoint signature word list. Claims are built from
//! misinfo signature words plus claim filler, so under a bag-of-tokens
//! embedder only misinfo-topic videos share vocabulary with claims. The
//! other word lists also avoid every hash bucket (D=64) a claim word lands
//! in, which puts all non-misinfo videos at cosine exactly 0 to every claim.

use crate::seeding::KeyedRng;

pub const SPORTS: &str = "sports";
pub const MISINFO: &str = "misinfo";

pub(crate) struct Topic {
    pub name: &'static str,
    pub words: [&'static str; 12],
}

pub(crate) const TOPICS: [Topic; 12] = [
    Topic {
        name: SPORTS,
        words: [
            "match",
            "goal",
            "league",
            "striker",
            "tournament",
            "coach",
            "season",
            "highlights",
            "playoff",
            "arena",
            "umpire",
            "championship",
        ],
    },
    Topic {
        name: MISINFO,
        words: [
            "vaccine",
            "microchip",
            "hoax",
            "rigged",
            "ballots",
            "plandemic",
            "chemtrails",
            "coverup",
            "fraud",
            "depopulation",
            "censored",
            "whistleblower",
        ],
    },
    Topic {
        name: "extreme-left",
        words: [
            "revolution",
            "abolish",
            "capitalism",
            "proletariat",
            "uprising",
            "commune",
            "expropriate",
            "billionaires",
            "insurgent",
            "solidarity",
            "dismantle",
            "manifesto",
        ],
    },
    Topic {
        name: "left",
        words: [
            "progressive",
            "healthcare",
            "climate",
            "union",
            "equality",
            "voters",
            "renewable",
            "wages",
            "reform",
            "democrats",
            "inclusion",
            "housing",
        ],
    },
    Topic {
        name: "right",
        words: [
            "conservative",
            "border",
            "tariffs",
            "freedom",
            "liberty",
            "military",
            "patriots",
            "secure",
            "patriotic",
            "tradition",
            "sovereignty",
            "enterprise",
        ],
    },
    Topic {
        name: "extreme-right",
        words: [
            "elites",
            "betrayal",
            "replacement",
            "purity",
            "militia",
            "regime",
            "vigilante",
            "downfall",
            "treason",
            "uprooted",
            "bloodline",
            "crusade",
        ],
    },
    Topic {
        name: "music",
        words: [
            "album",
            "guitar",
            "orchestra",
            "melody",
            "lyrics",
            "drummer",
            "chorus",
            "remix",
            "vinyl",
            "festival",
            "acoustic",
            "symphony",
        ],
    },
    Topic {
        name: "science",
        words: [
            "telescope",
            "molecule",
            "quantum",
            "fossil",
            "genome",
            "microscope",
            "asteroid",
            "neutron",
            "experiment",
            "particle",
            "evolution",
            "galaxy",
        ],
    },
    Topic {
        name: "cooking",
        words: [
            "recipe", "grill", "baking", "pasta", "kitchen", "dough", "skillet", "simmer", "chef", "bakery", "noodles",
            "marinade",
        ],
    },
    Topic {
        name: "gaming",
        words: [
            "speedrun", "gamepad", "joystick", "quest", "boss", "level", "pixel", "loot", "raid", "esports", "respawn",
            "lobby",
        ],
    },
    Topic {
        name: "travel",
        words: [
            "passport",
            "hiking",
            "island",
            "airport",
            "resort",
            "hostel",
            "beach",
            "voyage",
            "cruise",
            "luggage",
            "safari",
            "landmarks",
        ],
    },
    Topic {
        name: "finance",
        words: [
            "stocks",
            "shares",
            "inflation",
            "assets",
            "crypto",
            "loan",
            "savings",
            "bonds",
            "investing",
            "budget",
            "earnings",
            "recession",
        ],
    },
];

const VIDEO_FILLER: [&str; 10] = [
    "official", "video", "full", "episode", "new", "today", "watch", "best", "live", "update",
];

const CLAIM_FILLER: [&str; 8] = [
    "says",
    "officials",
    "proves",
    "secretly",
    "report",
    "documents",
    "admitted",
    "leaked",
];

/// Words drawn from a claim's signature set.
pub const CLAIM_SIGNATURE_WORDS: usize = 6;
/// Distinct signature words in every video transcript.
pub const TRANSCRIPT_SIGNATURE_WORDS: usize = 9;

fn pick_distinct<'a>(rng: &mut KeyedRng, words: &[&'a str], n: usize) -> Vec<&'a str> {
    let mut pool: Vec<&str> = words.to_vec();
    let mut out = Vec::with_capacity(n);
    for i in 0..n.min(pool.len()) {
        let j = i + rng.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
        out.push(pool[i]);
    }
    out
}

pub(crate) fn video_title(rng: &mut KeyedRng, topic: &Topic) -> String {
    let mut words = pick_distinct(rng, &topic.words, 4);
    words.extend(pick_distinct(rng, &VIDEO_FILLER, 2));
    words.join(" ")
}

pub(crate) fn video_transcript(rng: &mut KeyedRng, topic: &Topic) -> String {
    let mut words = pick_distinct(rng, &topic.words, TRANSCRIPT_SIGNATURE_WORDS);
    words.extend(pick_distinct(rng, &VIDEO_FILLER, 6));
    // Interleave so the head of the transcript carries signature words.
    let mut out = Vec::with_capacity(words.len());
    let (sig, fill) = words.split_at(TRANSCRIPT_SIGNATURE_WORDS);
    for (i, w) in sig.iter().enumerate() {
        out.push(*w);
        if let Some(f) = fill.get(i) {
            out.push(*f);
        }
    }
    out.join(" ")
}

pub(crate) fn claim_text(rng: &mut KeyedRng, topic: &Topic) -> String {
    let mut words = pick_distinct(rng, &topic.words, CLAIM_SIGNATURE_WORDS);
    words.extend(pick_distinct(rng, &CLAIM_FILLER, 2));
    words.join(" ")
}

pub(crate) fn topic(name: &str) -> Option<&'static Topic> {
    TOPICS.iter().find(|t| t.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn vocabularies_are_disjoint() {
        let mut seen = HashSet::new();
        for t in &TOPICS {
            for w in t.words {
                assert!(seen.insert(w), "{w} repeated");
            }
        }
        for w in VIDEO_FILLER.iter().chain(CLAIM_FILLER.iter()) {
            assert!(seen.insert(w), "{w} repeated");
        }
    }

    #[test]
    fn only_claim_words_use_claim_buckets() {
        use crate::matcher::fnv1a;
        let bucket = |w: &str| fnv1a(w.as_bytes()) % 64;
        let misinfo = topic(MISINFO).unwrap();
        let claim: HashSet<u64> = misinfo
            .words
            .iter()
            .chain(CLAIM_FILLER.iter())
            .map(|w| bucket(w))
            .collect();
        for t in TOPICS.iter().filter(|t| t.name != MISINFO) {
            for w in t.words {
                assert!(!claim.contains(&bucket(w)), "{} word {w} shares a claim bucket", t.name);
            }
        }
        for w in VIDEO_FILLER {
            assert!(!claim.contains(&bucket(w)), "filler {w} shares a claim bucket");
        }
    }

    #[test]
    fn transcript_overlaps_every_claim() {
        // 9 of 12 in the transcript and 6 of 12 in a claim share at least 3.
        const { assert!(TRANSCRIPT_SIGNATURE_WORDS + CLAIM_SIGNATURE_WORDS >= 12 + 3) };
        let misinfo = topic(MISINFO).unwrap();
        let mut rng = KeyedRng::new("text-test", &[]);
        for _ in 0..50 {
            let t = video_transcript(&mut rng, misinfo);
            let c = claim_text(&mut rng, misinfo);
            let tw: HashSet<_> = t.split(' ').collect();
            let shared = c.split(' ').filter(|w| tw.contains(w)).count();
            assert!(shared >= 3);
        }
    }
}
