//! Deterministic synthetic corpora for experiments and tests.
//!
//! The sentence corpus is a templated grammar with topical word sets: each
//! sentence commits to one topic and fills every content slot from that
//! topic's vocabulary. The topic is therefore a genuine latent variable —
//! informative for reconstruction across the whole sentence — which is what
//! makes the corpus useful for studying posterior collapse. Every sentence
//! additionally ends with two closing slots (manner, time) drawn
//! independently of the topic and of each other, so the final positions
//! carry information that no sentence prefix predicts.
//!
//! The dialogue corpus scripts short prompt/response exchanges where every
//! prompt admits several distinct responses; the same context recurs with
//! different continuations, making response generation one-to-many.

use std::path::Path;

use crate::autodiff::rng::RngState;
use crate::{Error, Result};

struct Topic {
    nouns: &'static [&'static str],
    verbs: &'static [&'static str],
    adjectives: &'static [&'static str],
    places: &'static [&'static str],
}

const TOPICS: [Topic; 7] = [
    Topic {
        nouns: &["storm", "breeze", "cloud"],
        verbs: &["drifts", "rumbles", "fades"],
        adjectives: &["grey", "cold"],
        places: &["ridge", "valley"],
    },
    Topic {
        nouns: &["trader", "clerk", "vendor"],
        verbs: &["haggles", "counts", "bargains"],
        adjectives: &["busy", "shrewd"],
        places: &["market", "stall"],
    },
    Topic {
        nouns: &["fiddle", "drummer", "chorus"],
        verbs: &["plays", "hums", "echoes"],
        adjectives: &["gentle", "loud"],
        places: &["hall", "tavern"],
    },
    Topic {
        nouns: &["gardener", "rose", "hedge"],
        verbs: &["blooms", "wilts", "grows"],
        adjectives: &["green", "thorny"],
        places: &["garden", "orchard"],
    },
    Topic {
        nouns: &["sailor", "ferry", "gull"],
        verbs: &["docks", "circles", "departs"],
        adjectives: &["salty", "weathered"],
        places: &["harbor", "pier"],
    },
    Topic {
        nouns: &["owl", "fox", "badger"],
        verbs: &["prowls", "listens", "burrows"],
        adjectives: &["quiet", "wild"],
        places: &["forest", "thicket"],
    },
    Topic {
        nouns: &["baker", "loaf", "oven"],
        verbs: &["rises", "cools", "crackles"],
        adjectives: &["warm", "golden"],
        places: &["bakery", "kitchen"],
    },
];

const MANNERS: [&str; 8] =
    ["slowly", "boldly", "calmly", "softly", "swiftly", "barely", "proudly", "idly"];

const WHENS: [&str; 8] =
    ["today", "tonight", "soon", "often", "twice", "early", "late", "nightly"];

/// `count` sentences from the templated grammar, deterministically derived
/// from `seed`. Distinct sentence shapes share function words; all content
/// words come from one topic per sentence, except the two closing slots,
/// which are drawn from the topic-independent manner and time lists.
pub fn templated_sentences(count: usize, seed: u64) -> Vec<String> {
    let mut rng = RngState::new(seed).derive("sentences", 0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let topic = &TOPICS[rng.below(TOPICS.len())];
        let noun = topic.nouns[rng.below(topic.nouns.len())];
        let verb = topic.verbs[rng.below(topic.verbs.len())];
        let adj = topic.adjectives[rng.below(topic.adjectives.len())];
        let place = topic.places[rng.below(topic.places.len())];
        let other = topic.nouns[rng.below(topic.nouns.len())];
        let manner = MANNERS[rng.below(MANNERS.len())];
        let when = WHENS[rng.below(WHENS.len())];
        let sentence = match rng.below(6) {
            0 => format!("the {adj} {noun} {verb} at the {place} {manner} {when}"),
            1 => format!("a {adj} {noun} {verb} near the {place} {manner} {when}"),
            2 => format!("the {adj} {noun} {verb} by the {place} {manner} {when}"),
            3 => format!("{noun} and {other} {verb} at the {place} {manner} {when}"),
            4 => format!("the {noun} near the {place} {verb} {manner} {when}"),
            _ => format!("a {noun} {verb} at the {place} {manner} {when}"),
        };
        out.push(sentence);
    }
    out
}

struct Exchange {
    prompt: &'static str,
    responses: &'static [&'static str],
}

const EXCHANGES: [Exchange; 8] = [
    Exchange {
        prompt: "how is the weather out there",
        responses: &[
            "rainy and very grey",
            "sunny all day long",
            "foggy near the bay",
            "windy since this morning",
            "mild for late autumn",
            "stormy with loud thunder",
            "freezing so dress warm",
            "humid like a greenhouse",
        ],
    },
    Exchange {
        prompt: "what did you cook tonight",
        responses: &[
            "soup with garlic bread",
            "rice and roasted beets",
            "omelette with fresh chives",
            "fish over lemon greens",
            "stew from last sunday",
            "pasta in sage butter",
            "dumplings my own way",
            "nothing i ordered in",
        ],
    },
    Exchange {
        prompt: "where are you travelling next month",
        responses: &[
            "north to the mountains",
            "somewhere quiet by the coast",
            "nowhere work keeps me",
            "home to see my sister",
            "abroad for two weeks",
            "upstate with old friends",
            "inland along the river",
            "undecided until pay day",
        ],
    },
    Exchange {
        prompt: "did you finish the book yet",
        responses: &[
            "yes the ending surprised me",
            "no the middle drags",
            "almost twenty pages left",
            "barely past the preface",
            "twice i loved it",
            "sadly i lost it",
            "slowly but surely",
            "skipped to the final chapter",
        ],
    },
    Exchange {
        prompt: "how was the concert last night",
        responses: &[
            "loud but truly joyful",
            "crowded so we left",
            "magical from start to finish",
            "short yet very sweet",
            "disappointing after the hype",
            "perfect under the stars",
            "strange in a good way",
            "cancelled at the last minute",
        ],
    },
    Exchange {
        prompt: "any plans for the weekend",
        responses: &[
            "painting the old fence",
            "hiking up the ridge",
            "sleeping then more sleeping",
            "helping my neighbour move",
            "baking for the fair",
            "fishing at dawn",
            "gardening if it stays dry",
            "studying for the exam",
        ],
    },
    Exchange {
        prompt: "how is the new job going",
        responses: &[
            "busy but rewarding",
            "slow during the summer",
            "great my team is kind",
            "stressful near deadlines",
            "fine once coffee kicks in",
            "challenging in every way",
            "quiet since the merger",
            "unclear they keep reorganising",
        ],
    },
    Exchange {
        prompt: "what are you listening to lately",
        responses: &[
            "jazz from the sixties",
            "piano pieces at night",
            "podcasts about history",
            "folk songs my mother sang",
            "nothing silence is nice",
            "strings mostly cello",
            "radio whatever plays",
            "choirs from the baltics",
        ],
    },
];

/// Fixed opening pairs: the reply is a deterministic function of the
/// greeting, so the opening carries no response-side uncertainty.
const OPENERS: [(&str, &str); 4] = [
    ("hello there", "hi good to see you"),
    ("good morning", "morning to you too"),
    ("hey friend", "hey what a day"),
    ("evening all", "a fine evening indeed"),
];

/// `count` scripted conversations, one per line with utterances joined by
/// tabs: greeting, its fixed reply, a prompt, and a response drawn at random
/// from that prompt's answer set. The small greeting and prompt inventories
/// make identical contexts recur many times with different valid
/// continuations, so a response is genuinely ambiguous given its context.
pub fn scripted_conversations(count: usize, seed: u64) -> Vec<String> {
    let mut rng = RngState::new(seed).derive("dialogues", 0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (greeting, reply) = OPENERS[rng.below(OPENERS.len())];
        let exchange = &EXCHANGES[rng.below(EXCHANGES.len())];
        let response = exchange.responses[rng.below(exchange.responses.len())];
        out.push([greeting, reply, exchange.prompt, response].join("\t"));
    }
    out
}

/// Write lines to a file, newline-terminated.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
