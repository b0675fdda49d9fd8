//! Seeded generators for the desk-scale text domains: persona chit-chat and
//! short narratives (the pretraining distribution), and bracketed code-like
//! text that the model never trains on.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::eval::{build_dialogue_prompt, ClassificationExample, DialogueExample};

const NAMES: &[&str] = &[
    "anna", "ben", "carla", "david", "elena", "frank", "grace", "henry", "iris", "jack", "kate", "leo", "maya",
    "nick", "olga", "paul",
];
const HOBBIES: &[&str] = &[
    "play guitar", "read books", "go hiking", "bake bread", "paint", "swim", "play chess", "watch movies",
    "work in the garden", "go running", "ride my bike", "go fishing",
];
const FOODS: &[&str] = &[
    "pizza", "pasta", "sushi", "tacos", "soup", "salad", "curry", "pancakes", "burgers", "rice", "noodles",
    "apple pie",
];
const JOBS: &[&str] = &[
    "teacher", "nurse", "chef", "farmer", "pilot", "writer", "doctor", "baker", "driver", "painter", "student",
    "lawyer",
];
const CITIES: &[&str] = &[
    "boston", "denver", "paris", "london", "berlin", "madrid", "tokyo", "chicago", "seattle", "dublin",
];
const PLACES: &[&str] = &[
    "the beach", "the park", "the lake", "the mountains", "the market", "the library", "the gym", "the river",
];
const COLORS: &[&str] = &["black", "white", "brown", "gray", "orange", "golden", "red", "spotted"];
const PETS: &[&str] = &["dog", "cat", "parrot", "rabbit", "hamster", "turtle"];
const NUMBERS: &[&str] = &["two", "three", "four", "five", "six", "seven", "eight", "ten"];
const RELATIONS: &[&str] = &["friends", "sister", "brother", "dad", "mom", "kids"];
const GENRES: &[&str] = &["jazz", "rock", "pop", "country", "classical", "folk"];
const DAYS: &[&str] = &["monday", "tuesday", "friday", "saturday", "sunday"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Topic {
    Greeting,
    Fun,
    Food,
    Job,
    Pets,
    Home,
    Music,
}

const TOPICS: &[Topic] = &[
    Topic::Fun,
    Topic::Food,
    Topic::Job,
    Topic::Pets,
    Topic::Home,
    Topic::Music,
];

fn question<R: Rng>(rng: &mut R, topic: Topic) -> String {
    let qs: &[&str] = match topic {
        Topic::Greeting => &["hi! how are you today?", "hello, how is your day going?", "hey, how are you?"],
        Topic::Fun => &["what do you do for fun?", "what are your hobbies?", "what do you like to do on weekends?"],
        Topic::Food => &["what is your favorite food?", "what do you like to eat?"],
        Topic::Job => &["what do you do for a living?", "what is your job?"],
        Topic::Pets => &["do you have any pets?", "do you like animals?"],
        Topic::Home => &["where do you live?", "where are you from?"],
        Topic::Music => &["what kind of music do you like?", "do you listen to music?"],
    };
    pick(rng, qs).to_string()
}

/// The slot word an answer to `topic` hinges on.
fn slot<R: Rng>(rng: &mut R, topic: Topic) -> &'static str {
    match topic {
        Topic::Greeting => pick(rng, PLACES),
        Topic::Fun => pick(rng, HOBBIES),
        Topic::Food => pick(rng, FOODS),
        Topic::Job => pick(rng, JOBS),
        Topic::Pets => pick(rng, PETS),
        Topic::Home => pick(rng, CITIES),
        Topic::Music => pick(rng, GENRES),
    }
}

/// An answer as `(prefix, slot, suffix)` so classification tasks can swap
/// the slot.
fn answer_parts<R: Rng>(rng: &mut R, topic: Topic) -> (String, &'static str, String) {
    let s = slot(rng, topic);
    let (pre, post) = match (topic, rng.gen_range(0..3)) {
        (Topic::Greeting, 0) => ("i am good, thanks. i just got back from".to_string(), ".".to_string()),
        (Topic::Greeting, 1) => ("pretty good! i am going to".to_string(), " later.".to_string()),
        (Topic::Greeting, _) => (
            "not bad. i spent the morning at".to_string(),
            format!(" with my {}.", pick(rng, RELATIONS)),
        ),
        (Topic::Fun, 0) => ("i like to".to_string(), ".".to_string()),
        (Topic::Fun, 1) => ("i love to".to_string(), format!(" with my {}.", pick(rng, RELATIONS))),
        (Topic::Fun, _) => ("on weekends i".to_string(), format!(" at {}.", pick(rng, PLACES))),
        (Topic::Food, 0) => ("i really like".to_string(), ".".to_string()),
        (Topic::Food, 1) => ("my favorite food is".to_string(), ".".to_string()),
        (Topic::Food, _) => ("i eat".to_string(), format!(" every {}.", pick(rng, DAYS))),
        (Topic::Job, 0) => ("i am a".to_string(), ".".to_string()),
        (Topic::Job, 1) => ("i work as a".to_string(), format!(" in {}.", pick(rng, CITIES))),
        (Topic::Job, _) => ("i am a".to_string(), format!(" and i have done it for {} years.", pick(rng, NUMBERS))),
        (Topic::Pets, 0) => (format!("yes, i have a {}", pick(rng, COLORS)), format!(" named {}.", pick(rng, NAMES))),
        (Topic::Pets, 1) => ("no, but i want a".to_string(), " someday.".to_string()),
        (Topic::Pets, _) => ("yes, my family has a".to_string(), ".".to_string()),
        (Topic::Home, 0) => ("i live in".to_string(), ".".to_string()),
        (Topic::Home, 1) => ("i am from".to_string(), format!(", near {}.", pick(rng, PLACES))),
        (Topic::Home, _) => ("i moved to".to_string(), format!(" {} years ago.", pick(rng, NUMBERS))),
        (Topic::Music, 0) => ("i listen to".to_string(), " music.".to_string()),
        (Topic::Music, 1) => ("i love".to_string(), format!(", especially when i {}.", pick(rng, HOBBIES))),
        (Topic::Music, _) => ("mostly".to_string(), format!(" on {} nights.", pick(rng, DAYS))),
    };
    (pre, s, post)
}

fn answer<R: Rng>(rng: &mut R, topic: Topic) -> String {
    let (pre, s, post) = answer_parts(rng, topic);
    format!("{pre} {s}{post}")
}

/// Alternating turns: User 1 asks, User 2 answers. Opens with a greeting
/// exchange, then `exchanges` more on distinct topics.
pub fn dialogue_turns<R: Rng>(rng: &mut R, exchanges: usize) -> Vec<String> {
    let mut turns = vec![question(rng, Topic::Greeting), answer(rng, Topic::Greeting)];
    let mut topics = TOPICS.to_vec();
    topics.shuffle(rng);
    for &t in topics.iter().cycle().take(exchanges) {
        turns.push(question(rng, t));
        turns.push(answer(rng, t));
    }
    turns
}

pub fn format_dialogue(turns: &[String]) -> String {
    turns
        .iter()
        .enumerate()
        .map(|(i, t)| format!("User {}: {}", i % 2 + 1, t))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn narrative<R: Rng>(rng: &mut R) -> String {
    let name = pick(rng, NAMES);
    let mut sentences = vec![format!("{name} is a {} from {}.", pick(rng, JOBS), pick(rng, CITIES))];
    let n = rng.gen_range(2..5);
    for _ in 0..n {
        let s = match rng.gen_range(0..5) {
            0 => format!("{name} likes to {} and eat {}.", pick(rng, HOBBIES), pick(rng, FOODS)),
            1 => format!(
                "on {}, {name} went to {} with a {} {}.",
                pick(rng, DAYS),
                pick(rng, PLACES),
                pick(rng, COLORS),
                pick(rng, PETS)
            ),
            2 => format!("{name} listens to {} music every {}.", pick(rng, GENRES), pick(rng, DAYS)),
            3 => format!("{name} has {} friends who {}.", pick(rng, NUMBERS), pick(rng, HOBBIES)),
            _ => format!("{name} cooked {} for the {}.", pick(rng, FOODS), pick(rng, RELATIONS)),
        };
        sentences.push(s);
    }
    sentences.join(" ")
}

/// Mixed dialogues and narratives separated by blank lines, at least
/// `min_bytes` long.
pub fn natural_document<R: Rng>(rng: &mut R, min_bytes: usize) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut len = 0;
    while len < min_bytes {
        let part = if rng.gen_bool(0.6) {
            let ex = rng.gen_range(1..4);
            format_dialogue(&dialogue_turns(rng, ex))
        } else {
            narrative(rng)
        };
        len += part.len() + 2;
        parts.push(part);
    }
    parts.join("\n\n")
}

fn ident<R: Rng>(rng: &mut R) -> String {
    const HEAD: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    const TAIL: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789_";
    let n = rng.gen_range(1..5);
    let mut s = String::new();
    s.push(HEAD[rng.gen_range(0..HEAD.len())] as char);
    for _ in 0..n {
        s.push(TAIL[rng.gen_range(0..TAIL.len())] as char);
    }
    s
}

fn expr<R: Rng>(rng: &mut R, vars: &[String]) -> String {
    const OPS: &[&str] = &["+", "-", "*", "/", "%", "<<", "&", "|"];
    let v = vars.choose(rng).cloned().unwrap_or_else(|| "0".into());
    match rng.gen_range(0..4) {
        0 => format!("{v} {} {}", pick(rng, OPS), rng.gen_range(0..256)),
        1 => format!("({v} {} {})", pick(rng, OPS), vars.choose(rng).expect("vars")),
        2 => format!("{}[{}]", v, rng.gen_range(0..16)),
        _ => format!("{}({v}, {})", ident(rng), rng.gen_range(0..99)),
    }
}

/// One code-like function with braces, indentation and operators.
pub fn code_block<R: Rng>(rng: &mut R) -> String {
    let args: Vec<String> = (0..rng.gen_range(1..4)).map(|_| ident(rng)).collect();
    let mut vars = args.clone();
    let mut lines = vec![format!("fn {}({}) {{", ident(rng), args.join(", "))];
    for _ in 0..rng.gen_range(2..6) {
        match rng.gen_range(0..4) {
            0 => {
                let v = ident(rng);
                lines.push(format!("    let {v} = {};", expr(rng, &vars)));
                vars.push(v);
            }
            1 => {
                let c = [">=", "<", "==", "!="].choose(rng).expect("cmp");
                lines.push(format!("    if ({} {c} {}) {{", vars.choose(rng).expect("vars"), rng.gen_range(0..64)));
                lines.push(format!("        return {};", expr(rng, &vars)));
                lines.push("    }".into());
            }
            2 => {
                let i = ident(rng);
                lines.push(format!("    for ({i} in 0..{}) {{", rng.gen_range(2..32)));
                lines.push(format!("        {}[{i}] += {};", vars.choose(rng).expect("vars"), expr(rng, &vars)));
                lines.push("    }".into());
            }
            _ => lines.push(format!("    {} = {{{}: {}}};", vars.choose(rng).expect("vars"), ident(rng), expr(rng, &vars))),
        }
    }
    lines.push(format!("    return [{}];", vars.join(", ")));
    lines.push("}".into());
    lines.join("\n")
}

pub fn code_document<R: Rng>(rng: &mut R, min_bytes: usize) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut len = 0;
    while len < min_bytes {
        let b = code_block(rng);
        len += b.len() + 2;
        parts.push(b);
    }
    parts.join("\n\n")
}

/// A dialogue cut right after a User 1 question; the reference is User 2's
/// answer.
pub fn dialogue_example<R: Rng>(rng: &mut R, context_exchanges: usize) -> DialogueExample {
    let mut turns = dialogue_turns(rng, context_exchanges);
    let reference = turns.pop().expect("dialogue has turns");
    DialogueExample { turns, reference }
}

/// Slot plausibility: the prompt ends mid-answer and the options are the
/// matching slot word and one from a different topic.
pub fn slot_fill_example<R: Rng>(rng: &mut R) -> ClassificationExample {
    let mut turns = dialogue_turns(rng, 0);
    let topic = *TOPICS.choose(rng).expect("topics");
    turns.push(question(rng, topic));
    let (pre, right, _) = answer_parts(rng, topic);
    let other = loop {
        let t = *TOPICS.choose(rng).expect("topics");
        if t != topic {
            break t;
        }
    };
    let wrong = slot(rng, other);
    let mut prompt = build_dialogue_prompt(&turns).expect("non-empty turns");
    prompt.push(' ');
    prompt.push_str(&pre);
    let mut options = vec![format!(" {right}"), format!(" {wrong}")];
    let flip = rng.gen_bool(0.5);
    if flip {
        options.swap(0, 1);
    }
    ClassificationExample {
        prompt,
        options,
        label: usize::from(flip),
    }
}

/// Response matching: which of two complete answers fits the question.
pub fn answer_match_example<R: Rng>(rng: &mut R) -> ClassificationExample {
    let topic = *TOPICS.choose(rng).expect("topics");
    let other = loop {
        let t = *TOPICS.choose(rng).expect("topics");
        if t != topic {
            break t;
        }
    };
    let turns = vec![question(rng, topic)];
    let prompt = build_dialogue_prompt(&turns).expect("non-empty turns");
    let mut options = vec![format!(" {}", answer(rng, topic)), format!(" {}", answer(rng, other))];
    let flip = rng.gen_bool(0.5);
    if flip {
        options.swap(0, 1);
    }
    ClassificationExample {
        prompt,
        options,
        label: usize::from(flip),
    }
}
