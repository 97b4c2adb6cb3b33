//! Rule-table action-phrase extraction and hashed trigram phrase embeddings.

const LEMMAS: &[(&str, &[&str])] = &[
    ("walk", &["walk", "walks", "walking", "walked"]),
    ("jog", &["jog", "jogs", "jogging", "jogged"]),
    ("run", &["run", "runs", "running", "ran"]),
    ("turn", &["turn", "turns", "turning", "turned"]),
    ("bend", &["bend", "bends", "bending", "bent"]),
    ("pick", &["pick", "picks", "picking", "picked"]),
    ("put", &["put", "puts", "putting", "set", "sets", "setting"]),
    ("raise", &["raise", "raises", "raising", "raised", "lift", "lifts", "lifting", "lifted"]),
    ("wave", &["wave", "waves", "waving", "waved"]),
    ("jump", &["jump", "jumps", "jumping", "jumped", "hop", "hops", "hopping", "hopped"]),
    ("squat", &["squat", "squats", "squatting", "squatted"]),
    ("sidestep", &["sidestep", "sidesteps", "sidestepping", "sidestepped"]),
    ("spin", &["spin", "spins", "spinning", "spun"]),
    ("shuffle", &["shuffle", "shuffles", "shuffling", "shuffled"]),
    ("trip", &["trip", "trips", "tripping", "tripped"]),
    ("crouch", &["crouch", "crouches", "crouching", "crouched"]),
    ("play", &["play", "plays", "playing", "played"]),
    ("kick", &["kick", "kicks", "kicking", "kicked"]),
    ("throw", &["throw", "throws", "throwing", "threw"]),
    ("swing", &["swing", "swings", "swinging", "swung"]),
    ("move", &["move", "moves", "moving", "moved"]),
];

const MODIFIERS: &[(&str, &str)] = &[
    ("forward", "forward"),
    ("forwards", "forward"),
    ("backward", "backward"),
    ("backwards", "backward"),
    ("back", "backward"),
    ("left", "left"),
    ("right", "right"),
    ("up", "up"),
    ("down", "down"),
    ("sideways", "sideways"),
    ("diagonal", "diagonal"),
    ("diagonally", "diagonal"),
    ("hand", "hand"),
    ("arms", "arms"),
    ("guitar", "guitar"),
];

/// Prepositions that end a verb's modifier span.
const STOPS: &[&str] = &["on", "into", "for", "with", "at", "from", "while", "like", "over"];
const BREAKS: &[&str] = &[",", "then", "and", "while"];

fn lemma(word: &str) -> Option<&'static str> {
    LEMMAS
        .iter()
        .find(|(_, forms)| forms.contains(&word))
        .map(|(l, _)| *l)
}

fn modifier(word: &str) -> Option<&'static str> {
    MODIFIERS.iter().find(|(w, _)| *w == word).map(|(_, m)| *m)
}

fn tokenize(caption: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(caption.len() + 8);
    for ch in caption.to_lowercase().chars() {
        match ch {
            ',' | '.' | ';' | ':' | '!' | '?' => spaced.push_str(" , "),
            c if c.is_alphanumeric() || c.is_whitespace() => spaced.push(c),
            _ => {}
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Ordered, de-duplicated action phrases of a caption.
pub fn extract_action_phrases(caption: &str) -> Vec<String> {
    let tokens = tokenize(caption);
    let mut out: Vec<String> = Vec::new();
    for clause in tokens.split(|t| BREAKS.contains(&t.as_str())) {
        let Some(v) = clause.iter().position(|t| lemma(t).is_some()) else {
            continue;
        };
        let mut words = vec![lemma(&clause[v]).expect("checked").to_string()];
        let rest = &clause[v + 1..];
        let mut i = 0;
        while i < rest.len() {
            let t = rest[i].as_str();
            if STOPS.contains(&t) {
                break;
            }
            if t == "in" {
                let tail = &rest[i + 1..];
                let end = tail.iter().position(|w| STOPS.contains(&w.as_str())).unwrap_or(tail.len());
                if tail[..end].iter().any(|w| matches!(w.as_str(), "circle" | "circles" | "spiral")) {
                    words.push("in circle".to_string());
                    i += 1 + end;
                    continue;
                }
            } else if let Some(m) = modifier(t) {
                if !words.iter().any(|w| w == m) {
                    words.push(m.to_string());
                }
            }
            i += 1;
        }
        if words[0] == "pick" && !words.iter().any(|w| w == "up") {
            words.insert(1, "up".to_string());
        }
        let phrase = words.join(" ");
        if !out.contains(&phrase) {
            out.push(phrase);
        }
    }
    out
}

pub const EMBED_DIM: usize = 64;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Unit-norm hashed character-trigram count vector; words are padded with `#`.
pub fn embed_phrase(phrase: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    let mut any = false;
    for word in phrase.split_whitespace() {
        let padded: Vec<u8> = format!("#{}#", word.to_lowercase()).into_bytes();
        for tri in padded.windows(3) {
            v[(fnv1a(tri) % EMBED_DIM as u64) as usize] += 1.0;
            any = true;
        }
    }
    if !any {
        v[(fnv1a(b"##") % EMBED_DIM as u64) as usize] = 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(s: &str) -> Vec<&'static str> {
        extract_action_phrases(s)
            .into_iter()
            .map(|p| &*Box::leak(p.into_boxed_str()))
            .collect()
    }

    #[test]
    fn annotation_examples() {
        assert_eq!(
            ex("bends to the right, picks up something, turns, then sets it down."),
            ["bend right", "pick up", "turn", "put down"]
        );
        assert_eq!(ex("a person walks backwards quickly"), ["walk backward"]);
        assert_eq!(ex("a person mimics playing the guitar."), ["play guitar"]);
        assert_eq!(ex("a person walking in a diagonal line."), ["walk diagonal"]);
        assert_eq!(ex("a person stayed on the place and raised the left hand"), ["raise left hand"]);
        assert_eq!(
            ex("a person walks forward, spins around on his right leg clockwise, then walks back into the direction he came from"),
            ["walk forward", "spin", "walk backward"]
        );
        assert_eq!(
            ex("a person shuffles to the side, then walks forward and nearly misses tripping."),
            ["shuffle", "walk forward", "trip"]
        );
        assert_eq!(ex("a man jogs in a very wide counterclockwise spiral"), ["jog in circle"]);
    }

    #[test]
    fn empty_caption() {
        assert!(extract_action_phrases("").is_empty());
    }

    #[test]
    fn distractor_adverbs_are_dropped() {
        assert_eq!(ex("someone squats slowly, and then waves quickly"), ["squat", "wave"]);
    }

    #[test]
    fn trigram_embedding() {
        let w = embed_phrase("walk");
        assert_eq!(w, embed_phrase("walk"));
        assert!(cosine(&w, &embed_phrase("walks")) > cosine(&w, &embed_phrase("jump")));
        for p in ["", "walk", "raise left hand", "x"] {
            let n = embed_phrase(p).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
