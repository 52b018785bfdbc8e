use crate::error::{Error, Result};

const MASK: &str = "[MASK]";

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "his", "her", "its", "their", "my", "your",
    "our",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Splits a leading noun phrase: a determiner plus one word, or one word.
fn split_np<'a>(words: &'a [&'a str]) -> (&'a [&'a str], &'a [&'a str]) {
    let first_is_det = words
        .first()
        .is_some_and(|w| DETERMINERS.contains(&w.to_lowercase().as_str()));
    let second_is_det = words
        .get(1)
        .is_some_and(|w| DETERMINERS.contains(&w.to_lowercase().as_str()));
    let np_len = if first_is_det && words.len() >= 2 && !second_is_det {
        2
    } else {
        1
    };
    words.split_at(np_len.min(words.len()))
}

fn join(parts: &[&str]) -> String {
    parts.join(" ")
}

fn sentence(parts: Vec<String>) -> String {
    let s = parts
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    capitalize(&s)
}

fn is_copula(w: &str) -> bool {
    matches!(w, "is" | "are")
}

/// Rewrites a question as a declarative sentence with one `[MASK]` slot.
///
/// Supported openings: "how many", "what color", "what", "where",
/// "is"/"are" and "does"/"do". Anything else is an error so callers can keep
/// the question form.
pub fn to_declarative(question: &str) -> Result<String> {
    let unsupported = || Error::UnsupportedPattern(question.to_string());
    if question.contains(MASK) {
        return Err(unsupported());
    }
    let trimmed = question.trim().trim_end_matches(['?', ' ']);
    let words: Vec<&str> = trimmed.split_whitespace().collect();
    let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    let l: Vec<&str> = lower.iter().map(String::as_str).collect();

    let out = match l.as_slice() {
        ["how", "many", _, ..] => {
            let rest = &words[2..];
            match l[2..].iter().position(|w| is_copula(w)) {
                Some(v) if v > 0 => {
                    let subject = join(&rest[..v]);
                    let mut tail = &rest[v + 1..];
                    if tail.first().is_some_and(|w| w.eq_ignore_ascii_case("there")) {
                        tail = &tail[1..];
                    }
                    sentence(vec!["there".into(), l[2 + v].into(), MASK.into(), subject, join(tail)])
                }
                _ => sentence(vec!["the number of".into(), join(rest), "is".into(), MASK.into()]),
            }
        }
        ["what", "color", cop, _, ..] if is_copula(cop) => sentence(vec![
            "the color of".into(),
            join(&words[3..]),
            (*cop).into(),
            MASK.into(),
        ]),
        ["what", cop, _, ..] if is_copula(cop) => {
            sentence(vec![join(&words[2..]), (*cop).into(), MASK.into()])
        }
        ["what", "does" | "do", _, ..] => sentence(vec![join(&words[2..]), MASK.into()]),
        ["what", _, cop, _, ..] if is_copula(cop) => sentence(vec![
            "the".into(),
            words[1].into(),
            "that".into(),
            (*cop).into(),
            join(&words[3..]),
            (*cop).into(),
            MASK.into(),
        ]),
        ["where", cop, _, ..] if is_copula(cop) => {
            sentence(vec![join(&words[2..]), (*cop).into(), "at".into(), MASK.into()])
        }
        [cop, "there", _, ..] if is_copula(cop) => {
            sentence(vec!["there".into(), (*cop).into(), MASK.into(), join(&words[2..])])
        }
        [cop, _, ..] if is_copula(cop) => {
            let (np, rest) = split_np(&words[1..]);
            sentence(vec![join(np), (*cop).into(), MASK.into(), join(rest)])
        }
        ["does" | "do", _, _, ..] => {
            let (np, rest) = split_np(&words[1..]);
            sentence(vec![join(np), MASK.into(), join(rest)])
        }
        _ => return Err(unsupported()),
    };
    debug_assert_eq!(out.matches(MASK).count(), 1);
    Ok(out)
}
