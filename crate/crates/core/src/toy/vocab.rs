//! Fixed word-level vocabulary.

use crate::toy::scene::{Color, Shape};

pub type Token = usize;

pub const EOS: Token = 0;
pub const QMARK: Token = 1;
pub const COLOR: Token = 2;
pub const SHAPE: Token = 3;
pub const AT: Token = 4;
pub const ROW: Token = 5;
pub const COL: Token = 6;
pub const OF: Token = 7;
pub const THE: Token = 8;
pub const THING: Token = 9;
const COLOR_BASE: Token = 10;
const SHAPE_BASE: Token = 14;
const DIGIT_BASE: Token = 18;

/// Number of token ids in use; the model vocabulary may be larger.
pub const BASE_SIZE: usize = 28;

/// Largest grid side whose coordinates have digit tokens.
pub const MAX_GRID: usize = 10;

const WORDS: [&str; 10] = ["<eos>", "?", "color", "shape", "at", "row", "col", "of", "the", "thing"];
const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
const SHAPES: [&str; 4] = ["circle", "square", "triangle", "empty"];

pub fn color_token(c: Color) -> Token {
    COLOR_BASE + c.index()
}

pub fn shape_token(s: Shape) -> Token {
    SHAPE_BASE + s.index()
}

pub fn digit(d: usize) -> Token {
    assert!(d < MAX_GRID, "digit {d} has no token");
    DIGIT_BASE + d
}

/// The value of a digit token.
pub fn digit_value(t: Token) -> Option<usize> {
    (DIGIT_BASE..DIGIT_BASE + MAX_GRID).contains(&t).then(|| t - DIGIT_BASE)
}

pub fn word(t: Token) -> String {
    match t {
        0..=9 => WORDS[t].to_string(),
        10..=13 => COLORS[t - COLOR_BASE].to_string(),
        14..=17 => SHAPES[t - SHAPE_BASE].to_string(),
        18..=27 => (t - DIGIT_BASE).to_string(),
        _ => format!("<unused{t}>"),
    }
}

pub fn lookup(w: &str) -> Option<Token> {
    if let Some(i) = WORDS.iter().position(|&x| x == w) {
        return Some(i);
    }
    if let Some(i) = COLORS.iter().position(|&x| x == w) {
        return Some(COLOR_BASE + i);
    }
    if let Some(i) = SHAPES.iter().position(|&x| x == w) {
        return Some(SHAPE_BASE + i);
    }
    match w.parse::<usize>() {
        Ok(d) if d < MAX_GRID => Some(DIGIT_BASE + d),
        _ => None,
    }
}

/// Splits on whitespace and maps each word; a bare trailing "?" glued to a
/// word is split off.
pub fn tokenize(text: &str) -> Option<Vec<Token>> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        match raw.strip_suffix('?') {
            Some(w) if !w.is_empty() => {
                out.push(lookup(w)?);
                out.push(QMARK);
            }
            _ => out.push(lookup(raw)?),
        }
    }
    Some(out)
}

pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_word_round_trips() {
        for t in 0..BASE_SIZE {
            assert_eq!(lookup(&word(t)), Some(t));
        }
    }

    #[test]
    fn tokenize_splits_question_mark() {
        let t = tokenize("color at row 2 col 3?").unwrap();
        assert_eq!(t, vec![COLOR, AT, ROW, digit(2), COL, digit(3), QMARK]);
        assert!(tokenize("colour at").is_none());
    }
}
