//! Fixed prompt vocabulary: a null token plus color, shape, background and
//! style attributes. Prompts are at most four tokens, null-padded.

use crate::error::{Error, Result};

pub const NULL_TOKEN: usize = 0;
pub const PROMPT_LEN: usize = 4;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "star", "cross"];
pub const BACKGROUNDS: [&str; 3] = ["plain", "gradient", "checker"];
pub const STYLES: [&str; 2] = ["glossy", "matte"];

const COLOR_BASE: usize = 1;
const SHAPE_BASE: usize = COLOR_BASE + COLORS.len();
const BACKGROUND_BASE: usize = SHAPE_BASE + SHAPES.len();
const STYLE_BASE: usize = BACKGROUND_BASE + BACKGROUNDS.len();

pub fn vocab_size() -> usize {
    STYLE_BASE + STYLES.len()
}

pub fn token_name(id: usize) -> &'static str {
    if id == NULL_TOKEN {
        return "<null>";
    }
    if id < SHAPE_BASE {
        return COLORS[id - COLOR_BASE];
    }
    if id < BACKGROUND_BASE {
        return SHAPES[id - SHAPE_BASE];
    }
    if id < STYLE_BASE {
        return BACKGROUNDS[id - BACKGROUND_BASE];
    }
    if id < vocab_size() {
        return STYLES[id - STYLE_BASE];
    }
    "<invalid>"
}

pub fn token_id(name: &str) -> Result<usize> {
    if name == "<null>" || name == "null" {
        return Ok(NULL_TOKEN);
    }
    let all = [
        (&COLORS[..], COLOR_BASE),
        (&SHAPES[..], SHAPE_BASE),
        (&BACKGROUNDS[..], BACKGROUND_BASE),
        (&STYLES[..], STYLE_BASE),
    ];
    for (set, base) in all {
        if let Some(pos) = set.iter().position(|&s| s == name) {
            return Ok(base + pos);
        }
    }
    Err(Error::UnknownToken(name.to_string()))
}

pub fn color_id(name: &str) -> Result<usize> {
    COLORS
        .iter()
        .position(|&c| c == name)
        .map(|p| COLOR_BASE + p)
        .ok_or_else(|| Error::UnknownToken(name.to_string()))
}

pub fn shape_id(name: &str) -> Result<usize> {
    SHAPES
        .iter()
        .position(|&s| s == name)
        .map(|p| SHAPE_BASE + p)
        .ok_or_else(|| Error::UnknownToken(name.to_string()))
}

pub fn background_id(name: &str) -> Result<usize> {
    BACKGROUNDS
        .iter()
        .position(|&b| b == name)
        .map(|p| BACKGROUND_BASE + p)
        .ok_or_else(|| Error::UnknownToken(name.to_string()))
}

pub fn is_color(id: usize) -> bool {
    (COLOR_BASE..SHAPE_BASE).contains(&id)
}

pub fn is_shape(id: usize) -> bool {
    (SHAPE_BASE..BACKGROUND_BASE).contains(&id)
}

pub fn is_background(id: usize) -> bool {
    (BACKGROUND_BASE..STYLE_BASE).contains(&id)
}

/// Parses a whitespace-separated prompt of at most four tokens, padding with
/// the null token.
pub fn parse_prompt(text: &str) -> Result<[usize; PROMPT_LEN]> {
    let mut ids = [NULL_TOKEN; PROMPT_LEN];
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() > PROMPT_LEN {
        return Err(Error::InvalidArg {
            op: "parse_prompt",
            msg: format!("at most {PROMPT_LEN} tokens, got {}", words.len()),
        });
    }
    for (slot, w) in words.iter().enumerate() {
        ids[slot] = token_id(w)?;
    }
    Ok(ids)
}

pub fn prompt_text(ids: &[usize; PROMPT_LEN]) -> String {
    ids.iter()
        .filter(|&&id| id != NULL_TOKEN)
        .map(|&id| token_name(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Slot index of the first shape token in a prompt, if any.
pub fn shape_slot(ids: &[usize; PROMPT_LEN]) -> Option<usize> {
    ids.iter().position(|&id| is_shape(id))
}

pub fn color_slot(ids: &[usize; PROMPT_LEN]) -> Option<usize> {
    ids.iter().position(|&id| is_color(id))
}
