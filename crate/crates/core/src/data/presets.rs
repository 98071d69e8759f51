//! Built-in vocabularies with reference RGB anchors for synthesis and display.

use crate::error::{Error, Result};
use crate::nets::ColorVocabulary;

pub const DEFAULT_PRESET: &str = "basic6";

type Table = &'static [(&'static str, [u8; 3])];

const BASIC11: Table = &[
    ("black", [0, 0, 0]),
    ("blue", [0, 0, 255]),
    ("brown", [139, 69, 19]),
    ("gray", [128, 128, 128]),
    ("green", [0, 160, 0]),
    ("orange", [255, 140, 0]),
    ("pink", [255, 150, 200]),
    ("purple", [128, 0, 160]),
    ("red", [220, 0, 0]),
    ("white", [255, 255, 255]),
    ("yellow", [255, 255, 0]),
];

const BASIC6: Table = &[
    ("red", [230, 0, 0]),
    ("orange", [255, 140, 0]),
    ("yellow", [255, 235, 0]),
    ("green", [0, 170, 0]),
    ("blue", [0, 60, 255]),
    ("purple", [140, 0, 190]),
];

const EYE: Table = &[
    ("blue", [70, 110, 190]),
    ("brown", [100, 60, 30]),
    ("gray", [130, 140, 145]),
    ("green", [80, 140, 80]),
    ("hazel", [160, 120, 50]),
];

const LIP: Table = &[
    ("classic_red", [200, 20, 40]),
    ("sheer_peach", [245, 180, 150]),
    ("coral_red", [250, 90, 80]),
    ("mandarin", [240, 120, 20]),
    ("nude", [200, 150, 130]),
    ("plum", [120, 40, 80]),
    ("wine", [100, 0, 30]),
];

const HORSE: Table = &[
    ("black", [20, 20, 20]),
    ("dark_brown", [70, 40, 20]),
    ("bright_reddish", [210, 80, 40]),
    ("dark_gray", [90, 90, 95]),
    ("champagne", [225, 200, 150]),
    ("chestnut", [160, 55, 20]),
    ("dun", [190, 160, 110]),
    ("white", [245, 245, 245]),
    ("brown", [120, 80, 45]),
];

const TOMATO: Table = &[
    ("green", [60, 150, 50]),
    ("breakers", [170, 180, 90]),
    ("tuning", [230, 150, 70]),
    ("pink", [240, 130, 120]),
    ("light_red", [235, 80, 70]),
    ("red", [200, 20, 20]),
];

pub const PRESETS: &[(&str, Table)] = &[
    ("basic11", BASIC11),
    ("basic6", BASIC6),
    ("eye", EYE),
    ("lip", LIP),
    ("horse", HORSE),
    ("tomato", TOMATO),
];

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<(ColorVocabulary, Vec<[u8; 3]>)> {
    let (_, table) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown vocabulary preset {name:?} (known: {})", known.join(", ")))
        })?;
    let vocab = ColorVocabulary::new(table.iter().map(|(n, _)| *n))?;
    Ok((vocab, table.iter().map(|(_, c)| *c).collect()))
}

/// Euclidean distance between two colors in `[0, 1]` RGB units.
pub fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| ((x as f64 - y as f64) / 255.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Smallest distance between any two anchors.
pub fn min_pairwise_distance(anchors: &[[u8; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, &a) in anchors.iter().enumerate() {
        for &b in &anchors[i + 1..] {
            best = best.min(color_distance(a, b));
        }
    }
    best
}

/// Index of the anchor closest to `rgb` (values in `[0, 1]`); lowest index on ties.
pub fn nearest_anchor(anchors: &[[u8; 3]], rgb: [f64; 3]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, a) in anchors.iter().enumerate() {
        let d: f64 = (0..3).map(|c| (a[c] as f64 / 255.0 - rgb[c]).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Parses `rrggbb` hex.
pub fn parse_hex(s: &str) -> Option<[u8; 3]> {
    let s = s.strip_prefix('#').unwrap_or(s);
    if s.len() != 6 || !s.is_ascii() {
        return None;
    }
    let b = |i: usize| u8::from_str_radix(&s[i..i + 2], 16).ok();
    Some([b(0)?, b(2)?, b(4)?])
}

pub fn to_hex(c: [u8; 3]) -> String {
    format!("{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}
