//! Procedural subjects with decodable identities, rendered into
//! prompt-controlled scenes.
//!
//! An identity is a 5×5 binary glyph plus three part colors. The subject is
//! a 12×12 box: a one-pixel trim ring around a 10×10 grid of 2×2 cells, "on"
//! cells in the body color, "off" cells in the accent color. Backgrounds
//! are pale, part colors come from a mid-intensity palette whose inversions
//! stay far from both, so the decoder can recover every field exactly from
//! a clean render.

mod dataset;
mod decode;
mod vocab;

pub use dataset::{build_dataset, dataset_checksum, manifest_csv, eval_prompts, held_out_combos, is_held_out, load_manifest, write_dataset, ManifestRow, SyntheticSample};
pub use decode::{decode_best, decode_identity, Decoded, Placement};
pub use vocab::{detokenize, retarget_subject, tokenize, TokenizedPrompt, Vocabulary, PROMPT_LEN, SUBJECT_WORDS};

use crate::image_io::RgbImage;
use crate::rng::RandomSource;

pub const IMAGE_SIZE: usize = 32;
pub const GLYPH_CELLS: usize = 5;
pub const CELL_PX: usize = 2;
/// Side of the subject box, trim ring included.
pub const BOX: usize = GLYPH_CELLS * CELL_PX + 2;
pub const BOX_TOP: usize = 10;
pub const NUM_GLYPHS: u16 = 4096;

pub type Rgb = [u8; 3];

pub const BACKGROUNDS: [(&str, Rgb); 8] = [
    ("white", [255, 255, 255]),
    ("silver", [190, 190, 190]),
    ("pink", [255, 190, 190]),
    ("mint", [190, 255, 190]),
    ("sky", [190, 190, 255]),
    ("cream", [255, 255, 190]),
    ("aqua", [190, 255, 255]),
    ("lilac", [255, 190, 255]),
];

pub const PALETTE: [Rgb; 12] = [
    [255, 0, 75],
    [0, 185, 0],
    [125, 95, 245],
    [255, 145, 0],
    [140, 30, 150],
    [0, 170, 130],
    [175, 130, 90],
    [95, 255, 10],
    [245, 0, 190],
    [60, 0, 255],
    [255, 240, 75],
    [180, 55, 0],
];

pub const OUTLINE: Rgb = [0, 0, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Style {
    Plain,
    Outline,
    Invert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    Center,
    Left,
    Right,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Plain, Style::Outline, Style::Invert];

    pub fn word(self) -> &'static str {
        match self {
            Style::Plain => "plain",
            Style::Outline => "outline",
            Style::Invert => "invert",
        }
    }
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Center, Position::Left, Position::Right];

    pub fn word(self) -> &'static str {
        match self {
            Position::Center => "center",
            Position::Left => "left",
            Position::Right => "right",
        }
    }

    /// Left edge of the subject box.
    pub fn box_left(self) -> usize {
        match self {
            Position::Left => 2,
            Position::Center => 10,
            Position::Right => 18,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct IdentityParams {
    pub glyph_id: u16,
    /// Indices into [`PALETTE`]: body, accent, trim.
    pub part_colors: [u8; 3],
}

impl IdentityParams {
    pub fn colors(&self) -> [Rgb; 3] {
        self.part_colors.map(|i| PALETTE[i as usize])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PromptAttributes {
    /// Index into [`BACKGROUNDS`].
    pub background: u8,
    pub style: Style,
    pub position: Position,
}

impl PromptAttributes {
    pub const INPUT: PromptAttributes = PromptAttributes {
        background: 0,
        style: Style::Plain,
        position: Position::Center,
    };

    pub fn background_rgb(&self) -> Rgb {
        BACKGROUNDS[self.background as usize].1
    }

    pub fn background_word(&self) -> &'static str {
        BACKGROUNDS[self.background as usize].0
    }

    /// `subject on <background> <style> <position>`.
    pub fn prompt_words(&self, subject_word: &str) -> Vec<String> {
        [subject_word, "on", self.background_word(), self.style.word(), self.position.word()]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    /// Reads attributes from prompt words; missing fields take the input-image defaults.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let mut a = Self::INPUT;
        for w in words {
            let w = w.as_ref();
            if let Some(i) = BACKGROUNDS.iter().position(|(n, _)| *n == w) {
                a.background = i as u8;
            }
            if let Some(s) = Style::ALL.iter().find(|s| s.word() == w) {
                a.style = *s;
            }
            if let Some(p) = Position::ALL.iter().find(|p| p.word() == w) {
                a.position = *p;
            }
        }
        a
    }

    pub fn all() -> Vec<PromptAttributes> {
        let mut out = Vec::new();
        for b in 0..BACKGROUNDS.len() as u8 {
            for style in Style::ALL {
                for position in Position::ALL {
                    out.push(PromptAttributes { background: b, style, position });
                }
            }
        }
        out
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CENTER_CELL: usize = 12;
const CORNER_CELL: usize = 0;

/// The 25-bit glyph (bit `r*5+c` set = "on" cell) for a glyph id.
///
/// The center cell is always on and the top-left cell always off, which
/// tells the decoder which color is the body. Twelve further cells carry
/// the id bits; the remaining eleven are a fixed hash of the id.
pub fn glyph_bits(glyph_id: u16) -> u32 {
    let free: Vec<usize> = (0..25).filter(|&c| c != CENTER_CELL && c != CORNER_CELL).collect();
    let hash = splitmix(glyph_id as u64);
    let mut bits = 1u32 << CENTER_CELL;
    for (k, &cell) in free.iter().enumerate() {
        let on = if k < 12 {
            (glyph_id >> k) & 1 == 1
        } else {
            (hash >> (k - 12)) & 1 == 1
        };
        if on {
            bits |= 1 << cell;
        }
    }
    bits
}

/// Glyph similarity in `[0, 1]`: one minus the normalized Hamming distance.
pub fn glyph_similarity(a: u16, b: u16) -> f64 {
    1.0 - (glyph_bits(a) ^ glyph_bits(b)).count_ones() as f64 / 25.0
}

pub fn make_identity(rng: &mut RandomSource) -> IdentityParams {
    let glyph_id = rng.below(NUM_GLYPHS as usize) as u16;
    let body = rng.below(PALETTE.len());
    let mut accent = rng.below(PALETTE.len() - 1);
    if accent >= body {
        accent += 1;
    }
    let trim = rng.below(PALETTE.len());
    IdentityParams {
        glyph_id,
        part_colors: [body as u8, accent as u8, trim as u8],
    }
}

pub fn invert(c: Rgb) -> Rgb {
    c.map(|v| 255 - v)
}

/// Pixels of the one-pixel outline ring drawn around the subject box.
pub fn outline_ring(position: Position) -> Vec<(usize, usize)> {
    let (x0, y0) = (position.box_left() - 1, BOX_TOP - 1);
    let side = BOX + 2;
    let mut out = Vec::new();
    for dy in 0..side {
        for dx in 0..side {
            if dx == 0 || dy == 0 || dx == side - 1 || dy == side - 1 {
                out.push((x0 + dx, y0 + dy));
            }
        }
    }
    out
}

/// Whether `(x, y)` lies inside the box at `position` expanded by `margin`.
pub fn in_box(position: Position, x: usize, y: usize, margin: usize) -> bool {
    let x0 = position.box_left() - margin;
    let y0 = BOX_TOP - margin;
    let side = BOX + 2 * margin;
    x >= x0 && x < x0 + side && y >= y0 && y < y0 + side
}

/// Clean subject colors at box-local coordinates, before styling.
fn subject_pixel(identity: &IdentityParams, bits: u32, dx: usize, dy: usize) -> Rgb {
    let [body, accent, trim] = identity.colors();
    if dx == 0 || dy == 0 || dx == BOX - 1 || dy == BOX - 1 {
        return trim;
    }
    let cell = ((dy - 1) / CELL_PX) * GLYPH_CELLS + (dx - 1) / CELL_PX;
    if bits >> cell & 1 == 1 {
        body
    } else {
        accent
    }
}

pub fn render(identity: &IdentityParams, attributes: &PromptAttributes) -> RgbImage {
    let mut img = RgbImage::filled(IMAGE_SIZE, IMAGE_SIZE, attributes.background_rgb());
    let bits = glyph_bits(identity.glyph_id);
    let x0 = attributes.position.box_left();
    for dy in 0..BOX {
        for dx in 0..BOX {
            let mut c = subject_pixel(identity, bits, dx, dy);
            if attributes.style == Style::Invert {
                c = invert(c);
            }
            img.set(x0 + dx, BOX_TOP + dy, c);
        }
    }
    if attributes.style == Style::Outline {
        for (x, y) in outline_ring(attributes.position) {
            img.set(x, y, OUTLINE);
        }
    }
    img
}

/// The reference image: subject alone, centered, on white.
pub fn render_input(identity: &IdentityParams) -> RgbImage {
    render(identity, &PromptAttributes::INPUT)
}

/// Boolean mask (row-major) of subject pixels for the given position.
pub fn subject_mask(position: Position) -> Vec<bool> {
    (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|i| in_box(position, i % IMAGE_SIZE, i / IMAGE_SIZE, 0))
        .collect()
}

pub fn color_dist(a: Rgb, b: Rgb) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn color_dist_f(a: [f64; 3], b: Rgb) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}
