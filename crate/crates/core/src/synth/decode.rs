//! The identity decoder: the ground-truth oracle behind the identity metric.

use super::*;

/// Where to look for the subject and whether its colors are inverted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub position: Position,
    pub inverted: bool,
}

impl Placement {
    pub fn from_attributes(a: &PromptAttributes) -> Self {
        Self {
            position: a.position,
            inverted: a.style == Style::Invert,
        }
    }

    pub fn all() -> Vec<Placement> {
        let mut out = Vec::new();
        for position in Position::ALL {
            for inverted in [false, true] {
                out.push(Placement { position, inverted });
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoded {
    Present {
        identity: IdentityParams,
        confidence: f64,
        placement: Placement,
    },
    Absent,
}

impl Decoded {
    pub fn confidence(&self) -> f64 {
        match self {
            Decoded::Present { confidence, .. } => *confidence,
            Decoded::Absent => 0.0,
        }
    }

    pub fn identity(&self) -> Option<IdentityParams> {
        match self {
            Decoded::Present { identity, .. } => Some(*identity),
            Decoded::Absent => None,
        }
    }
}

/// Pixel distance beyond which a pixel counts as "not background".
pub const FOREGROUND_DIST: f64 = 40.0;
const MATCH_DIST: f64 = 48.0;

fn mean_color(img: &RgbImage, pts: impl Iterator<Item = (usize, usize)>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0.0f64;
    for (x, y) in pts {
        let p = img.get(x, y);
        for c in 0..3 {
            acc[c] += p[c] as f64;
        }
        n += 1.0;
    }
    acc.map(|v| v / n.max(1.0))
}

/// Mean color of the strips above and below every possible subject box.
pub fn estimate_background(img: &RgbImage) -> [f64; 3] {
    let rows = (0..8).chain(24..IMAGE_SIZE);
    let pts: Vec<(usize, usize)> = rows.flat_map(|y| (0..IMAGE_SIZE).map(move |x| (x, y))).collect();
    mean_color(img, pts.into_iter())
}

fn nearest_palette(c: [f64; 3], exclude: Option<u8>) -> u8 {
    let mut best = (f64::INFINITY, 0u8);
    for (i, &p) in PALETTE.iter().enumerate() {
        if Some(i as u8) == exclude {
            continue;
        }
        let d = color_dist_f(c, p);
        if d < best.0 {
            best = (d, i as u8);
        }
    }
    best.1
}

fn nearest_glyph(bits: u32) -> u16 {
    let mut best = (u32::MAX, 0u16);
    for id in 0..NUM_GLYPHS {
        let d = (glyph_bits(id) ^ bits).count_ones();
        if d < best.0 {
            best = (d, id);
        }
    }
    best.1
}

/// Decodes the subject at a known placement.
pub fn decode_identity(img: &RgbImage, placement: Placement) -> Decoded {
    let bg = estimate_background(img);
    let x0 = placement.position.box_left();
    let box_pts: Vec<(usize, usize)> = (0..BOX)
        .flat_map(|dy| (0..BOX).map(move |dx| (x0 + dx, BOX_TOP + dy)))
        .collect();
    let foreground = box_pts
        .iter()
        .filter(|&&(x, y)| {
            let p = img.get(x, y);
            color_dist_f(bg, p) > FOREGROUND_DIST
        })
        .count();
    if (foreground as f64) < 0.5 * box_pts.len() as f64 {
        return Decoded::Absent;
    }
    let read = |x: usize, y: usize| -> Rgb {
        let p = img.get(x, y);
        if placement.inverted {
            invert(p)
        } else {
            p
        }
    };
    let mean_of = |pts: &[(usize, usize)]| -> [f64; 3] {
        let mut acc = [0.0; 3];
        for &(x, y) in pts {
            let p = read(x, y);
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
        }
        acc.map(|v| v / pts.len() as f64)
    };
    let ring: Vec<(usize, usize)> = box_pts
        .iter()
        .copied()
        .filter(|&(x, y)| x == x0 || y == BOX_TOP || x == x0 + BOX - 1 || y == BOX_TOP + BOX - 1)
        .collect();
    let trim = nearest_palette(mean_of(&ring), None);
    let cell_means: Vec<[f64; 3]> = (0..GLYPH_CELLS * GLYPH_CELLS)
        .map(|cell| {
            let (r, c) = (cell / GLYPH_CELLS, cell % GLYPH_CELLS);
            let pts: Vec<(usize, usize)> = (0..CELL_PX)
                .flat_map(|py| {
                    (0..CELL_PX).map(move |px| (x0 + 1 + c * CELL_PX + px, BOX_TOP + 1 + r * CELL_PX + py))
                })
                .collect();
            mean_of(&pts)
        })
        .collect();
    let body = nearest_palette(cell_means[12], None);
    let accent = nearest_palette(cell_means[0], Some(body));
    let (bc, ac) = (PALETTE[body as usize], PALETTE[accent as usize]);
    let mut bits = 0u32;
    for (cell, m) in cell_means.iter().enumerate() {
        if color_dist_f(*m, bc) < color_dist_f(*m, ac) {
            bits |= 1 << cell;
        }
    }
    let identity = IdentityParams {
        glyph_id: nearest_glyph(bits),
        part_colors: [body, accent, trim],
    };
    let gb = glyph_bits(identity.glyph_id);
    let matched = box_pts
        .iter()
        .filter(|&&(x, y)| {
            let expect = subject_pixel(&identity, gb, x - x0, y - BOX_TOP);
            color_dist(read(x, y), expect) <= MATCH_DIST
        })
        .count();
    Decoded::Present {
        identity,
        confidence: matched as f64 / box_pts.len() as f64,
        placement,
    }
}

/// Tries every placement (the hint first) and keeps the most confident decode.
pub fn decode_best(img: &RgbImage, hint: Option<Placement>) -> Decoded {
    let mut order: Vec<Placement> = hint.into_iter().collect();
    order.extend(Placement::all().into_iter().filter(|p| Some(*p) != hint));
    let mut best = Decoded::Absent;
    for p in order {
        let d = decode_identity(img, p);
        if d.confidence() > best.confidence() {
            best = d;
        }
    }
    best
}
