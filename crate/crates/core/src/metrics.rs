//! Oracle scores for generated images and the tables built from them.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::baselines::MechanismKind;
use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::synth::{
    color_dist, color_dist_f, decode_best, in_box, invert, outline_ring, IdentityParams, PromptAttributes, Style,
    BACKGROUNDS, IMAGE_SIZE, OUTLINE, PALETTE,
};

const MAX_RGB_DIST: f64 = 441.672_955_930_063_7;
const BACKGROUND_TOL: f64 = 40.0;
const OUTLINE_TOL: f64 = 60.0;

/// 0.5·glyph similarity + 0.5·mean part-color closeness of the best decode;
/// 0 when no subject is found.
pub fn identity_score(img: &RgbImage, identity: &IdentityParams) -> f64 {
    let Some(found) = decode_best(img, None).identity() else {
        return 0.0;
    };
    let glyph = crate::synth::glyph_similarity(found.glyph_id, identity.glyph_id);
    let colors: f64 = found
        .colors()
        .iter()
        .zip(identity.colors().iter())
        .map(|(&a, &b)| 1.0 - color_dist(a, b) / MAX_RGB_DIST)
        .sum::<f64>()
        / 3.0;
    0.5 * glyph + 0.5 * colors
}

/// The three prompt sub-scores: background, position, style.
pub fn prompt_subscores(img: &RgbImage, attributes: &PromptAttributes) -> [f64; 3] {
    let bg = attributes.background_rgb();
    let pos = attributes.position;
    let mut outside = 0usize;
    let mut bg_ok = 0usize;
    let mut fg = 0usize;
    let mut fg_inside = 0usize;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let p = img.get(x, y);
            let near = color_dist(p, bg) <= BACKGROUND_TOL;
            let inside = in_box(pos, x, y, 1);
            if !inside {
                outside += 1;
                let nearest = BACKGROUNDS
                    .iter()
                    .map(|(_, c)| color_dist(p, *c))
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i);
                if near && nearest == Some(attributes.background as usize) {
                    bg_ok += 1;
                }
            }
            if !near {
                fg += 1;
                if inside {
                    fg_inside += 1;
                }
            }
        }
    }
    let background = bg_ok as f64 / outside as f64;
    let position = if fg == 0 { 0.0 } else { fg_inside as f64 / fg as f64 };

    let ring = outline_ring(pos);
    let ring_black =
        ring.iter().filter(|&&(x, y)| color_dist(img.get(x, y), OUTLINE) <= OUTLINE_TOL).count() as f64 / ring.len() as f64;
    // Box pixels closer to the palette than to its inversion.
    let mut plain = 0usize;
    let mut total = 0usize;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            if !in_box(pos, x, y, 0) {
                continue;
            }
            let p = img.get(x, y);
            let pf = p.map(|v| v as f64);
            let d_plain = PALETTE.iter().map(|&c| color_dist_f(pf, c)).fold(f64::INFINITY, f64::min);
            let d_inv = PALETTE.iter().map(|&c| color_dist_f(pf, invert(c))).fold(f64::INFINITY, f64::min);
            total += 1;
            if d_plain < d_inv {
                plain += 1;
            }
        }
    }
    let plain_frac = plain as f64 / total as f64;
    let style = match attributes.style {
        Style::Plain => plain_frac * (1.0 - ring_black),
        Style::Invert => (1.0 - plain_frac) * (1.0 - ring_black),
        Style::Outline => 0.5 * (ring_black + plain_frac),
    };
    [background, position, style]
}

/// Mean of background, position and style checks, in `[0, 1]`.
pub fn prompt_score(img: &RgbImage, attributes: &PromptAttributes) -> f64 {
    prompt_subscores(img, attributes).iter().sum::<f64>() / 3.0
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub mechanism: MechanismKind,
    pub lambda: f64,
    /// Number of seeds averaged.
    pub seed: u64,
    pub identity_score: f64,
    pub prompt_score: f64,
    pub sample_count: usize,
}

pub const RECORD_HEADER: &str = "mechanism,lambda,seed,identity_score,prompt_score,sample_count";

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mechanism.name(),
            self.lambda,
            self.seed,
            self.identity_score,
            self.prompt_score,
            self.sample_count
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("expected 6 fields, got {}: {line}", f.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
        let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| Error::Format(format!("bad integer {s:?}"))) };
        Ok(Self {
            mechanism: MechanismKind::from_str(f[0])?,
            lambda: num(f[1])?,
            seed: int(f[2])?,
            identity_score: num(f[3])?,
            prompt_score: num(f[4])?,
            sample_count: int(f[5])? as usize,
        })
    }
}

/// Records at strictly increasing λ for one mechanism.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffCurve {
    pub mechanism: MechanismKind,
    pub records: Vec<MetricRecord>,
}

impl TradeoffCurve {
    pub fn new(mechanism: MechanismKind, records: Vec<MetricRecord>) -> Result<Self> {
        for w in records.windows(2) {
            if w[1].lambda.partial_cmp(&w[0].lambda) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Invariant(format!(
                    "λ not strictly increasing: {} then {}",
                    w[0].lambda, w[1].lambda
                )));
            }
        }
        if let Some(r) = records.iter().find(|r| r.mechanism != mechanism) {
            return Err(Error::Invariant(format!("{} record in {} curve", r.mechanism, mechanism)));
        }
        Ok(Self { mechanism, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// CSV with an optional `# config` comment block in front.
pub fn emit_csv(records: &[MetricRecord], config_echo: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(c) = config_echo {
        for line in c.lines() {
            let _ = writeln!(s, "# {line}");
        }
    }
    s.push_str(RECORD_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == RECORD_HEADER => {}
        other => return Err(Error::Format(format!("bad header {other:?}"))),
    }
    lines.filter(|l| !l.is_empty()).map(MetricRecord::parse_row).collect()
}

/// Groups records into one curve per mechanism, in first-seen order.
pub fn curves_from_records(records: &[MetricRecord]) -> Result<Vec<TradeoffCurve>> {
    let mut kinds: Vec<MechanismKind> = Vec::new();
    for r in records {
        if !kinds.contains(&r.mechanism) {
            kinds.push(r.mechanism);
        }
    }
    kinds
        .into_iter()
        .map(|k| TradeoffCurve::new(k, records.iter().filter(|r| r.mechanism == k).cloned().collect()))
        .collect()
}

const CURVE_COLORS: [[u8; 3]; 5] = [[220, 30, 30], [30, 120, 220], [30, 170, 60], [200, 140, 0], [140, 50, 200]];

/// Scatter plot, prompt score on x and identity score on y, both over [0, 1].
/// Each curve gets its own color; points of a curve are joined by lines.
pub fn scatter_ppm(curves: &[TradeoffCurve], size: usize) -> RgbImage {
    let mut img = RgbImage::filled(size, size, [255, 255, 255]);
    let margin = size / 10;
    let span = size - 2 * margin;
    let to_px = |px: f64, py: f64| -> (i64, i64) {
        let x = margin as f64 + px.clamp(0.0, 1.0) * span as f64;
        let y = (size - margin) as f64 - py.clamp(0.0, 1.0) * span as f64;
        (x.round() as i64, y.round() as i64)
    };
    let mut plot = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
            img.set(x as usize, y as usize, c);
        }
    };
    for i in 0..=span as i64 {
        plot(margin as i64 + i, (size - margin) as i64, [0, 0, 0]);
        plot(margin as i64, (size - margin) as i64 - i, [0, 0, 0]);
    }
    for (ci, curve) in curves.iter().enumerate() {
        let color = CURVE_COLORS[ci % CURVE_COLORS.len()];
        let pts: Vec<(i64, i64)> = curve.records.iter().map(|r| to_px(r.prompt_score, r.identity_score)).collect();
        for w in pts.windows(2) {
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            let n = dx.abs().max(dy.abs()).max(1);
            for k in 0..=n {
                plot(w[0].0 + dx * k / n, w[0].1 + dy * k / n, color);
            }
        }
        for &(x, y) in &pts {
            for oy in -2..=2 {
                for ox in -2..=2 {
                    plot(x + ox, y + oy, color);
                }
            }
        }
    }
    img
}
