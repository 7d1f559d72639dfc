//! Training triplets and their on-disk layout.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::*;
use crate::error::Result;
use crate::rng::streams;
use crate::synth::vocab::{tokenize, TokenizedPrompt, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: usize,
    pub identity: IdentityParams,
    pub attributes: PromptAttributes,
    pub subject_word: &'static str,
    /// Subject alone, centered, on white.
    pub input_image: RgbImage,
    /// Subject in context.
    pub target_image: RgbImage,
    pub tokens: TokenizedPrompt,
}

impl SyntheticSample {
    pub fn prompt_words(&self) -> Vec<String> {
        self.attributes.prompt_words(self.subject_word)
    }
}

/// The twelve attribute combinations reserved for evaluation.
///
/// Backgrounds cycle through all eight, and every style and every position
/// appears exactly four times.
pub fn held_out_combos() -> Vec<PromptAttributes> {
    (0..12)
        .map(|j| PromptAttributes {
            background: (j % 8) as u8,
            style: Style::ALL[j % 3],
            position: Position::ALL[(j + j / 3) % 3],
        })
        .collect()
}

pub fn is_held_out(a: &PromptAttributes) -> bool {
    held_out_combos().contains(a)
}

/// Evaluation prompts: the held-out combinations.
pub fn eval_prompts() -> Vec<PromptAttributes> {
    held_out_combos()
}

/// Share of training prompts using the alternative subject word.
const ALT_SUBJECT_RATE: f64 = 0.25;

/// Deterministic training set of `n` samples. Backgrounds are dealt from
/// shuffled blocks of eight so each appears equally often; style and
/// position are then drawn uniformly among the combinations not held out
/// for that background.
pub fn build_dataset(n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return crate::error::invalid("dataset size must be at least 1");
    }
    let vocab = Vocabulary::default();
    let mut rng = RandomSource::new(seed, streams::DATASET);
    let held = held_out_combos();
    let mut out = Vec::with_capacity(n);
    let mut deck: Vec<u8> = Vec::new();
    for id in 0..n {
        let identity = make_identity(&mut rng);
        if deck.is_empty() {
            deck = (0..BACKGROUNDS.len() as u8).collect();
            rng.shuffle(&mut deck);
        }
        let background = deck.pop().expect("refilled above");
        let options: Vec<PromptAttributes> = Style::ALL
            .iter()
            .flat_map(|&style| Position::ALL.iter().map(move |&position| PromptAttributes { background, style, position }))
            .filter(|a| !held.contains(a))
            .collect();
        let attributes = options[rng.below(options.len())];
        let subject_word = if rng.uniform() < ALT_SUBJECT_RATE {
            SUBJECT_WORDS[1]
        } else {
            SUBJECT_WORDS[0]
        };
        let tokens = tokenize(&vocab, &attributes.prompt_words(subject_word))?;
        out.push(SyntheticSample {
            id,
            identity,
            attributes,
            subject_word,
            input_image: render_input(&identity),
            target_image: render(&identity, &attributes),
            tokens,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: usize,
    pub glyph_id: u16,
    pub body: u8,
    pub accent: u8,
    pub trim: u8,
    pub background: String,
    pub style: String,
    pub position: String,
    pub prompt: String,
}

impl ManifestRow {
    pub fn from_sample(s: &SyntheticSample) -> Self {
        Self {
            sample_id: s.id,
            glyph_id: s.identity.glyph_id,
            body: s.identity.part_colors[0],
            accent: s.identity.part_colors[1],
            trim: s.identity.part_colors[2],
            background: s.attributes.background_word().to_string(),
            style: s.attributes.style.word().to_string(),
            position: s.attributes.position.word().to_string(),
            prompt: s.prompt_words().join(" "),
        }
    }
}

pub fn manifest_csv(samples: &[SyntheticSample]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for s in samples {
        w.serialize(ManifestRow::from_sample(s))?;
    }
    w.into_inner().map_err(|e| crate::error::Error::Io(e.into_error()))
}

/// Writes `manifest.csv` and `NNNNN_input.ppm` / `NNNNN_target.ppm` pairs.
pub fn write_dataset(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.csv"), manifest_csv(samples)?)?;
    for s in samples {
        s.input_image.save_ppm(&dir.join(format!("{:05}_input.ppm", s.id)))?;
        s.target_image.save_ppm(&dir.join(format!("{:05}_target.ppm", s.id)))?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(dir.join("manifest.csv"))?;
    let rows: std::result::Result<Vec<ManifestRow>, _> = r.deserialize().collect();
    Ok(rows?)
}

/// SHA-256 over the manifest and every image, hex encoded.
pub fn dataset_checksum(samples: &[SyntheticSample]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest_csv(samples)?);
    for s in samples {
        h.update(&s.input_image.pixels);
        h.update(&s.target_image.pixels);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::decode::{decode_identity, Placement};

    #[test]
    fn held_out_is_balanced_and_distinct() {
        let h = held_out_combos();
        let set: std::collections::HashSet<_> = h.iter().collect();
        assert_eq!(set.len(), 12);
        for s in Style::ALL {
            assert_eq!(h.iter().filter(|a| a.style == s).count(), 4);
        }
        for p in Position::ALL {
            assert_eq!(h.iter().filter(|a| a.position == p).count(), 4);
        }
    }

    #[test]
    fn deterministic_and_never_held_out() {
        let a = build_dataset(64, 5).unwrap();
        let b = build_dataset(64, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(dataset_checksum(&a).unwrap(), dataset_checksum(&b).unwrap());
        assert_ne!(dataset_checksum(&a).unwrap(), dataset_checksum(&build_dataset(64, 6).unwrap()).unwrap());
        assert!(a.iter().all(|s| !is_held_out(&s.attributes)));
    }

    #[test]
    fn marginals_are_near_uniform() {
        let d = build_dataset(4096, 7).unwrap();
        let n = d.len() as f64;
        for b in 0..8u8 {
            let c = d.iter().filter(|s| s.attributes.background == b).count() as f64;
            assert!((c / n * 8.0 - 1.0).abs() < 0.10, "background {b}: {c}");
        }
        for st in Style::ALL {
            let c = d.iter().filter(|s| s.attributes.style == st).count() as f64;
            assert!((c / n * 3.0 - 1.0).abs() < 0.10, "{st:?}: {c}");
        }
        for p in Position::ALL {
            let c = d.iter().filter(|s| s.attributes.position == p).count() as f64;
            assert!((c / n * 3.0 - 1.0).abs() < 0.10, "{p:?}: {c}");
        }
    }

    #[test]
    fn inputs_decode_to_their_identity() {
        for s in build_dataset(200, 8).unwrap() {
            let d = decode_identity(&s.input_image, Placement::from_attributes(&PromptAttributes::INPUT));
            assert_eq!(d.identity(), Some(s.identity));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let d = build_dataset(5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let rows = load_manifest(dir.path()).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[2], ManifestRow::from_sample(&d[2]));
        let img = RgbImage::load(&dir.path().join("00002_target.ppm")).unwrap();
        assert_eq!(img, d[2].target_image);
    }
}
