//! Closed prompt vocabulary and fixed-length tokenization.

use crate::error::{invalid, Error, Result};

use super::{Position, Style, BACKGROUNDS};

/// Token sequences are padded to this length.
pub const PROMPT_LEN: usize = 8;
pub const PAD: &str = "<pad>";
/// Words that can carry a personalized subject.
pub const SUBJECT_WORDS: [&str; 2] = ["subj", "pet"];

const FILLER: [&str; 14] = [
    "person", "dog", "statue", "a", "in", "at", "with", "the", "photo", "drawing", "and", "of", "background", "style",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut words = vec![PAD.to_string()];
        words.extend(SUBJECT_WORDS.iter().map(|w| w.to_string()));
        words.push("on".into());
        words.extend(BACKGROUNDS.iter().map(|(n, _)| n.to_string()));
        words.extend(Style::ALL.iter().map(|s| s.word().to_string()));
        words.extend(Position::ALL.iter().map(|p| p.word().to_string()));
        words.extend(FILLER.iter().map(|w| w.to_string()));
        Self { words }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenizedPrompt {
    /// Token ids padded to [`PROMPT_LEN`].
    pub ids: Vec<usize>,
    /// Number of non-pad tokens.
    pub len: usize,
    /// Position of the first subject word.
    pub subject_index: usize,
    /// Positions of every subject word, in order.
    pub subject_positions: Vec<usize>,
}

pub fn tokenize<S: AsRef<str>>(vocab: &Vocabulary, words: &[S]) -> Result<TokenizedPrompt> {
    if words.len() > PROMPT_LEN {
        return invalid(format!("prompt has {} words, at most {PROMPT_LEN} fit", words.len()));
    }
    let mut ids = Vec::with_capacity(PROMPT_LEN);
    let mut subject_positions = Vec::new();
    for (i, w) in words.iter().enumerate() {
        let w = w.as_ref();
        if w == PAD {
            return invalid("pad token inside prompt");
        }
        ids.push(vocab.id(w)?);
        if SUBJECT_WORDS.contains(&w) {
            subject_positions.push(i);
        }
    }
    let Some(&subject_index) = subject_positions.first() else {
        return invalid("prompt has no subject word (subj or pet)");
    };
    let len = ids.len();
    ids.resize(PROMPT_LEN, vocab.id(PAD)?);
    Ok(TokenizedPrompt {
        ids,
        len,
        subject_index,
        subject_positions,
    })
}

/// Words of the non-pad tokens.
pub fn detokenize(vocab: &Vocabulary, prompt: &TokenizedPrompt) -> Vec<String> {
    prompt.ids[..prompt.len]
        .iter()
        .map(|&id| vocab.word(id).unwrap_or("?").to_string())
        .collect()
}

/// Replaces the word at the subject position, keeping the position bound.
pub fn retarget_subject(vocab: &Vocabulary, prompt: &TokenizedPrompt, new_word: &str) -> Result<TokenizedPrompt> {
    let id = vocab.id(new_word)?;
    let mut out = prompt.clone();
    out.ids[prompt.subject_index] = id;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small_and_stable() {
        let v = Vocabulary::default();
        assert_eq!(v.len(), 32);
        assert_eq!(v, Vocabulary::default());
        assert_eq!(v.id("subj").unwrap(), 1);
    }

    #[test]
    fn subject_first() {
        let v = Vocabulary::default();
        let t = tokenize(&v, &["subj", "on", "pink"]).unwrap();
        assert_eq!(t.subject_index, 0);
        assert_eq!(t.ids.len(), PROMPT_LEN);
        assert_eq!(t.len, 3);
        assert_eq!(detokenize(&v, &t), vec!["subj", "on", "pink"]);
    }

    #[test]
    fn permuted_order_tracks_subject() {
        let v = Vocabulary::default();
        let a = tokenize(&v, &["subj", "on", "pink", "left"]).unwrap();
        let b = tokenize(&v, &["pink", "left", "on", "subj"]).unwrap();
        assert_ne!(a.ids, b.ids);
        assert_eq!(b.subject_index, 3);
    }

    #[test]
    fn errors() {
        let v = Vocabulary::default();
        assert!(matches!(tokenize(&v, &["subj", "zebra"]), Err(Error::UnknownWord(_))));
        assert!(tokenize(&v, &["on", "pink"]).is_err());
    }

    #[test]
    fn retarget() {
        let v = Vocabulary::default();
        let t = tokenize(&v, &["subj", "on", "mint"]).unwrap();
        assert_eq!(retarget_subject(&v, &t, "subj").unwrap(), t);
        let p = retarget_subject(&v, &t, "pet").unwrap();
        let diff: Vec<usize> = (0..PROMPT_LEN).filter(|&i| p.ids[i] != t.ids[i]).collect();
        assert_eq!(diff, vec![0]);
        assert_eq!(p.subject_index, 0);
        assert!(retarget_subject(&v, &t, "zebra").is_err());
    }
}
