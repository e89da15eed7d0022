//! Caption types: vocabulary, role-tagged token sequences, masked captions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Part-of-speech role assigned at caption generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    /// The single subject noun ("square").
    SubjectNoun,
    /// Adjectives modifying the subject ("red").
    Adjective,
    /// Predicate verbs ("moves").
    PredicateVerb,
    /// Nouns and modifiers directly related to the predicate ("right",
    /// "circle" in "approaches the blue circle").
    PredicateNoun,
    /// Function words ("the").
    Other,
}

/// Fixed token list shared by the caption grammar and the reconstructor.
///
/// Real tokens occupy ids `0..len()`; the reserved `[MASK]` id is `len()` and
/// is never part of the output distribution space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t.clone()) {
                return Err(Error::InvalidCaption(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Reserved id for the `[MASK]` token (one past the last real token).
    pub fn mask_id(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == token).map(|i| i as u32)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// Token sequence with per-token roles; the source of all masking strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedCaption {
    pub tokens: Vec<u32>,
    pub roles: Vec<TokenRole>,
    pub subject_index: usize,
}

impl TokenizedCaption {
    pub const MAX_LEN: usize = 16;

    pub fn new(tokens: Vec<u32>, roles: Vec<TokenRole>, subject_index: usize) -> Result<Self> {
        if tokens.len() != roles.len() {
            return Err(Error::InvalidCaption(format!(
                "{} tokens vs {} roles",
                tokens.len(),
                roles.len()
            )));
        }
        if tokens.is_empty() || tokens.len() > Self::MAX_LEN {
            return Err(Error::InvalidCaption(format!(
                "caption length {} out of 1..={}",
                tokens.len(),
                Self::MAX_LEN
            )));
        }
        let subjects: Vec<usize> = roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == TokenRole::SubjectNoun)
            .map(|(i, _)| i)
            .collect();
        if subjects.len() != 1 || subjects[0] != subject_index {
            return Err(Error::InvalidCaption(format!(
                "expected exactly one subject noun at {subject_index}, found {subjects:?}"
            )));
        }
        if !roles.contains(&TokenRole::PredicateVerb) {
            return Err(Error::InvalidCaption("no predicate verb".into()));
        }
        Ok(TokenizedCaption {
            tokens,
            roles,
            subject_index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.tokens
            .iter()
            .map(|&id| vocab.token(id).unwrap_or("<?>").to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Caption with some positions replaced by the reserved `[MASK]` id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedCaption {
    /// Token sequence with `[MASK]` substituted at `masked_positions`.
    pub tokens: Vec<u32>,
    /// Sorted indices of masked positions.
    pub masked_positions: Vec<usize>,
    /// Original token ids at the masked positions, in the same order.
    pub targets: Vec<u32>,
}

impl MaskedCaption {
    /// Masks `positions` of `caption` with `mask_id`. Positions are sorted and
    /// deduplicated; at least one is required.
    pub fn new(caption: &TokenizedCaption, positions: &[usize], mask_id: u32) -> Result<Self> {
        let mut pos: Vec<usize> = positions.to_vec();
        pos.sort_unstable();
        pos.dedup();
        if pos.is_empty() {
            return Err(Error::InvalidCaption("no positions to mask".into()));
        }
        if *pos.last().unwrap() >= caption.len() {
            return Err(Error::InvalidCaption(format!(
                "mask position {} out of caption length {}",
                pos.last().unwrap(),
                caption.len()
            )));
        }
        let mut tokens = caption.tokens.clone();
        let mut targets = Vec::with_capacity(pos.len());
        for &p in &pos {
            targets.push(tokens[p]);
            tokens[p] = mask_id;
        }
        Ok(MaskedCaption {
            tokens,
            masked_positions: pos,
            targets,
        })
    }

    /// Reconstructs the original token sequence exactly.
    pub fn restore(&self) -> Vec<u32> {
        let mut out = self.tokens.clone();
        for (i, &p) in self.masked_positions.iter().enumerate() {
            out[p] = self.targets[i];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_caption() -> TokenizedCaption {
        // "the red square moves right"
        TokenizedCaption::new(
            vec![0, 1, 2, 3, 4],
            vec![
                TokenRole::Other,
                TokenRole::Adjective,
                TokenRole::SubjectNoun,
                TokenRole::PredicateVerb,
                TokenRole::PredicateNoun,
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn restore_is_exact() {
        let c = toy_caption();
        let m = MaskedCaption::new(&c, &[1, 3], 50).unwrap();
        assert_eq!(m.tokens[1], 50);
        assert_eq!(m.tokens[3], 50);
        assert_eq!(m.restore(), c.tokens);
    }

    #[test]
    fn requires_positions() {
        let c = toy_caption();
        assert!(MaskedCaption::new(&c, &[], 50).is_err());
    }

    #[test]
    fn caption_invariants() {
        // two subject nouns
        assert!(TokenizedCaption::new(
            vec![0, 1],
            vec![TokenRole::SubjectNoun, TokenRole::SubjectNoun],
            0
        )
        .is_err());
        // no verb
        assert!(TokenizedCaption::new(
            vec![0, 1],
            vec![TokenRole::SubjectNoun, TokenRole::Other],
            0
        )
        .is_err());
    }
}
