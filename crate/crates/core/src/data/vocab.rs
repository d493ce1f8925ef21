use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::MAX_CAPTION_TOKENS;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Token/index bijection with four reserved entries at the front.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by every distinct corpus token in sorted order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a [String]>) -> Self {
        let words: BTreeSet<&str> = corpus
            .into_iter()
            .flatten()
            .map(String::as_str)
            .filter(|w| !RESERVED.contains(w))
            .collect();
        let tokens = RESERVED
            .iter()
            .copied()
            .chain(words)
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens).expect("distinct by construction")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::contract("vocabulary must begin with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    /// `<start> w_1 .. w_n <end>`, keeping at most 30 content tokens.
    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        let mut out = Vec::with_capacity(words.len().min(MAX_CAPTION_TOKENS) + 2);
        out.push(START);
        out.extend(words.iter().take(MAX_CAPTION_TOKENS).map(|w| self.index(w)));
        out.push(END);
        out
    }

    /// Content words of an index sequence; reserved markers are dropped.
    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .filter(|&&i| !matches!(i, PAD | START | END))
            .map(|&i| self.tokens[i].clone())
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// An encoded training caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionSample {
    pub scene_id: String,
    pub target_object_id: usize,
    /// Starts with [`START`], ends with [`END`].
    pub tokens: Vec<usize>,
}

impl CaptionSample {
    pub fn new(scene_id: impl Into<String>, target_object_id: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != START || tokens[tokens.len() - 1] != END {
            return Err(Error::contract("caption must be framed by start and end tokens"));
        }
        if tokens.len() > MAX_CAPTION_TOKENS + 2 {
            return Err(Error::contract(format!(
                "caption has {} tokens, limit is {}",
                tokens.len(),
                MAX_CAPTION_TOKENS + 2
            )));
        }
        Ok(CaptionSample {
            scene_id: scene_id.into(),
            target_object_id,
            tokens,
        })
    }
}
