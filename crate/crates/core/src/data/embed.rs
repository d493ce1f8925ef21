use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{hash_seed, EMBED_DIM};
use crate::{Error, Result, Scalar, Tensor};

/// Word to 300-d vector map.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    vectors: HashMap<String, Vec<T>>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn get(&self, word: &str) -> Option<&[T]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Stacks the vectors of `words` into a `[words.len(), 300]` matrix,
    /// falling back to the pseudo-embedding for absent words.
    pub fn matrix(&self, words: &[impl AsRef<str>]) -> Tensor<T> {
        let mut data = Vec::with_capacity(words.len() * EMBED_DIM);
        for w in words {
            match self.get(w.as_ref()) {
                Some(v) => data.extend_from_slice(v),
                None => data.extend(pseudo_embedding::<T>(w.as_ref())),
            }
        }
        Tensor::matrix(words.len(), EMBED_DIM, data).expect("rows of 300")
    }
}

/// Unit-norm 300-d vector seeded by a stable hash of the word.
pub fn pseudo_embedding<T: Scalar>(word: &str) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(word));
    let v: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| T::of(x / norm)).collect()
}

/// Parses `word v1 .. v300` lines. Lines for words outside `words` are
/// skipped; words absent from the text get a pseudo-embedding.
pub fn parse_embeddings<T: Scalar>(text: &str, words: &[impl AsRef<str>]) -> Result<EmbeddingTable<T>> {
    let wanted: HashMap<&str, ()> = words.iter().map(|w| (w.as_ref(), ())).collect();
    let mut vectors = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if values.len() != EMBED_DIM {
            return Err(Error::parse(
                format!("line {}", n + 1),
                format!("'{word}' has {} values, expected {EMBED_DIM}", values.len()),
            ));
        }
        if !wanted.contains_key(word) {
            continue;
        }
        let v = values
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(T::of)
                    .ok_or_else(|| Error::parse(format!("line {}", n + 1), format!("bad value '{s}'")))
            })
            .collect::<Result<Vec<T>>>()?;
        vectors.insert(word.to_owned(), v);
    }
    for w in words {
        vectors
            .entry(w.as_ref().to_owned())
            .or_insert_with(|| pseudo_embedding(w.as_ref()));
    }
    Ok(EmbeddingTable { vectors })
}

/// Embeddings for `words`, from a text file when given, pseudo otherwise.
pub fn load_embeddings<T: Scalar>(path: Option<&Path>, words: &[impl AsRef<str>]) -> Result<EmbeddingTable<T>> {
    match path {
        Some(p) => parse_embeddings(&std::fs::read_to_string(p)?, words),
        None => parse_embeddings("", words),
    }
}
