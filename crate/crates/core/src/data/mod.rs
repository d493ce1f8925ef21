//! Scenes, captions, vocabulary and word embeddings.

mod embed;
mod features;
mod io;
mod synth;
mod vocab;

#[cfg(test)]
mod tests;

pub use embed::{load_embeddings, parse_embeddings, pseudo_embedding, EmbeddingTable};
pub use features::{featurize_object, FeaturePalette};
pub use io::{
    load_captions, load_scenes, parse_captions, parse_scenes, write_captions, write_scenes,
    CaptionRecord,
};
pub use synth::{
    generate_synthetic, nearest_object, template_caption, ClassSpec, GeneratorConfig,
    HorizontalWord, VerticalWord,
};
pub use vocab::{CaptionSample, Vocabulary, END, PAD, START, UNK};

use std::collections::HashSet;

use sha2::{Digest, Sha256};

use crate::{Box3, Error, Result, Scalar};

/// Length of an object feature vector.
pub const FEATURE_DIM: usize = 128;
/// Length of a word embedding.
pub const EMBED_DIM: usize = 300;
/// Upper bound on objects per scene.
pub const MAX_OBJECTS: usize = 256;
/// Upper bound on content tokens per caption.
pub const MAX_CAPTION_TOKENS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectProposal<T> {
    pub id: usize,
    pub class_label: String,
    pub bbox: Box3<T>,
    pub feature: Vec<T>,
}

impl<T: Scalar> ObjectProposal<T> {
    pub fn new(id: usize, class_label: impl Into<String>, bbox: Box3<T>, feature: Vec<T>) -> Result<Self> {
        if feature.len() != FEATURE_DIM {
            return Err(Error::contract(format!(
                "object {id}: feature has {} entries, expected {FEATURE_DIM}",
                feature.len()
            )));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("object {id}: non-finite feature")));
        }
        Ok(ObjectProposal {
            id,
            class_label: class_label.into(),
            bbox,
            feature,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    pub scene_id: String,
    pub objects: Vec<ObjectProposal<T>>,
}

impl<T: Scalar> Scene<T> {
    pub fn new(scene_id: impl Into<String>, objects: Vec<ObjectProposal<T>>) -> Result<Self> {
        let scene = Scene {
            scene_id: scene_id.into(),
            objects,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        if n == 0 || n > MAX_OBJECTS {
            return Err(Error::contract(format!(
                "scene {}: {n} objects, expected 1..={MAX_OBJECTS}",
                self.scene_id
            )));
        }
        let mut seen = HashSet::new();
        for o in &self.objects {
            if !seen.insert(o.id) {
                return Err(Error::contract(format!(
                    "scene {}: duplicate object id {}",
                    self.scene_id, o.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn boxes(&self) -> Vec<Box3<T>> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    /// Position of the object with the given id.
    pub fn index_of(&self, object_id: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.id == object_id)
    }

    pub fn object_ids(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.id).collect()
    }
}

/// Dataset partition of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Assigns a scene to a split from a hash of its id, so scenes never cross
/// splits. `val_percent` of the hash space goes to validation.
pub fn split_of(scene_id: &str, val_percent: u32) -> Split {
    let h = Sha256::digest(scene_id.as_bytes());
    let v = u64::from_le_bytes(h[..8].try_into().unwrap());
    if v % 100 < u64::from(val_percent) {
        Split::Val
    } else {
        Split::Train
    }
}

/// Stable 64-bit seed derived from a string.
pub(crate) fn hash_seed(tag: &str) -> u64 {
    let h = Sha256::digest(tag.as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap())
}
