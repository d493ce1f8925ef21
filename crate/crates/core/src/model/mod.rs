//! The full captioner: relation-aware graph encoder, object-centric triplet
//! graphs and the attentive GRU decoder, sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamCheckpoint;
use crate::data::{EmbeddingTable, Scene, Vocabulary, MAX_CAPTION_TOKENS};
use crate::decoder::{generate, teacher_forced_loss, DecoderContext, DecoderParams};
use crate::layers::stack_rows;
use crate::otag::{otag_all, OtagParams};
use crate::slgc::{slgc_stack, LayoutGraph, SlgcParams, SpatialWordBank, HORIZONTAL_WORDS, VERTICAL_WORDS};
use crate::{Error, ParamSet, Result, Scalar, Tape, Var};

mod eval;
mod sweep;
mod train;

#[cfg(test)]
mod tests;

pub use eval::{evaluate, predict, EvalReport, Prediction, VerticalAccuracy};
pub use sweep::{madgap_sweep, SweepConfig, SweepRow};
pub use train::{partition, Checkpoint, Dataset, EpochLog, Sample, TrainConfig, TrainSnapshot, Trainer, CHECKPOINT_VERSION};

/// Architecture switches. The three ablation flags compose.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Nearest neighbours per object in the layout graph.
    pub k: usize,
    pub layers: usize,
    pub quintuplets: bool,
    pub hidden: usize,
    /// Baseline: no edge features and no triplet graphs.
    pub edges_off: bool,
    /// No edge features; triplet graphs see zero edge slots.
    pub slgc_off: bool,
    /// No triplet graphs; the decoder attends over graph nodes `{i} + N(i)`.
    pub otag_off: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 10,
            layers: 1,
            quintuplets: true,
            hidden: 256,
            edges_off: false,
            slgc_off: false,
            otag_off: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("k, layers and hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn use_edges(&self) -> bool {
        !(self.edges_off || self.slgc_off)
    }

    pub fn use_otag(&self) -> bool {
        !(self.edges_off || self.otag_off)
    }
}

/// Words whose embeddings the model needs: the vocabulary plus the spatial
/// word bank.
pub fn required_words(vocab: &Vocabulary) -> Vec<String> {
    let mut words: Vec<String> = vocab.tokens().to_vec();
    words.extend(HORIZONTAL_WORDS.iter().chain(&VERTICAL_WORDS).map(|w| w.to_string()));
    words
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamSet<T>,
    slgc: Vec<SlgcParams>,
    otag: OtagParams,
    decoder: DecoderParams,
    bank: SpatialWordBank<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh weights drawn from `seed`. `embeddings` must cover
    /// [`required_words`] (missing words fall back to pseudo-embeddings).
    pub fn new(config: ModelConfig, vocab: Vocabulary, embeddings: &EmbeddingTable<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let bank = SpatialWordBank::from_table(embeddings);
        params.add_frozen("bank.horizontal", bank.horizontal().clone());
        params.add_frozen("bank.vertical", bank.vertical().clone());
        let slgc = (0..config.layers)
            .map(|l| SlgcParams::register(&mut params, &format!("slgc{l}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let otag = OtagParams::register(&mut params, "otag", &mut rng)?;
        let decoder = DecoderParams::register(
            &mut params,
            "decoder",
            embeddings.matrix(vocab.tokens()),
            config.hidden,
            &mut rng,
        )?;
        Ok(Model {
            config,
            vocab,
            params,
            slgc,
            otag,
            decoder,
            bank,
        })
    }

    /// Rebuilds a model from stored weights, including the frozen tables.
    pub fn restore(config: ModelConfig, vocab: Vocabulary, weights: &ParamCheckpoint) -> Result<Self> {
        let table = crate::data::load_embeddings::<T>(None, &required_words(&vocab))?;
        let mut model = Self::new(config, vocab, &table, 0)?;
        weights.restore_into(&mut model.params)?;
        let h = model.params.get(model.params.id("bank.horizontal")?).clone();
        let v = model.params.get(model.params.id("bank.vertical")?).clone();
        model.bank = SpatialWordBank::new(h.requires_grad(false), v.requires_grad(false))?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn weights(&self) -> ParamCheckpoint {
        ParamCheckpoint::capture(&self.params)
    }

    pub fn graph(&self, scene: &Scene<T>) -> Result<LayoutGraph<T>> {
        LayoutGraph::build(scene, self.config.k)
    }

    /// Encodes several scenes and gathers decoder inputs for the requested
    /// object indices of each, in order. `set` is normally
    /// [`Model::params`]; any set with the same layout works.
    pub fn context<'p>(
        &self,
        tape: &mut Tape<'p, T>,
        set: &'p ParamSet<T>,
        groups: &[(&LayoutGraph<T>, &[usize])],
    ) -> Result<DecoderContext> {
        let mut targets = Vec::with_capacity(groups.len());
        let mut hyper = Vec::new();
        let mut segments = Vec::new();
        let mut sample = 0;
        for &(graph, objects) in groups {
            let enc = slgc_stack(tape, set, &self.slgc, &self.bank, graph, self.config.use_edges())?;
            let raw = tape.constant(graph.features().clone());
            targets.push(tape.gather(raw, objects)?);
            if self.config.use_otag() {
                let graphs = otag_all(
                    tape,
                    set,
                    &self.otag,
                    graph,
                    enc.nodes,
                    enc.edges,
                    self.config.quintuplets,
                    objects,
                )?;
                for g in graphs {
                    segments.extend(std::iter::repeat_n(sample, g.hyper_nodes.len()));
                    hyper.push(g.updated);
                    sample += 1;
                }
            } else {
                let mut rows = Vec::new();
                for &i in objects {
                    if i >= graph.num_objects() {
                        return Err(Error::contract(format!("object index {i} outside scene")));
                    }
                    rows.push(i);
                    rows.extend_from_slice(graph.neighbors(i));
                    segments.extend(std::iter::repeat_n(sample, 1 + graph.neighbors(i).len()));
                    sample += 1;
                }
                hyper.push(tape.gather(enc.nodes, &rows)?);
            }
        }
        let targets = stack(tape, &targets)?;
        let hyper = stack(tape, &hyper)?;
        DecoderContext::new(tape, set, &self.decoder, targets, hyper, segments)
    }

    /// Teacher-forced loss of a batch; `captions` follow the order of
    /// `groups`.
    pub fn loss<'p>(
        &self,
        tape: &mut Tape<'p, T>,
        set: &'p ParamSet<T>,
        groups: &[(&LayoutGraph<T>, &[usize])],
        captions: &[&[usize]],
    ) -> Result<Var> {
        let ctx = self.context(tape, set, groups)?;
        teacher_forced_loss(tape, set, &self.decoder, &ctx, captions)
    }

    /// Greedy captions (content words) for object indices of one scene.
    pub fn caption(&self, graph: &LayoutGraph<T>, objects: &[usize]) -> Result<Vec<Vec<String>>> {
        let mut tape = Tape::new();
        let ctx = self.context(&mut tape, &self.params, &[(graph, objects)])?;
        let ids = generate(&mut tape, &self.params, &self.decoder, &ctx, MAX_CAPTION_TOKENS)?;
        Ok(ids.iter().map(|s| self.vocab.decode(s)).collect())
    }
}

fn stack<T: Scalar>(tape: &mut Tape<'_, T>, blocks: &[Var]) -> Result<Var> {
    match blocks {
        [] => Err(Error::contract("empty batch")),
        [one] => Ok(*one),
        _ => stack_rows(tape, blocks),
    }
}
