use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::ParamCheckpoint;
use crate::data::{split_of, CaptionRecord, Scene, Split, Vocabulary};
use crate::slgc::LayoutGraph;
use crate::{AdamState, Error, Result, Scalar, Tape};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One teacher-forcing example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub scene: usize,
    pub object: usize,
    pub tokens: Vec<usize>,
}

/// Scenes with their layout graphs and encoded captions.
pub struct Dataset<T: Scalar> {
    pub scenes: Vec<Scene<T>>,
    pub graphs: Vec<LayoutGraph<T>>,
    pub samples: Vec<Sample>,
    /// Raw caption words per sample.
    pub references: Vec<Vec<String>>,
}

impl<T: Scalar> Dataset<T> {
    /// Keeps the captions whose scene is in `scenes`; a caption naming an
    /// unknown object is an error.
    pub fn new(scenes: Vec<Scene<T>>, captions: &[CaptionRecord], vocab: &Vocabulary, k: usize) -> Result<Self> {
        let by_id: HashMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.scene_id.as_str(), i)).collect();
        let mut samples = Vec::new();
        let mut references = Vec::new();
        for c in captions {
            let Some(&s) = by_id.get(c.scene_id.as_str()) else {
                continue;
            };
            let object = scenes[s].index_of(c.object_id).ok_or_else(|| {
                Error::contract(format!("caption names unknown object {} in scene {}", c.object_id, c.scene_id))
            })?;
            samples.push(Sample {
                scene: s,
                object,
                tokens: vocab.encode(&c.tokens),
            });
            references.push(c.tokens.clone());
        }
        let graphs = scenes.iter().map(|s| LayoutGraph::build(s, k)).collect::<Result<_>>()?;
        Ok(Dataset {
            scenes,
            graphs,
            samples,
            references,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Splits scenes by id hash.
pub fn partition<T: Scalar>(scenes: Vec<Scene<T>>, val_percent: u32) -> (Vec<Scene<T>>, Vec<Scene<T>>) {
    scenes.into_iter().partition(|s| split_of(&s.scene_id, val_percent) == Split::Train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 12,
            lr: 1e-4,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    pub batches: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub adam_steps: u64,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
}

/// Everything needed to caption with, or keep training, a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub weights: ParamCheckpoint,
    pub train: Option<TrainSnapshot>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {}",
                c.format_version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_json(&text)
    }

    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        Model::restore(self.model.clone(), self.vocab.clone(), &self.weights)
    }
}

/// Adam over batches of samples grouped by scene. Epoch `e` visits scenes in
/// an order drawn from stream `e` of the seeded generator, so a resumed run
/// replays exactly.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    config: TrainConfig,
    adam: AdamState<T>,
    epochs_done: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(T::of(config.lr), T::of(config.weight_decay));
        Ok(Trainer {
            model,
            config,
            adam,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Changes the epoch budget; nothing else about the run depends on it.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    /// Batches of sample indices for the next epoch.
    pub fn batches(&self, data: &Dataset<T>) -> Vec<Vec<usize>> {
        let mut per_scene: Vec<Vec<usize>> = vec![Vec::new(); data.scenes.len()];
        for (i, s) in data.samples.iter().enumerate() {
            per_scene[s.scene].push(i);
        }
        let mut order: Vec<usize> = (0..per_scene.len()).filter(|&s| !per_scene[s].is_empty()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epochs_done as u64);
        order.shuffle(&mut rng);
        let flat: Vec<usize> = order.iter().flat_map(|&s| per_scene[s].iter().copied()).collect();
        flat.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Loss of one batch without updating anything.
    pub fn batch_loss(&self, data: &Dataset<T>, batch: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.forward(&mut tape, data, batch)?;
        Ok(tape.scalar(loss).as_f64())
    }

    fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, data: &Dataset<T>, batch: &[usize]) -> Result<crate::Var> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for &i in batch {
            let s = &data.samples[i];
            match groups.last_mut() {
                Some((scene, objs)) if *scene == s.scene => objs.push(s.object),
                _ => groups.push((s.scene, vec![s.object])),
            }
        }
        let refs: Vec<(&LayoutGraph<T>, &[usize])> =
            groups.iter().map(|(s, o)| (&data.graphs[*s], o.as_slice())).collect();
        let caps: Vec<&[usize]> = batch.iter().map(|&i| data.samples[i].tokens.as_slice()).collect();
        self.model.loss(tape, self.model.params(), &refs, &caps)
    }

    pub fn step(&mut self, data: &Dataset<T>, batch: &[usize]) -> Result<f64> {
        let (value, grads) = {
            let mut tape = Tape::new();
            let loss = self.forward(&mut tape, data, batch)?;
            (tape.scalar(loss).as_f64(), tape.backward(loss)?)
        };
        if !value.is_finite() {
            return Err(Error::contract("training loss is not finite"));
        }
        grads.apply_to(self.model.params_mut());
        self.adam.step(self.model.params_mut())?;
        Ok(value)
    }

    pub fn run_epoch(&mut self, data: &Dataset<T>) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::contract("no training samples"));
        }
        let batches = self.batches(data);
        let mut total = 0.0;
        for b in &batches {
            total += self.step(data, b)? * b.len() as f64;
        }
        self.epochs_done += 1;
        Ok(EpochLog {
            epoch: self.epochs_done,
            loss: total / data.len() as f64,
            batches: batches.len(),
            samples: data.len(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (first, second) = self.adam.moments();
        let conv = |m: &[Vec<T>]| m.iter().map(|v| v.iter().map(|x| x.as_f64()).collect()).collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.model.config().clone(),
            vocab: self.model.vocab().clone(),
            weights: self.model.weights(),
            train: Some(TrainSnapshot {
                config: self.config.clone(),
                epochs_done: self.epochs_done,
                adam_steps: self.adam.steps(),
                first_moments: conv(first),
                second_moments: conv(second),
            }),
        }
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let snap = ck
            .train
            .as_ref()
            .ok_or_else(|| Error::contract("checkpoint carries no optimiser state"))?;
        let model = ck.model()?;
        let conv = |m: &[Vec<f64>]| m.iter().map(|v| v.iter().map(|&x| T::of(x)).collect()).collect();
        let mut t = Trainer::new(model, snap.config.clone())?;
        t.adam = t
            .adam
            .restore(snap.adam_steps, conv(&snap.first_moments), conv(&snap.second_moments))?;
        t.epochs_done = snap.epochs_done;
        Ok(t)
    }
}
