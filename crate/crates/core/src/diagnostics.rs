//! Self-checks run by the command-line tool: finite-difference gradient
//! checks over every operation and the composed encoder/decoder, and
//! normalisation checks over every attention distribution.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, grad_check_params, CustomOp, Tensor};
use crate::data::{load_embeddings, ObjectProposal, Scene, Vocabulary, FEATURE_DIM, START, END};
use crate::decoder::{decode_step, teacher_forced_loss, DecoderContext, DecoderParams, DecoderState};
use crate::model::{required_words, Model, ModelConfig};
use crate::otag::{otag_all, OtagParams};
use crate::slgc::{slgc_stack, LayoutGraph, SlgcParams, SpatialWordBank, HORIZONTAL_WORDS, NODE_DIM, VERTICAL_WORDS};
use crate::{Box3, ParamSet, Result, Tape, Var};

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    /// Coordinates compared against central differences.
    pub coords: usize,
    /// Coordinates skipped because the probe crossed a rectifier kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl ComponentCheck {
    fn new(component: &str, coords: usize, skipped: usize, max_rel_error: f64) -> Self {
        ComponentCheck {
            component: component.to_owned(),
            coords,
            skipped,
            max_rel_error,
            passed: coords > 0 && max_rel_error < GRADCHECK_TOLERANCE,
        }
    }
}

type Probe = Box<dyn for<'p> Fn(&mut Tape<'p, f64>, Var) -> Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("valid shape")
}

/// Contracts `y` with fixed random weights so every output coordinate
/// reaches the scalar with a distinct coefficient.
fn readout(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(y), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn op_probes(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>, Probe)> {
    let (r, c) = (3, 4);
    let w = rand_tensor(rng, &[c, 5], 1.0);
    let other = rand_tensor(rng, &[r, c], 1.0);
    let bias = rand_tensor(rng, &[c], 1.0);
    let col = rand_tensor(rng, &[r, 1], 1.0);
    let nt = rand_tensor(rng, &[6, c], 1.0);
    let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let x = || -> Tensor<f64> { rand_tensor(&mut ChaCha8Rng::seed_from_u64(99), &[r, c], 1.0) };
    let mut relu_x = x();
    relu_x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v = 0.5
        }
    });
    let o1 = other.clone();
    let o2 = other.clone();
    let o3 = other.clone();
    vec![
        (
            "matmul",
            x(),
            Box::new(move |t, x| {
                let w = t.constant(w.clone());
                let y = t.matmul(x, w)?;
                readout(t, y, 1)
            }),
        ),
        (
            "matmul_nt",
            x(),
            Box::new(move |t, x| {
                let o = t.constant(nt.clone());
                let y = t.matmul_nt(x, o)?;
                readout(t, y, 2)
            }),
        ),
        (
            "concat",
            x(),
            Box::new(move |t, x| {
                let o = t.constant(o1.clone());
                let y = t.concat(&[o, x, x])?;
                readout(t, y, 3)
            }),
        ),
        (
            "add/sub",
            x(),
            Box::new(move |t, x| {
                let o = t.constant(o2.clone());
                let b = t.constant(bias.clone());
                let y = t.add(x, o)?;
                let y = t.add(y, b)?;
                let y = t.sub(y, o)?;
                readout(t, y, 4)
            }),
        ),
        (
            "mul",
            x(),
            Box::new(move |t, x| {
                let c = t.constant(col.clone());
                let y = t.mul(x, x)?;
                let y = t.mul(y, c)?;
                let y = t.scale(y, 0.7);
                readout(t, y, 5)
            }),
        ),
        (
            "tanh",
            x(),
            Box::new(|t, x| {
                let y = t.tanh(x);
                readout(t, y, 6)
            }),
        ),
        (
            "sigmoid",
            x(),
            Box::new(|t, x| {
                let y = t.sigmoid(x);
                readout(t, y, 7)
            }),
        ),
        (
            "relu",
            relu_x,
            Box::new(|t, x| {
                let y = t.relu(x);
                readout(t, y, 8)
            }),
        ),
        (
            "softmax",
            x(),
            Box::new(|t, x| {
                let y = t.softmax(x);
                readout(t, y, 9)
            }),
        ),
        (
            "gather",
            x(),
            Box::new(|t, x| {
                let y = t.gather(x, &[2, 0, 2, 1])?;
                readout(t, y, 10)
            }),
        ),
        (
            "dot",
            x(),
            Box::new(move |t, x| {
                let o = t.constant(o3.clone());
                let y = t.dot(x, o)?;
                let z = t.dot(x, x)?;
                let y = t.add(y, z)?;
                readout(t, y, 11)
            }),
        ),
        (
            "segment_softmax/segment_sum",
            x(),
            Box::new(|t, x| {
                let seg = [0, 1, 1];
                let s = t.dot(x, x)?;
                let a = t.segment_softmax(s, &seg, 2)?;
                let y = t.mul(x, a)?;
                let y = t.segment_sum(y, &seg, 2)?;
                readout(t, y, 12)
            }),
        ),
        ("sum/mean", x(), Box::new(|t, x| {
            let s = t.sum(x);
            let y = t.tanh(x);
            let m = t.mean(y);
            t.add(s, m)
        })),
        (
            "cross_entropy",
            x(),
            Box::new(move |t, x| t.cross_entropy(x, &targets, None)),
        ),
    ]
}

fn custom_probe(op: Rc<dyn CustomOp<f64>>) -> Probe {
    Box::new(move |t, x| {
        let y = t.custom(op.clone(), &[x])?;
        readout(t, y, 13)
    })
}

fn word_bank() -> Result<SpatialWordBank<f64>> {
    let words: Vec<&str> = HORIZONTAL_WORDS.iter().chain(&VERTICAL_WORDS).copied().collect();
    Ok(SpatialWordBank::from_table(&load_embeddings(None, &words)?))
}

/// A scene of `n` random boxes with random features.
pub fn random_scene(n: usize, seed: u64) -> Result<Scene<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = (0..n)
        .map(|i| {
            let b = Box3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(0.0..2.0),
                rng.random_range(0.2..1.5),
                rng.random_range(0.2..1.5),
                rng.random_range(0.2..1.5),
            )?;
            let f = (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            ObjectProposal::new(i, "thing", b, f)
        })
        .collect::<Result<Vec<_>>>()?;
    Scene::new(format!("random{seed}"), objects)
}

fn trainable(set: &ParamSet<f64>) -> Vec<crate::ParamId> {
    set.ids().filter(|&id| set.get(id).is_trainable()).collect()
}

fn composite(name: &str, checks: &[crate::autodiff::ParamCheck]) -> ComponentCheck {
    let worst = checks.iter().fold(0.0f64, |m, c| m.max(c.max_rel_error));
    ComponentCheck::new(
        name,
        checks.iter().map(|c| c.coords_checked).sum(),
        checks.iter().map(|c| c.coords_skipped).sum(),
        worst,
    )
}

const STEP: f64 = 1e-4;
const COORDS: usize = 6;

/// Gradient checks of every tape operation, every custom operation in
/// `extra`, and the graph convolution, triplet graph, decoder and full
/// model losses, in 64-bit arithmetic.
pub fn gradcheck_suite(seed: u64, extra: &[Rc<dyn CustomOp<f64>>]) -> Result<Vec<ComponentCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, x, f) in op_probes(&mut rng) {
        let n = x.len();
        out.push(ComponentCheck::new(name, n, 0, grad_check(f, &x, 1e-5)?));
    }
    for op in extra {
        let x = rand_tensor(&mut rng, &[3, 4], 1.0);
        let err = grad_check(custom_probe(op.clone()), &x, 1e-5)?;
        out.push(ComponentCheck::new(&format!("custom:{}", op.name()), x.len(), 0, err));
    }

    let bank = word_bank()?;
    let scene = random_scene(4, seed)?;
    let graph = LayoutGraph::build(&scene, 2)?;
    let mut set = ParamSet::new();
    let slgc = SlgcParams::register(&mut set, "slgc0", &mut rng)?;
    let otag = OtagParams::register(&mut set, "otag", &mut rng)?;
    let probe = rand_tensor(&mut rng, &[graph.num_nodes(), NODE_DIM], 1.0);

    let slgc_ids: Vec<_> = trainable(&set).into_iter().filter(|&id| set.name(id).starts_with("slgc")).collect();
    let checks = grad_check_params(
        |t, p| {
            let enc = slgc_stack(t, p, &[slgc], &bank, &graph, true)?;
            let w = t.constant(probe.clone());
            let y = t.mul(enc.nodes, w)?;
            Ok(t.sum(y))
        },
        &mut set,
        &slgc_ids,
        COORDS,
        STEP,
        seed,
    )?;
    out.push(composite("slgc", &checks));

    let all = trainable(&set);
    let pooled_probe = rand_tensor(&mut rng, &[1, NODE_DIM], 1.0);
    let checks = grad_check_params(
        |t, p| {
            let enc = slgc_stack(t, p, &[slgc], &bank, &graph, true)?;
            let graphs = otag_all(t, p, &otag, &graph, enc.nodes, enc.edges, true, &[0, 2])?;
            let w = t.constant(pooled_probe.clone());
            let mut total: Option<Var> = None;
            for g in graphs {
                let pooled = t.segment_sum(g.updated, &vec![0; g.hyper_nodes.len()], 1)?;
                let y = t.mul(pooled, w)?;
                let y = t.sum(y);
                total = Some(match total {
                    Some(acc) => t.add(acc, y)?,
                    None => y,
                });
            }
            Ok(total.expect("two targets"))
        },
        &mut set,
        &all,
        COORDS,
        STEP,
        seed,
    )?;
    out.push(composite("slgc+otag", &checks));

    let mut dset = ParamSet::new();
    let vocab = 12;
    let emb = rand_tensor(&mut rng, &[vocab, crate::data::EMBED_DIM], 0.5);
    let dec = DecoderParams::register(&mut dset, "decoder", emb, 6, &mut rng)?;
    let targets = rand_tensor(&mut rng, &[2, FEATURE_DIM], 1.0);
    let hyper = rand_tensor(&mut rng, &[5, NODE_DIM], 1.0);
    let segments = vec![0, 0, 0, 1, 1];
    let caps: [&[usize]; 2] = [&[START, 4, 7, END], &[START, 9, END]];
    let ids = trainable(&dset);
    let checks = grad_check_params(
        |t, p| {
            let tv = t.constant(targets.clone());
            let hv = t.constant(hyper.clone());
            let ctx = DecoderContext::new(t, p, &dec, tv, hv, segments.clone())?;
            teacher_forced_loss(t, p, &dec, &ctx, &caps)
        },
        &mut dset,
        &ids,
        COORDS,
        STEP,
        seed,
    )?;
    out.push(composite("decoder", &checks));

    let words: Vec<String> = ["a", "b", "c", "left", "top"].iter().map(|w| w.to_string()).collect();
    let vocab = Vocabulary::build([words.as_slice()]);
    let table = load_embeddings(None, &required_words(&vocab))?;
    let config = ModelConfig {
        k: 2,
        hidden: 6,
        ..Default::default()
    };
    let model = Model::new(config, vocab.clone(), &table, seed)?;
    let mut mset = model.params().clone();
    let caps: Vec<Vec<usize>> = [&words[..3], &words[2..]].iter().map(|w| vocab.encode(w)).collect();
    let caps: Vec<&[usize]> = caps.iter().map(Vec::as_slice).collect();
    let ids = trainable(&mset);
    let checks = grad_check_params(
        |t, p| model.loss(t, p, &[(&graph, &[1, 3])], &caps),
        &mut mset,
        &ids,
        COORDS,
        STEP,
        seed,
    )?;
    out.push(composite("slgc+otag+decoder", &checks));
    Ok(out)
}

/// Largest deviation from 1 of any normalised distribution, per kind, and
/// the smallest weight seen.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NormalizationReport {
    pub passes: usize,
    pub distributions: usize,
    /// Horizontal word distributions, one per edge.
    pub alpha: f64,
    /// Aggregation weights, one distribution per destination node.
    pub beta: f64,
    /// Triplet-graph attention rows.
    pub otag: f64,
    /// Decoder attention, one distribution per sample and step.
    pub gamma: f64,
    pub min_weight: f64,
}

impl NormalizationReport {
    pub fn max_deviation(&self) -> f64 {
        self.alpha.max(self.beta).max(self.otag).max(self.gamma)
    }
}

fn group_sums(values: &[f64], groups: &[usize], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for (v, &g) in values.iter().zip(groups) {
        s[g] += v;
    }
    s
}

fn deviation(sums: impl IntoIterator<Item = f64>, count: &mut usize) -> f64 {
    sums.into_iter().fold(0.0f64, |m, s| {
        *count += 1;
        m.max((s - 1.0).abs())
    })
}

/// Random scenes through freshly drawn encoders and decoder, recording how
/// far every softmax output is from summing to one.
pub fn normalization_suite(passes: usize, seed: u64) -> Result<NormalizationReport> {
    let bank = word_bank()?;
    let mut rep = NormalizationReport {
        passes,
        min_weight: f64::INFINITY,
        ..Default::default()
    };
    for pass in 0..passes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(pass as u64));
        let n = rng.random_range(2..=6);
        let scene = random_scene(n, rng.random())?;
        let graph = LayoutGraph::build(&scene, rng.random_range(1..=3))?;
        let mut set = ParamSet::new();
        let slgc = SlgcParams::register(&mut set, "slgc0", &mut rng)?;
        let otag = OtagParams::register(&mut set, "otag", &mut rng)?;
        let emb = rand_tensor(&mut rng, &[8, crate::data::EMBED_DIM], 0.5);
        let dec = DecoderParams::register(&mut set, "decoder", emb, 8, &mut rng)?;

        let mut t = Tape::new();
        let enc = slgc_stack(&mut t, &set, &[slgc], &bank, &graph, true)?;
        let layer = enc.layers[0];
        let alpha = t.value(layer.edges.expect("edges enabled").alpha).to_vec();
        rep.alpha = rep.alpha.max(deviation(alpha.chunks(5).map(|r| r.iter().sum()), &mut rep.distributions));
        let beta = t.value(layer.beta).to_vec();
        let sums = group_sums(&beta, graph.edge_targets(), graph.num_nodes());
        rep.beta = rep.beta.max(deviation(sums, &mut rep.distributions));
        let mut weights: Vec<f64> = alpha.iter().chain(&beta).copied().collect();

        let targets: Vec<usize> = (0..n).collect();
        let graphs = otag_all(&mut t, &set, &otag, &graph, enc.nodes, enc.edges, true, &targets)?;
        let mut segments = Vec::new();
        let mut hyper = Vec::new();
        for (s, g) in graphs.iter().enumerate() {
            let m = g.hyper_nodes.len();
            let a = t.value(g.attention).to_vec();
            rep.otag = rep.otag.max(deviation(a.chunks(m).map(|r| r.iter().sum()), &mut rep.distributions));
            weights.extend(a);
            segments.extend(std::iter::repeat_n(s, m));
            hyper.push(g.updated);
        }
        let hyper = if hyper.len() == 1 { hyper[0] } else { crate::layers::stack_rows(&mut t, &hyper)? };
        let raw = t.constant(graph.features().clone());
        let tv = t.gather(raw, &targets)?;
        let ctx = DecoderContext::new(&mut t, &set, &dec, tv, hyper, segments.clone())?;
        let mut state = DecoderState::zeros(&mut t, n, 8);
        let mut prev = vec![START; n];
        for _ in 0..3 {
            let step = decode_step(&mut t, &set, &dec, &ctx, state, &prev)?;
            let g = t.value(step.gamma).to_vec();
            rep.gamma = rep.gamma.max(deviation(group_sums(&g, &segments, n), &mut rep.distributions));
            weights.extend(g);
            prev = (0..n).map(|_| rng.random_range(4..8)).collect();
            state = step.state;
        }
        rep.min_weight = weights.into_iter().fold(rep.min_weight, f64::min);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Doubling {
        wrong: bool,
    }

    impl CustomOp<f64> for Doubling {
        fn name(&self) -> &str {
            if self.wrong {
                "broken"
            } else {
                "doubling"
            }
        }

        fn forward(&self, inputs: &[(&[usize], &[f64])]) -> Result<(Vec<usize>, Vec<f64>)> {
            let (shape, x) = inputs[0];
            Ok((shape.to_vec(), x.iter().map(|v| 2.0 * v).collect()))
        }

        fn backward(&self, _: &[(&[usize], &[f64])], _: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
            let k = if self.wrong { 2.2 } else { 2.0 };
            vec![grad_out.iter().map(|g| k * g).collect()]
        }
    }

    #[test]
    fn suite_passes_and_flags_a_broken_backward_rule() {
        let ops: Vec<Rc<dyn CustomOp<f64>>> = vec![Rc::new(Doubling { wrong: false }), Rc::new(Doubling { wrong: true })];
        let r = gradcheck_suite(0, &ops).unwrap();
        for c in &r {
            assert_eq!(c.passed, c.component != "custom:broken", "{c:?}");
        }
        assert!(r.iter().any(|c| c.component == "slgc+otag+decoder"));
    }

    #[test]
    fn every_distribution_is_normalised() {
        let r = normalization_suite(20, 1).unwrap();
        assert!(r.max_deviation() < 1e-12, "{r:?}");
        assert!(r.min_weight >= 0.0);
        assert!(r.distributions > 20 * 4);
    }
}
