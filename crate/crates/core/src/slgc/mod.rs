//! Spatial layout graph convolution.
//!
//! Objects are connected to their K nearest neighbours plus one global node
//! carrying the mean object feature. Every directed edge `j -> i` gets a
//! 128-d semantic feature built from relation word embeddings: a learned
//! mixture of horizontal words and a rule-based vertical word. Message
//! passing weighs neighbours by a bilinear score that sees both the node and
//! the edge.

use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;

use crate::data::{EmbeddingTable, Scene, VerticalWord, EMBED_DIM, FEATURE_DIM};
use crate::geometry::knn_graph;
use crate::layers::{check_linear, linear, register_linear};
use crate::{Box3, Error, ParamId, ParamSet, Result, Scalar, Tape, Tensor, Var};


pub const HORIZONTAL_WORDS: [&str; 5] = ["left", "right", "front", "behind", "besides"];
pub const VERTICAL_WORDS: [&str; 2] = ["top", "bottom"];
/// Node and edge feature width.
pub const NODE_DIM: usize = FEATURE_DIM;

/// Embeddings of the seven relation words.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialWordBank<T> {
    horizontal: Tensor<T>,
    vertical: Tensor<T>,
}

impl<T: Scalar> SpatialWordBank<T> {
    pub fn new(horizontal: Tensor<T>, vertical: Tensor<T>) -> Result<Self> {
        if horizontal.shape() != [5, EMBED_DIM] || vertical.shape() != [2, EMBED_DIM] {
            return Err(Error::contract(format!(
                "word bank needs [5, 300] and [2, 300], got {:?} and {:?}",
                horizontal.shape(),
                vertical.shape()
            )));
        }
        Ok(SpatialWordBank {
            horizontal: horizontal.requires_grad(false),
            vertical: vertical.requires_grad(false),
        })
    }

    pub fn from_table(table: &EmbeddingTable<T>) -> Self {
        Self::new(table.matrix(&HORIZONTAL_WORDS), table.matrix(&VERTICAL_WORDS)).expect("fixed shapes")
    }

    /// `[5, 300]`, rows in [`HORIZONTAL_WORDS`] order.
    pub fn horizontal(&self) -> &Tensor<T> {
        &self.horizontal
    }

    /// `[2, 300]`, rows `top`, `bottom`.
    pub fn vertical(&self) -> &Tensor<T> {
        &self.vertical
    }

    pub fn top(&self) -> &[T] {
        self.vertical.row(0)
    }

    pub fn bottom(&self) -> &[T] {
        self.vertical.row(1)
    }
}

/// Parameters of one graph convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlgcParams {
    pub w_v: ParamId,
    pub w_c: ParamId,
    pub w_alpha: ParamId,
    pub w_e: ParamId,
    /// `W_1 .. W_6` of the message passing rule.
    pub w: [ParamId; 6],
}

impl SlgcParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(set: &mut ParamSet<T>, prefix: &str, rng: &mut R) -> Result<Self> {
        let d = NODE_DIM;
        let p = SlgcParams {
            w_v: register_linear(set, &format!("{prefix}.w_v"), 2 * d, d, rng),
            w_c: register_linear(set, &format!("{prefix}.w_c"), 2, d, rng),
            w_alpha: register_linear(set, &format!("{prefix}.w_alpha"), d, HORIZONTAL_WORDS.len(), rng),
            w_e: register_linear(set, &format!("{prefix}.w_e"), 2 * EMBED_DIM, d, rng),
            w: std::array::from_fn(|k| register_linear(set, &format!("{prefix}.w{}", k + 1), d, d, rng)),
        };
        p.check(set)?;
        Ok(p)
    }

    pub fn lookup<T: Scalar>(set: &ParamSet<T>, prefix: &str) -> Result<Self> {
        let id = |n: &str| set.id(&format!("{prefix}.{n}"));
        let w = [id("w1")?, id("w2")?, id("w3")?, id("w4")?, id("w5")?, id("w6")?];
        let p = SlgcParams {
            w_v: id("w_v")?,
            w_c: id("w_c")?,
            w_alpha: id("w_alpha")?,
            w_e: id("w_e")?,
            w,
        };
        p.check(set)?;
        Ok(p)
    }

    /// Verifies `W_v: 256->128`, `W_c: 2->128`, `W_alpha: 128->5`,
    /// `W_e: 600->128` and `W_1..W_6: 128->128`.
    pub fn check<T: Scalar>(&self, set: &ParamSet<T>) -> Result<()> {
        let d = NODE_DIM;
        check_linear(set, self.w_v, 2 * d, d)?;
        check_linear(set, self.w_c, 2, d)?;
        check_linear(set, self.w_alpha, d, HORIZONTAL_WORDS.len())?;
        check_linear(set, self.w_e, 2 * EMBED_DIM, d)?;
        for &w in &self.w {
            check_linear(set, w, d, d)?;
        }
        Ok(())
    }
}

/// Object graph with a trailing global node.
///
/// Edges are directed `source -> target` and grouped by target in ascending
/// order; within a target the KNN neighbours come first, nearest first, then
/// the global node.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutGraph<T> {
    num_objects: usize,
    features: Tensor<T>,
    neighbors: Vec<Vec<usize>>,
    edge_source: Vec<usize>,
    edge_target: Vec<usize>,
    offsets: Tensor<T>,
    vertical: Vec<VerticalWord>,
    edge_index: HashMap<(usize, usize), usize>,
}

impl<T: Scalar> LayoutGraph<T> {
    pub fn build(scene: &Scene<T>, k: usize) -> Result<Self> {
        scene.validate()?;
        if k == 0 {
            return Err(Error::Config("KNN fan-out must be at least 1".into()));
        }
        let n = scene.len();
        let g = n;
        let boxes = scene.boxes();
        let knn = knn_graph(&boxes, k);

        let mut feats = Vec::with_capacity((n + 1) * NODE_DIM);
        let mut mean = vec![T::zero(); NODE_DIM];
        for o in &scene.objects {
            feats.extend_from_slice(&o.feature);
            mean.iter_mut().zip(&o.feature).for_each(|(m, &f)| *m += f);
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        feats.extend(mean.into_iter().map(|m| m * inv));

        let mut pos: Vec<(T, T)> = boxes.iter().map(|b| (b.cx(), b.cy())).collect();
        let (sx, sy) = pos.iter().fold((T::zero(), T::zero()), |(a, b), &(x, y)| (a + x, b + y));
        pos.push((sx * inv, sy * inv));

        let mut neighbors: Vec<Vec<usize>> = knn
            .into_iter()
            .map(|mut nb| {
                nb.push(g);
                nb
            })
            .collect();
        neighbors.push((0..n).collect());

        let mut graph = LayoutGraph {
            num_objects: n,
            features: Tensor::matrix(n + 1, NODE_DIM, feats)?,
            neighbors,
            edge_source: Vec::new(),
            edge_target: Vec::new(),
            offsets: Tensor::zeros(&[1]),
            vertical: Vec::new(),
            edge_index: HashMap::new(),
        };
        let mut offsets = Vec::new();
        for i in 0..=n {
            for &j in &graph.neighbors[i] {
                graph.edge_index.insert((j, i), graph.edge_source.len());
                graph.edge_source.push(j);
                graph.edge_target.push(i);
                offsets.push(pos[j].0 - pos[i].0);
                offsets.push(pos[j].1 - pos[i].1);
                graph.vertical.push(if i == g || j == g {
                    VerticalWord::None
                } else {
                    vertical_case(&boxes[j], &boxes[i])
                });
            }
        }
        graph.offsets = Tensor::matrix(graph.edge_source.len(), 2, offsets)?;
        Ok(graph)
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn num_nodes(&self) -> usize {
        self.num_objects + 1
    }

    pub fn global(&self) -> usize {
        self.num_objects
    }

    pub fn num_edges(&self) -> usize {
        self.edge_source.len()
    }

    /// Initial `[N_O + 1, 128]` node features, global node last.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    /// In-neighbours `N(i)` of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn edge_sources(&self) -> &[usize] {
        &self.edge_source
    }

    pub fn edge_targets(&self) -> &[usize] {
        &self.edge_target
    }

    /// Row of edge `j -> i`.
    pub fn edge(&self, j: usize, i: usize) -> Option<usize> {
        self.edge_index.get(&(j, i)).copied()
    }

    /// `[E, 2]` planar offsets `(x_j - x_i, y_j - y_i)`.
    pub fn offsets(&self) -> &Tensor<T> {
        &self.offsets
    }

    pub fn vertical_cases(&self) -> &[VerticalWord] {
        &self.vertical
    }

    /// `[E, 300]` rule-based vertical features.
    pub fn vertical_features(&self, bank: &SpatialWordBank<T>) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.num_edges() * EMBED_DIM);
        for case in &self.vertical {
            match case {
                VerticalWord::Top => data.extend_from_slice(bank.top()),
                VerticalWord::Bottom => data.extend_from_slice(bank.bottom()),
                VerticalWord::None => data.extend(std::iter::repeat_n(T::zero(), EMBED_DIM)),
            }
        }
        Tensor::matrix(self.num_edges(), EMBED_DIM, data).expect("rows of 300")
    }
}

pub fn build_layout_graph<T: Scalar>(scene: &Scene<T>, k: usize) -> Result<LayoutGraph<T>> {
    LayoutGraph::build(scene, k)
}

fn vertical_case<T: Scalar>(box_j: &Box3<T>, box_i: &Box3<T>) -> VerticalWord {
    VerticalWord::of(box_j, box_i)
}

/// Rule-based vertical feature of `j` relative to `i`: the `top` embedding
/// when `j` lies entirely above `i`, `bottom` when entirely below, zero
/// otherwise.
pub fn vertical_relation<T: Scalar>(box_j: &Box3<T>, box_i: &Box3<T>, bank: &SpatialWordBank<T>) -> Vec<T> {
    match vertical_case(box_j, box_i) {
        VerticalWord::Top => bank.top().to_vec(),
        VerticalWord::Bottom => bank.bottom().to_vec(),
        VerticalWord::None => vec![T::zero(); EMBED_DIM],
    }
}

/// Horizontal relation rows for paired target/source features.
///
/// `v_i`, `v_j`: `[E, 128]`; `offsets`: `[E, 2]`. Returns `(alpha [E, 5],
/// r_h [E, 300])`.
pub fn horizontal_relation<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &SlgcParams,
    bank: &SpatialWordBank<T>,
    v_i: Var,
    v_j: Var,
    offsets: Var,
) -> Result<(Var, Var)> {
    let diff = tape.sub(v_j, v_i)?;
    let pair = tape.concat(&[v_i, diff])?;
    let v_ji = linear(tape, set, params.w_v, pair)?;
    let c_ji = linear(tape, set, params.w_c, offsets)?;
    let s = tape.add(v_ji, c_ji)?;
    let s = tape.tanh(s);
    let logits = linear(tape, set, params.w_alpha, s)?;
    let alpha = tape.softmax(logits);
    let b_h = tape.constant(bank.horizontal().clone());
    let r_h = tape.matmul(alpha, b_h)?;
    Ok((alpha, r_h))
}

/// `W_e [r_v; r_h]`.
pub fn edge_feature<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &SlgcParams,
    r_v: Var,
    r_h: Var,
) -> Result<Var> {
    let r = tape.concat(&[r_v, r_h])?;
    linear(tape, set, params.w_e, r)
}

/// Edge features for every edge of `graph` from current node features `x`.
pub fn edge_features<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &SlgcParams,
    bank: &SpatialWordBank<T>,
    graph: &LayoutGraph<T>,
    x: Var,
) -> Result<EdgeFeatures> {
    let v_i = tape.gather(x, graph.edge_targets())?;
    let v_j = tape.gather(x, graph.edge_sources())?;
    let offsets = tape.constant(graph.offsets().clone());
    let (alpha, r_h) = horizontal_relation(tape, set, params, bank, v_i, v_j, offsets)?;
    let r_v = tape.constant(graph.vertical_features(bank));
    let edges = edge_feature(tape, set, params, r_v, r_h)?;
    Ok(EdgeFeatures { alpha, edges })
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeFeatures {
    /// `[E, 5]` horizontal word distributions.
    pub alpha: Var,
    /// `[E, 128]`.
    pub edges: Var,
}

/// One round of attention-weighted aggregation. With `edges = None` the edge
/// terms drop out of both the score and the message.
///
/// Returns `(new nodes [N, 128], normalised weights [E, 1])`.
pub fn aggregate<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &SlgcParams,
    graph: &LayoutGraph<T>,
    x: Var,
    edges: Option<Var>,
) -> Result<(Var, Var)> {
    let [w1, w2, w3, w4, w5, w6] = params.w;
    let (src, dst, n) = (graph.edge_sources(), graph.edge_targets(), graph.num_nodes());
    let q = linear(tape, set, w1, x)?;
    let k = linear(tape, set, w2, x)?;
    let q = tape.gather(q, dst)?;
    let mut k = tape.gather(k, src)?;
    let m = linear(tape, set, w5, x)?;
    let mut m = tape.gather(m, src)?;
    if let Some(e) = edges {
        let ke = linear(tape, set, w3, e)?;
        k = tape.add(k, ke)?;
        let me = linear(tape, set, w6, e)?;
        m = tape.add(m, me)?;
    }
    let beta = tape.dot(q, k)?;
    let beta = tape.segment_softmax(beta, dst, n)?;
    let msg = tape.mul(m, beta)?;
    let agg = tape.segment_sum(msg, dst, n)?;
    let own = linear(tape, set, w4, x)?;
    Ok((tape.add(own, agg)?, beta))
}

#[derive(Clone, Copy, Debug)]
pub struct SlgcLayerOutput {
    pub nodes: Var,
    /// Present unless edges are disabled.
    pub edges: Option<EdgeFeatures>,
    /// `[E, 1]` normalised aggregation weights.
    pub beta: Var,
}

/// Edge construction followed by one aggregation round.
pub fn slgc_forward<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &SlgcParams,
    bank: &SpatialWordBank<T>,
    graph: &LayoutGraph<T>,
    x: Var,
    use_edges: bool,
) -> Result<SlgcLayerOutput> {
    let edges = if use_edges {
        Some(edge_features(tape, set, params, bank, graph, x)?)
    } else {
        None
    };
    let (nodes, beta) = aggregate(tape, set, params, graph, x, edges.map(|e| e.edges))?;
    Ok(SlgcLayerOutput { nodes, edges, beta })
}

#[derive(Clone, Debug)]
pub struct SlgcOutput {
    /// Final `[N_O + 1, 128]` node features.
    pub nodes: Var,
    /// Final `[E, 128]` edge features: those used by the last layer.
    pub edges: Option<Var>,
    pub layers: Vec<SlgcLayerOutput>,
}

/// Applies `layers.len()` convolutions, rebuilding edge features from each
/// layer's input nodes.
pub fn slgc_stack<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    layers: &[SlgcParams],
    bank: &SpatialWordBank<T>,
    graph: &LayoutGraph<T>,
    use_edges: bool,
) -> Result<SlgcOutput> {
    if layers.is_empty() {
        return Err(Error::Config("at least one graph convolution layer is required".into()));
    }
    let mut x = tape.constant(graph.features().clone());
    let mut outs = Vec::with_capacity(layers.len());
    for p in layers {
        let out = slgc_forward(tape, set, p, bank, graph, x, use_edges)?;
        x = out.nodes;
        outs.push(out);
    }
    Ok(SlgcOutput {
        nodes: x,
        edges: outs.last().and_then(|o| o.edges.map(|e| e.edges)),
        layers: outs,
    })
}

/// Inspection record for one directed edge.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgeRecord {
    pub i: usize,
    pub j: usize,
    pub alpha: [f64; 5],
    pub vertical_case: VerticalWord,
}

/// Per-edge horizontal distributions and vertical cases; `alpha` is the
/// `[E, 5]` value of [`EdgeFeatures::alpha`].
pub fn edge_records<T: Scalar>(graph: &LayoutGraph<T>, alpha: &[T]) -> Result<Vec<EdgeRecord>> {
    if alpha.len() != graph.num_edges() * 5 {
        return Err(Error::Shape {
            op: "edge_records",
            left: vec![alpha.len()],
            right: vec![graph.num_edges(), 5],
        });
    }
    Ok((0..graph.num_edges())
        .map(|e| EdgeRecord {
            i: graph.edge_targets()[e],
            j: graph.edge_sources()[e],
            alpha: std::array::from_fn(|k| alpha[e * 5 + k].as_f64()),
            vertical_case: graph.vertical_cases()[e],
        })
        .collect())
}
