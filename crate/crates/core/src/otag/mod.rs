//! Object-centric triplet attention graphs.
//!
//! For every target object the relation-aware graph is recomposed into
//! hyper-nodes: `<context, edge, target>` triplets and, optionally,
//! `<k, edge, j, edge, target>` quintuplets. All hyper-nodes of one target
//! form a complete graph with dot-product attention.

use rand::Rng;
use serde::Serialize;

use crate::layers::{check_linear, linear, register_linear, stack_rows};
use crate::slgc::{LayoutGraph, NODE_DIM};
use crate::{Error, ParamId, ParamSet, Result, Scalar, Tape, Tensor, Var};


pub const TRIPLET_DIM: usize = 3 * NODE_DIM;
pub const QUINTUPLET_DIM: usize = 5 * NODE_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OtagParams {
    pub w_t: ParamId,
    pub w_q: ParamId,
    pub w7: ParamId,
    pub w8: ParamId,
    pub w9: ParamId,
}

impl OtagParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(set: &mut ParamSet<T>, prefix: &str, rng: &mut R) -> Result<Self> {
        let d = NODE_DIM;
        let p = OtagParams {
            w_t: register_linear(set, &format!("{prefix}.w_t"), TRIPLET_DIM, d, rng),
            w_q: register_linear(set, &format!("{prefix}.w_q"), QUINTUPLET_DIM, d, rng),
            w7: register_linear(set, &format!("{prefix}.w7"), d, d, rng),
            w8: register_linear(set, &format!("{prefix}.w8"), d, d, rng),
            w9: register_linear(set, &format!("{prefix}.w9"), d, d, rng),
        };
        p.check(set)?;
        Ok(p)
    }

    pub fn lookup<T: Scalar>(set: &ParamSet<T>, prefix: &str) -> Result<Self> {
        let id = |n: &str| set.id(&format!("{prefix}.{n}"));
        let p = OtagParams {
            w_t: id("w_t")?,
            w_q: id("w_q")?,
            w7: id("w7")?,
            w8: id("w8")?,
            w9: id("w9")?,
        };
        p.check(set)?;
        Ok(p)
    }

    /// Verifies `W_t: 384->128`, `W_q: 640->128`, `W_7..W_9: 128->128`.
    pub fn check<T: Scalar>(&self, set: &ParamSet<T>) -> Result<()> {
        check_linear(set, self.w_t, TRIPLET_DIM, NODE_DIM)?;
        check_linear(set, self.w_q, QUINTUPLET_DIM, NODE_DIM)?;
        for w in [self.w7, self.w8, self.w9] {
            check_linear(set, w, NODE_DIM, NODE_DIM)?;
        }
        Ok(())
    }
}

/// Node ids of one hyper-node, target last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(untagged)]
pub enum HyperNode {
    Triplet([usize; 2]),
    Quintuplet([usize; 3]),
}

impl HyperNode {
    pub fn target(&self) -> usize {
        match *self {
            HyperNode::Triplet([_, i]) | HyperNode::Quintuplet([_, _, i]) => i,
        }
    }

    pub fn ids(&self) -> &[usize] {
        match self {
            HyperNode::Triplet(a) => a,
            HyperNode::Quintuplet(a) => a,
        }
    }
}

/// Triplets `(j, i)` for `j` in `N(i)`, then quintuplets `(k, j, i)` for `k`
/// in `N(j)`.
pub fn extract_hypernodes<T: Scalar>(graph: &LayoutGraph<T>, target: usize, use_quintuplets: bool) -> Result<Vec<HyperNode>> {
    if target >= graph.num_objects() {
        return Err(Error::contract(format!(
            "hyper-node target {target} is not an object node (objects are 0..{})",
            graph.num_objects()
        )));
    }
    let nb = graph.neighbors(target);
    let mut out: Vec<HyperNode> = nb.iter().map(|&j| HyperNode::Triplet([j, target])).collect();
    if use_quintuplets {
        for &j in nb {
            out.extend(graph.neighbors(j).iter().map(|&k| HyperNode::Quintuplet([k, j, target])));
        }
    }
    Ok(out)
}

/// Raw concatenations `[v_j; e_ji; v_i]` (`[T, 384]`) and
/// `[v_k; e_kj; v_j; e_ji; v_i]` (`[Q, 640]`). Missing blocks are `None`.
/// With `edges = None` the edge slots are zero.
pub fn raw_hypernodes<T: Scalar>(
    tape: &mut Tape<'_, T>,
    graph: &LayoutGraph<T>,
    nodes: Var,
    edges: Option<Var>,
    list: &[HyperNode],
) -> Result<(Option<Var>, Option<Var>)> {
    let edges = match edges {
        Some(e) => e,
        None => tape.constant(Tensor::zeros(&[graph.num_edges(), NODE_DIM])),
    };
    let edge = |j: usize, i: usize| {
        graph
            .edge(j, i)
            .ok_or_else(|| Error::contract(format!("no edge {j} -> {i} in layout graph")))
    };
    let (mut tj, mut tji, mut ti) = (vec![], vec![], vec![]);
    let (mut qk, mut qkj, mut qj, mut qji, mut qi) = (vec![], vec![], vec![], vec![], vec![]);
    for h in list {
        match *h {
            HyperNode::Triplet([j, i]) => {
                tj.push(j);
                tji.push(edge(j, i)?);
                ti.push(i);
            }
            HyperNode::Quintuplet([k, j, i]) => {
                qk.push(k);
                qkj.push(edge(k, j)?);
                qj.push(j);
                qji.push(edge(j, i)?);
                qi.push(i);
            }
        }
    }
    let trip = if tj.is_empty() {
        None
    } else {
        let parts = [
            tape.gather(nodes, &tj)?,
            tape.gather(edges, &tji)?,
            tape.gather(nodes, &ti)?,
        ];
        Some(tape.concat(&parts)?)
    };
    let quint = if qk.is_empty() {
        None
    } else {
        let parts = [
            tape.gather(nodes, &qk)?,
            tape.gather(edges, &qkj)?,
            tape.gather(nodes, &qj)?,
            tape.gather(edges, &qji)?,
            tape.gather(nodes, &qi)?,
        ];
        Some(tape.concat(&parts)?)
    };
    Ok((trip, quint))
}

/// Maps raw triplets through `W_t` and raw quintuplets through `W_q`, then
/// stacks them (triplets first) into `[T + Q, 128]`.
pub fn project_hypernodes<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &OtagParams,
    triplets: Option<Var>,
    quintuplets: Option<Var>,
) -> Result<Var> {
    let mut blocks = Vec::with_capacity(2);
    for (raw, id, width) in [(triplets, params.w_t, TRIPLET_DIM), (quintuplets, params.w_q, QUINTUPLET_DIM)] {
        if let Some(r) = raw {
            if tape.shape(r).len() != 2 || tape.shape(r)[1] != width {
                return Err(Error::Shape {
                    op: "project_hypernodes",
                    left: tape.shape(r).to_vec(),
                    right: vec![width, NODE_DIM],
                });
            }
            blocks.push(linear(tape, set, id, r)?);
        }
    }
    match blocks.as_slice() {
        [] => Err(Error::contract("no hyper-nodes to project")),
        [one] => Ok(*one),
        _ => stack_rows(tape, &blocks),
    }
}

/// One round of attention over the hyper-nodes `v: [m, 128]` of a single
/// target. Returns `(updated [m, 128], weights [m, m])`; row `a` of the
/// weights holds the normalised attention of hyper-node `a` over all `m`.
pub fn otag_attention<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &OtagParams,
    v: Var,
) -> Result<(Var, Var)> {
    let a = linear(tape, set, params.w7, v)?;
    let a = tape.relu(a);
    let b = linear(tape, set, params.w8, v)?;
    let b = tape.relu(b);
    let scores = tape.matmul_nt(a, b)?;
    let weights = tape.softmax(scores);
    let values = linear(tape, set, params.w9, v)?;
    Ok((tape.matmul(weights, values)?, weights))
}

#[derive(Clone, Debug)]
pub struct ObjectCentricGraph {
    pub target: usize,
    pub hyper_nodes: Vec<HyperNode>,
    /// Projected `[m, 128]` hyper-node features.
    pub features: Var,
    /// `[m, m]` attention weights.
    pub attention: Var,
    /// `[m, 128]` after message passing.
    pub updated: Var,
}

/// Block-wise form of the hyper-node projection. Each `[v_j; e_ji; v_i]`
/// row times `W_t` equals `v_j W_t1 + e_ji W_t2 + v_i W_t3` for the
/// 128-row blocks of `W_t` (likewise for `W_q`), so every node and edge is
/// projected once per scene and hyper-nodes are assembled by gathering.
pub struct HyperProjector {
    /// `nodes` times each node block: `W_t1, W_t3, W_q1, W_q3, W_q5`.
    node: [Var; 5],
    /// `edges` times each edge block: `W_t2, W_q2, W_q4`; `None` means zero
    /// edge slots.
    edge: Option<[Var; 3]>,
}

impl HyperProjector {
    pub fn new<'p, T: Scalar>(
        tape: &mut Tape<'p, T>,
        set: &'p ParamSet<T>,
        params: &OtagParams,
        nodes: Var,
        edges: Option<Var>,
    ) -> Result<Self> {
        let wt = tape.param(set, params.w_t);
        let wq = tape.param(set, params.w_q);
        let block = |tape: &mut Tape<'p, T>, w: Var, b: usize, x: Var| -> Result<Var> {
            let rows: Vec<usize> = (b * NODE_DIM..(b + 1) * NODE_DIM).collect();
            let wb = tape.gather(w, &rows)?;
            tape.matmul(x, wb)
        };
        let node = [
            block(tape, wt, 0, nodes)?,
            block(tape, wt, 2, nodes)?,
            block(tape, wq, 0, nodes)?,
            block(tape, wq, 2, nodes)?,
            block(tape, wq, 4, nodes)?,
        ];
        let edge = match edges {
            Some(e) => Some([block(tape, wt, 1, e)?, block(tape, wq, 1, e)?, block(tape, wq, 3, e)?]),
            None => None,
        };
        Ok(HyperProjector { node, edge })
    }

    /// Projected `[m, 128]` features of `list`, triplets first.
    pub fn project<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        graph: &LayoutGraph<T>,
        list: &[HyperNode],
    ) -> Result<Var> {
        let edge = |j: usize, i: usize| {
            graph
                .edge(j, i)
                .ok_or_else(|| Error::contract(format!("no edge {j} -> {i} in layout graph")))
        };
        let (mut tj, mut tji, mut ti) = (vec![], vec![], vec![]);
        let (mut qk, mut qkj, mut qj, mut qji, mut qi) = (vec![], vec![], vec![], vec![], vec![]);
        for h in list {
            match *h {
                HyperNode::Triplet([j, i]) => {
                    tj.push(j);
                    tji.push(edge(j, i)?);
                    ti.push(i);
                }
                HyperNode::Quintuplet([k, j, i]) => {
                    qk.push(k);
                    qkj.push(edge(k, j)?);
                    qj.push(j);
                    qji.push(edge(j, i)?);
                    qi.push(i);
                }
            }
        }
        let mut blocks = Vec::with_capacity(2);
        if !tj.is_empty() {
            let mut parts = vec![(self.node[0], tj), (self.node[1], ti)];
            if let Some(e) = self.edge {
                parts.push((e[0], tji));
            }
            blocks.push(sum_gathers(tape, &parts)?);
        }
        if !qk.is_empty() {
            let mut parts = vec![(self.node[2], qk), (self.node[3], qj), (self.node[4], qi)];
            if let Some(e) = self.edge {
                parts.push((e[1], qkj));
                parts.push((e[2], qji));
            }
            blocks.push(sum_gathers(tape, &parts)?);
        }
        match blocks.as_slice() {
            [] => Err(Error::contract("no hyper-nodes to project")),
            [one] => Ok(*one),
            _ => stack_rows(tape, &blocks),
        }
    }
}

fn sum_gathers<T: Scalar>(tape: &mut Tape<'_, T>, parts: &[(Var, Vec<usize>)]) -> Result<Var> {
    let mut acc = tape.gather(parts[0].0, &parts[0].1)?;
    for (table, idx) in &parts[1..] {
        let g = tape.gather(*table, idx)?;
        acc = tape.add(acc, g)?;
    }
    Ok(acc)
}

/// Builds and runs the object-centric graph of every object in `targets`.
#[allow(clippy::too_many_arguments)]
pub fn otag_all<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    set: &'p ParamSet<T>,
    params: &OtagParams,
    graph: &LayoutGraph<T>,
    nodes: Var,
    edges: Option<Var>,
    use_quintuplets: bool,
    targets: &[usize],
) -> Result<Vec<ObjectCentricGraph>> {
    let projector = HyperProjector::new(tape, set, params, nodes, edges)?;
    targets
        .iter()
        .map(|&i| {
            let hyper_nodes = extract_hypernodes(graph, i, use_quintuplets)?;
            let features = projector.project(tape, graph, &hyper_nodes)?;
            let (updated, attention) = otag_attention(tape, set, params, features)?;
            Ok(ObjectCentricGraph {
                target: i,
                hyper_nodes,
                features,
                attention,
                updated,
            })
        })
        .collect()
}

/// Inspection record of one target's attention matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub target: usize,
    pub hyper_nodes: Vec<HyperNode>,
    pub weights: Vec<Vec<f64>>,
}

pub fn attention_records<T: Scalar>(tape: &Tape<'_, T>, graphs: &[ObjectCentricGraph]) -> Vec<AttentionRecord> {
    graphs
        .iter()
        .map(|g| {
            let m = g.hyper_nodes.len();
            AttentionRecord {
                target: g.target,
                hyper_nodes: g.hyper_nodes.clone(),
                weights: tape
                    .value(g.attention)
                    .chunks(m)
                    .map(|r| r.iter().map(|v| v.as_f64()).collect())
                    .collect(),
            }
        })
        .collect()
}
