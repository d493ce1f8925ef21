use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::metrics::{madgap, PairMasks};
use crate::otag::{otag_all, OtagParams};
use crate::slgc::{slgc_stack, LayoutGraph, SlgcParams, SpatialWordBank, NODE_DIM};
use crate::{Error, ParamSet, Result, Scalar, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub k: usize,
    pub max_layers: usize,
    pub quintuplets: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            k: 3,
            max_layers: 4,
            quintuplets: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub layers: usize,
    pub otag: bool,
    /// Mean over scenes.
    pub madgap: f64,
}

fn object_masks<T: Scalar>(graph: &LayoutGraph<T>) -> PairMasks {
    let nb: Vec<Vec<usize>> = (0..graph.num_objects()).map(|i| graph.neighbors(i).to_vec()).collect();
    PairMasks::from_neighbors(&nb)
}

/// MADGap of object-node features from untrained encoders: graph
/// convolution stacks of depth `1..=max_layers`, then one convolution
/// followed by triplet graphs. The last row is measured over the updated
/// hyper-nodes of all targets, with hyper-nodes of the same target as
/// neighbours. Every configuration shares the first layer's weights.
pub fn madgap_sweep<T: Scalar>(
    scenes: &[Scene<T>],
    bank: &SpatialWordBank<T>,
    config: &SweepConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if config.max_layers == 0 || scenes.is_empty() {
        return Err(Error::Config("the sweep needs at least one layer and one scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    let layers = (0..config.max_layers)
        .map(|l| SlgcParams::register(&mut set, &format!("slgc{l}"), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let otag = OtagParams::register(&mut set, "otag", &mut rng)?;
    let graphs = scenes
        .iter()
        .map(|s| LayoutGraph::build(s, config.k))
        .collect::<Result<Vec<_>>>()?;
    for g in &graphs {
        if g.num_objects() < 2 {
            return Err(Error::contract("MADGap needs scenes with at least two objects"));
        }
    }

    let mut rows = Vec::with_capacity(config.max_layers + 1);
    for depth in 1..=config.max_layers {
        let mut total = 0.0;
        for g in &graphs {
            let mut tape = Tape::new();
            let enc = slgc_stack(&mut tape, &set, &layers[..depth], bank, g, true)?;
            let n = g.num_objects();
            let f: Vec<f64> = tape.value(enc.nodes)[..n * NODE_DIM].iter().map(|x| x.as_f64()).collect();
            total += madgap(&f, NODE_DIM, &object_masks(g))?;
        }
        rows.push(SweepRow {
            label: format!("SLGC x{depth}"),
            layers: depth,
            otag: false,
            madgap: total / graphs.len() as f64,
        });
    }

    let mut total = 0.0;
    for g in &graphs {
        let mut tape = Tape::new();
        let enc = slgc_stack(&mut tape, &set, &layers[..1], bank, g, true)?;
        let targets: Vec<usize> = (0..g.num_objects()).collect();
        let ocgs = otag_all(&mut tape, &set, &otag, g, enc.nodes, enc.edges, config.quintuplets, &targets)?;
        let mut f = Vec::new();
        let mut owner = Vec::new();
        for (t, o) in ocgs.iter().enumerate() {
            f.extend(tape.value(o.updated).iter().map(|x| x.as_f64()));
            owner.extend(std::iter::repeat_n(t, o.hyper_nodes.len()));
        }
        let same: Vec<Vec<usize>> = owner
            .iter()
            .map(|&t| (0..owner.len()).filter(|&b| owner[b] == t).collect())
            .collect();
        total += madgap(&f, NODE_DIM, &PairMasks::from_neighbors(&same))?;
    }
    rows.push(SweepRow {
        label: "SLGC x1 + OTAG".into(),
        layers: 1,
        otag: true,
        madgap: total / graphs.len() as f64,
    });
    Ok(rows)
}
