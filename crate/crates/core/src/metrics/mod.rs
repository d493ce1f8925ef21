//! Caption metrics, the IoU-gated combined metric, MADGap and relational
//! word statistics. Sentences are token slices.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::iou3d;
use crate::{Box3, Error, Result};


type Gram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Gram<'_>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU-4 with uniform weights. When the candidate has fewer than
/// four tokens, orders 2..4 without matches use `(0 + 1) / (total + 1)`.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let c = candidate.len();
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<Gram<'_>, usize> = HashMap::new();
        for r in references {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let total = c.saturating_sub(n - 1);
        let matched: usize = cand
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            if n >= 2 && c < 4 {
                1.0 / (total as f64 + 1.0)
            } else {
                return 0.0;
            }
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln() / 4.0;
    }
    // closest reference length, shorter on ties
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure with `beta = 1.2`, best over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

pub const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies for CIDEr-D. One document is the reference set of
/// one evaluated item.
#[derive(Clone, Debug)]
pub struct CiderStats {
    df: HashMap<Vec<String>, f64>,
    log_docs: f64,
}

type TfIdf = (Vec<HashMap<Vec<String>, f64>>, Vec<f64>, usize);

impl CiderStats {
    pub fn new(reference_sets: &[Vec<Vec<String>>]) -> Result<Self> {
        if reference_sets.is_empty() {
            return Err(Error::contract("CIDEr needs at least one reference set"));
        }
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for refs in reference_sets {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in refs {
                for n in 1..=4 {
                    if r.len() >= n {
                        seen.extend(r.windows(n));
                    }
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        Ok(CiderStats {
            df,
            log_docs: (reference_sets.len() as f64).ln(),
        })
    }

    pub fn documents(&self) -> usize {
        self.log_docs.exp().round() as usize
    }

    fn vectors(&self, tokens: &[String]) -> TfIdf {
        let mut vecs = Vec::with_capacity(4);
        let mut norms = Vec::with_capacity(4);
        for n in 1..=4 {
            let v: HashMap<Vec<String>, f64> = ngram_counts(tokens, n)
                .into_iter()
                .map(|(g, tf)| {
                    let df = self.df.get(g).copied().unwrap_or(0.0).max(1.0);
                    (g.to_vec(), tf as f64 * (self.log_docs - df.ln()))
                })
                .collect();
            norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
            vecs.push(v);
        }
        (vecs, norms, tokens.len())
    }

    /// CIDEr-D of one candidate: clipped tf-idf cosine per order with a
    /// Gaussian length penalty, averaged over orders and references, times 10.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let (cv, cn, cl) = self.vectors(candidate);
        let mut total = 0.0;
        for r in references {
            let (rv, rn, rl) = self.vectors(r);
            let delta = cl as f64 - rl as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mut sum = 0.0;
            for n in 0..4 {
                let mut val: f64 = cv[n]
                    .iter()
                    .filter_map(|(g, &c)| rv[n].get(g).map(|&r| c.min(r) * r))
                    .sum();
                if cn[n] != 0.0 && rn[n] != 0.0 {
                    val /= cn[n] * rn[n];
                }
                sum += val * penalty;
            }
            total += sum / 4.0;
        }
        10.0 * total / references.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptionMetric {
    Cider,
    Bleu4,
    RougeL,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub predicted: Box3<f64>,
    pub ground_truth: Box3<f64>,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalRecord {
    pub fn new(
        predicted: Box3<f64>,
        ground_truth: Box3<f64>,
        candidate: Vec<String>,
        references: Vec<Vec<String>>,
    ) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::contract("an evaluation record needs at least one reference"));
        }
        Ok(EvalRecord {
            predicted,
            ground_truth,
            candidate,
            references,
        })
    }

    pub fn iou(&self) -> f64 {
        iou3d(&self.predicted, &self.ground_truth)
    }
}

/// Per-record sentence scores. CIDEr statistics come from the records' own
/// references.
pub fn sentence_scores(records: &[EvalRecord], metric: CaptionMetric) -> Result<Vec<f64>> {
    Ok(match metric {
        CaptionMetric::Bleu4 => records.iter().map(|r| bleu4(&r.candidate, &r.references)).collect(),
        CaptionMetric::RougeL => records.iter().map(|r| rouge_l(&r.candidate, &r.references)).collect(),
        CaptionMetric::Cider => {
            let refs: Vec<Vec<Vec<String>>> = records.iter().map(|r| r.references.clone()).collect();
            let stats = CiderStats::new(&refs)?;
            records.iter().map(|r| stats.score(&r.candidate, &r.references)).collect()
        }
    })
}

/// `(1/N) sum m_i u_i` with `u_i = 1` iff `iou_i >= k`.
pub fn gated_mean(scores: &[f64], ious: &[f64], k: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != ious.len() {
        return Err(Error::contract(format!(
            "gated mean needs matching non-empty inputs, got {} scores and {} IoUs",
            scores.len(),
            ious.len()
        )));
    }
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::contract(format!("IoU threshold {k} outside [0, 1]")));
    }
    let sum: f64 = scores.iter().zip(ious).filter(|(_, &u)| u >= k).map(|(m, _)| m).sum();
    Ok(sum / scores.len() as f64)
}

pub fn m_at_k_iou(records: &[EvalRecord], metric: CaptionMetric, k: f64) -> Result<f64> {
    let scores = sentence_scores(records, metric)?;
    let ious: Vec<f64> = records.iter().map(EvalRecord::iou).collect();
    gated_mean(&scores, &ious, k)
}

/// Ordered-pair masks over `n` nodes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairMasks {
    pub n: usize,
    pub neighbor: Vec<bool>,
    pub remote: Vec<bool>,
}

impl PairMasks {
    /// `neighbor[a][b]` for `b` in `neighbors[a]`; every other off-diagonal
    /// pair is remote. Indices `>= n` are ignored.
    pub fn from_neighbors(neighbors: &[Vec<usize>]) -> Self {
        let n = neighbors.len();
        let mut neighbor = vec![false; n * n];
        for (a, nb) in neighbors.iter().enumerate() {
            for &b in nb.iter().filter(|&&b| b < n && b != a) {
                neighbor[a * n + b] = true;
            }
        }
        let remote = (0..n * n).map(|p| p / n != p % n && !neighbor[p]).collect();
        PairMasks { n, neighbor, remote }
    }
}

fn mad(dist: &[f64], mask: &[bool], n: usize) -> f64 {
    let mut total = 0.0;
    let mut rows = 0;
    for a in 0..n {
        let (mut s, mut c) = (0.0, 0);
        for b in 0..n {
            if mask[a * n + b] {
                s += dist[a * n + b];
                c += 1;
            }
        }
        if c > 0 {
            total += s / c as f64;
            rows += 1;
        }
    }
    if rows == 0 { 0.0 } else { total / rows as f64 }
}

/// `MAD(remote) - MAD(neighbor)` with cosine distance, on row-major
/// `[n, dim]` features.
pub fn madgap(features: &[f64], dim: usize, masks: &PairMasks) -> Result<f64> {
    let n = masks.n;
    if n < 2 || dim == 0 || features.len() != n * dim {
        return Err(Error::contract(format!(
            "MADGap needs at least two {dim}-d nodes, got {} values for {n} nodes",
            features.len()
        )));
    }
    if masks.neighbor.len() != n * n || masks.remote.len() != n * n {
        return Err(Error::contract("MADGap masks do not match the node count"));
    }
    for p in 0..n * n {
        if (p / n == p % n && (masks.neighbor[p] || masks.remote[p])) || (masks.neighbor[p] && masks.remote[p]) {
            return Err(Error::contract("MADGap masks must be disjoint and exclude self pairs"));
        }
    }
    let rows: Vec<&[f64]> = features.chunks(dim).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(a) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::contract(format!("node {a} has a zero feature vector")));
    }
    let mut dist = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let dot: f64 = rows[a].iter().zip(rows[b]).map(|(x, y)| x * y).sum();
            dist[a * n + b] = 1.0 - dot / (norms[a] * norms[b]);
        }
    }
    Ok(mad(&dist, &masks.remote, n) - mad(&dist, &masks.neighbor, n))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationalDictionary {
    pub simple: BTreeSet<String>,
    pub complex: BTreeSet<String>,
}

impl Default for RelationalDictionary {
    fn default() -> Self {
        let set = |w: &[&str]| w.iter().map(|s| s.to_string()).collect();
        RelationalDictionary {
            simple: set(&[
                "left", "right", "front", "behind", "besides", "next", "near", "above", "below", "top", "bottom",
                "under", "over",
            ]),
            complex: set(&[
                "between",
                "middle",
                "corner",
                "leftmost",
                "rightmost",
                "farthest",
                "closest",
                "second",
                "third",
                "surrounded",
                "across",
                "end",
            ]),
        }
    }
}

impl RelationalDictionary {
    pub fn new(simple: BTreeSet<String>, complex: BTreeSet<String>) -> Result<Self> {
        if let Some(w) = simple.intersection(&complex).next() {
            return Err(Error::Config(format!("relational word '{w}' is both simple and complex")));
        }
        Ok(RelationalDictionary { simple, complex })
    }

    /// Reads `{"simple": [...], "complex": [...]}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let d: RelationalDictionary = serde_json::from_str(&text)?;
        Self::new(d.simple, d.complex)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationalStats {
    pub simple: usize,
    pub complex: usize,
    pub total: usize,
}

/// Whole-token dictionary hits, so `leftmost` never counts as `left`.
pub fn relational_word_stats<'a>(
    captions: impl IntoIterator<Item = &'a [String]>,
    dict: &RelationalDictionary,
) -> RelationalStats {
    let mut s = RelationalStats::default();
    for cap in captions {
        for w in cap {
            if dict.simple.contains(w) {
                s.simple += 1;
            } else if dict.complex.contains(w) {
                s.complex += 1;
            }
        }
    }
    s.total = s.simple + s.complex;
    s
}

/// One block of the score report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub k: f64,
    pub cider: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: Option<f64>,
    pub n: usize,
    pub relational: RelationalStats,
}

/// Scores every record once and gates them at each threshold.
pub fn score_reports(records: &[EvalRecord], ks: &[f64], dict: &RelationalDictionary) -> Result<Vec<ScoreReport>> {
    let cider = sentence_scores(records, CaptionMetric::Cider)?;
    let bleu = sentence_scores(records, CaptionMetric::Bleu4)?;
    let rouge = sentence_scores(records, CaptionMetric::RougeL)?;
    let ious: Vec<f64> = records.iter().map(EvalRecord::iou).collect();
    let relational = relational_word_stats(records.iter().map(|r| r.candidate.as_slice()), dict);
    ks.iter()
        .map(|&k| {
            Ok(ScoreReport {
                k,
                cider: gated_mean(&cider, &ious, k)?,
                bleu4: gated_mean(&bleu, &ious, k)?,
                rouge_l: gated_mean(&rouge, &ious, k)?,
                meteor: None,
                n: records.len(),
                relational,
            })
        })
        .collect()
}
