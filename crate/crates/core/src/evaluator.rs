//! Anchor ranking, ACC/MRR/Wu&P metrics, and union/complement inference.

use std::cmp::Ordering;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::algebra::{self, FuzzyVec, LogicSystem};
use crate::model::{FuseModel, ModelError};
use crate::taxonomy::{EmbeddingTable, Taxonomy, TaxonomyError, TestQuery};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no anchors to rank")]
    NoAnchors,

    #[error("empty query set")]
    NoQueries,

    #[error("query '{query}' has no true anchor in the anchor set")]
    TruthNotInAnchors { query: String },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    #[default]
    Containment,
    Psi,
    Sum,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Containment => "containment",
            ScoreMode::Psi => "psi",
            ScoreMode::Sum => "sum",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "containment" => Ok(ScoreMode::Containment),
            "psi" => Ok(ScoreMode::Psi),
            "sum" => Ok(ScoreMode::Sum),
            _ => Err(format!("unknown score mode '{s}' (expected containment, psi or sum)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    /// `(anchor id, score)`, best first.
    pub candidates: Vec<(usize, f64)>,
    /// 1-based rank of the best-placed true anchor.
    pub true_rank: usize,
    /// Scored with ψ because the query's measure was degenerate.
    pub fell_back: bool,
}

impl RankedPrediction {
    pub fn predicted(&self) -> usize {
        self.candidates[0].0
    }
}

/// Descending score, ties to the smaller id.
fn by_score_desc(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Ascending distance, ties to the smaller id.
fn by_distance_asc(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// Ranks `anchors` (`(id, set)` pairs) as parents of `query`.
///
/// `truth` lists acceptable anchor ids; the reported rank is the best among
/// them.
pub fn rank_anchors(
    model: &FuseModel,
    query: &FuzzyVec,
    anchors: &[(usize, FuzzyVec)],
    truth: &[usize],
    mode: ScoreMode,
) -> Result<Option<RankedPrediction>> {
    if anchors.is_empty() {
        return Err(EvalError::NoAnchors);
    }
    let psi = |a: &FuzzyVec| model.psi(query, a);
    let scored: std::result::Result<Vec<(usize, f64)>, ModelError> = match mode {
        ScoreMode::Psi => Ok(anchors.iter().map(|(id, a)| (*id, psi(a))).collect()),
        ScoreMode::Containment => anchors.iter().map(|(id, a)| Ok((*id, model.containment(a, query)?))).collect(),
        ScoreMode::Sum => anchors.iter().map(|(id, a)| Ok((*id, psi(a) + model.containment(a, query)?))).collect(),
    };
    let (mut candidates, fell_back) = match scored {
        Ok(c) => (c, false),
        Err(ModelError::Algebra(algebra::AlgebraError::DegenerateChild { measure, .. })) => {
            log::warn!("degenerate query measure {measure:e}; ranking with psi");
            (anchors.iter().map(|(id, a)| (*id, psi(a))).collect(), true)
        }
        Err(e) => return Err(e.into()),
    };
    candidates.sort_by(by_score_desc);
    let true_rank = candidates.iter().position(|(id, _)| truth.contains(id)).map(|i| i + 1);
    Ok(true_rank.map(|true_rank| RankedPrediction { candidates, true_rank, fell_back }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub mrr: f64,
    pub wup: f64,
}

impl Metrics {
    /// `metric<TAB>value` rows for acc, mrr and wup.
    pub fn to_tsv(&self) -> String {
        format!("metric\tvalue\nacc\t{}\nmrr\t{}\nwup\t{}\n", self.acc, self.mrr, self.wup)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryDetail {
    pub query: String,
    pub predicted: String,
    pub rank: usize,
    pub wup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub details: Vec<QueryDetail>,
    /// Queries ranked with ψ after a degenerate containment.
    pub fallbacks: usize,
}

pub fn details_to_tsv(details: &[QueryDetail]) -> String {
    let mut out = String::from("query\tpredicted\trank\twup\n");
    for d in details {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", d.query, d.predicted, d.rank, d.wup);
    }
    out
}

/// Fuzzy sets of every node of `t`, indexed by id.
pub fn node_sets(model: &FuseModel, t: &Taxonomy, embeddings: &EmbeddingTable) -> Result<Vec<FuzzyVec>> {
    t.terms().iter().map(|term| Ok(model.embed(embeddings.require(term)?.as_slice())?)).collect()
}

/// Means of ACC, 1/rank and Wu&P over per-query results.
pub fn aggregate(ranks: &[usize], wups: &[f64]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let n = ranks.len() as f64;
    Ok(Metrics {
        acc: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        wup: wups.iter().sum::<f64>() / n,
    })
}

/// Ranks every node of `taxonomy` as a parent for each query.
pub fn evaluate(
    model: &FuseModel,
    queries: &[TestQuery],
    taxonomy: &Taxonomy,
    embeddings: &EmbeddingTable,
    mode: ScoreMode,
) -> Result<Evaluation> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let sets = node_sets(model, taxonomy, embeddings)?;
    let anchors: Vec<(usize, FuzzyVec)> = sets.into_iter().enumerate().collect();
    let mut details = Vec::with_capacity(queries.len());
    let mut fallbacks = 0;
    for q in queries {
        let truth = q
            .parents
            .iter()
            .map(|p| taxonomy.id(p).ok_or_else(|| EvalError::TruthNotInAnchors { query: q.term.clone() }))
            .collect::<Result<Vec<usize>>>()?;
        let y = model.embed(embeddings.require(&q.term)?.as_slice())?;
        let ranked = rank_anchors(model, &y, &anchors, &truth, mode)?
            .ok_or_else(|| EvalError::TruthNotInAnchors { query: q.term.clone() })?;
        fallbacks += ranked.fell_back as usize;
        let predicted = ranked.predicted();
        let mut wup = 0.0f64;
        for &a in &truth {
            wup = wup.max(taxonomy.wu_palmer(predicted, a)?);
        }
        details.push(QueryDetail {
            query: q.term.clone(),
            predicted: taxonomy.term(predicted).to_string(),
            rank: ranked.true_rank,
            wup,
        });
    }
    let ranks: Vec<usize> = details.iter().map(|d| d.rank).collect();
    let wups: Vec<f64> = details.iter().map(|d| d.wup).collect();
    Ok(Evaluation { metrics: aggregate(&ranks, &wups)?, details, fallbacks })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetInference {
    pub acc: f64,
    pub mrr: f64,
    pub evaluated: usize,
    /// Parents with fewer than two children.
    pub skipped: usize,
}

impl SetInference {
    pub fn to_tsv(&self) -> String {
        format!(
            "metric\tvalue\nacc\t{}\nmrr\t{}\nevaluated\t{}\nskipped\t{}\n",
            self.acc, self.mrr, self.evaluated, self.skipped
        )
    }
}

/// Product union folded over `sets` in the given order.
pub fn fold_union(sets: &[&FuzzyVec]) -> FuzzyVec {
    let mut acc = sets[0].clone();
    for s in &sets[1..] {
        acc = algebra::union(&acc, s, LogicSystem::Product).expect("equal dimensions");
    }
    acc
}

fn ranked_by_distance(target: &FuzzyVec, candidates: &[usize], sets: &[FuzzyVec]) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> =
        candidates.iter().map(|&c| (c, target.euclidean_distance(&sets[c]).expect("equal dimensions"))).collect();
    scored.sort_by(by_distance_asc);
    scored.into_iter().map(|(c, _)| c).collect()
}

fn finish(rr: &[f64], skipped: usize) -> Result<SetInference> {
    if rr.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let n = rr.len() as f64;
    Ok(SetInference {
        acc: rr.iter().filter(|&&r| r == 1.0).count() as f64 / n,
        mrr: rr.iter().sum::<f64>() / n,
        evaluated: rr.len(),
        skipped,
    })
}

/// The union of each parent's children should lie nearest that parent
/// among all internal nodes.
pub fn union_inference(model: &FuseModel, taxonomy: &Taxonomy, embeddings: &EmbeddingTable) -> Result<SetInference> {
    let sets = node_sets(model, taxonomy, embeddings)?;
    union_inference_on(taxonomy, &sets)
}

/// [`union_inference`] over precomputed node sets.
pub fn union_inference_on(taxonomy: &Taxonomy, sets: &[FuzzyVec]) -> Result<SetInference> {
    let internal: Vec<usize> = (0..taxonomy.len()).filter(|&n| !taxonomy.children(n).is_empty()).collect();
    let mut rr = Vec::new();
    let mut skipped = 0;
    for &p in &internal {
        let mut kids = taxonomy.children(p).to_vec();
        if kids.len() < 2 {
            skipped += 1;
            continue;
        }
        kids.sort_unstable();
        let union = fold_union(&kids.iter().map(|&c| &sets[c]).collect::<Vec<_>>());
        let order = ranked_by_distance(&union, &internal, sets);
        let rank = order.iter().position(|&c| c == p).expect("parent is a candidate") + 1;
        rr.push(1.0 / rank as f64);
    }
    finish(&rr, skipped)
}

/// Union of `parent`'s children other than `held_out`, in ascending id order.
pub fn remaining_children_union(
    taxonomy: &Taxonomy,
    sets: &[FuzzyVec],
    parent: usize,
    held_out: usize,
) -> Option<FuzzyVec> {
    let mut rest: Vec<usize> = taxonomy.children(parent).iter().copied().filter(|&c| c != held_out).collect();
    if rest.is_empty() {
        return None;
    }
    rest.sort_unstable();
    Some(fold_union(&rest.iter().map(|&c| &sets[c]).collect::<Vec<_>>()))
}

/// For each parent `A` and child `B`, `A ∩ Bᶜ` should lie nearest one of
/// `A`'s other children among all non-root nodes.
///
/// ACC credits a top-ranked remaining child; MRR uses the best rank among
/// remaining children.
pub fn complement_inference(
    model: &FuseModel,
    taxonomy: &Taxonomy,
    embeddings: &EmbeddingTable,
) -> Result<SetInference> {
    let sets = node_sets(model, taxonomy, embeddings)?;
    complement_inference_on(taxonomy, &sets)
}

/// [`complement_inference`] over precomputed node sets.
pub fn complement_inference_on(taxonomy: &Taxonomy, sets: &[FuzzyVec]) -> Result<SetInference> {
    let candidates: Vec<usize> = (0..taxonomy.len()).filter(|&n| n != taxonomy.root()).collect();
    let mut rr = Vec::new();
    let mut skipped = 0;
    for p in 0..taxonomy.len() {
        let mut kids = taxonomy.children(p).to_vec();
        if kids.is_empty() {
            continue;
        }
        if kids.len() < 2 {
            skipped += 1;
            continue;
        }
        kids.sort_unstable();
        for &b in &kids {
            let diff = algebra::intersect(&sets[p], &algebra::complement(&sets[b]), LogicSystem::Product)
                .expect("equal dimensions");
            let order = ranked_by_distance(&diff, &candidates, sets);
            let rank = order.iter().position(|c| *c != b && kids.contains(c)).expect("another child exists") + 1;
            rr.push(1.0 / rank as f64);
        }
    }
    finish(&rr, skipped)
}
