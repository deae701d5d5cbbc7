//! Training loop for taxonomy expansion.
//!
//! Each step takes a mini-batch of child-parent edges. For every edge the
//! child is scored against its parent and against sampled negative parents
//! with the membership score (ranking loss), and the containment of the
//! child in the parent and in sampled negatives feeds the asymmetry losses.
//! Gradients flow through the fuzzy mapper into the shared volume weights
//! and an Adam update is applied.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::algebra::{normalize_weights_backward, LogicSystem, VolumeWeights, WeightNorm};
use crate::checkpoint::ModelCheckpoint;
use crate::gradcheck::{self, Evaluation, GradCheckOptions, GradCheckReport};
use crate::mapper::{self, ForwardTrace, MapperError, MapperParams, OutputNorm};
use crate::model::{containment_grad, psi_grad, score_view, FuseModel, ModelError, ScoreOptions};
use crate::objectives::{asymmetry_losses_grad, ranking_loss_grad, total_loss, LossBreakdown, Margins};
use crate::taxonomy::{EmbeddingTable, Taxonomy, TaxonomyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("negative sampling needs at least 3 nodes, taxonomy has {0}")]
    TooFewNodes(usize),

    #[error("no negative candidates for node {0}")]
    NoCandidates(usize),

    #[error("non-finite loss at step {step} on pair {child} -> {parent}")]
    NonFiniteLoss { step: usize, child: String, parent: String },

    #[error("embedding dimension {got} does not match mapper input {expected}")]
    InputDimension { expected: usize, got: usize },

    #[error(transparent)]
    Mapper(#[from] MapperError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),

    #[error(transparent)]
    GradCheck(#[from] gradcheck::GradCheckError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of partition cells, i.e. the fuzzy embedding dimension.
    pub d: usize,
    pub hidden: Vec<usize>,
    pub output_norm: OutputNorm,
    pub weight_norm: WeightNorm,
    pub lambda: f64,
    pub margins: Margins,
    pub k_rank_negatives: usize,
    pub k_asym_negatives: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub euclid_norm_in_score: bool,
    pub logic: LogicSystem,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 350,
            hidden: vec![256],
            output_norm: OutputNorm::Sigmoid,
            // keeps ψ on the scale of the margins when d is large
            weight_norm: WeightNorm::Softmax,
            lambda: 1.0,
            margins: Margins::default(),
            k_rank_negatives: 8,
            k_asym_negatives: 1,
            learning_rate: 0.03,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            euclid_norm_in_score: false,
            logic: LogicSystem::Product,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in serialisation order.
pub const CONFIG_KEYS: &[&str] = &[
    "d",
    "hidden",
    "output_norm",
    "weight_norm",
    "lambda",
    "gamma_p",
    "gamma_n",
    "k_rank_negatives",
    "k_asym_negatives",
    "learning_rate",
    "epochs",
    "batch_size",
    "seed",
    "euclid_norm_in_score",
    "logic",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| TrainError::Config(format!("bad value '{value}' for {key}")))
}

impl TrainConfig {
    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions { logic: self.logic, euclid_norm: self.euclid_norm_in_score }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.d == 0 || self.hidden.contains(&0) {
            return bad("dimensions must be at least 1");
        }
        if self.k_rank_negatives == 0 || self.k_asym_negatives == 0 || self.batch_size == 0 {
            return bad("negative counts and batch size must be at least 1");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and nonnegative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.margins.gamma_p.is_finite() && self.margins.gamma_n.is_finite()) {
            return bad("margins must be finite");
        }
        Ok(())
    }

    /// Sets one `key=value` entry; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d" => self.d = parse(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(key, s)).collect::<Result<_>>()?
                }
            }
            "output_norm" => self.output_norm = v.parse().map_err(TrainError::Config)?,
            "weight_norm" => self.weight_norm = v.parse().map_err(TrainError::Config)?,
            "lambda" => self.lambda = parse(key, v)?,
            "gamma_p" => self.margins.gamma_p = parse(key, v)?,
            "gamma_n" => self.margins.gamma_n = parse(key, v)?,
            "k_rank_negatives" => self.k_rank_negatives = parse(key, v)?,
            "k_asym_negatives" => self.k_asym_negatives = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "euclid_norm_in_score" => self.euclid_norm_in_score = parse(key, v)?,
            "logic" => self.logic = v.parse().map_err(TrainError::Config)?,
            other => return Err(TrainError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let values = [
            self.d.to_string(),
            hidden.join(","),
            self.output_norm.to_string(),
            self.weight_norm.to_string(),
            self.lambda.to_string(),
            self.margins.gamma_p.to_string(),
            self.margins.gamma_n.to_string(),
            self.k_rank_negatives.to_string(),
            self.k_asym_negatives.to_string(),
            self.learning_rate.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.euclid_norm_in_score.to_string(),
            self.logic.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// `k` nodes other than `child` and its parents, sorted by id.
///
/// Draws without replacement while there are enough candidates, with
/// replacement otherwise.
pub fn sample_negatives<R: Rng + ?Sized>(t: &Taxonomy, child: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if t.len() < 3 {
        return Err(TrainError::TooFewNodes(t.len()));
    }
    if k == 0 {
        return Err(TrainError::Config("k must be at least 1".into()));
    }
    let parents = t.parents(child);
    let candidates: Vec<usize> = (0..t.len()).filter(|&n| n != child && !parents.contains(&n)).collect();
    if candidates.is_empty() {
        return Err(TrainError::NoCandidates(child));
    }
    let mut out: Vec<usize> = if candidates.len() >= k {
        sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect()
    } else {
        (0..k).map(|_| candidates[rng.random_range(0..candidates.len())]).collect()
    };
    out.sort_unstable();
    Ok(out)
}

/// One positive edge with its sampled negatives, all as node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub child: usize,
    pub parent: usize,
    pub rank_negatives: Vec<usize>,
    pub asym_negatives: Vec<usize>,
}

/// Loss settings that enter the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub lambda: f64,
    pub margins: Margins,
}

impl From<&TrainConfig> for ObjectiveSettings {
    fn from(c: &TrainConfig) -> Self {
        Self { lambda: c.lambda, margins: c.margins }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    /// Mean over the batch.
    pub breakdown: LossBreakdown,
    pub per_example: Vec<LossBreakdown>,
    /// Gradient of the mean total loss, laid out like [`FuseModel::flatten`].
    pub gradient: Vec<f64>,
    /// Piecewise regime signature for finite-difference checks.
    pub regime: Vec<i8>,
}

struct NodeState {
    trace: ForwardTrace,
    upstream: Vec<f64>,
}

fn regime_of_weights(w: &VolumeWeights) -> impl Iterator<Item = i8> + '_ {
    w.raw.iter().map(move |&r| match w.mode {
        WeightNorm::None => (r >= 0.0) as i8,
        WeightNorm::Clamp01 => {
            if r < 0.0 {
                -1
            } else if r >= 1.0 {
                1
            } else {
                0
            }
        }
        _ => 0,
    })
}

/// Mean combined loss over `examples` and its gradient.
///
/// `inputs[id]` is the entity embedding of node `id`. Children whose volume
/// is degenerate contribute no asymmetry loss.
pub fn batch_objective(
    model: &FuseModel,
    examples: &[TrainingExample],
    inputs: &[Vec<f64>],
    settings: ObjectiveSettings,
) -> Result<ObjectiveOutput> {
    let d = model.d();
    let xi = model.weights.effective();
    let opts = model.options;
    let mut nodes: BTreeMap<usize, NodeState> = BTreeMap::new();
    for ex in examples {
        let ids = [ex.child, ex.parent]
            .into_iter()
            .chain(ex.rank_negatives.iter().copied())
            .chain(ex.asym_negatives.iter().copied());
        for id in ids {
            if let std::collections::btree_map::Entry::Vacant(slot) = nodes.entry(id) {
                let trace = mapper::forward(&inputs[id], &model.mapper)?;
                slot.insert(NodeState { trace, upstream: vec![0.0; d] });
            }
        }
    }
    let output = |nodes: &BTreeMap<usize, NodeState>, id: usize| nodes[&id].trace.output().into_inner();

    let scale = 1.0 / examples.len().max(1) as f64;
    let mut d_xi = vec![0.0; d];
    let mut per_example = Vec::with_capacity(examples.len());
    let mut regime: Vec<i8> = Vec::new();
    let add = |dst: &mut Vec<f64>, src: &[f64], s: f64| dst.iter_mut().zip(src).for_each(|(a, b)| *a += s * b);

    for ex in examples {
        let child = output(&nodes, ex.child);
        let pos = psi_grad(&child, &output(&nodes, ex.parent), &xi, opts);
        let negs: Vec<_> = ex.rank_negatives.iter().map(|&n| psi_grad(&child, &output(&nodes, n), &xi, opts)).collect();
        let neg_scores: Vec<f64> = negs.iter().map(|g| g.value).collect();
        let rank = ranking_loss_grad(pos.value, &neg_scores, settings.margins)
            .map_err(|e| TrainError::Config(e.to_string()))?;

        let cont_pos = containment_grad(&output(&nodes, ex.parent), &child, &xi, opts);
        let cont_negs: Option<Vec<_>> = cont_pos.as_ref().map(|_| {
            ex.asym_negatives
                .iter()
                .map(|&n| containment_grad(&output(&nodes, n), &child, &xi, opts).expect("same child volume"))
                .collect()
        });
        regime.push(cont_pos.is_some() as i8);

        let (asym_pos, asym_neg) = match (&cont_pos, &cont_negs) {
            (Some(cp), Some(cn)) => {
                let probs: Vec<f64> = cn.iter().map(|g| g.value).collect();
                let a = asymmetry_losses_grad(cp.value, &probs);
                let s = scale * settings.lambda;
                add(&mut nodes.get_mut(&ex.parent).unwrap().upstream, &cp.d_first, s * a.d_pos);
                add(&mut nodes.get_mut(&ex.child).unwrap().upstream, &cp.d_second, s * a.d_pos);
                add(&mut d_xi, &cp.d_weights, s * a.d_pos);
                for ((&n, g), &dn) in ex.asym_negatives.iter().zip(cn).zip(&a.d_negs) {
                    add(&mut nodes.get_mut(&n).unwrap().upstream, &g.d_first, s * dn);
                    add(&mut nodes.get_mut(&ex.child).unwrap().upstream, &g.d_second, s * dn);
                    add(&mut d_xi, &g.d_weights, s * dn);
                }
                (a.asym_pos, a.asym_neg)
            }
            _ => (0.0, 0.0),
        };

        add(&mut nodes.get_mut(&ex.child).unwrap().upstream, &pos.d_first, scale * rank.d_pos);
        add(&mut nodes.get_mut(&ex.parent).unwrap().upstream, &pos.d_second, scale * rank.d_pos);
        add(&mut d_xi, &pos.d_weights, scale * rank.d_pos);
        for ((&n, g), &dn) in ex.rank_negatives.iter().zip(&negs).zip(&rank.d_negs) {
            add(&mut nodes.get_mut(&ex.child).unwrap().upstream, &g.d_first, scale * dn);
            add(&mut nodes.get_mut(&n).unwrap().upstream, &g.d_second, scale * dn);
            add(&mut d_xi, &g.d_weights, scale * dn);
        }

        if opts.logic == LogicSystem::Goedel {
            // which side of each min is active
            let c = score_view(&child, opts.euclid_norm);
            let others = std::iter::once(ex.parent)
                .chain(ex.rank_negatives.iter().copied())
                .chain(ex.asym_negatives.iter().copied());
            for o in others {
                let v = score_view(&output(&nodes, o), opts.euclid_norm);
                regime.extend(c.iter().zip(&v).map(|(a, b)| (a <= b) as i8));
            }
        }
        per_example.push(
            total_loss(rank.value, asym_pos, asym_neg, settings.lambda)
                .map_err(|e| TrainError::Config(e.to_string()))?,
        );
    }

    let mut mapper_grad = mapper::GradientBundle::zeros_like(&model.mapper);
    for state in nodes.values() {
        mapper_grad.accumulate(&mapper::backward(&state.trace, &model.mapper, &state.upstream)?);
        if model.mapper.output_norm == OutputNorm::Clamp01 {
            regime.extend(state.trace.logits().iter().map(|&z| {
                if z <= 0.0 {
                    -1
                } else if z >= 1.0 {
                    1
                } else {
                    0
                }
            }));
        }
    }
    regime.extend(regime_of_weights(&model.weights));

    let mut gradient = Vec::with_capacity(model.n_params());
    mapper_grad.flatten_into(&mut gradient);
    gradient.extend(normalize_weights_backward(&model.weights.raw, model.weights.mode, &d_xi));

    let mean = |f: fn(&LossBreakdown) -> f64| per_example.iter().map(f).sum::<f64>() * scale;
    let breakdown = total_loss(mean(|b| b.ranking), mean(|b| b.asym_pos), mean(|b| b.asym_neg), settings.lambda)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(ObjectiveOutput { breakdown, per_example, gradient, regime })
}

/// Finite-difference check of [`batch_objective`] over every model parameter.
pub fn check_objective_gradient(
    model: &FuseModel,
    examples: &[TrainingExample],
    inputs: &[Vec<f64>],
    settings: ObjectiveSettings,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = batch_objective(model, examples, inputs, settings)?.gradient;
    check_objective_gradient_against(model, examples, inputs, settings, &analytic, opts)
}

/// Same as [`check_objective_gradient`] with a caller-supplied analytic gradient.
pub fn check_objective_gradient_against(
    model: &FuseModel,
    examples: &[TrainingExample],
    inputs: &[Vec<f64>],
    settings: ObjectiveSettings,
    analytic: &[f64],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut scratch = model.clone();
    let report = gradcheck::check_gradient(
        &model.flatten(),
        analytic,
        |theta| {
            scratch.assign(theta);
            let out = batch_objective(&scratch, examples, inputs, settings)
                .map_err(|e| gradcheck::GradCheckError::Objective(e.to_string()))?;
            Ok(Evaluation { value: out.breakdown.total, regime: out.regime })
        },
        opts,
    )?;
    Ok(report)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "epoch\tstep\tranking\tasym_pos\tasym_neg\ttotal";

pub fn log_to_tsv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let l = r.loss;
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", r.epoch, r.step, l.ranking, l.asym_pos, l.asym_neg, l.total);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<LogRow>,
}

/// Entity embeddings indexed by node id.
pub fn node_inputs(t: &Taxonomy, embeddings: &EmbeddingTable) -> Result<Vec<Vec<f64>>> {
    t.terms().iter().map(|term| Ok(embeddings.require(term)?.as_slice().to_vec())).collect()
}

/// Freshly initialised model for `config` and input dimension `input_dim`.
pub fn init_model<R: Rng + ?Sized>(config: &TrainConfig, input_dim: usize, rng: &mut R) -> Result<FuseModel> {
    let mapper = MapperParams::random(input_dim, &config.hidden, config.d, config.output_norm, rng);
    Ok(FuseModel::new(mapper, VolumeWeights::zeros(config.d, config.weight_norm), config.score_options())?)
}

pub fn train(config: &TrainConfig, taxonomy: &Taxonomy, embeddings: &EmbeddingTable) -> Result<TrainOutcome> {
    train_with_progress(config, taxonomy, embeddings, |_| {})
}

/// Like [`train`], calling `on_epoch` with the last log row of each epoch.
pub fn train_with_progress(
    config: &TrainConfig,
    taxonomy: &Taxonomy,
    embeddings: &EmbeddingTable,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let inputs = node_inputs(taxonomy, embeddings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init_model(config, embeddings.dim(), &mut rng)?;
    let settings = ObjectiveSettings::from(config);
    let mut flat = model.flatten();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..taxonomy.edges().len()).collect();
    let mut log = Vec::new();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let examples = batch
                .iter()
                .map(|&e| {
                    let (child, parent) = taxonomy.edges()[e];
                    Ok(TrainingExample {
                        child,
                        parent,
                        rank_negatives: sample_negatives(taxonomy, child, config.k_rank_negatives, &mut rng)?,
                        asym_negatives: sample_negatives(taxonomy, child, config.k_asym_negatives, &mut rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = batch_objective(&model, &examples, &inputs, settings)?;
            if let Some(i) = out.per_example.iter().position(|b| !b.total.is_finite()) {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    child: taxonomy.term(examples[i].child).to_string(),
                    parent: taxonomy.term(examples[i].parent).to_string(),
                });
            }
            adam.step(&mut flat, &out.gradient);
            model.assign(&flat);
            log.push(LogRow { epoch, step, loss: out.breakdown });
        }
        if let Some(last) = log.last() {
            on_epoch(last);
        }
    }
    Ok(TrainOutcome { checkpoint: ModelCheckpoint::new(config.clone(), model), log })
}
