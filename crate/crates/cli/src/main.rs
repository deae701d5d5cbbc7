use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fuse_core::approx::{self, MembershipFunction, Universe};
use fuse_core::checkpoint::{self, CheckpointError};
use fuse_core::evaluator::{self, ScoreMode};
use fuse_core::gradcheck::GradCheckOptions;
use fuse_core::mapper::MapperParams;
use fuse_core::taxonomy::{self, EmbeddingTable, SplitSpec, SynthSpec, Taxonomy, TaxonomyError};
use fuse_core::trainer::{self, ObjectiveSettings, TrainConfig, TrainError, TrainingExample};
use log::info;

const EXIT_ASSERTION: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Passing threshold for `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "fuse", version, about = "Fuzzy set embeddings for taxonomy expansion")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a taxonomy, train a model and write the checkpoint and log.
    Train(TrainArgs),
    /// Rank anchors for test queries and run set-operation inference.
    Eval(EvalArgs),
    /// Upper-sum convergence study for a membership function.
    Approx(ApproxArgs),
    /// Write a synthetic taxonomy with structured embeddings.
    Synth(SynthArgs),
    /// Compare the objective's analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

/// Training hyperparameters; each flag overrides the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key=value` file of training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of partition cells.
    #[arg(long)]
    d: Option<String>,
    /// Comma-separated hidden layer widths.
    #[arg(long)]
    hidden: Option<String>,
    /// sigmoid, clamp01 or layernorm-sigmoid.
    #[arg(long)]
    output_norm: Option<String>,
    /// none, sigmoid, softmax or clamp01.
    #[arg(long)]
    weight_norm: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    gamma_p: Option<String>,
    #[arg(long)]
    gamma_n: Option<String>,
    #[arg(long)]
    k_rank_negatives: Option<String>,
    #[arg(long)]
    k_asym_negatives: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// true or false.
    #[arg(long)]
    euclid_norm_in_score: Option<String>,
    /// product or goedel.
    #[arg(long)]
    logic: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> [(&'static str, &Option<String>); 15] {
        [
            ("d", &self.d),
            ("hidden", &self.hidden),
            ("output_norm", &self.output_norm),
            ("weight_norm", &self.weight_norm),
            ("lambda", &self.lambda),
            ("gamma_p", &self.gamma_p),
            ("gamma_n", &self.gamma_n),
            ("k_rank_negatives", &self.k_rank_negatives),
            ("k_asym_negatives", &self.k_asym_negatives),
            ("learning_rate", &self.learning_rate),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("seed", &self.seed),
            ("euclid_norm_in_score", &self.euclid_norm_in_score),
            ("logic", &self.logic),
        ]
    }

    fn resolve(&self, mut base: TrainConfig) -> Result<TrainConfig, Failure> {
        if let Some(path) = &self.config {
            let text = read_input(path)?;
            base.apply_kv_text(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        }
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                base.set(key, v).map_err(Failure::input)?;
            }
        }
        base.validate().map_err(Failure::input)?;
        Ok(base)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Edge list, `child<TAB>parent` per line.
    #[arg(long)]
    taxonomy: PathBuf,
    /// `term<TAB>v1 v2 ...` per line.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Share of leaves held out as test queries.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Train on the whole taxonomy without holding out queries.
    #[arg(long)]
    no_split: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Taxonomy whose nodes are the candidate anchors.
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// `query<TAB>parent` per line.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// containment, psi or sum.
    #[arg(long, default_value = "containment")]
    score_mode: ScoreMode,
    /// Also run union inference over the taxonomy.
    #[arg(long)]
    union: bool,
    /// Also run complement inference over the taxonomy.
    #[arg(long)]
    complement: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ApproxArgs {
    /// identity, constant:C, linear:S,I, gaussian:C,S[,H], piecewise:B..;V.. or tabulated:X..;Y..
    #[arg(long)]
    function: String,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    lo: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    hi: f64,
    /// Comma-separated partition sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8, 16, 32, 64, 128, 256, 512])]
    ns: Vec<usize>,
    /// Midpoint-rule points for the reference integral.
    #[arg(long, default_value_t = approx::DEFAULT_QUADRATURE_RESOLUTION)]
    resolution: usize,
    /// Exit 1 on a negative gap or an out-of-band convergence ratio.
    #[arg(long)]
    assert: bool,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    branching: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Init {
    Zero,
    Random,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a trained model instead of a fresh one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to a small built-in synthetic taxonomy.
    #[arg(long, requires = "embeddings")]
    taxonomy: Option<PathBuf>,
    #[arg(long, requires = "taxonomy")]
    embeddings: Option<PathBuf>,
    /// Parameters of a fresh model.
    #[arg(long, value_enum, default_value_t = Init::Random)]
    init: Init,
    /// Edges in the checked batch.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Check a random subset of this many coordinates.
    #[arg(long)]
    max_coordinates: Option<usize>,
    /// Negative control: perturb the analytic gradient before checking.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(e: impl Display) -> Self {
        Self { code: EXIT_INPUT, message: e.to_string() }
    }

    fn assertion(e: impl Display) -> Self {
        Self { code: EXIT_ASSERTION, message: e.to_string() }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = if matches!(e, CheckpointError::Io { .. }) { EXIT_INPUT } else { EXIT_CHECKPOINT };
        Self { code, message: e.to_string() }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = if matches!(e, TrainError::NonFiniteLoss { .. }) { EXIT_ASSERTION } else { EXIT_INPUT };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Approx(a) => cmd_approx(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::input(format!("{}: no such file", path.display())))
    }
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))
}

fn with_path(path: &Path, e: TaxonomyError) -> Failure {
    match e {
        TaxonomyError::Io { .. } => Failure::input(e),
        _ => Failure::input(format!("{}: {e}", path.display())),
    }
}

fn load_data(taxonomy: &Path, embeddings: &Path) -> Result<(Taxonomy, EmbeddingTable), Failure> {
    let t = taxonomy::load_taxonomy(taxonomy).map_err(|e| with_path(taxonomy, e))?;
    let e = taxonomy::load_embeddings(embeddings, &t).map_err(|e| with_path(embeddings, e))?;
    Ok((t, e))
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    require_file(&a.taxonomy)?;
    require_file(&a.embeddings)?;
    if let Some(c) = &a.config.config {
        require_file(c)?;
    }
    let config = a.config.resolve(TrainConfig::default())?;
    let (full, embeddings) = load_data(&a.taxonomy, &a.embeddings)?;
    create_dir(&a.out_dir)?;

    let train_graph = if a.no_split {
        full
    } else {
        let split = taxonomy::split_leaves(&full, SplitSpec { test_fraction: a.test_fraction, seed: a.split_seed })
            .map_err(Failure::input)?;
        write_output(&a.out_dir.join("test_queries.tsv"), &taxonomy::queries_to_tsv(&split.test_queries))?;
        info!("held out {} test queries", split.test_queries.len());
        split.train
    };
    write_output(&a.out_dir.join("train_taxonomy.tsv"), &train_graph.to_tsv())?;

    let outcome = trainer::train_with_progress(&config, &train_graph, &embeddings, |row| {
        info!("epoch {} step {} loss {:.6}", row.epoch, row.step, row.loss.total);
    })?;
    checkpoint::save_checkpoint(&a.out_dir.join("checkpoint.fuse"), &outcome.checkpoint)?;
    write_output(&a.out_dir.join("train_log.tsv"), &trainer::log_to_tsv(&outcome.log))?;

    match outcome.log.last() {
        Some(row) => {
            let l = row.loss;
            println!(
                "ranking\t{}\nasym_pos\t{}\nasym_neg\t{}\nlambda\t{}\ntotal\t{}",
                l.ranking, l.asym_pos, l.asym_neg, l.lambda, l.total
            );
        }
        None => println!("no training steps; checkpoint holds the initial model"),
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    require_file(&a.checkpoint)?;
    require_file(&a.taxonomy)?;
    require_file(&a.embeddings)?;
    if let Some(q) = &a.queries {
        require_file(q)?;
    }
    if a.queries.is_none() && !a.union && !a.complement {
        return Err(Failure {
            code: EXIT_USAGE,
            message: "nothing to evaluate: give --queries, --union or --complement".into(),
        });
    }
    let model = checkpoint::load_checkpoint(&a.checkpoint)?.to_model()?;
    let (t, embeddings) = load_data(&a.taxonomy, &a.embeddings)?;
    if embeddings.dim() != model.mapper.input_dim() {
        return Err(Failure::input(format!(
            "{}: embeddings have dimension {}, model expects {}",
            a.embeddings.display(),
            embeddings.dim(),
            model.mapper.input_dim()
        )));
    }
    create_dir(&a.out_dir)?;

    if let Some(qpath) = &a.queries {
        let queries = taxonomy::load_queries(qpath).map_err(|e| with_path(qpath, e))?;
        if let Some(q) = queries.iter().find(|q| embeddings.get(&q.term).is_none()) {
            return Err(Failure::input(format!(
                "{}: embedding missing for query '{}'",
                a.embeddings.display(),
                q.term
            )));
        }
        let run = |mode| evaluator::evaluate(&model, &queries, &t, &embeddings, mode).map_err(Failure::input);
        let selected = run(a.score_mode)?;
        write_output(&a.out_dir.join("metrics.tsv"), &selected.metrics.to_tsv())?;
        write_output(&a.out_dir.join("details.tsv"), &evaluator::details_to_tsv(&selected.details))?;
        if selected.fallbacks > 0 {
            log::warn!("{} queries had a degenerate measure and were ranked with psi", selected.fallbacks);
        }
        for mode in [ScoreMode::Containment, ScoreMode::Psi] {
            let m = if mode == a.score_mode { selected.metrics } else { run(mode)?.metrics };
            println!("{mode}\tacc\t{}\tmrr\t{}\twup\t{}", m.acc, m.mrr, m.wup);
        }
    }
    if a.union {
        let u = evaluator::union_inference(&model, &t, &embeddings).map_err(Failure::input)?;
        write_output(&a.out_dir.join("union.tsv"), &u.to_tsv())?;
        println!("union\tacc\t{}\tmrr\t{}\tevaluated\t{}\tskipped\t{}", u.acc, u.mrr, u.evaluated, u.skipped);
    }
    if a.complement {
        let c = evaluator::complement_inference(&model, &t, &embeddings).map_err(Failure::input)?;
        write_output(&a.out_dir.join("complement.tsv"), &c.to_tsv())?;
        println!("complement\tacc\t{}\tmrr\t{}\tevaluated\t{}\tskipped\t{}", c.acc, c.mrr, c.evaluated, c.skipped);
    }
    Ok(())
}

fn cmd_approx(a: &ApproxArgs) -> CmdResult {
    let m = MembershipFunction::parse_spec(&a.function).map_err(Failure::input)?;
    let u = Universe::new(a.lo, a.hi).map_err(Failure::input)?;
    let report = approx::convergence_study(&m, &u, &a.ns, a.resolution).map_err(Failure::input)?;
    let tsv = report.to_tsv();
    match &a.out {
        Some(path) => write_output(path, &tsv)?,
        None => print!("{tsv}"),
    }
    if a.assert {
        let violations = report.violations();
        if !violations.is_empty() {
            for v in &violations {
                eprintln!("{v:?}");
            }
            return Err(Failure::assertion(format!("{} convergence check(s) failed", violations.len())));
        }
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let spec = SynthSpec { depth: a.depth, branching: a.branching, dim: a.dim, noise: a.noise, seed: a.seed };
    let data = taxonomy::synth_taxonomy(spec).map_err(Failure::input)?;
    create_dir(&a.out_dir)?;
    taxonomy::save_synth(&a.out_dir, &data).map_err(Failure::input)?;
    println!("{} nodes, {} edges", data.taxonomy.len(), data.taxonomy.edges().len());
    Ok(())
}

/// Small objective sizes so a full check stays quick.
fn gradcheck_defaults() -> TrainConfig {
    TrainConfig { d: 8, hidden: vec![6], k_rank_negatives: 4, ..TrainConfig::default() }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    use rand::SeedableRng;

    let (t, embeddings) = match (&a.taxonomy, &a.embeddings) {
        (Some(tp), Some(ep)) => {
            require_file(tp)?;
            require_file(ep)?;
            load_data(tp, ep)?
        }
        _ => {
            let data = taxonomy::synth_taxonomy(SynthSpec { depth: 2, branching: 3, dim: 16, ..SynthSpec::default() })
                .map_err(Failure::input)?;
            (data.taxonomy, data.embeddings)
        }
    };
    let (config, model) = match &a.checkpoint {
        Some(path) => {
            require_file(path)?;
            let ckpt = checkpoint::load_checkpoint(path)?;
            let config = a.config.resolve(ckpt.config.clone())?;
            let mut model = ckpt.to_model()?;
            model.options = config.score_options();
            (config, model)
        }
        None => {
            let config = a.config.resolve(gradcheck_defaults())?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
            let mut model = trainer::init_model(&config, embeddings.dim(), &mut rng)?;
            if a.init == Init::Zero {
                model.mapper = MapperParams::zeros(embeddings.dim(), &config.hidden, config.d, config.output_norm);
            }
            (config, model)
        }
    };
    let inputs = trainer::node_inputs(&t, &embeddings)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let examples = t
        .edges()
        .iter()
        .take(a.batch.max(1))
        .map(|&(child, parent)| {
            Ok(TrainingExample {
                child,
                parent,
                rank_negatives: trainer::sample_negatives(&t, child, config.k_rank_negatives, &mut rng)?,
                asym_negatives: trainer::sample_negatives(&t, child, config.k_asym_negatives, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let settings = ObjectiveSettings::from(&config);
    let mut analytic = trainer::batch_objective(&model, &examples, &inputs, settings)?.gradient;
    if a.corrupt_gradient {
        for g in analytic.iter_mut() {
            *g = 2.0 * *g + 1.0;
        }
    }
    let opts =
        GradCheckOptions { max_coordinates: a.max_coordinates, seed: config.seed, ..GradCheckOptions::default() };
    let report = trainer::check_objective_gradient_against(&model, &examples, &inputs, settings, &analytic, opts)?;
    println!(
        "max_rel_error\t{}\nworst_coordinate\t{}\nchecked\t{}\nskipped\t{}",
        report.max_rel_error,
        report.worst_coordinate.map_or_else(|| "NA".to_string(), |c| c.to_string()),
        report.checked,
        report.skipped
    );
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::assertion(format!(
            "max relative error {} is not below {GRADCHECK_TOLERANCE}",
            report.max_rel_error
        )))
    }
}
