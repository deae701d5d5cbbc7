use fuse_core::gradcheck::GradCheckOptions;
use fuse_core::mapper::EntityEmbedding;
use fuse_core::objectives::Margins;
use fuse_core::taxonomy::*;
use fuse_core::trainer::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainConfig {
    TrainConfig { d: 8, hidden: vec![6], epochs: 5, ..TrainConfig::default() }
}

fn small_synth() -> SynthData {
    synth_taxonomy(SynthSpec { dim: 16, ..SynthSpec::default() }).unwrap()
}

#[test]
fn negative_sampling_is_uniform() {
    let data = synth_taxonomy(SynthSpec::default()).unwrap();
    let t = &data.taxonomy;
    let child = t.leaves()[0];
    let k = 8;
    let draws = 10_000;
    let mut counts = vec![0usize; t.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..draws {
        let s = sample_negatives(t, child, k, &mut rng).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]), "sorted without repeats");
        for n in s {
            counts[n] += 1;
        }
    }
    let eligible: Vec<usize> = (0..t.len()).filter(|&n| n != child && !t.parents(child).contains(&n)).collect();
    assert_eq!(eligible.len(), 83);
    let expected = (draws * k) as f64 / eligible.len() as f64;
    for &n in &eligible {
        let f = counts[n] as f64;
        assert!((f - expected).abs() <= 0.2 * expected, "node {n}: {f} vs {expected}");
    }
    assert_eq!(counts[child], 0);
    assert!(t.parents(child).iter().all(|&p| counts[p] == 0));
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let data = small_synth();
    let config = TrainConfig { epochs: 0, ..small_config() };
    let out = train(&config, &data.taxonomy, &data.embeddings).unwrap();
    assert!(out.log.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = init_model(&config, 16, &mut rng).unwrap();
    assert_eq!(out.checkpoint.to_model().unwrap(), init);
}

#[test]
fn training_is_deterministic() {
    let data = small_synth();
    let a = train(&small_config(), &data.taxonomy, &data.embeddings).unwrap();
    let b = train(&small_config(), &data.taxonomy, &data.embeddings).unwrap();
    assert_eq!(a.checkpoint.to_text(), b.checkpoint.to_text());
    assert_eq!(log_to_tsv(&a.log), log_to_tsv(&b.log));
    let other = train(&TrainConfig { seed: 1, ..small_config() }, &data.taxonomy, &data.embeddings).unwrap();
    assert_ne!(a.checkpoint.to_text(), other.checkpoint.to_text());
}

#[test]
fn log_has_one_row_per_step() {
    let data = small_synth();
    let out = train(&small_config(), &data.taxonomy, &data.embeddings).unwrap();
    // 84 edges in batches of 32
    assert_eq!(out.log.len(), 5 * 3);
    assert_eq!(out.log.last().unwrap().step, 15);
    let tsv = log_to_tsv(&out.log);
    assert_eq!(tsv.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(tsv.lines().count(), 16);
}

#[test]
fn single_edge_ranking_loss_decreases() {
    // one positive edge b -> a; c is the only possible negative
    let t = Taxonomy::parse_tsv("b\ta\nc\ta\n").unwrap();
    let mut emb = EmbeddingTable::new(3);
    for (term, v) in [("a", [1.0, 0.0, 0.2]), ("b", [0.8, 0.3, 0.0]), ("c", [-0.5, 0.9, 0.4])] {
        emb.insert(term, EntityEmbedding::new(v.to_vec()).unwrap());
    }
    let config = TrainConfig {
        d: 16,
        hidden: vec![8],
        lambda: 0.0,
        k_rank_negatives: 1,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let inputs = node_inputs(&t, &emb).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = init_model(&config, 3, &mut rng).unwrap();
    let (a, b) = (t.id("a").unwrap(), t.id("b").unwrap());
    let example = TrainingExample {
        child: b,
        parent: a,
        rank_negatives: sample_negatives(&t, b, 1, &mut rng).unwrap(),
        asym_negatives: vec![],
    };
    assert_eq!(example.rank_negatives, vec![t.id("c").unwrap()]);
    let settings = ObjectiveSettings::from(&config);
    let mut flat = model.flatten();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let out = batch_objective(&model, std::slice::from_ref(&example), &inputs, settings).unwrap();
        losses.push(out.breakdown.total);
        adam.step(&mut flat, &out.gradient);
        model.assign(&flat);
    }
    let last = batch_objective(&model, &[example], &inputs, settings).unwrap().breakdown.total;
    assert!(last < losses[0], "{last} vs {}", losses[0]);
}

#[test]
fn two_node_taxonomy_cannot_be_trained() {
    let t = Taxonomy::parse_tsv("b\ta\n").unwrap();
    let mut emb = EmbeddingTable::new(1);
    emb.insert("a", EntityEmbedding::new(vec![0.0]).unwrap());
    emb.insert("b", EntityEmbedding::new(vec![1.0]).unwrap());
    assert_eq!(train(&small_config(), &t, &emb).unwrap_err(), TrainError::TooFewNodes(2));
}

#[test]
fn smoothed_loss_decreases_on_the_synthetic_taxonomy() {
    let data = synth_taxonomy(SynthSpec::default()).unwrap();
    let config = TrainConfig::default();
    let out = train(&config, &data.taxonomy, &data.embeddings).unwrap();
    let totals: Vec<f64> = out.log.iter().map(|r| r.loss.total).collect();
    assert_eq!(totals.len(), 300);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&totals[..50]), mean(&totals[totals.len() - 50..]));
    assert!(last < first, "{last} >= {first}");
}

fn batch(t: &Taxonomy, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<TrainingExample> {
    t.edges()
        .iter()
        .step_by(9)
        .map(|&(child, parent)| TrainingExample {
            child,
            parent,
            rank_negatives: sample_negatives(t, child, config.k_rank_negatives, rng).unwrap(),
            asym_negatives: sample_negatives(t, child, config.k_asym_negatives, rng).unwrap(),
        })
        .collect()
}

#[test]
fn objective_gradient_at_init_and_after_100_steps() {
    let data = small_synth();
    let t = &data.taxonomy;
    let inputs = node_inputs(t, &data.embeddings).unwrap();
    let opts = GradCheckOptions::default();
    for weight_norm in ["softmax", "sigmoid", "none"] {
        let mut config = TrainConfig { batch_size: 84, epochs: 100, k_rank_negatives: 4, ..small_config() };
        config.set("weight_norm", weight_norm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = init_model(&config, 16, &mut rng).unwrap();
        let examples = batch(t, &config, &mut rng);
        let settings = ObjectiveSettings::from(&config);
        let r = check_objective_gradient(&init, &examples, &inputs, settings, opts).unwrap();
        assert!(r.max_rel_error < 1e-4, "{weight_norm} at init: {r:?}");

        let out = train(&config, t, &data.embeddings).unwrap();
        assert_eq!(out.log.len(), 100);
        let trained = out.checkpoint.to_model().unwrap();
        let r = check_objective_gradient(&trained, &examples, &inputs, settings, opts).unwrap();
        assert!(r.max_rel_error < 1e-4, "{weight_norm} after 100 steps: {r:?}");
        assert!(r.checked > trained.n_params() / 2);
    }
}

#[test]
fn config_file_overrides_and_rejects_unknown_keys() {
    let mut c = TrainConfig::default();
    c.apply_kv_text("# ablation\nlambda=0.5\ngamma_p=0.5\ngamma_n=0.5\n\nhidden=32,16\n").unwrap();
    assert_eq!(c.lambda, 0.5);
    assert_eq!(c.margins, Margins { gamma_p: 0.5, gamma_n: 0.5 });
    assert_eq!(c.hidden, vec![32, 16]);
    assert!(c.apply_kv_text("lamda=1\n").is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lambda: -1.0, ..TrainConfig::default() }.validate().is_err());
}
