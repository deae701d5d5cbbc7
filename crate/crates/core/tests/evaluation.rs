use fuse_core::algebra::{union, FuzzyVec, LogicSystem};
use fuse_core::evaluator::*;
use fuse_core::taxonomy::*;
use fuse_core::trainer::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    data: SynthData,
    split: Split,
    model: fuse_core::model::FuseModel,
}

fn fixture() -> Fixture {
    let data = synth_taxonomy(SynthSpec { dim: 16, ..SynthSpec::default() }).unwrap();
    let split = split_leaves(&data.taxonomy, SplitSpec::default()).unwrap();
    let config = TrainConfig { d: 24, hidden: vec![16], epochs: 20, ..TrainConfig::default() };
    let model = train(&config, &split.train, &data.embeddings).unwrap().checkpoint.to_model().unwrap();
    Fixture { data, split, model }
}

#[test]
fn metric_invariants_hold_for_every_mode() {
    let f = fixture();
    for mode in [ScoreMode::Containment, ScoreMode::Psi, ScoreMode::Sum] {
        let e = evaluate(&f.model, &f.split.test_queries, &f.split.train, &f.data.embeddings, mode).unwrap();
        let m = e.metrics;
        assert!(m.mrr >= m.acc, "{mode}: {m:?}");
        assert!((0.0..=1.0).contains(&m.acc) && (0.0..=1.0).contains(&m.mrr) && m.wup > 0.0 && m.wup <= 1.0);
        assert_eq!(e.details.len(), f.split.test_queries.len());
        for (d, q) in e.details.iter().zip(&f.split.test_queries) {
            assert!(d.rank >= 1 && d.rank <= f.split.train.len());
            assert_eq!(d.wup == 1.0, q.parents.contains(&d.predicted), "{d:?}");
            assert_eq!(d.rank == 1, q.parents.contains(&d.predicted));
        }
    }
}

#[test]
fn evaluation_ignores_query_order() {
    let f = fixture();
    let mode = ScoreMode::default();
    let base = evaluate(&f.model, &f.split.test_queries, &f.split.train, &f.data.embeddings, mode).unwrap();
    let mut shuffled = f.split.test_queries.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let other = evaluate(&f.model, &shuffled, &f.split.train, &f.data.embeddings, mode).unwrap();
    for (a, b) in [
        (base.metrics.acc, other.metrics.acc),
        (base.metrics.mrr, other.metrics.mrr),
        (base.metrics.wup, other.metrics.wup),
    ] {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn empty_query_set_is_an_error() {
    let f = fixture();
    let r = evaluate(&f.model, &[], &f.split.train, &f.data.embeddings, ScoreMode::Psi);
    assert_eq!(r.unwrap_err(), EvalError::NoQueries);
}

#[test]
fn detail_and_metric_tables() {
    let f = fixture();
    let e = evaluate(&f.model, &f.split.test_queries, &f.split.train, &f.data.embeddings, ScoreMode::Psi).unwrap();
    let tsv = details_to_tsv(&e.details);
    assert_eq!(tsv.lines().next().unwrap(), "query\tpredicted\trank\twup");
    assert_eq!(tsv.lines().count(), 13);
    let metrics = e.metrics.to_tsv();
    let rows: Vec<&str> = metrics.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, ["acc", "mrr", "wup"]);
}

#[test]
fn set_inference_runs_on_a_trained_model() {
    let f = fixture();
    let u = union_inference(&f.model, &f.data.taxonomy, &f.data.embeddings).unwrap();
    assert_eq!((u.evaluated, u.skipped), (21, 0));
    assert!(u.mrr >= u.acc);
    let c = complement_inference(&f.model, &f.data.taxonomy, &f.data.embeddings).unwrap();
    assert_eq!(c.evaluated, 84);
    assert!(c.mrr >= c.acc);
}

#[test]
fn parents_with_one_child_are_skipped() {
    let t = Taxonomy::parse_tsv("x\tr\ny\tr\nz\tx\n").unwrap();
    let sets: Vec<FuzzyVec> = (0..t.len()).map(|i| FuzzyVec::new(vec![0.1 * i as f64, 0.5]).unwrap()).collect();
    let u = union_inference_on(&t, &sets).unwrap();
    assert_eq!((u.evaluated, u.skipped), (1, 1));
    let c = complement_inference_on(&t, &sets).unwrap();
    assert_eq!((c.evaluated, c.skipped), (2, 1));
}

proptest! {
    #[test]
    fn product_union_fold_is_order_independent(
        sets in prop::collection::vec(prop::collection::vec(0.0..=1.0f64, 6), 2..8),
        seed in any::<u64>(),
    ) {
        let sets: Vec<FuzzyVec> = sets.into_iter().map(|v| FuzzyVec::new(v).unwrap()).collect();
        let refs: Vec<&FuzzyVec> = sets.iter().collect();
        let folded = fold_union(&refs);
        let mut shuffled = refs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let other = shuffled[1..].iter().fold(shuffled[0].clone(), |acc, s| union(&acc, s, LogicSystem::Product).unwrap());
        for (a, b) in folded.as_slice().iter().zip(other.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
