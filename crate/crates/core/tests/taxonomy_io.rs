use fuse_core::mapper::EntityEmbedding;
use fuse_core::taxonomy::*;
use proptest::prelude::*;

/// Edge lists of random rooted DAGs: node `i` gets a parent among `0..i`
/// and sometimes a second one.
fn random_edges() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>(), any::<bool>()), 1..40).prop_map(
        |picks| {
            let mut edges = Vec::new();
            for (i, (a, b, extra)) in picks.into_iter().enumerate() {
                let child = i + 1;
                let p = a.index(child);
                edges.push((format!("t{child}"), format!("t{p}")));
                let q = b.index(child);
                if extra && q != p {
                    edges.push((format!("t{child}"), format!("t{q}")));
                }
            }
            edges
        },
    )
}

proptest! {
    #[test]
    fn taxonomy_round_trips(edges in random_edges()) {
        let t = Taxonomy::from_edges(&edges).unwrap();
        let back = Taxonomy::parse_tsv(&t.to_tsv()).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.to_tsv(), t.to_tsv());
    }

    #[test]
    fn depth_and_lca_are_consistent(edges in random_edges(), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let t = Taxonomy::from_edges(&edges).unwrap();
        let (a, b) = (a.index(t.len()), b.index(t.len()));
        let l = t.lca(a, b).unwrap();
        prop_assert!(t.depth(l).unwrap() <= t.depth(a).unwrap().min(t.depth(b).unwrap()));
        prop_assert_eq!(t.lca(a, a).unwrap(), a);
        let w = t.wu_palmer(a, b).unwrap();
        prop_assert!(w > 0.0 && w <= 1.0);
        prop_assert_eq!(w == 1.0, a == b);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_taxonomy(SynthSpec { dim: 8, ..SynthSpec::default() }).unwrap();
    save_synth(dir.path(), &data).unwrap();
    let t = load_taxonomy(&dir.path().join("taxonomy.tsv")).unwrap();
    assert_eq!(t, data.taxonomy);
    let e = load_embeddings(&dir.path().join("embeddings.tsv"), &t).unwrap();
    assert_eq!(e.len(), 85);
    for term in t.terms() {
        assert_eq!(e.get(term).unwrap().as_slice(), data.embeddings.get(term).unwrap().as_slice());
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest, "synth\tdepth=3\tbranching=4\tdim=8\tnoise=0.05\tseed=7\n");
}

#[test]
fn missing_embedding_is_reported() {
    let t = Taxonomy::parse_tsv("b\ta\nc\ta\n").unwrap();
    let mut e = EmbeddingTable::new(2);
    e.insert("a", EntityEmbedding::new(vec![0.0, 1.0]).unwrap());
    e.insert("b", EntityEmbedding::new(vec![1.0, 1.0]).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.tsv");
    save_embeddings(&path, &e).unwrap();
    assert_eq!(load_embeddings(&path, &t), Err(TaxonomyError::MissingEmbedding("c".into())));
}

#[test]
fn synthetic_taxonomy_shape() {
    let data = synth_taxonomy(SynthSpec::default()).unwrap();
    let t = &data.taxonomy;
    assert_eq!(t.len(), 85);
    assert_eq!(t.edges().len(), 84);
    assert_eq!(t.leaves().len(), 64);
    assert!(t.leaves().iter().all(|&l| t.depth(l).unwrap() == 4));
    assert_eq!(data.embeddings.dim(), 64);

    let noiseless = SynthSpec { noise: 0.0, ..SynthSpec::default() };
    assert_eq!(
        synth_taxonomy(noiseless).unwrap().embeddings.to_tsv(),
        synth_taxonomy(noiseless).unwrap().embeddings.to_tsv()
    );
}

#[test]
fn sibling_leaves_share_ancestors() {
    // leaves 21 and 22 share parent 5; leaf 84 sits under 20, in another subtree
    let b = 4;
    let p21 = synth_path(21, b);
    let p22 = synth_path(22, b);
    let p84 = synth_path(84, b);
    let shared = |x: &[usize], y: &[usize]| x.iter().filter(|n| y.contains(n)).count();
    assert!(shared(&p21, &p22) >= 2);
    assert_eq!(shared(&p21, &p84), 1);
}

#[test]
fn split_is_valid_and_deterministic_for_100_seeds() {
    let data = synth_taxonomy(SynthSpec::default()).unwrap();
    for seed in 0..100 {
        let spec = SplitSpec { test_fraction: 0.2, seed };
        let s = split_leaves(&data.taxonomy, spec).unwrap();
        assert_eq!(s.test_queries.len(), 12);
        assert_eq!(s.train.len(), 85 - 12);
        assert_eq!(s.train.root(), s.train.id("n0").unwrap());
        for q in &s.test_queries {
            assert!(s.train.id(&q.term).is_none());
            assert!(q.parents.iter().all(|p| s.train.id(p).is_some()));
        }
        // rebuilding from edges re-runs the cycle and single-root checks
        assert_eq!(Taxonomy::parse_tsv(&s.train.to_tsv()).unwrap(), s.train);
        assert_eq!(split_leaves(&data.taxonomy, spec).unwrap(), s);
    }
}

#[test]
fn queries_round_trip() {
    let data = synth_taxonomy(SynthSpec::default()).unwrap();
    let s = split_leaves(&data.taxonomy, SplitSpec::default()).unwrap();
    assert_eq!(parse_queries_tsv(&queries_to_tsv(&s.test_queries)).unwrap(), s.test_queries);
}
