//! Taxonomy data model, TSV ingestion, leaf splits, depth/LCA queries and a
//! synthetic taxonomy generator.
//!
//! Node ids are dense and follow first appearance in the edge list, with a
//! line's parent registered before its child. Saving writes edges back in
//! their original order, so a load/save round trip keeps every id.
//!
//! Nodes may have several parents. Depth and LCA use the canonical parent:
//! the parent of minimum depth, ties broken by the smaller id.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::mapper::EntityEmbedding;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaxonomyError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("taxonomy has no edges")]
    NoEdges,

    #[error("cycle detected through edge {child} -> {parent}")]
    Cycle { child: String, parent: String },

    #[error("multiple roots: {}", .0.join(", "))]
    MultipleRoots(Vec<String>),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("unknown term '{0}'")]
    UnknownTerm(String),

    #[error("need at least {need} leaves to split, have {have}")]
    TooFewLeaves { have: usize, need: usize },

    #[error("test fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),

    #[error("split removes every training edge")]
    EmptyTrainGraph,

    #[error("embedding missing for term '{0}'")]
    MissingEmbedding(String),

    #[error("line {line}: embedding has dimension {got}, expected {expected}")]
    EmbeddingDimension { line: usize, expected: usize, got: usize },

    #[error("line {line}: non-numeric token '{token}'")]
    NonNumeric { line: usize, token: String },

    #[error("invalid synthetic taxonomy parameters: {0}")]
    InvalidSynth(String),
}

pub type Result<T> = std::result::Result<T, TaxonomyError>;

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| TaxonomyError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)
        .map_err(|e| TaxonomyError::Io { path: path.display().to_string(), message: e.to_string() })
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    /// `(child, parent)` in insertion order.
    edges: Vec<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    depth: Vec<usize>,
    canonical_parent: Vec<Option<usize>>,
    duplicates_dropped: usize,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms && self.edges == other.edges
    }
}

impl Taxonomy {
    /// Builds and validates a taxonomy from `(child, parent)` term pairs.
    pub fn from_edges<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(TaxonomyError::NoEdges);
        }
        let mut terms: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut intern = |t: &str| -> usize {
            if let Some(&id) = index.get(t) {
                return id;
            }
            terms.push(t.to_string());
            index.insert(t.to_string(), terms.len() - 1);
            terms.len() - 1
        };
        let mut edges = Vec::with_capacity(pairs.len());
        let mut seen = HashSet::new();
        let mut duplicates_dropped = 0;
        for (child, parent) in pairs {
            let (child, parent) = (child.as_ref(), parent.as_ref());
            if child == parent {
                return Err(TaxonomyError::Cycle { child: child.into(), parent: parent.into() });
            }
            let p = intern(parent);
            let c = intern(child);
            if seen.insert((c, p)) {
                edges.push((c, p));
            } else {
                duplicates_dropped += 1;
            }
        }
        if duplicates_dropped > 0 {
            log::warn!("dropped {duplicates_dropped} duplicate edge(s)");
        }

        let n = terms.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(c, p) in &edges {
            parents[c].push(p);
            children[p].push(c);
        }
        parents.iter_mut().chain(children.iter_mut()).for_each(|v| v.sort_unstable());

        // Kahn's algorithm from the roots downwards
        let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut visited = 0;
        while let Some(u) = queue.pop_front() {
            visited += 1;
            for &c in &children[u] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if visited < n {
            // every unvisited node has an unvisited parent; walk up until we repeat
            let mut node = (0..n).find(|&i| indegree[i] > 0).expect("unvisited node");
            let mut on_path = HashSet::new();
            loop {
                on_path.insert(node);
                let p = *parents[node].iter().find(|&&p| indegree[p] > 0).expect("cycle parent");
                if on_path.contains(&p) {
                    return Err(TaxonomyError::Cycle { child: terms[node].clone(), parent: terms[p].clone() });
                }
                node = p;
            }
        }

        let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_empty()).collect();
        if roots.len() != 1 {
            return Err(TaxonomyError::MultipleRoots(roots.iter().map(|&r| terms[r].clone()).collect()));
        }
        let root = roots[0];

        let mut depth = vec![0usize; n];
        depth[root] = 1;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &c in &children[u] {
                if depth[c] == 0 {
                    depth[c] = depth[u] + 1;
                    queue.push_back(c);
                }
            }
        }
        let canonical_parent = parents.iter().map(|ps| ps.iter().copied().min_by_key(|&p| (depth[p], p))).collect();

        Ok(Self { terms, index, edges, parents, children, root, depth, canonical_parent, duplicates_dropped })
    }

    /// Parses `child<TAB>parent` lines; blank lines and `#` comments are skipped.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let child = fields.next().unwrap_or("").trim();
            let parent = fields.next().map(str::trim).unwrap_or("");
            if fields.next().is_some() {
                return Err(TaxonomyError::Malformed {
                    line: line_no,
                    reason: "expected two tab-separated fields".into(),
                });
            }
            if child.is_empty() || parent.is_empty() {
                return Err(TaxonomyError::Malformed {
                    line: line_no,
                    reason: format!("dangling term '{}': edge needs both child and parent", child.max(parent)),
                });
            }
            pairs.push((child.to_string(), parent.to_string()));
        }
        Self::from_edges(&pairs)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for &(c, p) in &self.edges {
            let _ = writeln!(out, "{}\t{}", self.terms[c], self.terms[p]);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, id: usize) -> &str {
        &self.terms[id]
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parents(&self, id: usize) -> &[usize] {
        &self.parents[id]
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn canonical_parent(&self, id: usize) -> Option<usize> {
        self.canonical_parent[id]
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.children[i].is_empty()).collect()
    }

    fn check(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(TaxonomyError::UnknownNode(id))
        }
    }

    /// Depth along canonical parents; the root has depth 1.
    pub fn depth(&self, id: usize) -> Result<usize> {
        self.check(id)?;
        Ok(self.depth[id])
    }

    /// Deepest common ancestor under the canonical-parent tree.
    pub fn lca(&self, a: usize, b: usize) -> Result<usize> {
        self.check(a)?;
        self.check(b)?;
        let (mut a, mut b) = (a, b);
        while self.depth[a] > self.depth[b] {
            a = self.canonical_parent[a].expect("non-root has a parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.canonical_parent[b].expect("non-root has a parent");
        }
        while a != b {
            a = self.canonical_parent[a].expect("non-root has a parent");
            b = self.canonical_parent[b].expect("non-root has a parent");
        }
        Ok(a)
    }

    /// Wu & Palmer similarity `2 depth(lca) / (depth(a) + depth(b))`.
    pub fn wu_palmer(&self, a: usize, b: usize) -> Result<f64> {
        let l = self.lca(a, b)?;
        Ok(2.0 * self.depth[l] as f64 / (self.depth[a] + self.depth[b]) as f64)
    }

    /// All ancestors of `id` (excluding itself) over every parent link.
    pub fn ancestors(&self, id: usize) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut stack = self.parents[id].clone();
        let mut out = Vec::new();
        while let Some(p) = stack.pop() {
            if !seen[p] {
                seen[p] = true;
                out.push(p);
                stack.extend_from_slice(&self.parents[p]);
            }
        }
        out.sort_unstable();
        out
    }
}

pub fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    Taxonomy::parse_tsv(&read_file(path)?)
}

pub fn save_taxonomy(path: &Path, t: &Taxonomy) -> Result<()> {
    write_file(path, &t.to_tsv())
}

/// Precomputed entity vectors keyed by term.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<(String, EntityEmbedding)>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: Vec::new(), index: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Inserts or replaces; panics when the dimension differs.
    pub fn insert(&mut self, term: &str, v: EntityEmbedding) {
        assert_eq!(v.dim(), self.dim, "embedding dimension mismatch for '{term}'");
        match self.index.get(term) {
            Some(&i) => self.rows[i].1 = v,
            None => {
                self.index.insert(term.to_string(), self.rows.len());
                self.rows.push((term.to_string(), v));
            }
        }
    }

    pub fn get(&self, term: &str) -> Option<&EntityEmbedding> {
        self.index.get(term).map(|&i| &self.rows[i].1)
    }

    pub fn require(&self, term: &str) -> Result<&EntityEmbedding> {
        self.get(term).ok_or_else(|| TaxonomyError::MissingEmbedding(term.to_string()))
    }

    /// Errors on the first term without an embedding.
    pub fn ensure_covers<'a>(&self, terms: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for t in terms {
            self.require(t)?;
        }
        Ok(())
    }

    /// Parses `term<TAB>v1 v2 ... ve`; the first row fixes the dimension.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (term, values) = line
                .split_once('\t')
                .ok_or_else(|| TaxonomyError::Malformed { line: line_no, reason: "expected term<TAB>values".into() })?;
            let values = values
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| TaxonomyError::NonNumeric { line: line_no, token: tok.to_string() })
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.is_empty() {
                return Err(TaxonomyError::Malformed { line: line_no, reason: "no values".into() });
            }
            let table = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
            if values.len() != table.dim {
                return Err(TaxonomyError::EmbeddingDimension {
                    line: line_no,
                    expected: table.dim,
                    got: values.len(),
                });
            }
            let v = EntityEmbedding::new(values).expect("checked finite and nonempty");
            table.insert(term.trim(), v);
        }
        table.ok_or(TaxonomyError::Malformed { line: 0, reason: "embedding file is empty".into() })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (term, v) in &self.rows {
            out.push_str(term);
            out.push('\t');
            for (j, x) in v.as_slice().iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x}");
            }
            out.push('\n');
        }
        out
    }
}

/// Reads an embedding file and checks it covers every taxonomy term.
pub fn load_embeddings(path: &Path, taxonomy: &Taxonomy) -> Result<EmbeddingTable> {
    let table = EmbeddingTable::parse_tsv(&read_file(path)?)?;
    table.ensure_covers(taxonomy.terms().iter().map(String::as_str))?;
    Ok(table)
}

pub fn save_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    write_file(path, &table.to_tsv())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { test_fraction: 0.2, seed: 0 }
    }
}

pub const MIN_LEAVES_FOR_SPLIT: usize = 5;

/// A held-out leaf and its true parents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestQuery {
    pub term: String,
    pub parents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Taxonomy,
    pub test_queries: Vec<TestQuery>,
}

/// Holds out `floor(fraction * #leaves)` leaves together with their edges.
pub fn split_leaves(t: &Taxonomy, spec: SplitSpec) -> Result<Split> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(TaxonomyError::InvalidFraction(spec.test_fraction));
    }
    let leaves = t.leaves();
    if leaves.len() < MIN_LEAVES_FOR_SPLIT {
        return Err(TaxonomyError::TooFewLeaves { have: leaves.len(), need: MIN_LEAVES_FOR_SPLIT });
    }
    let n_test = (spec.test_fraction * leaves.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut held: Vec<usize> = sample(&mut rng, leaves.len(), n_test).into_iter().map(|i| leaves[i]).collect();
    held.sort_unstable();
    let held_set: HashSet<usize> = held.iter().copied().collect();

    let train_pairs: Vec<(&str, &str)> =
        t.edges().iter().filter(|(c, _)| !held_set.contains(c)).map(|&(c, p)| (t.term(c), t.term(p))).collect();
    if train_pairs.is_empty() {
        return Err(TaxonomyError::EmptyTrainGraph);
    }
    let train = Taxonomy::from_edges(&train_pairs)?;
    let test_queries = held
        .iter()
        .map(|&q| TestQuery {
            term: t.term(q).to_string(),
            parents: t.parents(q).iter().map(|&p| t.term(p).to_string()).collect(),
        })
        .collect();
    Ok(Split { train, test_queries })
}

/// One `query<TAB>parent` line per true parent.
pub fn queries_to_tsv(queries: &[TestQuery]) -> String {
    let mut out = String::new();
    for q in queries {
        for p in &q.parents {
            let _ = writeln!(out, "{}\t{}", q.term, p);
        }
    }
    out
}

pub fn parse_queries_tsv(text: &str) -> Result<Vec<TestQuery>> {
    let mut out: Vec<TestQuery> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (q, p) = line
            .split_once('\t')
            .map(|(a, b)| (a.trim(), b.trim()))
            .filter(|(a, b)| !a.is_empty() && !b.is_empty() && !b.contains('\t'))
            .ok_or_else(|| TaxonomyError::Malformed { line: i + 1, reason: "expected query<TAB>parent".into() })?;
        match index.get(q) {
            Some(&k) => out[k].parents.push(p.to_string()),
            None => {
                index.insert(q.to_string(), out.len());
                out.push(TestQuery { term: q.to_string(), parents: vec![p.to_string()] });
            }
        }
    }
    Ok(out)
}

pub fn load_queries(path: &Path) -> Result<Vec<TestQuery>> {
    parse_queries_tsv(&read_file(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub depth: usize,
    pub branching: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { depth: 3, branching: 4, dim: 64, noise: 0.05, seed: 7 }
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "depth={}\tbranching={}\tdim={}\tnoise={}\tseed={}",
            self.depth, self.branching, self.dim, self.noise, self.seed
        )
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub taxonomy: Taxonomy,
    pub embeddings: EmbeddingTable,
}

impl SynthData {
    /// Single manifest line recording the generator parameters.
    pub fn manifest(&self) -> String {
        format!("synth\t{}\n", self.spec)
    }
}

/// Term used for node `id` of a synthetic taxonomy.
pub fn synth_term(id: usize) -> String {
    format!("n{id}")
}

/// Complete `branching`-ary tree with `depth` levels below the root.
///
/// Node `i`'s children are `i*B + 1 ..= i*B + B`. Each embedding is the
/// indicator vector of the node's ancestor path (itself included) pushed
/// through a fixed Gaussian projection, plus isotropic Gaussian noise.
pub fn synth_taxonomy(spec: SynthSpec) -> Result<SynthData> {
    if spec.depth < 2 || spec.branching < 2 || spec.dim == 0 || !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(TaxonomyError::InvalidSynth(format!("{spec}")));
    }
    let b = spec.branching;
    let n: usize = (0..=spec.depth).map(|l| b.pow(l as u32)).sum();
    let pairs: Vec<(String, String)> = (1..n).map(|c| (synth_term(c), synth_term((c - 1) / b))).collect();
    let taxonomy = Taxonomy::from_edges(&pairs)?;
    debug_assert!((0..n).all(|i| taxonomy.id(&synth_term(i)) == Some(i)));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = 1.0 / (spec.dim as f64).sqrt();
    // column j of the projection is the image of node j's indicator
    let projection: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..spec.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let mut embeddings = EmbeddingTable::new(spec.dim);
    for id in 0..n {
        let mut v = vec![0.0; spec.dim];
        for a in synth_path(id, b) {
            v.iter_mut().zip(&projection[a]).for_each(|(x, p)| *x += p);
        }
        if spec.noise > 0.0 {
            for x in &mut v {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += spec.noise * z;
            }
        }
        embeddings.insert(&synth_term(id), EntityEmbedding::new(v).expect("finite"));
    }
    Ok(SynthData { spec, taxonomy, embeddings })
}

/// Ancestor path of `id` in the synthetic tree, root first, `id` last.
pub fn synth_path(id: usize, branching: usize) -> Vec<usize> {
    let mut path = vec![id];
    let mut cur = id;
    while cur > 0 {
        cur = (cur - 1) / branching;
        path.push(cur);
    }
    path.reverse();
    path
}

pub fn save_synth(dir: &Path, data: &SynthData) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| TaxonomyError::Io { path: dir.display().to_string(), message: e.to_string() })?;
    save_taxonomy(&dir.join("taxonomy.tsv"), &data.taxonomy)?;
    save_embeddings(&dir.join("embeddings.tsv"), &data.embeddings)?;
    write_file(&dir.join("manifest.tsv"), &data.manifest())
}
