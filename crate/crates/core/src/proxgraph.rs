//! Proximity graph construction (ip-NSW, IPDG, Mobius) and persistence.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::vecstore::{dot, l2_distance, l2_norm, rank_desc, top_k_scored, Dataset, VectorRows};

pub const GRAPH_MAGIC: &[u8; 8] = b"MIPSGRF1";

/// Similarity used to rank neighbors while building or searching a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    InnerProduct,
    NegativeL2,
    /// Undefined for zero vectors; builders reject datasets containing them.
    Cosine,
}

impl SimilarityKind {
    #[inline]
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            SimilarityKind::InnerProduct => dot(a, b),
            SimilarityKind::NegativeL2 => -l2_distance(a, b),
            SimilarityKind::Cosine => dot(a, b) / (l2_norm(a) * l2_norm(b)),
        }
    }

    fn tag(self) -> u8 {
        match self {
            SimilarityKind::InnerProduct => 0,
            SimilarityKind::NegativeL2 => 1,
            SimilarityKind::Cosine => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SimilarityKind::InnerProduct),
            1 => Some(SimilarityKind::NegativeL2),
            2 => Some(SimilarityKind::Cosine),
            _ => None,
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::InnerProduct => "ip",
            SimilarityKind::NegativeL2 => "l2",
            SimilarityKind::Cosine => "cos",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ip" | "inner_product" => Ok(SimilarityKind::InnerProduct),
            "l2" | "negative_l2" => Ok(SimilarityKind::NegativeL2),
            "cos" | "cosine" => Ok(SimilarityKind::Cosine),
            other => Err(Error::Config(format!("unknown similarity {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphAlgo {
    IpNsw,
    Ipdg,
    Mobius,
}

impl fmt::Display for GraphAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphAlgo::IpNsw => "ipnsw",
            GraphAlgo::Ipdg => "ipdg",
            GraphAlgo::Mobius => "mobius",
        })
    }
}

impl FromStr for GraphAlgo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipnsw" | "ip-nsw" => Ok(GraphAlgo::IpNsw),
            "ipdg" => Ok(GraphAlgo::Ipdg),
            "mobius" => Ok(GraphAlgo::Mobius),
            other => Err(Error::Config(format!("unknown graph algorithm {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphConfig {
    /// Maximum out-degree `M`.
    pub max_degree: usize,
    /// Candidate pool size `N` used by the construction-time search.
    pub candidate_size: usize,
    pub similarity: SimilarityKind,
    pub seed: u64,
}

impl GraphConfig {
    pub fn new(max_degree: usize, candidate_size: usize, similarity: SimilarityKind) -> Self {
        Self {
            max_degree,
            candidate_size,
            similarity,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_degree == 0 {
            return Err(Error::BadGraphConfig("max_degree must be at least 1".into()));
        }
        if self.candidate_size < self.max_degree {
            return Err(Error::BadGraphConfig(format!(
                "candidate_size {} < max_degree {}",
                self.candidate_size, self.max_degree
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProximityGraph {
    out_edges: Vec<Vec<usize>>,
    directed: bool,
    config: GraphConfig,
    entry_vertex: usize,
    checksum: u64,
}

impl ProximityGraph {
    /// Checks the structural invariants: ids in range, no self-loops, no
    /// duplicate edges, out-degree at most `max_degree`.
    pub fn new(
        out_edges: Vec<Vec<usize>>,
        directed: bool,
        config: GraphConfig,
        entry_vertex: usize,
    ) -> Result<Self> {
        let n = out_edges.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if entry_vertex >= n {
            return Err(Error::NodeOutOfRange {
                node: entry_vertex,
                n,
            });
        }
        for (u, list) in out_edges.iter().enumerate() {
            if list.len() > config.max_degree {
                return Err(Error::BadGraphConfig(format!(
                    "node {u} has out-degree {} > {}",
                    list.len(),
                    config.max_degree
                )));
            }
            for (j, &v) in list.iter().enumerate() {
                if v >= n {
                    return Err(Error::NodeOutOfRange { node: v, n });
                }
                if v == u {
                    return Err(Error::BadGraphConfig(format!("self-loop at {u}")));
                }
                if list[..j].contains(&v) {
                    return Err(Error::BadGraphConfig(format!("duplicate edge {u}->{v}")));
                }
            }
        }
        let mut g = Self {
            out_edges,
            directed,
            config,
            entry_vertex,
            checksum: 0,
        };
        g.checksum = g.compute_checksum();
        Ok(g)
    }

    /// Complete graph on `n` nodes (every ordered pair connected).
    pub fn complete(n: usize, similarity: SimilarityKind) -> Result<Self> {
        let m = n.saturating_sub(1).max(1);
        let edges = (0..n)
            .map(|u| (0..n).filter(|&v| v != u).collect())
            .collect();
        Self::new(edges, false, GraphConfig::new(m, m, similarity), 0)
    }

    /// Undirected graph from an edge list; the degree cap is set to the max degree.
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::NodeOutOfRange { node: a.max(b), n });
            }
            if a != b && !adj[a].contains(&b) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let m = adj.iter().map(Vec::len).max().unwrap_or(0).max(1);
        Self::new(
            adj,
            false,
            GraphConfig::new(m, m, SimilarityKind::InnerProduct),
            0,
        )
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.out_edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out_edges.is_empty()
    }

    #[inline]
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.out_edges[v]
    }

    pub fn out_edges(&self) -> &[Vec<usize>] {
        &self.out_edges
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn entry_vertex(&self) -> usize {
        self.entry_vertex
    }

    pub fn max_out_degree(&self) -> usize {
        self.out_edges.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn num_edges(&self) -> usize {
        self.out_edges.iter().map(Vec::len).sum()
    }

    /// Structural checksum, also stored in the file header.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    /// Reverse adjacency (in-neighbors of each node).
    pub fn reversed(&self) -> Vec<Vec<usize>> {
        let mut rev = vec![Vec::new(); self.len()];
        for (u, list) in self.out_edges.iter().enumerate() {
            for &v in list {
                rev[v].push(u);
            }
        }
        rev
    }

    /// Number of nodes reachable from `start` along out-edges (including `start`).
    pub fn reachable_count(&self, start: usize) -> usize {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.out_edges[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count
    }

    fn header_and_body(&self) -> ByteWriter {
        let mut w = ByteWriter::default();
        w.u64(self.len() as u64);
        w.u8(u8::from(self.directed));
        w.u64(self.config.max_degree as u64);
        w.u64(self.config.candidate_size as u64);
        w.u8(self.config.similarity.tag());
        w.u64(self.config.seed);
        w.u64(self.entry_vertex as u64);
        let mut offset = 0u64;
        w.u64(offset);
        for list in &self.out_edges {
            offset += list.len() as u64;
            w.u64(offset);
        }
        for list in &self.out_edges {
            for &v in list {
                w.u64(v as u64);
            }
        }
        w
    }

    fn compute_checksum(&self) -> u64 {
        checksum_bytes(&self.header_and_body().buf)
    }

    /// Layout: magic, then `n: u64, directed: u8, M: u64, N: u64, similarity: u8,
    /// seed: u64, entry: u64, checksum: u64`, then `n + 1` CSR offsets and the
    /// neighbor ids, all little-endian u64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.header_and_body().buf;
        let header_len = 8 + 1 + 8 + 8 + 1 + 8 + 8;
        let mut w = ByteWriter::default();
        w.bytes(GRAPH_MAGIC);
        w.bytes(&body[..header_len]);
        w.u64(self.checksum);
        w.bytes(&body[header_len..]);
        write_file(path, &w.buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        r.magic(GRAPH_MAGIC)?;
        let n = r.len_u64()?;
        let directed = match r.u8()? {
            0 => false,
            1 => true,
            t => return Err(r.malformed(format!("bad directed flag {t}"))),
        };
        let max_degree = r.len_u64()?;
        let candidate_size = r.len_u64()?;
        let tag = r.u8()?;
        let similarity =
            SimilarityKind::from_tag(tag).ok_or_else(|| r.malformed(format!("bad similarity {tag}")))?;
        let seed = r.u64()?;
        let entry = r.len_u64()?;
        let stored = r.u64()?;
        if r.remaining() < (n + 1) * 8 {
            return Err(r.malformed("truncated offsets"));
        }
        let offsets = (0..=n).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(r.malformed("offsets not monotone"));
        }
        let total = offsets[n];
        if r.remaining() != total * 8 {
            return Err(r.malformed(format!(
                "expected {} neighbor bytes, found {}",
                total * 8,
                r.remaining()
            )));
        }
        let ids = (0..total).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
        let out_edges = offsets
            .windows(2)
            .map(|w| ids[w[0]..w[1]].to_vec())
            .collect();
        let config = GraphConfig {
            max_degree,
            candidate_size,
            similarity,
            seed,
        };
        let g = Self::new(out_edges, directed, config, entry)?;
        if g.checksum != stored {
            return Err(Error::ChecksumMismatch {
                stored,
                computed: g.checksum,
            });
        }
        Ok(g)
    }
}

pub(crate) fn checksum_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// Frontier search used during construction: grows the candidate pool by all
/// unchecked neighbors, truncates it to the best `pool` nodes and stops once
/// the pool no longer changes. Returns up to `k` nodes, best first.
fn greedy_search_adj(
    adj: &[Vec<usize>],
    points: &VectorRows,
    q: &[f64],
    v0: usize,
    pool: usize,
    k: usize,
    sim: SimilarityKind,
) -> Vec<usize> {
    let mut checked: HashSet<usize> = HashSet::from([v0]);
    let mut current = vec![(v0, sim.score(q, points.row(v0)))];
    loop {
        let mut grown = current.clone();
        for &(u, _) in &current {
            for &v in &adj[u] {
                if checked.insert(v) {
                    grown.push((v, sim.score(q, points.row(v))));
                }
            }
        }
        if grown.len() == current.len() {
            break;
        }
        let next = top_k_scored(grown, pool.max(1));
        let converged = next.len() == current.len()
            && next
                .iter()
                .all(|(v, _)| current.iter().any(|(u, _)| u == v));
        current = next;
        if converged {
            break;
        }
    }
    current.sort_unstable_by(rank_desc);
    current.into_iter().take(k).map(|(v, _)| v).collect()
}

/// Greedy frontier search over `graph` with node vectors taken from `dataset`.
/// Returns at most `k` nodes; fewer when the final pool is smaller.
pub fn greedy_search(
    graph: &ProximityGraph,
    dataset: &Dataset,
    q: &[f64],
    v0: usize,
    pool: usize,
    k: usize,
    sim: SimilarityKind,
) -> Result<Vec<usize>> {
    if v0 >= graph.len() {
        return Err(Error::NodeOutOfRange {
            node: v0,
            n: graph.len(),
        });
    }
    check_points(graph, dataset, q)?;
    if sim == SimilarityKind::Cosine && l2_norm(q) == 0.0 {
        return Err(Error::ZeroNormQuery(0));
    }
    Ok(greedy_search_adj(
        graph.out_edges(),
        dataset.items(),
        q,
        v0,
        pool,
        k,
        sim,
    ))
}

fn check_points(graph: &ProximityGraph, dataset: &Dataset, q: &[f64]) -> Result<()> {
    if graph.len() != dataset.len() {
        return Err(Error::Shape(format!(
            "graph has {} nodes, dataset {} items",
            graph.len(),
            dataset.len()
        )));
    }
    if q.len() != dataset.dim() {
        return Err(Error::LengthMismatch {
            left: q.len(),
            right: dataset.dim(),
        });
    }
    Ok(())
}

fn reject_zero_items(dataset: &Dataset) -> Result<()> {
    match dataset.zero_norm_items().first() {
        Some(&i) => Err(Error::ZeroNormItem(i)),
        None => Ok(()),
    }
}

fn argmax_norm(points: &VectorRows) -> usize {
    let scored: Vec<(usize, f64)> = points.iter().map(l2_norm).enumerate().collect();
    top_k_scored(scored, 1)[0].0
}

/// ip-NSW insertion graph with bidirectional links and top-M pruning.
///
/// Nodes are inserted in dataset order. Each new node links to the `M` best
/// nodes found by a greedy search of width `candidate_size` from node 0.
pub fn build_ipnsw(dataset: &Dataset, config: GraphConfig) -> Result<ProximityGraph> {
    build_ipnsw_traced(dataset, config, &mut |_, _| {})
}

fn build_ipnsw_traced(
    dataset: &Dataset,
    config: GraphConfig,
    on_link: &mut dyn FnMut(usize, usize),
) -> Result<ProximityGraph> {
    config.validate()?;
    let sim = config.similarity;
    if sim == SimilarityKind::Cosine {
        reject_zero_items(dataset)?;
    }
    let points = dataset.items();
    let m = config.max_degree;
    let mut adj: Vec<Vec<usize>> = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        adj.push(Vec::new());
        if i == 0 {
            continue;
        }
        let x = points.row(i);
        let selected = greedy_search_adj(&adj, points, x, 0, config.candidate_size, m, sim);
        for &j in &selected {
            on_link(i, j);
            on_link(j, i);
            adj[j].push(i);
            adj[i].push(j);
        }
        for &j in &selected {
            if adj[j].len() > m {
                let owner = points.row(j);
                let scored = adj[j]
                    .iter()
                    .map(|&v| (v, sim.score(owner, points.row(v))))
                    .collect();
                let kept: Vec<usize> = top_k_scored(scored, m).into_iter().map(|(v, _)| v).collect();
                for v in std::mem::take(&mut adj[j]) {
                    if !kept.contains(&v) {
                        adj[v].retain(|&u| u != j);
                    }
                }
                adj[j] = kept;
            }
        }
    }
    ProximityGraph::new(adj, false, config, 0)
}

/// IPDG neighbor selection: scans candidates in order and keeps `y` when
/// `<y, y> >= max_{z in B} <y, z>`, stopping once `M` are kept.
pub fn ipdg_select(candidates: &[usize], points: &VectorRows, m: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::with_capacity(m);
    for &y in candidates {
        if kept.len() >= m {
            break;
        }
        let yv = points.row(y);
        let self_ip = dot(yv, yv);
        if kept.iter().all(|&z| self_ip >= dot(yv, points.row(z))) {
            kept.push(y);
        }
    }
    kept
}

fn sort_by_similarity(
    owner: &[f64],
    ids: impl IntoIterator<Item = usize>,
    points: &VectorRows,
    sim: SimilarityKind,
) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = ids
        .into_iter()
        .map(|v| (v, sim.score(owner, points.row(v))))
        .collect();
    scored.sort_unstable_by(rank_desc);
    scored.dedup_by_key(|(v, _)| *v);
    scored.into_iter().map(|(v, _)| v).collect()
}

/// Two-round directed IPDG construction.
pub fn build_ipdg(dataset: &Dataset, config: GraphConfig) -> Result<ProximityGraph> {
    build_ipdg_rounds(dataset, config, 2)
}

/// IPDG construction with an explicit number of rounds (the standard build
/// uses two; the second round refines the first).
pub fn build_ipdg_rounds(
    dataset: &Dataset,
    config: GraphConfig,
    rounds: usize,
) -> Result<ProximityGraph> {
    config.validate()?;
    let sim = config.similarity;
    if sim == SimilarityKind::Cosine {
        reject_zero_items(dataset)?;
    }
    let points = dataset.items();
    let n = dataset.len();
    let m = config.max_degree;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for round in 0..rounds {
        for x in 0..n {
            let inserted = if round == 0 { x } else { n };
            if inserted == 0 {
                continue;
            }
            let v0 = rng.random_range(0..inserted);
            let xv = points.row(x);
            let found = greedy_search_adj(
                &adj,
                points,
                xv,
                v0,
                config.candidate_size,
                config.candidate_size,
                sim,
            );
            let candidates: Vec<usize> = found.into_iter().filter(|&v| v != x).collect();
            let chosen = ipdg_select(&candidates, points, m);
            let merged = sort_by_similarity(
                xv,
                adj[x].iter().copied().chain(chosen.iter().copied()),
                points,
                sim,
            );
            adj[x] = ipdg_select(&merged, points, m);
            for &y in &chosen {
                let yv = points.row(y);
                let pool = sort_by_similarity(
                    yv,
                    adj[y].iter().copied().chain(std::iter::once(x)),
                    points,
                    sim,
                );
                adj[y] = ipdg_select(&pool, points, m);
            }
        }
    }
    let entry = argmax_norm(points);
    ProximityGraph::new(adj, true, config, entry)
}

/// `x / ||x||^2`; undefined for the zero vector.
pub fn mobius_transform(x: &[f64]) -> Result<Vec<f64>> {
    let sq = dot(x, x);
    if sq == 0.0 {
        return Err(Error::ZeroNormItem(0));
    }
    Ok(x.iter().map(|v| v / sq).collect())
}

/// Distance-based neighbor selection for the Mobius build: candidates in
/// ascending distance to `x`; keep `y` when `||x - y|| <= min_{z in B} ||z - y||`.
pub fn mobius_select(x: &[f64], candidates: &[usize], points: &VectorRows, m: usize) -> Vec<usize> {
    let mut by_dist: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&c| (c, -l2_distance(x, points.row(c))))
        .collect();
    by_dist.sort_unstable_by(rank_desc);
    by_dist.dedup_by_key(|(v, _)| *v);
    let mut kept: Vec<usize> = Vec::with_capacity(m);
    for (y, neg_d) in by_dist {
        if kept.len() >= m {
            break;
        }
        let yv = points.row(y);
        if kept.iter().all(|&z| -neg_d <= l2_distance(points.row(z), yv)) {
            kept.push(y);
        }
    }
    kept
}

/// Mobius graph: built under negative L2 on transformed points plus an
/// auxiliary zero vector, which is removed at the end. Nodes keep the original
/// dataset indices; the entry vertex is the item with the largest norm.
pub fn build_mobius(dataset: &Dataset, config: GraphConfig) -> Result<ProximityGraph> {
    config.validate()?;
    reject_zero_items(dataset)?;
    let n = dataset.len();
    let m = config.max_degree;
    if n <= m {
        return Err(Error::BadGraphConfig(format!(
            "mobius build needs more than M = {m} items, got {n}"
        )));
    }
    let d = dataset.dim();
    let mut flat = vec![0.0; d];
    for x in dataset.items().iter() {
        flat.extend(mobius_transform(x)?);
    }
    let points = VectorRows::from_flat(flat, d)?;
    let sim = SimilarityKind::NegativeL2;

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (u, list) in adj.iter_mut().enumerate().take(m) {
        *list = (0..m).filter(|&v| v != u).collect();
    }
    for i in m..=n {
        let yi = points.row(i);
        let found = greedy_search_adj(
            &adj,
            &points,
            yi,
            0,
            config.candidate_size,
            config.candidate_size,
            sim,
        );
        let candidates: Vec<usize> = found.into_iter().filter(|&v| v != i).collect();
        let chosen = mobius_select(yi, &candidates, &points, m);
        adj[i] = chosen.clone();
        for &z in &chosen {
            let pool: Vec<usize> = adj[z].iter().copied().chain(std::iter::once(i)).collect();
            adj[z] = mobius_select(points.row(z), &pool, &points, m);
        }
    }

    let relabeled: Vec<Vec<usize>> = adj
        .into_iter()
        .skip(1)
        .map(|list| list.into_iter().filter(|&v| v != 0).map(|v| v - 1).collect())
        .collect();
    let entry = argmax_norm(dataset.items());
    let config = GraphConfig {
        similarity: sim,
        ..config
    };
    ProximityGraph::new(relabeled, true, config, entry)
}

/// Dispatches to the builder for `algo`.
pub fn build_graph(algo: GraphAlgo, dataset: &Dataset, config: GraphConfig) -> Result<ProximityGraph> {
    match algo {
        GraphAlgo::IpNsw => build_ipnsw(dataset, config),
        GraphAlgo::Ipdg => build_ipdg(dataset, config),
        GraphAlgo::Mobius => build_mobius(dataset, config),
    }
}

/// Top-k by `sim` over all items, smaller index on ties.
pub fn brute_force_topk_by(dataset: &Dataset, q: &[f64], k: usize, sim: SimilarityKind) -> Vec<usize> {
    let scored = (0..dataset.len())
        .map(|i| (i, sim.score(q, dataset.item(i))))
        .collect();
    top_k_scored(scored, k).into_iter().map(|(i, _)| i).collect()
}

/// Edge multiset summary used by tests comparing graphs.
pub fn edge_set(graph: &ProximityGraph) -> HashMap<usize, HashSet<usize>> {
    graph
        .out_edges()
        .iter()
        .enumerate()
        .map(|(u, l)| (u, l.iter().copied().collect()))
        .collect()
}
