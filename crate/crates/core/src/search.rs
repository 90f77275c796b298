//! Budgeted routing on a proximity graph.
//!
//! Cost is counted in inner-product computations (IPC): every vertex scored
//! against the query costs one unit, whether the score comes from the raw
//! vectors or from a precomputed embedding table. Bookkeeping is free.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;

use crate::agent::{
    embed_query, sample_action, AgentParams, EmbeddingTable, Policy, QueryTransformKind,
};
use crate::error::{Error, Result};
use crate::proxgraph::ProximityGraph;
use crate::vecstore::{dot, top_k_scored, Dataset};

/// Inner-product budget. `used` never exceeds `limit`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IpcBudget {
    limit: usize,
    used: usize,
}

impl IpcBudget {
    pub fn new(limit: usize) -> Self {
        Self { limit, used: 0 }
    }

    pub fn unlimited() -> Self {
        Self::new(usize::MAX)
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.limit - self.used
    }

    pub fn exhausted(&self) -> bool {
        self.used >= self.limit
    }

    /// Charges `cost` units if they fit; otherwise charges nothing.
    pub fn try_charge(&mut self, cost: usize) -> bool {
        if cost <= self.remaining() {
            self.used += cost;
            true
        } else {
            false
        }
    }
}

/// Scores vertices against a query: `score(v) = <query_repr, vertex_repr(v)>`.
#[derive(Clone, Debug)]
pub enum Scorer<'a> {
    /// Raw dataset vectors against the raw query.
    Raw { dataset: &'a Dataset, query: &'a [f64] },
    /// Precomputed vertex embeddings against the embedded query.
    Embedded {
        table: &'a EmbeddingTable,
        query: Vec<f64>,
    },
}

impl<'a> Scorer<'a> {
    pub fn raw(dataset: &'a Dataset, query: &'a [f64]) -> Self {
        Scorer::Raw { dataset, query }
    }

    pub fn embedded(table: &'a EmbeddingTable, query: Vec<f64>) -> Self {
        Scorer::Embedded { table, query }
    }

    #[inline]
    pub fn score(&self, v: usize) -> f64 {
        match self {
            Scorer::Raw { dataset, query } => dot(query, dataset.item(v)),
            Scorer::Embedded { table, query } => dot(query, table.row(v)),
        }
    }

    fn check(&self, graph: &ProximityGraph) -> Result<()> {
        let (rows, dim, qdim) = match self {
            Scorer::Raw { dataset, query } => (dataset.len(), dataset.dim(), query.len()),
            Scorer::Embedded { table, query } => {
                table.check_graph(graph)?;
                (table.len(), table.dim(), query.len())
            }
        };
        if rows != graph.len() {
            return Err(Error::Shape(format!(
                "scorer covers {rows} vertices, graph has {}",
                graph.len()
            )));
        }
        if dim != qdim {
            return Err(Error::LengthMismatch {
                left: qdim,
                right: dim,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Best `k` visited vertices, descending by score.
    pub topk: Vec<usize>,
    pub scores: Vec<f64>,
    pub ipc_used: usize,
    /// Visited vertices in the order they were inserted.
    pub visited: Vec<usize>,
}

impl SearchResult {
    pub fn visited_count(&self) -> usize {
        self.visited.len()
    }
}

#[derive(Clone, Copy)]
struct Frontier {
    score: f64,
    id: usize,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    // Max-heap on score; the smaller id wins ties.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// Beam search: repeatedly expands the best-scoring candidate, scoring and
/// inserting each unvisited neighbor while budget remains, then returns the
/// best `k` of everything visited.
///
/// `v0` itself costs one unit to score. When the budget runs out in the middle
/// of an expansion, neighbors already scored are kept and the rest dropped.
pub fn beam_search(
    scorer: &Scorer<'_>,
    graph: &ProximityGraph,
    v0: usize,
    k: usize,
    budget: &mut IpcBudget,
) -> Result<SearchResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if v0 >= graph.len() {
        return Err(Error::NodeOutOfRange {
            node: v0,
            n: graph.len(),
        });
    }
    scorer.check(graph)?;
    let start_used = budget.used();
    if !budget.try_charge(1) {
        return Ok(SearchResult {
            topk: vec![v0],
            scores: vec![f64::NAN],
            ipc_used: 0,
            visited: vec![v0],
        });
    }
    let mut seen = vec![false; graph.len()];
    seen[v0] = true;
    let first = scorer.score(v0);
    let mut visited = vec![(v0, first)];
    let mut frontier = BinaryHeap::from([Frontier { score: first, id: v0 }]);

    'outer: while !budget.exhausted() {
        let Some(c) = frontier.pop() else { break };
        for &v in graph.neighbors(c.id) {
            if seen[v] {
                continue;
            }
            if !budget.try_charge(1) {
                break 'outer;
            }
            seen[v] = true;
            let s = scorer.score(v);
            visited.push((v, s));
            frontier.push(Frontier { score: s, id: v });
        }
    }

    let order: Vec<usize> = visited.iter().map(|(v, _)| *v).collect();
    let best = top_k_scored(visited, k);
    Ok(SearchResult {
        topk: best.iter().map(|(v, _)| *v).collect(),
        scores: best.iter().map(|(_, s)| *s).collect(),
        ipc_used: budget.used() - start_used,
        visited: order,
    })
}

/// Re-ranks the visited set by raw `<q, x>`. Not charged to any budget.
pub fn rerank_raw(visited: &[usize], dataset: &Dataset, q: &[f64], k: usize) -> Vec<usize> {
    let scored = visited.iter().map(|&v| (v, dot(q, dataset.item(v)))).collect();
    top_k_scored(scored, k).into_iter().map(|(v, _)| v).collect()
}

/// Beam search driven by the agent, starting from the graph's entry vertex.
///
/// The query is embedded once and the budget is adjusted for the embedding
/// cost. Results are ranked by embedded score, or by raw inner product over the
/// visited set when `rerank` is set.
#[allow(clippy::too_many_arguments)]
pub fn agent_search(
    dataset: &Dataset,
    graph: &ProximityGraph,
    table: &EmbeddingTable,
    params: &AgentParams,
    q: &[f64],
    k: usize,
    base_ipc: usize,
    rerank: bool,
) -> Result<SearchResult> {
    let ipc = adjusted_budget(base_ipc, q.len(), table.dim(), params.query.kind())?;
    let scorer = Scorer::embedded(table, embed_query(q, &params.query)?);
    let mut budget = IpcBudget::new(ipc);
    let mut result = beam_search(&scorer, graph, graph.entry_vertex(), k, &mut budget)?;
    if !rerank {
        return Ok(result);
    }
    result.topk = rerank_raw(&result.visited, dataset, q, k);
    result.scores = result.topk.iter().map(|&v| dot(q, dataset.item(v))).collect();
    Ok(result)
}

/// Raw-scorer beam search from the graph's entry vertex.
pub fn raw_search(
    dataset: &Dataset,
    graph: &ProximityGraph,
    q: &[f64],
    k: usize,
    ipc: usize,
) -> Result<SearchResult> {
    let mut budget = IpcBudget::new(ipc);
    beam_search(&Scorer::raw(dataset, q), graph, graph.entry_vertex(), k, &mut budget)
}

/// One decision of a collected path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathStep {
    pub state: usize,
    /// Unvisited neighbors of `state` offered to the policy.
    pub candidates: Vec<usize>,
    /// Policy distribution over `candidates` at collection time.
    pub probs: Vec<f64>,
    pub chosen_index: usize,
}

impl PathStep {
    pub fn chosen(&self) -> usize {
        self.candidates[self.chosen_index]
    }

    pub fn chosen_prob(&self) -> f64 {
        self.probs[self.chosen_index]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingPath {
    pub start: usize,
    pub steps: Vec<PathStep>,
}

impl RoutingPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `s_0, s_1, ..., s_T`.
    pub fn states(&self) -> Vec<usize> {
        std::iter::once(self.start)
            .chain(self.steps.iter().map(PathStep::chosen))
            .collect()
    }
}

/// Samples a routing path with the policy. At each state the unvisited
/// neighbors form the candidate set; all of them are marked visited once the
/// policy has picked one. Stops when no candidates remain or the budget is
/// spent. Scoring a candidate costs one unit; when fewer units remain than
/// candidates, only the affordable prefix (adjacency order) is offered.
pub fn collect_path(
    policy: &Policy<'_>,
    graph: &ProximityGraph,
    v0: usize,
    budget: &mut IpcBudget,
    rng: &mut impl Rng,
) -> Result<RoutingPath> {
    if v0 >= graph.len() {
        return Err(Error::NodeOutOfRange {
            node: v0,
            n: graph.len(),
        });
    }
    policy.table().check_graph(graph)?;
    let mut seen = vec![false; graph.len()];
    seen[v0] = true;
    let mut state = v0;
    let mut steps = Vec::new();
    while !budget.exhausted() {
        let mut candidates: Vec<usize> = graph
            .neighbors(state)
            .iter()
            .copied()
            .filter(|&v| !seen[v])
            .collect();
        if candidates.is_empty() {
            break;
        }
        candidates.truncate(budget.remaining());
        budget.try_charge(candidates.len());
        let probs = policy.probs(&candidates)?;
        let chosen_index = sample_action(&probs, rng)?;
        for &c in &candidates {
            seen[c] = true;
        }
        let next = candidates[chosen_index];
        steps.push(PathStep {
            state,
            candidates,
            probs,
            chosen_index,
        });
        state = next;
    }
    Ok(RoutingPath { start: v0, steps })
}

/// Search budget after paying for a learned query embedding.
///
/// Embedding a `d`-dimensional query into `d'` dimensions costs `d' * d`
/// multiply-adds, and each embedded score costs `d'` instead of `d`, so the
/// budget in embedded-score units is `floor((base * d - d' * d) / d')`. The
/// identity transform is free.
pub fn adjusted_budget(
    base_ipc: usize,
    dim: usize,
    embed_dim: usize,
    transform: QueryTransformKind,
) -> Result<usize> {
    if embed_dim == 0 {
        return Err(Error::Config("embedded dimension must be at least 1".into()));
    }
    if transform == QueryTransformKind::Identity {
        if embed_dim != dim {
            return Err(Error::Shape(format!(
                "identity transform needs d' = d, got {embed_dim} vs {dim}"
            )));
        }
        return Ok(base_ipc);
    }
    let total = base_ipc * dim;
    let extra = embed_dim * dim;
    if extra >= total {
        return Err(Error::BudgetConsumed {
            base: base_ipc,
            dim,
            embed_dim,
        });
    }
    Ok((total - extra) / embed_dim)
}
