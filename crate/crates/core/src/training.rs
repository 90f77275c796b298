//! Policy-gradient training of the routing agent.
//!
//! Rewards are the increment of the query inner product along the path, plus
//! a potential-based shaping term `gamma * Phi(s') - Phi(s)` with
//! `Phi(s) = -alpha * L(s, v*)` when a ground-truth target `v*` is known.
//! Returns subtract a self-critic baseline, and the policy is updated with
//! REINFORCE and Adam.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agent::{
    accumulate_log_prob_grad, dataset_matrix, embed_query, gcn_backward, gcn_forward,
    policy_probs, query_transform_grad, sample_action, AgentParams, EmbeddingTable,
    ForwardCache, NormalizedAdjacency, Policy, QueryTransform,
};
use crate::error::{Error, Result};
use crate::proxgraph::ProximityGraph;
use crate::search::{agent_search, collect_path, IpcBudget, RoutingPath};
use crate::vecstore::{dot, Dataset, GroundTruthTable, QuerySet};

/// Hop distances from every vertex to one target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShortestPathTable {
    target: usize,
    dist: Vec<Option<u32>>,
}

impl ShortestPathTable {
    pub fn target(&self) -> usize {
        self.target
    }

    /// `L(v, v*)`, or `None` when `v*` cannot be reached from `v`.
    pub fn get(&self, v: usize) -> Option<u32> {
        self.dist[v]
    }

    pub fn len(&self) -> usize {
        self.dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.is_empty()
    }
}

/// BFS from the target over reversed edges, so distances are measured along
/// edge direction towards the target.
pub fn bfs_distances(graph: &ProximityGraph, target: usize) -> Result<ShortestPathTable> {
    if target >= graph.len() {
        return Err(Error::NodeOutOfRange {
            node: target,
            n: graph.len(),
        });
    }
    let incoming = graph.reversed();
    let mut dist = vec![None; graph.len()];
    dist[target] = Some(0);
    let mut queue = VecDeque::from([target]);
    while let Some(w) = queue.pop_front() {
        let next = dist[w].expect("queued nodes have a distance") + 1;
        for &u in &incoming[w] {
            if dist[u].is_none() {
                dist[u] = Some(next);
                queue.push_back(u);
            }
        }
    }
    Ok(ShortestPathTable { target, dist })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    /// Inner-product increment plus shaping.
    Full,
    /// Shaping term alone; queries without a target earn nothing.
    ShapingOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub baseline_samples: usize,
    pub mode: RewardMode,
}

impl RewardConfig {
    pub fn new(alpha: f64, gamma: f64, baseline_samples: usize) -> Self {
        Self {
            alpha,
            gamma,
            baseline_samples,
            mode: RewardMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Reward for one transition given the inner-product increment and the hop
/// distances of both endpoints.
pub fn shaped_reward(
    ip_gain: f64,
    dist_from: Option<u32>,
    dist_to: Option<u32>,
    has_target: bool,
    terminal: bool,
    cfg: &RewardConfig,
) -> f64 {
    let base = match cfg.mode {
        RewardMode::Full => ip_gain,
        RewardMode::ShapingOnly => 0.0,
    };
    if !has_target {
        return base;
    }
    let (Some(from), Some(to)) = (dist_from, dist_to) else {
        return base;
    };
    let (from, to) = (f64::from(from), f64::from(to));
    if terminal {
        base + cfg.alpha * from
    } else {
        base - cfg.alpha * (cfg.gamma * to - from)
    }
}

/// Reward for moving from `s` to `s_next` while answering `q`.
pub fn step_reward(
    dataset: &Dataset,
    s: usize,
    s_next: usize,
    q: &[f64],
    target: Option<&ShortestPathTable>,
    terminal: bool,
    cfg: &RewardConfig,
) -> f64 {
    let gain = dot(dataset.item(s_next), q) - dot(dataset.item(s), q);
    shaped_reward(
        gain,
        target.and_then(|t| t.get(s)),
        target.and_then(|t| t.get(s_next)),
        target.is_some(),
        terminal,
        cfg,
    )
}

/// Discounted sum of shaping terms along `states`, with the potential of the
/// final state fixed at zero. Returns `None` if any state cannot reach the
/// target.
pub fn shaping_telescope_check(
    states: &[usize],
    table: &ShortestPathTable,
    cfg: &RewardConfig,
) -> Option<f64> {
    let phi = |v: usize| table.get(v).map(|l| -cfg.alpha * f64::from(l));
    let last = states.len().checked_sub(1)?;
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in 0..last {
        let next = if t + 1 == last { 0.0 } else { phi(states[t + 1])? };
        total += discount * (cfg.gamma * next - phi(states[t])?);
        discount *= cfg.gamma;
    }
    Some(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub state: usize,
    pub next: usize,
    pub reward: f64,
    pub baseline: f64,
    pub log_prob: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Scores a collected path. Each step's baseline is the mean reward of
/// `baseline_samples` extra draws (with replacement) from the distribution the
/// step was taken from, each scored as a nonterminal move.
pub fn build_trajectory(
    path: &RoutingPath,
    dataset: &Dataset,
    q: &[f64],
    target: Option<&ShortestPathTable>,
    cfg: &RewardConfig,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let last = path.steps.len().saturating_sub(1);
    let mut steps = Vec::with_capacity(path.steps.len());
    for (i, step) in path.steps.iter().enumerate() {
        let terminal = i == last;
        let next = step.chosen();
        let reward = step_reward(dataset, step.state, next, q, target, terminal, cfg);
        let mut baseline = 0.0;
        if cfg.baseline_samples > 0 {
            for _ in 0..cfg.baseline_samples {
                let alt = step.candidates[sample_action(&step.probs, rng)?];
                baseline += step_reward(dataset, step.state, alt, q, target, false, cfg);
            }
            baseline /= cfg.baseline_samples as f64;
        }
        steps.push(TrajectoryStep {
            state: step.state,
            next,
            reward,
            baseline,
            log_prob: step.chosen_prob().ln(),
            terminal,
        });
    }
    Ok(Trajectory { steps })
}

/// `G_t = sum_{i >= t} gamma^(i - t) * (r_i - b_i)`.
pub fn discounted_returns(trajectory: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; trajectory.steps.len()];
    let mut acc = 0.0;
    for (g, step) in out.iter_mut().zip(&trajectory.steps).rev() {
        acc = step.reward - step.baseline + gamma * acc;
        *g = acc;
    }
    out
}

/// A path paired with per-step weights on its log-probabilities.
#[derive(Clone, Copy, Debug)]
pub struct WeightedPath<'a> {
    pub query: &'a [f64],
    pub path: &'a RoutingPath,
    pub weights: &'a [f64],
}

/// `scale * sum_paths sum_t w_t * log pi(a_t | s_t)` under `params`, without
/// gradients.
pub fn policy_objective(
    params: &AgentParams,
    x: &Array2<f64>,
    adj: &NormalizedAdjacency,
    paths: &[WeightedPath<'_>],
    scale: f64,
) -> Result<f64> {
    let (rows, _) = gcn_forward(x, adj, &params.gcn)?;
    let table = EmbeddingTable::new(rows, 0);
    let mut total = 0.0;
    for wp in paths {
        let e_q = embed_query(wp.query, &params.query)?;
        for (step, &w) in wp.path.steps.iter().zip(wp.weights) {
            let p = policy_probs(&step.candidates, &e_q, &table, params.temperature)?;
            total += w * p[step.chosen_index].ln();
        }
    }
    Ok(scale * total)
}

/// Value and gradient of [`policy_objective`], reusing the forward pass that
/// produced `table`.
pub fn policy_gradient(
    params: &AgentParams,
    adj: &NormalizedAdjacency,
    cache: &ForwardCache,
    table: &EmbeddingTable,
    paths: &[WeightedPath<'_>],
    scale: f64,
) -> Result<(f64, AgentParams)> {
    let mut d_table = Array2::zeros((table.len(), table.dim()));
    let mut d_query_w = match &params.query {
        QueryTransform::Linear(w) => Some(Array2::zeros(w.raw_dim())),
        QueryTransform::Identity => None,
    };
    let mut total = 0.0;
    let mut d_eq = vec![0.0; table.dim()];
    for wp in paths {
        let e_q = embed_query(wp.query, &params.query)?;
        d_eq.fill(0.0);
        for (step, &w) in wp.path.steps.iter().zip(wp.weights) {
            total += w * accumulate_log_prob_grad(
                table,
                &e_q,
                params.temperature,
                &step.candidates,
                step.chosen_index,
                w * scale,
                &mut d_table,
                &mut d_eq,
            )?;
        }
        if let Some(g) = d_query_w.as_mut() {
            query_transform_grad(&d_eq, wp.query, g);
        }
    }
    let gcn = gcn_backward(adj, &params.gcn, cache, &d_table);
    let query = match d_query_w {
        Some(g) => QueryTransform::Linear(g),
        None => QueryTransform::Identity,
    };
    Ok((
        scale * total,
        AgentParams {
            gcn,
            query,
            temperature: params.temperature,
        },
    ))
}

/// Adam, applied as gradient ascent.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &AgentParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(t, _)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn ascend(&mut self, params: &mut AgentParams, grads: &AgentParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let grads = grads.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].0;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] += lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate is multiplied by `decay_rate` every `decay_steps` batches
    /// (continuously).
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub batch_size: usize,
    pub batches: usize,
    /// Fraction of training queries allowed to use their ground truth.
    pub gt_fraction: f64,
    pub collect_ipc: usize,
    pub eval_ipc: usize,
    /// Validation interval in batches; 0 disables periodic validation.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_rate: 0.98,
            decay_steps: 1000,
            batch_size: 30,
            batches: 2000,
            gt_fraction: 0.0,
            collect_ipc: 64,
            eval_ipc: 64,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gt_fraction) {
            return Err(Error::Config("gt_fraction must be in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.decay_steps == 0 {
            return Err(Error::Config("batch size and decay steps must be positive".into()));
        }
        if self.collect_ipc == 0 {
            return Err(Error::Config("collection budget must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, batch: usize) -> f64 {
        self.learning_rate * self.decay_rate.powf(batch as f64 / self.decay_steps as f64)
    }
}

/// Held-out queries with their true top-1 items.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub queries: &'a QuerySet,
    pub truth: &'a GroundTruthTable,
    pub ipc: usize,
    /// Rank the visited set by raw inner product instead of embedded score.
    pub rerank: bool,
}

impl Validation<'_> {
    /// Recall 1@1 of agent beam search over queries that have ground truth.
    pub fn recall(
        &self,
        dataset: &Dataset,
        graph: &ProximityGraph,
        params: &AgentParams,
        table: &EmbeddingTable,
    ) -> Result<f64> {
        let entries: Vec<(&usize, &Vec<usize>)> = self.truth.entries().iter().collect();
        if entries.is_empty() {
            return Ok(0.0);
        }
        let hits = entries
            .par_iter()
            .map(|(&qi, truth)| {
                let q = self.queries.query(qi);
                let r = agent_search(dataset, graph, table, params, q, 1, self.ipc, self.rerank)?;
                Ok(usize::from(r.topk.first() == truth.first()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / entries.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub batch: usize,
    pub learning_rate: f64,
    pub mean_reward: f64,
    pub mean_path_len: f64,
    pub validation_recall: Option<f64>,
}

impl fmt::Display for TrainLogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "batch={} lr={} mean_reward={} mean_path_len={}",
            self.batch, self.learning_rate, self.mean_reward, self.mean_path_len
        )?;
        if let Some(r) = self.validation_recall {
            write!(f, " val_recall_1_1={r}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best parameters by validation recall, or the final ones without
    /// validation.
    pub params: AgentParams,
    pub best_batch: usize,
    pub best_recall: Option<f64>,
    pub log: Vec<TrainLogRecord>,
}

/// Picks which training queries may use their ground truth.
fn ground_truth_mask(gt: &GroundTruthTable, num_queries: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut available: Vec<usize> = gt.entries().keys().copied().filter(|&q| q < num_queries).collect();
    let wanted = (fraction * num_queries as f64).round() as usize;
    if wanted > available.len() {
        log::warn!(
            "gt_fraction {fraction} asks for {wanted} targets, only {} available",
            available.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6774_6d61_736b);
    available.shuffle(&mut rng);
    available.truncate(wanted);
    let mut mask = vec![false; num_queries];
    for q in available {
        mask[q] = true;
    }
    mask
}

fn slot_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains `init` on `queries` by REINFORCE.
///
/// Each batch draws `batch_size` queries with replacement, refreshes the
/// vertex embeddings, collects one path per query under `collect_ipc`, and
/// takes one Adam step on the batch-averaged objective. Results depend only
/// on the seeds, not on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn train(
    dataset: &Dataset,
    graph: &ProximityGraph,
    queries: &QuerySet,
    gt: &GroundTruthTable,
    init: AgentParams,
    cfg: &TrainConfig,
    reward: &RewardConfig,
    validation: Option<&Validation<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    reward.validate()?;
    if queries.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if dataset.len() != graph.len() {
        return Err(Error::Shape(format!(
            "dataset has {} items, graph {} nodes",
            dataset.len(),
            graph.len()
        )));
    }
    let x = dataset_matrix(dataset);
    let adj = NormalizedAdjacency::from_graph(graph);
    let mask = ground_truth_mask(gt, queries.len(), cfg.gt_fraction, cfg.seed);
    let mut targets: BTreeMap<usize, ShortestPathTable> = BTreeMap::new();
    for (qi, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let v = gt.get(qi).and_then(|e| e.first().copied()).ok_or(Error::EmptyTrainingSet)?;
        if let std::collections::btree_map::Entry::Vacant(e) = targets.entry(v) {
            e.insert(bfs_distances(graph, v)?);
        }
    }
    let target_of = |qi: usize| -> Option<&ShortestPathTable> {
        if !mask[qi] {
            return None;
        }
        gt.get(qi).and_then(|e| e.first()).and_then(|v| targets.get(v))
    };

    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut batch_rng = slot_rng(cfg.seed, 0);
    let mut log = Vec::new();
    let mut best = (params.clone(), 0usize, None::<f64>);

    let validate = |params: &AgentParams| -> Result<Option<f64>> {
        match validation {
            Some(v) => {
                let table = crate::agent::precompute_embeddings(dataset, graph, params)?;
                v.recall(dataset, graph, params, &table).map(Some)
            }
            None => Ok(None),
        }
    };
    if cfg.batches > 0 && cfg.eval_every > 0 {
        best.2 = validate(&params)?;
    }

    for batch in 0..cfg.batches {
        let lr = cfg.learning_rate_at(batch);
        let (rows, cache) = gcn_forward(&x, &adj, &params.gcn)?;
        let table = EmbeddingTable::new(rows, graph.checksum());
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.random_range(0..queries.len()))
            .collect();
        let base_stream = 1 + (batch * cfg.batch_size) as u64;
        let collected = picks
            .par_iter()
            .enumerate()
            .map(|(slot, &qi)| {
                let mut rng = slot_rng(cfg.seed, base_stream + slot as u64);
                let q = queries.query(qi);
                let policy = Policy::new(&table, embed_query(q, &params.query)?, params.temperature);
                let mut budget = IpcBudget::new(cfg.collect_ipc);
                let path = collect_path(&policy, graph, graph.entry_vertex(), &mut budget, &mut rng)?;
                let traj = build_trajectory(&path, dataset, q, target_of(qi), reward, &mut rng)?;
                let returns = discounted_returns(&traj, reward.gamma);
                Ok((qi, path, traj, returns))
            })
            .collect::<Result<Vec<_>>>()?;

        let weighted: Vec<WeightedPath<'_>> = collected
            .iter()
            .map(|(qi, path, _, returns)| WeightedPath {
                query: queries.query(*qi),
                path,
                weights: returns,
            })
            .collect();
        let (_, grads) =
            policy_gradient(&params, &adj, &cache, &table, &weighted, 1.0 / cfg.batch_size as f64)?;
        if !grads.all_finite() {
            let names = grads.tensor_names();
            let bad = grads
                .tensors()
                .iter()
                .zip(&names)
                .find(|((t, _), _)| t.iter().any(|v| !v.is_finite()))
                .map(|(_, n)| n.clone())
                .unwrap_or_default();
            return Err(Error::NonFiniteGradient {
                batch,
                detail: format!("tensor {bad}"),
            });
        }
        adam.ascend(&mut params, &grads, lr);

        let n = collected.len() as f64;
        let mut record = TrainLogRecord {
            batch: batch + 1,
            learning_rate: lr,
            mean_reward: collected.iter().map(|c| c.2.total_reward()).sum::<f64>() / n,
            mean_path_len: collected.iter().map(|c| c.1.len() as f64).sum::<f64>() / n,
            validation_recall: None,
        };
        let done = batch + 1;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.batches) {
            record.validation_recall = validate(&params)?;
            if let (Some(r), Some(b)) = (record.validation_recall, best.2) {
                if r > b {
                    best = (params.clone(), done, Some(r));
                }
            }
            log::info!("{record}");
        }
        log.push(record);
    }

    let (best_params, best_batch, best_recall) = best;
    if validation.is_some() && cfg.eval_every > 0 {
        Ok(TrainOutcome {
            params: best_params,
            best_batch,
            best_recall,
            log,
        })
    } else {
        Ok(TrainOutcome {
            params,
            best_batch: cfg.batches,
            best_recall: None,
            log,
        })
    }
}
