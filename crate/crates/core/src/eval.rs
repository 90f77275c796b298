//! Recall metrics, ground-truth generation and end-to-end experiment runs.
//!
//! Reports are UTF-8 text with one `key=value` record per line so that
//! repeated runs can be compared with `diff` and parsed back exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::agent::{precompute_embeddings, AgentConfig, AgentInit, AgentParams, QueryTransformKind};
use crate::error::{Error, Result};
use crate::io::{read_file, write_file};
use crate::proxgraph::{build_graph, GraphAlgo, GraphConfig, ProximityGraph, SimilarityKind};
use crate::search::{agent_search, raw_search, IpcBudget};
use crate::training::{train, RewardConfig, RewardMode, TrainConfig, TrainLogRecord, Validation};
use crate::vecstore::{
    brute_force_topk, load_dataset, load_queries, normalize, split_queries, Dataset, GroundTruthTable,
    GtKind, QuerySet, Split, VectorFormat, VectorRows,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallReport {
    pub m: usize,
    pub n: usize,
    pub value: f64,
    pub ipc: usize,
    pub num_queries: usize,
    /// Queries returned without a truth entry.
    pub skipped: usize,
}

/// Recall M@N: `sum_q |R(q) ∩ T(q)| / sum_q |T(q)|`, taking the first `m`
/// truth entries and the first `n` returned items of each query.
pub fn recall(
    returned: &BTreeMap<usize, Vec<usize>>,
    truth: &BTreeMap<usize, Vec<usize>>,
    m: usize,
    n: usize,
    ipc: usize,
) -> RecallReport {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for (q, r) in returned {
        let Some(t) = truth.get(q) else {
            skipped += 1;
            continue;
        };
        let t = &t[..m.min(t.len())];
        let r = &r[..n.min(r.len())];
        hits += t.iter().filter(|v| r.contains(v)).count();
        total += t.len();
        scored += 1;
    }
    if skipped > 0 {
        log::warn!("{skipped} returned queries have no ground truth");
    }
    RecallReport {
        m,
        n,
        value: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        ipc,
        num_queries: scored,
        skipped,
    }
}

#[derive(Clone, Copy, Debug)]
pub enum GtMode<'a> {
    Exact,
    /// Raw-scorer beam search on `graph` under `budget` IPC.
    Approximate { graph: &'a ProximityGraph, budget: usize },
}

/// Ground truth for a seeded `fraction` of `queries`.
pub fn make_ground_truth(
    dataset: &Dataset,
    queries: &QuerySet,
    k: usize,
    mode: GtMode<'_>,
    fraction: f64,
    seed: u64,
) -> Result<GroundTruthTable> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if k == 0 || k > dataset.len() {
        return Err(Error::KTooLarge { k, n: dataset.len() });
    }
    let mut ids: Vec<usize> = (0..queries.len()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate((fraction * queries.len() as f64).round() as usize);
    ids.sort_unstable();
    let lists = ids
        .par_iter()
        .map(|&qi| {
            let q = queries.query(qi);
            let list = match mode {
                GtMode::Exact => brute_force_topk(dataset, q, k)?,
                GtMode::Approximate { graph, budget } => {
                    let r = raw_search(dataset, graph, q, k, budget)?;
                    if r.topk.len() < k {
                        return Err(Error::Config(format!(
                            "budget {budget} visits only {} items, fewer than k = {k}",
                            r.topk.len()
                        )));
                    }
                    r.topk
                }
            };
            Ok((qi, list))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let kind = match mode {
        GtMode::Exact => GtKind::Exact,
        GtMode::Approximate { .. } => GtKind::Approximate,
    };
    GroundTruthTable::new(lists, kind, queries.len(), k, dataset.len())
}

/// Gaussian items and queries with `N(0, 1/d)` coordinates.
pub fn synthetic(n: usize, num_queries: usize, dim: usize, seed: u64) -> Result<(Dataset, QuerySet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid deviation");
    let mut draw = |count: usize| -> Vec<f64> { (0..count * dim).map(|_| normal.sample(&mut rng)).collect() };
    let items = VectorRows::from_flat(draw(n), dim)?;
    let queries = VectorRows::from_flat(draw(num_queries), dim)?;
    Ok((Dataset::new(items), QuerySet::new(queries, Split::All)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    Raw,
    Agent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GtChoice {
    Exact,
    Approximate,
    None,
}

/// Where vectors come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Files { data: PathBuf, queries: PathBuf },
    Synthetic { n: usize, queries: usize, dim: usize, seed: u64 },
}

/// Flat experiment description, parsed from `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub normalize: bool,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub algo: GraphAlgo,
    pub graph: GraphConfig,
    /// Prebuilt graph to load instead of building.
    pub graph_file: Option<PathBuf>,
    pub scorer: ScorerKind,
    /// Rank agent results by raw inner product over the visited set.
    pub rerank_raw: bool,
    pub budgets: Vec<usize>,
    /// `(M, N)` pairs.
    pub metrics: Vec<(usize, usize)>,
    pub gt: GtChoice,
    pub gt_fraction: f64,
    pub gt_budget: usize,
    pub gt_seed: u64,
    pub agent_file: Option<PathBuf>,
    pub agent_init: AgentInit,
    pub agent_seed: u64,
    pub query_transform: QueryTransformKind,
    pub embed_dim: Option<usize>,
    pub temperature: f64,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub throughput: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                n: 1000,
                queries: 400,
                dim: 16,
                seed: 0,
            },
            normalize: true,
            split: [0.5, 0.25, 0.25],
            split_seed: 0,
            algo: GraphAlgo::IpNsw,
            graph: GraphConfig::new(8, 32, SimilarityKind::InnerProduct),
            graph_file: None,
            scorer: ScorerKind::Raw,
            rerank_raw: false,
            budgets: vec![32, 64, 128],
            metrics: vec![(1, 1), (10, 10)],
            gt: GtChoice::Exact,
            gt_fraction: 0.3,
            gt_budget: 256,
            gt_seed: 0,
            agent_file: None,
            agent_init: AgentInit::Uniform,
            agent_seed: 0,
            query_transform: QueryTransformKind::Identity,
            embed_dim: None,
            temperature: 0.15,
            reward: RewardConfig::new(0.7, 0.9, 4),
            train: TrainConfig::default(),
            throughput: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value}"))),
    }
}

/// Parses `"1@1"` into `(1, 1)`.
pub fn parse_metric(s: &str) -> Result<(usize, usize)> {
    let (m, n) = s
        .split_once('@')
        .ok_or_else(|| Error::Config(format!("metric {s}: expected M@N")))?;
    let m: usize = parse_value("metric", m.trim())?;
    let n: usize = parse_value("metric", n.trim())?;
    if m == 0 || n == 0 {
        return Err(Error::Config(format!("metric {s}: M and N must be positive")));
    }
    Ok((m, n))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting. Paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = |v: &str| base.join(v);
        match key {
            "data" | "queries" => {
                let (mut data, mut queries) = match &self.source {
                    DataSource::Files { data, queries } => (data.clone(), queries.clone()),
                    DataSource::Synthetic { .. } => (PathBuf::new(), PathBuf::new()),
                };
                if key == "data" {
                    data = path(value);
                } else {
                    queries = path(value);
                }
                self.source = DataSource::Files { data, queries };
            }
            "synthetic" => {
                let v: Vec<u64> = parse_list(key, value)?;
                let [n, queries, dim, seed] = v[..] else {
                    return Err(Error::Config("synthetic = n,queries,dim,seed".into()));
                };
                self.source = DataSource::Synthetic {
                    n: n as usize,
                    queries: queries as usize,
                    dim: dim as usize,
                    seed,
                };
            }
            "normalize" => self.normalize = parse_bool(key, value)?,
            "split" => {
                let v: Vec<f64> = parse_list(key, value)?;
                self.split = v
                    .try_into()
                    .map_err(|_| Error::Config("split = train,validation,test".into()))?;
            }
            "split_seed" => self.split_seed = parse_value(key, value)?,
            "algo" => self.algo = parse_value(key, value)?,
            "max_degree" => self.graph.max_degree = parse_value(key, value)?,
            "candidate_size" => self.graph.candidate_size = parse_value(key, value)?,
            "similarity" => self.graph.similarity = parse_value(key, value)?,
            "graph_seed" => self.graph.seed = parse_value(key, value)?,
            "graph_file" => self.graph_file = Some(path(value)),
            "scorer" => {
                self.scorer = match value {
                    "raw" => ScorerKind::Raw,
                    "agent" => ScorerKind::Agent,
                    _ => return Err(Error::Config(format!("scorer: raw or agent, got {value}"))),
                }
            }
            "budgets" => self.budgets = parse_list(key, value)?,
            "metrics" => {
                self.metrics = value
                    .split(',')
                    .map(|m| parse_metric(m.trim()))
                    .collect::<Result<_>>()?
            }
            "gt" => {
                self.gt = match value {
                    "exact" => GtChoice::Exact,
                    "approximate" => GtChoice::Approximate,
                    "none" => GtChoice::None,
                    _ => return Err(Error::Config(format!("gt: exact, approximate or none, got {value}"))),
                }
            }
            "gt_fraction" => self.gt_fraction = parse_value(key, value)?,
            "gt_budget" => self.gt_budget = parse_value(key, value)?,
            "gt_seed" => self.gt_seed = parse_value(key, value)?,
            "agent_file" => self.agent_file = Some(path(value)),
            "agent_init" => {
                self.agent_init = match value {
                    "uniform" => AgentInit::Uniform,
                    "anchored" => AgentInit::Anchored,
                    _ => return Err(Error::Config(format!("agent_init: uniform or anchored, got {value}"))),
                }
            }
            "agent_seed" => self.agent_seed = parse_value(key, value)?,
            "query_transform" => {
                self.query_transform = match value {
                    "identity" => QueryTransformKind::Identity,
                    "linear" => QueryTransformKind::Linear,
                    _ => return Err(Error::Config(format!("query_transform: identity or linear, got {value}"))),
                }
            }
            "embed_dim" => self.embed_dim = Some(parse_value(key, value)?),
            "tau" => self.temperature = parse_value(key, value)?,
            "alpha" => self.reward.alpha = parse_value(key, value)?,
            "gamma" => self.reward.gamma = parse_value(key, value)?,
            "baseline_samples" => self.reward.baseline_samples = parse_value(key, value)?,
            "reward" => {
                self.reward.mode = match value {
                    "full" => RewardMode::Full,
                    "shaping" => RewardMode::ShapingOnly,
                    _ => return Err(Error::Config(format!("reward: full or shaping, got {value}"))),
                }
            }
            "learning_rate" => self.train.learning_rate = parse_value(key, value)?,
            "decay_rate" => self.train.decay_rate = parse_value(key, value)?,
            "decay_steps" => self.train.decay_steps = parse_value(key, value)?,
            "batch_size" => self.train.batch_size = parse_value(key, value)?,
            "batches" => self.train.batches = parse_value(key, value)?,
            "train_gt_fraction" => self.train.gt_fraction = parse_value(key, value)?,
            "collect_ipc" => self.train.collect_ipc = parse_value(key, value)?,
            "eval_ipc" => self.train.eval_ipc = parse_value(key, value)?,
            "eval_every" => self.train.eval_every = parse_value(key, value)?,
            "train_seed" => self.train.seed = parse_value(key, value)?,
            "throughput" => self.throughput = parse_bool(key, value)?,
            "rerank_raw" => self.rerank_raw = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Parses a config file body. Everything after `#` is a comment; blank
    /// lines are ignored.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim(), base)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.reward.validate()?;
        if self.budgets.is_empty() || self.metrics.is_empty() {
            return Err(Error::Config("budgets and metrics must be nonempty".into()));
        }
        if self.scorer == ScorerKind::Agent && self.agent_file.is_none() {
            self.train.validate()?;
        }
        Ok(())
    }
}

/// One `(budget, metric)` result.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportLine {
    pub budget: usize,
    pub m: usize,
    pub n: usize,
    pub recall: f64,
    pub mean_ipc: f64,
    pub queries: usize,
}

impl fmt::Display for ReportLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "budget={} metric=recall_{}@{} value={} mean_ipc={} queries={}",
            self.budget, self.m, self.n, self.recall, self.mean_ipc, self.queries
        )
    }
}

impl FromStr for ReportLine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let fields: BTreeMap<&str, &str> = s
            .split_whitespace()
            .map(|kv| kv.split_once('=').ok_or_else(|| Error::Config(format!("bad field {kv}"))))
            .collect::<Result<_>>()?;
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("report line missing {k}")))
        };
        let metric = get("metric")?;
        let (m, n) = parse_metric(
            metric
                .strip_prefix("recall_")
                .ok_or_else(|| Error::Config(format!("bad metric {metric}")))?,
        )?;
        Ok(Self {
            budget: parse_value("budget", get("budget")?)?,
            m,
            n,
            recall: parse_value("value", get("value")?)?,
            mean_ipc: parse_value("mean_ipc", get("mean_ipc")?)?,
            queries: parse_value("queries", get("queries")?)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub lines: Vec<ReportLine>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl FromStr for Report {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lines = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        Ok(Self { lines })
    }
}

impl Report {
    pub fn get(&self, budget: usize, m: usize, n: usize) -> Option<f64> {
        self.lines
            .iter()
            .find(|l| l.budget == budget && l.m == m && l.n == n)
            .map(|l| l.recall)
    }
}

/// Queries-per-second at one budget, measured after a warm-up pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub budget: usize,
    pub queries_per_second: f64,
    pub threads: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: Report,
    pub summary: String,
    pub train_log: Vec<TrainLogRecord>,
    pub throughput: Vec<Throughput>,
    pub agent: Option<AgentParams>,
}

/// Prepared inputs shared by the evaluation loop.
struct Prepared {
    dataset: Dataset,
    train: QuerySet,
    validation: QuerySet,
    test: QuerySet,
    graph: ProximityGraph,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (dataset, queries) = match &cfg.source {
        DataSource::Files { data, queries } => {
            let ds = load_dataset(data, VectorFormat::guess(data))?;
            let qs = load_queries(queries, VectorFormat::guess(queries), Split::All)?;
            (ds, qs)
        }
        DataSource::Synthetic { n, queries, dim, seed } => synthetic(*n, *queries, *dim, *seed)?,
    };
    let (dataset, queries) = if cfg.normalize {
        normalize(&dataset, &queries)?
    } else {
        (dataset, queries)
    };
    let split = split_queries(&queries, cfg.split, cfg.split_seed)?;
    let graph = match &cfg.graph_file {
        Some(p) => ProximityGraph::load(p)?,
        None => build_graph(cfg.algo, &dataset, cfg.graph).map_err(|e| e.in_stage("build"))?,
    };
    if graph.len() != dataset.len() {
        return Err(Error::Shape(format!(
            "graph has {} nodes, dataset {} items",
            graph.len(),
            dataset.len()
        )));
    }
    Ok(Prepared {
        dataset,
        train: split.train,
        validation: split.validation,
        test: split.test,
        graph,
    })
}

/// Agent for an experiment: loaded from file, or initialized and trained.
fn obtain_agent(cfg: &ExperimentConfig, p: &Prepared) -> Result<(AgentParams, Vec<TrainLogRecord>)> {
    if let Some(path) = &cfg.agent_file {
        return Ok((AgentParams::load(path).map_err(|e| e.in_stage("load agent"))?, Vec::new()));
    }
    let dim = p.dataset.dim();
    let agent_cfg = AgentConfig {
        input_dim: dim,
        hidden_dim: cfg.embed_dim.unwrap_or(dim),
        output_dim: cfg.embed_dim.unwrap_or(dim),
        blocks: 3,
        temperature: cfg.temperature,
        query: cfg.query_transform,
        init: cfg.agent_init,
    };
    let init = AgentParams::init(&agent_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.agent_seed))?;
    let gt = match cfg.gt {
        GtChoice::None => GroundTruthTable::new(BTreeMap::new(), GtKind::Exact, p.train.len(), 1, p.dataset.len())?,
        GtChoice::Exact | GtChoice::Approximate if p.train.is_empty() => {
            return Err(Error::EmptyTrainingSet.in_stage("gt"))
        }
        GtChoice::Exact => make_ground_truth(&p.dataset, &p.train, 1, GtMode::Exact, cfg.gt_fraction, cfg.gt_seed)
            .map_err(|e| e.in_stage("gt"))?,
        GtChoice::Approximate => make_ground_truth(
            &p.dataset,
            &p.train,
            1,
            GtMode::Approximate {
                graph: &p.graph,
                budget: cfg.gt_budget,
            },
            cfg.gt_fraction,
            cfg.gt_seed,
        )
        .map_err(|e| e.in_stage("gt"))?,
    };
    let mut train_cfg = cfg.train.clone();
    if cfg.gt != GtChoice::None && train_cfg.gt_fraction == 0.0 {
        train_cfg.gt_fraction = cfg.gt_fraction;
    }
    let val_truth = if p.validation.is_empty() {
        None
    } else {
        Some(make_ground_truth(&p.dataset, &p.validation, 1, GtMode::Exact, 1.0, 0)?)
    };
    let validation = val_truth.as_ref().map(|truth| Validation {
        queries: &p.validation,
        truth,
        ipc: train_cfg.eval_ipc,
        rerank: cfg.rerank_raw,
    });
    let outcome = train(
        &p.dataset,
        &p.graph,
        &p.train,
        &gt,
        init,
        &train_cfg,
        &cfg.reward,
        validation.as_ref(),
    )
    .map_err(|e| e.in_stage("train"))?;
    Ok((outcome.params, outcome.log))
}

/// Evaluates one budget over all test queries, returning per-query top lists
/// and the mean IPC spent.
fn evaluate_budget(
    p: &Prepared,
    agent: Option<(&AgentParams, &crate::agent::EmbeddingTable)>,
    k: usize,
    budget: usize,
    rerank: bool,
) -> Result<(BTreeMap<usize, Vec<usize>>, f64)> {
    let results = (0..p.test.len())
        .into_par_iter()
        .map(|qi| {
            let q = p.test.query(qi);
            let r = match agent {
                Some((params, table)) => agent_search(&p.dataset, &p.graph, table, params, q, k, budget, rerank)?,
                None => raw_search(&p.dataset, &p.graph, q, k, budget)?,
            };
            Ok((qi, r.topk, r.ipc_used))
        })
        .collect::<Result<Vec<_>>>()?;
    let ipc: usize = results.iter().map(|r| r.2).sum();
    let mean = if results.is_empty() { 0.0 } else { ipc as f64 / results.len() as f64 };
    Ok((results.into_iter().map(|(q, t, _)| (q, t)).collect(), mean))
}

/// Runs the full pipeline described by `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let p = prepare(cfg).map_err(|e| e.in_stage("prepare"))?;
    let (agent, train_log) = match cfg.scorer {
        ScorerKind::Raw => (None, Vec::new()),
        ScorerKind::Agent => {
            let (a, log) = obtain_agent(cfg, &p)?;
            (Some(a), log)
        }
    };
    let table = agent
        .as_ref()
        .map(|a| precompute_embeddings(&p.dataset, &p.graph, a))
        .transpose()
        .map_err(|e| e.in_stage("embed"))?;
    let agent_ref = agent.as_ref().zip(table.as_ref());

    let max_m = cfg.metrics.iter().map(|m| m.0).max().unwrap_or(1);
    let max_n = cfg.metrics.iter().map(|m| m.1).max().unwrap_or(1);
    let truth_table = make_ground_truth(&p.dataset, &p.test, max_m.min(p.dataset.len()), GtMode::Exact, 1.0, 0)
        .map_err(|e| e.in_stage("truth"))?;
    let truth = truth_table.entries().clone();

    let mut report = Report::default();
    let mut throughput = Vec::new();
    for &budget in &cfg.budgets {
        let (returned, mean_ipc) =
            evaluate_budget(&p, agent_ref, max_n, budget, cfg.rerank_raw).map_err(|e| e.in_stage("search"))?;
        for &(m, n) in &cfg.metrics {
            let r = recall(&returned, &truth, m, n, budget);
            report.lines.push(ReportLine {
                budget,
                m,
                n,
                recall: r.value,
                mean_ipc,
                queries: r.num_queries,
            });
        }
        if cfg.throughput && !p.test.is_empty() {
            let start = Instant::now();
            evaluate_budget(&p, agent_ref, max_n, budget, cfg.rerank_raw)?;
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            throughput.push(Throughput {
                budget,
                queries_per_second: p.test.len() as f64 / secs,
                threads: rayon::current_num_threads(),
            });
        }
    }

    let mut summary = String::new();
    summary.push_str(&format!(
        "items: {}  dim: {}  queries: {} train / {} validation / {} test\n",
        p.dataset.len(),
        p.dataset.dim(),
        p.train.len(),
        p.validation.len(),
        p.test.len()
    ));
    summary.push_str(&format!(
        "graph: {} nodes, {} edges, max out-degree {}, checksum {:016x}\n",
        p.graph.len(),
        p.graph.num_edges(),
        p.graph.max_out_degree(),
        p.graph.checksum()
    ));
    summary.push_str(&format!(
        "scorer: {}\n",
        match cfg.scorer {
            ScorerKind::Raw => "raw",
            ScorerKind::Agent => "agent",
        }
    ));
    for line in &report.lines {
        summary.push_str(&format!(
            "IPC {:>6}  Recall {}@{} = {:.4}  (mean IPC used {:.1})\n",
            line.budget, line.m, line.n, line.recall, line.mean_ipc
        ));
    }
    Ok(ExperimentOutcome {
        report,
        summary,
        train_log,
        throughput,
        agent,
    })
}

/// Writes `report.txt`, `summary.txt`, and when present `train_log.txt`,
/// `agent.bin` and `throughput.txt` into `dir`.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.txt"), outcome.report.to_string().as_bytes())?;
    write_file(&dir.join("summary.txt"), outcome.summary.as_bytes())?;
    if !outcome.train_log.is_empty() {
        let text: String = outcome.train_log.iter().map(|r| format!("{r}\n")).collect();
        write_file(&dir.join("train_log.txt"), text.as_bytes())?;
    }
    if let Some(agent) = &outcome.agent {
        agent.save(&dir.join("agent.bin"))?;
    }
    if !outcome.throughput.is_empty() {
        let text: String = outcome
            .throughput
            .iter()
            .map(|t| format!("budget={} qps={} threads={}\n", t.budget, t.queries_per_second, t.threads))
            .collect();
        write_file(&dir.join("throughput.txt"), text.as_bytes())?;
    }
    Ok(())
}

/// Mean recall per `(value, budget, M, N)` over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub budget: usize,
    pub m: usize,
    pub n: usize,
    pub mean_recall: f64,
    pub per_seed: Vec<f64>,
}

impl fmt::Display for SweepPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seeds: Vec<String> = self.per_seed.iter().map(f64::to_string).collect();
        write!(
            f,
            "value={} budget={} metric=recall_{}@{} mean={} seeds={}",
            self.value,
            self.budget,
            self.m,
            self.n,
            self.mean_recall,
            seeds.join(",")
        )
    }
}

/// Runs `base` once per `(value, seed)`, with `key` set to each value and the
/// seed applied to the agent, training and ground-truth streams.
pub fn run_sweep(base: &ExperimentConfig, key: &str, values: &[String], seeds: &[u64]) -> Result<Vec<SweepPoint>> {
    let mut points: Vec<SweepPoint> = Vec::new();
    for value in values {
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.set(key, value, Path::new("."))?;
            cfg.agent_seed = seed;
            cfg.train.seed = seed;
            cfg.gt_seed = seed;
            let out = run_experiment(&cfg).map_err(|e| e.in_stage("sweep"))?;
            runs.push(out.report);
        }
        for line in &runs[0].lines {
            let per_seed: Vec<f64> = runs
                .iter()
                .map(|r| r.get(line.budget, line.m, line.n).unwrap_or(0.0))
                .collect();
            points.push(SweepPoint {
                value: value.clone(),
                budget: line.budget,
                m: line.m,
                n: line.n,
                mean_recall: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                per_seed,
            });
        }
    }
    Ok(points)
}

/// Raw-scorer recall with an unlimited budget, used as a sanity reference.
pub fn exhaustive_recall(dataset: &Dataset, graph: &ProximityGraph, queries: &QuerySet, k: usize) -> Result<f64> {
    let mut returned = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for qi in 0..queries.len() {
        let q = queries.query(qi);
        let r = raw_search(dataset, graph, q, k, IpcBudget::unlimited().limit())?;
        returned.insert(qi, r.topk);
        truth.insert(qi, brute_force_topk(dataset, q, k)?);
    }
    Ok(recall(&returned, &truth, k, k, usize::MAX).value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(entries: &[(usize, &[usize])]) -> BTreeMap<usize, Vec<usize>> {
        entries.iter().map(|(q, l)| (*q, l.to_vec())).collect()
    }

    #[test]
    fn recall_examples() {
        let t = map(&[(0, &[1, 2, 3])]);
        let r = map(&[(0, &[2, 3, 4])]);
        assert!((recall(&r, &t, 3, 3, 0).value - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall(&t, &t, 3, 3, 0).value, 1.0);
        let disjoint = map(&[(0, &[7, 8, 9])]);
        assert_eq!(recall(&disjoint, &t, 3, 3, 0).value, 0.0);
        let extra = map(&[(0, &[1, 2, 3]), (5, &[1])]);
        let rep = recall(&extra, &t, 3, 3, 0);
        assert_eq!((rep.value, rep.skipped, rep.num_queries), (1.0, 1, 1));
    }

    proptest! {
        #[test]
        fn recall_bounded_and_permutation_invariant(
            t in proptest::collection::vec(0usize..50, 1..10),
            r in proptest::collection::vec(0usize..50, 1..10),
        ) {
            let mut t = t; t.sort_unstable(); t.dedup();
            let mut r = r; r.sort_unstable(); r.dedup();
            let m = t.len();
            let n = r.len();
            let a = recall(&map(&[(0, &r)]), &map(&[(0, &t)]), m, n, 0).value;
            prop_assert!((0.0..=1.0).contains(&a));
            let mut tr = t.clone(); tr.reverse();
            let mut rr = r.clone(); rr.reverse();
            let b = recall(&map(&[(0, &rr)]), &map(&[(0, &tr)]), m, n, 0).value;
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn complete_graph_unlimited_matches_oracle() {
        let (ds, qs) = synthetic(64, 20, 8, 1).unwrap();
        let g = ProximityGraph::complete(64, SimilarityKind::InnerProduct).unwrap();
        for k in [1, 10] {
            assert_eq!(exhaustive_recall(&ds, &g, &qs, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn ground_truth_modes() {
        let (ds, qs) = synthetic(64, 40, 8, 2).unwrap();
        let exact = make_ground_truth(&ds, &qs, 5, GtMode::Exact, 1.0, 3).unwrap();
        assert_eq!(exact.entries().len(), 40);
        for (q, list) in exact.entries() {
            assert_eq!(list, &brute_force_topk(&ds, qs.query(*q), 5).unwrap());
        }
        let g = ProximityGraph::complete(64, SimilarityKind::InnerProduct).unwrap();
        let approx = make_ground_truth(
            &ds,
            &qs,
            5,
            GtMode::Approximate {
                graph: &g,
                budget: usize::MAX,
            },
            1.0,
            3,
        )
        .unwrap();
        assert_eq!(approx.entries(), exact.entries());
        assert_eq!(approx.kind(), GtKind::Approximate);

        let g = crate::proxgraph::build_ipnsw(&ds, GraphConfig::new(4, 8, SimilarityKind::InnerProduct)).unwrap();
        let partial = make_ground_truth(&ds, &qs, 2, GtMode::Approximate { graph: &g, budget: 20 }, 0.3, 3).unwrap();
        assert_eq!(partial.entries().len(), 12);
        assert!((partial.coverage() - 0.3).abs() < 1.0 / 40.0);
        assert!(partial.entries().values().flatten().all(|&v| v < 64));
        assert!(make_ground_truth(&ds, &qs, 2, GtMode::Exact, 0.0, 3).is_err());
    }

    #[test]
    fn report_round_trip() {
        let report = Report {
            lines: vec![
                ReportLine {
                    budget: 64,
                    m: 1,
                    n: 1,
                    recall: 0.1 + 0.2,
                    mean_ipc: 63.999999999,
                    queries: 100,
                },
                ReportLine {
                    budget: 128,
                    m: 10,
                    n: 10,
                    recall: 2.0 / 3.0,
                    mean_ipc: 128.0,
                    queries: 7,
                },
            ],
        };
        let back: Report = report.to_string().parse().unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn config_parsing() {
        let text = "# comment\nsynthetic = 200,40,8,5\nalgo = ipdg   # directed\nbudgets = 16, 32\nmetrics = 1@1,10@10\nscorer = agent\nbatches = 3\nreward = shaping\n";
        let cfg = ExperimentConfig::parse(text, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.algo, GraphAlgo::Ipdg);
        assert_eq!(cfg.budgets, vec![16, 32]);
        assert_eq!(cfg.metrics, vec![(1, 1), (10, 10)]);
        assert_eq!(cfg.train.batches, 3);
        assert_eq!(cfg.reward.mode, RewardMode::ShapingOnly);
        assert!(ExperimentConfig::parse("nonsense = 1", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("budgets 1", Path::new(".")).is_err());
    }

    #[test]
    fn raw_experiment_is_deterministic() {
        let mut cfg = ExperimentConfig::default();
        cfg.source = DataSource::Synthetic {
            n: 300,
            queries: 60,
            dim: 8,
            seed: 4,
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.report.to_string(), b.report.to_string());
        assert_eq!(a.report.lines.len(), 6);
        for w in [32, 64, 128].windows(2) {
            assert!(a.report.get(w[0], 10, 10).unwrap() <= a.report.get(w[1], 10, 10).unwrap());
        }
    }

    #[test]
    fn stage_labels_propagate() {
        let mut cfg = ExperimentConfig::default();
        cfg.source = DataSource::Files {
            data: PathBuf::from("/nonexistent/data.bin"),
            queries: PathBuf::from("/nonexistent/q.bin"),
        };
        let err = run_experiment(&cfg).unwrap_err().to_string();
        assert!(err.starts_with("prepare:"), "{err}");
    }
}
