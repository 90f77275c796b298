//! `mipsroute`: build proximity graphs, train routing agents and evaluate
//! maximum inner product search from the command line.
//!
//! Set `MIPSROUTE_THREADS` to fix the worker count; outputs do not depend on it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mipsroute::agent::{precompute_embeddings, AgentConfig, AgentInit, AgentParams, QueryTransformKind};
use mipsroute::eval::{make_ground_truth, recall, run_experiment, run_sweep, synthetic, write_outcome, ExperimentConfig, GtMode};
use mipsroute::proxgraph::{build_graph, GraphAlgo, GraphConfig, ProximityGraph, SimilarityKind};
use mipsroute::search::{agent_search, raw_search};
use mipsroute::training::{train, RewardConfig, RewardMode, TrainConfig, Validation};
use mipsroute::vecstore::{
    load_dataset, load_queries, normalize, save_vectors, split_queries, GroundTruthTable, GtKind, QuerySet, Split,
    VectorFormat,
};

const THREADS_ENV: &str = "MIPSROUTE_THREADS";

#[derive(Parser)]
#[command(name = "mipsroute", version, about = "Learned routing for maximum inner product search")]
struct Cli {
    /// Seed for every random choice the command makes (default 0). For
    /// `eval` and `sweep` it overrides the seeds in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GtModeArg {
    Exact,
    Approximate,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Uniform,
    Anchored,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Full,
    Shaping,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScorerArg {
    Raw,
    Agent,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryArg {
    Identity,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate vectors, normalize, and split queries.
    Ingest {
        #[arg(long, required_unless_present = "synthetic")]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "synthetic")]
        queries: Option<PathBuf>,
        /// Generate Gaussian data instead: `items,queries,dim`.
        #[arg(long, value_delimiter = ',')]
        synthetic: Option<Vec<usize>>,
        /// Skip mean-norm item scaling and query unit-normalization.
        #[arg(long)]
        no_normalize: bool,
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.25, 0.25])]
        split: Vec<f64>,
        /// Output directory for items.bin, train.bin, validation.bin, test.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a proximity graph.
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ipnsw")]
        algo: GraphAlgo,
        #[arg(long, default_value = "ip")]
        sim: SimilarityKind,
        /// Maximum out-degree.
        #[arg(long = "M", default_value_t = 16)]
        max_degree: usize,
        /// Candidate list size during insertion.
        #[arg(long = "N", default_value_t = 64)]
        candidate_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute ground-truth top-k lists.
    Gt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_enum, default_value_t = GtModeArg::Exact)]
        mode: GtModeArg,
        /// Graph for approximate mode.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// IPC budget for approximate mode.
        #[arg(long, default_value_t = 256)]
        budget: usize,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a routing agent.
    Train {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        gt_fraction: f64,
        /// Validation queries; best checkpoint by Recall 1@1 is kept.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7)]
        alpha: f64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 0.15)]
        tau: f64,
        /// Baseline samples per step.
        #[arg(long, default_value_t = 4)]
        b: usize,
        /// Collection budget.
        #[arg(long, default_value_t = 64)]
        ipc: usize,
        #[arg(long, default_value_t = 64)]
        eval_ipc: usize,
        #[arg(long, default_value_t = 250)]
        eval_every: usize,
        /// Validate with raw re-ranking of the visited set.
        #[arg(long)]
        rerank_raw: bool,
        #[arg(long, default_value_t = 2000)]
        batches: usize,
        #[arg(long, default_value_t = 30)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = InitArg::Uniform)]
        init: InitArg,
        #[arg(long, value_enum, default_value_t = RewardArg::Full)]
        reward: RewardArg,
        #[arg(long, value_enum, default_value_t = QueryArg::Identity)]
        query_transform: QueryArg,
        /// Embedding width d' (defaults to the data dimension).
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Training log, one record per line.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Answer queries with beam search.
    Search {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 256)]
        ipc: usize,
        #[arg(long, value_enum, default_value_t = ScorerArg::Raw)]
        scorer: ScorerArg,
        /// Trained agent checkpoint, required for the agent scorer.
        #[arg(long, required_if_eq("scorer", "agent"))]
        agent_file: Option<PathBuf>,
        /// Rank agent results by raw inner product over the visited set.
        #[arg(long)]
        rerank_raw: bool,
        /// Ground truth for the queries; adds a recall line.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment described by a key = value config file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat an experiment over values of one config key and several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a number"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn queries_from(path: &Path, split: Split) -> Result<QuerySet> {
    Ok(load_queries(path, VectorFormat::guess(path), split)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads()?;
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Ingest {
            data,
            queries,
            synthetic: synth,
            no_normalize,
            split,
            out,
        } => {
            if split.len() != 3 {
                bail!("--split takes three comma-separated fractions");
            }
            let (ds, qs) = match (synth, data, queries) {
                (Some(s), _, _) if s.len() != 3 => bail!("--synthetic takes items,queries,dim"),
                (Some(s), _, _) => synthetic(s[0], s[1], s[2], seed)?,
                (None, Some(d), Some(q)) => (
                    load_dataset(&d, VectorFormat::guess(&d))?,
                    queries_from(&q, Split::All)?,
                ),
                _ => bail!("either --synthetic or both --data and --queries are required"),
            };
            let (ds, qs) = if no_normalize { (ds, qs) } else { normalize(&ds, &qs)? };
            let parts = split_queries(&qs, [split[0], split[1], split[2]], seed)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_vectors(&out.join("items.bin"), ds.items())?;
            for (name, part) in [
                ("train", &parts.train),
                ("validation", &parts.validation),
                ("test", &parts.test),
            ] {
                if !part.is_empty() {
                    save_vectors(&out.join(format!("{name}.bin")), part.rows())?;
                }
            }
            println!(
                "{} items (dim {}), queries {} / {} / {}",
                ds.len(),
                ds.dim(),
                parts.train.len(),
                parts.validation.len(),
                parts.test.len()
            );
        }
        Command::Build {
            data,
            algo,
            sim,
            max_degree,
            candidate_size,
            out,
        } => {
            let ds = load_dataset(&data, VectorFormat::guess(&data))?;
            let cfg = GraphConfig::new(max_degree, candidate_size, sim).with_seed(seed);
            let g = build_graph(algo, &ds, cfg)?;
            g.save(&out)?;
            println!(
                "{algo}: {} nodes, {} edges, max out-degree {}",
                g.len(),
                g.num_edges(),
                g.max_out_degree()
            );
        }
        Command::Gt {
            data,
            queries,
            k,
            mode,
            graph,
            budget,
            fraction,
            out,
        } => {
            let ds = load_dataset(&data, VectorFormat::guess(&data))?;
            let qs = queries_from(&queries, Split::All)?;
            let loaded = graph.as_deref().map(ProximityGraph::load).transpose()?;
            let mode = match (mode, loaded.as_ref()) {
                (GtModeArg::Exact, _) => GtMode::Exact,
                (GtModeArg::Approximate, Some(g)) => GtMode::Approximate { graph: g, budget },
                (GtModeArg::Approximate, None) => bail!("approximate ground truth needs --graph"),
            };
            let gt = make_ground_truth(&ds, &qs, k, mode, fraction, seed)?;
            gt.save(&out)?;
            println!("{} of {} queries covered", gt.entries().len(), qs.len());
        }
        Command::Train {
            graph,
            data,
            queries,
            gt,
            gt_fraction,
            validation,
            alpha,
            gamma,
            tau,
            b,
            ipc,
            eval_ipc,
            eval_every,
            rerank_raw,
            batches,
            batch_size,
            lr,
            init,
            reward,
            query_transform,
            embed_dim,
            out,
            log,
        } => {
            let ds = load_dataset(&data, VectorFormat::guess(&data))?;
            let g = ProximityGraph::load(&graph)?;
            let qs = queries_from(&queries, Split::Train)?;
            let gt = match gt {
                Some(p) => GroundTruthTable::load(&p, qs.len(), ds.len())?,
                None => GroundTruthTable::new(BTreeMap::new(), GtKind::Exact, qs.len(), 1, ds.len())?,
            };
            let agent_cfg = AgentConfig {
                input_dim: ds.dim(),
                hidden_dim: embed_dim.unwrap_or(ds.dim()),
                output_dim: embed_dim.unwrap_or(ds.dim()),
                blocks: 3,
                temperature: tau,
                query: match query_transform {
                    QueryArg::Identity => QueryTransformKind::Identity,
                    QueryArg::Linear => QueryTransformKind::Linear,
                },
                init: match init {
                    InitArg::Uniform => AgentInit::Uniform,
                    InitArg::Anchored => AgentInit::Anchored,
                },
            };
            let params = AgentParams::init(&agent_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let train_cfg = TrainConfig {
                learning_rate: lr,
                batch_size,
                batches,
                gt_fraction,
                collect_ipc: ipc,
                eval_ipc,
                eval_every,
                seed,
                ..TrainConfig::default()
            };
            let reward_cfg = RewardConfig {
                alpha,
                gamma,
                baseline_samples: b,
                mode: match reward {
                    RewardArg::Full => RewardMode::Full,
                    RewardArg::Shaping => RewardMode::ShapingOnly,
                },
            };
            let val_queries = validation
                .as_deref()
                .map(|p| queries_from(p, Split::Validation))
                .transpose()?;
            let val_truth = val_queries
                .as_ref()
                .map(|v| make_ground_truth(&ds, v, 1, GtMode::Exact, 1.0, 0))
                .transpose()?;
            let val = val_queries.as_ref().zip(val_truth.as_ref()).map(|(queries, truth)| Validation {
                queries,
                truth,
                ipc: eval_ipc,
                rerank: rerank_raw,
            });
            let outcome = train(&ds, &g, &qs, &gt, params, &train_cfg, &reward_cfg, val.as_ref())?;
            outcome.params.save(&out)?;
            if let Some(path) = log {
                let text: String = outcome.log.iter().map(|r| format!("{r}\n")).collect();
                write_text(&path, &text)?;
            }
            match outcome.best_recall {
                Some(r) => println!("best validation Recall 1@1 {r} at batch {}", outcome.best_batch),
                None => println!("trained {batches} batches"),
            }
        }
        Command::Search {
            graph,
            data,
            queries,
            k,
            ipc,
            scorer,
            agent_file,
            rerank_raw,
            gt,
            out,
        } => {
            let ds = load_dataset(&data, VectorFormat::guess(&data))?;
            let g = ProximityGraph::load(&graph)?;
            let qs = queries_from(&queries, Split::Test)?;
            let agent = match (scorer, agent_file) {
                (ScorerArg::Agent, Some(p)) => Some(AgentParams::load(&p)?),
                (ScorerArg::Agent, None) => bail!("the agent scorer needs --agent-file"),
                (ScorerArg::Raw, _) => None,
            };
            let table = agent
                .as_ref()
                .map(|a| precompute_embeddings(&ds, &g, a))
                .transpose()?;
            let results = (0..qs.len())
                .map(|qi| {
                    let q = qs.query(qi);
                    match agent.as_ref().zip(table.as_ref()) {
                        Some((a, t)) => agent_search(&ds, &g, t, a, q, k, ipc, rerank_raw),
                        None => raw_search(&ds, &g, q, k, ipc),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut text = String::new();
            for (qi, r) in results.iter().enumerate() {
                let ids: Vec<String> = r.topk.iter().map(usize::to_string).collect();
                writeln!(text, "query={qi} ipc={} topk={}", r.ipc_used, ids.join(","))?;
            }
            if let Some(path) = gt {
                let truth = GroundTruthTable::load(&path, qs.len(), ds.len())?;
                let returned: BTreeMap<usize, Vec<usize>> = results
                    .iter()
                    .enumerate()
                    .filter(|(qi, _)| truth.get(*qi).is_some())
                    .map(|(qi, r)| (qi, r.topk.clone()))
                    .collect();
                let m = truth.k().min(k);
                let report = recall(&returned, truth.entries(), m, k, ipc);
                writeln!(
                    text,
                    "metric=recall_{m}@{k} value={} queries={}",
                    report.value, report.num_queries
                )?;
                println!("Recall {m}@{k} = {:.4} over {} queries", report.value, report.num_queries);
            }
            write_text(&out, &text)?;
        }
        Command::Eval { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.agent_seed = seed;
                cfg.train.seed = seed;
                cfg.gt_seed = seed;
            }
            let outcome = run_experiment(&cfg)?;
            write_outcome(&outcome, &out)?;
            print!("{}", outcome.summary);
        }
        Command::Sweep {
            config,
            key,
            values,
            seeds,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds: Vec<u64> = match cli.seed {
                Some(base) => seeds.iter().map(|s| base.wrapping_add(*s)).collect(),
                None => seeds,
            };
            let points = run_sweep(&cfg, &key, &values, &seeds)?;
            let text: String = points.iter().map(|p| format!("key={key} {p}\n")).collect();
            write_text(&out, &text)?;
            print!("{text}");
        }
    }
    Ok(())
}
