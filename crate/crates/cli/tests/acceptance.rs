//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mipsroute::agent::{
    dataset_matrix, gcn_forward, precompute_embeddings, AgentConfig, AgentParams, EmbeddingTable,
    NormalizedAdjacency, Policy, QueryTransformKind,
};
use mipsroute::eval::{make_ground_truth, recall, synthetic, GtMode};
use mipsroute::proxgraph::{build_graph, build_ipnsw, GraphAlgo, GraphConfig, ProximityGraph, SimilarityKind};
use mipsroute::search::{beam_search, collect_path, IpcBudget, Scorer};
use mipsroute::training::{
    bfs_distances, policy_gradient, policy_objective, shaping_telescope_check, step_reward, train, RewardConfig,
    RewardMode, TrainConfig, Validation, WeightedPath,
};
use mipsroute::vecstore::{brute_force_topk, normalize, split_queries, Dataset, QuerySet, Split};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_queries(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> QuerySet {
    let rows = (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    QuerySet::from_rows(rows, Split::Test).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let (ds, _) = synthetic(64, 1, 16, 11).unwrap();
    let qs = random_queries(&mut ChaCha8Rng::seed_from_u64(12), 100, 16);
    let g = ProximityGraph::complete(64, SimilarityKind::InnerProduct).unwrap();
    let mut values = Vec::new();
    for k in [1, 10] {
        let mut returned = BTreeMap::new();
        let mut truth = BTreeMap::new();
        for qi in 0..qs.len() {
            let q = qs.query(qi);
            let mut budget = IpcBudget::unlimited();
            let r = beam_search(&Scorer::raw(&ds, q), &g, g.entry_vertex(), k, &mut budget).unwrap();
            returned.insert(qi, r.topk);
            truth.insert(qi, brute_force_topk(&ds, q, k).unwrap());
        }
        values.push(recall(&returned, &truth, k, k, usize::MAX).value);
    }
    let elapsed = start.elapsed();
    outcome(
        values.iter().all(|&v| v == 1.0) && elapsed < Duration::from_secs(5),
        format!("recall k=1 {}, k=10 {} in {:.2?}", values[0], values[1], elapsed),
    )
}

fn degree_caps() -> Outcome {
    let start = Instant::now();
    let (ds, _) = synthetic(500, 1, 16, 21).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for algo in [GraphAlgo::IpNsw, GraphAlgo::Ipdg, GraphAlgo::Mobius] {
        let g = build_graph(algo, &ds, GraphConfig::new(8, 32, SimilarityKind::InnerProduct)).unwrap();
        let max_deg = g.out_edges().iter().map(Vec::len).max().unwrap_or(0);
        let in_range = g.out_edges().iter().flatten().all(|&v| v < ds.len());
        ok &= max_deg <= 8 && g.len() == ds.len() && in_range;
        parts.push(format!("{algo} n={} max_deg={max_deg} refs_in_range={in_range}", g.len()));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(30);
    outcome(ok, format!("{} in {:.2?}", parts.join("; "), elapsed))
}

/// Random walk of random length followed by a shortest route to the target.
fn complete_path(rng: &mut ChaCha8Rng, g: &ProximityGraph, dist: &[Option<u32>], target: usize) -> Vec<usize> {
    let reachable: Vec<usize> = (0..g.len()).filter(|&v| dist[v].is_some()).collect();
    let mut v = reachable[rng.random_range(0..reachable.len())];
    let mut states = vec![v];
    for _ in 0..rng.random_range(0..20) {
        let nbrs = g.neighbors(v);
        if nbrs.is_empty() {
            break;
        }
        v = nbrs[rng.random_range(0..nbrs.len())];
        states.push(v);
    }
    while v != target {
        let d = dist[v].unwrap();
        v = *g.neighbors(v).iter().find(|&&u| dist[u] == Some(d - 1)).unwrap();
        states.push(v);
    }
    states
}

fn shaping_soundness() -> Outcome {
    let (ds, qs) = synthetic(300, 1, 8, 31).unwrap();
    let g = build_ipnsw(&ds, GraphConfig::new(6, 24, SimilarityKind::InnerProduct)).unwrap();
    let cfg = RewardConfig::new(0.7, 0.9, 4);
    let shaping = RewardConfig {
        mode: RewardMode::ShapingOnly,
        ..cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut max_err = 0.0f64;
    let mut bad_edges = 0usize;
    for _ in 0..1000 {
        let target = rng.random_range(0..g.len());
        let table = bfs_distances(&g, target).unwrap();
        let dist: Vec<Option<u32>> = (0..g.len()).map(|v| table.get(v)).collect();
        let states = complete_path(&mut rng, &g, &dist, target);
        let expected = cfg.alpha * f64::from(dist[states[0]].unwrap());
        let telescoped = shaping_telescope_check(&states, &table, &cfg).unwrap();
        let mut discounted = 0.0;
        let mut discount = 1.0;
        for t in 0..states.len() - 1 {
            let terminal = t + 2 == states.len();
            let r = step_reward(&ds, states[t], states[t + 1], qs.query(0), Some(&table), terminal, &shaping);
            discounted += discount * r;
            discount *= cfg.gamma;
        }
        max_err = max_err.max((telescoped - expected).abs()).max((discounted - expected).abs());
        for w in states.windows(2) {
            let diff = i64::from(dist[w[1]].unwrap()) - i64::from(dist[w[0]].unwrap());
            if !(-1..=1).contains(&diff) {
                bad_edges += 1;
            }
        }
    }
    outcome(
        max_err <= 1e-9 && bad_edges == 0,
        format!("1000 paths, max |sum - alpha*L(s0)| = {max_err:.3e}, edges outside {{-1,0,1}}: {bad_edges}"),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let dim = 4;
    let rows = (0..10)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ds = Dataset::from_rows(rows).unwrap();
    let g = ProximityGraph::complete(10, SimilarityKind::InnerProduct).unwrap();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for kind in [QueryTransformKind::Identity, QueryTransformKind::Linear] {
        let mut cfg = AgentConfig::new(dim, 0.5);
        cfg.query = kind;
        if kind == QueryTransformKind::Linear {
            cfg.hidden_dim = 5;
            cfg.output_dim = 3;
        }
        let mut params = AgentParams::init(&cfg, &mut rng).unwrap();
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = dataset_matrix(&ds);
        let adj = NormalizedAdjacency::from_graph(&g);
        let (rows, cache) = gcn_forward(&x, &adj, &params.gcn).unwrap();
        let table = EmbeddingTable::new(rows, g.checksum());
        let queries: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut paths = Vec::new();
        for q in &queries {
            let policy = Policy::new(&table, mipsroute::agent::embed_query(q, &params.query).unwrap(), 0.5);
            let mut budget = IpcBudget::new(8);
            paths.push(collect_path(&policy, &g, 0, &mut budget, &mut rng).unwrap());
        }
        let ones: Vec<Vec<f64>> = paths.iter().map(|p| vec![1.0; p.len()]).collect();
        let wps: Vec<WeightedPath<'_>> = queries
            .iter()
            .zip(&paths)
            .zip(&ones)
            .map(|((q, p), w)| WeightedPath {
                query: q,
                path: p,
                weights: w,
            })
            .collect();
        let (_, grads) = policy_gradient(&params, &adj, &cache, &table, &wps, 1.0).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(t, _)| t.to_vec()).collect();
        let h = 1e-5;
        for (ti, name) in params.tensor_names().iter().enumerate() {
            for j in 0..analytic[ti].len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti][j] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti][j] -= h;
                let fd = (policy_objective(&plus, &x, &adj, &wps, 1.0).unwrap()
                    - policy_objective(&minus, &x, &adj, &wps, 1.0).unwrap())
                    / (2.0 * h);
                let a = analytic[ti][j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                    worst_name = format!("{name} ({kind:?} query)");
                }
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.3e} (worst tensor: {worst_name})"),
    )
}

fn budget_discipline() -> Outcome {
    let (ds, qs) = synthetic(1000, 200, 16, 51).unwrap();
    let g = build_ipnsw(&ds, GraphConfig::new(8, 32, SimilarityKind::InnerProduct)).unwrap();
    let agent = AgentParams::init(&AgentConfig::new(16, 0.15), &mut ChaCha8Rng::seed_from_u64(52)).unwrap();
    let table = precompute_embeddings(&ds, &g, &agent).unwrap();
    let budgets = [32, 64, 128];
    let mut over = 0usize;
    let mut not_nested = 0usize;
    let mut hits = [0usize; 3];
    for qi in 0..qs.len() {
        let q = qs.query(qi);
        let truth = brute_force_topk(&ds, q, 10).unwrap();
        for scorer in [Scorer::raw(&ds, q), Scorer::embedded(&table, q.to_vec())] {
            let mut prev: Option<Vec<usize>> = None;
            for (bi, &b) in budgets.iter().enumerate() {
                let mut budget = IpcBudget::new(b);
                let r = beam_search(&scorer, &g, g.entry_vertex(), 10, &mut budget).unwrap();
                over += usize::from(r.ipc_used > b);
                if let Some(p) = &prev {
                    not_nested += usize::from(!p.iter().all(|v| r.visited.contains(v)));
                }
                if matches!(scorer, Scorer::Raw { .. }) {
                    hits[bi] += r.topk.iter().filter(|v| truth.contains(v)).count();
                }
                prev = Some(r.visited);
            }
        }
    }
    let recalls: Vec<f64> = hits.iter().map(|&h| h as f64 / (10 * qs.len()) as f64).collect();
    let monotone = recalls.windows(2).all(|w| w[0] <= w[1]);
    outcome(
        over == 0 && not_nested == 0 && monotone,
        format!(
            "over-budget {over}, non-nested {not_nested}, raw recall 10@10 at 32/64/128 = {:.3}/{:.3}/{:.3}",
            recalls[0], recalls[1], recalls[2]
        ),
    )
}

/// Recall 1@1 at IPC 64 before and after training, on held-out queries.
fn train_once(seed: u64, mode: RewardMode, baseline_samples: usize) -> (f64, f64) {
    let (ds, qs) = synthetic(1000, 600, 16, 100 + seed).unwrap();
    let (ds, qs) = normalize(&ds, &qs).unwrap();
    let split = split_queries(&qs, [200.0 / 600.0, 100.0 / 600.0, 300.0 / 600.0], seed).unwrap();
    let g = build_ipnsw(&ds, GraphConfig::new(8, 32, SimilarityKind::InnerProduct)).unwrap();
    let gt = make_ground_truth(&ds, &split.train, 1, GtMode::Exact, 0.3, seed).unwrap();
    let val_truth = make_ground_truth(&ds, &split.validation, 1, GtMode::Exact, 1.0, 0).unwrap();
    let test_truth = make_ground_truth(&ds, &split.test, 1, GtMode::Exact, 1.0, 0).unwrap();
    let init = AgentParams::init(&AgentConfig::new(16, 0.15), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let test = Validation {
        queries: &split.test,
        truth: &test_truth,
        ipc: 64,
        rerank: false,
    };
    let val = Validation {
        queries: &split.validation,
        truth: &val_truth,
        ipc: 64,
        rerank: false,
    };
    let before = test
        .recall(&ds, &g, &init, &precompute_embeddings(&ds, &g, &init).unwrap())
        .unwrap();
    let cfg = TrainConfig {
        batches: 2000,
        batch_size: 30,
        collect_ipc: 64,
        gt_fraction: 1.0,
        seed,
        ..TrainConfig::default()
    };
    let reward = RewardConfig {
        mode,
        ..RewardConfig::new(0.7, 0.9, baseline_samples)
    };
    let trained = train(&ds, &g, &split.train, &gt, init, &cfg, &reward, Some(&val)).unwrap().params;
    let after = test
        .recall(&ds, &g, &trained, &precompute_embeddings(&ds, &g, &trained).unwrap())
        .unwrap();
    (before, after)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_all(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",")
}

fn training_improves(full: &mut Vec<f64>) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let runs: Vec<(f64, f64)> = pool.install(|| (0..3).map(|s| train_once(s, RewardMode::Full, 4)).collect());
    let elapsed = start.elapsed();
    let before: Vec<f64> = runs.iter().map(|r| r.0).collect();
    *full = runs.iter().map(|r| r.1).collect();
    let gain = mean(full) - mean(&before);
    outcome(
        gain >= 0.02 && elapsed < Duration::from_secs(600),
        format!(
            "untrained {} -> trained {} recall 1@1, mean gain {gain:.3}, {:.1?} single-threaded",
            fmt_all(&before),
            fmt_all(full),
            elapsed
        ),
    )
}

fn ablation_ordering(full: &[f64]) -> Outcome {
    let shaping: Vec<f64> = (0..3).map(|s| train_once(s, RewardMode::ShapingOnly, 4).1).collect();
    let no_baseline: Vec<f64> = (0..3).map(|s| train_once(s, RewardMode::Full, 0).1).collect();
    let (f, s, n) = (mean(full), mean(&shaping), mean(&no_baseline));
    outcome(
        f >= s && f >= n,
        format!(
            "mean recall 1@1 full {f:.3} [{}], shaping-only {s:.3} [{}], no-baseline {n:.3} [{}]",
            fmt_all(full),
            fmt_all(&shaping),
            fmt_all(&no_baseline)
        ),
    )
}

fn normalization_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let rows: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let scale = rng.random_range(0.1..5.0);
            (0..16).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
        })
        .collect();
    let ds = Dataset::from_rows(rows).unwrap();
    let qs = random_queries(&mut rng, 200, 16);
    let (nds, nqs) = normalize(&ds, &qs).unwrap();
    let differing = (0..qs.len())
        .filter(|&qi| brute_force_topk(&ds, qs.query(qi), 1).unwrap() != brute_force_topk(&nds, nqs.query(qi), 1).unwrap())
        .count();
    outcome(differing == 0, format!("{differing} of 200 argmax items changed"))
}

fn run_cli(bin: &str, dir: &Path, threads: &str, args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin)
        .args(args)
        .current_dir(dir)
        .env("MIPSROUTE_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn cli_pipeline(dir: &Path, threads: &str) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_mipsroute");
    std::fs::write(
        dir.join("experiment.cfg"),
        "data = d/items.bin\nqueries = d/test.bin\ngraph_file = g.bin\nscorer = agent\nbudgets = 32,64\n\
         batches = 40\neval_every = 20\ngt_fraction = 0.5\nsplit = 0.5,0.25,0.25\n",
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(
        dir.join("sweep.cfg"),
        "synthetic = 300,120,8,5\nscorer = agent\nbudgets = 48\nbatches = 20\neval_every = 10\n",
    )
    .map_err(|e| e.to_string())?;
    let steps: &[&[&str]] = &[
        &["ingest", "--synthetic", "400,200,12", "--seed", "7", "--out", "d"],
        &["build", "--data", "d/items.bin", "--algo", "ipnsw", "--M", "8", "--N", "32", "--out", "g.bin"],
        &["build", "--data", "d/items.bin", "--algo", "ipdg", "--M", "8", "--N", "32", "--seed", "3", "--out", "gi.bin"],
        &["build", "--data", "d/items.bin", "--algo", "mobius", "--M", "8", "--N", "32", "--out", "gm.bin"],
        &["gt", "--data", "d/items.bin", "--queries", "d/train.bin", "--fraction", "0.3", "--seed", "2", "--out", "gt.bin"],
        &["gt", "--data", "d/items.bin", "--queries", "d/test.bin", "--k", "10", "--out", "test_gt.bin"],
        &[
            "gt", "--data", "d/items.bin", "--queries", "d/test.bin", "--k", "10", "--mode", "approximate", "--graph",
            "g.bin", "--budget", "64", "--out", "test_agt.bin",
        ],
        &[
            "train", "--graph", "g.bin", "--data", "d/items.bin", "--queries", "d/train.bin", "--gt", "gt.bin",
            "--validation", "d/validation.bin", "--batches", "60", "--eval-every", "20", "--seed", "4", "--out",
            "agent.bin", "--log", "train_log.txt",
        ],
        &[
            "search", "--graph", "g.bin", "--data", "d/items.bin", "--queries", "d/test.bin", "--k", "10", "--ipc",
            "64", "--gt", "test_gt.bin", "--out", "search_raw.txt",
        ],
        &[
            "search", "--graph", "g.bin", "--data", "d/items.bin", "--queries", "d/test.bin", "--k", "10", "--ipc",
            "64", "--scorer", "agent", "--agent-file", "agent.bin", "--gt", "test_gt.bin", "--out", "search_agent.txt",
        ],
        &["eval", "--config", "experiment.cfg", "--out", "eval"],
        &[
            "sweep", "--config", "sweep.cfg", "--key", "gt_fraction", "--values", "0.1,0.3", "--seeds", "0,1",
            "--out", "sweep.txt",
        ],
    ];
    for args in steps {
        run_cli(bin, dir, threads, args)?;
    }
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let key = path.strip_prefix(root).unwrap().display().to_string();
            out.insert(key, std::fs::read(&path).unwrap());
        }
    }
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = cli_pipeline(a.path(), "1").and_then(|_| cli_pipeline(b.path(), "4")) {
        return outcome(false, format!("pipeline failed: {e}"));
    }
    let mut fa = BTreeMap::new();
    let mut fb = BTreeMap::new();
    collect_files(a.path(), a.path(), &mut fa);
    collect_files(b.path(), b.path(), &mut fb);
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb.get(*k) != Some(v)).map(|(k, _)| k).collect();
    let same_names = fa.keys().eq(fb.keys());
    outcome(
        same_names && differing.is_empty(),
        format!(
            "{} files from two runs (1 and 4 threads), differing: {:?}",
            fa.len(),
            differing
        ),
    )
}

fn main() {
    let mut full = Vec::new();
    let checks: Vec<(&str, Box<dyn FnOnce(&mut Vec<f64>) -> Outcome>)> = vec![
        ("oracle equivalence", Box::new(|_| oracle_equivalence())),
        ("degree caps", Box::new(|_| degree_caps())),
        ("shaping soundness", Box::new(|_| shaping_soundness())),
        ("gradient check", Box::new(|_| gradient_check())),
        ("budget discipline", Box::new(|_| budget_discipline())),
        ("training improves routing", Box::new(training_improves)),
        ("ablation ordering", Box::new(|f| ablation_ordering(f))),
        ("normalization invariance", Box::new(|_| normalization_invariance())),
        ("CLI determinism", Box::new(|_| determinism())),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let o = check(&mut full);
        failed += usize::from(!o.pass);
        println!(
            "criterion {} {name}: {}  {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
