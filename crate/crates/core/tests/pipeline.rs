use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mipsroute::agent::{precompute_embeddings, AgentConfig, AgentParams, EmbeddingTable};
use mipsroute::eval::{
    exhaustive_recall, make_ground_truth, recall, run_experiment, synthetic, write_outcome, ExperimentConfig, GtMode,
    Report, ScorerKind,
};
use mipsroute::proxgraph::{build_graph, GraphAlgo, GraphConfig, ProximityGraph, SimilarityKind};
use mipsroute::search::{agent_search, raw_search};
use mipsroute::training::{train, RewardConfig, TrainConfig, Validation};
use mipsroute::vecstore::{
    load_dataset, load_queries, normalize, save_vectors, split_queries, GroundTruthTable, Split, VectorFormat,
};
use mipsroute::Error;

fn small_world() -> (mipsroute::vecstore::Dataset, mipsroute::vecstore::QuerySet, ProximityGraph) {
    let (ds, qs) = synthetic(300, 90, 8, 3).unwrap();
    let (ds, qs) = normalize(&ds, &qs).unwrap();
    let g = build_graph(GraphAlgo::IpNsw, &ds, GraphConfig::new(6, 24, SimilarityKind::InnerProduct)).unwrap();
    (ds, qs, g)
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, qs, g) = small_world();

    save_vectors(&dir.path().join("items.bin"), ds.items()).unwrap();
    save_vectors(&dir.path().join("queries.bin"), qs.rows()).unwrap();
    let ds2 = load_dataset(&dir.path().join("items.bin"), VectorFormat::Raw).unwrap();
    let qs2 = load_queries(&dir.path().join("queries.bin"), VectorFormat::Raw, Split::Test).unwrap();
    assert_eq!(ds2.len(), ds.len());
    assert_eq!(qs2.len(), qs.len());
    // Vectors are stored as f32.
    for (a, b) in ds.items().as_flat().iter().zip(ds2.items().as_flat()) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
    }

    g.save(&dir.path().join("g.bin")).unwrap();
    assert_eq!(ProximityGraph::load(&dir.path().join("g.bin")).unwrap(), g);

    let gt = make_ground_truth(&ds, &qs, 5, GtMode::Exact, 0.5, 9).unwrap();
    gt.save(&dir.path().join("gt.bin")).unwrap();
    assert_eq!(
        GroundTruthTable::load(&dir.path().join("gt.bin"), qs.len(), ds.len()).unwrap(),
        gt
    );

    let params = AgentParams::init(&AgentConfig::new(8, 0.15), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    params.save(&dir.path().join("agent.bin")).unwrap();
    let loaded = AgentParams::load(&dir.path().join("agent.bin")).unwrap();
    assert_eq!(loaded.tensors().len(), params.tensors().len());

    let table = precompute_embeddings(&ds, &g, &params).unwrap();
    table.save(&dir.path().join("emb.bin")).unwrap();
    let table2 = EmbeddingTable::load(&dir.path().join("emb.bin")).unwrap();
    table2.check_graph(&g).unwrap();
    let other = build_graph(GraphAlgo::Ipdg, &ds, GraphConfig::new(6, 24, SimilarityKind::InnerProduct)).unwrap();
    assert!(matches!(table2.check_graph(&other), Err(Error::StaleEmbeddings { .. })));
}

#[test]
fn corrupted_graph_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, g) = small_world();
    let path = dir.path().join("g.bin");
    g.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(ProximityGraph::load(&path).is_err());
}

#[test]
fn train_then_search_end_to_end() {
    let (ds, qs, g) = small_world();
    let split = split_queries(&qs, [0.5, 0.25, 0.25], 2).unwrap();
    let gt = make_ground_truth(&ds, &split.train, 1, GtMode::Exact, 0.5, 2).unwrap();
    let val_truth = make_ground_truth(&ds, &split.validation, 1, GtMode::Exact, 1.0, 0).unwrap();
    let init = AgentParams::init(&AgentConfig::new(8, 0.15), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let cfg = TrainConfig {
        batches: 30,
        batch_size: 8,
        eval_every: 10,
        gt_fraction: 0.5,
        seed: 2,
        ..TrainConfig::default()
    };
    let val = Validation {
        queries: &split.validation,
        truth: &val_truth,
        ipc: 64,
        rerank: false,
    };
    let out = train(&ds, &g, &split.train, &gt, init, &cfg, &RewardConfig::new(0.7, 0.9, 4), Some(&val)).unwrap();
    assert_eq!(out.log.len(), 30);
    assert!(out.params.all_finite());
    let best = out.best_recall.unwrap();
    assert!((0.0..=1.0).contains(&best));

    let table = precompute_embeddings(&ds, &g, &out.params).unwrap();
    for qi in 0..split.test.len() {
        let q = split.test.query(qi);
        for rerank in [false, true] {
            let r = agent_search(&ds, &g, &table, &out.params, q, 10, 64, rerank).unwrap();
            assert!(r.ipc_used <= 64);
            assert!(r.topk.len() <= 10);
            assert!(r.topk.iter().all(|v| r.visited.contains(v)));
        }
    }
}

#[test]
fn reranked_agent_search_never_loses_to_embedded_ranking_on_recall() {
    let (ds, qs, g) = small_world();
    let params = AgentParams::init(&AgentConfig::new(8, 0.15), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let table = precompute_embeddings(&ds, &g, &params).unwrap();
    let truth = make_ground_truth(&ds, &qs, 10, GtMode::Exact, 1.0, 0).unwrap();
    let mut plain = BTreeMap::new();
    let mut reranked = BTreeMap::new();
    for qi in 0..qs.len() {
        let q = qs.query(qi);
        plain.insert(qi, agent_search(&ds, &g, &table, &params, q, 10, 96, false).unwrap().topk);
        reranked.insert(qi, agent_search(&ds, &g, &table, &params, q, 10, 96, true).unwrap().topk);
    }
    let a = recall(&plain, truth.entries(), 10, 10, 96).value;
    let b = recall(&reranked, truth.entries(), 10, 10, 96).value;
    assert!(b >= a, "reranked {b} < embedded {a}");
}

#[test]
fn raw_search_recall_grows_with_budget_and_reaches_exhaustive() {
    let (ds, qs, g) = small_world();
    let truth = make_ground_truth(&ds, &qs, 1, GtMode::Exact, 1.0, 0).unwrap();
    let mut last = 0.0;
    for budget in [16, 32, 64, 128, 256] {
        let returned: BTreeMap<usize, Vec<usize>> = (0..qs.len())
            .map(|qi| (qi, raw_search(&ds, &g, qs.query(qi), 1, budget).unwrap().topk))
            .collect();
        let r = recall(&returned, truth.entries(), 1, 1, budget).value;
        assert!(r >= last, "recall dropped to {r} at budget {budget}");
        last = r;
    }
    assert!(exhaustive_recall(&ds, &g, &qs, 1).unwrap() >= last);
}

#[test]
fn experiment_outputs_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(
        "synthetic = 300,80,8,4\nscorer = agent\nbudgets = 32,64\nbatches = 20\neval_every = 10\n",
        dir.path(),
    )
    .unwrap();
    assert_eq!(cfg.scorer, ScorerKind::Agent);
    let out = run_experiment(&cfg).unwrap();
    write_outcome(&out, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    let report: Report = text.parse().unwrap();
    assert_eq!(report, out.report);
    assert_eq!(report.lines.len(), 4);
    assert!(dir.path().join("summary.txt").exists());
    assert!(dir.path().join("train_log.txt").exists());
    assert!(dir.path().join("agent.bin").exists());
}

#[test]
fn experiment_with_missing_agent_file_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse("synthetic = 100,20,4,0\nscorer = agent\nagent_file = nope.bin\n", dir.path())
        .unwrap();
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.to_string().contains("load agent"), "{err}");
}
