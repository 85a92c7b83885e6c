use std::path::Path;

use seqrank::ingest::SyntheticConfig;
use seqrank::pipeline::{read_leaderboard, Pipeline, PipelineConfig, LEADERBOARD};
use seqrank::retriever::TrainConfig;
use seqrank::Error;

fn config(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig {
        output_dir: dir.to_path_buf(),
        seed: 3,
        ..PipelineConfig::default()
    };
    c.data.synthetic = SyntheticConfig {
        users: 40,
        items: 30,
        categories: 5,
        ..SyntheticConfig::default()
    };
    c.data.kcore = 2;
    c.retriever.train = TrainConfig {
        dim: 8,
        layers: 1,
        max_epochs: 3,
        validation_interval_iters: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    c.propagate_seed();
    c
}

#[test]
fn full_grid_keeps_the_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(dir.path())).unwrap();
    p.ingest().unwrap();
    let rows = p.grid_search().unwrap();
    assert_eq!(rows.len(), 10);
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.weight_decay, r.dropout)).collect();
    for wd in [0.0, 1e-2] {
        for d in [0.1, 0.2, 0.3, 0.4, 0.5] {
            assert!(pairs.contains(&(wd, d)), "missing ({wd}, {d})");
        }
    }
    assert_eq!(read_leaderboard(&dir.path().join(LEADERBOARD)).unwrap(), rows);
    let best = rows.iter().map(|r| r.best_recall_at_10).fold(f64::MIN, f64::max);
    assert!((p.retriever_valid_recall().unwrap() - best).abs() < 1e-12);
}

#[test]
fn grid_runs_in_parallel_with_the_same_result() {
    let run = |parallel: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path());
        c.grid.weight_decay = vec![0.0];
        c.grid.dropout = vec![0.1, 0.3];
        c.grid.parallel = parallel;
        let p = Pipeline::new(c).unwrap();
        p.ingest().unwrap();
        p.grid_search().unwrap()
    };
    let serial = run(1);
    assert_eq!(serial.len(), 2);
    assert_eq!(serial, run(2));
}

#[test]
fn single_cell_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.grid.weight_decay = vec![1e-2];
    c.grid.dropout = vec![0.2];
    let p = Pipeline::new(c).unwrap();
    p.ingest().unwrap();
    let rows = p.grid_search().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].weight_decay, rows[0].dropout), (1e-2, 0.2));
}

#[test]
fn grid_needs_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(dir.path())).unwrap();
    assert!(matches!(p.grid_search(), Err(Error::MissingPrerequisite { .. })));
}
