use std::path::Path;

use seea_core::config::{RewardMode, RunConfig};
use seea_core::evolve::{checkpoint_path, run, RunOptions};

fn small(mode: RewardMode, out: &Path) -> RunConfig {
    let mut c = RunConfig::fast();
    c.reward_mode = mode;
    c.iterations = 3;
    c.eval_episodes = 8;
    c.optim.valid_samples_per_iteration = 8;
    c.optim.batch_size = 4;
    c.episode_cap_factor = 2;
    c.collect_batch = 4;
    c.search.iterations = 10;
    c.rm_train.heldout_episodes = 1;
    c.rm_train.pretrain_episodes = 2;
    c.rm_train.pretrain_steps = 4;
    c.out_dir = out.to_path_buf();
    c
}

fn metrics(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join("metrics.csv")).unwrap()
}

#[test]
fn repeated_runs_write_identical_metrics() {
    for mode in RewardMode::ALL {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(&small(mode, a.path()), &RunOptions::default()).unwrap();
        run(&small(mode, b.path()), &RunOptions::default()).unwrap();
        assert_eq!(metrics(a.path()), metrics(b.path()), "{mode:?}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for mode in RewardMode::ALL {
        let (whole, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(&small(mode, whole.path()), &RunOptions::default()).unwrap();
        let config = small(mode, split.path());
        run(&config, &RunOptions { stop_after: Some(1), ..Default::default() }).unwrap();
        let resume = Some(checkpoint_path(split.path(), 1));
        run(&config, &RunOptions { resume, ..Default::default() }).unwrap();
        assert_eq!(metrics(whole.path()), metrics(split.path()), "{mode:?}");
    }
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(RewardMode::GroundTruth, dir.path());
    run(&config, &RunOptions { stop_after: Some(1), ..Default::default() }).unwrap();
    let mut other = config.clone();
    other.seed += 1;
    let resume = Some(checkpoint_path(dir.path(), 1));
    assert!(run(&other, &RunOptions { resume, ..Default::default() }).is_err());
}
