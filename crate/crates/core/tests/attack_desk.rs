//! Qualitative attack behaviour on a small fixture: 20 Gaussian-mixture
//! points in 16 dimensions, a 16-200-1 victim, and a short sweep.
//!
//! The ignored tests state trends this fixture does not reproduce; they stay
//! runnable with `--ignored` so the gap can be re-measured.

use std::sync::OnceLock;

use embrecon::backbone::norm_ratio_report;
use embrecon::clustering::{maxclust_sweep, RepMode};
use embrecon::data::{gen_gaussian_mixture, EmbeddingDataset};
use embrecon::evaluation::noise_baseline;
use embrecon::experiments::{grid_experiment, grid_size_trend, iterations_experiment, noise_seed, run_pipeline, GridConfig, PipelineConfig, PipelineResult};
use embrecon::reconstruction::{stack_pools, SweepSpec};
use embrecon::trainer::{self, TrainConfig};
use embrecon::Arch;

const THRESHOLD: f64 = 0.75;

fn config() -> PipelineConfig {
    PipelineConfig {
        hidden: 200,
        train: TrainConfig { lr: 0.01, epochs: 10_000, weight_decay: 0.08, ..Default::default() },
        sweep: SweepSpec { runs: 6, m: 60, iterations: 1000, master_seed: 0, ..Default::default() },
        ..Default::default()
    }
}

fn raw() -> EmbeddingDataset {
    gen_gaussian_mixture(20, 16, 2, 3.0, 1).unwrap()
}

fn pipeline() -> &'static PipelineResult {
    static RESULT: OnceLock<PipelineResult> = OnceLock::new();
    RESULT.get_or_init(|| run_pipeline(&raw(), &config(), 1).unwrap())
}

fn good_count(best: &[f64]) -> usize {
    best.iter().filter(|&&c| c > THRESHOLD).count()
}

#[test]
fn sweep_runs_cleanly_and_fits_the_victim() {
    let res = pipeline();
    assert_eq!(res.train_acc, 1.0);
    assert_eq!(res.failed_runs, 0);
    assert_eq!(res.pools.len(), 6);
    assert_eq!(res.report.rows.len(), 20);
}

#[test]
fn averaged_representatives_are_no_worse_than_nearest_members() {
    let res = pipeline();
    let (x, _, _, d) = stack_pools(&res.pools).unwrap();
    let rows = maxclust_sweep(&x, d, &[200], 20, &res.train, Some(THRESHOLD)).unwrap();
    let good = |mode| rows.iter().find(|r| r.mode == mode).unwrap().good;
    assert!(good(RepMode::Mean) >= good(RepMode::NearestToMean), "{rows:?}");
}

#[test]
fn untrained_checkpoint_looks_like_noise_and_training_only_helps() {
    let cfg = config();
    let ds = raw().normalized().unwrap();
    let train_cfg = TrainConfig { checkpoint_every: 5000, ..cfg.train.clone() };
    let (_, report) = trainer::train(&ds, Arch::new(16, cfg.hidden, 1).unwrap(), &train_cfg).unwrap();
    let rows = iterations_experiment(&report.checkpoints, &ds, None, &cfg, 1).unwrap();
    let first = rows.first().unwrap();
    let last = rows.last().unwrap();
    assert_eq!(first.epoch, 0);
    let (g0, g_last) = (first.good.unwrap(), last.good.unwrap());

    let pool_size = cfg.sweep.runs * cfg.sweep.m;
    let gn = good_count(&noise_baseline(&ds, pool_size, noise_seed(cfg.sweep.master_seed)).unwrap());
    // Two-proportion z statistic over the 20 training samples.
    let n = ds.len() as f64;
    let pooled = (g0 + gn) as f64 / (2.0 * n);
    let se = (pooled * (1.0 - pooled) * 2.0 / n).sqrt().max(1.0 / n);
    let z = (g0 as f64 - gn as f64).abs() / n / se;
    assert!(z < 2.0, "epoch 0: {g0} good, noise: {gn} good, z = {z}");
    assert!(g_last >= g0, "{rows:?}");
}

#[test]
#[ignore = "not reproduced on this fixture: rho is positive"]
fn on_margin_samples_reconstruct_better() {
    let rho = pipeline().margin.correlation.rho;
    assert!(rho <= -0.3, "rho = {rho}");
}

#[test]
#[ignore = "not reproduced on this fixture: matched candidates are much shorter than the data and cosines stay below 0.9"]
fn matched_candidates_vary_in_norm_at_high_cosine() {
    let res = pipeline();
    let (x, _, _, _) = stack_pools(&res.pools).unwrap();
    let rows = norm_ratio_report(&res.train, &x).unwrap();
    let min = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let max = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    assert!(min < 0.5 && max > 2.0, "ratios span [{min}, {max}]");
    assert!(rows.iter().all(|r| r.cosine > 0.9));
}

#[test]
#[ignore = "not reproduced on this fixture: the good fraction is flat in N"]
fn good_fraction_falls_with_dataset_size() {
    let gc = GridConfig { d: 16, classes: 2, class_sep: 3.0, data_seed: 1, pipeline: config() };
    let rows = grid_experiment(&[50, 200], &[10, 20, 40, 80], &gc, 1).unwrap();
    let tau = grid_size_trend(&rows).unwrap();
    assert!(!tau.degenerate && tau.rho < 0.0, "{tau:?}");
}
