//! End-to-end runs: train a victim, sweep reconstructions, match against
//! the training set. Grid and checkpoint studies reuse the same pieces.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{csv_io, fmt_f64, gen_gaussian_mixture, parse_f64, write_csv, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, count_good, kendall_tau, margin_vs_quality, match_pools, noise_baseline, Correlation, EvalReport, GoodCounts, MarginQuality,
    DEFAULT_COSINE_THRESHOLD, DEFAULT_TOP_K,
};
use crate::model::{Arch, MlpParams};
use crate::reconstruction::{activation_maximization_baseline, run_sweep, AmConfig, CandidatePool, SweepSpec, SweepWorkers};
use crate::rng;
use crate::trainer::{self, Checkpoint, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub hidden: usize,
    /// Standardize embeddings before training; the attack then runs in normalized space.
    pub normalize: bool,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
    pub label_filter: bool,
    pub top_k: usize,
    pub cosine_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hidden: 500,
            normalize: true,
            train: TrainConfig::default(),
            sweep: SweepSpec::default(),
            label_filter: false,
            top_k: DEFAULT_TOP_K,
            cosine_threshold: DEFAULT_COSINE_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    /// Training set as seen by the victim (normalized when configured).
    pub train: EmbeddingDataset,
    pub params: MlpParams,
    pub train_acc: f64,
    pub pools: Vec<CandidatePool>,
    pub report: EvalReport,
    pub margin: MarginQuality,
    pub good: GoodCounts,
    pub failed_runs: usize,
    /// Median best cosine of an equally sized N(0, 1) pool.
    pub noise_median: f64,
}

/// Seed of the noise baseline pool, kept apart from the sweep's per-run streams.
pub fn noise_seed(master_seed: u64) -> u64 {
    rng::derive_seed(master_seed, u64::MAX)
}

pub fn classes_of(ds: &EmbeddingDataset) -> usize {
    if ds.y.iter().any(|&y| y < 0) {
        2
    } else {
        ds.y.iter().max().map_or(0, |&m| m as usize + 1).max(2)
    }
}

/// Output width of the victim for `classes` (a single logit when binary).
pub fn output_width(classes: usize) -> usize {
    if classes == 2 {
        1
    } else {
        classes
    }
}

/// Attacks an already trained victim; `train` must be in the victim's input space.
pub fn attack(params: &MlpParams, train: &EmbeddingDataset, cfg: &PipelineConfig, workers: usize) -> Result<PipelineResult> {
    let pools = run_sweep(params, &cfg.sweep, SweepWorkers(workers))?;
    let failed_runs = pools.iter().filter(|p| p.failed).count();
    let mut report = match_pools(train, &pools, cfg.label_filter, cfg.top_k)?;
    let margin = margin_vs_quality(params, train, &mut report)?;
    let good = count_good(&report, cfg.cosine_threshold, None)?;
    let pool_size: usize = pools.iter().map(|p| p.len()).sum();
    let noise = noise_baseline(train, pool_size.max(1), noise_seed(cfg.sweep.master_seed))?;
    Ok(PipelineResult {
        train: train.clone(),
        params: params.clone(),
        train_acc: trainer::accuracy(params, train)?,
        pools,
        report,
        margin,
        good,
        failed_runs,
        noise_median: evaluation::median(&noise),
    })
}

/// Normalize → train → sweep → match.
pub fn run_pipeline(raw: &EmbeddingDataset, cfg: &PipelineConfig, workers: usize) -> Result<PipelineResult> {
    let train = if cfg.normalize { raw.normalized()? } else { raw.clone() };
    let arch = Arch::new(train.d, cfg.hidden, output_width(classes_of(&train)))?;
    let (params, _) = trainer::train(&train, arch, &cfg.train)?;
    attack(&params, &train, cfg, workers)
}

/// Parameters per unknown, `p / (n · (d + 1))`.
pub fn param_ratio(arch: Arch, n: usize) -> f64 {
    arch.num_params() as f64 / (n as f64 * (arch.d as f64 + 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    pub classes: usize,
    pub class_sep: f64,
    pub data_seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { d: 16, classes: 2, class_sep: 3.0, data_seed: 1, pipeline: PipelineConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub width: usize,
    pub n: usize,
    pub params: usize,
    pub ratio: f64,
    pub good: Option<usize>,
    pub fraction: Option<f64>,
    pub train_acc: Option<f64>,
    /// Set when this cell failed; the other cells still run.
    pub error: Option<String>,
}

/// Trains and attacks one victim per `(width, n)` cell.
pub fn grid_experiment(widths: &[usize], sizes: &[usize], cfg: &GridConfig, workers: usize) -> Result<Vec<GridRow>> {
    if widths.is_empty() || sizes.is_empty() {
        return Err(Error::Input("grid needs at least one width and one size".into()));
    }
    let mut rows = Vec::with_capacity(widths.len() * sizes.len());
    for &width in widths {
        for &n in sizes {
            let arch = Arch::new(cfg.d, width, output_width(cfg.classes))?;
            let mut row = GridRow {
                width,
                n,
                params: arch.num_params(),
                ratio: param_ratio(arch, n),
                good: None,
                fraction: None,
                train_acc: None,
                error: None,
            };
            let pipeline = PipelineConfig { hidden: width, ..cfg.pipeline.clone() };
            let cell = gen_gaussian_mixture(n, cfg.d, cfg.classes, cfg.class_sep, cfg.data_seed)
                .and_then(|ds| run_pipeline(&ds, &pipeline, workers));
            match cell {
                Ok(res) => {
                    row.good = Some(res.good.count);
                    row.fraction = Some(res.good.fraction);
                    row.train_acc = Some(res.train_acc);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Kendall τ between dataset size and fraction of good reconstructions, over successful cells.
pub fn grid_size_trend(rows: &[GridRow]) -> Result<Correlation> {
    let (n, frac): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|r| r.fraction.map(|f| (r.n as f64, f))).unzip();
    kendall_tau(&n, &frac)
}

pub fn save_grid_csv(rows: &[GridRow], path: &Path) -> Result<()> {
    let header = ["width", "n", "params", "ratio", "good", "fraction", "train_acc", "error"].map(String::from);
    write_csv(
        path,
        &header,
        rows.iter().map(|r| {
            [
                r.width.to_string(),
                r.n.to_string(),
                r.params.to_string(),
                fmt_f64(r.ratio),
                r.good.map(|g| g.to_string()).unwrap_or_default(),
                r.fraction.map(fmt_f64).unwrap_or_default(),
                r.train_acc.map(fmt_f64).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn load_grid_csv(path: &Path) -> Result<Vec<GridRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
    let want = ["width", "n", "params", "ratio", "good", "fraction", "train_acc", "error"];
    if header.iter().ne(want) {
        return Err(Error::parse(path, 1, format!("expected columns {}", want.join(","))));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let int = |k: usize| rec[k].trim().parse::<usize>().map_err(|_| Error::parse(path, line, format!("bad integer {:?}", &rec[k])));
        let opt_int = |k: usize| if rec[k].is_empty() { Ok(None) } else { int(k).map(Some) };
        let opt_f = |k: usize| if rec[k].is_empty() { Ok(None) } else { parse_f64(path, line, &rec[k]).map(Some) };
        rows.push(GridRow {
            width: int(0)?,
            n: int(1)?,
            params: int(2)?,
            ratio: parse_f64(path, line, &rec[3])?,
            good: opt_int(4)?,
            fraction: opt_f(5)?,
            train_acc: opt_f(6)?,
            error: (!rec[7].is_empty()).then(|| rec[7].to_string()),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRow {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub good: Option<usize>,
    pub median_best_cosine: Option<f64>,
    pub error: Option<String>,
}

/// Attacks every checkpoint with the same sweep.
pub fn iterations_experiment(
    checkpoints: &[Checkpoint],
    train: &EmbeddingDataset,
    test: Option<&EmbeddingDataset>,
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<Vec<IterRow>> {
    if checkpoints.is_empty() {
        return Err(Error::Input("no checkpoints to attack".into()));
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for ck in checkpoints {
        let mut row = IterRow {
            epoch: ck.epoch,
            train_acc: trainer::accuracy(&ck.params, train)?,
            test_acc: test.map(|t| trainer::accuracy(&ck.params, t)).transpose()?,
            good: None,
            median_best_cosine: None,
            error: None,
        };
        match attack(&ck.params, train, cfg, workers) {
            Ok(res) => {
                row.good = Some(res.good.count);
                row.median_best_cosine = Some(res.report.median_best_cosine());
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_iters_csv(rows: &[IterRow], path: &Path) -> Result<()> {
    let header = ["epoch", "train_acc", "test_acc", "good", "median_best_cosine", "error"].map(String::from);
    write_csv(
        path,
        &header,
        rows.iter().map(|r| {
            [
                r.epoch.to_string(),
                fmt_f64(r.train_acc),
                r.test_acc.map(fmt_f64).unwrap_or_default(),
                r.good.map(|g| g.to_string()).unwrap_or_default(),
                r.median_best_cosine.map(fmt_f64).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

/// One activation-maximization pool per class, labelled with that class.
pub fn am_baseline_pools(theta: &MlpParams, cfg: &AmConfig) -> Result<Vec<CandidatePool>> {
    let arch = theta.arch();
    let labels: Vec<i64> = if arch.is_binary() { vec![1, -1] } else { (0..arch.c as i64).collect() };
    labels
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            let cfg = AmConfig { seed: rng::derive_seed(cfg.seed, k as u64), ..cfg.clone() };
            let am = activation_maximization_baseline(theta, y, &cfg)?;
            let mut pool = CandidatePool::new(k, am.d, am.x, vec![0.0; cfg.count], vec![y; cfg.count])?;
            pool.final_loss = am.final_loss.iter().sum::<f64>() / cfg.count.max(1) as f64;
            pool.failed = am.diverged.iter().any(|&d| d);
            Ok(pool)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_counts_victim_parameters() {
        let arch = Arch::new(16, 200, 1).unwrap();
        assert_eq!(arch.num_params(), 16 * 200 + 200 + 200);
        assert!((param_ratio(arch, 20) - 3600.0 / 340.0).abs() < 1e-12);
    }

    #[test]
    fn class_count_from_labels() {
        let bin = gen_gaussian_mixture(6, 2, 2, 1.0, 0).unwrap();
        assert_eq!(output_width(classes_of(&bin)), 1);
        let multi = gen_gaussian_mixture(6, 2, 3, 1.0, 0).unwrap();
        assert_eq!(output_width(classes_of(&multi)), 3);
    }

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            hidden: 8,
            train: TrainConfig { epochs: 200, ..Default::default() },
            sweep: SweepSpec { runs: 2, m: 6, iterations: 30, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn single_grid_cell_is_the_pipeline() {
        let cfg = GridConfig { d: 4, data_seed: 3, pipeline: tiny(), ..Default::default() };
        let rows = grid_experiment(&[8], &[10], &cfg, 1).unwrap();
        let ds = gen_gaussian_mixture(10, 4, 2, 3.0, 3).unwrap();
        let direct = run_pipeline(&ds, &tiny(), 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].good, Some(direct.good.count));
        assert_eq!(rows[0].train_acc, Some(direct.train_acc));
        assert!(grid_experiment(&[], &[10], &cfg, 1).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.csv");
        save_grid_csv(&rows, &p).unwrap();
        assert_eq!(load_grid_csv(&p).unwrap(), rows);
    }

    #[test]
    fn grid_flags_failed_cells() {
        // an odd size cannot be split evenly into the mixture's classes
        let cfg = GridConfig { d: 4, pipeline: tiny(), ..Default::default() };
        let rows = grid_experiment(&[8], &[7, 10], &cfg, 1).unwrap();
        assert!(rows[0].error.is_some() && rows[0].good.is_none());
        assert!(rows[1].error.is_none() && rows[1].good.is_some());
    }

    #[test]
    fn one_row_per_checkpoint() {
        let ds = gen_gaussian_mixture(10, 4, 2, 3.0, 1).unwrap().normalized().unwrap();
        let arch = Arch::new(4, 8, 1).unwrap();
        let (_, rep) = trainer::train(&ds, arch, &TrainConfig { epochs: 100, checkpoint_every: 50, ..Default::default() }).unwrap();
        let rows = iterations_experiment(&rep.checkpoints, &ds, Some(&ds), &tiny(), 1).unwrap();
        assert_eq!(rows.len(), rep.checkpoints.len());
        assert_eq!(rows[0].epoch, 0);
        assert!(rows.iter().all(|r| r.good.is_some() && r.test_acc == Some(r.train_acc)));
        assert!(iterations_experiment(&[], &ds, None, &tiny(), 1).is_err());
    }

    #[test]
    fn am_pools_cover_each_class() {
        let theta = MlpParams::init_uniform(Arch::new(3, 5, 3).unwrap(), 2);
        let pools = am_baseline_pools(&theta, &AmConfig { count: 4, iterations: 10, ..Default::default() }).unwrap();
        assert_eq!(pools.len(), 3);
        for (k, p) in pools.iter().enumerate() {
            assert_eq!(p.len(), 4);
            assert!(p.y.iter().all(|&y| y == k as i64));
        }
    }
}
