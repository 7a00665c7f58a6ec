use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use embrecon::backbone::{self, InversionConfig, InversionObjective, ToyBackbone};
use embrecon::clustering::{self, RepMode};
use embrecon::data::{self, fmt_f64, write_csv, EmbeddingDataset, ImageShape, NormStats};
use embrecon::evaluation::{self, EvalReport, DEFAULT_COSINE_THRESHOLD, DEFAULT_SSIM_THRESHOLD, DEFAULT_TOP_K};
use embrecon::experiments::{self, GridConfig, PipelineConfig};
use embrecon::model::{load_model, save_model};
use embrecon::reconstruction::{
    load_pools, run_reconstruction, run_sweep, save_pools, save_run_summary, stack_pools, AmConfig, CandidatePool, ReconConfig, SweepSpec,
    SweepWorkers,
};
use embrecon::trainer::{self, TrainConfig};
use embrecon::{ActivationMode, Arch, MlpParams};

use crate::ctx::{apply, load_config, CliResult, Ctx, Failure};
use crate::Common;

fn start(common: &Common) -> CliResult<Ctx> {
    let mut ctx = Ctx::new(&common.out_dir)?;
    if let Some(p) = &common.config {
        ctx.input(p)?;
    }
    Ok(ctx)
}

fn parse_objective(s: &str) -> embrecon::Result<InversionObjective> {
    s.parse()
}

fn parse_mode(s: &str) -> embrecon::Result<RepMode> {
    s.parse()
}

/// Loads a dataset and maps it into the victim's input space.
fn load_train(ctx: &mut Ctx, path: &Path, norm: Option<&NormStats>) -> CliResult<EmbeddingDataset> {
    let raw = data::load_dataset(&ctx.input(path)?)?;
    Ok(match norm {
        Some(stats) => raw.normalized_with(stats)?,
        None => raw,
    })
}

fn load_victim(ctx: &mut Ctx, path: &Path) -> CliResult<(MlpParams, Option<NormStats>)> {
    Ok(load_model(&ctx.input(path)?)?)
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Mixture,
    Images,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub kind: DataKind,
    pub n: usize,
    /// Embedding width for `mixture`.
    pub d: usize,
    pub c: usize,
    pub sep: f64,
    pub seed: u64,
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    /// Backbone output width for `images`.
    pub embed_dim: usize,
    pub backbone_hidden: usize,
    pub backbone_seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            kind: DataKind::Mixture,
            n: 20,
            d: 16,
            c: 2,
            sep: 3.0,
            seed: 0,
            ch: 3,
            h: 16,
            w: 16,
            embed_dim: 64,
            backbone_hidden: 128,
            backbone_seed: 0,
        }
    }
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    kind: Option<DataKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    sep: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ch: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    backbone_hidden: Option<usize>,
    #[arg(long)]
    backbone_seed: Option<u64>,
}

pub fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut cfg: GenDataConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a; kind, n, d, c, sep, seed, ch, h, w, embed_dim, backbone_hidden, backbone_seed);
    let mut ctx = start(&a.common)?;
    ctx.seed("seed", cfg.seed);
    match cfg.kind {
        DataKind::Mixture => {
            let ds = data::gen_gaussian_mixture(cfg.n, cfg.d, cfg.c, cfg.sep, cfg.seed)?;
            data::save_dataset(&ds, &ctx.output("data.csv")?)?;
        }
        DataKind::Images => {
            ctx.seed("backbone_seed", cfg.backbone_seed);
            let shape = ImageShape::new(cfg.ch, cfg.h, cfg.w)?;
            let imgs = data::gen_toy_images(cfg.n, shape, cfg.c, cfg.seed)?;
            let p = ctx.output("images.csv")?;
            ctx.output("images.json")?;
            data::save_images(&imgs, &p)?;
            let bb = ToyBackbone::new(shape, cfg.embed_dim, cfg.backbone_hidden, cfg.backbone_seed)?;
            bb.save(&ctx.output("backbone.json")?)?;
            data::save_dataset(&bb.embed_dataset(&imgs)?, &ctx.output("data.csv")?)?;
        }
    }
    ctx.finish("gen-data", &cfg)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub hidden: usize,
    pub normalize: bool,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainCmdConfig {
            hidden: 500,
            normalize: true,
            lr: t.lr,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            checkpoint_every: t.checkpoint_every,
            seed: t.seed,
        }
    }
}

impl TrainCmdConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training set CSV (`label,x0,…`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct TrainSummary {
    n: usize,
    d: usize,
    hidden: usize,
    outputs: usize,
    params: usize,
    final_loss: f64,
    final_train_acc: f64,
    kkt_residual: f64,
    checkpoints: Vec<usize>,
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg: TrainCmdConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a; hidden, normalize, lr, epochs, weight_decay, checkpoint_every, seed);
    let mut ctx = start(&a.common)?;
    ctx.seed("seed", cfg.seed);
    let raw = data::load_dataset(&ctx.input(&a.data)?)?;
    let ds = if cfg.normalize { raw.normalized()? } else { raw };
    let arch = Arch::new(ds.d, cfg.hidden, experiments::output_width(experiments::classes_of(&ds)))?;
    let (params, rep) = trainer::train(&ds, arch, &cfg.train_config())?;
    save_model(&params, ds.norm.as_ref(), &ctx.output("model.json")?)?;
    write_csv(
        &ctx.output("history.csv")?,
        &["epoch", "loss", "train_acc"].map(String::from),
        rep.history.iter().map(|r| [r.epoch.to_string(), fmt_f64(r.loss), fmt_f64(r.train_acc)]),
    )?;
    for ck in &rep.checkpoints {
        save_model(&ck.params, ds.norm.as_ref(), &ctx.output(&format!("checkpoints/epoch_{:07}.json", ck.epoch))?)?;
    }
    let summary = TrainSummary {
        n: ds.len(),
        d: ds.d,
        hidden: arch.h,
        outputs: arch.c,
        params: arch.num_params(),
        final_loss: trainer::loss(&params, &ds)?,
        final_train_acc: rep.final_train_acc,
        kkt_residual: trainer::kkt_residual(&params, &ds, ActivationMode::HardRelu)?,
        checkpoints: rep.checkpoints.iter().map(|c| c.epoch).collect(),
    };
    ctx.write_json("train_summary.json", &summary)?;
    ctx.finish("train", &cfg)
}

// ---------------------------------------------------------------- reconstruct / sweep

#[derive(Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    penalty_weight: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    backtrack: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

fn write_pools(ctx: &mut Ctx, pools: &[CandidatePool]) -> CliResult<()> {
    save_pools(pools, &ctx.output("pool.csv")?)?;
    save_run_summary(pools, &ctx.output("runs.csv")?)?;
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs) -> CliResult<()> {
    let mut cfg: ReconConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a; m, sigma, lr, lambda_min, alpha, iterations, penalty_weight, backtrack, seed);
    let mut ctx = start(&a.common)?;
    ctx.seed("seed", cfg.seed);
    let (theta, _) = load_victim(&mut ctx, &a.model)?;
    let pool = run_reconstruction(&theta, &cfg, 0)?;
    write_pools(&mut ctx, std::slice::from_ref(&pool))?;
    ctx.finish("reconstruct", &cfg)
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    runs: Option<usize>,
    /// Candidates per run (default 500).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    penalty_weight: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    backtrack: Option<bool>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Serialize)]
struct SweepSummary {
    runs: usize,
    failed: Vec<usize>,
    candidates: usize,
    final_losses: Vec<f64>,
}

pub fn sweep(a: SweepArgs) -> CliResult<()> {
    let mut cfg: SweepSpec = load_config(a.common.config.as_deref())?;
    apply!(cfg, a; runs, m, iterations, master_seed, penalty_weight, backtrack);
    let mut ctx = start(&a.common)?;
    ctx.seed("master_seed", cfg.master_seed);
    let (theta, _) = load_victim(&mut ctx, &a.model)?;
    let pools = run_sweep(&theta, &cfg, SweepWorkers(a.workers))?;
    write_pools(&mut ctx, &pools)?;
    let summary = SweepSummary {
        runs: pools.len(),
        failed: pools.iter().filter(|p| p.failed).map(|p| p.run_id).collect(),
        candidates: pools.iter().map(|p| p.len()).sum(),
        final_losses: pools.iter().map(|p| p.final_loss).collect(),
    };
    ctx.write_json("sweep_summary.json", &summary)?;
    ctx.finish("sweep", &cfg)
}

// ---------------------------------------------------------------- cluster

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterCmdConfig {
    pub maxclust: usize,
    pub k_largest: usize,
    pub mode: RepMode,
    /// Cut levels to score against `--data`; `m` stands for the pool size.
    pub maxclust_sweep: Vec<String>,
    pub cosine_threshold: f64,
}

impl Default for ClusterCmdConfig {
    fn default() -> Self {
        ClusterCmdConfig {
            maxclust: 200,
            k_largest: 20,
            mode: RepMode::Mean,
            maxclust_sweep: Vec::new(),
            cosine_threshold: DEFAULT_COSINE_THRESHOLD,
        }
    }
}

#[derive(Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pool: PathBuf,
    /// Training set, only for scoring the representatives.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model whose normalization stats map `--data` into candidate space.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    maxclust: Option<usize>,
    #[arg(long)]
    k_largest: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RepMode>,
    #[arg(long, value_delimiter = ',')]
    maxclust_sweep: Option<Vec<String>>,
    #[arg(long)]
    cosine_threshold: Option<f64>,
}

#[derive(Serialize)]
struct ClusterSummary {
    candidates: usize,
    linkage: &'static str,
    metric: &'static str,
    maxclust: usize,
    clusters: usize,
    mode: RepMode,
    representative_sizes: Vec<usize>,
    good_representatives: Option<usize>,
    recovered_train: Option<Vec<usize>>,
}

fn parse_levels(levels: &[String], m: usize) -> CliResult<Vec<usize>> {
    levels
        .iter()
        .map(|s| match s.trim() {
            "m" => Ok(m),
            t => t.parse().map_err(|_| Failure::input(format!("bad maxclust level {t:?}"))),
        })
        .collect()
}

pub fn cluster(a: ClusterArgs) -> CliResult<()> {
    let mut cfg: ClusterCmdConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a; maxclust, k_largest, mode, maxclust_sweep, cosine_threshold);
    let mut ctx = start(&a.common)?;
    let pools = load_pools(&ctx.input(&a.pool)?)?;
    let (x, _, _, d) = stack_pools(&pools)?;
    let m = x.len() / d;
    let dist = clustering::cosine_distance_matrix(&x, d)?;
    let result = clustering::linkage(&dist).cut(cfg.maxclust)?;
    let reps = clustering::representatives(&x, d, &result, cfg.k_largest, cfg.mode)?;
    clustering::save_clusters(&result, &ctx.output("clusters.csv")?)?;
    clustering::save_representatives(&reps, &ctx.output("representatives.csv")?)?;

    let norm = match &a.model {
        Some(p) => load_victim(&mut ctx, p)?.1,
        None => None,
    };
    let train = a.data.as_ref().map(|p| load_train(&mut ctx, p, norm.as_ref())).transpose()?;
    let mut summary = ClusterSummary {
        candidates: m,
        linkage: clustering::LINKAGE,
        metric: clustering::METRIC,
        maxclust: cfg.maxclust,
        clusters: result.num_clusters(),
        mode: cfg.mode,
        representative_sizes: reps.iter().map(|r| r.size).collect(),
        good_representatives: None,
        recovered_train: None,
    };
    if let Some(train) = &train {
        let mut recovered = Vec::new();
        let mut good = 0;
        for r in &reps {
            if let Some((i, c)) = evaluation::best_cosine(&r.vector, train.rows()) {
                if c > cfg.cosine_threshold {
                    good += 1;
                    recovered.push(i);
                }
            }
        }
        recovered.sort_unstable();
        recovered.dedup();
        summary.good_representatives = Some(good);
        summary.recovered_train = Some(recovered);
        if !cfg.maxclust_sweep.is_empty() {
            let levels = parse_levels(&cfg.maxclust_sweep, m)?;
            let rows = clustering::maxclust_sweep(&x, d, &levels, cfg.k_largest, train, Some(cfg.cosine_threshold))?;
            clustering::save_sweep(&rows, &ctx.output("maxclust_sweep.csv")?)?;
        }
    } else if !cfg.maxclust_sweep.is_empty() {
        return Err(Failure::input("--maxclust-sweep needs --data to score representatives"));
    }
    ctx.write_json("cluster_summary.json", &summary)?;
    ctx.finish("cluster", &cfg)
}

// ---------------------------------------------------------------- invert

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertCmdConfig {
    pub objective: InversionObjective,
    pub lr: f64,
    pub iterations: usize,
    pub tv_weight: f64,
    pub box_constrain: bool,
    pub seed: u64,
    /// Invert only the first rows of the targets file.
    pub limit: Option<usize>,
}

impl Default for InvertCmdConfig {
    fn default() -> Self {
        let c = InversionConfig::default();
        InvertCmdConfig {
            objective: c.objective,
            lr: c.lr,
            iterations: c.iterations,
            tv_weight: c.tv_weight,
            box_constrain: c.box_constrain,
            seed: c.seed,
            limit: None,
        }
    }
}

#[derive(Args)]
pub struct InvertArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    backbone: PathBuf,
    /// Target embeddings (`label,x0,…`), in backbone output space.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, value_parser = parse_objective)]
    objective: Option<InversionObjective>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    tv_weight: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    box_constrain: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Serialize)]
struct InvertSummary {
    rows: usize,
    final_objective: Vec<f64>,
    final_cosine: Vec<f64>,
}

pub fn invert(a: InvertArgs) -> CliResult<()> {
    let mut cfg: InvertCmdConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a; objective, lr, iterations, tv_weight, box_constrain, seed);
    if a.limit.is_some() {
        cfg.limit = a.limit;
    }
    let mut ctx = start(&a.common)?;
    ctx.seed("seed", cfg.seed);
    let bb = ToyBackbone::load(&ctx.input(&a.backbone)?)?;
    let targets = data::load_dataset(&ctx.input(&a.targets)?)?;
    if targets.d != bb.d {
        return Err(Failure::new("dimension", format!("targets have d = {}, backbone outputs d = {}", targets.d, bb.d)));
    }
    let rows = cfg.limit.map_or(targets.len(), |l| l.min(targets.len()));
    let inv_cfg = InversionConfig {
        objective: cfg.objective,
        lr: cfg.lr,
        iterations: cfg.iterations,
        tv_weight: cfg.tv_weight,
        box_constrain: cfg.box_constrain,
        seed: cfg.seed,
    };
    let flat = &targets.x[..rows * targets.d];
    let invs = backbone::invert_batch(&bb, flat, &inv_cfg, a.workers)?;
    let images: Vec<f64> = invs.iter().flat_map(|i| i.image.iter().copied()).collect();
    let p = ctx.output("inverted.csv")?;
    ctx.output("inverted.json")?;
    data::save_raw_images(&targets.y[..rows], &images, bb.shape, &p)?;
    write_csv(
        &ctx.output("trace.csv")?,
        &["row", "iteration", "objective"].map(String::from),
        invs.iter()
            .enumerate()
            .flat_map(|(r, inv)| inv.trace.iter().enumerate().map(move |(t, v)| [r.to_string(), t.to_string(), fmt_f64(*v)])),
    )?;
    let emb = bb.embed(&images)?;
    let final_cosine = emb
        .chunks(bb.d)
        .zip(flat.chunks(bb.d))
        .map(|(e, t)| evaluation::cosine(e, t).unwrap_or(0.0))
        .collect();
    let summary = InvertSummary {
        rows,
        final_objective: invs.iter().map(|i| *i.trace.last().unwrap_or(&f64::NAN)).collect(),
        final_cosine,
    };
    ctx.write_json("invert_summary.json", &summary)?;
    ctx.finish("invert", &cfg)
}

// ---------------------------------------------------------------- evaluate / report

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCmdConfig {
    pub label_filter: bool,
    pub top_k: usize,
    pub cosine_threshold: f64,
    pub ssim_threshold: f64,
    pub noise_seed: u64,
    /// Also write the candidate → training matching (diagnostic).
    pub candidates_to_train: bool,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        EvalCmdConfig {
            label_filter: false,
            top_k: DEFAULT_TOP_K,
            cosine_threshold: DEFAULT_COSINE_THRESHOLD,
            ssim_threshold: DEFAULT_SSIM_THRESHOLD,
            noise_seed: 0,
            candidates_to_train: false,
        }
    }
}

#[derive(Args)]
pub struct EvalInputs {
    #[arg(long)]
    model: PathBuf,
    /// Training set in raw embedding space; the model's stats normalize it.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    label_filter: Option<bool>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    cosine_threshold: Option<f64>,
    #[arg(long)]
    ssim_threshold: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: EvalInputs,
    /// Training images, for SSIM against `--recon-images`.
    #[arg(long)]
    train_images: Option<PathBuf>,
    /// Inversions of `matched.csv`, one per matched training sample, same order.
    #[arg(long)]
    recon_images: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    candidates_to_train: Option<bool>,
}

#[derive(Serialize)]
struct EvalSummary {
    n: usize,
    rows: usize,
    candidates: usize,
    runs: usize,
    label_filter: bool,
    cosine_threshold: f64,
    good: usize,
    fraction: f64,
    median_best_cosine: f64,
    noise_median_best_cosine: f64,
    spearman_rho: f64,
    spearman_degenerate: bool,
    ssim_threshold: Option<f64>,
    good_with_ssim: Option<usize>,
    top_k: Vec<usize>,
}

struct Evaluated {
    train: EmbeddingDataset,
    norm: Option<NormStats>,
    pools: Vec<CandidatePool>,
    x: Vec<f64>,
    report: EvalReport,
    margin: evaluation::MarginQuality,
    noise_median: f64,
}

fn run_eval(ctx: &mut Ctx, inputs: &EvalInputs, cfg: &EvalCmdConfig) -> CliResult<Evaluated> {
    ctx.seed("noise_seed", cfg.noise_seed);
    let (theta, norm) = load_victim(ctx, &inputs.model)?;
    let train = load_train(ctx, &inputs.data, norm.as_ref())?;
    let pools = load_pools(&ctx.input(&inputs.pool)?)?;
    let (x, _, _, d) = stack_pools(&pools)?;
    let mut report = evaluation::match_pools(&train, &pools, cfg.label_filter, cfg.top_k)?;
    let margin = evaluation::margin_vs_quality(&theta, &train, &mut report)?;
    let noise = evaluation::noise_baseline(&train, x.len() / d, cfg.noise_seed)?;
    Ok(Evaluated { train, norm, pools, x, report, margin, noise_median: evaluation::median(&noise) })
}

fn summarize(ev: &Evaluated, cfg: &EvalCmdConfig, with_ssim: bool) -> CliResult<EvalSummary> {
    let good = evaluation::count_good(&ev.report, cfg.cosine_threshold, None)?;
    let good_ssim = if with_ssim { Some(evaluation::count_good(&ev.report, cfg.cosine_threshold, Some(cfg.ssim_threshold))?.count) } else { None };
    Ok(EvalSummary {
        n: ev.train.len(),
        rows: ev.report.rows.len(),
        candidates: ev.x.len() / ev.train.d,
        runs: ev.pools.len(),
        label_filter: cfg.label_filter,
        cosine_threshold: cfg.cosine_threshold,
        good: good.count,
        fraction: good.fraction,
        median_best_cosine: ev.report.median_best_cosine(),
        noise_median_best_cosine: ev.noise_median,
        spearman_rho: ev.margin.correlation.rho,
        spearman_degenerate: ev.margin.correlation.degenerate,
        ssim_threshold: with_ssim.then_some(cfg.ssim_threshold),
        good_with_ssim: good_ssim,
        top_k: ev.report.top_k.clone(),
    })
}

/// Candidates back in raw embedding space, as `label,x…` rows.
fn save_candidates(ev: &Evaluated, train_rows: &[usize], path: &Path) -> CliResult<()> {
    let d = ev.train.d;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &i in train_rows {
        let row = &ev.report.rows[i];
        if let Some(c) = row.candidate {
            x.extend_from_slice(&ev.x[c * d..(c + 1) * d]);
            y.push(row.label);
        }
    }
    let x = match &ev.norm {
        Some(stats) => stats.invert(&x)?,
        None => x,
    };
    let header: Vec<String> = std::iter::once("label".to_string()).chain(data::indexed_columns("x", d)).collect();
    write_csv(
        path,
        &header,
        y.iter().zip(x.chunks(d)).map(|(l, r)| std::iter::once(l.to_string()).chain(r.iter().map(|v| fmt_f64(*v)))),
    )?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut cfg: EvalCmdConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a.inputs; label_filter, top_k, cosine_threshold, ssim_threshold, noise_seed);
    apply!(cfg, a; candidates_to_train);
    let mut ctx = start(&a.common)?;
    let mut ev = run_eval(&mut ctx, &a.inputs, &cfg)?;

    let with_ssim = match (&a.train_images, &a.recon_images) {
        (Some(ti), Some(ri)) => {
            let train_imgs = data::load_images(&ctx.input(ti)?)?;
            let (_, recon, shape) = data::load_raw_images(&ctx.input(ri)?)?;
            if shape != train_imgs.shape {
                return Err(Failure::new("dimension", "training and reconstructed images differ in shape"));
            }
            if train_imgs.len() != ev.train.len() {
                return Err(Failure::new("dimension", format!("{} training images for {} training samples", train_imgs.len(), ev.train.len())));
            }
            let matched: Vec<usize> = (0..ev.report.rows.len()).filter(|&i| ev.report.rows[i].candidate.is_some()).collect();
            if recon.len() != matched.len() * shape.len() {
                return Err(Failure::new(
                    "dimension",
                    format!("{} reconstructed images for {} matched samples", recon.len() / shape.len(), matched.len()),
                ));
            }
            for (k, &i) in matched.iter().enumerate() {
                // SSIM is defined on the [0, 1] pixel range
                let img: Vec<f64> = recon[k * shape.len()..(k + 1) * shape.len()].iter().map(|v| v.clamp(0.0, 1.0)).collect();
                let t = ev.report.rows[i].train_index;
                ev.report.rows[i].ssim = Some(evaluation::ssim(train_imgs.image(t), &img, shape)?);
            }
            true
        }
        (None, None) => false,
        _ => return Err(Failure::input("--train-images and --recon-images go together")),
    };

    evaluation::save_eval_csv(&ev.report, &ctx.output("eval.csv")?)?;
    evaluation::save_margin_csv(&ev.margin, &ctx.output("margin.csv")?)?;
    let all: Vec<usize> = (0..ev.report.rows.len()).collect();
    save_candidates(&ev, &all, &ctx.output("matched.csv")?)?;
    let top = ev.report.top_k.clone();
    save_candidates(&ev, &top, &ctx.output("topk.csv")?)?;
    if cfg.candidates_to_train {
        let back = evaluation::candidates_to_train(&ev.train, &ev.x)?;
        write_csv(
            &ctx.output("cand_to_train.csv")?,
            &["candidate", "train_index", "cosine"].map(String::from),
            back.iter().enumerate().map(|(j, m)| {
                let (i, c) = m.map_or((String::new(), String::new()), |(i, c)| (i.to_string(), fmt_f64(c)));
                [j.to_string(), i, c]
            }),
        )?;
    }
    let summary = summarize(&ev, &cfg, with_ssim)?;
    ctx.write_json("summary.json", &summary)?;
    ctx.finish("evaluate", &cfg)
}

#[derive(Args)]
pub struct ReportArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: EvalInputs,
    /// Output of `grid`, for the size/width plot data.
    #[arg(long)]
    grid: Option<PathBuf>,
}

fn summary_text(s: &EvalSummary) -> String {
    let mut lines = vec![
        ("training samples", s.n.to_string()),
        ("candidates", s.candidates.to_string()),
        ("runs", s.runs.to_string()),
        ("label filter", s.label_filter.to_string()),
        ("cosine threshold", fmt_f64(s.cosine_threshold)),
        ("good", format!("{} ({:.1}%)", s.good, 100.0 * s.fraction)),
        ("median best cosine", format!("{:.4}", s.median_best_cosine)),
        ("noise median", format!("{:.4}", s.noise_median_best_cosine)),
        ("spearman |margin| vs cosine", format!("{:.4}{}", s.spearman_rho, if s.spearman_degenerate { " (ties)" } else { "" })),
    ];
    if let Some(g) = s.good_with_ssim {
        lines.push(("good with ssim", g.to_string()));
    }
    let w = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    lines.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
}

pub fn report(a: ReportArgs) -> CliResult<()> {
    let mut cfg: EvalCmdConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a.inputs; label_filter, top_k, cosine_threshold, ssim_threshold, noise_seed);
    let mut ctx = start(&a.common)?;
    let ev = run_eval(&mut ctx, &a.inputs, &cfg)?;
    write_csv(
        &ctx.output("fig5.csv")?,
        &["train_index", "label", "margin", "abs_margin", "best_cosine", "good"].map(String::from),
        ev.report.rows.iter().map(|r| {
            let m = r.margin.unwrap_or(f64::NAN);
            [
                r.train_index.to_string(),
                r.label.to_string(),
                fmt_f64(m),
                fmt_f64(m.abs()),
                fmt_f64(r.best_cosine),
                (r.best_cosine > cfg.cosine_threshold).to_string(),
            ]
        }),
    )?;
    if let Some(g) = &a.grid {
        let rows = experiments::load_grid_csv(&ctx.input(g)?)?;
        write_csv(
            &ctx.output("fig10.csv")?,
            &["width", "n", "ratio", "good", "fraction"].map(String::from),
            rows.iter().filter(|r| r.error.is_none()).map(|r| {
                [
                    r.width.to_string(),
                    r.n.to_string(),
                    fmt_f64(r.ratio),
                    r.good.map(|v| v.to_string()).unwrap_or_default(),
                    r.fraction.map(fmt_f64).unwrap_or_default(),
                ]
            }),
        )?;
    }
    let summary = summarize(&ev, &cfg, false)?;
    ctx.write_json("summary.json", &summary)?;
    ctx.write_text("summary.txt", &summary_text(&summary))?;
    ctx.finish("report", &cfg)
}

// ---------------------------------------------------------------- grid / iters

/// Training, sweep and matching knobs shared by `grid` and `iters`.
#[derive(Args)]
pub struct AttackFlags {
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    backtrack: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    label_filter: Option<bool>,
    #[arg(long)]
    cosine_threshold: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCmdConfig {
    pub widths: Vec<usize>,
    pub sizes: Vec<usize>,
    pub d: usize,
    pub c: usize,
    pub sep: f64,
    pub data_seed: u64,
    pub normalize: bool,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub train_seed: u64,
    pub runs: usize,
    pub m: usize,
    pub iterations: usize,
    pub master_seed: u64,
    pub backtrack: bool,
    pub label_filter: bool,
    pub cosine_threshold: f64,
}

impl Default for GridCmdConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SweepSpec::default();
        GridCmdConfig {
            widths: vec![100, 500, 1000],
            sizes: vec![20, 50, 100],
            d: 16,
            c: 2,
            sep: 3.0,
            data_seed: 1,
            normalize: true,
            lr: t.lr,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            train_seed: t.seed,
            runs: s.runs,
            m: s.m,
            iterations: s.iterations,
            master_seed: s.master_seed,
            backtrack: s.backtrack,
            label_filter: false,
            cosine_threshold: DEFAULT_COSINE_THRESHOLD,
        }
    }
}

#[derive(Args)]
pub struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    sep: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Serialize)]
struct GridSummary {
    cells: usize,
    failed: usize,
    kendall_tau_size_vs_fraction: f64,
    degenerate: bool,
}

#[allow(clippy::too_many_arguments)]
fn pipeline_config(
    hidden: usize,
    normalize: bool,
    train: TrainConfig,
    runs: usize,
    m: usize,
    iterations: usize,
    master_seed: u64,
    backtrack: bool,
    label_filter: bool,
    cosine_threshold: f64,
) -> PipelineConfig {
    PipelineConfig {
        hidden,
        normalize,
        train,
        sweep: SweepSpec { runs, m, iterations, master_seed, backtrack, ..SweepSpec::default() },
        label_filter,
        top_k: DEFAULT_TOP_K,
        cosine_threshold,
    }
}

pub fn grid(a: GridArgs) -> CliResult<()> {
    let mut cfg: GridCmdConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a; widths, sizes, d, c, sep, data_seed);
    apply!(cfg, a.attack; normalize, lr, epochs, weight_decay, train_seed, runs, m, iterations, master_seed, backtrack, label_filter,
        cosine_threshold);
    let mut ctx = start(&a.common)?;
    ctx.seed("data_seed", cfg.data_seed);
    ctx.seed("train_seed", cfg.train_seed);
    ctx.seed("master_seed", cfg.master_seed);
    let train = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        weight_decay: cfg.weight_decay,
        checkpoint_every: 0,
        seed: cfg.train_seed,
    };
    let grid_cfg = GridConfig {
        d: cfg.d,
        classes: cfg.c,
        class_sep: cfg.sep,
        data_seed: cfg.data_seed,
        pipeline: pipeline_config(
            0,
            cfg.normalize,
            train,
            cfg.runs,
            cfg.m,
            cfg.iterations,
            cfg.master_seed,
            cfg.backtrack,
            cfg.label_filter,
            cfg.cosine_threshold,
        ),
    };
    let rows = experiments::grid_experiment(&cfg.widths, &cfg.sizes, &grid_cfg, a.workers)?;
    experiments::save_grid_csv(&rows, &ctx.output("grid.csv")?)?;
    let ok = rows.iter().filter(|r| r.fraction.is_some()).count();
    let trend = if ok >= 2 { Some(experiments::grid_size_trend(&rows)?) } else { None };
    let summary = GridSummary {
        cells: rows.len(),
        failed: rows.len() - ok,
        kendall_tau_size_vs_fraction: trend.map_or(0.0, |t| t.rho),
        degenerate: trend.is_none_or(|t| t.degenerate),
    };
    ctx.write_json("grid_summary.json", &summary)?;
    ctx.finish("grid", &cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItersCmdConfig {
    pub hidden: usize,
    pub checkpoint_every: usize,
    pub normalize: bool,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub train_seed: u64,
    pub runs: usize,
    pub m: usize,
    pub iterations: usize,
    pub master_seed: u64,
    pub backtrack: bool,
    pub label_filter: bool,
    pub cosine_threshold: f64,
}

impl Default for ItersCmdConfig {
    fn default() -> Self {
        let g = GridCmdConfig::default();
        ItersCmdConfig {
            hidden: 500,
            checkpoint_every: 1000,
            normalize: g.normalize,
            lr: g.lr,
            epochs: g.epochs,
            weight_decay: g.weight_decay,
            train_seed: g.train_seed,
            runs: g.runs,
            m: g.m,
            iterations: g.iterations,
            master_seed: g.master_seed,
            backtrack: g.backtrack,
            label_filter: g.label_filter,
            cosine_threshold: g.cosine_threshold,
        }
    }
}

#[derive(Args)]
pub struct ItersArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for test accuracy, normalized with the training stats.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Serialize)]
struct ItersSummary {
    checkpoints: Vec<usize>,
    noise_median_best_cosine: f64,
}

pub fn iters(a: ItersArgs) -> CliResult<()> {
    let mut cfg: ItersCmdConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a; hidden, checkpoint_every);
    apply!(cfg, a.attack; normalize, lr, epochs, weight_decay, train_seed, runs, m, iterations, master_seed, backtrack, label_filter,
        cosine_threshold);
    if cfg.checkpoint_every == 0 {
        return Err(Failure::input("checkpoint_every must be >= 1"));
    }
    let mut ctx = start(&a.common)?;
    ctx.seed("train_seed", cfg.train_seed);
    ctx.seed("master_seed", cfg.master_seed);
    let raw = data::load_dataset(&ctx.input(&a.data)?)?;
    let train = if cfg.normalize { raw.normalized()? } else { raw };
    let test = match &a.test {
        Some(p) => Some(load_train(&mut ctx, p, train.norm.as_ref())?),
        None => None,
    };
    let tc = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        weight_decay: cfg.weight_decay,
        checkpoint_every: cfg.checkpoint_every,
        seed: cfg.train_seed,
    };
    let arch = Arch::new(train.d, cfg.hidden, experiments::output_width(experiments::classes_of(&train)))?;
    let (_, rep) = trainer::train(&train, arch, &tc)?;
    let pc = pipeline_config(
        cfg.hidden,
        cfg.normalize,
        tc,
        cfg.runs,
        cfg.m,
        cfg.iterations,
        cfg.master_seed,
        cfg.backtrack,
        cfg.label_filter,
        cfg.cosine_threshold,
    );
    let rows = experiments::iterations_experiment(&rep.checkpoints, &train, test.as_ref(), &pc, a.workers)?;
    experiments::save_iters_csv(&rows, &ctx.output("iters.csv")?)?;
    let noise = evaluation::noise_baseline(&train, (cfg.runs * cfg.m).max(1), experiments::noise_seed(cfg.master_seed))?;
    let summary = ItersSummary {
        checkpoints: rows.iter().map(|r| r.epoch).collect(),
        noise_median_best_cosine: evaluation::median(&noise),
    };
    ctx.write_json("iters_summary.json", &summary)?;
    ctx.finish("iters", &cfg)
}

// ---------------------------------------------------------------- am-baseline

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmCmdConfig {
    pub count: usize,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub label_filter: bool,
    pub cosine_threshold: f64,
}

impl Default for AmCmdConfig {
    fn default() -> Self {
        let c = AmConfig::default();
        AmCmdConfig {
            count: c.count,
            lr: c.lr,
            iterations: c.iterations,
            seed: c.seed,
            label_filter: false,
            cosine_threshold: DEFAULT_COSINE_THRESHOLD,
        }
    }
}

#[derive(Args)]
pub struct AmBaselineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Candidates per class.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    label_filter: Option<bool>,
    #[arg(long)]
    cosine_threshold: Option<f64>,
}

#[derive(Serialize)]
struct AmSummary {
    candidates: usize,
    good: usize,
    fraction: f64,
    median_best_cosine: f64,
}

pub fn am_baseline(a: AmBaselineArgs) -> CliResult<()> {
    let mut cfg: AmCmdConfig = load_config(a.common.config.as_deref())?;
    apply!(cfg, a; count, lr, iterations, seed, label_filter, cosine_threshold);
    let mut ctx = start(&a.common)?;
    ctx.seed("seed", cfg.seed);
    let (theta, norm) = load_victim(&mut ctx, &a.model)?;
    let train = load_train(&mut ctx, &a.data, norm.as_ref())?;
    let am = AmConfig { count: cfg.count, lr: cfg.lr, iterations: cfg.iterations, seed: cfg.seed };
    let pools = experiments::am_baseline_pools(&theta, &am)?;
    let report = evaluation::match_pools(&train, &pools, cfg.label_filter, DEFAULT_TOP_K)?;
    let good = evaluation::count_good(&report, cfg.cosine_threshold, None)?;
    save_pools(&pools, &ctx.output("am_pool.csv")?)?;
    evaluation::save_eval_csv(&report, &ctx.output("eval.csv")?)?;
    let summary = AmSummary {
        candidates: pools.iter().map(|p| p.len()).sum(),
        good: good.count,
        fraction: good.fraction,
        median_best_cosine: report.median_best_cosine(),
    };
    ctx.write_json("summary.json", &summary)?;
    ctx.finish("am-baseline", &cfg)
}
