//! Matching candidates to training samples and scoring the matches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, write_csv, EmbeddingDataset, ImageShape};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg;
use crate::model::MlpParams;
use crate::reconstruction::{stack_pools, CandidatePool};
use crate::rng;

pub const DEFAULT_COSINE_THRESHOLD: f64 = 0.75;
pub const DEFAULT_SSIM_THRESHOLD: f64 = 0.4;
/// Matched candidates handed to inversion.
pub const DEFAULT_TOP_K: usize = 40;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    ensure_dim("cosine operands", u.len(), v.len())?;
    let (nu, nv) = (linalg::norm_sq(u), linalg::norm_sq(v));
    if nu == 0.0 {
        return Err(Error::ZeroNorm(0));
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm(1));
    }
    Ok(linalg::cosine_with(u, nu, v, nv).expect("nonzero norms"))
}

/// Index and cosine of the row most similar to `v`; zero rows are skipped and
/// ties go to the smaller index.
pub fn best_cosine<'a>(v: &[f64], rows: impl Iterator<Item = &'a [f64]>) -> Option<(usize, f64)> {
    let nv = linalg::norm_sq(v);
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.enumerate() {
        let Some(c) = linalg::cosine_with(v, nv, r, linalg::norm_sq(r)) else { continue };
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best
}

/// Global single-window SSIM per channel, averaged over channels.
pub fn ssim(a: &[f64], b: &[f64], shape: ImageShape) -> Result<f64> {
    ensure_dim("ssim image a", shape.len(), a.len())?;
    ensure_dim("ssim image b", shape.len(), b.len())?;
    let px = shape.h * shape.w;
    let total: f64 = a
        .chunks(px)
        .zip(b.chunks(px))
        .map(|(ca, cb)| {
            let n = px as f64;
            let ma = ca.iter().sum::<f64>() / n;
            let mb = cb.iter().sum::<f64>() / n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (x, y) in ca.iter().zip(cb) {
                va += (x - ma) * (x - ma);
                vb += (y - mb) * (y - mb);
                cov += (x - ma) * (y - mb);
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / shape.ch as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub train_index: usize,
    pub label: i64,
    /// Filled in by [`margin_vs_quality`].
    pub margin: Option<f64>,
    /// Index into the stacked candidate matrix.
    pub candidate: Option<usize>,
    pub run_id: Option<usize>,
    pub cand_id: Option<usize>,
    /// −1 when no admissible candidate exists.
    pub best_cosine: f64,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MatchRow>,
    /// Training indices of the `k` best-matched rows, best first.
    pub top_k: Vec<usize>,
    pub label_filter: bool,
}

impl EvalReport {
    pub fn best_cosines(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.best_cosine).collect()
    }

    pub fn median_best_cosine(&self) -> f64 {
        median(&self.best_cosines())
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// For each training sample, the candidate with the highest cosine
/// (same-label candidates only when `label_filter`).
pub fn match_candidates(train: &EmbeddingDataset, x: &[f64], labels: &[i64], label_filter: bool, top_k: usize) -> Result<EvalReport> {
    let d = train.d;
    if labels.is_empty() {
        return Err(Error::Input("no candidates to match against".into()));
    }
    ensure_dim("candidate matrix", labels.len() * d, x.len())?;
    let norms: Vec<f64> = x.chunks(d).map(linalg::norm_sq).collect();
    let rows: Vec<MatchRow> = (0..train.len())
        .map(|i| {
            let t = train.row(i);
            let nt = linalg::norm_sq(t);
            let mut best: Option<(usize, f64)> = None;
            for (j, c) in x.chunks(d).enumerate() {
                if label_filter && labels[j] != train.y[i] {
                    continue;
                }
                let Some(s) = linalg::cosine_with(t, nt, c, norms[j]) else { continue };
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            MatchRow {
                train_index: i,
                label: train.y[i],
                margin: None,
                candidate: best.map(|b| b.0),
                run_id: None,
                cand_id: None,
                best_cosine: best.map_or(-1.0, |b| b.1),
                ssim: None,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].best_cosine.total_cmp(&rows[a].best_cosine).then(a.cmp(&b)));
    order.truncate(top_k);
    Ok(EvalReport { rows, top_k: order, label_filter })
}

/// [`match_candidates`] over stacked pools, recording `(run_id, cand_id)`.
pub fn match_pools(train: &EmbeddingDataset, pools: &[CandidatePool], label_filter: bool, top_k: usize) -> Result<EvalReport> {
    let (x, tags, y, d) = stack_pools(pools)?;
    ensure_dim("candidate vs training dimension", train.d, d)?;
    let mut report = match_candidates(train, &x, &y, label_filter, top_k)?;
    for r in &mut report.rows {
        if let Some(j) = r.candidate {
            r.run_id = Some(tags[j].0);
            r.cand_id = Some(tags[j].1);
        }
    }
    Ok(report)
}

/// Diagnostic reverse direction: each candidate's nearest training sample.
pub fn candidates_to_train(train: &EmbeddingDataset, x: &[f64]) -> Result<Vec<Option<(usize, f64)>>> {
    let d = train.d;
    if x.len() % d != 0 {
        return Err(Error::Dimension(format!("{} values do not form rows of width {d}", x.len())));
    }
    Ok(x.chunks(d).map(|c| best_cosine(c, train.rows())).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodCounts {
    pub count: usize,
    pub fraction: f64,
    pub cosine_threshold: f64,
    pub ssim_threshold: Option<f64>,
}

/// Training samples whose best match is strictly above the threshold(s).
pub fn count_good(report: &EvalReport, cosine_threshold: f64, ssim_threshold: Option<f64>) -> Result<GoodCounts> {
    if report.rows.is_empty() {
        return Err(Error::Input("empty report".into()));
    }
    let count = report
        .rows
        .iter()
        .filter(|r| r.best_cosine > cosine_threshold && ssim_threshold.is_none_or(|t| r.ssim.is_some_and(|s| s > t)))
        .count();
    Ok(GoodCounts {
        count,
        fraction: count as f64 / report.rows.len() as f64,
        cosine_threshold,
        ssim_threshold,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Set when a variable is constant and the coefficient is undefined (`rho` is then 0).
    pub degenerate: bool,
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<Correlation> {
    ensure_dim("spearman operands", a.len(), b.len())?;
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if a.len() < 2 || saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation { rho: 0.0, degenerate: true });
    }
    Ok(Correlation { rho: sab / (saa * sbb).sqrt(), degenerate: false })
}

/// Kendall τ-b.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<Correlation> {
    ensure_dim("kendall operands", a.len(), b.len())?;
    let (mut conc, mut disc, mut ta, mut tb) = (0.0f64, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let (da, db) = (a[i] - a[j], b[i] - b[j]);
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ta += 1.0;
            } else if db == 0.0 {
                tb += 1.0;
            } else if (da > 0.0) == (db > 0.0) {
                conc += 1.0;
            } else {
                disc += 1.0;
            }
        }
    }
    let denom = ((conc + disc + ta) * (conc + disc + tb)).sqrt();
    if denom == 0.0 {
        return Ok(Correlation { rho: 0.0, degenerate: true });
    }
    Ok(Correlation { rho: (conc - disc) / denom, degenerate: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginQuality {
    /// `(margin, best cosine)` per training sample.
    pub points: Vec<(f64, f64)>,
    /// Spearman ρ between |margin| and best cosine.
    pub correlation: Correlation,
}

/// Fills in margins and correlates their magnitude with match quality.
pub fn margin_vs_quality(theta: &MlpParams, train: &EmbeddingDataset, report: &mut EvalReport) -> Result<MarginQuality> {
    ensure_dim("report rows vs training samples", train.len(), report.rows.len())?;
    let mut points = Vec::with_capacity(train.len());
    for r in &mut report.rows {
        let m = theta.margin(train.row(r.train_index), r.label)?;
        r.margin = Some(m);
        points.push((m, r.best_cosine));
    }
    let abs: Vec<f64> = points.iter().map(|p| p.0.abs()).collect();
    let cos: Vec<f64> = points.iter().map(|p| p.1).collect();
    Ok(MarginQuality { correlation: spearman(&abs, &cos)?, points })
}

/// Best cosines of a pool of `count` N(0, 1) vectors against each training sample.
pub fn noise_baseline(train: &EmbeddingDataset, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Input("noise pool must be nonempty".into()));
    }
    let x = rng::gaussian_vec(&mut rng::seeded(seed), count * train.d, 1.0);
    let labels = vec![0; count];
    Ok(match_candidates(train, &x, &labels, false, 0)?.best_cosines())
}

pub fn save_eval_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let header = ["train_index", "label", "margin", "candidate", "run_id", "cand_id", "best_cosine", "ssim"].map(String::from);
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    write_csv(
        path,
        &header,
        report.rows.iter().map(|r| {
            [
                r.train_index.to_string(),
                r.label.to_string(),
                r.margin.map(fmt_f64).unwrap_or_default(),
                opt(r.candidate),
                opt(r.run_id),
                opt(r.cand_id),
                fmt_f64(r.best_cosine),
                r.ssim.map(fmt_f64).unwrap_or_default(),
            ]
        }),
    )
}

/// Plot data: one `(margin, best_cosine)` row per training sample.
pub fn save_margin_csv(mq: &MarginQuality, path: &Path) -> Result<()> {
    let header = ["margin", "best_cosine"].map(String::from);
    write_csv(path, &header, mq.points.iter().map(|(m, c)| [fmt_f64(*m), fmt_f64(*c)]))
}
