//! Training-set-free candidate selection: average-linkage agglomerative
//! clustering under cosine distance, then one representative per large cluster.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, indexed_columns, write_csv, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::evaluation::{best_cosine, DEFAULT_COSINE_THRESHOLD};
use crate::linalg;

/// Largest pool the dense distance matrix is allowed to hold.
pub const MAX_POOL: usize = 20_000;

pub const LINKAGE: &str = "average";
pub const METRIC: &str = "cosine";

/// Upper triangle of a symmetric matrix with zero diagonal, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    m: usize,
    upper: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds from a full `m × m` matrix, reading the strict upper triangle only.
    pub fn from_full(m: usize, full: &[f64]) -> Result<Self> {
        crate::error::ensure_dim("distance matrix entries", m * m, full.len())?;
        let upper = (0..m).flat_map(|i| full[i * m + i + 1..(i + 1) * m].iter().copied()).collect();
        Ok(DistanceMatrix { m, upper })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    fn offset(&self, i: usize) -> usize {
        i * self.m - i * (i + 1) / 2
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.upper[self.offset(i) + j - i - 1],
            std::cmp::Ordering::Greater => self.upper[self.offset(j) + i - j - 1],
        }
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let k = self.offset(a) + b - a - 1;
        self.upper[k] = v;
    }

    pub fn to_full(&self) -> Vec<f64> {
        let m = self.m;
        let mut full = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                full[i * m + j] = self.get(i, j);
            }
        }
        full
    }
}

/// `D_ij = 1 − cos(x_i, x_j)` for the rows of `x` (`m × d`).
pub fn cosine_distance_matrix(x: &[f64], d: usize) -> Result<DistanceMatrix> {
    if d == 0 || x.len() % d != 0 {
        return Err(Error::Dimension(format!("{} values do not form rows of width {d}", x.len())));
    }
    let m = x.len() / d;
    if m > MAX_POOL {
        return Err(Error::Input(format!(
            "pool of {m} candidates exceeds the clustering limit of {MAX_POOL}"
        )));
    }
    let norms: Vec<f64> = x.chunks(d).map(linalg::norm_sq).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm(i));
    }
    let mut upper = vec![0.0; m * m.saturating_sub(1) / 2];
    let mut rows: Vec<(usize, &mut [f64])> = Vec::with_capacity(m);
    let mut rest = upper.as_mut_slice();
    for i in 0..m {
        let (head, tail) = rest.split_at_mut(m - i - 1);
        rows.push((i, head));
        rest = tail;
    }
    rows.into_par_iter().for_each(|(i, out)| {
        let xi = &x[i * d..(i + 1) * d];
        for (k, o) in out.iter_mut().enumerate() {
            let j = i + 1 + k;
            *o = 1.0 - linalg::cosine_with(xi, norms[i], &x[j * d..(j + 1) * d], norms[j]).expect("nonzero norms");
        }
    });
    Ok(DistanceMatrix { m, upper })
}

/// One merge of the dendrogram; clusters are named by their smallest member.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

/// Full merge sequence of average-linkage clustering.
#[derive(Clone, Debug, PartialEq)]
pub struct Dendrogram {
    pub m: usize,
    pub merges: Vec<Merge>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster id per candidate; ids are numbered by smallest member.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    pub maxclust: usize,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }
}

/// Average linkage via the Lance–Williams update with cached nearest neighbors.
///
/// The closest pair merges first; ties go to the smallest `(a, b)`. The
/// merged cluster keeps slot `a`.
pub fn linkage(dist: &DistanceMatrix) -> Dendrogram {
    let m = dist.len();
    let mut d = dist.clone();
    let mut size = vec![1usize; m];
    let mut active = vec![true; m];
    // nearest active neighbor with a larger index
    let mut nn = vec![usize::MAX; m];
    let mut nnd = vec![f64::INFINITY; m];
    let scan = |d: &DistanceMatrix, active: &[bool], i: usize| -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in i + 1..m {
            if active[j] {
                let v = d.get(i, j);
                if v < best.1 {
                    best = (j, v);
                }
            }
        }
        best
    };
    for i in 0..m {
        (nn[i], nnd[i]) = scan(&d, &active, i);
    }
    let mut merges = Vec::with_capacity(m.saturating_sub(1));
    for _ in 1..m {
        let mut a = usize::MAX;
        for i in 0..m {
            if active[i] && nn[i] != usize::MAX && (a == usize::MAX || nnd[i] < nnd[a]) {
                a = i;
            }
        }
        let b = nn[a];
        let distance = nnd[a];
        let (na, nb) = (size[a] as f64, size[b] as f64);
        active[b] = false;
        for k in 0..m {
            if active[k] && k != a {
                let v = (na * d.get(k, a) + nb * d.get(k, b)) / (na + nb);
                d.set(k, a, v);
            }
        }
        size[a] += size[b];
        merges.push(Merge { a, b, distance, size: size[a] });

        for k in 0..m {
            if !active[k] {
                continue;
            }
            if k == a || nn[k] == a || nn[k] == b {
                (nn[k], nnd[k]) = scan(&d, &active, k);
            } else if k < a {
                let v = d.get(k, a);
                if v < nnd[k] || (v == nnd[k] && a < nn[k]) {
                    nn[k] = a;
                    nnd[k] = v;
                }
            }
        }
    }
    Dendrogram { m, merges }
}

impl Dendrogram {
    /// Replays merges until `min(maxclust, m)` clusters remain.
    pub fn cut(&self, maxclust: usize) -> Result<ClusterResult> {
        if maxclust == 0 {
            return Err(Error::Input("maxclust must be >= 1".into()));
        }
        let m = self.m;
        if m == 0 {
            return Err(Error::Input("cannot cluster an empty pool".into()));
        }
        let k = maxclust.min(m);
        let mut parent: Vec<usize> = (0..m).collect();
        fn root(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for mg in &self.merges[..m - k] {
            let (ra, rb) = (root(&mut parent, mg.a), root(&mut parent, mg.b));
            parent[rb] = ra;
        }
        let mut id_of_root = vec![usize::MAX; m];
        let mut sizes = Vec::with_capacity(k);
        let mut assignment = vec![0; m];
        for i in 0..m {
            let r = root(&mut parent, i);
            if id_of_root[r] == usize::MAX {
                id_of_root[r] = sizes.len();
                sizes.push(0);
            }
            assignment[i] = id_of_root[r];
            sizes[id_of_root[r]] += 1;
        }
        Ok(ClusterResult { assignment, sizes, maxclust })
    }
}

/// Clusters into exactly `min(maxclust, m)` groups.
pub fn agglomerate(dist: &DistanceMatrix, maxclust: usize) -> Result<ClusterResult> {
    if maxclust == 0 {
        return Err(Error::Input("maxclust must be >= 1".into()));
    }
    linkage(dist).cut(maxclust)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepMode {
    Mean,
    NearestToMean,
}

impl RepMode {
    pub fn name(&self) -> &'static str {
        match self {
            RepMode::Mean => "mean",
            RepMode::NearestToMean => "nearest_to_mean",
        }
    }
}

impl std::str::FromStr for RepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(RepMode::Mean),
            "nearest_to_mean" | "nearest" => Ok(RepMode::NearestToMean),
            _ => Err(Error::Input(format!("unknown representative mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Representative {
    pub cluster: usize,
    pub size: usize,
    pub vector: Vec<f64>,
    /// Chosen member under `NearestToMean`.
    pub member: Option<usize>,
}

/// Cosine that treats a zero vector as orthogonal to everything.
fn cosine_or_zero(u: &[f64], v: &[f64]) -> f64 {
    linalg::cosine(u, v).unwrap_or(0.0)
}

/// The `k_largest` clusters (size ties → smaller id) and one vector for each.
pub fn representatives(x: &[f64], d: usize, result: &ClusterResult, k_largest: usize, mode: RepMode) -> Result<Vec<Representative>> {
    if k_largest == 0 {
        return Err(Error::Input("k_largest must be >= 1".into()));
    }
    crate::error::ensure_dim("pool rows vs assignment", result.assignment.len() * d, x.len())?;
    let mut order: Vec<usize> = (0..result.sizes.len()).collect();
    order.sort_by(|&a, &b| result.sizes[b].cmp(&result.sizes[a]).then(a.cmp(&b)));
    order.truncate(k_largest);

    let mut sums = vec![vec![0.0; d]; result.sizes.len()];
    for (i, &c) in result.assignment.iter().enumerate() {
        linalg::axpy(1.0, &x[i * d..(i + 1) * d], &mut sums[c]);
    }
    Ok(order
        .into_iter()
        .map(|c| {
            let size = result.sizes[c];
            let mean: Vec<f64> = sums[c].iter().map(|s| s / size as f64).collect();
            match mode {
                RepMode::Mean => Representative { cluster: c, size, vector: mean, member: None },
                RepMode::NearestToMean => {
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for i in result.members(c) {
                        let s = cosine_or_zero(&x[i * d..(i + 1) * d], &mean);
                        if s > best.1 {
                            best = (i, s);
                        }
                    }
                    let i = best.0;
                    Representative { cluster: c, size, vector: x[i * d..(i + 1) * d].to_vec(), member: Some(i) }
                }
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub maxclust: usize,
    pub mode: RepMode,
    /// Representatives whose nearest training sample clears the threshold.
    pub good: usize,
    /// Distinct training samples matched by those representatives.
    pub recovered: Vec<usize>,
}

/// Clusters once, cuts at every `maxclust`, and scores both representative
/// modes against the training set. Selection never reads `train`.
pub fn maxclust_sweep(
    x: &[f64],
    d: usize,
    maxclusts: &[usize],
    k_largest: usize,
    train: &EmbeddingDataset,
    threshold: Option<f64>,
) -> Result<Vec<SweepRow>> {
    crate::error::ensure_dim("candidate vs training dimension", train.d, d)?;
    let dist = cosine_distance_matrix(x, d)?;
    if dist.is_empty() {
        return Err(Error::Input("cannot cluster an empty pool".into()));
    }
    let tree = linkage(&dist);
    let threshold = threshold.unwrap_or(DEFAULT_COSINE_THRESHOLD);
    let mut rows = Vec::new();
    for &mc in maxclusts {
        let result = tree.cut(mc)?;
        for mode in [RepMode::Mean, RepMode::NearestToMean] {
            let reps = representatives(x, d, &result, k_largest, mode)?;
            let mut good = 0;
            let mut recovered = Vec::new();
            for r in &reps {
                if let Some((i, c)) = best_cosine(&r.vector, train.rows()) {
                    if c > threshold {
                        good += 1;
                        recovered.push(i);
                    }
                }
            }
            recovered.sort_unstable();
            recovered.dedup();
            rows.push(SweepRow { maxclust: mc, mode, good, recovered });
        }
    }
    Ok(rows)
}

pub fn save_clusters(result: &ClusterResult, path: &Path) -> Result<()> {
    let header = ["cand_id".to_string(), "cluster_id".to_string()];
    write_csv(path, &header, result.assignment.iter().enumerate().map(|(i, c)| [i.to_string(), c.to_string()]))
}

pub fn save_representatives(reps: &[Representative], path: &Path) -> Result<()> {
    let d = reps.first().map(|r| r.vector.len()).unwrap_or(0);
    let header: Vec<String> = ["cluster_id".to_string(), "size".to_string()].into_iter().chain(indexed_columns("x", d)).collect();
    write_csv(
        path,
        &header,
        reps.iter().map(|r| [r.cluster.to_string(), r.size.to_string()].into_iter().chain(r.vector.iter().map(|v| fmt_f64(*v)))),
    )
}

pub fn save_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let header = ["maxclust", "mode", "good", "recovered"].map(String::from);
    write_csv(
        path,
        &header,
        rows.iter().map(|r| [r.maxclust.to_string(), r.mode.name().to_string(), r.good.to_string(), r.recovered.len().to_string()]),
    )
}
