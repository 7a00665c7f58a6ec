//! Datasets in embedding space and toy image space, normalization, CSV I/O.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg;
use crate::rng;

/// Per-coordinate mean and sample standard deviation (n−1 denominator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NormStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        ensure_dim("sigma length", mu.len(), sigma.len())?;
        if let Some(j) = sigma.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::ZeroVariance(j));
        }
        Ok(NormStats { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `(x − μ) / σ` applied row-wise to a flat `n × d` matrix.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() % d != 0 {
            return Err(Error::Dimension(format!("matrix length {} is not a multiple of {d}", x.len())));
        }
        Ok(x.chunks(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - self.mu[j]) / self.sigma[j]))
            .collect())
    }

    /// Inverse of [`Self::apply`].
    pub fn invert(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() % d != 0 {
            return Err(Error::Dimension(format!("matrix length {} is not a multiple of {d}", x.len())));
        }
        Ok(x.chunks(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| v * self.sigma[j] + self.mu[j]))
            .collect())
    }
}

/// Computes column stats of a flat `n × d` matrix and returns the normalized copy.
pub fn normalize(x: &[f64], d: usize) -> Result<(Vec<f64>, NormStats)> {
    if d == 0 || x.len() % d != 0 {
        return Err(Error::Dimension(format!("matrix length {} is not a multiple of {d}", x.len())));
    }
    let n = x.len() / d;
    if n < 2 {
        return Err(Error::Input(format!("normalization needs at least 2 rows, got {n}")));
    }
    let mut mu = vec![0.0; d];
    for row in x.chunks(d) {
        linalg::axpy(1.0, row, &mut mu);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mu[j]).powi(2);
        }
    }
    let sigma: Vec<f64> = var.iter().map(|v| (v / (n - 1) as f64).sqrt()).collect();
    if let Some(j) = sigma.iter().position(|&s| s == 0.0) {
        return Err(Error::ZeroVariance(j));
    }
    let stats = NormStats::new(mu, sigma)?;
    let out = stats.apply(x)?;
    Ok((out, stats))
}

/// `(x_i, y_i)` pairs in embedding space, stored as a flat row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub x: Vec<f64>,
    pub y: Vec<i64>,
    pub d: usize,
    pub norm: Option<NormStats>,
}

impl EmbeddingDataset {
    pub fn new(x: Vec<f64>, y: Vec<i64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Input("embedding dimension must be positive".into()));
        }
        ensure_dim("embedding matrix length", y.len() * d, x.len())?;
        if y.len() < 2 {
            return Err(Error::Input(format!("dataset needs at least 2 samples, got {}", y.len())));
        }
        if !linalg::all_finite(&x) {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        Ok(EmbeddingDataset { x, y, d, norm: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks(self.d)
    }

    /// Fits normalization stats on this dataset and returns the normalized copy.
    pub fn normalized(&self) -> Result<EmbeddingDataset> {
        let (x, stats) = normalize(&self.x, self.d)?;
        Ok(EmbeddingDataset {
            x,
            y: self.y.clone(),
            d: self.d,
            norm: Some(stats),
        })
    }

    /// Applies previously fitted stats (e.g. from a model file).
    pub fn normalized_with(&self, stats: &NormStats) -> Result<EmbeddingDataset> {
        ensure_dim("normalization dim", self.d, stats.dim())?;
        Ok(EmbeddingDataset {
            x: stats.apply(&self.x)?,
            y: self.y.clone(),
            d: self.d,
            norm: Some(stats.clone()),
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Result<EmbeddingDataset> {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        EmbeddingDataset::new(x, y, self.d)
    }
}

/// Image tensor shape `(channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub fn new(ch: usize, h: usize, w: usize) -> Result<Self> {
        if ch == 0 || h == 0 || w == 0 {
            return Err(Error::Input(format!("image dims must be positive, got {ch}x{h}x{w}")));
        }
        Ok(ImageShape { ch, h, w })
    }

    pub fn len(&self) -> usize {
        self.ch * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat `n × (ch·H·W)` images with pixel values in `[0, 1]`, channel-major per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub s: Vec<f64>,
    pub y: Vec<i64>,
    pub shape: ImageShape,
}

impl ImageDataset {
    pub fn new(s: Vec<f64>, y: Vec<i64>, shape: ImageShape) -> Result<Self> {
        ensure_dim("image matrix length", y.len() * shape.len(), s.len())?;
        if let Some(i) = s.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!("pixel {i} outside [0, 1]: {}", s[i])));
        }
        Ok(ImageDataset { s, y, shape })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let l = self.shape.len();
        &self.s[i * l..(i + 1) * l]
    }
}

/// Class label for index `k` out of `classes`: ±1 when binary, else `k`.
pub fn class_label(k: usize, classes: usize) -> i64 {
    if classes == 2 {
        if k == 0 {
            1
        } else {
            -1
        }
    } else {
        k as i64
    }
}

/// Class index back from a label produced by [`class_label`].
pub fn class_index(label: i64, classes: usize) -> Result<usize> {
    let idx = if classes == 2 {
        match label {
            1 => Some(0),
            -1 => Some(1),
            _ => None,
        }
    } else if label >= 0 && (label as usize) < classes {
        Some(label as usize)
    } else {
        None
    };
    idx.ok_or(Error::Label { label, classes })
}

/// Gaussian mixture: class `k` is `N(class_sep · m_k, I)`.
///
/// Means come in antipodal pairs of random orthonormal directions, so any two
/// are at 90° or 180°. Samples are interleaved by class (`i % classes`).
pub fn gen_gaussian_mixture(n: usize, d: usize, classes: usize, class_sep: f64, seed: u64) -> Result<EmbeddingDataset> {
    if classes < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {classes}")));
    }
    if n == 0 || n % classes != 0 {
        return Err(Error::Input(format!("n = {n} is not a positive multiple of {classes} classes")));
    }
    if !(class_sep > 0.0) {
        return Err(Error::Input(format!("class separation must be > 0, got {class_sep}")));
    }
    let pairs = classes.div_ceil(2);
    if d < pairs {
        return Err(Error::Input(format!("{classes} classes need d >= {pairs}, got {d}")));
    }
    let mut rng = rng::seeded(seed);
    // Gram-Schmidt on Gaussian draws.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(pairs);
    while basis.len() < pairs {
        let mut v = rng::gaussian_vec(&mut rng, d, 1.0);
        for b in &basis {
            let proj = linalg::dot(&v, b);
            linalg::axpy(-proj, b, &mut v);
        }
        let nv = linalg::norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
    }
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            basis[k / 2].iter().map(|v| sign * class_sep * v).collect()
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        x.extend(means[k].iter().map(|m| m + normal.sample(&mut rng)));
        y.push(class_label(k, classes));
    }
    EmbeddingDataset::new(x, y, d)
}

/// Structured toy images: a class-oriented intensity ramp plus a class-placed
/// blob whose channel mix depends on the class, with per-pixel noise, clipped to `[0, 1]`.
pub fn gen_toy_images(n: usize, shape: ImageShape, classes: usize, seed: u64) -> Result<ImageDataset> {
    let shape = ImageShape::new(shape.ch, shape.h, shape.w)?;
    if n == 0 || classes < 2 {
        return Err(Error::Input(format!("need n > 0 and >= 2 classes, got n={n}, classes={classes}")));
    }
    let mut rng = rng::seeded(seed);
    let noise = Normal::new(0.0, 0.08).unwrap();
    let jitter = Normal::new(0.0, 0.05).unwrap();
    let (hh, ww) = (shape.h as f64, shape.w as f64);
    let mut s = Vec::with_capacity(n * shape.len());
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let angle = std::f64::consts::PI * k as f64 / classes as f64;
        let (ca, sa) = (angle.cos(), angle.sin());
        let phase = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        let cy = 0.5 + 0.25 * phase.sin() + jitter.sample(&mut rng);
        let cx = 0.5 + 0.25 * phase.cos() + jitter.sample(&mut rng);
        for c in 0..shape.ch {
            let tint = 0.5 + 0.5 * (phase + 2.0 * std::f64::consts::PI * c as f64 / shape.ch as f64).cos();
            for r in 0..shape.h {
                for q in 0..shape.w {
                    let (v, u) = ((r as f64 + 0.5) / hh, (q as f64 + 0.5) / ww);
                    let ramp = 0.5 + 0.35 * ((u - 0.5) * ca + (v - 0.5) * sa) * 2.0;
                    let dist2 = (u - cx).powi(2) + (v - cy).powi(2);
                    let blob = tint * (-dist2 / 0.02).exp();
                    let px = 0.6 * ramp + 0.5 * blob - 0.1 + noise.sample(&mut rng);
                    s.push(px.clamp(0.0, 1.0));
                }
            }
        }
        y.push(class_label(k, classes));
    }
    ImageDataset::new(s, y, shape)
}

fn write_matrix_csv(path: &Path, header: &[String], labels: &[i64], x: &[f64], d: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    let mut rec = Vec::with_capacity(d + 1);
    for (i, &label) in labels.iter().enumerate() {
        rec.clear();
        rec.push(label.to_string());
        rec.extend(x[i * d..(i + 1) * d].iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Shortest round-trip decimal representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a header and pre-formatted rows.
pub fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for row in rows {
        let rec: Vec<String> = row.into_iter().collect();
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `prefix0, prefix1, …` column names.
pub fn indexed_columns(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (0..count).map(move |j| format!("{prefix}{j}"))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

pub(crate) fn parse_f64(path: &Path, line: u64, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

fn read_matrix_csv(path: &Path) -> Result<(Vec<i64>, Vec<f64>, usize)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
    if header.get(0) != Some("label") {
        return Err(Error::parse(path, 1, "first column must be `label`"));
    }
    let d = header.len() - 1;
    if d == 0 {
        return Err(Error::parse(path, 1, "no feature columns"));
    }
    for (j, h) in header.iter().skip(1).enumerate() {
        if h != format!("x{j}") {
            return Err(Error::parse(path, 1, format!("expected column x{j}, found {h:?}")));
        }
    }
    let mut labels = Vec::new();
    let mut x = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != d + 1 {
            return Err(Error::parse(path, line, format!("expected {} fields, found {}", d + 1, rec.len())));
        }
        let label: i64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad label {:?}", &rec[0])))?;
        labels.push(label);
        for f in rec.iter().skip(1) {
            x.push(parse_f64(path, line, f)?);
        }
    }
    Ok((labels, x, d))
}

fn feature_header(d: usize) -> Vec<String> {
    std::iter::once("label".to_string()).chain((0..d).map(|j| format!("x{j}"))).collect()
}

pub fn save_dataset(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    write_matrix_csv(path, &feature_header(ds.d), &ds.y, &ds.x, ds.d)
}

/// Loads a dataset CSV. Labels must be ±1 or non-negative class indices.
pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let (labels, x, d) = read_matrix_csv(path)?;
    let binary = labels.contains(&-1);
    let bad = |l: i64| if binary { l != 1 && l != -1 } else { l < 0 };
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| bad(l)) {
        // header is line 1
        return Err(Error::parse(path, i as u64 + 2, format!("unknown label {l}")));
    }
    EmbeddingDataset::new(x, labels, d)
}

/// Path of the `{ch,h,w}` sidecar for an image CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn save_images(ds: &ImageDataset, path: &Path) -> Result<()> {
    save_raw_images(&ds.y, &ds.s, ds.shape, path)
}

pub fn load_images(path: &Path) -> Result<ImageDataset> {
    let (labels, s, shape) = load_raw_images(path)?;
    ImageDataset::new(s, labels, shape)
}

/// Like [`save_images`] without the `[0, 1]` pixel range requirement
/// (unconstrained inversions leave it).
pub fn save_raw_images(y: &[i64], s: &[f64], shape: ImageShape, path: &Path) -> Result<()> {
    ensure_dim("image matrix length", y.len() * shape.len(), s.len())?;
    write_matrix_csv(path, &feature_header(shape.len()), y, s, shape.len())?;
    let side = sidecar_path(path);
    let text = serde_json::to_string(&shape).map_err(|e| Error::json(&side, e))?;
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_raw_images(path: &Path) -> Result<(Vec<i64>, Vec<f64>, ImageShape)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let shape: ImageShape = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    let (labels, s, d) = read_matrix_csv(path)?;
    ensure_dim("image width in CSV vs sidecar", shape.len(), d)?;
    Ok((labels, s, shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Least-squares linear probe with a bias column, fitted by normal equations.
    fn linear_probe_accuracy(x: &[f64], y: &[i64], d: usize) -> f64 {
        let n = y.len();
        let cols = d + 1;
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, cols);
        for i in 0..n {
            for j in 0..d {
                a[(i, j)] = x[i * d + j];
            }
            a[(i, d)] = 1.0;
        }
        let t = nalgebra::DVector::from_iterator(n, y.iter().map(|&v| v as f64));
        let ata = a.transpose() * &a + nalgebra::DMatrix::<f64>::identity(cols, cols) * 1e-6;
        let w = ata.cholesky().unwrap().solve(&(a.transpose() * &t));
        let pred = &a * w;
        (0..n).filter(|&i| pred[i] * t[i] > 0.0).count() as f64 / n as f64
    }

    #[test]
    fn mixture_is_separable_and_deterministic() {
        let a = gen_gaussian_mixture(4, 2, 2, 100.0, 1).unwrap();
        assert_eq!(linear_probe_accuracy(&a.x, &a.y, 2), 1.0);
        let b = gen_gaussian_mixture(4, 2, 2, 100.0, 1).unwrap();
        assert_eq!(a, b);
        assert!(gen_gaussian_mixture(5, 2, 2, 1.0, 1).is_err());
    }

    #[test]
    fn mixture_mean_distance() {
        let ds = gen_gaussian_mixture(20, 16, 2, 3.0, 5).unwrap();
        let mut means = [vec![0.0; 16], vec![0.0; 16]];
        for (i, row) in ds.rows().enumerate() {
            let k = class_index(ds.y[i], 2).unwrap();
            linalg::axpy(0.1, row, &mut means[k]);
        }
        let diff: Vec<f64> = means[0].iter().zip(&means[1]).map(|(a, b)| a - b).collect();
        let dist = linalg::norm(&diff);
        assert!((dist - 6.0).abs() < 0.2 * 6.0, "distance {dist}");
    }

    #[test]
    fn mixture_multiclass_labels_balanced() {
        let ds = gen_gaussian_mixture(12, 4, 3, 2.0, 0).unwrap();
        for k in 0..3 {
            assert_eq!(ds.y.iter().filter(|&&l| l == k).count(), 4);
        }
    }

    #[test]
    fn toy_images_clip_and_repeat() {
        let shape = ImageShape::new(1, 8, 8).unwrap();
        let a = gen_toy_images(2, shape, 2, 0).unwrap();
        assert!(a.s.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, gen_toy_images(2, shape, 2, 0).unwrap());
        assert!(ImageShape::new(0, 8, 8).is_err());
    }

    #[test]
    fn toy_images_linearly_separable() {
        let shape = ImageShape::new(3, 16, 16).unwrap();
        let ds = gen_toy_images(100, shape, 2, 9).unwrap();
        let acc = linear_probe_accuracy(&ds.s, &ds.y, shape.len());
        assert!(acc > 0.9, "probe accuracy {acc}");
    }

    #[test]
    fn normalize_two_points() {
        let (z, st) = normalize(&[0.0, 2.0], 1).unwrap();
        assert_eq!(st.mu, vec![1.0]);
        assert!((st.sigma[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((z[0] + 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((z[1] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut r = rng::seeded(3);
        let x = rng::gaussian_vec(&mut r, 30 * 4, 2.0);
        let (z, _) = normalize(&x, 4).unwrap();
        let (z2, st) = normalize(&z, 4).unwrap();
        assert!(st.mu.iter().all(|m| m.abs() < 1e-12));
        assert!(st.sigma.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!(z.iter().zip(&z2).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn normalize_column_stats_match_two_pass() {
        let mut r = rng::seeded(2);
        let x = rng::gaussian_vec(&mut r, 50 * 8, 3.0);
        let (z, st) = normalize(&x, 8).unwrap();
        for j in 0..8 {
            let col: Vec<f64> = (0..50).map(|i| x[i * 8 + j]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 49.0).sqrt();
            assert!((st.mu[j] - mean).abs() < 1e-12 && (st.sigma[j] - sd).abs() < 1e-12);
            let zc: Vec<f64> = (0..50).map(|i| z[i * 8 + j]).collect();
            let zm = zc.iter().sum::<f64>() / 50.0;
            let zs = (zc.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / 49.0).sqrt();
            assert!(zm.abs() < 1e-9 && (zs - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_zero_variance_names_column() {
        let x = [1.0, 5.0, 2.0, 5.0, 3.0, 5.0];
        assert!(matches!(normalize(&x, 2), Err(Error::ZeroVariance(1))));
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = gen_gaussian_mixture(20, 4, 2, 3.0, 1).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn dataset_csv_small_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "label,x0,x1\n1,0.5,2\n-1,3,4e-3\n").unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!((ds.len(), ds.d), (2, 2));

        std::fs::write(&path, "label,x0,x1\n1,0.5,2\n-1,3\n").unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "label,x0\n1,0.5\n-1,abc\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 3, .. })));
        std::fs::write(&path, "label,x0\n1,0.5\n-7,1\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn image_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.csv");
        let ds = gen_toy_images(3, ImageShape::new(2, 4, 4).unwrap(), 3, 4).unwrap();
        save_images(&ds, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(load_images(&path).unwrap(), ds);
    }
}
