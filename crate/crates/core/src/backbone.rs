//! Frozen toy feature extractor `F(s) = A2 · tanh(A1 · s + c1)` and
//! embedding inversion over raw pixels.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, ImageShape};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{self, gemm, Op};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub shape: ImageShape,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    /// `k × d_s`, row-major.
    a1: Vec<f64>,
    c1: Vec<f64>,
    /// `d × k`, row-major.
    a2: Vec<f64>,
}

impl ToyBackbone {
    /// Gaussian weights scaled by fan-in; `c1 ~ N(0, 0.1²)`.
    pub fn new(shape: ImageShape, d: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || k == 0 || shape.is_empty() {
            return Err(Error::Input("backbone dimensions must be positive".into()));
        }
        let ds = shape.len();
        let mut r = rng::seeded(seed);
        let a1 = rng::gaussian_vec(&mut r, k * ds, 1.0 / (ds as f64).sqrt());
        let c1 = rng::gaussian_vec(&mut r, k, 0.1);
        let a2 = rng::gaussian_vec(&mut r, d * k, 1.0 / (k as f64).sqrt());
        Ok(ToyBackbone { shape, d, k, seed, a1, c1, a2 })
    }

    pub fn from_parts(shape: ImageShape, d: usize, k: usize, seed: u64, a1: Vec<f64>, c1: Vec<f64>, a2: Vec<f64>) -> Result<Self> {
        ensure_dim("A1 entries", k * shape.len(), a1.len())?;
        ensure_dim("c1 entries", k, c1.len())?;
        ensure_dim("A2 entries", d * k, a2.len())?;
        if !(linalg::all_finite(&a1) && linalg::all_finite(&c1) && linalg::all_finite(&a2)) {
            return Err(Error::NonFinite("backbone weights".into()));
        }
        Ok(ToyBackbone { shape, d, k, seed, a1, c1, a2 })
    }

    pub fn a1(&self) -> &[f64] {
        &self.a1
    }

    pub fn c1(&self) -> &[f64] {
        &self.c1
    }

    pub fn a2(&self) -> &[f64] {
        &self.a2
    }

    pub fn input_len(&self) -> usize {
        self.shape.len()
    }

    /// Embeds `n` images stored row-major as `n × d_s`.
    pub fn embed(&self, images: &[f64]) -> Result<Vec<f64>> {
        let ds = self.input_len();
        if images.len() % ds != 0 {
            return Err(Error::Dimension(format!("{} values do not form images of {ds} pixels", images.len())));
        }
        let n = images.len() / ds;
        let mut hidden = vec![0.0; n * self.k];
        for row in hidden.chunks_mut(self.k) {
            row.copy_from_slice(&self.c1);
        }
        gemm(n, ds, self.k, 1.0, images, Op::N, &self.a1, Op::T, 1.0, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = vec![0.0; n * self.d];
        gemm(n, self.k, self.d, 1.0, &hidden, Op::N, &self.a2, Op::T, 0.0, &mut out);
        Ok(out)
    }

    pub fn embed_dataset(&self, images: &crate::data::ImageDataset) -> Result<EmbeddingDataset> {
        ensure_dim("image size vs backbone input", self.input_len(), images.shape.len())?;
        EmbeddingDataset::new(self.embed(&images.s)?, images.y.clone(), self.d)
    }

    /// `F(ν)` plus the hidden activations needed for the backward pass.
    fn forward_one(&self, nu: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        linalg::matvec(&self.a1, self.k, self.input_len(), nu, hidden);
        for (h, c) in hidden.iter_mut().zip(&self.c1) {
            *h = (*h + c).tanh();
        }
        linalg::matvec(&self.a2, self.d, self.k, hidden, out);
    }

    /// `∂(gᵀF(ν))/∂ν` given the forward hidden activations.
    fn pullback(&self, hidden: &[f64], g: &[f64], tmp: &mut [f64], grad: &mut [f64]) {
        linalg::matvec_t(&self.a2, self.d, self.k, g, tmp);
        for (t, h) in tmp.iter_mut().zip(hidden) {
            *t *= 1.0 - h * h;
        }
        linalg::matvec_t(&self.a1, self.k, self.input_len(), tmp, grad);
    }

    /// Vector–Jacobian product `J_F(ν)ᵀ g`.
    pub fn vjp(&self, nu: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("image size", self.input_len(), nu.len())?;
        ensure_dim("cotangent size", self.d, g.len())?;
        let mut hidden = vec![0.0; self.k];
        let mut out = vec![0.0; self.d];
        self.forward_one(nu, &mut hidden, &mut out);
        let mut tmp = vec![0.0; self.k];
        let mut grad = vec![0.0; self.input_len()];
        self.pullback(&hidden, g, &mut tmp, &mut grad);
        Ok(grad)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: ToyBackbone = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        ToyBackbone::from_parts(raw.shape, raw.d, raw.k, raw.seed, raw.a1, raw.c1, raw.a2)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionObjective {
    /// Maximize `cos(F(ν), target)`.
    Cosine,
    /// Minimize `‖F(ν) − target‖² / d`.
    Mse,
}

impl std::str::FromStr for InversionObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(InversionObjective::Cosine),
            "mse" => Ok(InversionObjective::Mse),
            _ => Err(Error::Input(format!("unknown inversion objective {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub objective: InversionObjective,
    pub lr: f64,
    pub iterations: usize,
    pub tv_weight: f64,
    /// Clamp pixels to `[0, 1]` after every step.
    pub box_constrain: bool,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            objective: InversionObjective::Cosine,
            lr: 1.0,
            iterations: 5000,
            tv_weight: 0.0,
            box_constrain: false,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Input(format!("inversion lr must be > 0, got {}", self.lr)));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(Error::Input(format!("tv weight must be >= 0, got {}", self.tv_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub image: Vec<f64>,
    /// Objective at the start and after every step: cosine − tv·TV for
    /// `Cosine` (maximized), mse + tv·TV for `Mse` (minimized).
    pub trace: Vec<f64>,
}

/// Smooth total variation: squared differences between horizontal and
/// vertical neighbors within each channel. Adds `weight · ∇TV` to `grad`.
pub fn total_variation(img: &[f64], shape: ImageShape, weight: f64, grad: Option<&mut [f64]>) -> f64 {
    let (h, w) = (shape.h, shape.w);
    let mut tv = 0.0;
    let mut grad = grad;
    for c in 0..shape.ch {
        let base = c * h * w;
        for i in 0..h {
            for j in 0..w {
                let p = base + i * w + j;
                for q in [(j + 1 < w).then(|| p + 1), (i + 1 < h).then(|| p + w)].into_iter().flatten() {
                    let diff = img[q] - img[p];
                    tv += diff * diff;
                    if let Some(g) = grad.as_deref_mut() {
                        g[q] += 2.0 * weight * diff;
                        g[p] -= 2.0 * weight * diff;
                    }
                }
            }
        }
    }
    tv
}

/// Cosine targets are reduced to their direction at single precision, so
/// every positive rescaling of a target yields the same objective function.
fn canonical_direction(target: &[f64]) -> Result<Vec<f64>> {
    let n = linalg::norm(target);
    if n == 0.0 {
        return Err(Error::Input("cosine inversion needs a nonzero target".into()));
    }
    Ok(target.iter().map(|v| (v / n) as f32 as f64).collect())
}

struct Objective<'a> {
    bb: &'a ToyBackbone,
    kind: InversionObjective,
    target: Vec<f64>,
    target_norm_sq: f64,
    tv_weight: f64,
    hidden: Vec<f64>,
    out: Vec<f64>,
    g_out: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(bb: &'a ToyBackbone, target: &[f64], kind: InversionObjective, tv_weight: f64) -> Result<Self> {
        ensure_dim("inversion target", bb.d, target.len())?;
        if !linalg::all_finite(target) {
            return Err(Error::NonFinite("inversion target".into()));
        }
        let target = match kind {
            InversionObjective::Cosine => canonical_direction(target)?,
            InversionObjective::Mse => target.to_vec(),
        };
        Ok(Objective {
            bb,
            kind,
            target_norm_sq: linalg::norm_sq(&target),
            target,
            tv_weight,
            hidden: vec![0.0; bb.k],
            out: vec![0.0; bb.d],
            g_out: vec![0.0; bb.d],
            tmp: vec![0.0; bb.k],
        })
    }

    /// Reported objective and the gradient of the minimized form.
    fn eval(&mut self, nu: &[f64], grad: Option<&mut [f64]>) -> f64 {
        self.bb.forward_one(nu, &mut self.hidden, &mut self.out);
        let d = self.bb.d as f64;
        let (value, sign) = match self.kind {
            InversionObjective::Cosine => {
                let f2 = linalg::norm_sq(&self.out);
                let denom = (f2 * self.target_norm_sq).sqrt();
                let c = if denom == 0.0 { 0.0 } else { linalg::dot(&self.out, &self.target) / denom };
                if denom > 0.0 {
                    let inv = 1.0 / denom;
                    for ((g, t), f) in self.g_out.iter_mut().zip(&self.target).zip(&self.out) {
                        *g = -(t * inv - c * f / f2);
                    }
                } else {
                    self.g_out.iter_mut().for_each(|g| *g = 0.0);
                }
                (c, -1.0)
            }
            InversionObjective::Mse => {
                let mut s = 0.0;
                for ((g, t), f) in self.g_out.iter_mut().zip(&self.target).zip(&self.out) {
                    let r = f - t;
                    s += r * r;
                    *g = 2.0 * r / d;
                }
                (s / d, 1.0)
            }
        };
        let tv = match grad {
            Some(g) => {
                self.bb.pullback(&self.hidden, &self.g_out, &mut self.tmp, g);
                if self.tv_weight > 0.0 {
                    total_variation(nu, self.bb.shape, self.tv_weight, Some(g))
                } else {
                    0.0
                }
            }
            None if self.tv_weight > 0.0 => total_variation(nu, self.bb.shape, self.tv_weight, None),
            None => 0.0,
        };
        value + sign * self.tv_weight * tv
    }
}

/// Objective value at `nu` with no optimization (cosine − tv·TV, or mse + tv·TV).
pub fn inversion_objective(bb: &ToyBackbone, nu: &[f64], target: &[f64], kind: InversionObjective, tv_weight: f64) -> Result<f64> {
    ensure_dim("image size", bb.input_len(), nu.len())?;
    Ok(Objective::new(bb, target, kind, tv_weight)?.eval(nu, None))
}

/// Gradient descent on pixels from a seeded `N(0, 0.1²)` start.
pub fn invert(bb: &ToyBackbone, target: &[f64], cfg: &InversionConfig) -> Result<Inversion> {
    cfg.validate()?;
    let mut obj = Objective::new(bb, target, cfg.objective, cfg.tv_weight)?;
    let mut nu = rng::gaussian_vec(&mut rng::seeded(cfg.seed), bb.input_len(), 0.1);
    if cfg.box_constrain {
        nu.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    let mut grad = vec![0.0; nu.len()];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        trace.push(obj.eval(&nu, Some(&mut grad)));
        for (v, g) in nu.iter_mut().zip(&grad) {
            *v -= cfg.lr * g;
        }
        if cfg.box_constrain {
            nu.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        if !linalg::all_finite(&nu) {
            return Err(Error::NonFinite("inversion iterate".into()));
        }
    }
    trace.push(obj.eval(&nu, None));
    Ok(Inversion { image: nu, trace })
}

/// Inverts every row of `targets`; row `i` uses seed `derive_seed(cfg.seed, i)`.
pub fn invert_batch(bb: &ToyBackbone, targets: &[f64], cfg: &InversionConfig, workers: usize) -> Result<Vec<Inversion>> {
    if targets.len() % bb.d != 0 {
        return Err(Error::Dimension(format!("{} values do not form targets of width {}", targets.len(), bb.d)));
    }
    let one = |(i, t): (usize, &[f64])| {
        let cfg = InversionConfig { seed: rng::derive_seed(cfg.seed, i as u64), ..cfg.clone() };
        invert(bb, t, &cfg)
    };
    let rows: Vec<(usize, &[f64])> = targets.chunks(bb.d).enumerate().collect();
    if workers <= 1 {
        return rows.into_iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Input(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| rows.into_par_iter().map(one).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRatio {
    pub train_index: usize,
    pub candidate: usize,
    pub cosine: f64,
    pub train_norm: f64,
    pub candidate_norm: f64,
    /// `‖x̂‖ / ‖F(s)‖`.
    pub ratio: f64,
}

/// Each training embedding's nearest candidate by cosine, with both norms.
pub fn norm_ratio_report(train: &EmbeddingDataset, x: &[f64]) -> Result<Vec<NormRatio>> {
    let d = train.d;
    if x.is_empty() {
        return Err(Error::Input("empty candidate pool".into()));
    }
    if x.len() % d != 0 {
        return Err(Error::Dimension(format!("{} values do not form rows of width {d}", x.len())));
    }
    let mut out = Vec::with_capacity(train.len());
    for (i, t) in train.rows().enumerate() {
        let Some((j, cosine)) = crate::evaluation::best_cosine(t, x.chunks(d)) else {
            return Err(Error::ZeroNorm(i));
        };
        let train_norm = linalg::norm(t);
        let candidate_norm = linalg::norm(&x[j * d..(j + 1) * d]);
        out.push(NormRatio { train_index: i, candidate: j, cosine, train_norm, candidate_norm, ratio: candidate_norm / train_norm });
    }
    Ok(out)
}

pub fn save_norm_ratios(rows: &[NormRatio], path: &Path) -> Result<()> {
    use crate::data::{fmt_f64, write_csv};
    let header = ["train_index", "candidate", "cosine", "train_norm", "candidate_norm", "ratio"].map(String::from);
    write_csv(
        path,
        &header,
        rows.iter().map(|r| {
            [
                r.train_index.to_string(),
                r.candidate.to_string(),
                fmt_f64(r.cosine),
                fmt_f64(r.train_norm),
                fmt_f64(r.candidate_norm),
                fmt_f64(r.ratio),
            ]
        }),
    )
}

/// Mean absolute per-pixel difference.
pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_toy_images;

    fn small() -> ToyBackbone {
        ToyBackbone::new(ImageShape::new(2, 4, 5).unwrap(), 6, 9, 21).unwrap()
    }

    /// Row-by-row loops, no GEMM.
    fn embed_oracle(bb: &ToyBackbone, s: &[f64]) -> Vec<f64> {
        let ds = bb.input_len();
        let mut hidden = vec![0.0; bb.k];
        for (r, h) in hidden.iter_mut().enumerate() {
            let mut acc = bb.c1[r];
            for c in 0..ds {
                acc += bb.a1[r * ds + c] * s[c];
            }
            *h = acc.tanh();
        }
        (0..bb.d).map(|o| (0..bb.k).map(|r| bb.a2[o * bb.k + r] * hidden[r]).sum()).collect()
    }

    #[test]
    fn embed_matches_oracle() {
        let bb = small();
        let s = rng::gaussian_vec(&mut rng::seeded(1), bb.input_len() * 2, 0.5);
        let got = bb.embed(&s).unwrap();
        for (i, img) in s.chunks(bb.input_len()).enumerate() {
            let want = embed_oracle(&bb, img);
            for (g, w) in got[i * bb.d..(i + 1) * bb.d].iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        assert_eq!(&got[..bb.d], &bb.embed(&s[..bb.input_len()]).unwrap()[..]);
    }

    #[test]
    fn zero_image_without_bias_embeds_to_zero() {
        let bb = small();
        let bb = ToyBackbone::from_parts(bb.shape, bb.d, bb.k, 0, bb.a1.clone(), vec![0.0; bb.k], bb.a2.clone()).unwrap();
        assert!(bb.embed(&vec![0.0; bb.input_len()]).unwrap().iter().all(|&v| v == 0.0));
        assert!(bb.embed(&[0.0; 3]).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let bb = small();
        let mut r = rng::seeded(4);
        let nu = rng::gaussian_vec(&mut r, bb.input_len(), 0.7);
        let g = rng::gaussian_vec(&mut r, bb.d, 1.0);
        let f = |v: &[f64]| linalg::dot(&bb.embed(v).unwrap(), &g);
        let grad = bb.vjp(&nu, &g).unwrap();
        for j in 0..nu.len() {
            let mut p = nu.clone();
            let mut m = nu.clone();
            p[j] += 1e-5;
            m[j] -= 1e-5;
            let fd = (f(&p) - f(&m)) / 2e-5;
            assert!((fd - grad[j]).abs() <= 1e-6 * fd.abs().max(1e-2), "pixel {j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let bb = small();
        let mut r = rng::seeded(5);
        let nu = rng::gaussian_vec(&mut r, bb.input_len(), 0.5);
        let target = rng::gaussian_vec(&mut r, bb.d, 1.0);
        for kind in [InversionObjective::Cosine, InversionObjective::Mse] {
            let mut obj = Objective::new(&bb, &target, kind, 0.3).unwrap();
            let mut grad = vec![0.0; nu.len()];
            obj.eval(&nu, Some(&mut grad));
            // the descent direction is on the minimized form
            let sign = if kind == InversionObjective::Cosine { -1.0 } else { 1.0 };
            for j in (0..nu.len()).step_by(3) {
                let mut p = nu.clone();
                let mut m = nu.clone();
                p[j] += 1e-5;
                m[j] -= 1e-5;
                let fd = sign * (obj.eval(&p, None) - obj.eval(&m, None)) / 2e-5;
                assert!((fd - grad[j]).abs() <= 1e-6 * fd.abs().max(1e-2), "{kind:?} pixel {j}: {fd} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn cosine_objective_ignores_target_scale() {
        let bb = small();
        let mut r = rng::seeded(8);
        let target = rng::gaussian_vec(&mut r, bb.d, 1.0);
        for _ in 0..20 {
            let nu = rng::gaussian_vec(&mut r, bb.input_len(), 1.0);
            let base = inversion_objective(&bb, &nu, &target, InversionObjective::Cosine, 0.1).unwrap();
            for t in [0.1, 3.0, 10.0, 1e6] {
                let scaled: Vec<f64> = target.iter().map(|v| v * t).collect();
                assert_eq!(inversion_objective(&bb, &nu, &scaled, InversionObjective::Cosine, 0.1).unwrap(), base);
            }
        }
    }

    #[test]
    fn zero_target_is_rejected_under_cosine() {
        let bb = small();
        let cfg = InversionConfig { iterations: 2, ..Default::default() };
        assert!(invert(&bb, &vec![0.0; bb.d], &cfg).is_err());
        let mse = InversionConfig { objective: InversionObjective::Mse, ..cfg };
        assert!(invert(&bb, &vec![0.0; bb.d], &mse).is_ok());
    }

    #[test]
    fn cosine_inversion_recovers_direction() {
        let shape = ImageShape::new(1, 6, 6).unwrap();
        let bb = ToyBackbone::new(shape, 8, 24, 3).unwrap();
        let imgs = gen_toy_images(1, shape, 2, 1).unwrap();
        let target = bb.embed(&imgs.s).unwrap();
        let inv = invert(&bb, &target, &InversionConfig { iterations: 2000, ..Default::default() }).unwrap();
        assert_eq!(inv.trace.len(), 2001);
        let got = bb.embed(&inv.image).unwrap();
        assert!(crate::evaluation::cosine(&got, &target).unwrap() > 0.99, "trace end {}", inv.trace.last().unwrap());
    }

    #[test]
    fn box_and_tv_are_applied() {
        let bb = small();
        let target = rng::gaussian_vec(&mut rng::seeded(2), bb.d, 1.0);
        let cfg = InversionConfig { iterations: 200, box_constrain: true, tv_weight: 0.05, ..Default::default() };
        let inv = invert(&bb, &target, &cfg).unwrap();
        assert!(inv.image.iter().all(|v| (0.0..=1.0).contains(v)));

        let flat = vec![0.3; bb.input_len()];
        assert_eq!(total_variation(&flat, bb.shape, 1.0, None), 0.0);
        let mut img = vec![0.0; bb.input_len()];
        img[0] = 1.0; // corner pixel of channel 0 has two neighbors
        assert_eq!(total_variation(&img, bb.shape, 1.0, None), 2.0);
    }

    #[test]
    fn batch_is_worker_invariant() {
        let bb = small();
        let targets = rng::gaussian_vec(&mut rng::seeded(3), bb.d * 3, 1.0);
        let cfg = InversionConfig { iterations: 30, ..Default::default() };
        let a = invert_batch(&bb, &targets, &cfg, 1).unwrap();
        let b = invert_batch(&bb, &targets, &cfg, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn norm_ratios_for_copies() {
        let ds = crate::data::gen_gaussian_mixture(6, 3, 2, 2.0, 1).unwrap();
        for t in [1.0, 3.0] {
            let pool: Vec<f64> = ds.x.iter().map(|v| v * t).collect();
            for r in norm_ratio_report(&ds, &pool).unwrap() {
                assert_eq!(r.candidate, r.train_index);
                assert!((r.cosine - 1.0).abs() < 1e-15);
                assert!((r.ratio - t).abs() < 1e-12);
            }
        }
        assert!(norm_ratio_report(&ds, &[]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let bb = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.json");
        bb.save(&p).unwrap();
        assert_eq!(ToyBackbone::load(&p).unwrap(), bb);
    }
}
