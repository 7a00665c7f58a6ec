//! The victim classifier: a bias-free-output, single-hidden-layer ReLU MLP.
//!
//! `φ(x; θ) = W2 · relu(W1 x + b1)` is positively homogeneous of degree two in
//! its parameters, which is what ties the trained weights to the max-margin
//! stationarity condition the attack inverts.
//!
//! The flattened parameter order is fixed: `W1` row-major, then `b1`, then
//! `W2` row-major.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{self, sigmoid};
use crate::rng;

/// How the ReLU derivative is evaluated in backward passes.
///
/// The forward pass always uses the hard ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ActivationMode {
    HardRelu,
    /// `step(z)` is replaced by `sigmoid(alpha · z)`.
    SoftBackward { alpha: f64 },
}

impl ActivationMode {
    pub fn soft(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Input(format!("soft-backward alpha must be > 0, got {alpha}")));
        }
        Ok(ActivationMode::SoftBackward { alpha })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationMode::HardRelu => Ok(()),
            ActivationMode::SoftBackward { alpha } => Self::soft(alpha).map(|_| ()),
        }
    }

    /// Backward-pass substitute for `relu'(z)`.
    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            ActivationMode::HardRelu => step(z),
            ActivationMode::SoftBackward { alpha } => sigmoid(alpha * z),
        }
    }

    /// Derivative of [`Self::derivative`] with respect to `z` (zero a.e. for the hard ReLU).
    #[inline]
    pub fn second_derivative(&self, z: f64) -> f64 {
        match *self {
            ActivationMode::HardRelu => 0.0,
            ActivationMode::SoftBackward { alpha } => {
                let s = sigmoid(alpha * z);
                alpha * s * (1.0 - s)
            }
        }
    }
}

#[inline]
pub fn step(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

/// Layer sizes of the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Input (embedding) dimension.
    pub d: usize,
    /// Hidden width.
    pub h: usize,
    /// Outputs: 1 for binary (labels ±1), C ≥ 2 for multiclass (labels 0..C).
    pub c: usize,
}

impl Arch {
    pub fn new(d: usize, h: usize, c: usize) -> Result<Self> {
        if d == 0 || h == 0 || c == 0 {
            return Err(Error::Input(format!("architecture dims must be positive, got {d}-{h}-{c}")));
        }
        Ok(Arch { d, h, c })
    }

    /// Total parameter count `h·d + h + c·h`.
    pub fn num_params(&self) -> usize {
        self.h * self.d + self.h + self.c * self.h
    }

    pub fn is_binary(&self) -> bool {
        self.c == 1
    }

    pub fn check_label(&self, y: i64) -> Result<()> {
        let ok = if self.is_binary() {
            y == 1 || y == -1
        } else {
            y >= 0 && (y as usize) < self.c
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Label {
                label: y,
                classes: self.c,
            })
        }
    }
}

/// Classifier weights `θ`. Immutable once built; all entries finite.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    arch: Arch,
    pub(crate) w1: Vec<f64>,
    pub(crate) b1: Vec<f64>,
    pub(crate) w2: Vec<f64>,
}

impl MlpParams {
    pub fn new(arch: Arch, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>) -> Result<Self> {
        ensure_dim("W1 length", arch.h * arch.d, w1.len())?;
        ensure_dim("b1 length", arch.h, b1.len())?;
        ensure_dim("W2 length", arch.c * arch.h, w2.len())?;
        let p = MlpParams { arch, w1, b1, w2 };
        if !p.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(p)
    }

    /// I.i.d. uniform on `±1/sqrt(fan_in)` per layer.
    pub fn init_uniform(arch: Arch, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let b_in = 1.0 / (arch.d as f64).sqrt();
        let b_hid = 1.0 / (arch.h as f64).sqrt();
        let mut draw = |n: usize, bound: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w1 = draw(arch.h * arch.d, b_in);
        let b1 = draw(arch.h, b_in);
        let w2 = draw(arch.c * arch.h, b_hid);
        MlpParams { arch, w1, b1, w2 }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    pub(crate) fn is_finite(&self) -> bool {
        linalg::all_finite(&self.w1) && linalg::all_finite(&self.b1) && linalg::all_finite(&self.w2)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v
    }

    pub fn unflatten(v: &[f64], arch: Arch) -> Result<Self> {
        ensure_dim("flat parameter vector", arch.num_params(), v.len())?;
        let (w1, rest) = v.split_at(arch.h * arch.d);
        let (b1, w2) = rest.split_at(arch.h);
        MlpParams::new(arch, w1.to_vec(), b1.to_vec(), w2.to_vec())
    }

    /// Returns `t · θ`.
    pub fn scaled(&self, t: f64) -> Result<Self> {
        let s = |v: &[f64]| v.iter().map(|x| x * t).collect::<Vec<_>>();
        MlpParams::new(self.arch, s(&self.w1), s(&self.b1), s(&self.w2))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        ensure_dim("input vector", self.arch.d, x.len())
    }

    /// Hidden pre-activations `W1 x + b1`.
    pub fn preactivation(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut z = vec![0.0; self.arch.h];
        self.preactivation_into(x, &mut z);
        Ok(z)
    }

    pub(crate) fn preactivation_into(&self, x: &[f64], z: &mut [f64]) {
        linalg::matvec(&self.w1, self.arch.h, self.arch.d, x, z);
        linalg::axpy(1.0, &self.b1, z);
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.preactivation(x)?;
        let a: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
        let mut out = vec![0.0; self.arch.c];
        linalg::matvec(&self.w2, self.arch.c, self.arch.h, &a, &mut out);
        Ok(out)
    }

    /// Margin `y·φ(x)` (binary) or `φ(x)_y − max_{j≠y} φ(x)_j` (multiclass).
    pub fn margin(&self, x: &[f64], y: i64) -> Result<f64> {
        self.arch.check_label(y)?;
        let logits = self.forward(x)?;
        Ok(linalg::dot(&margin_coefficients(&logits, y, self.arch.c), &logits))
    }

    /// `∇_θ margin(x, y)` flattened in parameter order, with the ReLU derivative
    /// taken from `mode`.
    pub fn param_gradient_of_margin(&self, x: &[f64], y: i64, mode: ActivationMode) -> Result<Vec<f64>> {
        self.arch.check_label(y)?;
        self.check_input(x)?;
        mode.validate()?;
        let Arch { d, h, c } = self.arch;
        let z = self.preactivation(x)?;
        let a: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
        let mut logits = vec![0.0; c];
        linalg::matvec(&self.w2, c, h, &a, &mut logits);
        let v = margin_coefficients(&logits, y, c);
        let mut u = vec![0.0; h];
        linalg::matvec_t(&self.w2, c, h, &v, &mut u);

        let mut g = vec![0.0; self.num_params()];
        let (gw1, rest) = g.split_at_mut(h * d);
        let (gb1, gw2) = rest.split_at_mut(h);
        for j in 0..h {
            let delta = u[j] * mode.derivative(z[j]);
            gb1[j] = delta;
            if delta != 0.0 {
                linalg::axpy(delta, x, &mut gw1[j * d..(j + 1) * d]);
            }
        }
        for k in 0..c {
            if v[k] != 0.0 {
                linalg::axpy(v[k], &a, &mut gw2[k * h..(k + 1) * h]);
            }
        }
        Ok(g)
    }

    /// `∇_x margin(x, y)` with the ReLU derivative taken from `mode`.
    pub fn input_gradient_of_margin(&self, x: &[f64], y: i64, mode: ActivationMode) -> Result<Vec<f64>> {
        self.arch.check_label(y)?;
        mode.validate()?;
        let Arch { d, h, c } = self.arch;
        let z = self.preactivation(x)?;
        let a: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
        let mut logits = vec![0.0; c];
        linalg::matvec(&self.w2, c, h, &a, &mut logits);
        let v = margin_coefficients(&logits, y, c);
        let mut u = vec![0.0; h];
        linalg::matvec_t(&self.w2, c, h, &v, &mut u);
        let delta: Vec<f64> = (0..h).map(|j| u[j] * mode.derivative(z[j])).collect();
        let mut gx = vec![0.0; d];
        linalg::matvec_t(&self.w1, h, d, &delta, &mut gx);
        Ok(gx)
    }

    pub fn to_file(&self, norm: Option<&NormStats>) -> ModelFile {
        ModelFile {
            d: self.arch.d,
            h: self.arch.h,
            c: self.arch.c,
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            norm_mu: norm.map(|n| n.mu.clone()),
            norm_sigma: norm.map(|n| n.sigma.clone()),
        }
    }
}

/// Coefficient vector `v` with `margin = v · logits`.
///
/// Binary: `[y]`. Multiclass: `e_y − e_j*` where `j*` is the largest competing
/// logit, ties going to the smallest index.
pub fn margin_coefficients(logits: &[f64], y: i64, c: usize) -> Vec<f64> {
    let mut v = vec![0.0; c];
    if c == 1 {
        v[0] = y as f64;
        return v;
    }
    let y = y as usize;
    let rival = runner_up(logits, y);
    v[y] = 1.0;
    v[rival] = -1.0;
    v
}

/// Index of the largest logit other than `y`, smallest index on ties.
pub(crate) fn runner_up(logits: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (j, &l) in logits.iter().enumerate() {
        if j != y && (best == usize::MAX || l > best_val) {
            best = j;
            best_val = l;
        }
    }
    best
}

/// JSON model file. `norm_mu`/`norm_sigma` carry the embedding normalization
/// applied before the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub d: usize,
    pub h: usize,
    pub c: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_sigma: Option<Vec<f64>>,
}

impl ModelFile {
    pub fn into_parts(self) -> Result<(MlpParams, Option<NormStats>)> {
        let arch = Arch::new(self.d, self.h, self.c)?;
        let params = MlpParams::new(arch, self.w1, self.b1, self.w2)?;
        let norm = match (self.norm_mu, self.norm_sigma) {
            (Some(mu), Some(sigma)) => {
                ensure_dim("norm_mu length", arch.d, mu.len())?;
                Some(NormStats::new(mu, sigma)?)
            }
            (None, None) => None,
            _ => return Err(Error::Input("norm_mu and norm_sigma must be given together".into())),
        };
        Ok((params, norm))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn load_model(path: &Path) -> Result<(MlpParams, Option<NormStats>)> {
    ModelFile::load(path)?.into_parts()
}

pub fn save_model(params: &MlpParams, norm: Option<&NormStats>, path: &Path) -> Result<()> {
    params.to_file(norm).save(path)
}
