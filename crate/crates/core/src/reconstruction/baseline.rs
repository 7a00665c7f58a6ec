//! Activation maximization on the classifier inputs: minimize the training
//! loss of a fixed target class directly over `x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, sigmoid, softplus};
use crate::model::{step, Arch, MlpParams};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmConfig {
    pub count: usize,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for AmConfig {
    fn default() -> Self {
        AmConfig { count: 100, lr: 0.1, iterations: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmCandidates {
    pub d: usize,
    /// `count × d`, row-major.
    pub x: Vec<f64>,
    pub final_loss: Vec<f64>,
    pub diverged: Vec<bool>,
}

/// Loss of class `y` at `x` and its input gradient.
fn loss_and_grad(theta: &MlpParams, x: &[f64], y: i64) -> (f64, Vec<f64>) {
    let Arch { d, h, c } = theta.arch();
    let mut z = vec![0.0; h];
    theta.preactivation_into(x, &mut z);
    let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
    let mut out = vec![0.0; c];
    linalg::matvec(theta.w2(), c, h, &a, &mut out);
    let mut dout = vec![0.0; c];
    let loss = if c == 1 {
        let m = y as f64 * out[0];
        dout[0] = -(y as f64) * sigmoid(-m);
        softplus(-m)
    } else {
        let yi = y as usize;
        let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = out.iter().map(|l| (l - mx).exp()).sum();
        for k in 0..c {
            dout[k] = (out[k] - mx).exp() / sum - if k == yi { 1.0 } else { 0.0 };
        }
        mx + sum.ln() - out[yi]
    };
    let mut da = vec![0.0; h];
    linalg::matvec_t(theta.w2(), c, h, &dout, &mut da);
    for (g, &zj) in da.iter_mut().zip(&z) {
        *g *= step(zj);
    }
    let mut gx = vec![0.0; d];
    linalg::matvec_t(theta.w1(), h, d, &da, &mut gx);
    (loss, gx)
}

/// Gradient descent on the loss of class `y` from `N(0, 1)` starts.
pub fn activation_maximization_baseline(theta: &MlpParams, y: i64, cfg: &AmConfig) -> Result<AmCandidates> {
    let arch = theta.arch();
    arch.check_label(y)?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Input(format!("lr must be > 0, got {}", cfg.lr)));
    }
    let d = arch.d;
    let mut r = rng::seeded(cfg.seed);
    let mut x = rng::gaussian_vec(&mut r, cfg.count * d, 1.0);
    let mut final_loss = Vec::with_capacity(cfg.count);
    let mut diverged = Vec::with_capacity(cfg.count);
    for row in x.chunks_mut(d) {
        let (mut loss, mut g) = loss_and_grad(theta, row, y);
        let mut bad = false;
        for _ in 0..cfg.iterations {
            let next: Vec<f64> = row.iter().zip(&g).map(|(v, gi)| v - cfg.lr * gi).collect();
            let (l2, g2) = loss_and_grad(theta, &next, y);
            if !l2.is_finite() || !linalg::all_finite(&next) {
                bad = true;
                break;
            }
            row.copy_from_slice(&next);
            loss = l2;
            g = g2;
        }
        final_loss.push(loss);
        diverged.push(bad);
    }
    Ok(AmCandidates { d, x, final_loss, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_mixture;
    use crate::trainer::{train, TrainConfig};

    #[test]
    fn zero_iterations_return_gaussian_init() {
        let theta = MlpParams::init_uniform(Arch::new(4, 6, 1).unwrap(), 0);
        let cfg = AmConfig { count: 3, iterations: 0, seed: 8, ..Default::default() };
        let out = activation_maximization_baseline(&theta, 1, &cfg).unwrap();
        let mut r = rng::seeded(8);
        assert_eq!(out.x, rng::gaussian_vec(&mut r, 12, 1.0));
        assert_eq!(activation_maximization_baseline(&theta, 1, &cfg).unwrap(), out);
    }

    #[test]
    fn outputs_classify_as_target() {
        let ds = gen_gaussian_mixture(40, 6, 2, 4.0, 3).unwrap();
        let cfg = TrainConfig { epochs: 2000, weight_decay: 0.0, seed: 1, ..Default::default() };
        let (theta, rep) = train(&ds, Arch::new(6, 32, 1).unwrap(), &cfg).unwrap();
        assert_eq!(rep.final_train_acc, 1.0);
        for y in [1, -1] {
            let am = AmConfig { count: 10, lr: 0.1, iterations: 300, seed: 2 };
            let out = activation_maximization_baseline(&theta, y, &am).unwrap();
            for row in out.x.chunks(6) {
                assert!(theta.margin(row, y).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_label() {
        let theta = MlpParams::init_uniform(Arch::new(2, 2, 3).unwrap(), 0);
        assert!(activation_maximization_baseline(&theta, 3, &AmConfig::default()).is_err());
    }
}
