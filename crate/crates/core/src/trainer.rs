//! Full-batch gradient descent for the victim classifier.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{self, gemm, sigmoid, softplus, Op};
use crate::model::{relu, step, ActivationMode, Arch, MlpParams};
use crate::nnls;

/// Loss values above this are treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Capture parameters every this many epochs (0 disables). Epoch 0 is the initialization.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs: 10_000,
            weight_decay: 0.08,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Input(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Input("epochs must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Input(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: MlpParams,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub final_train_acc: f64,
    /// One record per epoch, measured before that epoch's update.
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

fn check_labels(ds: &EmbeddingDataset, arch: Arch) -> Result<()> {
    ensure_dim("dataset dim vs model input", arch.d, ds.d)?;
    ds.y.iter().try_for_each(|&y| arch.check_label(y))
}

/// Mean loss, accuracy and (optionally) the loss gradient, in flat parameter order.
struct BatchEval {
    loss: f64,
    acc: f64,
    grad: Vec<f64>,
}

struct Batch<'a> {
    ds: &'a EmbeddingDataset,
    arch: Arch,
    z: Vec<f64>,
    a: Vec<f64>,
    out: Vec<f64>,
    dout: Vec<f64>,
    dz: Vec<f64>,
}

impl<'a> Batch<'a> {
    fn new(ds: &'a EmbeddingDataset, arch: Arch) -> Self {
        let n = ds.len();
        Batch {
            ds,
            arch,
            z: vec![0.0; n * arch.h],
            a: vec![0.0; n * arch.h],
            out: vec![0.0; n * arch.c],
            dout: vec![0.0; n * arch.c],
            dz: vec![0.0; n * arch.h],
        }
    }

    fn eval(&mut self, p: &MlpParams, with_grad: bool) -> BatchEval {
        let Arch { d, h, c } = self.arch;
        let n = self.ds.len();
        let x = &self.ds.x;
        for row in self.z.chunks_mut(h) {
            row.copy_from_slice(&p.b1);
        }
        gemm(n, d, h, 1.0, x, Op::N, &p.w1, Op::T, 1.0, &mut self.z);
        for (a, &z) in self.a.iter_mut().zip(&self.z) {
            *a = relu(z);
        }
        gemm(n, h, c, 1.0, &self.a, Op::N, &p.w2, Op::T, 0.0, &mut self.out);

        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in 0..n {
            let y = self.ds.y[i];
            let logits = &self.out[i * c..(i + 1) * c];
            let dl = &mut self.dout[i * c..(i + 1) * c];
            if c == 1 {
                let m = y as f64 * logits[0];
                loss += softplus(-m);
                dl[0] = -(y as f64) * sigmoid(-m) * inv_n;
                correct += (m > 0.0) as usize;
            } else {
                let yi = y as usize;
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                loss += mx + sum.ln() - logits[yi];
                for k in 0..c {
                    let pk = (logits[k] - mx).exp() / sum;
                    dl[k] = (pk - if k == yi { 1.0 } else { 0.0 }) * inv_n;
                }
                let rival = crate::model::runner_up(logits, yi);
                correct += (logits[yi] - logits[rival] > 0.0) as usize;
            }
        }
        loss *= inv_n;
        let acc = correct as f64 / n as f64;
        if !with_grad {
            return BatchEval { loss, acc, grad: Vec::new() };
        }

        let mut grad = vec![0.0; self.arch.num_params()];
        let (gw1, rest) = grad.split_at_mut(h * d);
        let (gb1, gw2) = rest.split_at_mut(h);
        gemm(c, n, h, 1.0, &self.dout, Op::T, &self.a, Op::N, 0.0, gw2);
        gemm(n, c, h, 1.0, &self.dout, Op::N, &p.w2, Op::N, 0.0, &mut self.dz);
        for (g, &z) in self.dz.iter_mut().zip(&self.z) {
            *g *= step(z);
        }
        gemm(h, n, d, 1.0, &self.dz, Op::T, x, Op::N, 0.0, gw1);
        for row in self.dz.chunks(h) {
            linalg::axpy(1.0, row, gb1);
        }
        BatchEval { loss, acc, grad }
    }
}

/// Trains from the seeded uniform initialization with
/// `θ ← θ − lr · (∇L(θ) + weight_decay · θ)`.
pub fn train(ds: &EmbeddingDataset, arch: Arch, cfg: &TrainConfig) -> Result<(MlpParams, TrainReport)> {
    cfg.validate()?;
    check_labels(ds, arch)?;
    let init = MlpParams::init_uniform(arch, cfg.seed);
    train_from(ds, init, cfg)
}

/// Same as [`train`] but starting from the given parameters.
pub fn train_from(ds: &EmbeddingDataset, init: MlpParams, cfg: &TrainConfig) -> Result<(MlpParams, TrainReport)> {
    cfg.validate()?;
    let arch = init.arch();
    check_labels(ds, arch)?;
    let mut params = init;
    let mut batch = Batch::new(ds, arch);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let keep = |e: usize| cfg.checkpoint_every > 0 && (e % cfg.checkpoint_every == 0 || e == cfg.epochs);

    let (hd, h) = (arch.h * arch.d, arch.h);
    for epoch in 0..cfg.epochs {
        if keep(epoch) {
            checkpoints.push(Checkpoint { epoch, params: params.clone() });
        }
        let ev = batch.eval(&params, true);
        if !ev.loss.is_finite() || ev.loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { epoch, loss: ev.loss });
        }
        history.push(EpochRecord { epoch, loss: ev.loss, train_acc: ev.acc });
        let shrink = 1.0 - cfg.lr * cfg.weight_decay;
        let update = |w: &mut [f64], g: &[f64]| {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi = shrink * *wi - cfg.lr * gi;
            }
        };
        update(&mut params.w1, &ev.grad[..hd]);
        update(&mut params.b1, &ev.grad[hd..hd + h]);
        update(&mut params.w2, &ev.grad[hd + h..]);
        if !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
    }
    if keep(cfg.epochs) {
        checkpoints.push(Checkpoint { epoch: cfg.epochs, params: params.clone() });
    }
    let final_train_acc = Batch::new(ds, arch).eval(&params, false).acc;
    Ok((params, TrainReport { final_train_acc, history, checkpoints }))
}

/// Mean training loss (without the weight-decay term).
pub fn loss(params: &MlpParams, ds: &EmbeddingDataset) -> Result<f64> {
    check_labels(ds, params.arch())?;
    Ok(Batch::new(ds, params.arch()).eval(params, false).loss)
}

/// Fraction of samples with strictly positive margin; zero margins count as errors.
pub fn accuracy(params: &MlpParams, ds: &EmbeddingDataset) -> Result<f64> {
    check_labels(ds, params.arch())?;
    let correct = (0..ds.len())
        .map(|i| params.margin(ds.row(i), ds.y[i]))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&m| m > 0.0)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// `min_{λ ≥ 0} ‖θ − Σ λ_i ∇θ margin_i‖ / ‖θ‖` over the training samples.
pub fn kkt_residual(params: &MlpParams, ds: &EmbeddingDataset, mode: ActivationMode) -> Result<f64> {
    check_labels(ds, params.arch())?;
    let cols = (0..ds.len())
        .map(|i| params.param_gradient_of_margin(ds.row(i), ds.y[i], mode))
        .collect::<Result<Vec<_>>>()?;
    let theta = params.flatten();
    let sol = nnls::nnls(&cols, &theta)?;
    Ok(sol.residual_norm / linalg::norm(&theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_mixture;

    fn two_points() -> EmbeddingDataset {
        EmbeddingDataset::new(vec![1.0, 0.5, -1.0, -0.5], vec![1, -1], 2).unwrap()
    }

    #[test]
    fn separable_pair_reaches_full_accuracy() {
        let cfg = TrainConfig { lr: 0.01, epochs: 5000, weight_decay: 0.0, ..Default::default() };
        let (p, rep) = train(&two_points(), Arch::new(2, 8, 1).unwrap(), &cfg).unwrap();
        assert_eq!(rep.final_train_acc, 1.0);
        assert_eq!(accuracy(&p, &two_points()).unwrap(), 1.0);
        assert_eq!(rep.history.len(), 5000);
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = gen_gaussian_mixture(20, 4, 2, 2.0, 3).unwrap();
        let cfg = TrainConfig { epochs: 300, seed: 9, ..Default::default() };
        let arch = Arch::new(4, 16, 1).unwrap();
        let (a, _) = train(&ds, arch, &cfg).unwrap();
        let (b, _) = train(&ds, arch, &cfg).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        for &c in &[1usize, 3] {
            let ds = if c == 1 {
                gen_gaussian_mixture(6, 3, 2, 1.0, 1).unwrap()
            } else {
                gen_gaussian_mixture(6, 3, 3, 1.0, 1).unwrap()
            };
            let p = MlpParams::init_uniform(Arch::new(3, 5, c).unwrap(), 2);
            let g = Batch::new(&ds, p.arch()).eval(&p, true).grad;
            let theta = p.flatten();
            let eps = 1e-6;
            for i in 0..theta.len() {
                let mut a = theta.clone();
                let mut b = theta.clone();
                a[i] += eps;
                b[i] -= eps;
                let la = loss(&MlpParams::unflatten(&a, p.arch()).unwrap(), &ds).unwrap();
                let lb = loss(&MlpParams::unflatten(&b, p.arch()).unwrap(), &ds).unwrap();
                let fd = (la - lb) / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-7 * (1.0 + fd.abs()), "c={c} i={i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn loss_non_increasing_without_weight_decay() {
        let ds = gen_gaussian_mixture(20, 4, 2, 3.0, 2).unwrap();
        let cfg = TrainConfig { lr: 0.01, epochs: 2000, weight_decay: 0.0, seed: 1, ..Default::default() };
        let (_, rep) = train(&ds, Arch::new(4, 32, 1).unwrap(), &cfg).unwrap();
        for w in rep.history.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-8, "loss rose at epoch {}", w[1].epoch);
        }
        assert_eq!(rep.final_train_acc, 1.0);
    }

    #[test]
    fn constant_zero_logits_have_zero_accuracy() {
        let arch = Arch::new(2, 2, 1).unwrap();
        let p = MlpParams::new(arch, vec![1.0; 4], vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert_eq!(accuracy(&p, &two_points()).unwrap(), 0.0);
    }

    #[test]
    fn random_labels_are_chance_level() {
        let train_ds = gen_gaussian_mixture(40, 8, 2, 3.0, 4).unwrap();
        let cfg = TrainConfig { epochs: 1000, weight_decay: 0.0, seed: 4, ..Default::default() };
        let (p, _) = train(&train_ds, Arch::new(8, 32, 1).unwrap(), &cfg).unwrap();
        let mut held = gen_gaussian_mixture(2000, 8, 2, 3.0, 40).unwrap();
        let mut r = crate::rng::seeded(4);
        use rand::Rng as _;
        held.y.iter_mut().for_each(|y| *y = if r.random_bool(0.5) { 1 } else { -1 });
        let acc = accuracy(&p, &held).unwrap();
        assert!((0.4..=0.6).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn checkpoints_include_init_and_final() {
        let ds = gen_gaussian_mixture(10, 3, 2, 2.0, 0).unwrap();
        let cfg = TrainConfig { epochs: 25, checkpoint_every: 10, ..Default::default() };
        let arch = Arch::new(3, 4, 1).unwrap();
        let (p, rep) = train(&ds, arch, &cfg).unwrap();
        let epochs: Vec<usize> = rep.checkpoints.iter().map(|c| c.epoch).collect();
        assert_eq!(epochs, vec![0, 10, 20, 25]);
        assert_eq!(rep.checkpoints[0].params, MlpParams::init_uniform(arch, cfg.seed));
        assert_eq!(rep.checkpoints.last().unwrap().params, p);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let ds = gen_gaussian_mixture(12, 3, 3, 50.0, 0).unwrap();
        let cfg = TrainConfig { lr: 1e6, epochs: 100, weight_decay: 0.0, ..Default::default() };
        match train(&ds, Arch::new(3, 8, 3).unwrap(), &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch < 100),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.final_train_acc)),
        }
    }

    #[test]
    fn label_mismatch_is_rejected() {
        let ds = gen_gaussian_mixture(6, 3, 3, 1.0, 0).unwrap();
        assert!(matches!(train(&ds, Arch::new(3, 4, 1).unwrap(), &TrainConfig::default()), Err(Error::Label { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
    }
}
