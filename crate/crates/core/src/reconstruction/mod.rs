//! Reconstruction of training embeddings from classifier weights.
//!
//! Candidates `x̂_i` with coefficients `λ_i ≥ 0` and fixed labels `y_i` are
//! optimized so that the weights are explained as a nonnegative combination
//! of per-candidate margin gradients:
//!
//! ```text
//! L(x̂, λ) = ‖θ − Σ_i λ_i ∇θ margin(x̂_i, y_i; θ)‖² + w · Σ_i max(0, λ_min − λ_i)²
//! ```
//!
//! Inside this objective the ReLU derivative is `sigmoid(α z)`, which makes
//! `L` differentiable in the candidates. Gradients with respect to `x̂` need
//! the mixed second derivative of the margin; for the two-layer network it is
//! available in closed form and evaluated batch-wise with a handful of GEMMs.

mod baseline;
mod io;
mod sweep;

pub use baseline::{activation_maximization_baseline, AmCandidates, AmConfig};
pub use io::{load_pools, save_pools, save_run_summary};
pub use sweep::{run_sweep, ParamDist, SweepSpec, SweepWorkers};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{self, gemm, Op};
use crate::model::{margin_coefficients, relu, step, ActivationMode, Arch, MlpParams};
use crate::rng;

use rand::Rng as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Number of candidates.
    pub m: usize,
    /// Standard deviation of the Gaussian candidate initialization.
    pub sigma: f64,
    pub lr: f64,
    pub lambda_min: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub penalty_weight: f64,
    /// Halve the step whenever it would increase the loss.
    pub backtrack: bool,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            m: 500,
            sigma: 1e-2,
            lr: 1e-3,
            lambda_min: 0.05,
            alpha: 100.0,
            iterations: 10_000,
            penalty_weight: 1.0,
            backtrack: false,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let groups = classes.max(2);
        if self.m < 2 || self.m % groups != 0 {
            return Err(Error::Input(format!("m = {} must be >= 2 and divisible by {groups}", self.m)));
        }
        for (name, v) in [("sigma", self.sigma), ("lr", self.lr), ("alpha", self.alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Input(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.lambda_min >= 0.0 && self.lambda_min.is_finite()) {
            return Err(Error::Input(format!("lambda_min must be >= 0, got {}", self.lambda_min)));
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return Err(Error::Input(format!("penalty_weight must be >= 0, got {}", self.penalty_weight)));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            alpha: self.alpha,
            lambda_min: self.lambda_min,
            penalty_weight: self.penalty_weight,
        }
    }
}

/// Parameters of the loss itself (as opposed to the optimizer).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub alpha: f64,
    pub lambda_min: f64,
    pub penalty_weight: f64,
}

impl Objective {
    pub fn new(alpha: f64) -> Self {
        Objective { alpha, lambda_min: 0.0, penalty_weight: 0.0 }
    }

    pub fn mode(&self) -> ActivationMode {
        ActivationMode::SoftBackward { alpha: self.alpha }
    }

    pub fn penalty(&self, lambda: &[f64]) -> f64 {
        self.penalty_weight * lambda.iter().map(|&l| (self.lambda_min - l).max(0.0).powi(2)).sum::<f64>()
    }
}

/// Reconstructed candidates from one run.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    pub run_id: usize,
    pub d: usize,
    /// `m × d`, row-major.
    pub xhat: Vec<f64>,
    pub lambda: Vec<f64>,
    pub y: Vec<i64>,
    pub final_loss: f64,
    /// The loss became non-finite; the pool holds the last finite iterate.
    pub failed: bool,
    /// Run hyperparameters, when known.
    pub config: Option<ReconConfig>,
}

impl CandidatePool {
    pub fn new(run_id: usize, d: usize, xhat: Vec<f64>, lambda: Vec<f64>, y: Vec<i64>) -> Result<Self> {
        ensure_dim("candidate matrix", lambda.len() * d, xhat.len())?;
        ensure_dim("candidate labels", lambda.len(), y.len())?;
        Ok(CandidatePool {
            run_id,
            d,
            xhat,
            lambda,
            y,
            final_loss: f64::NAN,
            failed: false,
            config: None,
        })
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.xhat[i * self.d..(i + 1) * self.d]
    }
}

/// Balanced candidate labels: first half `+1`, second half `−1` for binary
/// models; round-robin `0, 1, …, C−1, 0, …` for multiclass.
pub fn balanced_labels(m: usize, classes: usize) -> Vec<i64> {
    if classes == 1 {
        (0..m).map(|i| if i < m / 2 { 1 } else { -1 }).collect()
    } else {
        (0..m).map(|i| (i % classes) as i64).collect()
    }
}

/// Value and gradients of the reconstruction loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// `m × d`.
    pub grad_xhat: Vec<f64>,
    pub grad_lambda: Vec<f64>,
}

/// Reusable buffers for evaluating the loss on `m` candidates against fixed weights.
pub struct Workspace<'a> {
    theta: &'a MlpParams,
    theta_flat: Vec<f64>,
    m: usize,
    obj: Objective,
    z: Vec<f64>,
    act: Vec<f64>,
    delta: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    scaled: Vec<f64>,
    resid: Vec<f64>,
    q: Vec<f64>,
    w: Vec<f64>,
    t: Vec<f64>,
}

impl<'a> Workspace<'a> {
    pub fn new(theta: &'a MlpParams, m: usize, obj: Objective) -> Result<Self> {
        ActivationMode::soft(obj.alpha)?;
        let Arch { h, c, .. } = theta.arch();
        Ok(Workspace {
            theta,
            theta_flat: theta.flatten(),
            m,
            obj,
            z: vec![0.0; m * h],
            act: vec![0.0; m * h],
            delta: vec![0.0; m * h],
            u: vec![0.0; m * h],
            v: vec![0.0; m * c],
            scaled: vec![0.0; m * h.max(c)],
            resid: vec![0.0; theta.num_params()],
            q: vec![0.0; m * h],
            w: vec![0.0; m * h],
            t: vec![0.0; m * h],
        })
    }

    fn check(&self, xhat: &[f64], lambda: &[f64], y: &[i64]) -> Result<()> {
        let arch = self.theta.arch();
        ensure_dim("candidate count", self.m, lambda.len())?;
        ensure_dim("candidate labels", self.m, y.len())?;
        ensure_dim("candidate matrix", self.m * arch.d, xhat.len())?;
        y.iter().try_for_each(|&l| arch.check_label(l))
    }

    /// Residual `θ − Σ λ_i g_i`, left in `self.resid`; returns the full loss.
    fn forward(&mut self, xhat: &[f64], lambda: &[f64], y: &[i64]) -> Result<f64> {
        let Arch { d, h, c } = self.theta.arch();
        let m = self.m;
        let mode = self.obj.mode();
        let w1 = self.theta.w1();
        let w2 = self.theta.w2();

        for row in self.z.chunks_mut(h) {
            row.copy_from_slice(self.theta.b1());
        }
        gemm(m, d, h, 1.0, xhat, Op::N, w1, Op::T, 1.0, &mut self.z);

        let mut logits = vec![0.0; c];
        for i in 0..m {
            let z = &self.z[i * h..(i + 1) * h];
            let a = &mut self.act[i * h..(i + 1) * h];
            for (aj, &zj) in a.iter_mut().zip(z) {
                *aj = relu(zj);
            }
            linalg::matvec(w2, c, h, a, &mut logits);
            let v = margin_coefficients(&logits, y[i], c);
            let u = &mut self.u[i * h..(i + 1) * h];
            linalg::matvec_t(w2, c, h, &v, u);
            let delta = &mut self.delta[i * h..(i + 1) * h];
            for j in 0..h {
                delta[j] = u[j] * mode.derivative(z[j]);
            }
            self.v[i * c..(i + 1) * c].copy_from_slice(&v);
        }

        // resid = θ − [ (ΛΔ)ᵀ X , Σ λ_i δ_i , (ΛV)ᵀ A ]
        self.resid.copy_from_slice(&self.theta_flat);
        let (r1, rest) = self.resid.split_at_mut(h * d);
        let (rb, r2) = rest.split_at_mut(h);
        let sd = &mut self.scaled[..m * h];
        for i in 0..m {
            for j in 0..h {
                sd[i * h + j] = lambda[i] * self.delta[i * h + j];
            }
            linalg::axpy(-1.0, &sd[i * h..(i + 1) * h], rb);
        }
        gemm(h, m, d, -1.0, sd, Op::T, xhat, Op::N, 1.0, r1);
        let sv = &mut self.scaled[..m * c];
        for i in 0..m {
            for k in 0..c {
                sv[i * c + k] = lambda[i] * self.v[i * c + k];
            }
        }
        gemm(c, m, h, -1.0, sv, Op::T, &self.act, Op::N, 1.0, r2);

        let loss = linalg::norm_sq(&self.resid) + self.obj.penalty(lambda);
        if !loss.is_finite() {
            return Err(Error::NonFinite("reconstruction loss".into()));
        }
        Ok(loss)
    }

    pub fn loss(&mut self, xhat: &[f64], lambda: &[f64], y: &[i64]) -> Result<f64> {
        self.check(xhat, lambda, y)?;
        self.forward(xhat, lambda, y)
    }

    pub fn loss_and_grad(&mut self, xhat: &[f64], lambda: &[f64], y: &[i64]) -> Result<LossGrad> {
        self.check(xhat, lambda, y)?;
        let loss = self.forward(xhat, lambda, y)?;
        let Arch { d, h, c } = self.theta.arch();
        let m = self.m;
        let mode = self.obj.mode();
        let (r1, rest) = self.resid.split_at(h * d);
        let (rb, r2) = rest.split_at(h);

        // q_i = R1 x_i + rb ;  w_i = R2ᵀ v_i
        for row in self.q.chunks_mut(h) {
            row.copy_from_slice(rb);
        }
        gemm(m, d, h, 1.0, xhat, Op::N, r1, Op::T, 1.0, &mut self.q);
        gemm(m, c, h, 1.0, &self.v, Op::N, r2, Op::N, 0.0, &mut self.w);

        let mut grad_lambda = vec![0.0; m];
        for i in 0..m {
            let s = i * h..(i + 1) * h;
            let g_dot_r = linalg::dot(&self.delta[s.clone()], &self.q[s.clone()]) + linalg::dot(&self.act[s.clone()], &self.w[s]);
            let floor = (self.obj.lambda_min - lambda[i]).max(0.0);
            grad_lambda[i] = -2.0 * g_dot_r - 2.0 * self.obj.penalty_weight * floor;
        }

        // ∂(g_i·r)/∂x_i = R1ᵀ δ_i + W1ᵀ t_i,  t_i = u ⊙ s'(z) ⊙ q + w ⊙ step(z)
        for idx in 0..m * h {
            let z = self.z[idx];
            self.t[idx] = self.u[idx] * mode.second_derivative(z) * self.q[idx] + self.w[idx] * step(z);
        }
        let mut grad_xhat = vec![0.0; m * d];
        gemm(m, h, d, 1.0, &self.delta, Op::N, r1, Op::N, 0.0, &mut grad_xhat);
        gemm(m, h, d, 1.0, &self.t, Op::N, self.theta.w1(), Op::N, 1.0, &mut grad_xhat);
        for (i, row) in grad_xhat.chunks_mut(d).enumerate() {
            let s = -2.0 * lambda[i];
            row.iter_mut().for_each(|g| *g *= s);
        }
        if !linalg::all_finite(&grad_xhat) || !linalg::all_finite(&grad_lambda) {
            return Err(Error::NonFinite("reconstruction gradient".into()));
        }
        Ok(LossGrad { loss, grad_xhat, grad_lambda })
    }

    /// Residual vector from the most recent evaluation.
    pub fn residual(&self) -> &[f64] {
        &self.resid
    }
}

/// Reconstruction loss of `pool` against fixed weights `theta`.
pub fn recon_loss(theta: &MlpParams, pool: &CandidatePool, obj: &Objective) -> Result<f64> {
    Workspace::new(theta, pool.len(), *obj)?.loss(&pool.xhat, &pool.lambda, &pool.y)
}

/// Exact gradients of [`recon_loss`] with respect to the candidates and coefficients.
pub fn recon_grad(theta: &MlpParams, pool: &CandidatePool, obj: &Objective) -> Result<LossGrad> {
    Workspace::new(theta, pool.len(), *obj)?.loss_and_grad(&pool.xhat, &pool.lambda, &pool.y)
}

/// Seeded initialization: `x̂ ~ N(0, σ²)` then `λ ~ U(0, 1)`.
pub fn initial_pool(theta: &MlpParams, cfg: &ReconConfig, run_id: usize) -> Result<CandidatePool> {
    let arch = theta.arch();
    cfg.validate(arch.c)?;
    let mut r = rng::seeded(cfg.seed);
    let xhat = rng::gaussian_vec(&mut r, cfg.m * arch.d, cfg.sigma);
    let lambda: Vec<f64> = (0..cfg.m).map(|_| r.random::<f64>()).collect();
    let mut pool = CandidatePool::new(run_id, arch.d, xhat, lambda, balanced_labels(cfg.m, arch.c))?;
    pool.config = Some(cfg.clone());
    Ok(pool)
}

/// Runs projected gradient descent on `(x̂, λ)` from the seeded initialization.
pub fn run_reconstruction(theta: &MlpParams, cfg: &ReconConfig, run_id: usize) -> Result<CandidatePool> {
    let pool = initial_pool(theta, cfg, run_id)?;
    optimize(theta, pool, cfg)
}

/// Continues optimization from an arbitrary starting pool.
pub fn optimize(theta: &MlpParams, mut pool: CandidatePool, cfg: &ReconConfig) -> Result<CandidatePool> {
    cfg.validate(theta.arch().c)?;
    ensure_dim("pool size vs m", cfg.m, pool.len())?;
    let mut ws = Workspace::new(theta, pool.len(), cfg.objective())?;
    let mut current = match ws.loss_and_grad(&pool.xhat, &pool.lambda, &pool.y) {
        Ok(g) => g,
        Err(Error::NonFinite(_)) => {
            pool.failed = true;
            return Ok(pool);
        }
        Err(e) => return Err(e),
    };
    let mut lr = cfg.lr;
    let mut next_x = pool.xhat.clone();
    let mut next_l = pool.lambda.clone();
    'outer: for _ in 0..cfg.iterations {
        loop {
            for ((nx, x), g) in next_x.iter_mut().zip(&pool.xhat).zip(&current.grad_xhat) {
                *nx = x - lr * g;
            }
            for ((nl, l), g) in next_l.iter_mut().zip(&pool.lambda).zip(&current.grad_lambda) {
                *nl = (l - lr * g).max(0.0);
            }
            let trial = ws.loss_and_grad(&next_x, &next_l, &pool.y);
            match trial {
                Ok(g) if !cfg.backtrack || g.loss <= current.loss => {
                    std::mem::swap(&mut pool.xhat, &mut next_x);
                    std::mem::swap(&mut pool.lambda, &mut next_l);
                    current = g;
                    break;
                }
                Ok(_) | Err(Error::NonFinite(_)) if cfg.backtrack => {
                    lr *= 0.5;
                    if lr < cfg.lr * 1e-12 {
                        break 'outer;
                    }
                }
                Err(Error::NonFinite(_)) => {
                    pool.failed = true;
                    break 'outer;
                }
                Ok(_) => unreachable!(),
                Err(e) => return Err(e),
            }
        }
    }
    pool.final_loss = current.loss;
    if pool.config.is_none() {
        pool.config = Some(cfg.clone());
    }
    Ok(pool)
}

/// Concatenates pools into one `M × d` candidate matrix plus `(run_id, cand_id)` tags.
pub fn stack_pools(pools: &[CandidatePool]) -> Result<(Vec<f64>, Vec<(usize, usize)>, Vec<i64>, usize)> {
    let Some(first) = pools.first() else {
        return Err(Error::Input("no candidate pools".into()));
    };
    let d = first.d;
    let mut x = Vec::new();
    let mut tags = Vec::new();
    let mut y = Vec::new();
    for p in pools {
        ensure_dim("pool dimension", d, p.d)?;
        x.extend_from_slice(&p.xhat);
        tags.extend((0..p.len()).map(|i| (p.run_id, i)));
        y.extend_from_slice(&p.y);
    }
    if tags.is_empty() {
        return Err(Error::Input("candidate pools are empty".into()));
    }
    Ok((x, tags, y, d))
}
