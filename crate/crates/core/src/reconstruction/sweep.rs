use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_reconstruction, CandidatePool, ReconConfig};
use crate::error::{Error, Result};
use crate::model::MlpParams;
use crate::rng::{self, Rng};

/// Sampling distribution for one swept hyperparameter, in the W&B sweep vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case")]
pub enum ParamDist {
    /// `exp(U(ln min, ln max))`
    LogUniformValues { min: f64, max: f64 },
    Uniform { min: f64, max: f64 },
    Constant { value: f64 },
}

impl ParamDist {
    pub fn sample(&self, r: &mut Rng) -> f64 {
        match *self {
            ParamDist::LogUniformValues { min, max } => {
                if min == max {
                    min
                } else {
                    r.random_range(min.ln()..max.ln()).exp()
                }
            }
            ParamDist::Uniform { min, max } => {
                if min == max {
                    min
                } else {
                    r.random_range(min..max)
                }
            }
            ParamDist::Constant { value } => value,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            ParamDist::LogUniformValues { min, max } => min > 0.0 && min <= max && max.is_finite(),
            ParamDist::Uniform { min, max } => min <= max && min.is_finite() && max.is_finite(),
            ParamDist::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid distribution for {name}: {self:?}")))
        }
    }
}

/// Randomized hyperparameter sweep over reconstruction runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub runs: usize,
    pub m: usize,
    pub iterations: usize,
    pub master_seed: u64,
    pub lr: ParamDist,
    pub sigma: ParamDist,
    pub lambda_min: ParamDist,
    pub alpha: ParamDist,
    pub penalty_weight: f64,
    pub backtrack: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            runs: 50,
            m: 500,
            iterations: 10_000,
            master_seed: 0,
            lr: ParamDist::LogUniformValues { min: 1e-6, max: 1.0 },
            sigma: ParamDist::LogUniformValues { min: 1e-6, max: 1.0 },
            lambda_min: ParamDist::Uniform { min: 0.01, max: 0.5 },
            alpha: ParamDist::Uniform { min: 10.0, max: 500.0 },
            penalty_weight: 1.0,
            backtrack: true,
        }
    }
}

/// Worker count for [`run_sweep`]; results do not depend on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepWorkers(pub usize);

impl Default for SweepWorkers {
    fn default() -> Self {
        SweepWorkers(1)
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Input("sweep needs at least one run".into()));
        }
        self.lr.validate("lr")?;
        self.sigma.validate("sigma")?;
        self.lambda_min.validate("lambda_min")?;
        self.alpha.validate("alpha")?;
        Ok(())
    }

    /// Hyperparameters of run `index`, drawn from its own seeded stream.
    pub fn run_config(&self, index: usize) -> ReconConfig {
        let mut r = rng::seeded(rng::derive_seed(self.master_seed, 2 * index as u64));
        let lr = self.lr.sample(&mut r);
        let sigma = self.sigma.sample(&mut r);
        let lambda_min = self.lambda_min.sample(&mut r);
        let alpha = self.alpha.sample(&mut r);
        ReconConfig {
            m: self.m,
            sigma,
            lr,
            lambda_min,
            alpha,
            iterations: self.iterations,
            penalty_weight: self.penalty_weight,
            backtrack: self.backtrack,
            seed: rng::derive_seed(self.master_seed, 2 * index as u64 + 1),
        }
    }
}

/// Runs every sweep configuration; failed runs stay in the output, flagged.
///
/// Runs are independent and merged by index, so any worker count gives the same pools.
pub fn run_sweep(theta: &MlpParams, spec: &SweepSpec, workers: SweepWorkers) -> Result<Vec<CandidatePool>> {
    spec.validate()?;
    spec.run_config(0).validate(theta.arch().c)?;
    let one = |i: usize| run_reconstruction(theta, &spec.run_config(i), i);
    if workers.0 <= 1 {
        return (0..spec.runs).map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.0)
        .build()
        .map_err(|e| Error::Input(format!("cannot start {} workers: {e}", workers.0)))?;
    pool.install(|| (0..spec.runs).into_par_iter().map(one).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    #[test]
    fn default_ranges() {
        let spec = SweepSpec::default();
        assert_eq!(spec.m, 500);
        for i in 0..200 {
            let c = spec.run_config(i);
            assert!((1e-6..=1.0).contains(&c.lr) && (1e-6..=1.0).contains(&c.sigma));
            assert!((0.01..=0.5).contains(&c.lambda_min) && (10.0..=500.0).contains(&c.alpha));
        }
        assert_eq!(spec.runs * spec.m, 25_000);
    }

    /// Asymptotic Kolmogorov–Smirnov: `√n·D < 1.628` ⇔ p > 0.01.
    #[test]
    fn log_lr_is_uniform() {
        let dist = ParamDist::LogUniformValues { min: 1e-6, max: 1.0 };
        let mut r = rng::seeded(17);
        let mut u: Vec<f64> = (0..10_000).map(|_| (dist.sample(&mut r).log10() + 6.0) / 6.0).collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i as f64 + 1.0) / n - v).abs().max((v - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(n.sqrt() * d < 1.628, "KS statistic {}", n.sqrt() * d);
    }

    #[test]
    fn json_mirrors_wandb_layout() {
        let spec = SweepSpec::default();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains(r#""lr":{"distribution":"log_uniform_values","min":1e-6,"max":1.0}"#), "{text}");
        let partial: SweepSpec = serde_json::from_str(r#"{"runs": 3, "alpha": {"distribution": "constant", "value": 50}}"#).unwrap();
        assert_eq!(partial.runs, 3);
        assert_eq!(partial.alpha, ParamDist::Constant { value: 50.0 });
        assert_eq!(partial.m, 500);
    }

    #[test]
    fn single_run_sweep_is_one_reconstruction() {
        let theta = MlpParams::init_uniform(Arch::new(3, 5, 1).unwrap(), 1);
        let spec = SweepSpec { runs: 1, m: 4, iterations: 20, master_seed: 5, ..Default::default() };
        let pools = run_sweep(&theta, &spec, SweepWorkers(1)).unwrap();
        assert_eq!(pools.len(), 1);
        assert_eq!(pools[0], run_reconstruction(&theta, &spec.run_config(0), 0).unwrap());
    }

    #[test]
    fn workers_do_not_change_results() {
        let theta = MlpParams::init_uniform(Arch::new(3, 5, 1).unwrap(), 1);
        let spec = SweepSpec { runs: 4, m: 4, iterations: 30, master_seed: 6, ..Default::default() };
        let serial = run_sweep(&theta, &spec, SweepWorkers(1)).unwrap();
        let parallel = run_sweep(&theta, &spec, SweepWorkers(3)).unwrap();
        assert_eq!(serial, parallel);
    }
}
