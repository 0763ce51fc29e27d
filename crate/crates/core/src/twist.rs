//! Importance-sampling measure for plain networks.
//!
//! Under the twisted measure the number of arrivals in `[0, t]` is Poisson with
//! mean `λ ∫₀ᵗ β(e^{-Ru}θ*) du`, the age `U` of an arrival has density
//! proportional to `β(e^{-Ru}θ*)`, and given `U = u` the job vector is
//! exponentially tilted by `e^{-Ru}θ*`. Ages are used throughout; an arrival
//! of age `u` happened at real time `t − u`.

use nalgebra::DVector;
use rand::Rng;

use crate::analytics::{network_segment, TwistSolution, PLAIN_CELLS};
use crate::error::{Error, Result};
use crate::model::{JobLaw, NetworkSpec, RareTarget};
use crate::segment::TwistedSegment;

/// Everything a sampler needs for one plain network and one twist.
#[derive(Debug, Clone)]
pub struct TwistPlan {
    pub theta_star: DVector<f64>,
    pub target: DVector<f64>,
    /// `I(a)` at `θ*` (zero for the untwisted plan).
    pub rate: f64,
    /// `log M(θ*)`.
    pub log_mgf: f64,
    pub horizon: f64,
    pub lambda: f64,
    seg: TwistedSegment,
}

/// One sample of the scaled content and its likelihood ratio.
#[derive(Debug, Clone)]
pub struct RunSample {
    /// `Y_n(t)`, the content summed over `n` independent copies.
    pub y: DVector<f64>,
    /// `log dℙ/dℚ = −⟨θ*, Y_n⟩ + n log M(θ*)`.
    pub log_lr: f64,
    /// Number of arrivals drawn.
    pub arrivals: u64,
}

impl RunSample {
    /// Whether `Y_n ≥ n a` componentwise.
    pub fn hits(&self, target: &DVector<f64>, n: f64) -> bool {
        self.y.iter().zip(target.iter()).all(|(y, a)| *y >= n * a)
    }
}

impl TwistPlan {
    /// Plan for a solved twist.
    pub fn build(spec: &NetworkSpec, sol: &TwistSolution, target: &RareTarget) -> Result<Self> {
        if target.a.len() != spec.nodes() || sol.theta_star.len() != spec.nodes() {
            return Err(Error::InvalidArgument("dimension mismatch between spec, target and twist".into()));
        }
        let seg = TwistedSegment::new(network_segment(spec, PLAIN_CELLS)?, sol.theta_star.clone(), PLAIN_CELLS)?;
        Ok(TwistPlan {
            theta_star: sol.theta_star.clone(),
            target: DVector::from_column_slice(&target.a),
            rate: sol.rate,
            log_mgf: sol.log_mgf,
            horizon: spec.horizon,
            lambda: spec.lambda,
            seg,
        })
    }

    /// The original measure: Poisson mean `λt`, uniform ages, untwisted jobs.
    pub fn untwisted(spec: &NetworkSpec, target: &RareTarget) -> Result<Self> {
        let l = spec.nodes();
        if target.a.len() != l {
            return Err(Error::InvalidArgument("dimension mismatch between spec and target".into()));
        }
        let theta = DVector::zeros(l);
        let seg = TwistedSegment::new(network_segment(spec, PLAIN_CELLS)?, theta.clone(), PLAIN_CELLS)?;
        Ok(TwistPlan {
            theta_star: theta,
            target: DVector::from_column_slice(&target.a),
            rate: 0.0,
            log_mgf: 0.0,
            horizon: spec.horizon,
            lambda: spec.lambda,
            seg,
        })
    }

    pub fn nodes(&self) -> usize {
        self.theta_star.len()
    }

    pub fn is_twisted(&self) -> bool {
        self.theta_star.iter().any(|&v| v != 0.0)
    }

    /// Twisted mean number of arrivals in `[0, t]` for one copy.
    pub fn poisson_mean_q(&self) -> f64 {
        self.seg.poisson_mean(1.0)
    }

    /// Twisted CDF of the age of an arrival.
    pub fn epoch_cdf(&self, u: f64) -> f64 {
        self.seg.epoch_cdf(u)
    }

    /// Inverse of [`epoch_cdf`](Self::epoch_cdf).
    pub fn epoch_inverse(&self, h: f64) -> f64 {
        self.seg.epoch_inverse(h)
    }

    /// Twisted density of the age of an arrival.
    pub fn epoch_density(&self, u: f64) -> f64 {
        self.seg.epoch_density(u)
    }

    /// Per-node tilt `e^{-Ru}θ*` of a job arriving with age `u`.
    pub fn job_twist(&self, u: f64) -> DVector<f64> {
        self.seg.seg.job_twist(u, &self.theta_star)
    }

    /// Twisted exponential job rates `μ_ℓ − (e^{-Ru}θ*)_ℓ` (`None` for non-exponential nodes).
    pub fn job_rates(&self, u: f64) -> Vec<Option<f64>> {
        let x = self.job_twist(u);
        self.seg
            .seg
            .jobs
            .laws()
            .iter()
            .zip(x.iter())
            .map(|(law, xi)| match law {
                JobLaw::Exponential { rate } => Some(rate - xi),
                _ => None,
            })
            .collect()
    }

    pub fn sample_epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.seg.sample_epoch(rng)
    }

    pub fn sample_job<R: Rng + ?Sized>(&self, u: f64, rng: &mut R) -> DVector<f64> {
        self.seg.sample_job(u, rng)
    }

    /// `log L` for a realized `Y_n`, written as `−⟨θ*, Y_n − n a⟩ − n I` so
    /// that `L ≤ e^{−nI}` holds exactly on the target event.
    pub fn log_lr(&self, y: &DVector<f64>, n: f64) -> f64 {
        let excess: f64 = self
            .theta_star
            .iter()
            .zip(y.iter().zip(self.target.iter()))
            .map(|(th, (y, a))| th * (y - n * a))
            .sum();
        -excess - n * self.rate
    }

    /// Draws `Y_n(t)` under the twist and computes its likelihood ratio.
    pub fn sample_yn_and_lr<R: Rng + ?Sized>(&self, n: u64, rng: &mut R) -> RunSample {
        let nf = n as f64;
        let mut y = DVector::zeros(self.nodes());
        let stats = self.seg.sample_into(nf, rng, &mut y);
        let log_lr = self.log_lr(&y, nf);
        debug_assert!(
            {
                let direct = -self.theta_star.dot(&y) + nf * self.log_mgf;
                (stats.event_log_lr - direct).abs() <= 1e-8 * (1.0 + stats.event_log_scale + direct.abs())
                    && (log_lr - direct).abs() <= 1e-8 * (1.0 + direct.abs() + nf * self.log_mgf.abs())
            },
            "event-level likelihood ratio disagrees with the closed form"
        );
        RunSample {
            y,
            log_lr,
            arrivals: stats.count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::solve_twist;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_plan() -> TwistPlan {
        let spec = NetworkSpec::single_node(1.0, 1.0, 1.0, 1.0);
        let target = RareTarget::new(vec![1.0]);
        let sol = solve_twist(&spec, &target).unwrap();
        TwistPlan::build(&spec, &sol, &target).unwrap()
    }

    #[test]
    fn single_node_poisson_mean() {
        let plan = single_plan();
        assert!((plan.poisson_mean_q() - 1.2315).abs() < 1e-3);
        assert!(plan.poisson_mean_q() >= plan.lambda * plan.horizon);
        assert_eq!(plan.epoch_cdf(0.0), 0.0);
        assert!((plan.epoch_cdf(1.0) - 1.0).abs() < 1e-15);
        let th = plan.theta_star[0];
        for k in 1..10 {
            let u = k as f64 / 10.0;
            let expect = ((u.exp() - th) / (1.0 - th)).ln() / ((1f64.exp() - th) / (1.0 - th)).ln();
            assert!((plan.epoch_cdf(u) - expect).abs() < 1e-13);
            assert!(plan.epoch_cdf(u) > plan.epoch_cdf(u - 0.1));
            assert!(plan.job_rates(u)[0].unwrap() > 0.0);
        }
    }

    #[test]
    fn untwisted_plan_is_original_measure() {
        let spec = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
        let plan = TwistPlan::untwisted(&spec, &RareTarget::new(vec![0.0, 1.0])).unwrap();
        assert!((plan.poisson_mean_q() - 1.0).abs() < 1e-15);
        assert!((plan.epoch_inverse(0.37) - 0.37).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(plan.sample_yn_and_lr(3, &mut rng).log_lr, 0.0);
        }
        assert_eq!(plan.job_rates(0.5), vec![Some(1.0), None]);
    }

    #[test]
    fn tandem_joint_rate() {
        let spec = NetworkSpec::tandem(2.0, 1.0, 2.0, 1.0, 1.0);
        let target = RareTarget::new(vec![1.2, 1.1]);
        let sol = solve_twist(&spec, &target).unwrap();
        let plan = TwistPlan::build(&spec, &sol, &target).unwrap();
        assert!((plan.poisson_mean_q() - 2.3478).abs() < 1e-3);
        assert!(plan.epoch_cdf(0.5) > 0.0 && plan.epoch_cdf(0.5) < 1.0);
    }

    #[test]
    fn twisted_mean_hits_target() {
        let plan = single_plan();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let runs = 20_000;
        let n = 5;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..runs {
            let y = plan.sample_yn_and_lr(n, &mut rng).y[0] / n as f64;
            s += y;
            s2 += y * y;
        }
        let mean = s / runs as f64;
        let se = ((s2 / runs as f64 - mean * mean) / runs as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se, "{mean} ± {se}");
    }
}
