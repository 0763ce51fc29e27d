//! Estimators with a relative-precision stopping rule.
//!
//! Runs are grouped in fixed batches. Run `i` always draws from
//! [`substream(seed, i)`](crate::rng::substream), batches are evaluated in
//! parallel and merged strictly in index order, and the stopping rule is
//! checked after every merged batch. Batches computed beyond the stopping
//! point are discarded, so the result does not depend on the worker count.
//!
//! Weights are accumulated on a fixed log-scale: a run contributes
//! `w = L·1{Y_n ≥ na}·e^{−s}` and the estimate is `e^{s}` times the mean of `w`.
//! For plain networks `s = −nI(a)`, which keeps every `w` in `[0, 1]`.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::analytics::{bahadur_rao_p, predicted_runs, solve_twist, TwistSolution};
use crate::error::{Error, Result};
use crate::model::{ModulatedNetworkSpec, NetworkSpec, RareTarget};
use crate::modulation::{
    sample_modulated_run, sample_path, solve_path_twist, untwisted_path, BackgroundPath, BestPath, PathTwist,
};
use crate::rng::substream;
use crate::twist::TwistPlan;

/// Stopping-rule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precision {
    /// Target relative half-width `ε`.
    pub eps: f64,
    /// Critical value `T` of the confidence interval.
    pub crit: f64,
    /// Hard cap on the number of runs (rounded up to a whole batch).
    pub max_runs: u64,
    /// The rule is not checked before this many runs.
    pub min_runs: u64,
    pub batch: u64,
    pub workers: usize,
}

impl Default for Precision {
    fn default() -> Self {
        Precision {
            eps: 0.1,
            crit: 1.96,
            max_runs: 100_000_000,
            min_runs: 1000,
            batch: 100,
            workers: 1,
        }
    }
}

/// Outcome of one estimation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub p_hat: f64,
    /// Sample variance of the per-run estimator `L·1{…}`.
    pub variance_hat: f64,
    /// `T·sqrt(variance_hat / runs)`.
    pub half_width: f64,
    pub runs: u64,
    /// Seconds; not part of any deterministic output.
    pub wall_time: f64,
    pub master_seed: u64,
    /// The run cap was hit before the precision was reached.
    pub capped: bool,
    /// Log of the accumulation scale.
    pub log_scale: f64,
}

impl Estimate {
    pub fn relative_half_width(&self) -> f64 {
        self.half_width / self.p_hat
    }
}

/// Streaming mean and second central moment.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Exact pairwise combination of two sets of moments.
    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let n = n1 + n2;
        let d = other.mean - self.mean;
        self.mean += d * n2 / n;
        self.m2 += other.m2 + d * d * n1 * n2 / n;
        self.count += other.count;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }
}

/// Runs batches until the precision rule or the cap stops the estimation.
///
/// `batch(start, len)` must return the scaled weights of runs
/// `start..start + len` in index order, plus any per-batch extra data.
pub fn drive<X, F>(precision: &Precision, seed: u64, log_scale: f64, batch: F) -> Result<(Estimate, Vec<X>)>
where
    X: Send,
    F: Fn(u64, u64) -> Result<(Vec<f64>, X)> + Sync,
{
    if !(precision.eps > 0.0 && precision.crit > 0.0 && precision.batch > 0) {
        return Err(Error::InvalidArgument("eps, crit and batch size must be positive".into()));
    }
    let started = Instant::now();
    let workers = precision.workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut acc = Moments::default();
    let mut extras = Vec::new();
    let mut next_batch = 0u64;
    let mut capped = false;
    'outer: loop {
        let wave: Vec<u64> = (next_batch..next_batch + workers as u64).collect();
        let results: Vec<Result<(Vec<f64>, X)>> = pool.install(|| {
            wave.par_iter()
                .map(|&b| batch(b * precision.batch, precision.batch))
                .collect()
        });
        for r in results {
            let (weights, extra) = r?;
            acc.merge(&Moments::from_slice(&weights));
            extras.push(extra);
            next_batch += 1;
            let ratio = precision.crit * (acc.variance() / acc.count as f64).sqrt() / acc.mean;
            if acc.count >= precision.min_runs && acc.mean > 0.0 && ratio <= precision.eps {
                break 'outer;
            }
            if acc.count >= precision.max_runs {
                capped = true;
                break 'outer;
            }
        }
    }
    let scale = log_scale.exp();
    let variance_hat = acc.variance() * scale * scale;
    Ok((
        Estimate {
            p_hat: acc.mean * scale,
            variance_hat,
            half_width: precision.crit * (variance_hat / acc.count as f64).sqrt(),
            runs: acc.count,
            wall_time: started.elapsed().as_secs_f64(),
            master_seed: seed,
            capped,
            log_scale,
        },
        extras,
    ))
}

/// Twisted plan for a target, falling back to the original measure when the
/// target is not rare.
pub fn is_plan(spec: &NetworkSpec, target: &RareTarget) -> Result<(TwistPlan, Option<TwistSolution>)> {
    match solve_twist(spec, target) {
        Ok(sol) => Ok((TwistPlan::build(spec, &sol, target)?, Some(sol))),
        Err(Error::RarityViolated { .. }) => Ok((TwistPlan::untwisted(spec, target)?, None)),
        Err(e) => Err(e),
    }
}

/// Outcome of run `index`: whether it hit the target and its `log L`.
pub fn plan_run(plan: &TwistPlan, n: u64, seed: u64, index: u64) -> (bool, f64) {
    let mut rng = substream(seed, index);
    let s = plan.sample_yn_and_lr(n, &mut rng);
    (s.hits(&plan.target, n as f64), s.log_lr)
}

/// Scaled weights of runs `start..start + len` under a plan.
pub fn plan_weights(plan: &TwistPlan, n: u64, seed: u64, start: u64, len: u64) -> Vec<f64> {
    let log_scale = -(n as f64) * plan.rate;
    (start..start + len)
        .map(|i| {
            let (hit, log_lr) = plan_run(plan, n, seed, i);
            if hit {
                let w = (log_lr - log_scale).exp();
                assert!(w <= 1.0, "likelihood ratio above e^(-nI) on the target event");
                w
            } else {
                0.0
            }
        })
        .collect()
}

fn estimate_with_plan(plan: &TwistPlan, n: u64, precision: &Precision, seed: u64) -> Result<Estimate> {
    let log_scale = -(n as f64) * plan.rate;
    drive(precision, seed, log_scale, |start, len| Ok((plan_weights(plan, n, seed, start, len), ()))).map(|r| r.0)
}

/// Importance-sampling estimate of `P(Y_n(t) ≥ n a)`.
pub fn estimate_is(spec: &NetworkSpec, target: &RareTarget, n: u64, precision: &Precision, seed: u64) -> Result<Estimate> {
    let (plan, _) = is_plan(spec, target)?;
    estimate_with_plan(&plan, n, precision, seed)
}

/// Crude Monte Carlo estimate of `P(Y_n(t) ≥ n a)`.
pub fn estimate_mc(spec: &NetworkSpec, target: &RareTarget, n: u64, precision: &Precision, seed: u64) -> Result<Estimate> {
    let plan = TwistPlan::untwisted(spec, target)?;
    estimate_with_plan(&plan, n, precision, seed)
}

/// One row of a sweep over `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: u64,
    pub p_hat: f64,
    pub half_width: f64,
    pub runs: u64,
    pub predicted_runs: Option<f64>,
    pub br_approx: Option<f64>,
    pub seed: u64,
    pub capped: bool,
}

/// Importance-sampling estimates for each `n`, each with the same master seed.
pub fn sweep(
    spec: &NetworkSpec,
    target: &RareTarget,
    n_list: &[u64],
    precision: &Precision,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if n_list.is_empty() {
        return Ok(Vec::new());
    }
    let (plan, sol) = is_plan(spec, target)?;
    n_list
        .iter()
        .map(|&n| {
            let est = estimate_with_plan(&plan, n, precision, seed)?;
            Ok(SweepRow {
                n,
                p_hat: est.p_hat,
                half_width: est.half_width,
                runs: est.runs,
                predicted_runs: sol.as_ref().map(|s| predicted_runs(s, n as f64, precision.eps, precision.crit)),
                br_approx: sol.as_ref().map(|s| bahadur_rao_p(s, n as f64)),
                seed,
                capped: est.capped,
            })
        })
        .collect()
}

/// CSV with columns `n, p_hat, half_width, runs, predicted_runs, br_approx, seed`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n,p_hat,half_width,runs,predicted_runs,br_approx,seed\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:e}"));
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{},{},{},{}\n",
            r.n,
            r.p_hat,
            r.half_width,
            r.runs,
            opt(r.predicted_runs),
            opt(r.br_approx),
            r.seed
        ));
    }
    out
}

/// Diagnostics of one modulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub index: u64,
    pub path: BackgroundPath,
    /// `I_f(a)` of the sampled path.
    pub rate: f64,
    pub theta: Vec<f64>,
    /// Arrivals per segment.
    pub counts: Vec<u64>,
    /// Poisson means per segment and per copy under the twist and the original measure.
    pub q_means: Vec<f64>,
    pub p_means: Vec<f64>,
    pub hit: bool,
    pub log_lr: f64,
}

/// Estimate for a modulated network with the best sampled path.
#[derive(Debug, Clone)]
pub struct ModulatedEstimate {
    pub estimate: Estimate,
    pub best: BestPath,
    /// Per-run diagnostics, when requested.
    pub records: Vec<RunRecord>,
}

/// Per-run sampler for modulated networks.
struct ModulatedSampler<'a> {
    spec: &'a ModulatedNetworkSpec,
    target: &'a RareTarget,
    n: u64,
    twisted: bool,
    /// Twist of the path without jumps, which every run would otherwise re-solve.
    constant: PathTwist,
    log_scale: f64,
    record: bool,
}

impl<'a> ModulatedSampler<'a> {
    fn new(spec: &'a ModulatedNetworkSpec, target: &'a RareTarget, n: u64, twisted: bool, record: bool) -> Result<Self> {
        spec.check()?;
        if target.a.len() != spec.nodes() {
            return Err(Error::InvalidArgument("target dimension differs from node count".into()));
        }
        let path = BackgroundPath::constant(spec.initial_state, spec.horizon);
        let constant = if twisted {
            solve_path_twist(&path, spec, target, None)?
        } else {
            untwisted_path(&path, spec, target)?
        };
        let log_scale = -(n as f64) * constant.rate();
        Ok(ModulatedSampler {
            spec,
            target,
            n,
            twisted,
            constant,
            log_scale,
            record,
        })
    }

    fn batch(&self, seed: u64, start: u64, len: u64) -> Result<(Vec<f64>, (BestPath, Vec<RunRecord>))> {
        let mut weights = Vec::with_capacity(len as usize);
        let mut best = BestPath::default();
        let mut records = Vec::new();
        let mut warm: Option<DVector<f64>> = None;
        let nf = self.n as f64;
        for i in start..start + len {
            let mut rng = substream(seed, i);
            let path = sample_path(&self.spec.generator, self.spec.initial_state, self.spec.horizon, &mut rng)?;
            let solved;
            let twist = if path.jumps() == 0 {
                &self.constant
            } else {
                solved = if self.twisted {
                    solve_path_twist(&path, self.spec, self.target, warm.as_ref())?
                } else {
                    untwisted_path(&path, self.spec, self.target)?
                };
                warm = Some(solved.theta_star().clone());
                &solved
            };
            let run = sample_modulated_run(twist, self.n, &mut rng);
            let hit = run.y.iter().zip(&self.target.a).all(|(y, a)| *y >= nf * a);
            weights.push(if hit { (run.log_lr - self.log_scale).exp() } else { 0.0 });
            best.offer(&twist.path, twist.rate(), twist.theta_star());
            if self.record {
                records.push(RunRecord {
                    index: i,
                    path: twist.path.clone(),
                    rate: twist.rate(),
                    theta: twist.theta_star().iter().copied().collect(),
                    counts: run.counts,
                    q_means: twist.poisson_means_q(),
                    p_means: twist.poisson_means_p(),
                    hit,
                    log_lr: run.log_lr,
                });
            }
        }
        Ok((weights, (best, records)))
    }
}

fn estimate_modulated(
    spec: &ModulatedNetworkSpec,
    target: &RareTarget,
    n: u64,
    precision: &Precision,
    seed: u64,
    twisted: bool,
    record: bool,
) -> Result<ModulatedEstimate> {
    let sampler = ModulatedSampler::new(spec, target, n, twisted, record)?;
    let (estimate, extras) = drive(precision, seed, sampler.log_scale, |start, len| sampler.batch(seed, start, len))?;
    let mut best = BestPath::default();
    let mut records = Vec::new();
    for (b, r) in extras {
        best.merge(b);
        records.extend(r);
    }
    Ok(ModulatedEstimate {
        estimate,
        best,
        records,
    })
}

/// Importance sampling for a modulated network: the background path is drawn
/// under the original measure and the twist is solved per path.
pub fn estimate_modulated_is(
    spec: &ModulatedNetworkSpec,
    target: &RareTarget,
    n: u64,
    precision: &Precision,
    seed: u64,
    record: bool,
) -> Result<ModulatedEstimate> {
    estimate_modulated(spec, target, n, precision, seed, true, record)
}

/// Crude Monte Carlo for a modulated network.
pub fn estimate_modulated_mc(
    spec: &ModulatedNetworkSpec,
    target: &RareTarget,
    n: u64,
    precision: &Precision,
    seed: u64,
    record: bool,
) -> Result<ModulatedEstimate> {
    estimate_modulated(spec, target, n, precision, seed, false, record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single() -> NetworkSpec {
        NetworkSpec::single_node(1.0, 1.0, 1.0, 1.0)
    }

    #[test]
    fn moments_merge_is_exact() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1013) as f64 / 1013.0).collect();
        let whole = Moments::from_slice(&xs);
        let mut parts = Moments::default();
        for c in xs.chunks(37) {
            parts.merge(&Moments::from_slice(c));
        }
        assert!((whole.mean - parts.mean).abs() < 1e-14);
        assert!((whole.variance() - parts.variance()).abs() < 1e-14);
    }

    #[test]
    fn trivial_target_gives_one() {
        let p = Precision::default();
        let est = estimate_is(&single(), &RareTarget::new(vec![0.0]), 10, &p, 1).unwrap();
        assert_eq!(est.p_hat, 1.0);
        assert_eq!(est.runs, p.min_runs);
        let est = estimate_mc(&single(), &RareTarget::new(vec![0.0]), 10, &p, 1).unwrap();
        assert_eq!(est.p_hat, 1.0);
    }

    #[test]
    fn precision_rule_holds() {
        let p = Precision::default();
        let target = RareTarget::new(vec![1.0]);
        let est = estimate_is(&single(), &target, 20, &p, 3).unwrap();
        assert!(!est.capped);
        assert!(est.relative_half_width() <= p.eps);
        assert!((est.half_width - p.crit * (est.variance_hat / est.runs as f64).sqrt()).abs() < 1e-18);
        let sol = solve_twist(&single(), &target).unwrap();
        assert!(est.p_hat <= (-20.0 * sol.rate).exp());
        assert_eq!(est.runs % p.batch, 0);
    }

    #[test]
    fn variance_matches_two_pass_replay() {
        let p = Precision::default();
        let target = RareTarget::new(vec![1.0]);
        let (plan, _) = is_plan(&single(), &target).unwrap();
        let est = estimate_is(&single(), &target, 20, &p, 4).unwrap();
        let w = plan_weights(&plan, 20, 4, 0, est.runs);
        let scale = est.log_scale.exp();
        let vals: Vec<f64> = w.iter().map(|x| x * scale).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!((var - est.variance_hat).abs() <= 1e-10 * var);
        assert!((mean - est.p_hat).abs() <= 1e-12 * mean);
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let target = RareTarget::new(vec![1.0]);
        let mut p = Precision::default();
        let a = estimate_is(&single(), &target, 40, &p, 9).unwrap();
        p.workers = 3;
        let b = estimate_is(&single(), &target, 40, &p, 9).unwrap();
        assert_eq!((a.p_hat, a.variance_hat, a.runs), (b.p_hat, b.variance_hat, b.runs));
    }

    #[test]
    fn cap_is_flagged() {
        let p = Precision {
            max_runs: 1000,
            eps: 1e-6,
            ..Precision::default()
        };
        let est = estimate_is(&single(), &RareTarget::new(vec![1.0]), 10, &p, 2).unwrap();
        assert!(est.capped);
        assert_eq!(est.runs, 1000);
    }

    #[test]
    fn empty_sweep() {
        let rows = sweep(&single(), &RareTarget::new(vec![1.0]), &[], &Precision::default(), 1).unwrap();
        assert!(rows.is_empty());
        assert_eq!(sweep_csv(&rows), "n,p_hat,half_width,runs,predicted_runs,br_approx,seed\n");
    }

    #[test]
    fn one_state_modulated_equals_plain() {
        let plain = single();
        let m = ModulatedNetworkSpec::from_network(&plain);
        let target = RareTarget::new(vec![1.0]);
        let p = Precision::default();
        let a = estimate_is(&plain, &target, 30, &p, 17).unwrap();
        let b = estimate_modulated_is(&m, &target, 30, &p, 17, false).unwrap().estimate;
        assert_eq!((a.p_hat, a.variance_hat, a.runs), (b.p_hat, b.variance_hat, b.runs));
        let tandem = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
        let target = RareTarget::new(vec![0.0, 1.0]);
        let a = estimate_is(&tandem, &target, 10, &p, 5).unwrap();
        let b = estimate_modulated_is(&ModulatedNetworkSpec::from_network(&tandem), &target, 10, &p, 5, false)
            .unwrap()
            .estimate;
        assert_eq!((a.p_hat, a.variance_hat, a.runs), (b.p_hat, b.variance_hat, b.runs));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn estimate_bounded_by_decay(n in 5u64..60, a in 0.8f64..1.6) {
            let target = RareTarget::new(vec![a]);
            let p = Precision { max_runs: 3000, ..Precision::default() };
            let est = estimate_is(&single(), &target, n, &p, n).unwrap();
            let sol = solve_twist(&single(), &target).unwrap();
            prop_assert!(est.p_hat >= 0.0);
            prop_assert!(est.p_hat <= (-(n as f64) * sol.rate).exp());
        }
    }
}
