//! Markov-modulated networks: background paths, path-conditional twists and
//! the per-path sampler.
//!
//! Given a background path with jump epochs `t_1 < … < t_K` and states
//! `j_0, …, j_K`, segment `i` covers `[t_i, t_{i+1})`. A shot at real time `u`
//! in that segment reaches the horizon through
//! `P_i(u) = e^{-(t_{i+1} − u) R_{j_i}} D_{i+1} ⋯ D_K` with
//! `D_i = e^{-(t_{i+1} − t_i) R_{j_i}}`, so conditionally on the path the
//! content at the horizon is a sum of independent segment contributions and
//! its log-MGF is the sum of the segment cumulants.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};

use crate::analytics::{legendre, TwistSolution, PLAIN_CELLS};
use crate::error::{Error, Result};
use crate::linalg::{eye, matrix_exp, Propagator};
use crate::model::{JobLaw, ModulatedNetworkSpec, RareTarget};
use crate::segment::{Cgf, Coefficient, Segment, TwistedSegment};

/// Paths with more jumps than this are rejected as a misconfigured generator.
pub const MAX_JUMPS: usize = 10_000;
/// Minimum grid cells per segment for multi-node propagators.
pub const SEGMENT_CELLS: usize = 32;

/// One realization of the background chain on `[0, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundPath {
    /// Jump epochs `t_1 < … < t_K` inside `(0, t)`.
    pub jump_times: Vec<f64>,
    /// States `j_0, …, j_K` (0-based), one per segment.
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl BackgroundPath {
    /// Path that stays in `state` throughout.
    pub fn constant(state: usize, horizon: f64) -> Self {
        BackgroundPath {
            jump_times: Vec::new(),
            states: vec![state],
            horizon,
        }
    }

    pub fn jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// `(start, end, state)` for each segment.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        let k = self.jump_times.len();
        (0..=k).map(move |i| {
            let start = if i == 0 { 0.0 } else { self.jump_times[i - 1] };
            let end = if i == k { self.horizon } else { self.jump_times[i] };
            (start, end, self.states[i])
        })
    }

    /// Checks ordering and alternation.
    pub fn validate(&self) -> Result<()> {
        let ok_len = self.states.len() == self.jump_times.len() + 1;
        let ok_states = self.states.windows(2).all(|w| w[0] != w[1]);
        let mut prev = 0.0;
        let mut ok_times = true;
        for &t in &self.jump_times {
            ok_times &= t > prev && t < self.horizon;
            prev = t;
        }
        if ok_len && ok_states && ok_times {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("malformed background path {self}")))
        }
    }

    /// Deterministic order used to break ties between equally good paths:
    /// fewer jumps, then lexicographic states, then earlier jump times.
    pub fn tie_break_cmp(&self, other: &Self) -> Ordering {
        self.jumps()
            .cmp(&other.jumps())
            .then_with(|| self.states.cmp(&other.states))
            .then_with(|| {
                self.jump_times
                    .iter()
                    .zip(&other.jump_times)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    }
}

impl fmt::Display for BackgroundPath {
    /// 1-based states with jump times, e.g. `1@0.6540>2@0.7390>1`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.states.iter().enumerate() {
            if i > 0 {
                write!(f, "@{:.4}>", self.jump_times[i - 1])?;
            }
            write!(f, "{}", s + 1)?;
        }
        Ok(())
    }
}

/// Simulates the background chain from `j0` on `[0, t]`.
pub fn sample_path<R: Rng + ?Sized>(generator: &[Vec<f64>], j0: usize, t: f64, rng: &mut R) -> Result<BackgroundPath> {
    let mut states = vec![j0];
    let mut times = Vec::new();
    let mut now = 0.0;
    let mut j = j0;
    loop {
        let q = -generator[j][j];
        if q <= 0.0 {
            break;
        }
        now += Exp::new(q).expect("positive exit rate").sample(rng);
        if now >= t {
            break;
        }
        if times.len() == MAX_JUMPS {
            return Err(Error::PathTooLong {
                jumps: MAX_JUMPS + 1,
                limit: MAX_JUMPS,
            });
        }
        let mut pick = rng.random::<f64>() * q;
        let mut next = j;
        for (k, &rate) in generator[j].iter().enumerate() {
            if k == j || rate <= 0.0 {
                continue;
            }
            next = k;
            if pick < rate {
                break;
            }
            pick -= rate;
        }
        times.push(now);
        states.push(next);
        j = next;
    }
    Ok(BackgroundPath {
        jump_times: times,
        states,
        horizon: t,
    })
}

/// Transfer data of one path segment.
#[derive(Debug, Clone)]
pub struct SegmentCoefficients {
    pub state: usize,
    pub start: f64,
    pub end: f64,
    /// `D_i = e^{-(t_{i+1} − t_i) R_{j_i}}`.
    pub d: DMatrix<f64>,
    /// `D_{i+1} ⋯ D_K` (identity for the last segment).
    pub tail: DMatrix<f64>,
    /// Single node: `P̄_i` with `P_i(u) = P̄_i e^{r_{j_i} u}`.
    pub p_bar: Option<f64>,
    rate: DMatrix<f64>,
}

impl SegmentCoefficients {
    /// `P_i(u) = e^{-(t_{i+1} − u) R_{j_i}} D_{i+1} ⋯ D_K`.
    pub fn p_at(&self, u: f64) -> Result<DMatrix<f64>> {
        Ok(matrix_exp(&self.rate, self.end - u)? * &self.tail)
    }
}

/// Per-segment transfer matrices of a path.
pub fn segment_coefficients(path: &BackgroundPath, spec: &ModulatedNetworkSpec) -> Result<Vec<SegmentCoefficients>> {
    path.validate()?;
    let rates = spec.rate_matrices();
    let l = spec.nodes();
    let segs: Vec<(f64, f64, usize)> = path.segments().collect();
    let mut out = Vec::with_capacity(segs.len());
    let mut tail = eye(l);
    let mut scalar_tail = 0.0;
    for &(start, end, state) in segs.iter().rev() {
        let d = matrix_exp(&rates[state], end - start)?;
        let p_bar = (l == 1).then(|| {
            let r = rates[state][(0, 0)];
            (-r * end + scalar_tail).exp()
        });
        out.push(SegmentCoefficients {
            state,
            start,
            end,
            tail: tail.clone(),
            d: d.clone(),
            p_bar,
            rate: rates[state].clone(),
        });
        if l == 1 {
            scalar_tail -= rates[state][(0, 0)] * (end - start);
        }
        tail = d * tail;
    }
    out.reverse();
    Ok(out)
}

/// Segments of a path as shot-noise building blocks.
fn path_segments(path: &BackgroundPath, spec: &ModulatedNetworkSpec) -> Result<Vec<Segment>> {
    path.validate()?;
    let rates = spec.rate_matrices();
    let l = spec.nodes();
    let segs: Vec<(f64, f64, usize)> = path.segments().collect();
    let mut out = Vec::with_capacity(segs.len());
    let mut tail = eye(l);
    let mut scalar_c = 1.0;
    for &(start, end, state) in segs.iter().rev() {
        let len = end - start;
        let st = &spec.states[state];
        let coef = if l == 1 {
            let r = rates[state][(0, 0)];
            let c = Coefficient::Scalar { r, c: scalar_c };
            scalar_c *= (-r * len).exp();
            c
        } else {
            let cells = if path.jumps() == 0 { PLAIN_CELLS } else { SEGMENT_CELLS };
            let prop = Propagator::new(&rates[state], &tail, len, cells)?;
            let next = prop.at_span().clone();
            let c = Coefficient::Matrix(prop);
            tail = next;
            c
        };
        out.push(Segment {
            lambda: st.lambda,
            jobs: st.jobs.clone(),
            length: len,
            coef,
            right_end: Some(end),
        });
    }
    out.reverse();
    Ok(out)
}

fn path_cgf(path: &BackgroundPath, spec: &ModulatedNetworkSpec) -> Result<Cgf> {
    Ok(Cgf {
        segments: path_segments(path, spec)?,
        nodes: spec.nodes(),
    })
}

/// `log M_f(θ)`, the log-MGF of the content at the horizon given the path.
pub fn path_log_mgf(path: &BackgroundPath, spec: &ModulatedNetworkSpec, theta: &[f64]) -> Result<f64> {
    path_cgf(path, spec)?.value(&DVector::from_column_slice(theta))
}

/// Conditional mean `∇log M_f(0)`.
pub fn path_mean(path: &BackgroundPath, spec: &ModulatedNetworkSpec) -> Result<DVector<f64>> {
    Ok(path_cgf(path, spec)?.mean())
}

/// Twist for one background path, with the sampling data of each segment.
#[derive(Debug, Clone)]
pub struct PathTwist {
    pub path: BackgroundPath,
    pub solution: TwistSolution,
    pub target: DVector<f64>,
    segments: Vec<TwistedSegment>,
}

/// Result of one modulated run.
#[derive(Debug, Clone)]
pub struct ModulatedRun {
    pub y: DVector<f64>,
    pub log_lr: f64,
    /// Arrivals per segment.
    pub counts: Vec<u64>,
}

impl PathTwist {
    pub fn theta_star(&self) -> &DVector<f64> {
        &self.solution.theta_star
    }

    /// `I_f(a)`.
    pub fn rate(&self) -> f64 {
        self.solution.rate
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Twisted Poisson mean of each segment for one copy.
    pub fn poisson_means_q(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.poisson_mean(1.0)).collect()
    }

    /// Original Poisson mean `λ_{j_i}(t_{i+1} − t_i)` of each segment.
    pub fn poisson_means_p(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.seg.lambda * s.seg.length).collect()
    }

    /// Segment index containing real time `u`.
    pub fn segment_of(&self, u: f64) -> usize {
        self.path.jump_times.partition_point(|&t| t <= u)
    }

    /// Twisted arrival density at real time `u` within its segment.
    pub fn epoch_density(&self, u: f64) -> f64 {
        let s = &self.segments[self.segment_of(u)];
        s.epoch_density(s.seg.right_end.unwrap_or(self.path.horizon) - u)
    }

    /// Job tilt `P_i(u) θ*_f` at real time `u`.
    pub fn job_twist(&self, u: f64) -> DVector<f64> {
        let s = &self.segments[self.segment_of(u)];
        s.seg.job_twist(s.seg.right_end.unwrap_or(self.path.horizon) - u, self.theta_star())
    }

    /// Twisted exponential job rates at real time `u` (`None` for other laws).
    pub fn job_rates(&self, u: f64) -> Vec<Option<f64>> {
        let s = &self.segments[self.segment_of(u)];
        let x = self.job_twist(u);
        s.seg
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

    /// `log L` in the form `−⟨θ*_f, Y_n − n a⟩ − n I_f`.
    pub fn log_lr(&self, y: &DVector<f64>, n: f64) -> f64 {
        let excess: f64 = self
            .theta_star()
            .iter()
            .zip(y.iter().zip(self.target.iter()))
            .map(|(th, (y, a))| th * (y - n * a))
            .sum();
        -excess - n * self.rate()
    }
}

/// Solves `sup_{θ ≥ 0} ⟨θ, a⟩ − log M_f(θ)` for one path.
///
/// No rarity check is done here: for a path whose conditional mean already
/// lies in the target set the twist is zero and `I_f = 0`.
pub fn solve_path_twist(
    path: &BackgroundPath,
    spec: &ModulatedNetworkSpec,
    target: &RareTarget,
    warm: Option<&DVector<f64>>,
) -> Result<PathTwist> {
    if target.a.len() != spec.nodes() {
        return Err(Error::InvalidArgument("target dimension differs from node count".into()));
    }
    let cgf = path_cgf(path, spec)?;
    let a = DVector::from_column_slice(&target.a);
    let solution = legendre(&cgf, &a, warm)?;
    build_path_twist(path.clone(), cgf, solution, a)
}

/// The original measure on a path, as a zero twist.
pub fn untwisted_path(path: &BackgroundPath, spec: &ModulatedNetworkSpec, target: &RareTarget) -> Result<PathTwist> {
    let cgf = path_cgf(path, spec)?;
    let l = spec.nodes();
    let solution = TwistSolution {
        theta_star: DVector::zeros(l),
        b_star: cgf.mean(),
        rate: 0.0,
        log_mgf: 0.0,
        active: Vec::new(),
        tau: 1.0,
        iterations: 0,
    };
    build_path_twist(path.clone(), cgf, solution, DVector::from_column_slice(&target.a))
}

fn build_path_twist(path: BackgroundPath, cgf: Cgf, solution: TwistSolution, target: DVector<f64>) -> Result<PathTwist> {
    let cells = if path.jumps() == 0 { PLAIN_CELLS } else { SEGMENT_CELLS };
    let segments = cgf
        .segments
        .into_iter()
        .map(|s| TwistedSegment::new(s, solution.theta_star.clone(), cells))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathTwist {
        path,
        solution,
        target,
        segments,
    })
}

/// Draws `Y_n(t)` given the path under its twist.
pub fn sample_modulated_run<R: Rng + ?Sized>(twist: &PathTwist, n: u64, rng: &mut R) -> ModulatedRun {
    let nf = n as f64;
    let l = twist.target.len();
    let mut y = DVector::zeros(l);
    let mut counts = Vec::with_capacity(twist.segments.len());
    let mut event_lr = 0.0;
    let mut event_scale = 0.0;
    for s in &twist.segments {
        let st = s.sample_into(nf, rng, &mut y);
        counts.push(st.count);
        event_lr += st.event_log_lr;
        event_scale += st.event_log_scale;
    }
    let log_lr = twist.log_lr(&y, nf);
    debug_assert!(
        {
            let direct = -twist.theta_star().dot(&y) + nf * twist.solution.log_mgf;
            (event_lr - direct).abs() <= 1e-8 * (1.0 + event_scale + direct.abs())
        },
        "event-level likelihood ratio disagrees with the closed form"
    );
    ModulatedRun { y, log_lr, counts }
}

/// Reducer keeping the sampled path with the smallest `I_f`.
#[derive(Debug, Clone, Default)]
pub struct BestPath {
    pub best: Option<(BackgroundPath, f64, DVector<f64>)>,
}

impl BestPath {
    pub fn offer(&mut self, path: &BackgroundPath, rate: f64, theta: &DVector<f64>) {
        let better = match &self.best {
            None => true,
            Some((p, r, _)) => rate < *r || (rate == *r && path.tie_break_cmp(p) == Ordering::Less),
        };
        if better {
            self.best = Some((path.clone(), rate, theta.clone()));
        }
    }

    pub fn merge(&mut self, other: BestPath) {
        if let Some((p, r, th)) = other.best {
            self.offer(&p, r, &th);
        }
    }
}

/// The path attaining the smallest `I_f` in a history of `(path, I_f)` pairs.
pub fn empirical_optimal_path<'a, I>(history: I) -> Option<(BackgroundPath, f64)>
where
    I: IntoIterator<Item = (&'a BackgroundPath, f64)>,
{
    let mut best = BestPath::default();
    for (p, r) in history {
        best.offer(p, r, &DVector::zeros(0));
    }
    best.best.map(|(p, r, _)| (p, r))
}

/// Warnings for constant background paths whose conditional mean already lies
/// in the target set. The rarity condition concerns all paths; only the `d`
/// constant paths are checked.
pub fn constant_path_warnings(spec: &ModulatedNetworkSpec, target: &RareTarget) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for j in 0..spec.state_count() {
        let m = path_mean(&BackgroundPath::constant(j, spec.horizon), spec)?;
        if target.contains(m.as_slice()) {
            out.push(format!(
                "constant path in state {}: conditional mean {:?} lies in the target set",
                j + 1,
                m.as_slice()
            ));
        }
    }
    Ok(out)
}

/// Simulates the content at the given (increasing) times under the original
/// measure, starting from `x0` in state `initial_state`.
///
/// The content is propagated exactly between events, so this is an independent
/// check on both the segment machinery and the moment equations.
pub fn sample_trajectory<R: Rng + ?Sized>(
    spec: &ModulatedNetworkSpec,
    x0: &[f64],
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let t_end = times.last().copied().unwrap_or(0.0);
    let path = sample_path(&spec.generator, spec.initial_state, t_end, rng)?;
    let rates = spec.rate_matrices();
    let mut x = DVector::from_column_slice(x0);
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    let mut next_obs = 0;
    for (start, end, state) in path.segments() {
        let st = &spec.states[state];
        let len = end - start;
        let count = if st.lambda * len > 0.0 {
            Poisson::new(st.lambda * len).expect("positive mean").sample(rng) as usize
        } else {
            0
        };
        let mut epochs: Vec<f64> = (0..count).map(|_| start + len * rng.random::<f64>()).collect();
        epochs.sort_by(f64::total_cmp);
        let mut events: Vec<(f64, bool)> = epochs.into_iter().map(|e| (e, true)).collect();
        while next_obs < times.len() && times[next_obs] <= end {
            events.push((times[next_obs], false));
            next_obs += 1;
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let rt = rates[state].transpose();
        for (e, is_shot) in events {
            x = matrix_exp(&rt, e - now)? * x;
            now = e;
            if is_shot {
                for (xi, law) in x.iter_mut().zip(st.jobs.laws()) {
                    *xi += law.sample_twisted(0.0, rng);
                }
            } else {
                out.push(x.clone());
            }
        }
        x = matrix_exp(&rt, end - now)? * x;
        now = end;
    }
    Ok(out)
}
