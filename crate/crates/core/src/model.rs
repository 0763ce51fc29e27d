//! Network specifications and the routing-rate matrix.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for row sums of routing fractions and generator rows.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Marginal law of the amount a single arrival adds to one node.
///
/// Components of a job vector are independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JobLaw {
    Exponential { rate: f64 },
    /// Point mass at zero: the node receives no external input.
    Zero,
    /// Point mass at `size`.
    Deterministic { size: f64 },
}

impl JobLaw {
    pub fn exponential(rate: f64) -> Self {
        JobLaw::Exponential { rate }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, JobLaw::Zero) || matches!(self, JobLaw::Deterministic { size } if *size == 0.0)
    }

    /// Supremum of arguments at which the MGF is finite.
    pub fn mgf_bound(&self) -> f64 {
        match *self {
            JobLaw::Exponential { rate } => rate,
            _ => f64::INFINITY,
        }
    }

    /// `(log β(x), d/dx log β, d²/dx² log β)`, or `None` outside the domain.
    pub fn log_mgf_derivs(&self, x: f64) -> Option<(f64, f64, f64)> {
        match *self {
            JobLaw::Exponential { rate } => {
                if x >= rate {
                    return None;
                }
                let gap = rate - x;
                Some((-(-x / rate).ln_1p(), 1.0 / gap, 1.0 / (gap * gap)))
            }
            JobLaw::Zero => Some((0.0, 0.0, 0.0)),
            JobLaw::Deterministic { size } => Some((size * x, size, 0.0)),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            JobLaw::Exponential { rate } => 1.0 / rate,
            JobLaw::Zero => 0.0,
            JobLaw::Deterministic { size } => size,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            JobLaw::Exponential { rate } => 2.0 / (rate * rate),
            JobLaw::Zero => 0.0,
            JobLaw::Deterministic { size } => size * size,
        }
    }

    /// Draws from the law exponentially twisted by `x` (`x = 0` is the original law).
    pub fn sample_twisted<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        match *self {
            JobLaw::Exponential { rate } => {
                let twisted = rate - x;
                debug_assert!(twisted > 0.0, "twisted exponential rate must stay positive");
                Exp::new(twisted).expect("positive rate").sample(rng)
            }
            JobLaw::Zero => 0.0,
            JobLaw::Deterministic { size } => size,
        }
    }

    /// Log of the density ratio (original / twisted by `x`) at `b`.
    pub fn log_density_ratio(&self, x: f64, b: f64) -> f64 {
        match *self {
            JobLaw::Exponential { rate } => (rate / (rate - x)).ln() - x * b,
            // The twist of a point mass is the same point mass.
            JobLaw::Zero | JobLaw::Deterministic { .. } => 0.0,
        }
    }

    fn violations(&self, node: usize, out: &mut Vec<String>) {
        match *self {
            JobLaw::Exponential { rate } if !(rate > 0.0 && rate.is_finite()) => {
                out.push(format!("job law of node {}: exponential rate must be positive", node + 1))
            }
            JobLaw::Deterministic { size } if !(size >= 0.0 && size.is_finite()) => {
                out.push(format!("job law of node {}: deterministic size must be non-negative", node + 1))
            }
            _ => {}
        }
    }
}

/// Job vector with independent per-node components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Jobs(pub Vec<JobLaw>);

/// Value, gradient and Hessian of `log β` at one point.
#[derive(Debug, Clone)]
pub struct LogMgfDerivs {
    pub value: f64,
    pub grad: DVector<f64>,
    /// Diagonal of the Hessian; off-diagonals vanish for independent components.
    pub hess_diag: DVector<f64>,
}

impl Jobs {
    pub fn new(laws: Vec<JobLaw>) -> Self {
        Jobs(laws)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn laws(&self) -> &[JobLaw] {
        &self.0
    }

    pub fn all_zero(&self) -> bool {
        self.0.iter().all(JobLaw::is_zero)
    }

    /// Index of the first node whose MGF is infinite at `x`.
    pub fn domain_violation(&self, x: &[f64]) -> Option<usize> {
        self.0.iter().zip(x).position(|(law, &xi)| xi >= law.mgf_bound())
    }

    /// `log β(x)`, `None` outside the domain.
    pub fn log_mgf(&self, x: &[f64]) -> Option<f64> {
        let mut acc = 0.0;
        for (law, &xi) in self.0.iter().zip(x) {
            acc += law.log_mgf_derivs(xi)?.0;
        }
        Some(acc)
    }

    pub fn log_mgf_derivs(&self, x: &[f64]) -> Option<LogMgfDerivs> {
        let l = self.len();
        let mut out = LogMgfDerivs {
            value: 0.0,
            grad: DVector::zeros(l),
            hess_diag: DVector::zeros(l),
        };
        for (i, (law, &xi)) in self.0.iter().zip(x).enumerate() {
            let (v, g, h) = law.log_mgf_derivs(xi)?;
            out.value += v;
            out.grad[i] = g;
            out.hess_diag[i] = h;
        }
        Some(out)
    }

    /// `E B` per node.
    pub fn means(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.0.iter().map(JobLaw::mean))
    }

    /// `E[B Bᵀ]`.
    pub fn second_moments(&self) -> DMatrix<f64> {
        let m = self.means();
        let l = self.len();
        DMatrix::from_fn(l, l, |i, k| {
            if i == k {
                self.0[i].second_moment()
            } else {
                m[i] * m[k]
            }
        })
    }
}

/// Builds `R` from per-node drain rates `r_l` and routing fractions `p_{l l'}`:
/// `R_{ll} = r_l`, `R_{ll'} = -r_l p_{ll'}` for `l != l'`.
///
/// `p_{ll}` is the fraction leaving the network, so the row sum of `R` equals
/// `r_l p_{ll}`.
pub fn build_rate_matrix(drain: &[f64], routing: &[Vec<f64>]) -> DMatrix<f64> {
    let l = drain.len();
    DMatrix::from_fn(l, l, |i, k| {
        if i == k {
            // r_ll + sum_{l' != l} r_ll' = r_l * sum_l' p_ll'
            drain[i] * routing[i].iter().sum::<f64>()
        } else {
            -drain[i] * routing[i][k]
        }
    })
}

/// One modulation state: arrival rate, job law and routing while the
/// background process sits in this state. Also the dynamics of a plain network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub lambda: f64,
    pub jobs: Jobs,
    pub drain: Vec<f64>,
    pub routing: Vec<Vec<f64>>,
}

impl StateSpec {
    pub fn nodes(&self) -> usize {
        self.drain.len()
    }

    pub fn rate_matrix(&self) -> DMatrix<f64> {
        build_rate_matrix(&self.drain, &self.routing)
    }

    fn violations(&self, prefix: &str, allow_zero_lambda: bool, out: &mut Vec<String>) {
        let l = self.drain.len();
        if l == 0 {
            out.push(format!("{prefix}node count must be at least 1"));
            return;
        }
        let lambda_ok = if allow_zero_lambda {
            self.lambda >= 0.0
        } else {
            self.lambda > 0.0
        };
        if !(lambda_ok && self.lambda.is_finite()) {
            out.push(format!("{prefix}arrival rate must be positive"));
        }
        if self.jobs.len() != l {
            out.push(format!("{prefix}expected {l} job laws, got {}", self.jobs.len()));
        }
        let mut job_errs = Vec::new();
        for (i, law) in self.jobs.laws().iter().enumerate() {
            law.violations(i, &mut job_errs);
        }
        out.extend(job_errs.into_iter().map(|e| format!("{prefix}{e}")));
        if !self.jobs.is_empty() && self.jobs.all_zero() {
            out.push(format!("{prefix}at least one node needs a non-zero job law"));
        }
        for (i, &r) in self.drain.iter().enumerate() {
            if !(r > 0.0 && r.is_finite()) {
                out.push(format!("{prefix}drain rate of node {} must be positive", i + 1));
            }
        }
        if self.routing.len() != l || self.routing.iter().any(|row| row.len() != l) {
            out.push(format!("{prefix}routing matrix must be {l}x{l}"));
            return;
        }
        for (i, row) in self.routing.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                out.push(format!("{prefix}routing row {} has a negative fraction", i + 1));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                out.push(format!("{prefix}routing row {} sums to {sum}, not 1", i + 1));
            }
        }
        if out.is_empty() {
            let r = self.rate_matrix();
            for i in 0..l {
                let off: f64 = (0..l).filter(|&k| k != i).map(|k| r[(i, k)].abs()).sum();
                if r[(i, i)] + ROW_SUM_TOL < off {
                    out.push(format!("{prefix}rate matrix row {} is not diagonally dominant", i + 1));
                }
            }
        }
    }
}

/// Plain (non-modulated) linear stochastic fluid network observed at `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub lambda: f64,
    pub jobs: Jobs,
    pub drain: Vec<f64>,
    pub routing: Vec<Vec<f64>>,
    pub horizon: f64,
}

impl NetworkSpec {
    /// Single node with exponential jobs draining to the outside.
    pub fn single_node(lambda: f64, mu: f64, r: f64, horizon: f64) -> Self {
        NetworkSpec {
            lambda,
            jobs: Jobs(vec![JobLaw::exponential(mu)]),
            drain: vec![r],
            routing: vec![vec![1.0]],
            horizon,
        }
    }

    /// Two-node tandem: external input only upstream, everything drained from
    /// node 1 flows into node 2, node 2 drains to the outside.
    pub fn tandem(lambda: f64, mu: f64, r1: f64, r2: f64, horizon: f64) -> Self {
        NetworkSpec {
            lambda,
            jobs: Jobs(vec![JobLaw::exponential(mu), JobLaw::Zero]),
            drain: vec![r1, r2],
            routing: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            horizon,
        }
    }

    pub fn nodes(&self) -> usize {
        self.drain.len()
    }

    pub fn rate_matrix(&self) -> DMatrix<f64> {
        build_rate_matrix(&self.drain, &self.routing)
    }

    pub fn dynamics(&self) -> StateSpec {
        StateSpec {
            lambda: self.lambda,
            jobs: self.jobs.clone(),
            drain: self.drain.clone(),
            routing: self.routing.clone(),
        }
    }

    /// All invariant violations, in a fixed order. Empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.dynamics().violations("", false, &mut out);
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            out.push("horizon must be positive".to_string());
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        into_result(self.validate())
    }
}

/// Markov-modulated network: the background chain with generator `generator`
/// starts in `initial_state` (0-based) and selects the active [`StateSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulatedNetworkSpec {
    pub generator: Vec<Vec<f64>>,
    pub initial_state: usize,
    pub horizon: f64,
    pub states: Vec<StateSpec>,
}

impl ModulatedNetworkSpec {
    /// Wraps a plain network as a one-state modulated network.
    pub fn from_network(spec: &NetworkSpec) -> Self {
        ModulatedNetworkSpec {
            generator: vec![vec![0.0]],
            initial_state: 0,
            horizon: spec.horizon,
            states: vec![spec.dynamics()],
        }
    }

    /// The plain network equivalent to a one-state modulated network.
    pub fn as_network(&self) -> Option<NetworkSpec> {
        match self.states.as_slice() {
            [s] => Some(NetworkSpec {
                lambda: s.lambda,
                jobs: s.jobs.clone(),
                drain: s.drain.clone(),
                routing: s.routing.clone(),
                horizon: self.horizon,
            }),
            _ => None,
        }
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn nodes(&self) -> usize {
        self.states.first().map_or(0, StateSpec::nodes)
    }

    pub fn generator_matrix(&self) -> DMatrix<f64> {
        let d = self.generator.len();
        DMatrix::from_fn(d, d, |i, j| self.generator[i][j])
    }

    pub fn rate_matrices(&self) -> Vec<DMatrix<f64>> {
        self.states.iter().map(StateSpec::rate_matrix).collect()
    }

    /// Total exit rate `q_j = -q_jj` of each state.
    pub fn exit_rates(&self) -> Vec<f64> {
        (0..self.generator.len()).map(|j| -self.generator[j][j]).collect()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = self.states.len();
        if d == 0 {
            out.push("at least one background state is required".to_string());
            return out;
        }
        if self.generator.len() != d || self.generator.iter().any(|row| row.len() != d) {
            out.push(format!("generator must be {d}x{d}"));
        } else {
            for (i, row) in self.generator.iter().enumerate() {
                if row.iter().enumerate().any(|(j, &q)| j != i && !(q >= 0.0 && q.is_finite())) {
                    out.push(format!("generator row {} has a negative off-diagonal rate", i + 1));
                }
                let sum: f64 = row.iter().sum();
                if sum.abs() > ROW_SUM_TOL || !sum.is_finite() {
                    out.push(format!("generator row {} not conservative", i + 1));
                }
            }
            if !is_irreducible(&self.generator) {
                out.push("generator is not irreducible".to_string());
            }
        }
        if self.initial_state >= d {
            out.push(format!("initial state {} out of range", self.initial_state));
        }
        let l = self.states[0].nodes();
        for (j, s) in self.states.iter().enumerate() {
            if s.nodes() != l {
                out.push(format!("state {}: node count {} differs from {l}", j + 1, s.nodes()));
            }
            s.violations(&format!("state {}: ", j + 1), true, &mut out);
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            out.push("horizon must be positive".to_string());
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        into_result(self.validate())
    }
}

/// Irreducibility via reachability on the positivity pattern of the off-diagonals.
pub fn is_irreducible(generator: &[Vec<f64>]) -> bool {
    let d = generator.len();
    let reach_all = |forward: bool| {
        let mut seen = vec![false; d];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..d {
                let q = if forward { generator[i][j] } else { generator[j][i] };
                if j != i && q > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    d > 0 && reach_all(true) && reach_all(false)
}

fn into_result(violations: Vec<String>) -> Result<()> {
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(violations.join("; ")))
    }
}

/// Rare set `A = [a_1, ∞) × … × [a_L, ∞)` for the scaled content `Y_n(t) / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareTarget {
    pub a: Vec<f64>,
}

impl RareTarget {
    pub fn new(a: Vec<f64>) -> Self {
        RareTarget { a }
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.iter().zip(&self.a).all(|(x, a)| x >= a)
    }

    /// `true` when the mean vector lies outside `A`.
    pub fn is_rare_for(&self, mean: &[f64]) -> bool {
        !self.contains(mean)
    }
}

impl fmt::Display for RareTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a = {:?}", self.a)
    }
}
