//! Exact first and second moments of Markov-modulated fluid networks.
//!
//! Let `Ξ_j(ϑ, t) = E[e^{⟨ϑ, X(t)⟩} 1{J(t) = j}]`. Differentiating its linear
//! evolution equation once and twice at `ϑ = 0` gives closed linear ODEs for
//!
//! * `π(t)`, the state occupancies (`d` entries),
//! * `z1(t)`, the stacked gradients of `Ξ_j` at zero (`dL` entries),
//! * `z2(t)`, the stacked Hessians of `Ξ_j` at zero (`dL²` entries).
//!
//! Layout: entry `j·L + ℓ` of `z1` is `E[X_ℓ(t) 1{J(t)=j}]` and entry
//! `j·L² + ℓ·L + k` of `z2` is `E[X_ℓ(t) X_k(t) 1{J(t)=j}]`, with states,
//! nodes and indices all zero-based. Every matrix below uses the same map.
//!
//! With `Λ = diag(λ_j)`, `∇B(0) = blockdiag(E B^{(j)})` (`dL × d`) and
//! `Rᵀ = blockdiag(R_jᵀ)` (`dL × dL`) the systems are
//!
//! ```text
//! z1' = (Λ ⊗ I_L) ∇B(0) π + ((Qᵀ ⊗ I_L) − Rᵀ) z1
//! z2' = (Λ ⊗ I_{L²}) ∇²B(0) π + (I + P) (((Λ ⊗ I_L) ∇B(0)) ⊗ I_L) z1
//!       + ((Qᵀ ⊗ I_{L²}) − (I + P)(Rᵀ ⊗ I_L)) z2
//! ```
//!
//! where `P = (K_{d,L} ⊗ I_L) K_{L,dL}` is built from commutation matrices. In
//! this layout `P` swaps the two node indices of a `z2` entry.
//!
//! A nonzero start `X(0) = x0` in state `j0` corresponds to
//! `Ξ(ϑ, 0) = e^{⟨ϑ, x0⟩} e_{j0}`, so `z1(0)` holds `x0` in block `j0` and
//! `z2(0)` holds `x0 x0ᵀ` in block `j0`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{eye, kron};
use crate::model::ModulatedNetworkSpec;

/// Base number of RK4 steps over the whole grid.
pub const BASE_STEPS: usize = 2048;
/// Smallest RK4 step before the integrator gives up.
pub const MIN_STEP: f64 = 1e-8;
/// Richardson tolerance, relative to `1 + ‖y‖∞`.
const RICHARDSON_TOL: f64 = 1e-11;

/// The commutation matrix `K_{m,n} = Σ_{i,j} H_{ij} ⊗ H_{ij}ᵀ`, where `H_{ij}`
/// is the `m × n` matrix with a single one at `(i, j)`.
///
/// It satisfies `K_{m,n} vec(A) = vec(Aᵀ)` for every `m × n` matrix `A`, with
/// `vec` stacking columns.
pub fn commutation_matrix(m: usize, n: usize) -> Result<DMatrix<f64>> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("commutation matrix needs m, n >= 1".into()));
    }
    let mut k = DMatrix::zeros(m * n, m * n);
    for i in 0..m {
        for j in 0..n {
            let mut h = DMatrix::zeros(m, n);
            h[(i, j)] = 1.0;
            k += kron(&h, &h.transpose());
        }
    }
    Ok(k)
}

/// Column-stacking `vec`.
pub fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Stationary distribution of a conservative generator: solves `πᵀ Q = 0`
/// with `Σ π = 1` by replacing one balance equation with the normalization.
pub fn stationary_distribution(q: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = q.nrows();
    if d == 0 || q.ncols() != d {
        return Err(Error::InvalidArgument("generator must be square and nonempty".into()));
    }
    let mut a = q.transpose();
    for c in 0..d {
        a[(d - 1, c)] = 1.0;
    }
    let mut rhs = DVector::zeros(d);
    rhs[d - 1] = 1.0;
    a.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("generator is not irreducible".into()))
}

/// The coefficient matrices of the moment ODEs for one modulated network.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub states: usize,
    pub nodes: usize,
    pub initial_state: usize,
    /// `Qᵀ`.
    pub q_t: DMatrix<f64>,
    /// `(Λ ⊗ I_L) ∇B(0)`, `dL × d`.
    pub g1: DMatrix<f64>,
    /// `(Qᵀ ⊗ I_L) − Rᵀ`, `dL × dL`.
    pub a1: DMatrix<f64>,
    /// `(Λ ⊗ I_{L²}) ∇²B(0)`, `dL² × d`.
    pub g2: DMatrix<f64>,
    /// `(I + P) (((Λ ⊗ I_L) ∇B(0)) ⊗ I_L)`, `dL² × dL`.
    pub g12: DMatrix<f64>,
    /// `(Qᵀ ⊗ I_{L²}) − (I + P)(Rᵀ ⊗ I_L)`, `dL² × dL²`.
    pub a2: DMatrix<f64>,
    /// `∇B(0) = blockdiag(E B^{(j)})`, `dL × d`.
    pub grad_b: DMatrix<f64>,
    /// `Q̃ = diag(q_j)` with `q_j = −q_{jj}`.
    pub q_tilde: DMatrix<f64>,
    /// `λ_{j0} E[B Bᵀ]` in the initial state: the derivative of `Cov X(t)` at
    /// `t = 0` for a deterministic start.
    pub cov_rate0: DMatrix<f64>,
}

impl MomentSystem {
    pub fn new(spec: &ModulatedNetworkSpec) -> Result<Self> {
        spec.check()?;
        let d = spec.state_count();
        let l = spec.nodes();
        let q = spec.generator_matrix();
        let q_t = q.transpose();
        let lambda = DMatrix::from_diagonal(&DVector::from_iterator(d, spec.states.iter().map(|s| s.lambda)));

        let mut grad_b = DMatrix::zeros(d * l, d);
        let mut hess_b = DMatrix::zeros(d * l * l, d);
        let mut r_t = DMatrix::zeros(d * l, d * l);
        for (j, st) in spec.states.iter().enumerate() {
            let eb = st.jobs.means();
            let ebb = st.jobs.second_moments();
            for ell in 0..l {
                grad_b[(j * l + ell, j)] = eb[ell];
                for k in 0..l {
                    hess_b[(j * l * l + ell * l + k, j)] = ebb[(ell, k)];
                }
            }
            let rj = st.rate_matrix();
            r_t.view_mut((j * l, j * l), (l, l)).copy_from(&rj.transpose());
        }

        let i_l = eye(l);
        let i_dl2 = eye(d * l * l);
        let g1 = kron(&lambda, &i_l) * &grad_b;
        let a1 = kron(&q_t, &i_l) - &r_t;
        let g2 = kron(&lambda, &eye(l * l)) * hess_b;
        let p = kron(&commutation_matrix(d, l)?, &i_l) * commutation_matrix(l, d * l)?;
        let i_plus_p = &i_dl2 + p;
        let g12 = &i_plus_p * kron(&g1, &i_l);
        let a2 = kron(&q_t, &eye(l * l)) - &i_plus_p * kron(&r_t, &i_l);

        let j0 = spec.initial_state;
        let cov_rate0 = spec.states[j0].jobs.second_moments() * spec.states[j0].lambda;
        let q_tilde = DMatrix::from_diagonal(&DVector::from_iterator(d, (0..d).map(|j| -q[(j, j)])));

        Ok(MomentSystem {
            states: d,
            nodes: l,
            initial_state: j0,
            q_t,
            g1,
            a1,
            g2,
            g12,
            a2,
            grad_b,
            q_tilde,
            cov_rate0,
        })
    }

    /// Generator of the augmented system `y = (π, z1)`.
    pub fn first_order_matrix(&self) -> DMatrix<f64> {
        let (d, dl) = (self.states, self.states * self.nodes);
        let mut m = DMatrix::zeros(d + dl, d + dl);
        m.view_mut((0, 0), (d, d)).copy_from(&self.q_t);
        m.view_mut((d, 0), (dl, d)).copy_from(&self.g1);
        m.view_mut((d, d), (dl, dl)).copy_from(&self.a1);
        m
    }

    /// Generator of the augmented system `y = (π, z1, z2)`.
    pub fn second_order_matrix(&self) -> DMatrix<f64> {
        let (d, dl, dl2) = (self.states, self.states * self.nodes, self.states * self.nodes * self.nodes);
        let mut m = DMatrix::zeros(d + dl + dl2, d + dl + dl2);
        m.view_mut((0, 0), (d + dl, d + dl)).copy_from(&self.first_order_matrix());
        m.view_mut((d + dl, 0), (dl2, d)).copy_from(&self.g2);
        m.view_mut((d + dl, d), (dl2, dl)).copy_from(&self.g12);
        m.view_mut((d + dl, d + dl), (dl2, dl2)).copy_from(&self.a2);
        m
    }

    /// Generator of `y = (π, z1)` when shots occur only at background jumps
    /// and a jump into state `j` brings a job drawn from state `j`'s law.
    pub fn jump_shot_matrix(&self) -> DMatrix<f64> {
        let (d, dl) = (self.states, self.states * self.nodes);
        let mut m = DMatrix::zeros(d + dl, d + dl);
        m.view_mut((0, 0), (d, d)).copy_from(&self.q_t);
        m.view_mut((d, 0), (dl, d)).copy_from(&(&self.grad_b * (&self.q_t + &self.q_tilde)));
        m.view_mut((d, d), (dl, dl)).copy_from(&self.a1);
        m
    }

    fn initial(&self, x0: &[f64], second: bool) -> Result<DVector<f64>> {
        let (d, l) = (self.states, self.nodes);
        if x0.len() != l {
            return Err(Error::InvalidArgument(format!("x0 has {} entries, expected {l}", x0.len())));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("x0 must be finite".into()));
        }
        let size = d + d * l + if second { d * l * l } else { 0 };
        let mut y = DVector::zeros(size);
        let j0 = self.initial_state;
        y[j0] = 1.0;
        for ell in 0..l {
            y[d + j0 * l + ell] = x0[ell];
        }
        if second {
            let base = d + d * l + j0 * l * l;
            for ell in 0..l {
                for k in 0..l {
                    y[base + ell * l + k] = x0[ell] * x0[k];
                }
            }
        }
        Ok(y)
    }

    fn stationary_pi(&self) -> Result<DVector<f64>> {
        stationary_distribution(&self.q_t.transpose())
    }
}

/// Moment trajectory on a time grid.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub grid: Vec<f64>,
    pub states: usize,
    pub nodes: usize,
    pub pi: Vec<DVector<f64>>,
    pub z1: Vec<DVector<f64>>,
    /// Present for second-order trajectories.
    pub z2: Option<Vec<DVector<f64>>>,
    /// Derivative of the covariance at `t = 0`, used for the correlation limit.
    pub cov_rate0: DMatrix<f64>,
}

impl MomentState {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// `E X(t_k)`, summed over states.
    pub fn mean(&self, k: usize) -> DVector<f64> {
        sum_first(&self.z1[k], self.states, self.nodes)
    }

    /// `E[X(t_k) X(t_k)ᵀ]`, summed over states.
    pub fn second_moment(&self, k: usize) -> Option<DMatrix<f64>> {
        self.z2.as_ref().map(|z2| sum_second(&z2[k], self.states, self.nodes))
    }

    /// `Cov X(t_k)`.
    pub fn covariance(&self, k: usize) -> Option<DMatrix<f64>> {
        let m = self.mean(k);
        self.second_moment(k).map(|s| s - &m * m.transpose())
    }

    /// `Var X_ℓ(t_k)` per node.
    pub fn variance(&self, k: usize) -> Option<DVector<f64>> {
        self.covariance(k).map(|c| c.diagonal())
    }

    /// Correlation matrix of `X(t_k)`.
    ///
    /// At `t = 0` the start is deterministic and the correlation is the limit
    /// `t ↓ 0`, taken from the covariance derivative. A node with zero variance
    /// is reported as uncorrelated with every other node.
    pub fn correlation(&self, k: usize) -> Option<DMatrix<f64>> {
        let cov = if self.grid[k] == 0.0 {
            self.cov_rate0.clone()
        } else {
            self.covariance(k)?
        };
        Some(correlation_from_cov(&cov))
    }

    /// Largest `|z2[j,ℓ,k] − z2[j,k,ℓ]|` along the trajectory.
    pub fn symmetry_drift(&self) -> f64 {
        let (d, l) = (self.states, self.nodes);
        let mut worst: f64 = 0.0;
        for z2 in self.z2.iter().flatten() {
            for j in 0..d {
                for a in 0..l {
                    for b in 0..l {
                        worst = worst.max((z2[j * l * l + a * l + b] - z2[j * l * l + b * l + a]).abs());
                    }
                }
            }
        }
        worst
    }

    /// CSV with columns `t`, `mean_ℓ`, then `var_ℓ` and `corr_ℓ_k` (`ℓ < k`)
    /// when second moments are present. Nodes are numbered from 1.
    pub fn to_csv(&self) -> String {
        let l = self.nodes;
        let mut out = String::from("t");
        for a in 1..=l {
            let _ = write!(out, ",mean_{a}");
        }
        if self.z2.is_some() {
            for a in 1..=l {
                let _ = write!(out, ",var_{a}");
            }
            for a in 1..=l {
                for b in a + 1..=l {
                    let _ = write!(out, ",corr_{a}_{b}");
                }
            }
        }
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{}", self.grid[k]);
            for v in self.mean(k).iter() {
                let _ = write!(out, ",{v:.12e}");
            }
            if let (Some(var), Some(corr)) = (self.variance(k), self.correlation(k)) {
                for v in var.iter() {
                    let _ = write!(out, ",{v:.12e}");
                }
                for a in 0..l {
                    for b in a + 1..l {
                        let _ = write!(out, ",{:.12e}", corr[(a, b)]);
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn sum_first(z1: &DVector<f64>, d: usize, l: usize) -> DVector<f64> {
    DVector::from_fn(l, |ell, _| (0..d).map(|j| z1[j * l + ell]).sum())
}

fn sum_second(z2: &DVector<f64>, d: usize, l: usize) -> DMatrix<f64> {
    DMatrix::from_fn(l, l, |a, b| (0..d).map(|j| z2[j * l * l + a * l + b]).sum())
}

fn correlation_from_cov(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let l = cov.nrows();
    let scale = cov.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tiny = 1e-14 * scale.max(f64::MIN_POSITIVE);
    DMatrix::from_fn(l, l, |a, b| {
        if a == b {
            1.0
        } else {
            let (va, vb) = (cov[(a, a)], cov[(b, b)]);
            if va <= tiny || vb <= tiny {
                0.0
            } else {
                (cov[(a, b)] / (va * vb).sqrt()).clamp(-1.0, 1.0)
            }
        }
    })
}

fn rk4(m: &DMatrix<f64>, y0: &DVector<f64>, span: f64, steps: usize) -> DVector<f64> {
    let h = span / steps as f64;
    let mut y = y0.clone();
    for _ in 0..steps {
        let k1 = m * &y;
        let k2 = m * (&y + &k1 * (h / 2.0));
        let k3 = m * (&y + &k2 * (h / 2.0));
        let k4 = m * (&y + &k3 * h);
        y += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    }
    y
}

/// Integrates `y' = M y` with classic RK4 and returns `y` at each grid point.
///
/// The base step is `t_max / 2048`. Each grid interval is integrated with `n`
/// and `2n` steps; the interval is redone with halved steps until the two
/// agree to the Richardson tolerance, and the finer result is kept.
pub fn integrate_linear(m: &DMatrix<f64>, y0: &DVector<f64>, grid: &[f64]) -> Result<Vec<DVector<f64>>> {
    validate_grid(grid)?;
    let t_max = grid.last().copied().unwrap_or(0.0);
    let base = t_max / BASE_STEPS as f64;
    let mut out = Vec::with_capacity(grid.len());
    let mut y = y0.clone();
    let mut now = 0.0;
    for &t in grid {
        let span = t - now;
        if span > 0.0 {
            let mut n = ((span / base).ceil() as usize).max(1);
            loop {
                if span / ((2 * n) as f64) < MIN_STEP {
                    return Err(Error::StepTooSmall { t: now, min_step: MIN_STEP });
                }
                let coarse = rk4(m, &y, span, n);
                let fine = rk4(m, &y, span, 2 * n);
                if fine.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Overflow);
                }
                let err = (&fine - &coarse).amax() / 15.0;
                if err <= RICHARDSON_TOL * (1.0 + fine.amax()) {
                    y = fine;
                    break;
                }
                n *= 2;
            }
            now = t;
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidArgument("time grid must be finite and nonnegative".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("time grid must be nondecreasing".into()));
    }
    Ok(())
}

fn split(sys: &MomentSystem, ys: Vec<DVector<f64>>, grid: &[f64], second: bool) -> MomentState {
    let (d, l) = (sys.states, sys.nodes);
    let dl = d * l;
    let mut pi = Vec::with_capacity(ys.len());
    let mut z1 = Vec::with_capacity(ys.len());
    let mut z2 = Vec::with_capacity(ys.len());
    for y in ys {
        pi.push(y.rows(0, d).into_owned());
        z1.push(y.rows(d, dl).into_owned());
        if second {
            z2.push(y.rows(d + dl, dl * l).into_owned());
        }
    }
    MomentState {
        grid: grid.to_vec(),
        states: d,
        nodes: l,
        pi,
        z1,
        z2: second.then_some(z2),
        cov_rate0: sys.cov_rate0.clone(),
    }
}

/// `π(t)` and `z1(t)` on the grid, starting from `x0` in the initial state.
pub fn transient_first_moment(spec: &ModulatedNetworkSpec, x0: &[f64], grid: &[f64]) -> Result<MomentState> {
    let sys = MomentSystem::new(spec)?;
    let y0 = sys.initial(x0, false)?;
    let ys = integrate_linear(&sys.first_order_matrix(), &y0, grid)?;
    Ok(split(&sys, ys, grid, false))
}

/// `π(t)`, `z1(t)` and `z2(t)` on the grid, starting from `x0` in the initial
/// state.
pub fn transient_second_moment(spec: &ModulatedNetworkSpec, x0: &[f64], grid: &[f64]) -> Result<MomentState> {
    let sys = MomentSystem::new(spec)?;
    let y0 = sys.initial(x0, true)?;
    let ys = integrate_linear(&sys.second_order_matrix(), &y0, grid)?;
    Ok(split(&sys, ys, grid, true))
}

/// Correlation matrices of `X(t)` on the grid.
pub fn transient_correlation(spec: &ModulatedNetworkSpec, x0: &[f64], grid: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let state = transient_second_moment(spec, x0, grid)?;
    Ok((0..state.len()).map(|k| state.correlation(k).expect("second-order trajectory")).collect())
}

/// `z1(∞) = (Rᵀ − Qᵀ ⊗ I_L)⁻¹ (Λ ⊗ I_L) ∇B(0) π`.
pub fn stationary_first_moment(spec: &ModulatedNetworkSpec) -> Result<DVector<f64>> {
    let sys = MomentSystem::new(spec)?;
    let pi = sys.stationary_pi()?;
    solve_first(&sys, &sys.g1 * pi)
}

fn solve_first(sys: &MomentSystem, rhs: DVector<f64>) -> Result<DVector<f64>> {
    (-&sys.a1)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Rᵀ − Qᵀ ⊗ I_L is not invertible".into()))
}

/// `z2(∞)` from `0 = G2 π + G12 z1(∞) + A2 z2(∞)`.
///
/// `A2` annihilates the antisymmetric part of `z2`, so the system is reduced
/// to the entries with `ℓ ≤ k` (one unknown and one equation per symmetric
/// pair) before solving.
pub fn stationary_second_moment(spec: &ModulatedNetworkSpec) -> Result<DVector<f64>> {
    let sys = MomentSystem::new(spec)?;
    let pi = sys.stationary_pi()?;
    let z1 = solve_first(&sys, &sys.g1 * &pi)?;
    let rhs = -(&sys.g2 * &pi + &sys.g12 * &z1);
    let (d, l) = (sys.states, sys.nodes);
    let pairs: Vec<(usize, usize)> = (0..l).flat_map(|a| (a..l).map(move |b| (a, b))).collect();
    let reduced = d * pairs.len();
    let full = d * l * l;
    let mut expand = DMatrix::zeros(full, reduced);
    let mut select = DMatrix::zeros(reduced, full);
    for j in 0..d {
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let col = j * pairs.len() + p;
            expand[(j * l * l + a * l + b, col)] = 1.0;
            expand[(j * l * l + b * l + a, col)] = 1.0;
            select[(col, j * l * l + a * l + b)] = 1.0;
        }
    }
    let s = (&select * &sys.a2 * &expand)
        .lu()
        .solve(&(&select * rhs))
        .ok_or_else(|| Error::Singular("reduced stationary second-moment system".into()))?;
    Ok(expand * s)
}

/// Stationary mean and covariance of `X`, summed over states.
pub fn stationary_mean_covariance(spec: &ModulatedNetworkSpec) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (d, l) = (spec.state_count(), spec.nodes());
    let m = sum_first(&stationary_first_moment(spec)?, d, l);
    let s = sum_second(&stationary_second_moment(spec)?, d, l);
    let cov = s - &m * m.transpose();
    Ok((m, cov))
}

/// `π(t)` and `z1(t)` for the variant in which shots occur only at background
/// jumps: `z1' = ∇B(0)(Qᵀ + Q̃) π + ((Qᵀ ⊗ I_L) − Rᵀ) z1`.
pub fn jump_shot_first_moment(spec: &ModulatedNetworkSpec, x0: &[f64], grid: &[f64]) -> Result<MomentState> {
    let sys = MomentSystem::new(spec)?;
    let y0 = sys.initial(x0, false)?;
    let ys = integrate_linear(&sys.jump_shot_matrix(), &y0, grid)?;
    Ok(split(&sys, ys, grid, false))
}

/// Stationary `z1` of the jump-shot variant,
/// `(Rᵀ − Qᵀ ⊗ I_L)⁻¹ ∇B(0) Q̃ π` (the `Qᵀ π` part vanishes).
pub fn jump_shot_stationary_first_moment(spec: &ModulatedNetworkSpec) -> Result<DVector<f64>> {
    let sys = MomentSystem::new(spec)?;
    let pi = sys.stationary_pi()?;
    let rhs = &sys.grad_b * ((&sys.q_t + &sys.q_tilde) * pi);
    solve_first(&sys, rhs)
}

/// Sum over states of a `z1` vector: the mean per node.
pub fn node_means(z1: &DVector<f64>, states: usize, nodes: usize) -> DVector<f64> {
    sum_first(z1, states, nodes)
}

/// Sum over states of a `z2` vector: `E[X Xᵀ]`.
pub fn node_second_moments(z2: &DVector<f64>, states: usize, nodes: usize) -> DMatrix<f64> {
    sum_second(z2, states, nodes)
}
