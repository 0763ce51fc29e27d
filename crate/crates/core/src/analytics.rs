//! Log-MGFs, means, the exponential twist and run-count asymptotics for plain
//! networks.
//!
//! For a network observed at horizon `t`,
//! `log M(θ) = λ ∫₀ᵗ (β(e^{-Ru}θ) − 1) du`, and the twist `θ*` maximizes
//! `⟨θ, a⟩ − log M(θ)` over `θ ≥ 0`. The maximum is the rate `I(a)` of the
//! exponential decay of `P(Y_n(t) ≥ n a)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{eye, Propagator};
use crate::model::{NetworkSpec, RareTarget};
use crate::segment::{Cgf, Coefficient, Segment};

pub use crate::linalg::matrix_exp;

/// Threshold below which a twist component counts as inactive.
pub const ACTIVE_THRESHOLD: f64 = 1e-8;
/// Grid cells used by the propagator of a plain multi-node network.
pub const PLAIN_CELLS: usize = 1024;

const MAX_NEWTON: usize = 200;

/// Optimizer of the Legendre transform at a rare target.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistSolution {
    pub theta_star: DVector<f64>,
    /// Most likely point of the target set, `∇log M(θ*)`.
    pub b_star: DVector<f64>,
    /// `I(a) = ⟨θ*, a⟩ − log M(θ*)`.
    pub rate: f64,
    /// `log M(θ*)`.
    pub log_mgf: f64,
    /// Indices with `θ*_ℓ ≥ 1e-8`.
    pub active: Vec<usize>,
    /// Determinant of the Hessian of `log M` at `θ*` restricted to the active set.
    pub tau: f64,
    pub iterations: usize,
}

impl TwistSolution {
    /// Number of active coordinates `D`.
    pub fn d(&self) -> usize {
        self.active.len()
    }

    /// `∏_{i∈Θ} θ*_i`.
    fn active_product(&self) -> f64 {
        self.active.iter().map(|&i| self.theta_star[i]).product()
    }
}

pub(crate) fn network_segment(spec: &NetworkSpec, cells: usize) -> Result<Segment> {
    spec.check()?;
    let l = spec.nodes();
    let r = spec.rate_matrix();
    let coef = if l == 1 {
        Coefficient::Scalar { r: r[(0, 0)], c: 1.0 }
    } else {
        Coefficient::Matrix(Propagator::new(&r, &eye(l), spec.horizon, cells)?)
    };
    Ok(Segment {
        lambda: spec.lambda,
        jobs: spec.jobs.clone(),
        length: spec.horizon,
        coef,
        right_end: None,
    })
}

pub(crate) fn network_cgf(spec: &NetworkSpec) -> Result<Cgf> {
    Ok(Cgf {
        segments: vec![network_segment(spec, PLAIN_CELLS)?],
        nodes: spec.nodes(),
    })
}

fn vector(spec_len: usize, theta: &[f64]) -> Result<DVector<f64>> {
    if theta.len() != spec_len {
        return Err(Error::InvalidArgument(format!(
            "expected a vector of length {spec_len}, got {}",
            theta.len()
        )));
    }
    Ok(DVector::from_column_slice(theta))
}

/// `log M(θ)`; fails with [`Error::DomainExceeded`] if `β(e^{-Ru}θ)` is infinite
/// for some `u ∈ [0, t]`.
pub fn log_mgf(spec: &NetworkSpec, theta: &[f64]) -> Result<f64> {
    network_cgf(spec)?.value(&vector(spec.nodes(), theta)?)
}

/// `∇log M(θ)`.
pub fn gradient_log_mgf(spec: &NetworkSpec, theta: &[f64]) -> Result<DVector<f64>> {
    Ok(network_cgf(spec)?.full(&vector(spec.nodes(), theta)?)?.grad)
}

/// `∇²log M(θ)`.
pub fn hessian_log_mgf(spec: &NetworkSpec, theta: &[f64]) -> Result<DMatrix<f64>> {
    Ok(network_cgf(spec)?.full(&vector(spec.nodes(), theta)?)?.hess)
}

/// `∫₀ˢ β(e^{-ru}θ) du = (1/r) log((μe^{rs} − θ)/(μ − θ))` for exponential jobs with rate `μ`.
pub fn log_mgf_exp_closed(mu: f64, r: f64, theta: f64, s: f64) -> Result<f64> {
    if theta >= mu {
        return Err(Error::DomainExceeded { u: 0.0, node: 0 });
    }
    if !(mu > 0.0 && r > 0.0 && s >= 0.0) {
        return Err(Error::InvalidArgument("need μ > 0, r > 0, s ≥ 0".into()));
    }
    Ok(s + ((-theta * (-r * s).exp() / mu).ln_1p() - (-theta / mu).ln_1p()) / r)
}

/// Mean content `m(t) = λ ∫₀ᵗ e^{-Rᵀu} 𝔼B du`, via the exponential of an
/// augmented matrix.
pub fn mean_vector(spec: &NetworkSpec) -> Result<DVector<f64>> {
    spec.check()?;
    let l = spec.nodes();
    let r = spec.rate_matrix();
    let eb = spec.jobs.means();
    let mut m = DMatrix::zeros(l + 1, l + 1);
    m.view_mut((0, 0), (l, l)).copy_from(&r.transpose());
    for i in 0..l {
        m[(i, l)] = -eb[i];
    }
    let e = matrix_exp(&m, spec.horizon)?;
    Ok(DVector::from_iterator(l, (0..l).map(|i| spec.lambda * e[(i, l)])))
}

fn check_rarity(mean: &DVector<f64>, a: &DVector<f64>) -> Result<()> {
    let inside = mean.iter().zip(a.iter()).all(|(m, a)| m >= a);
    let on_corner = mean
        .iter()
        .zip(a.iter())
        .all(|(m, a)| (m - a).abs() <= 1e-12 * (1.0 + a.abs()));
    if inside && !on_corner {
        Err(Error::RarityViolated {
            mean: mean.iter().copied().collect(),
            target: a.iter().copied().collect(),
        })
    } else {
        Ok(())
    }
}

/// Twist for a rare target.
///
/// Fails with [`Error::RarityViolated`] when the mean already lies in the
/// target set (other than exactly at its corner, where `θ* = 0`).
pub fn solve_twist(spec: &NetworkSpec, target: &RareTarget) -> Result<TwistSolution> {
    solve_twist_from(spec, target, None)
}

/// [`solve_twist`] with an optional warm start.
pub fn solve_twist_from(spec: &NetworkSpec, target: &RareTarget, warm: Option<&DVector<f64>>) -> Result<TwistSolution> {
    let cgf = network_cgf(spec)?;
    let a = vector(spec.nodes(), &target.a)?;
    check_rarity(&cgf.mean(), &a)?;
    legendre(&cgf, &a, warm)
}

/// Twist without the rarity check; a non-rare target yields `θ* = 0`.
pub fn solve_twist_relaxed(spec: &NetworkSpec, target: &RareTarget) -> Result<TwistSolution> {
    let cgf = network_cgf(spec)?;
    legendre(&cgf, &vector(spec.nodes(), &target.a)?, None)
}

/// Projected Newton ascent for `max_{θ ≥ 0} ⟨θ, a⟩ − K(θ)`.
///
/// The free set holds coordinates that are positive or whose gradient points
/// into the feasible region; Newton steps use the Hessian restricted to that
/// set, and Armijo backtracking on the projected path rejects points where
/// `K` is infinite.
pub(crate) fn legendre(cgf: &Cgf, a: &DVector<f64>, warm: Option<&DVector<f64>>) -> Result<TwistSolution> {
    let l = a.len();
    let scale = 1.0 + a.amax();
    let mut theta = DVector::zeros(l);
    let mut cur = cgf.full(&theta)?;
    if let Some(w) = warm {
        let start = w.map(|v| v.max(0.0));
        if let Ok(v) = cgf.full(&start) {
            if a.dot(&start) - v.value >= 0.0 {
                theta = start;
                cur = v;
            }
        }
    }
    for it in 0..MAX_NEWTON {
        let grad = a - &cur.grad;
        let free: Vec<usize> = (0..l).filter(|&i| theta[i] > 0.0 || grad[i] > 0.0).collect();
        let pg = free.iter().map(|&i| grad[i].abs()).fold(0.0, f64::max);
        if pg <= 1e-12 * scale {
            return Ok(finish(cgf, theta, cur, a, it));
        }
        let dir = newton_direction(&cur.hess, &grad, &free, l)?;
        let g0 = a.dot(&theta) - cur.value;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let cand = (&theta + &dir * step).map(|v| v.max(0.0));
            match cgf.value(&cand) {
                Ok(k) => {
                    let gc = a.dot(&cand) - k;
                    let gain = grad.dot(&(&cand - &theta));
                    if gc >= g0 + 1e-4 * gain - 1e-15 * g0.abs().max(1.0) {
                        accepted = Some(cand);
                        break;
                    }
                }
                Err(Error::DomainExceeded { .. }) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        let Some(cand) = accepted else {
            // No ascent possible: we sit at the optimum up to integration noise.
            if pg <= 1e-8 * scale {
                return Ok(finish(cgf, theta, cur, a, it));
            }
            return Err(Error::NonConvergence {
                iterations: it,
                last: theta.iter().copied().collect(),
            });
        };
        let moved = (&cand - &theta).amax();
        theta = cand;
        cur = cgf.full(&theta)?;
        if moved <= 1e-15 * (1.0 + theta.amax()) {
            return Ok(finish(cgf, theta, cur, a, it + 1));
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_NEWTON,
        last: theta.iter().copied().collect(),
    })
}

fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>, free: &[usize], l: usize) -> Result<DVector<f64>> {
    let f = free.len();
    let hf = DMatrix::from_fn(f, f, |i, k| hess[(free[i], free[k])]);
    let gf = DVector::from_fn(f, |i, _| grad[free[i]]);
    let mut ridge = 0.0;
    let trace = hf.trace().abs().max(1e-300);
    let sol = loop {
        let m = &hf + DMatrix::identity(f, f) * ridge;
        if let Some(ch) = m.cholesky() {
            break ch.solve(&gf);
        }
        ridge = if ridge == 0.0 { 1e-12 * trace } else { ridge * 10.0 };
        if ridge > 1e6 * trace {
            return Err(Error::Singular("Hessian of the log-MGF on the free set".into()));
        }
    };
    let mut dir = DVector::zeros(l);
    for (i, &k) in free.iter().enumerate() {
        dir[k] = sol[i];
    }
    Ok(dir)
}

fn finish(_cgf: &Cgf, theta: DVector<f64>, cur: crate::segment::CgfValue, a: &DVector<f64>, iterations: usize) -> TwistSolution {
    let active: Vec<usize> = (0..theta.len()).filter(|&i| theta[i] >= ACTIVE_THRESHOLD).collect();
    let tau = if active.is_empty() {
        1.0
    } else {
        DMatrix::from_fn(active.len(), active.len(), |i, k| cur.hess[(active[i], active[k])]).determinant()
    };
    TwistSolution {
        rate: (a.dot(&theta) - cur.value).max(0.0),
        log_mgf: cur.value,
        b_star: cur.grad,
        theta_star: theta,
        active,
        tau,
        iterations,
    }
}

/// Closed-form twist for one node with exponential jobs:
/// `θ* = (μe^{rt}/2)((1 + e^{-rt}) − √((1 − e^{-rt})² + 4e^{-rt} m/a))`,
/// where `m = (λ/(rμ))(1 − e^{-rt})` is the mean content.
pub fn exp_twist_closed_form(lambda: f64, mu: f64, r: f64, t: f64, a: f64) -> Result<f64> {
    let e = (-r * t).exp();
    let m = lambda / (r * mu) * (1.0 - e);
    if a < m {
        return Err(Error::RarityViolated {
            mean: vec![m],
            target: vec![a],
        });
    }
    let disc = ((1.0 - e) * (1.0 - e) + 4.0 * e * m / a).sqrt();
    Ok((mu / (2.0 * e) * ((1.0 + e) - disc)).max(0.0))
}

/// Bahadur–Rao approximation
/// `n^{-D/2} ∏_{i∈Θ} θ*_i^{-1} (2π)^{-D/2} τ^{-1/2} e^{-nI}` of `p_n(a)`.
pub fn bahadur_rao_p(sol: &TwistSolution, n: f64) -> f64 {
    let d = sol.d() as f64;
    n.powf(-d / 2.0) / sol.active_product() * (2.0 * std::f64::consts::PI).powf(-d / 2.0) / sol.tau.sqrt()
        * (-n * sol.rate).exp()
}

/// Asymptotic second moment of the estimator `L·1{Y_n ∈ nA}` under the twist:
/// `n^{-D/2} ∏_{i∈Θ} (2θ*_i)^{-1} (2π)^{-D/2} τ^{-1/2} e^{-2nI}`.
pub fn second_moment_asymptotic(sol: &TwistSolution, n: f64) -> f64 {
    let d = sol.d() as f64;
    n.powf(-d / 2.0) / (sol.active_product() * 2f64.powf(d)) * (2.0 * std::f64::consts::PI).powf(-d / 2.0)
        / sol.tau.sqrt()
        * (-2.0 * n * sol.rate).exp()
}

/// Run-count constant `α = (T²/ε²) ∏_{i∈Θ} θ*_i · 2^{-D} (2π)^{D/2} √τ`.
pub fn run_constant(sol: &TwistSolution, eps: f64, crit: f64) -> f64 {
    let d = sol.d() as f64;
    crit * crit / (eps * eps) * sol.active_product() * 2f64.powf(-d) * (2.0 * std::f64::consts::PI).powf(d / 2.0)
        * sol.tau.sqrt()
}

/// Predicted number of runs `α n^{D/2}` for relative precision `eps` at critical value `crit`.
pub fn predicted_runs(sol: &TwistSolution, n: f64, eps: f64, crit: f64) -> f64 {
    run_constant(sol, eps, crit) * n.powf(sol.d() as f64 / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single() -> NetworkSpec {
        NetworkSpec::single_node(1.0, 1.0, 1.0, 1.0)
    }

    /// Independent oracle: trapezoid-free Simpson rule on a fine grid.
    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn log_mgf_at_zero_is_zero() {
        assert_eq!(log_mgf(&single(), &[0.0]).unwrap(), 0.0);
        let t = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
        assert!(log_mgf(&t, &[0.0, 0.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn closed_form_integral() {
        let v = log_mgf_exp_closed(1.0, 1.0, 0.2918, 1.0).unwrap();
        let expect = ((1f64.exp() - 0.2918) / 0.7082).ln();
        assert!((v - expect).abs() < 1e-14);
        assert_eq!(log_mgf_exp_closed(1.0, 1.0, 0.0, 2.5).unwrap(), 2.5);
        assert!(log_mgf_exp_closed(1.0, 1.0, 1.0 - 1e-12, 1.0).unwrap() > 20.0);
        assert!(log_mgf_exp_closed(1.0, 1.0, 1.0, 1.0).is_err());
        let lm = log_mgf(&single(), &[0.2918]).unwrap();
        assert!((lm - (v - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn domain_exceeded_reports_node() {
        let t = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
        match log_mgf(&t, &[1.5, 0.0]) {
            Err(Error::DomainExceeded { u, node }) => {
                assert_eq!(node, 0);
                assert!(u < 0.3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(log_mgf(&single(), &[1.0]), Err(Error::DomainExceeded { .. })));
    }

    #[test]
    fn mean_single_node() {
        let m = mean_vector(&single()).unwrap();
        assert!((m[0] - (1.0 - (-1f64).exp())).abs() < 1e-14);
        let mut short = single();
        short.horizon = 1e-12;
        assert!(mean_vector(&short).unwrap()[0] < 1e-11);
    }

    #[test]
    fn mean_tandem_matches_finite_difference() {
        let t = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
        let m = mean_vector(&t).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut p = [0.0, 0.0];
            let mut q = [0.0, 0.0];
            p[i] = h;
            q[i] = -h;
            let fd = (log_mgf(&t, &p).unwrap() - log_mgf(&t, &q).unwrap()) / (2.0 * h);
            assert!((fd - m[i]).abs() < 1e-8, "{i}: {fd} vs {}", m[i]);
        }
        let g = gradient_log_mgf(&t, &[0.0, 0.0]).unwrap();
        assert!((g - m).amax() < 1e-12);
    }

    #[test]
    fn single_node_twist() {
        let sol = solve_twist(&single(), &RareTarget::new(vec![1.0])).unwrap();
        let closed = exp_twist_closed_form(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((sol.theta_star[0] - closed).abs() < 1e-10);
        assert!((sol.theta_star[0] - 0.2918).abs() < 1e-3);
        let th = sol.theta_star[0];
        let tau = 1.0 / ((1.0 - th) * (1.0 - th)) - 1.0 / ((1f64.exp() - th) * (1f64.exp() - th));
        assert!((sol.tau - tau).abs() < 1e-10);
        assert!((sol.tau - 1.8240).abs() < 1e-3);
        assert_eq!(sol.active, vec![0]);
        assert!((sol.b_star[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn twist_at_mean_is_zero() {
        let m = mean_vector(&single()).unwrap();
        let sol = solve_twist(&single(), &RareTarget::new(vec![m[0]])).unwrap();
        assert!(sol.theta_star[0].abs() < 1e-9);
        assert!(sol.rate.abs() < 1e-15);
        assert!(exp_twist_closed_form(1.0, 1.0, 1.0, 1.0, m[0]).unwrap().abs() < 1e-12);
        assert!(matches!(
            solve_twist(&single(), &RareTarget::new(vec![0.1])),
            Err(Error::RarityViolated { .. })
        ));
    }

    #[test]
    fn tandem_downstream() {
        let t = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
        let sol = solve_twist(&t, &RareTarget::new(vec![0.0, 1.0])).unwrap();
        assert_eq!(sol.active, vec![1]);
        assert!((sol.theta_star[1] - 0.8104).abs() < 1e-3);
        assert!((sol.tau - 1.4774).abs() < 1e-3);
        assert!(sol.b_star[0] >= -1e-12);
        assert!((run_constant(&sol, 0.1, 1.96) - 474.3).abs() < 1.0);
    }

    #[test]
    fn tandem_joint() {
        let t = NetworkSpec::tandem(2.0, 1.0, 2.0, 1.0, 1.0);
        let sol = solve_twist(&t, &RareTarget::new(vec![1.2, 1.1])).unwrap();
        assert_eq!(sol.d(), 2);
        assert!((sol.theta_star[0] - 0.1367).abs() < 1e-3);
        assert!((sol.theta_star[1] - 0.2225).abs() < 1e-3);
        assert!((sol.b_star[0] - 1.2).abs() < 1e-9 && (sol.b_star[1] - 1.1).abs() < 1e-9);
    }

    #[test]
    fn hessian_matches_quadrature_oracle() {
        // Independent Simpson evaluation of λ∫ e^{-Rᵀu}∇²β e^{-Ru} for the tandem.
        let t = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
        let th = [0.1, 0.3];
        let h = hessian_log_mgf(&t, &th).unwrap();
        let entry = |i: usize, k: usize| {
            simpson(
                |u| {
                    let p = matrix_exp(&t.rate_matrix(), u).unwrap();
                    let x = p[(0, 0)] * th[0] + p[(0, 1)] * th[1];
                    // β(x, ·) = 1/(1−x); β'' = 2/(1−x)³ on node 1 only
                    p[(0, i)] * p[(0, k)] * 2.0 / (1.0 - x).powi(3)
                },
                0.0,
                1.0,
                2000,
            )
        };
        for i in 0..2 {
            for k in 0..2 {
                assert!((h[(i, k)] - entry(i, k)).abs() < 1e-10, "({i},{k})");
            }
        }
    }

    #[test]
    fn asymptotic_ratio() {
        let sol = solve_twist(&single(), &RareTarget::new(vec![1.0])).unwrap();
        let n = 40.0;
        let p = bahadur_rao_p(&sol, n);
        let th = sol.theta_star[0];
        let expect = 1.0 / n.sqrt() / (th * (2.0 * std::f64::consts::PI * sol.tau).sqrt()) * (-n * sol.rate).exp();
        assert!((p / expect - 1.0).abs() < 1e-12);
        let ratio = second_moment_asymptotic(&sol, n) / (p * p);
        let expect = th * (2.0 * std::f64::consts::PI * sol.tau).sqrt() / 2.0 * n.sqrt();
        assert!((ratio / expect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn run_constant_scaling_and_two_dimensional_form() {
        let t = NetworkSpec::tandem(2.0, 1.0, 2.0, 1.0, 1.0);
        let sol = solve_twist(&t, &RareTarget::new(vec![1.2, 1.1])).unwrap();
        let a1 = run_constant(&sol, 0.1, 1.96);
        let a2 = run_constant(&sol, 0.05, 1.96);
        assert!((a2 / a1 - 4.0).abs() < 1e-12);
        // two-dimensional form (T²/ε²) θ₁θ₂ π√τ / 2
        let at1 = 1.96f64.powi(2) / 0.01 * sol.theta_star[0] * sol.theta_star[1] * std::f64::consts::PI
            * sol.tau.sqrt()
            / 2.0;
        assert!((a1 / at1 - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn closed_form_twist_agrees(lambda in 0.2f64..3.0, mu in 0.3f64..3.0, r in 0.2f64..3.0,
                                    t in 0.2f64..2.0, excess in 1.05f64..3.0) {
            let spec = NetworkSpec::single_node(lambda, mu, r, t);
            let m = mean_vector(&spec).unwrap()[0];
            let a = m * excess;
            let sol = solve_twist(&spec, &RareTarget::new(vec![a])).unwrap();
            let closed = exp_twist_closed_form(lambda, mu, r, t, a).unwrap();
            prop_assert!((sol.theta_star[0] - closed).abs() < 1e-8 * (1.0 + closed));
            prop_assert!(closed > 0.0 && closed < mu);
        }

        #[test]
        fn quadrature_matches_closed_form(mu in 0.3f64..3.0, r in 0.2f64..3.0, s in 0.1f64..3.0, frac in 0.0f64..0.95) {
            let theta = frac * mu;
            let closed = log_mgf_exp_closed(mu, r, theta, s).unwrap();
            let spec = NetworkSpec {
                lambda: 1.0,
                jobs: crate::model::Jobs(vec![crate::model::JobLaw::exponential(mu), crate::model::JobLaw::Zero]),
                drain: vec![r, 1.0],
                routing: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                horizon: s,
            };
            // Two decoupled nodes take the quadrature path.
            let quad = log_mgf(&spec, &[theta, 0.0]).unwrap() + s;
            prop_assert!((quad - closed).abs() < 1e-10 * (1.0 + closed.abs()));
        }

        #[test]
        fn log_mgf_convex_on_rays(d0 in 0.0f64..1.0, d1 in 0.0f64..1.0, s in 0.0f64..0.3) {
            let t = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
            let h = 0.01;
            let f = |x: f64| log_mgf(&t, &[x * d0, x * d1]).unwrap();
            let second = f(s + 2.0 * h) - 2.0 * f(s + h) + f(s);
            prop_assert!(second >= -1e-9);
        }

        #[test]
        fn rate_derivative_is_theta(a0 in 0.9f64..1.4) {
            let spec = NetworkSpec::single_node(1.0, 1.0, 1.0, 1.0);
            let rate = |a: f64| solve_twist(&spec, &RareTarget::new(vec![a])).unwrap().rate;
            let h = 1e-5;
            let fd = (rate(a0 + h) - rate(a0 - h)) / (2.0 * h);
            let th = solve_twist(&spec, &RareTarget::new(vec![a0])).unwrap().theta_star[0];
            prop_assert!((fd - th).abs() < 1e-5);
        }

        #[test]
        fn hessian_matches_finite_difference_of_gradient(x0 in 0.0f64..0.4, x1 in 0.0f64..0.6) {
            let t = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
            let hs = hessian_log_mgf(&t, &[x0, x1]).unwrap();
            let h = 1e-5;
            for k in 0..2 {
                let mut p = [x0, x1];
                let mut q = [x0, x1];
                p[k] += h;
                q[k] -= h;
                let fd = (gradient_log_mgf(&t, &p).unwrap() - gradient_log_mgf(&t, &q).unwrap()) / (2.0 * h);
                for i in 0..2 {
                    prop_assert!((fd[i] - hs[(i, k)]).abs() <= 1e-6 * hs[(i, k)].abs().max(1e-3));
                }
            }
        }

        #[test]
        fn time_rescaling_invariance(c in 0.3f64..3.0) {
            let base = NetworkSpec::tandem(2.0, 1.0, 2.0, 1.0, 1.0);
            let scaled = NetworkSpec::tandem(2.0 / c, 1.0, 2.0 / c, 1.0 / c, c);
            let target = RareTarget::new(vec![1.2, 1.1]);
            let a = solve_twist(&base, &target).unwrap();
            let b = solve_twist(&scaled, &target).unwrap();
            prop_assert!((a.theta_star.clone() - b.theta_star.clone()).amax() < 1e-9);
            prop_assert!((a.rate - b.rate).abs() < 1e-10);
        }

        #[test]
        fn complementary_slackness(a0 in 0.0f64..1.5, a1 in 0.3f64..1.5) {
            let t = NetworkSpec::tandem(1.0, 1.0, 2.0, 1.0, 1.0);
            let target = RareTarget::new(vec![a0, a1]);
            let m = mean_vector(&t).unwrap();
            prop_assume!(a0 > m[0] || a1 > m[1]);
            let sol = solve_twist(&t, &target).unwrap();
            for i in 0..2 {
                prop_assert!(sol.theta_star[i] >= 0.0);
                if sol.theta_star[i] >= ACTIVE_THRESHOLD {
                    prop_assert!((sol.b_star[i] - target.a[i]).abs() < 1e-8);
                } else {
                    prop_assert!(sol.b_star[i] >= target.a[i] - 1e-8);
                }
            }
            prop_assert!(sol.rate >= 0.0);
        }
    }
}
