//! Shot-noise segments: the common building block of plain and modulated
//! networks.
//!
//! A segment is a stretch of time of length `h` with constant dynamics. A shot
//! that arrives at distance `w ∈ [0, h]` before the right end of the segment
//! contributes `P(w)ᵀ B` to the content observed at the horizon, where
//! `P(w) = e^{-R w} C` and `C` propagates from the right end of the segment to
//! the horizon. A plain network is a single segment with `C = I` and `w` the
//! age of the shot; a modulated path is a sequence of segments.
//!
//! Under a twist `θ` the segment's cumulant is `λ ∫₀ʰ (β(P(w)θ) − 1) dw`,
//! shots arrive with density proportional to `β(P(w)θ)` and each job component
//! is tilted by `(P(w)θ)_ℓ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::linalg::Propagator;
use crate::model::{JobLaw, Jobs};
use crate::quadrature::{gauss_legendre5, integrate_vec, QuadOptions};

/// How `P(w)` is evaluated.
#[derive(Debug, Clone)]
pub(crate) enum Coefficient {
    /// One node: `P(w) = c·e^{-r w}`.
    Scalar { r: f64, c: f64 },
    /// General network, tabulated propagator.
    Matrix(Propagator),
}

#[derive(Debug, Clone)]
pub(crate) struct Segment {
    pub lambda: f64,
    pub jobs: Jobs,
    pub length: f64,
    pub coef: Coefficient,
    /// Real time of the right end, for modulated segments. Domain errors are
    /// then reported in real time rather than as a shot age.
    pub right_end: Option<f64>,
}

/// Value, gradient and Hessian of a cumulant function.
#[derive(Debug, Clone)]
pub(crate) struct CgfValue {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl CgfValue {
    pub fn zeros(l: usize) -> Self {
        CgfValue {
            value: 0.0,
            grad: DVector::zeros(l),
            hess: DMatrix::zeros(l, l),
        }
    }

    fn add(&mut self, other: &CgfValue) {
        self.value += other.value;
        self.grad += &other.grad;
        self.hess += &other.hess;
    }
}

impl Segment {
    pub fn nodes(&self) -> usize {
        self.jobs.len()
    }

    /// `P(w)` as a matrix.
    pub fn p_matrix(&self, w: f64) -> DMatrix<f64> {
        match &self.coef {
            Coefficient::Scalar { r, c } => DMatrix::from_element(1, 1, c * (-r * w).exp()),
            Coefficient::Matrix(p) => p.eval(w),
        }
    }

    /// Job-twist vector `P(w)θ`.
    pub fn job_twist(&self, w: f64, theta: &DVector<f64>) -> DVector<f64> {
        match &self.coef {
            Coefficient::Scalar { r, c } => DVector::from_element(1, c * (-r * w).exp() * theta[0]),
            Coefficient::Matrix(p) => p.apply(w, theta),
        }
    }

    fn report_u(&self, w: f64) -> f64 {
        match self.right_end {
            Some(end) => end - w,
            None => w,
        }
    }

    fn domain_error(&self, w: f64, theta: &DVector<f64>) -> Error {
        let x = self.job_twist(w, theta);
        let node = self.jobs.domain_violation(x.as_slice()).unwrap_or(0);
        Error::DomainExceeded {
            u: self.report_u(w),
            node,
        }
    }

    /// Scalar exponential segment parameters `(μ, r, A = cθ)`, when applicable.
    fn scalar_exp(&self, theta: &DVector<f64>) -> Option<(f64, f64, f64)> {
        match (&self.coef, self.jobs.laws()) {
            (Coefficient::Scalar { r, c }, [JobLaw::Exponential { rate }]) => Some((*rate, *r, c * theta[0])),
            _ => None,
        }
    }

    fn is_silent(&self) -> bool {
        self.lambda == 0.0 || self.jobs.all_zero() || self.length == 0.0
    }

    /// `∫₀ʰ β(P(w)θ) dw`.
    pub fn beta_integral(&self, theta: &DVector<f64>) -> Result<f64> {
        if self.jobs.all_zero() || self.length == 0.0 {
            return Ok(self.length);
        }
        Ok(self.length + self.excess_integral(theta)?)
    }

    /// `∫₀ʰ (β(P(w)θ) − 1) dw`, evaluated without cancellation.
    fn excess_integral(&self, theta: &DVector<f64>) -> Result<f64> {
        if let Some((mu, r, a)) = self.scalar_exp(theta) {
            if a >= mu {
                return Err(self.domain_error(0.0, theta));
            }
            let h = self.length;
            let tail = (-r * h).exp();
            return Ok(((-a * tail / mu).ln_1p() - (-a / mu).ln_1p()) / r);
        }
        integrate_vec(
            |w, out| match self.jobs.log_mgf(self.job_twist(w, theta).as_slice()) {
                Some(v) => {
                    out[0] = v.exp_m1();
                    true
                }
                None => false,
            },
            0.0,
            self.length,
            1,
            QuadOptions::default(),
        )
        .map(|v| v[0])
        .map_err(|w| self.domain_error(w, theta))
    }

    /// Cumulant `λ ∫ (β(Pθ) − 1)`.
    pub fn cgf_value(&self, theta: &DVector<f64>) -> Result<f64> {
        if self.is_silent() {
            return Ok(0.0);
        }
        Ok(self.lambda * self.excess_integral(theta)?)
    }

    /// Cumulant with gradient `λ ∫ Pᵀ∇β(Pθ)` and Hessian `λ ∫ Pᵀ∇²β(Pθ) P`.
    pub fn cgf_full(&self, theta: &DVector<f64>) -> Result<CgfValue> {
        let l = self.nodes();
        if self.is_silent() {
            return Ok(CgfValue::zeros(l));
        }
        if let Some((mu, r, a)) = self.scalar_exp(theta) {
            let c = match self.coef {
                Coefficient::Scalar { c, .. } => c,
                Coefficient::Matrix(_) => unreachable!("scalar_exp implies a scalar coefficient"),
            };
            if a >= mu {
                return Err(self.domain_error(0.0, theta));
            }
            let h = self.length;
            let tail = (-r * h).exp();
            let far = mu - a * tail;
            let near = mu - a;
            let value = ((-a * tail / mu).ln_1p() - (-a / mu).ln_1p()) / r;
            let d1 = (1.0 / near - tail / far) / r;
            let d2 = (1.0 / (near * near) - tail * tail / (far * far)) / r;
            return Ok(CgfValue {
                value: self.lambda * value,
                grad: DVector::from_element(1, self.lambda * c * d1),
                hess: DMatrix::from_element(1, 1, self.lambda * c * c * d2),
            });
        }
        let dim = 1 + l + l * l;
        let v = integrate_vec(
            |w, out| {
                let p = self.p_matrix(w);
                let x = &p * theta;
                let Some(d) = self.jobs.log_mgf_derivs(x.as_slice()) else {
                    return false;
                };
                let beta = d.value.exp();
                out[0] = d.value.exp_m1();
                let pg = p.transpose() * &d.grad;
                for i in 0..l {
                    out[1 + i] = beta * pg[i];
                }
                for k in 0..l {
                    for i in 0..l {
                        let mut s = pg[i] * pg[k];
                        for m in 0..l {
                            s += p[(m, i)] * d.hess_diag[m] * p[(m, k)];
                        }
                        out[1 + l + k * l + i] = beta * s;
                    }
                }
                true
            },
            0.0,
            self.length,
            dim,
            QuadOptions::default(),
        )
        .map_err(|w| self.domain_error(w, theta))?;
        let lam = self.lambda;
        Ok(CgfValue {
            value: lam * v[0],
            grad: DVector::from_iterator(l, v[1..1 + l].iter().map(|g| lam * g)),
            hess: DMatrix::from_iterator(l, l, v[1 + l..].iter().map(|h| lam * h)),
        })
    }

    /// Mean contribution `λ ∫ Pᵀ 𝔼B`.
    pub fn mean(&self) -> DVector<f64> {
        let l = self.nodes();
        if self.is_silent() {
            return DVector::zeros(l);
        }
        let eb = self.jobs.means();
        match &self.coef {
            Coefficient::Scalar { r, c } => {
                DVector::from_element(1, self.lambda * c * eb[0] * (-(-r * self.length).exp_m1()) / r)
            }
            Coefficient::Matrix(_) => {
                let v = integrate_vec(
                    |w, out| {
                        let m = self.p_matrix(w).transpose() * &eb;
                        out.copy_from_slice(m.as_slice());
                        true
                    },
                    0.0,
                    self.length,
                    l,
                    QuadOptions::default(),
                )
                .expect("mean integrand is always finite");
                DVector::from_vec(v) * self.lambda
            }
        }
    }
}

/// Sum of independent segments: the cumulant of the whole content vector.
#[derive(Debug, Clone)]
pub(crate) struct Cgf {
    pub segments: Vec<Segment>,
    pub nodes: usize,
}

impl Cgf {
    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.segments.iter().map(|s| s.cgf_value(theta)).sum()
    }

    pub fn full(&self, theta: &DVector<f64>) -> Result<CgfValue> {
        let mut acc = CgfValue::zeros(self.nodes);
        for s in &self.segments {
            acc.add(&s.cgf_full(theta)?);
        }
        Ok(acc)
    }

    pub fn mean(&self) -> DVector<f64> {
        self.segments
            .iter()
            .fold(DVector::zeros(self.nodes), |acc, s| acc + s.mean())
    }
}

/// How epochs (as distances `w` from the right end) are drawn.
#[derive(Debug, Clone)]
enum EpochSampler {
    Uniform,
    /// Scalar exponential segment with `A = cθ > 0`; density `∝ μ/(μ − A e^{-rw})`.
    ClosedForm { mu: f64, r: f64, a: f64 },
    /// Cumulative integrals of `β(P(w)θ)` at equally spaced nodes.
    Tabulated { step: f64, cum: Vec<f64> },
}

/// A segment together with a fixed twist: everything needed to sample shots.
#[derive(Debug, Clone)]
pub(crate) struct TwistedSegment {
    pub seg: Segment,
    pub theta: DVector<f64>,
    /// `∫₀ʰ β(P(w)θ) dw`; the Poisson mean per unit scale is `λ` times this.
    pub beta_integral: f64,
    sampler: EpochSampler,
}

/// Outcome of sampling the shots of one segment.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ShotStats {
    pub count: u64,
    /// Event-level log likelihood ratio (only accumulated in debug builds).
    pub event_log_lr: f64,
    /// Sum of absolute event-level terms, used as the comparison scale.
    pub event_log_scale: f64,
}

impl TwistedSegment {
    pub fn new(seg: Segment, theta: DVector<f64>, cells: usize) -> Result<Self> {
        let twisted = !seg.is_silent() && theta.iter().any(|&v| v != 0.0);
        let beta_integral = seg.beta_integral(&theta)?;
        let sampler = if !twisted {
            EpochSampler::Uniform
        } else if let Some((mu, r, a)) = seg.scalar_exp(&theta) {
            if a == 0.0 {
                EpochSampler::Uniform
            } else {
                EpochSampler::ClosedForm { mu, r, a }
            }
        } else {
            let cells = cells.max(1);
            let step = seg.length / cells as f64;
            let mut cum = Vec::with_capacity(cells + 1);
            cum.push(0.0);
            let mut acc = 0.0;
            for k in 0..cells {
                let lo = step * k as f64;
                acc += gauss_legendre5(|w| seg_beta(&seg, &theta, w), lo, lo + step);
                cum.push(acc);
            }
            EpochSampler::Tabulated { step, cum }
        };
        Ok(TwistedSegment {
            seg,
            theta,
            beta_integral,
            sampler,
        })
    }

    /// Poisson mean of the number of shots for `n` superposed copies.
    pub fn poisson_mean(&self, n: f64) -> f64 {
        n * self.seg.lambda * self.beta_integral
    }

    /// `ℚ(W ≤ w)` for the distance-from-right-end variable.
    pub fn epoch_cdf(&self, w: f64) -> f64 {
        let h = self.seg.length;
        if h == 0.0 {
            return 1.0;
        }
        let w = w.clamp(0.0, h);
        match &self.sampler {
            EpochSampler::Uniform => w / h,
            EpochSampler::ClosedForm { mu, r, a } => {
                closed_form_partial(*mu, *r, *a, w) / closed_form_partial(*mu, *r, *a, h)
            }
            EpochSampler::Tabulated { step, cum } => {
                let cells = cum.len() - 1;
                let k = ((w / step).floor() as usize).min(cells - 1);
                let lo = step * k as f64;
                let part = gauss_legendre5(|v| seg_beta(&self.seg, &self.theta, v), lo, w);
                ((cum[k] + part) / cum[cells]).min(1.0)
            }
        }
    }

    /// Density of `W` under the twist.
    pub fn epoch_density(&self, w: f64) -> f64 {
        let h = self.seg.length;
        match &self.sampler {
            EpochSampler::Uniform => 1.0 / h,
            EpochSampler::ClosedForm { mu, r, a } => {
                let beta = mu / (mu - a * (-r * w).exp());
                beta / closed_form_partial(*mu, *r, *a, h)
            }
            EpochSampler::Tabulated { cum, .. } => seg_beta(&self.seg, &self.theta, w) / cum[cum.len() - 1],
        }
    }

    /// Inverse of [`epoch_cdf`](Self::epoch_cdf).
    pub fn epoch_inverse(&self, u: f64) -> f64 {
        let h = self.seg.length;
        match &self.sampler {
            EpochSampler::Uniform => u * h,
            EpochSampler::ClosedForm { mu, r, a } => {
                // w = (1/r) log((e^{rh} − α)^u (1 − α)^{1−u} + α), α = A/μ
                let alpha = a / mu;
                let log_far = r * h + (-alpha * (-r * h).exp()).ln_1p();
                let log_near = (-alpha).ln_1p();
                let x = alpha + (u * log_far + (1.0 - u) * log_near).exp();
                (x.ln() / r).clamp(0.0, h)
            }
            EpochSampler::Tabulated { step, cum } => {
                let cells = cum.len() - 1;
                let target = u * cum[cells];
                // last node with cum[k] <= target
                let k = cum.partition_point(|&c| c <= target).saturating_sub(1).min(cells - 1);
                let lo = step * k as f64;
                let hi = lo + step;
                let (mut a, mut b) = (lo, hi);
                let mut w = lo + step * ((target - cum[k]) / (cum[k + 1] - cum[k])).clamp(0.0, 1.0);
                for _ in 0..60 {
                    let f = cum[k] + gauss_legendre5(|v| seg_beta(&self.seg, &self.theta, v), lo, w) - target;
                    if f > 0.0 {
                        b = w;
                    } else {
                        a = w;
                    }
                    if f.abs() <= 1e-15 * cum[cells] || b - a <= 1e-13 * step {
                        break;
                    }
                    let next = w - f / seg_beta(&self.seg, &self.theta, w);
                    w = if next > a && next < b { next } else { 0.5 * (a + b) };
                }
                w.clamp(0.0, h)
            }
        }
    }

    pub fn sample_epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.epoch_inverse(u)
    }

    /// Twisted job vector for a shot at `w`.
    pub fn sample_job<R: Rng + ?Sized>(&self, w: f64, rng: &mut R) -> DVector<f64> {
        let x = self.seg.job_twist(w, &self.theta);
        DVector::from_iterator(
            x.len(),
            self.seg.jobs.laws().iter().zip(x.iter()).map(|(law, &xi)| law.sample_twisted(xi, rng)),
        )
    }

    /// Draws the shots of `n` superposed copies and adds their contributions
    /// at the horizon to `acc`.
    pub fn sample_into<R: Rng + ?Sized>(&self, n: f64, rng: &mut R, acc: &mut DVector<f64>) -> ShotStats {
        let mut stats = ShotStats::default();
        if self.seg.is_silent() {
            return stats;
        }
        let mean_q = self.poisson_mean(n);
        let count = if mean_q > 0.0 {
            Poisson::new(mean_q).expect("finite positive Poisson mean").sample(rng) as u64
        } else {
            0
        };
        stats.count = count;
        let track = cfg!(debug_assertions);
        if track {
            let mean_p = n * self.seg.lambda * self.seg.length;
            let t = mean_q - mean_p + count as f64 * (mean_p / mean_q).ln();
            stats.event_log_lr += t;
            stats.event_log_scale += mean_q + mean_p + (count as f64 * (mean_p / mean_q).ln()).abs();
        }
        let h = self.seg.length;
        for _ in 0..count {
            let w = self.sample_epoch(rng);
            let b = self.sample_job(w, rng);
            match &self.seg.coef {
                Coefficient::Scalar { r, c } => acc[0] += c * (-r * w).exp() * b[0],
                Coefficient::Matrix(p) => *acc += p.apply_transpose(w, &b),
            }
            if track {
                let x = self.seg.job_twist(w, &self.theta);
                let epoch = -(h * self.epoch_density(w)).ln();
                let jobs: f64 = self
                    .seg
                    .jobs
                    .laws()
                    .iter()
                    .zip(x.iter().zip(b.iter()))
                    .map(|(law, (&xi, &bi))| law.log_density_ratio(xi, bi))
                    .sum();
                stats.event_log_lr += epoch + jobs;
                stats.event_log_scale += epoch.abs() + jobs.abs() + x.dot(&b).abs();
            }
        }
        stats
    }
}

fn seg_beta(seg: &Segment, theta: &DVector<f64>, w: f64) -> f64 {
    seg.jobs
        .log_mgf(seg.job_twist(w, theta).as_slice())
        .map_or(f64::INFINITY, f64::exp)
}

/// `∫₀ʷ μ/(μ − A e^{-rv}) dv = (1/r) log((μ e^{rw} − A)/(μ − A))`.
fn closed_form_partial(mu: f64, r: f64, a: f64, w: f64) -> f64 {
    w + ((-a * (-r * w).exp() / mu).ln_1p() - (-a / mu).ln_1p()) / r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eye;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(lambda: f64, mu: f64, r: f64, h: f64) -> Segment {
        Segment {
            lambda,
            jobs: Jobs(vec![JobLaw::exponential(mu)]),
            length: h,
            coef: Coefficient::Scalar { r, c: 1.0 },
            right_end: None,
        }
    }

    fn as_matrix(seg: &Segment, cells: usize) -> Segment {
        let r = match seg.coef {
            Coefficient::Scalar { r, .. } => r,
            _ => unreachable!(),
        };
        let rm = DMatrix::from_element(1, 1, r);
        Segment {
            coef: Coefficient::Matrix(Propagator::new(&rm, &eye(1), seg.length, cells).unwrap()),
            ..seg.clone()
        }
    }

    #[test]
    fn scalar_closed_form_matches_quadrature() {
        let s = scalar(1.3, 1.7, 0.8, 1.4);
        let m = as_matrix(&s, 64);
        let th = DVector::from_element(1, 0.9);
        let a = s.cgf_full(&th).unwrap();
        let b = m.cgf_full(&th).unwrap();
        assert!((a.value - b.value).abs() < 1e-11);
        assert!((a.grad[0] - b.grad[0]).abs() < 1e-11);
        assert!((a.hess[(0, 0)] - b.hess[(0, 0)]).abs() < 1e-10);
        assert!((s.mean()[0] - m.mean()[0]).abs() < 1e-13);
    }

    #[test]
    fn tabulated_inverse_matches_closed_form() {
        let s = scalar(1.0, 1.0, 1.0, 1.0);
        let th = DVector::from_element(1, 0.2918);
        let closed = TwistedSegment::new(s.clone(), th.clone(), 0).unwrap();
        let tab = TwistedSegment::new(as_matrix(&s, 1), th, 1024).unwrap();
        assert!(matches!(tab.sampler, EpochSampler::Tabulated { .. }));
        for k in 0..=20 {
            let u = k as f64 / 20.0;
            let a = closed.epoch_inverse(u);
            let b = tab.epoch_inverse(u);
            assert!((a - b).abs() < 1e-11, "u={u}: {a} vs {b}");
            assert!((closed.epoch_cdf(a) - u).abs() < 1e-12);
            assert!((tab.epoch_cdf(b) - u).abs() < 1e-11);
        }
        assert!((closed.epoch_density(0.3) - tab.epoch_density(0.3)).abs() < 1e-11);
    }

    #[test]
    #[cfg(debug_assertions)]
    fn event_level_ratio_matches_closed_form() {
        let s = scalar(1.0, 1.0, 1.0, 1.0);
        let th = DVector::from_element(1, 0.2918);
        let k = s.cgf_value(&th).unwrap();
        let ts = TwistedSegment::new(s, th.clone(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1.0, 10.0, 40.0] {
            let mut y = DVector::zeros(1);
            let st = ts.sample_into(n, &mut rng, &mut y);
            let direct = -th.dot(&y) + n * k;
            assert!((st.event_log_lr - direct).abs() < 1e-9 * (1.0 + st.event_log_scale));
        }
    }
}
