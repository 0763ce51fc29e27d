//! Arrival-epoch densities and twisted job rates on a grid.

use std::fmt::Write as _;

use fluidnet::modulation::PathTwist;
use fluidnet::twist::TwistPlan;

/// A twisted measure whose arrival epochs can be tabulated.
#[derive(Debug, Clone, Copy)]
pub enum DensitySource<'a> {
    Plan(&'a TwistPlan),
    Path(&'a PathTwist),
}

impl DensitySource<'_> {
    fn horizon(&self) -> f64 {
        match self {
            DensitySource::Plan(p) => p.horizon,
            DensitySource::Path(p) => p.path.horizon,
        }
    }

    fn nodes(&self) -> usize {
        match self {
            DensitySource::Plan(p) => p.nodes(),
            DensitySource::Path(p) => p.theta_star().len(),
        }
    }

    /// Twisted and original densities of the arrival epoch at real time `s`,
    /// plus the twisted job rates there.
    fn at(&self, s: f64) -> (f64, f64, Vec<Option<f64>>) {
        let t = self.horizon();
        match self {
            DensitySource::Plan(p) => {
                let u = t - s;
                (p.epoch_density(u), 1.0 / t, p.job_rates(u))
            }
            DensitySource::Path(p) => {
                let q = p.poisson_means_q();
                let pm = p.poisson_means_p();
                let i = p.segment_of(s);
                let (start, end, _) = p.path.segments().nth(i).expect("segment exists");
                let q_total: f64 = q.iter().sum();
                let p_total: f64 = pm.iter().sum();
                let dq = if q_total > 0.0 { q[i] / q_total * p.epoch_density(s) } else { 0.0 };
                let dp = if p_total > 0.0 { pm[i] / (end - start) / p_total } else { 0.0 };
                (dq, dp, p.job_rates(s))
            }
        }
    }
}

/// CSV of the arrival-epoch density on `points` equally spaced ages.
///
/// Columns: age `u`, real time `t − u`, density of the arrival epoch under the
/// twist and under the original measure (both with respect to real time, so
/// equal to the density of the age), then the twisted exponential job rate of
/// each node (empty for other job laws). For a modulated path the densities
/// are those of a single arrival drawn from the whole path.
pub fn emit_density_curves(source: DensitySource<'_>, points: usize) -> String {
    let t = source.horizon();
    let l = source.nodes();
    let mut out = String::from("u,t_minus_u,density_q,density_p");
    for a in 1..=l {
        let _ = write!(out, ",job_rate_{a}");
    }
    out.push('\n');
    let points = points.max(2);
    for k in 0..points {
        let u = t * k as f64 / (points - 1) as f64;
        let s = (t - u).max(0.0);
        let (dq, dp, rates) = source.at(s);
        let _ = write!(out, "{u},{s},{dq},{dp}");
        for r in rates {
            match r {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use fluidnet::analytics::solve_twist;
    use fluidnet::model::{NetworkSpec, RareTarget};

    fn rows(csv: &str) -> Vec<Vec<f64>> {
        csv.lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect())
            .collect()
    }

    #[test]
    fn untwisted_density_is_flat() {
        let spec = NetworkSpec::single_node(1.0, 1.0, 1.0, 2.0);
        let plan = TwistPlan::untwisted(&spec, &RareTarget::new(vec![1.0])).unwrap();
        for row in rows(&emit_density_curves(DensitySource::Plan(&plan), 11)) {
            assert!((row[2] - 0.5).abs() < 1e-12);
            assert_eq!(row[3], 0.5);
            assert_eq!(row[4], 1.0);
        }
    }

    #[test]
    fn single_node_density_increases_toward_horizon() {
        let spec = NetworkSpec::single_node(1.0, 1.0, 1.0, 1.0);
        let target = RareTarget::new(vec![1.0]);
        let sol = solve_twist(&spec, &target).unwrap();
        let plan = TwistPlan::build(&spec, &sol, &target).unwrap();
        let r = rows(&emit_density_curves(DensitySource::Plan(&plan), 51));
        // Rows run backwards in real time. A density decreasing in the age is
        // the same as a concave CDF of the age.
        let d: Vec<f64> = r.iter().rev().map(|row| row[2]).collect();
        assert!(d.windows(2).all(|w| w[1] > w[0]));
        let mass: f64 = d.windows(2).map(|w| (w[0] + w[1]) / 2.0 / 50.0).sum();
        assert!((mass - 1.0).abs() < 1e-3);
    }
}
