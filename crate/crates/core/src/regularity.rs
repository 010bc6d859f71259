//! Pointwise boundary-regularity checks.
//!
//! At a boundary point `(t, y)` and control `a` two quantities decide whether
//! paths leave `Ō` immediately: the drift term `L_t^a ρ̂ = b·Dρ̂ + ½tr(σσ'D²ρ̂)`
//! and the normal noise `‖σ'Dρ̂‖`. The weak condition asks that one of them be
//! positive for some control; the drift-only condition asks that the first one
//! be positive.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::SpaceTimeDomain;
use crate::hjb::{check_condition9, Condition9Report};
use crate::model::{half_trace, ControlSet, SdeModel};
use crate::value::GridSpec;

pub const DEFAULT_MARGIN: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlTerms {
    pub control: Vec<f64>,
    /// `L_t^a ρ̂(y)`.
    pub generator: f64,
    /// `‖σ'(t,y,a) Dρ̂(y)‖`.
    pub sigma_term: f64,
}

impl ControlTerms {
    pub fn weak_margin(&self) -> f64 {
        self.generator.max(self.sigma_term)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryPointReport {
    pub t: f64,
    pub y: Vec<f64>,
    pub terms: Vec<ControlTerms>,
    pub margin: f64,
    pub condition6_holds: bool,
    pub fs_condition_holds: bool,
    /// Indices into `terms` of controls satisfying the weak condition.
    pub condition6_witnesses: Vec<usize>,
    pub fs_witnesses: Vec<usize>,
    /// `ρ̂` is not C² here (a corner) or its gradient is not unit length.
    pub not_smooth: bool,
}

impl BoundaryPointReport {
    /// `max_a max{L ρ̂, ‖σ'Dρ̂‖}`.
    pub fn condition6_value(&self) -> f64 {
        self.terms.iter().map(ControlTerms::weak_margin).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_a L ρ̂`.
    pub fn fs_value(&self) -> f64 {
        self.terms.iter().map(|c| c.generator).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Both terms for every control at a boundary point.
pub fn evaluate_condition6(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    controls: &ControlSet,
    t: f64,
    y: &[f64],
    margin: f64,
) -> Result<BoundaryPointReport> {
    let n = model.dim_state();
    if y.len() != n || domain.dim() != n {
        return Err(Error::Dimension { what: "boundary point", expected: n, got: y.len() });
    }
    if !(margin >= 0.0) {
        return Err(Error::invalid("margin", "must be nonnegative"));
    }
    let space = &domain.space;
    let rho = space.signed_distance(y);
    if rho.abs() > space.boundary_tolerance {
        return Err(Error::NotOnBoundary { point: y.to_vec(), distance: rho, tolerance: space.boundary_tolerance });
    }
    let gh = space.grad_hess(y);
    let d = model.dim_noise();
    let mut b = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    let mut terms = Vec::with_capacity(controls.len());
    for a in controls.points() {
        model.drift(t, y, a, &mut b);
        model.diffusion(t, y, a, &mut sigma);
        let drift: f64 = b.iter().zip(&gh.grad).map(|(u, v)| u * v).sum();
        let generator = drift + half_trace(&sigma, n, d, &gh.hess);
        let sigma_term = (0..d)
            .map(|k| {
                let c: f64 = (0..n).map(|i| sigma[i * d + k] * gh.grad[i]).sum();
                c * c
            })
            .sum::<f64>()
            .sqrt();
        terms.push(ControlTerms { control: a.clone(), generator, sigma_term });
    }
    let condition6_witnesses: Vec<usize> =
        terms.iter().enumerate().filter(|(_, c)| c.weak_margin() > margin).map(|(i, _)| i).collect();
    let fs_witnesses: Vec<usize> =
        terms.iter().enumerate().filter(|(_, c)| c.generator > margin).map(|(i, _)| i).collect();
    Ok(BoundaryPointReport {
        t,
        y: y.to_vec(),
        terms,
        margin,
        condition6_holds: !condition6_witnesses.is_empty(),
        fs_condition_holds: !fs_witnesses.is_empty(),
        condition6_witnesses,
        fs_witnesses,
        not_smooth: gh.degraded || space.is_corner(y),
    })
}

/// Sample times and boundary points for a scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryGrid {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub margin: f64,
    /// Grid for the `u ≡ 0` check of `min_a {G^a g + ℓ} ≥ 0`; skipped when absent.
    #[serde(skip)]
    pub condition9: Option<GridSpec>,
    pub condition9_tolerance: f64,
}

impl BoundaryGrid {
    pub fn new(times: Vec<f64>, points: Vec<Vec<f64>>) -> Self {
        BoundaryGrid { times, points, margin: DEFAULT_MARGIN, condition9: None, condition9_tolerance: 1e-9 }
    }

    /// `n_times` equally spaced times on `[0, T)` stopping one cell short of
    /// `T`, built-in boundary samples, and a 21-node-per-axis condition-(9)
    /// grid over the bounding box when the domain has one.
    pub fn for_domain(domain: &SpaceTimeDomain, n_times: usize, per_axis: usize) -> Result<Self> {
        if n_times == 0 {
            return Err(Error::invalid("n_times", "need at least one sample time"));
        }
        let cell = domain.horizon / n_times as f64;
        let times = (0..n_times).map(|k| k as f64 * cell).collect();
        let points = domain.space.boundary_samples(per_axis)?;
        let mut grid = BoundaryGrid::new(times, points);
        if let Some((lo, hi)) = domain.space.bounding_box() {
            let space =
                lo.iter().zip(&hi).map(|(&l, &h)| crate::field::Axis::new(l, h, 21)).collect::<Result<Vec<_>>>()?;
            grid.condition9 = Some(GridSpec::new(crate::field::Axis::new(0.0, domain.horizon, 21)?, space)?);
        }
        Ok(grid)
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn with_condition9(mut self, grid: Option<GridSpec>) -> Self {
        self.condition9 = grid;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationReport {
    pub model: String,
    pub domain: String,
    pub grid: BoundaryGrid,
    pub points: Vec<BoundaryPointReport>,
    /// Weak condition at every sample.
    pub condition6_everywhere: bool,
    /// Drift-only condition at every sample.
    pub fs_everywhere: bool,
    pub condition9: Option<Condition9Report>,
    pub min_condition6_value: f64,
    pub min_fs_value: f64,
    pub not_smooth_points: usize,
}

impl CertificationReport {
    /// Weak condition everywhere sampled, plus condition (9) when it was checked.
    pub fn all_pass(&self) -> bool {
        self.condition6_everywhere && self.condition9.as_ref().is_none_or(|c| c.holds)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BoundaryPointReport> {
        self.points.iter().filter(|p| !p.condition6_holds)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>10}  {:>24}  {:>14}  {:>14}  {:>6}  {:>6}",
            "t", "y", "max L rho", "max sigma", "cond6", "FS"
        );
        for p in &self.points {
            let sig = p.terms.iter().map(|c| c.sigma_term).fold(f64::NEG_INFINITY, f64::max);
            let y = p.y.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                s,
                "{:>10.4}  {:>24}  {:>14.6e}  {:>14.6e}  {:>6}  {:>6}",
                p.t,
                y,
                p.fs_value(),
                sig,
                yes_no(p.condition6_holds),
                yes_no(p.fs_condition_holds)
            );
        }
        let n = self.points.len();
        let fails = self.failures().count();
        if fails == 0 {
            let _ = writeln!(s, "condition (6) holds at all {n} sampled points");
        } else {
            let _ = writeln!(s, "condition (6) fails at {fails} of {n} sampled points");
        }
        let fs = self.points.iter().filter(|p| p.fs_condition_holds).count();
        let _ = writeln!(s, "drift-only condition holds at {fs} of {n} sampled points");
        if self.not_smooth_points > 0 {
            let _ = writeln!(s, "{} points sit where the distance is not C2", self.not_smooth_points);
        }
        match &self.condition9 {
            Some(c) if c.holds => {
                let _ = writeln!(
                    s,
                    "condition (9) with u = 0 holds at all {} nodes (min {:.6e})",
                    c.nodes_checked, c.min_value
                );
            }
            Some(c) => {
                let _ = writeln!(
                    s,
                    "condition (9) with u = 0 fails at {} of {} nodes",
                    c.violations.len(),
                    c.nodes_checked
                );
            }
            None => {
                let _ = writeln!(s, "condition (9) not checked");
            }
        }
        s
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Evaluate both conditions at every `(t, y)` of the grid and aggregate.
pub fn scan_boundary(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    controls: &ControlSet,
    grid: &BoundaryGrid,
) -> Result<CertificationReport> {
    let pairs: Vec<(f64, &Vec<f64>)> =
        grid.times.iter().flat_map(|&t| grid.points.iter().map(move |y| (t, y))).collect();
    let points = pairs
        .par_iter()
        .map(|&(t, y)| evaluate_condition6(model, domain, controls, t, y, grid.margin))
        .collect::<Result<Vec<_>>>()?;
    let condition9 = match &grid.condition9 {
        Some(g) => Some(check_condition9(model, controls, None, g, domain.space.fd_step, grid.condition9_tolerance)?),
        None => None,
    };
    let min_of = |f: fn(&BoundaryPointReport) -> f64| points.iter().map(f).fold(f64::INFINITY, f64::min);
    Ok(CertificationReport {
        model: model.name().to_string(),
        domain: domain.space.shape().name().to_string(),
        grid: grid.clone(),
        condition6_everywhere: points.iter().all(|p| p.condition6_holds),
        fs_everywhere: points.iter().all(|p| p.fs_condition_holds),
        condition9,
        min_condition6_value: min_of(BoundaryPointReport::condition6_value),
        min_fs_value: min_of(BoundaryPointReport::fs_value),
        not_smooth_points: points.iter().filter(|p| p.not_smooth).count(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GradMode, SpaceDomain};
    use crate::model::{builtin_scenario, FnModel};
    use proptest::prelude::*;

    fn stochastic() -> crate::model::Scenario {
        builtin_scenario("example41_stochastic").unwrap()
    }

    #[test]
    fn drift_dominated_point() {
        let s = stochastic();
        let r = evaluate_condition6(s.model.as_ref(), &s.domain, &s.controls, 0.25, &[1.0], DEFAULT_MARGIN).unwrap();
        assert!((r.terms[0].generator - 1.5).abs() < 1e-12);
        assert_eq!(r.terms[0].sigma_term, 0.0);
        assert!(r.condition6_holds && r.fs_condition_holds);
        assert_eq!(r.condition6_witnesses, vec![0]);
    }

    #[test]
    fn diffusion_dominated_point() {
        let s = stochastic();
        let r = evaluate_condition6(s.model.as_ref(), &s.domain, &s.controls, 1.5, &[1.0], DEFAULT_MARGIN).unwrap();
        assert!((r.terms[0].generator + 1.0).abs() < 1e-12);
        assert!((r.terms[0].sigma_term - 2.0).abs() < 1e-12);
        assert!(r.condition6_holds && !r.fs_condition_holds);
    }

    #[test]
    fn deterministic_lower_boundary_fails() {
        let s = builtin_scenario("example41_deterministic").unwrap();
        let r = evaluate_condition6(s.model.as_ref(), &s.domain, &s.controls, 0.5, &[-1.0], DEFAULT_MARGIN).unwrap();
        assert!((r.terms[0].generator + 1.0).abs() < 1e-12);
        assert_eq!(r.terms[0].sigma_term, 0.0);
        assert!(!r.condition6_holds);
        assert!(r.condition6_witnesses.is_empty());
    }

    #[test]
    fn off_boundary_point_is_rejected() {
        let s = stochastic();
        let e = evaluate_condition6(s.model.as_ref(), &s.domain, &s.controls, 0.5, &[0.9], DEFAULT_MARGIN);
        assert!(matches!(e, Err(Error::NotOnBoundary { .. })));
    }

    #[test]
    fn stochastic_scan_holds_everywhere_but_fs_fails_late_on_top() {
        let s = stochastic();
        let times: Vec<f64> = (1..=19).map(|k| k as f64 * 0.1).collect();
        let grid = BoundaryGrid::new(times, vec![vec![-1.0], vec![1.0]]);
        let r = scan_boundary(s.model.as_ref(), &s.domain, &s.controls, &grid).unwrap();
        assert!(r.condition6_everywhere);
        assert!(!r.fs_everywhere);
        for p in &r.points {
            if p.y[0] == 1.0 && p.t >= 1.0 {
                assert!(!p.fs_condition_holds, "t={}", p.t);
            }
        }
        assert!(r.to_table().contains("holds at all 38 sampled points"));
        let json = r.to_json().unwrap();
        assert!(json.contains("condition6_everywhere"));
    }

    #[test]
    fn deterministic_scan_reports_failures_below() {
        let s = builtin_scenario("example41_deterministic").unwrap();
        let grid = BoundaryGrid::for_domain(&s.domain, 20, 1).unwrap();
        let r = scan_boundary(s.model.as_ref(), &s.domain, &s.controls, &grid).unwrap();
        assert!(!r.condition6_everywhere);
        assert!(!r.all_pass());
        assert!(r.failures().any(|p| p.y[0] == -1.0 && p.t < 1.0));
        let c9 = r.condition9.as_ref().unwrap();
        assert!(c9.holds && c9.min_value == 1.0);
    }

    #[test]
    fn identity_noise_on_a_ball_holds_everywhere() {
        let m = FnModel::new("bm", 2, 2, 1).diffusion(|_, _, _, s| {
            s.fill(0.0);
            s[0] = 1.0;
            s[3] = 1.0;
        });
        let d = SpaceTimeDomain::new(SpaceDomain::ball(vec![0.0, 0.0], 1.0).unwrap(), 1.0).unwrap();
        let c = ControlSet::singleton(vec![0.0]).unwrap();
        let grid = BoundaryGrid::for_domain(&d, 5, 16).unwrap();
        let r = scan_boundary(&m, &d, &c, &grid).unwrap();
        assert!(r.condition6_everywhere);
        assert!(r.points.iter().all(|p| (p.terms[0].sigma_term - 1.0).abs() < 1e-9));
    }

    #[test]
    fn analytic_and_fd_paths_agree() {
        let m = FnModel::new("m", 2, 2, 1)
            .drift(|_, x, _, b| {
                b[0] = x[1];
                b[1] = -x[0] + 0.3;
            })
            .diffusion(|_, x, _, s| {
                s[0] = 1.0 + 0.5 * x[0];
                s[1] = 0.2;
                s[2] = -0.3;
                s[3] = 0.7;
            });
        let c = ControlSet::singleton(vec![0.0]).unwrap();
        let ball = SpaceDomain::ball(vec![0.1, -0.2], 0.8).unwrap();
        let an = SpaceTimeDomain::new(ball.clone(), 1.0).unwrap();
        let fd = SpaceTimeDomain::new(ball.with_grad_mode(GradMode::FiniteDifference), 1.0).unwrap();
        for y in an.space.boundary_samples(12).unwrap() {
            let a = evaluate_condition6(&m, &an, &c, 0.3, &y, DEFAULT_MARGIN).unwrap();
            let f = evaluate_condition6(&m, &fd, &c, 0.3, &y, DEFAULT_MARGIN).unwrap();
            assert!((a.terms[0].generator - f.terms[0].generator).abs() < 1e-4);
            assert!((a.terms[0].sigma_term - f.terms[0].sigma_term).abs() < 1e-8);
        }
    }

    #[test]
    fn box_corners_are_flagged() {
        let m = FnModel::new("bm", 2, 2, 1).diffusion(|_, _, _, s| {
            s.fill(0.0);
            s[0] = 1.0;
            s[3] = 1.0;
        });
        let d =
            SpaceTimeDomain::new(SpaceDomain::hyperrectangle(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(), 1.0).unwrap();
        let c = ControlSet::singleton(vec![0.0]).unwrap();
        let r = evaluate_condition6(&m, &d, &c, 0.0, &[1.0, 1.0], DEFAULT_MARGIN).unwrap();
        assert!(r.not_smooth);
        let r = evaluate_condition6(&m, &d, &c, 0.0, &[1.0, 0.5], DEFAULT_MARGIN).unwrap();
        assert!(!r.not_smooth);
    }

    proptest! {
        #[test]
        fn fs_implies_condition6(t in 0.0..2.0f64, top in any::<bool>(), margin in 0.0..0.5f64) {
            let s = stochastic();
            let y = if top { 1.0 } else { -1.0 };
            let r = evaluate_condition6(s.model.as_ref(), &s.domain, &s.controls, t, &[y], margin).unwrap();
            prop_assert!(!r.fs_condition_holds || r.condition6_holds);
        }

        #[test]
        fn sigma_term_is_rotation_invariant(theta in 0.0..std::f64::consts::TAU, k in 0usize..16) {
            let base = |x: &[f64], s: &mut [f64]| {
                s[0] = 1.0 + x[1] * x[1];
                s[1] = 0.4;
                s[2] = -0.2 * x[0];
                s[3] = 0.9;
            };
            let (c, sn) = (theta.cos(), theta.sin());
            let plain = FnModel::new("p", 2, 2, 1).diffusion(move |_, x, _, s| base(x, s));
            let rotated = FnModel::new("r", 2, 2, 1).diffusion(move |_, x, _, s| {
                let mut m = [0.0; 4];
                base(x, &mut m);
                s[0] = m[0] * c + m[1] * sn;
                s[1] = -m[0] * sn + m[1] * c;
                s[2] = m[2] * c + m[3] * sn;
                s[3] = -m[2] * sn + m[3] * c;
            });
            let d = SpaceTimeDomain::new(SpaceDomain::ball(vec![0.0, 0.0], 1.0).unwrap(), 1.0).unwrap();
            let ctl = ControlSet::singleton(vec![0.0]).unwrap();
            let y = d.space.boundary_samples(16).unwrap()[k].clone();
            let a = evaluate_condition6(&plain, &d, &ctl, 0.5, &y, DEFAULT_MARGIN).unwrap();
            let b = evaluate_condition6(&rotated, &d, &ctl, 0.5, &y, DEFAULT_MARGIN).unwrap();
            prop_assert!((a.terms[0].sigma_term - b.terms[0].sigma_term).abs() < 1e-12);
            prop_assert!((a.terms[0].generator - b.terms[0].generator).abs() < 1e-12);
        }
    }
}
