//! Explicit monotone finite differences for the Dirichlet HJB problem
//!
//! `V_t + min_a { b·DV + ½ tr(σσ' D²V) + ℓ } = 0` on `Q`, `V = g` on `∂*Q`.
//!
//! Drift terms are upwinded, second derivatives use central differences, and
//! coefficients are frozen at the later time of each step. The scheme is
//! monotone when `Δt (Σ a_ii/Δx_i² + Σ |b_i|/Δx_i) ≤ 1` at every node and
//! control, which is checked on every step.

use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{Axis, Provenance, ValueField};
use crate::geometry::{DomainShape, SpaceTimeDomain};
use crate::model::{covariance, generator_apply, terminal_derivs_or_fd, ControlSet, FeedbackTable, Policy, SdeModel};

const PAR_THRESHOLD: usize = 4096;
const CFL_SCAN_TIMES: usize = 1001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossTerms {
    /// Off-diagonal `σσ'` entries are rejected.
    DiagonalOnly,
    /// Seven-point cross stencil; monotone only for diagonally dominant `σσ'`.
    WideStencil,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdScheme {
    pub dx: Vec<f64>,
    /// `None` picks `cfl_safety` times the largest admissible step.
    pub dt: Option<f64>,
    pub cfl_safety: f64,
    pub cross: CrossTerms,
    /// Time nodes of the returned field and feedback table.
    pub output_time_nodes: usize,
}

impl FdScheme {
    pub fn new(dx: Vec<f64>) -> Self {
        FdScheme { dx, dt: None, cfl_safety: 0.9, cross: CrossTerms::DiagonalOnly, output_time_nodes: 201 }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn with_output_time_nodes(mut self, m: usize) -> Self {
        self.output_time_nodes = m;
        self
    }

    pub fn with_cross_terms(mut self, c: CrossTerms) -> Self {
        self.cross = c;
        self
    }
}

/// One backward step of the scheme on a fixed space grid.
pub struct FdSolver<'a> {
    model: &'a dyn SdeModel,
    controls: &'a ControlSet,
    axes: Vec<Axis>,
    strides: Vec<usize>,
    coords: Vec<f64>,
    boundary: Vec<bool>,
    interior: Vec<usize>,
    cross: CrossTerms,
}

struct Scratch {
    b: Vec<f64>,
    sig: Vec<f64>,
    cov: Vec<f64>,
}

impl<'a> FdSolver<'a> {
    pub fn new(
        model: &'a dyn SdeModel,
        domain: &SpaceTimeDomain,
        controls: &'a ControlSet,
        dx: &[f64],
        cross: CrossTerms,
    ) -> Result<Self> {
        let (lo, hi) = match domain.space.shape() {
            DomainShape::Interval { lo, hi } => (vec![*lo], vec![*hi]),
            DomainShape::Box { lo, hi } => (lo.clone(), hi.clone()),
            other => {
                return Err(Error::UnsupportedDomain {
                    shape: other.name().into(),
                    reason: "the finite-difference grid needs an interval or box".into(),
                })
            }
        };
        let n = lo.len();
        if model.dim_state() != n || dx.len() != n {
            return Err(Error::Dimension { what: "space steps", expected: n, got: dx.len() });
        }
        if controls.dim != model.dim_control() {
            return Err(Error::Dimension { what: "control set", expected: model.dim_control(), got: controls.dim });
        }
        let mut axes = Vec::with_capacity(n);
        for i in 0..n {
            if !(dx[i] > 0.0) {
                return Err(Error::invalid("dx", format!("axis {i} step must be positive")));
            }
            let cells = ((hi[i] - lo[i]) / dx[i]).round().max(2.0) as usize;
            axes.push(Axis::new(lo[i], hi[i], cells + 1)?);
        }
        let mut strides = vec![1; n];
        for i in (0..n.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * axes[i + 1].n;
        }
        let total: usize = axes.iter().map(|a| a.n).product();
        let mut coords = Vec::with_capacity(total * n);
        let mut boundary = Vec::with_capacity(total);
        let mut interior = Vec::new();
        for flat in 0..total {
            let mut on_edge = false;
            for i in 0..n {
                let k = (flat / strides[i]) % axes[i].n;
                coords.push(axes[i].node(k));
                on_edge |= k == 0 || k + 1 == axes[i].n;
            }
            boundary.push(on_edge);
            if !on_edge {
                interior.push(flat);
            }
        }
        Ok(FdSolver { model, controls, axes, strides, coords, boundary, interior, cross })
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.boundary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundary.is_empty()
    }

    pub fn node(&self, flat: usize) -> &[f64] {
        let n = self.axes.len();
        &self.coords[flat * n..(flat + 1) * n]
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        self.boundary[flat]
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    /// Flat index of the node displaced by `step` cells along `axis`.
    pub fn neighbor(&self, flat: usize, axis: usize, step: isize) -> usize {
        (flat as isize + step * self.strides[axis] as isize) as usize
    }

    fn scratch(&self) -> Scratch {
        let n = self.axes.len();
        let d = self.model.dim_noise();
        Scratch { b: vec![0.0; n], sig: vec![0.0; n * d], cov: vec![0.0; n * n] }
    }

    fn coefficients(&self, t: f64, x: &[f64], a: &[f64], s: &mut Scratch) -> f64 {
        let n = self.axes.len();
        let d = self.model.dim_noise();
        self.model.drift(t, x, a, &mut s.b);
        self.model.diffusion(t, x, a, &mut s.sig);
        covariance(&s.sig, n, d, &mut s.cov);
        (0..n)
            .map(|i| {
                let h = self.axes[i].spacing();
                s.cov[i * n + i] / (h * h) + s.b[i].abs() / h
            })
            .sum()
    }

    /// Largest `Σ a_ii/Δx² + Σ|b|/Δx` over interior nodes and controls at time `t`.
    pub fn cfl_rate(&self, t: f64) -> f64 {
        let mut s = self.scratch();
        let mut worst = 0.0f64;
        for &flat in &self.interior {
            let x = self.node(flat);
            for a in self.controls.points() {
                worst = worst.max(self.coefficients(t, x, a, &mut s));
            }
        }
        worst
    }

    fn update_node(&self, flat: usize, t_next: f64, dt: f64, next: &[f64], s: &mut Scratch) -> Result<(f64, u32)> {
        let n = self.axes.len();
        let x = self.node(flat);
        let v = next[flat];
        let mut best = f64::INFINITY;
        let mut arg = 0u32;
        for (ci, a) in self.controls.points().iter().enumerate() {
            let rate = self.coefficients(t_next, x, a, s);
            if dt * rate > 1.0 + 1e-12 {
                return Err(Error::Cfl { t: t_next, node: x.to_vec(), control: a.clone(), dt, dt_max: 1.0 / rate });
            }
            let mut l = 0.0;
            for i in 0..n {
                let h = self.axes[i].spacing();
                let up = next[self.neighbor(flat, i, 1)];
                let down = next[self.neighbor(flat, i, -1)];
                let bi = s.b[i];
                l += if bi > 0.0 { bi * (up - v) / h } else { bi * (v - down) / h };
                l += 0.5 * s.cov[i * n + i] * (up - 2.0 * v + down) / (h * h);
            }
            if n > 1 {
                l += self.cross_term(flat, x, a, next, s)?;
            }
            let total = l + self.model.running_cost(t_next, x, a);
            if total < best {
                best = total;
                arg = ci as u32;
            }
        }
        Ok((v + dt * best, arg))
    }

    fn cross_term(&self, flat: usize, x: &[f64], a: &[f64], next: &[f64], s: &Scratch) -> Result<f64> {
        let n = self.axes.len();
        let scale = 1.0 + (0..n).map(|i| s.cov[i * n + i].abs()).fold(0.0, f64::max);
        let mut sum = 0.0;
        for i in 0..n {
            let hi = self.axes[i].spacing();
            let mut dominance = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let aij = s.cov[i * n + j];
                if aij.abs() <= 1e-12 * scale {
                    continue;
                }
                if self.cross == CrossTerms::DiagonalOnly {
                    return Err(Error::invalid(
                        "scheme",
                        format!("σσ' has off-diagonal entry {aij:e} at x={x:?}, a={a:?}; use the wide stencil"),
                    ));
                }
                dominance += aij.abs() / (hi * self.axes[j].spacing());
                if j < i {
                    continue;
                }
                let hj = self.axes[j].spacing();
                let sgn: isize = if aij > 0.0 { 1 } else { -1 };
                let v = |di: isize, dj: isize| next[self.neighbor(self.neighbor(flat, i, di), j, dj)];
                let mixed = v(1, sgn) + v(-1, -sgn) - v(1, 0) - v(-1, 0) - v(0, sgn) - v(0, -sgn) + 2.0 * v(0, 0);
                sum += aij.abs() * mixed / (2.0 * hi * hj);
            }
            if dominance > s.cov[i * n + i] / (hi * hi) + 1e-12 * scale {
                return Err(Error::invalid(
                    "scheme",
                    format!("wide stencil is not monotone at x={x:?}: σσ' is not diagonally dominant"),
                ));
            }
        }
        Ok(sum)
    }

    /// Level at `t_next − dt` from the level at `t_next`; lateral nodes get `g`.
    pub fn step(&self, t_next: f64, dt: f64, next: &[f64], out: &mut [f64], argmin: &mut [u32]) -> Result<()> {
        let t = t_next - dt;
        for flat in 0..self.len() {
            if self.boundary[flat] {
                out[flat] = self.model.terminal_cost(t, self.node(flat));
                argmin[flat] = 0;
            }
        }
        if self.interior.len() >= PAR_THRESHOLD {
            let results: Vec<Result<(f64, u32)>> = self
                .interior
                .par_iter()
                .map_init(|| self.scratch(), |s, &flat| self.update_node(flat, t_next, dt, next, s))
                .collect();
            for (&flat, r) in self.interior.iter().zip(results) {
                let (v, a) = r?;
                out[flat] = v;
                argmin[flat] = a;
            }
        } else {
            let mut s = self.scratch();
            for &flat in &self.interior {
                let (v, a) = self.update_node(flat, t_next, dt, next, &mut s)?;
                out[flat] = v;
                argmin[flat] = a;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub field: ValueField,
    pub policy: Policy,
    pub dt: f64,
    pub steps: usize,
    pub dx: Vec<f64>,
}

/// Backward march from `g(T,·)` with the argmin control recorded as a feedback table.
pub fn solve_hjb(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    controls: &ControlSet,
    scheme: &FdScheme,
) -> Result<HjbSolution> {
    let solver = FdSolver::new(model, domain, controls, &scheme.dx, scheme.cross)?;
    let horizon = domain.horizon;
    let m = scheme.output_time_nodes;
    if m < 2 {
        return Err(Error::invalid("output_time_nodes", "need at least 2"));
    }
    let dt_target = match scheme.dt {
        Some(dt) if dt > 0.0 && dt <= horizon => dt,
        Some(dt) => return Err(Error::invalid("dt", format!("need 0 < dt ≤ T, got {dt}"))),
        None => {
            if !(scheme.cfl_safety > 0.0 && scheme.cfl_safety <= 1.0) {
                return Err(Error::invalid("cfl_safety", "must lie in (0, 1]"));
            }
            let worst = (0..CFL_SCAN_TIMES)
                .map(|k| solver.cfl_rate(horizon * k as f64 / (CFL_SCAN_TIMES - 1) as f64))
                .fold(0.0, f64::max);
            if worst > 0.0 {
                (scheme.cfl_safety / worst).min(horizon)
            } else {
                horizon
            }
        }
    };
    let (m, per_output) = if scheme.dt.is_some() {
        // keep the requested step; thin the output grid to a divisor of the step count
        let steps = ((horizon / dt_target) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let intervals = (1..=(m - 1).min(steps)).rev().find(|&k| steps.is_multiple_of(k)).unwrap_or(1);
        (intervals + 1, steps / intervals)
    } else {
        (m, ((horizon / dt_target) / (m - 1) as f64 * (1.0 - 1e-12)).ceil().max(1.0) as usize)
    };
    let steps = per_output * (m - 1);
    let dt = horizon / steps as f64;

    let len = solver.len();
    let mut level: Vec<f64> = (0..len).map(|f| model.terminal_cost(horizon, solver.node(f))).collect();
    let mut scratch = vec![0.0; len];
    let mut argmin = vec![0u32; len];
    let mut values = vec![0.0; m * len];
    let mut table = vec![0u32; m * len];
    values[(m - 1) * len..].copy_from_slice(&level);

    for k in (0..steps).rev() {
        let t_next = horizon * (k + 1) as f64 / steps as f64;
        solver.step(t_next, dt, &level, &mut scratch, &mut argmin)?;
        std::mem::swap(&mut level, &mut scratch);
        if k % per_output == 0 {
            let j = k / per_output;
            values[j * len..(j + 1) * len].copy_from_slice(&level);
            table[j * len..(j + 1) * len].copy_from_slice(&argmin);
            if j == m - 2 {
                table[(m - 1) * len..].copy_from_slice(&argmin);
            }
        }
    }

    let time = Axis::new(0.0, horizon, m)?;
    let space = solver.axes().to_vec();
    let field = ValueField::new(time, space.clone(), values, vec![0.0; m * len], Provenance::FiniteDifference)?;
    let policy = Policy::Feedback(Arc::new(FeedbackTable {
        id: "hjb_feedback".into(),
        time,
        space: space.clone(),
        controls: controls.points().to_vec(),
        table,
    }));
    Ok(HjbSolution { field, policy, dt, steps, dx: space.iter().map(Axis::spacing).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub t: f64,
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Condition9Report {
    pub holds: bool,
    pub min_value: f64,
    pub min_at: (f64, Vec<f64>),
    pub nodes_checked: usize,
    pub violations: Vec<Violation>,
    pub tolerance: f64,
    /// Derivatives of `g` came from finite differences at some node.
    pub used_finite_differences: bool,
}

/// Derivatives of a field at an interior node by central differences.
fn field_derivs(f: &ValueField, ti: usize, xi: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = xi.len();
    let at = |ti: usize, xi: &[usize]| f.value_at(ti, xi);
    let v0 = at(ti, xi);
    let ht = f.time.spacing();
    let ut = if ti == 0 {
        (at(1, xi) - v0) / ht
    } else if ti + 1 == f.time.n {
        (v0 - at(ti - 1, xi)) / ht
    } else {
        (at(ti + 1, xi) - at(ti - 1, xi)) / (2.0 * ht)
    };
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    let mut idx = xi.to_vec();
    for i in 0..n {
        let h = f.space[i].spacing();
        idx[i] = xi[i] + 1;
        let up = at(ti, &idx);
        idx[i] = xi[i] - 1;
        let down = at(ti, &idx);
        idx[i] = xi[i];
        grad[i] = (up - down) / (2.0 * h);
        hess[i * n + i] = (up - 2.0 * v0 + down) / (h * h);
        for j in (i + 1)..n {
            let hj = f.space[j].spacing();
            let mut corner = |si: isize, sj: isize| {
                idx[i] = (xi[i] as isize + si) as usize;
                idx[j] = (xi[j] as isize + sj) as usize;
                let v = at(ti, &idx);
                idx[i] = xi[i];
                idx[j] = xi[j];
                v
            };
            let c = (corner(1, 1) - corner(1, -1) - corner(-1, 1) + corner(-1, -1)) / (4.0 * h * hj);
            hess[i * n + j] = c;
            hess[j * n + i] = c;
        }
    }
    (ut, grad, hess)
}

/// `min_a { G^a(u + g) + ℓ } ≥ −tolerance` at every grid node.
///
/// With `u = None` (`u ≡ 0`) every node of `grid` is checked. With a field,
/// its own grid is used and only nodes with a full space stencil are checked.
pub fn check_condition9(
    model: &dyn SdeModel,
    controls: &ControlSet,
    u: Option<&ValueField>,
    grid: &crate::value::GridSpec,
    fd_step: f64,
    tolerance: f64,
) -> Result<Condition9Report> {
    let n = model.dim_state();
    let (time, space) = match u {
        Some(f) => (f.time, f.space.clone()),
        None => (grid.time, grid.space.clone()),
    };
    if space.len() != n {
        return Err(Error::Dimension { what: "condition grid", expected: n, got: space.len() });
    }
    let total = time.n * space.iter().map(|a| a.n).product::<usize>();
    let mut report = Condition9Report {
        holds: true,
        min_value: f64::INFINITY,
        min_at: (f64::NAN, vec![]),
        nodes_checked: 0,
        violations: Vec::new(),
        tolerance,
        used_finite_differences: false,
    };
    for flat in 0..total {
        let mut rest = flat;
        let mut xi = vec![0; n];
        for k in (0..n).rev() {
            xi[k] = rest % space[k].n;
            rest /= space[k].n;
        }
        let ti = rest;
        if u.is_some() && xi.iter().zip(&space).any(|(&i, a)| i == 0 || i + 1 == a.n) {
            continue;
        }
        let t = time.node(ti);
        let x: Vec<f64> = xi.iter().zip(&space).map(|(&i, a)| a.node(i)).collect();
        let (gd, fd) = terminal_derivs_or_fd(model, t, &x, fd_step);
        report.used_finite_differences |= fd;
        let (mut phi_t, mut grad, mut hess) = (gd.dt, gd.grad, gd.hess);
        if let Some(f) = u {
            let (ut, ug, uh) = field_derivs(f, ti, &xi);
            phi_t += ut;
            grad.iter_mut().zip(&ug).for_each(|(a, b)| *a += b);
            hess.iter_mut().zip(&uh).for_each(|(a, b)| *a += b);
        }
        let mut best = f64::INFINITY;
        for a in controls.points() {
            let v = generator_apply(model, a, t, &x, &grad, &hess, phi_t)? + model.running_cost(t, &x, a);
            best = best.min(v);
        }
        report.nodes_checked += 1;
        if best < report.min_value {
            report.min_value = best;
            report.min_at = (t, x.clone());
        }
        if best < -tolerance {
            report.holds = false;
            report.violations.push(Violation { t, x, value: best });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SpaceDomain;
    use crate::model::{builtin_scenario, FnModel};
    use crate::value::GridSpec;

    fn unit(lo: f64, hi: f64, t: f64) -> SpaceTimeDomain {
        SpaceTimeDomain::new(SpaceDomain::interval(lo, hi).unwrap(), t).unwrap()
    }

    fn single() -> ControlSet {
        ControlSet::singleton(vec![0.0]).unwrap()
    }

    #[test]
    fn pure_running_cost_gives_time_to_go() {
        let m = FnModel::new("clock", 1, 1, 1).running_cost(|_, _, _| 1.0);
        let d = unit(-1.0, 1.0, 2.0);
        let sol = solve_hjb(&m, &d, &single(), &FdScheme::new(vec![0.1]).with_dt(0.01)).unwrap();
        let f = &sol.field;
        for ti in 0..f.time.n {
            for xi in 1..f.space[0].n - 1 {
                let t = f.time.node(ti);
                assert!((f.value_at(ti, &[xi]) - (2.0 - t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transport_to_the_right_boundary() {
        let m = FnModel::new("transport", 1, 1, 1).drift(|_, _, _, b| b[0] = 1.0).running_cost(|_, _, _| 1.0);
        let d = unit(0.0, 1.0, 1.0);
        let sol = solve_hjb(&m, &d, &single(), &FdScheme::new(vec![0.01])).unwrap();
        // the inflow node x = 0 is held at g = 0 and is not covered by the formula
        let err = (0..sol.field.len())
            .map(|i| sol.field.coords(i))
            .enumerate()
            .filter(|(_, (_, x))| x[0] > 0.0 && x[0] < 1.0)
            .map(|(i, (t, x))| (sol.field.values[i] - (1.0 - t).min(1.0 - x[0])).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.1, "{err}");
    }

    #[test]
    fn cfl_violation_names_the_node() {
        let m = FnModel::new("fast", 1, 1, 1).drift(|_, _, _, b| b[0] = 10.0);
        let d = unit(0.0, 1.0, 1.0);
        match solve_hjb(&m, &d, &single(), &FdScheme::new(vec![0.1]).with_dt(0.1)) {
            Err(Error::Cfl { dt_max, node, .. }) => {
                assert!((dt_max - 0.01).abs() < 1e-12);
                assert_eq!(node.len(), 1);
            }
            other => panic!("expected CFL error, got {:?}", other.map(|s| s.dt)),
        }
    }

    #[test]
    fn non_box_domain_is_rejected() {
        let m = FnModel::new("m", 2, 1, 1);
        let d = SpaceTimeDomain::new(SpaceDomain::ball(vec![0.0, 0.0], 1.0).unwrap(), 1.0).unwrap();
        let c = single();
        assert!(matches!(
            FdSolver::new(&m, &d, &c, &[0.1, 0.1], CrossTerms::DiagonalOnly),
            Err(Error::UnsupportedDomain { .. })
        ));
    }

    #[test]
    fn scheme_is_monotone_under_neighbor_perturbation() {
        use rand::{Rng, SeedableRng};
        let s = builtin_scenario("example41_stochastic").unwrap();
        let c = single();
        let solver = FdSolver::new(s.model.as_ref(), &s.domain, &c, &[0.05], CrossTerms::DiagonalOnly).unwrap();
        let dt = 0.9 / solver.cfl_rate(2.0).max(solver.cfl_rate(1.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let base: Vec<f64> = (0..solver.len()).map(|_| rng.random::<f64>()).collect();
        let mut out0 = vec![0.0; solver.len()];
        let mut out1 = vec![0.0; solver.len()];
        let mut arg = vec![0; solver.len()];
        for _ in 0..200 {
            let t_next = dt + rng.random::<f64>() * (2.0 - dt);
            let flat = solver.interior()[rng.random_range(0..solver.interior().len())];
            let which = rng.random_range(0..3);
            let target = [flat, solver.neighbor(flat, 0, 1), solver.neighbor(flat, 0, -1)][which];
            let mut bumped = base.clone();
            bumped[target] += rng.random::<f64>();
            solver.step(t_next, dt, &base, &mut out0, &mut arg).unwrap();
            solver.step(t_next, dt, &bumped, &mut out1, &mut arg).unwrap();
            assert!(out1[flat] >= out0[flat] - 1e-15);
        }
    }

    #[test]
    fn singleton_scheme_is_linear_in_running_cost() {
        let d = unit(-1.0, 1.0, 1.0);
        let mk = |w1: f64, w2: f64| {
            FnModel::new("lin", 1, 1, 1)
                .drift(|t, x, _, b| b[0] = 0.5 * x[0] - t)
                .diffusion(|_, x, _, s| s[0] = 0.3 + 0.2 * x[0] * x[0])
                .running_cost(move |t, x, _| w1 * (1.0 + x[0] * x[0]) + w2 * (t * x[0]).sin())
        };
        let scheme = FdScheme::new(vec![0.05]).with_dt(1e-3).with_output_time_nodes(11);
        let c = single();
        let f1 = solve_hjb(&mk(1.0, 0.0), &d, &c, &scheme).unwrap().field;
        let f2 = solve_hjb(&mk(0.0, 1.0), &d, &c, &scheme).unwrap().field;
        let f = solve_hjb(&mk(2.0, -3.0), &d, &c, &scheme).unwrap().field;
        for i in 0..f.len() {
            assert!((f.values[i] - (2.0 * f1.values[i] - 3.0 * f2.values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn feedback_controls_come_from_the_set() {
        let m = FnModel::new("steer", 1, 1, 1)
            .drift(|_, _, a, b| b[0] = a[0])
            .diffusion(|_, _, _, s| s[0] = 0.3)
            .running_cost(|_, _, a| 1.0 + 0.1 * a[0] * a[0]);
        let d = unit(-1.0, 1.0, 1.0);
        let c = ControlSet::box_grid(&[-1.0], &[1.0], &[5]).unwrap();
        let sol = solve_hjb(&m, &d, &c, &FdScheme::new(vec![0.05]).with_output_time_nodes(21)).unwrap();
        sol.policy.validate(&c).unwrap();
        // steering toward the nearer boundary shortens the time cost
        assert_eq!(sol.policy.control_at(0.0, &[0.6]), &[1.0]);
        assert_eq!(sol.policy.control_at(0.0, &[-0.6]), &[-1.0]);
    }

    #[test]
    fn wide_stencil_handles_correlated_noise() {
        let m = FnModel::new("corr", 2, 2, 1)
            .diffusion(|_, _, _, s| {
                s.copy_from_slice(&[0.5, 0.2, 0.2, 0.5]);
            })
            .running_cost(|_, _, _| 1.0);
        let d =
            SpaceTimeDomain::new(SpaceDomain::hyperrectangle(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(), 0.5).unwrap();
        let c = single();
        let diag = FdScheme::new(vec![0.1, 0.1]).with_output_time_nodes(3);
        assert!(solve_hjb(&m, &d, &c, &diag).is_err());
        let wide = diag.with_cross_terms(CrossTerms::WideStencil);
        let sol = solve_hjb(&m, &d, &c, &wide).unwrap();
        let centre = sol.field.interpolate(0.0, &[0.0, 0.0]);
        assert!(centre > 0.0 && centre <= 0.5 + 1e-12);
    }

    #[test]
    fn condition9_cases() {
        let grid = GridSpec::new(Axis::new(0.0, 2.0, 11).unwrap(), vec![Axis::new(-1.0, 1.0, 11).unwrap()]).unwrap();
        let c = single();
        let m = FnModel::new("clock", 1, 1, 1).running_cost(|_, _, _| 1.0);
        let r = check_condition9(&m, &c, None, &grid, 1e-5, 1e-9).unwrap();
        assert!(r.holds);
        assert_eq!(r.min_value, 1.0);

        let m = FnModel::new("bad", 1, 1, 1)
            .drift(|_, _, _, b| b[0] = -2.0)
            .running_cost(|_, _, _| 1.0)
            .terminal_cost(|_, x| x[0]);
        let r = check_condition9(&m, &c, None, &grid, 1e-5, 1e-9).unwrap();
        assert!(!r.holds);
        assert!((r.min_value + 1.0).abs() < 1e-8);
        assert_eq!(r.violations.len(), r.nodes_checked);
        assert!(r.used_finite_differences);

        for name in ["example41_deterministic", "example41_stochastic"] {
            let s = builtin_scenario(name).unwrap();
            let r = check_condition9(s.model.as_ref(), &s.controls, None, &grid, 1e-5, 1e-9).unwrap();
            assert!(r.holds && r.min_value == 1.0);
        }
    }

    #[test]
    fn condition9_with_field_candidate() {
        // u = 2 − t makes G(u) + ℓ = −1 + 1 = 0 everywhere
        let m = FnModel::new("clock", 1, 1, 1).running_cost(|_, _, _| 1.0);
        let time = Axis::new(0.0, 2.0, 21).unwrap();
        let space = vec![Axis::new(-1.0, 1.0, 21).unwrap()];
        let values: Vec<f64> = time.nodes().iter().flat_map(|t| vec![2.0 - t; 21]).collect();
        let u = ValueField::new(time, space.clone(), values, vec![0.0; 441], Provenance::FiniteDifference).unwrap();
        let grid = GridSpec::new(time, space).unwrap();
        let r = check_condition9(&m, &single(), Some(&u), &grid, 1e-5, 1e-9).unwrap();
        assert!(r.holds);
        assert!(r.min_value.abs() < 1e-9);
        assert_eq!(r.nodes_checked, 21 * 19);
    }
}
