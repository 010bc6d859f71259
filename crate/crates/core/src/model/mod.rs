//! Controlled diffusions, costs, control sets and policies.
//!
//! A model provides `b(t,x,a)`, `σ(t,x,a)`, the running cost `ℓ(t,x,a)` and the
//! terminal cost `g(t,x)`. Evaluations must be pure: simulation workers call
//! them concurrently and CRN comparisons rely on bitwise-repeatable results.
//!
//! The infimum over all progressively measurable controls is not computable.
//! Everything downstream works with explicit policy families: constant
//! controls from a finite [`ControlSet`] and Markov feedback tables (for
//! example the argmin table produced by the HJB solver).

pub mod expr;
pub mod scenarios;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::Axis;

pub use scenarios::{builtin_scenario, Example41, Scenario, ScenarioName};

/// Time derivative, gradient and Hessian (row-major) of the terminal cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostDerivs {
    pub dt: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl CostDerivs {
    pub fn zero(n: usize) -> Self {
        CostDerivs { dt: 0.0, grad: vec![0.0; n], hess: vec![0.0; n * n] }
    }
}

pub trait SdeModel: Send + Sync {
    fn name(&self) -> &str {
        "model"
    }
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;
    fn dim_control(&self) -> usize;
    fn drift(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    /// Writes `σ(t,x,a)` row-major (`dim_state × dim_noise`) into `out`.
    fn diffusion(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn running_cost(&self, t: f64, x: &[f64], a: &[f64]) -> f64;
    fn terminal_cost(&self, t: f64, x: &[f64]) -> f64;
    /// Analytic `(g_t, D_x g, D_x² g)` if known.
    fn terminal_cost_derivs(&self, _t: f64, _x: &[f64]) -> Option<CostDerivs> {
        None
    }
    /// True when `σ ≡ 0`; lets estimators integrate a single path.
    fn is_deterministic(&self) -> bool {
        false
    }
}

pub type VecFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type TerminalDerivFn = Arc<dyn Fn(f64, &[f64]) -> CostDerivs + Send + Sync>;

/// Closure-backed model, mostly for tests and programmatic use.
#[derive(Clone)]
pub struct FnModel {
    name: String,
    n: usize,
    d: usize,
    k: usize,
    drift: Option<VecFn>,
    diffusion: Option<VecFn>,
    running: Option<ScalarFn>,
    terminal: Option<TerminalFn>,
    terminal_derivs: Option<TerminalDerivFn>,
}

impl FnModel {
    /// Zero drift, zero diffusion, zero costs.
    pub fn new(name: impl Into<String>, dim_state: usize, dim_noise: usize, dim_control: usize) -> Self {
        FnModel {
            name: name.into(),
            n: dim_state,
            d: dim_noise,
            k: dim_control,
            drift: None,
            diffusion: None,
            running: None,
            terminal: None,
            terminal_derivs: None,
        }
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn diffusion(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }

    pub fn running_cost(mut self, f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.running = Some(Arc::new(f));
        self
    }

    /// Sets `g`; analytic derivatives are dropped unless given again afterwards.
    pub fn terminal_cost(mut self, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Some(Arc::new(f));
        self.terminal_derivs = None;
        self
    }

    pub fn terminal_cost_derivs(mut self, f: impl Fn(f64, &[f64]) -> CostDerivs + Send + Sync + 'static) -> Self {
        self.terminal_derivs = Some(Arc::new(f));
        self
    }

    pub fn into_arc(self) -> Arc<dyn SdeModel> {
        Arc::new(self)
    }
}

impl SdeModel for FnModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim_state(&self) -> usize {
        self.n
    }
    fn dim_noise(&self) -> usize {
        self.d
    }
    fn dim_control(&self) -> usize {
        self.k
    }
    fn drift(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        match &self.drift {
            Some(f) => f(t, x, a, out),
            None => out.fill(0.0),
        }
    }
    fn diffusion(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        match &self.diffusion {
            Some(f) => f(t, x, a, out),
            None => out.fill(0.0),
        }
    }
    fn running_cost(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        self.running.as_ref().map_or(0.0, |f| f(t, x, a))
    }
    fn terminal_cost(&self, t: f64, x: &[f64]) -> f64 {
        self.terminal.as_ref().map_or(0.0, |f| f(t, x))
    }
    fn terminal_cost_derivs(&self, t: f64, x: &[f64]) -> Option<CostDerivs> {
        match (&self.terminal, &self.terminal_derivs) {
            (_, Some(f)) => Some(f(t, x)),
            (None, None) => Some(CostDerivs::zero(self.n)),
            (Some(_), None) => None,
        }
    }
    fn is_deterministic(&self) -> bool {
        self.diffusion.is_none()
    }
}

/// `σσ'` from row-major `σ` (`n × d`), written row-major `n × n`.
pub fn covariance(sigma: &[f64], n: usize, d: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..d {
                s += sigma[i * d + k] * sigma[j * d + k];
            }
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
}

/// `G^a φ = φ_t + b·Dφ + ½ tr(σσ' D²φ)` with caller-supplied derivatives of `φ`.
#[allow(clippy::too_many_arguments)]
pub fn generator_apply(
    model: &dyn SdeModel,
    a: &[f64],
    t: f64,
    x: &[f64],
    grad: &[f64],
    hess: &[f64],
    phi_t: f64,
) -> Result<f64> {
    let n = model.dim_state();
    let d = model.dim_noise();
    let check = |what, expected: usize, got: usize| {
        if expected != got {
            Err(Error::Dimension { what, expected, got })
        } else {
            Ok(())
        }
    };
    check("state", n, x.len())?;
    check("control", model.dim_control(), a.len())?;
    check("gradient", n, grad.len())?;
    check("hessian", n * n, hess.len())?;

    let mut b = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    model.drift(t, x, a, &mut b);
    model.diffusion(t, x, a, &mut sigma);
    Ok(phi_t + drift_dot(&b, grad) + half_trace(&sigma, n, d, hess))
}

fn drift_dot(b: &[f64], grad: &[f64]) -> f64 {
    b.iter().zip(grad).map(|(u, v)| u * v).sum()
}

/// `½ tr(σσ' H)` without forming `σσ'`.
pub(crate) fn half_trace(sigma: &[f64], n: usize, d: usize, hess: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let h = hess[i * n + j];
            if h == 0.0 {
                continue;
            }
            let mut c = 0.0;
            for k in 0..d {
                c += sigma[i * d + k] * sigma[j * d + k];
            }
            s += c * h;
        }
    }
    0.5 * s
}

/// Derivatives of `g`, falling back to central differences with step `h`.
/// The flag is true when the fallback was used.
pub fn terminal_derivs_or_fd(model: &dyn SdeModel, t: f64, x: &[f64], h: f64) -> (CostDerivs, bool) {
    if let Some(d) = model.terminal_cost_derivs(t, x) {
        return (d, false);
    }
    let n = x.len();
    let g = |t: f64, x: &[f64]| model.terminal_cost(t, x);
    let g0 = g(t, x);
    let dt = (g(t + h, x) - g(t - h, x)) / (2.0 * h);
    let mut p = x.to_vec();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    for i in 0..n {
        p[i] = x[i] + h;
        let fp = g(t, &p);
        p[i] = x[i] - h;
        let fm = g(t, &p);
        p[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
        hess[i * n + i] = (fp - 2.0 * g0 + fm) / (h * h);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut at = |si: f64, sj: f64| {
                p[i] = x[i] + si * h;
                p[j] = x[j] + sj * h;
                let v = g(t, &p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h);
            hess[i * n + j] = v;
            hess[j * n + i] = v;
        }
    }
    (CostDerivs { dt, grad, hess }, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftedCost {
    pub value: f64,
    /// `g` derivatives came from finite differences; accuracy is `O(h_fd²)` at best.
    pub used_finite_differences: bool,
}

/// `ℓ̃ = ℓ + G^a g`, the running cost of the equivalent problem with zero terminal cost.
pub fn shifted_running_cost(model: &dyn SdeModel, t: f64, x: &[f64], a: &[f64], fd_step: f64) -> Result<ShiftedCost> {
    let (d, used_fd) = terminal_derivs_or_fd(model, t, x, fd_step);
    let gen = generator_apply(model, a, t, x, &d.grad, &d.hess, d.dt)?;
    Ok(ShiftedCost { value: model.running_cost(t, x, a) + gen, used_finite_differences: used_fd })
}

/// Same dynamics with `ℓ` replaced by `ℓ + G^a g` and `g ≡ 0`.
pub struct ShiftedCostModel<'a> {
    inner: &'a dyn SdeModel,
    fd_step: f64,
}

impl<'a> ShiftedCostModel<'a> {
    pub fn new(inner: &'a dyn SdeModel, fd_step: f64) -> Self {
        ShiftedCostModel { inner, fd_step }
    }
}

impl SdeModel for ShiftedCostModel<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn dim_state(&self) -> usize {
        self.inner.dim_state()
    }
    fn dim_noise(&self) -> usize {
        self.inner.dim_noise()
    }
    fn dim_control(&self) -> usize {
        self.inner.dim_control()
    }
    fn drift(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        self.inner.drift(t, x, a, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        self.inner.diffusion(t, x, a, out)
    }
    fn running_cost(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        shifted_running_cost(self.inner, t, x, a, self.fd_step).map_or(f64::NAN, |s| s.value)
    }
    fn terminal_cost(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost_derivs(&self, _t: f64, x: &[f64]) -> Option<CostDerivs> {
        Some(CostDerivs::zero(x.len()))
    }
    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSetKind {
    Singleton,
    FiniteGrid,
    BoxGrid,
}

/// Finite stand-in for the compact control set `A`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSet {
    pub kind: ControlSetKind,
    pub dim: usize,
    points: Vec<Vec<f64>>,
}

impl ControlSet {
    pub fn singleton(a: Vec<f64>) -> Result<Self> {
        Self::build(ControlSetKind::Singleton, vec![a])
    }

    pub fn finite(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::build(ControlSetKind::FiniteGrid, points)
    }

    /// Tensor grid over `[lo, hi]` with `resolution[i] ≥ 1` points per axis
    /// (a single point sits at the midpoint).
    pub fn box_grid(lo: &[f64], hi: &[f64], resolution: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != resolution.len() || lo.is_empty() {
            return Err(Error::ControlSet("lo, hi, resolution must have equal nonzero length".into()));
        }
        if resolution.contains(&0) || lo.iter().zip(hi).any(|(l, h)| l > h) {
            return Err(Error::ControlSet("need lo ≤ hi and resolution ≥ 1 per axis".into()));
        }
        let axis = |i: usize, j: usize| {
            if resolution[i] == 1 {
                0.5 * (lo[i] + hi[i])
            } else {
                lo[i] + (hi[i] - lo[i]) * j as f64 / (resolution[i] - 1) as f64
            }
        };
        let total: usize = resolution.iter().product();
        let points = (0..total)
            .map(|mut idx| {
                (0..lo.len())
                    .map(|i| {
                        let j = idx % resolution[i];
                        idx /= resolution[i];
                        axis(i, j)
                    })
                    .collect()
            })
            .collect();
        Self::build(ControlSetKind::BoxGrid, points)
    }

    fn build(kind: ControlSetKind, points: Vec<Vec<f64>>) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::ControlSet("empty control set".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::ControlSet("controls must have positive dimension".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::ControlSet(format!("point {i} has dimension {} != {dim}", p.len())));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::ControlSet(format!("point {i} is not finite: {p:?}")));
            }
            if points[..i].contains(p) {
                return Err(Error::ControlSet(format!("duplicate control point {p:?}")));
            }
        }
        Ok(ControlSet { kind, dim, points })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        self.points.iter().any(|p| p.as_slice() == a)
    }

    /// One constant policy per control point.
    pub fn constant_policies(&self) -> Vec<Policy> {
        self.points.iter().enumerate().map(|(i, p)| Policy::constant(format!("const[{i}]"), p.clone())).collect()
    }
}

/// Markov feedback table: nearest time node × nearest space node → control index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackTable {
    pub id: String,
    pub time: Axis,
    pub space: Vec<Axis>,
    pub controls: Vec<Vec<f64>>,
    /// Time-major, then space axes row-major (last axis fastest).
    pub table: Vec<u32>,
}

impl FeedbackTable {
    pub fn lookup(&self, t: f64, x: &[f64]) -> &[f64] {
        let mut idx = self.time.nearest(t);
        for (ax, &xi) in self.space.iter().zip(x) {
            idx = idx * ax.n + ax.nearest(xi);
        }
        &self.controls[self.table[idx] as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Constant { id: String, control: Vec<f64> },
    Feedback(Arc<FeedbackTable>),
}

impl Policy {
    pub fn constant(id: impl Into<String>, control: Vec<f64>) -> Self {
        Policy::Constant { id: id.into(), control }
    }

    pub fn id(&self) -> &str {
        match self {
            Policy::Constant { id, .. } => id,
            Policy::Feedback(t) => &t.id,
        }
    }

    #[inline]
    pub fn control_at(&self, t: f64, x: &[f64]) -> &[f64] {
        match self {
            Policy::Constant { control, .. } => control,
            Policy::Feedback(table) => table.lookup(t, x),
        }
    }

    /// Checks that every control the policy can emit belongs to `set`.
    pub fn validate(&self, set: &ControlSet) -> Result<()> {
        let ok = match self {
            Policy::Constant { control, .. } => set.contains(control),
            Policy::Feedback(t) => {
                t.controls.iter().all(|c| set.contains(c)) && t.table.iter().all(|&i| (i as usize) < t.controls.len())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ControlSet(format!("policy `{}` emits controls outside the set", self.id())))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRegion {
    pub t: (f64, f64),
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Empirical constants for the Lipschitz and growth conditions on `b, σ, ℓ, g`.
///
/// Sampling can only exhibit violations, never certify the conditions; the
/// numbers are lower bounds on the true constants over the probed region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub advisory: &'static str,
    pub sample_count: usize,
    pub lipschitz_drift: f64,
    pub lipschitz_diffusion: f64,
    pub lipschitz_running_cost: f64,
    pub lipschitz_terminal_cost: f64,
    /// `max (‖b‖ + ‖σ‖) / (1 + ‖x‖)`
    pub growth_dynamics: f64,
    /// `max (|ℓ| + |g|) / (1 + ‖x‖²)`
    pub growth_costs: f64,
}

impl AssumptionReport {
    pub fn lipschitz_constant(&self) -> f64 {
        self.lipschitz_drift + self.lipschitz_diffusion
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|u| u * u).sum::<f64>().sqrt()
}

fn diff_norm(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn assumption_probe(
    model: &dyn SdeModel,
    controls: &ControlSet,
    region: &ProbeRegion,
    sample_count: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if sample_count < 2 {
        return Err(Error::invalid("sample_count", "need at least 2 samples"));
    }
    let n = model.dim_state();
    let d = model.dim_noise();
    if region.lo.len() != n || region.hi.len() != n {
        return Err(Error::Dimension { what: "probe region", expected: n, got: region.lo.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_x = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|i| region.lo[i] + (region.hi[i] - region.lo[i]) * rng.random::<f64>()).collect()
    };
    let (mut b1, mut b2) = (vec![0.0; n], vec![0.0; n]);
    let (mut s1, mut s2) = (vec![0.0; n * d], vec![0.0; n * d]);
    let mut rep = AssumptionReport {
        advisory: "sampled estimate only; cannot certify Lipschitz or growth bounds",
        sample_count,
        lipschitz_drift: 0.0,
        lipschitz_diffusion: 0.0,
        lipschitz_running_cost: 0.0,
        lipschitz_terminal_cost: 0.0,
        growth_dynamics: 0.0,
        growth_costs: 0.0,
    };
    for _ in 0..sample_count {
        let t = region.t.0 + (region.t.1 - region.t.0) * rng.random::<f64>();
        let a = &controls.points()[rng.random_range(0..controls.len())];
        let x1 = sample_x(&mut rng);
        let x2 = sample_x(&mut rng);
        let dx = diff_norm(&x1, &x2);
        model.drift(t, &x1, a, &mut b1);
        model.drift(t, &x2, a, &mut b2);
        model.diffusion(t, &x1, a, &mut s1);
        model.diffusion(t, &x2, a, &mut s2);
        let l1 = model.running_cost(t, &x1, a);
        let l2 = model.running_cost(t, &x2, a);
        let g1 = model.terminal_cost(t, &x1);
        let g2 = model.terminal_cost(t, &x2);
        if dx > 0.0 {
            rep.lipschitz_drift = rep.lipschitz_drift.max(diff_norm(&b1, &b2) / dx);
            rep.lipschitz_diffusion = rep.lipschitz_diffusion.max(diff_norm(&s1, &s2) / dx);
            rep.lipschitz_running_cost = rep.lipschitz_running_cost.max((l1 - l2).abs() / dx);
            rep.lipschitz_terminal_cost = rep.lipschitz_terminal_cost.max((g1 - g2).abs() / dx);
        }
        let nx = norm(&x1);
        rep.growth_dynamics = rep.growth_dynamics.max((norm(&b1) + norm(&s1)) / (1.0 + nx));
        rep.growth_costs = rep.growth_costs.max((l1.abs() + g1.abs()) / (1.0 + nx * nx));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region1(lo: f64, hi: f64) -> ProbeRegion {
        ProbeRegion { t: (0.0, 2.0), lo: vec![lo], hi: vec![hi] }
    }

    #[test]
    fn generator_pure_time_derivative() {
        let m = FnModel::new("zero", 1, 1, 1);
        let v = generator_apply(&m, &[0.0], 0.3, &[0.1], &[7.0], &[3.0], 1.0).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn generator_arithmetic() {
        let m = FnModel::new("m", 1, 1, 1).drift(|_, _, _, b| b[0] = 1.0).diffusion(|_, _, _, s| s[0] = 2f64.sqrt());
        let v = generator_apply(&m, &[0.0], 0.0, &[0.0], &[3.0], &[2.0], 0.0).unwrap();
        assert!((v - 5.0).abs() < 1e-14);
    }

    #[test]
    fn generator_on_stochastic_example_boundary() {
        let m = Example41::stochastic();
        let v = generator_apply(&m, &[0.0], 0.0, &[1.0], &[1.0], &[0.0], 0.0).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn generator_rejects_bad_dimensions() {
        let m = FnModel::new("m", 2, 1, 1);
        assert!(matches!(
            generator_apply(&m, &[0.0], 0.0, &[0.0], &[1.0, 1.0], &[0.0; 4], 0.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn shifted_cost_cases() {
        let m = FnModel::new("m", 1, 1, 1).running_cost(|t, x, _| t + x[0]);
        let s = shifted_running_cost(&m, 0.4, &[0.2], &[0.0], 1e-5).unwrap();
        assert_eq!(s.value, 0.4 + 0.2);
        assert!(!s.used_finite_differences);

        let m = FnModel::new("g=x", 1, 1, 1).drift(|_, _, _, b| b[0] = 2.0).terminal_cost(|_, x| x[0]);
        let s = shifted_running_cost(&m, 0.7, &[-0.3], &[0.0], 1e-5).unwrap();
        assert!((s.value - 2.0).abs() < 1e-9);
        assert!(s.used_finite_differences);

        let m = Example41::stochastic();
        for &(t, x) in &[(0.0, 0.0), (1.3, 0.9), (1.9, -0.99)] {
            assert_eq!(shifted_running_cost(&m, t, &[x], &[0.0], 1e-5).unwrap().value, 1.0);
        }
    }

    #[test]
    fn shifted_model_zeroes_terminal_cost() {
        let m = FnModel::new("g=x", 1, 1, 1).drift(|_, _, _, b| b[0] = 2.0).terminal_cost(|_, x| x[0]);
        let s = ShiftedCostModel::new(&m, 1e-5);
        assert_eq!(s.terminal_cost(0.0, &[3.0]), 0.0);
        assert!((s.running_cost(0.0, &[0.5], &[0.0]) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn terminal_fd_derivatives_match_analytic() {
        let analytic = FnModel::new("g", 2, 1, 1)
            .terminal_cost(|t, x| t * x[0] * x[0] + x[0] * x[1])
            .terminal_cost_derivs(|t, x| CostDerivs {
                dt: x[0] * x[0],
                grad: vec![2.0 * t * x[0] + x[1], x[0]],
                hess: vec![2.0 * t, 1.0, 1.0, 0.0],
            });
        let plain = FnModel::new("g", 2, 1, 1).terminal_cost(|t, x| t * x[0] * x[0] + x[0] * x[1]);
        let x = [0.3, -0.7];
        let (a, fa) = terminal_derivs_or_fd(&analytic, 0.8, &x, 1e-5);
        let (b, fb) = terminal_derivs_or_fd(&plain, 0.8, &x, 1e-5);
        assert!(!fa && fb);
        assert!((a.dt - b.dt).abs() < 1e-9);
        for i in 0..2 {
            assert!((a.grad[i] - b.grad[i]).abs() < 1e-9);
        }
        for i in 0..4 {
            assert!((a.hess[i] - b.hess[i]).abs() < 1e-5, "{i}: {} vs {}", a.hess[i], b.hess[i]);
        }
    }

    #[test]
    fn control_set_validation() {
        assert!(ControlSet::finite(vec![]).is_err());
        assert!(ControlSet::finite(vec![vec![0.0], vec![0.0]]).is_err());
        assert!(ControlSet::finite(vec![vec![f64::NAN]]).is_err());
        assert!(ControlSet::finite(vec![vec![0.0], vec![1.0, 2.0]]).is_err());
        let g = ControlSet::box_grid(&[-1.0, 0.0], &[1.0, 1.0], &[3, 2]).unwrap();
        assert_eq!(g.len(), 6);
        assert!(g.contains(&[0.0, 1.0]));
        assert!(g.contains(&[-1.0, 0.0]));
        let s = ControlSet::box_grid(&[0.0], &[2.0], &[1]).unwrap();
        assert_eq!(s.points(), &[vec![1.0]]);
    }

    #[test]
    fn feedback_policy_stays_in_set() {
        let set = ControlSet::finite(vec![vec![-1.0], vec![1.0]]).unwrap();
        let table = FeedbackTable {
            id: "fb".into(),
            time: Axis::new(0.0, 1.0, 2).unwrap(),
            space: vec![Axis::new(-1.0, 1.0, 3).unwrap()],
            controls: set.points().to_vec(),
            table: vec![0, 1, 0, 1, 1, 1],
        };
        let p = Policy::Feedback(Arc::new(table));
        p.validate(&set).unwrap();
        assert_eq!(p.control_at(0.1, &[0.05]), &[1.0]);
        assert_eq!(p.control_at(0.9, &[-0.9]), &[1.0]);
        assert_eq!(p.control_at(0.2, &[-0.9]), &[-1.0]);
        let bad = Policy::constant("c", vec![0.5]);
        assert!(bad.validate(&set).is_err());
    }

    #[test]
    fn probe_linear_drift() {
        let m = FnModel::new("2x", 1, 1, 1).drift(|_, x, _, b| b[0] = 2.0 * x[0]);
        let set = ControlSet::singleton(vec![0.0]).unwrap();
        let r = assumption_probe(&m, &set, &region1(-3.0, 3.0), 500, 1).unwrap();
        assert!((r.lipschitz_drift - 2.0).abs() < 1e-9);
        assert_eq!(r.lipschitz_running_cost, 0.0);
    }

    #[test]
    fn probe_positive_part_diffusion_is_one_lipschitz() {
        let m = Example41::stochastic();
        let set = ControlSet::singleton(vec![0.0]).unwrap();
        let r = assumption_probe(&m, &set, &region1(-2.0, 5.0), 20_000, 3).unwrap();
        assert!(r.lipschitz_diffusion <= 1.0 + 1e-12);
        assert!(r.lipschitz_diffusion > 0.9);
        assert_eq!(r.lipschitz_running_cost, 0.0);
        assert!(assumption_probe(&m, &set, &region1(0.0, 1.0), 1, 0).is_err());
    }

    #[test]
    fn evaluations_are_bitwise_repeatable() {
        let m = Example41::stochastic();
        let mut s1 = [0.0];
        let mut s2 = [0.0];
        for i in 0..100 {
            let t = i as f64 * 0.0173;
            let x = [(i as f64 * 0.37).sin()];
            m.diffusion(t, &x, &[0.0], &mut s1);
            m.diffusion(t, &x, &[0.0], &mut s2);
            assert_eq!(s1[0].to_bits(), s2[0].to_bits());
        }
    }
}
