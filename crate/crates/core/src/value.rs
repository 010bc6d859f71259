//! Monte Carlo estimates of `V`, `J^ε`, `V^ε` over finite policy families.
//!
//! Every estimator minimizes over the supplied policies only. Ties are broken
//! by policy id so the result does not depend on list order. Deterministic
//! models are integrated with a single path.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{Axis, Provenance, ValueField};
use crate::geometry::{SpaceDomain, SpaceTimeDomain};
use crate::model::{Policy, SdeModel};
use crate::simulate::{simulate_penalized, simulate_stopped, ExitFace, PathBatch, SimConfig};

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub ci_half_width: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub policy_id: String,
}

/// Sample mean and 95% half-width, summed in index order.
pub fn mean_ci(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Z95 * (var / n as f64).sqrt())
}

pub(crate) fn effective_cfg(model: &dyn SdeModel, cfg: &SimConfig) -> SimConfig {
    if model.is_deterministic() {
        cfg.clone().with_paths(1)
    } else {
        cfg.clone()
    }
}

fn estimate_from(samples: &[f64], cfg: &SimConfig, policy: &Policy) -> ValueEstimate {
    let (mean, ci) = mean_ci(samples);
    ValueEstimate { mean, ci_half_width: ci, n_paths: samples.len(), dt: cfg.dt, policy_id: policy.id().to_string() }
}

fn pick_min(estimates: Vec<ValueEstimate>) -> ValueEstimate {
    estimates
        .into_iter()
        .min_by(|a, b| a.mean.total_cmp(&b.mean).then_with(|| a.policy_id.cmp(&b.policy_id)))
        .expect("nonempty policy list")
}

fn check_policies(policies: &[Policy]) -> Result<()> {
    if policies.is_empty() {
        Err(Error::EmptyPolicies)
    } else {
        Ok(())
    }
}

/// `min_π Ê[∫_t^τ ℓ ds + g(τ, X_τ)]` over the policy family.
pub fn estimate_value(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
) -> Result<ValueEstimate> {
    check_policies(policies)?;
    let cfg = effective_cfg(model, cfg);
    let mut out = Vec::with_capacity(policies.len());
    for p in policies {
        let batch = simulate_stopped(model, domain, p, t, x, &cfg)?;
        out.push(estimate_from(&batch.stopped_costs(), &cfg, p));
    }
    Ok(pick_min(out))
}

/// One penalized batch per policy, reused for every `ε` in `eps_list`.
pub fn penalized_batches(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
    eps_list: &[f64],
) -> Result<Vec<PathBatch>> {
    check_policies(policies)?;
    let cfg = effective_cfg(model, cfg);
    policies.iter().map(|p| simulate_penalized(model, domain, p, t, x, &cfg, eps_list, false)).collect()
}

/// `min_π` of the penalized cost mean for each `ε`, all from shared batches.
pub fn estimate_penalized_values(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
    eps_list: &[f64],
) -> Result<Vec<ValueEstimate>> {
    if eps_list.is_empty() || eps_list.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::invalid("eps", format!("need positive values, got {eps_list:?}")));
    }
    let batches = penalized_batches(model, domain, policies, t, x, cfg, eps_list)?;
    penalized_from_batches(&batches, policies, eps_list)
}

pub(crate) fn penalized_from_batches(
    batches: &[PathBatch],
    policies: &[Policy],
    eps_list: &[f64],
) -> Result<Vec<ValueEstimate>> {
    eps_list
        .iter()
        .map(|&e| {
            let ests = batches
                .iter()
                .zip(policies)
                .map(|(b, p)| {
                    let costs = b.penalized_costs(e)?;
                    let (mean, ci) = mean_ci(&costs);
                    Ok(ValueEstimate {
                        mean,
                        ci_half_width: ci,
                        n_paths: costs.len(),
                        dt: b.dt,
                        policy_id: p.id().to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(pick_min(ests))
        })
        .collect()
}

pub fn estimate_penalized_value(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
    eps: f64,
) -> Result<ValueEstimate> {
    Ok(estimate_penalized_values(model, domain, policies, t, x, cfg, &[eps])?.remove(0))
}

/// Bounded stopping rules `θ ≤ τ` for the dynamic-programming check.
#[derive(Debug, Clone, PartialEq)]
pub enum StoppingRule {
    /// `θ = t`
    Immediate,
    /// `θ = s ∧ τ`
    FixedTime(f64),
    /// First exit of `[t, t_cap) × [lo, hi]`; the box must lie in `Ō`.
    InnerBox { t_cap: f64, lo: Vec<f64>, hi: Vec<f64> },
    /// `θ = τ`
    ExitTime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppReport {
    /// `V̂(t,x)` read from the field.
    pub outer: f64,
    /// `min_π Ê[∫_t^θ ℓ ds + V̂(θ, X_θ)]`
    pub inner: ValueEstimate,
    pub residual: f64,
}

fn box_corners(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let n = lo.len();
    (0..(1usize << n)).map(|m| (0..n).map(|i| if (m >> i) & 1 == 1 { hi[i] } else { lo[i] }).collect()).collect()
}

/// `|V̂(t,x) − min_π Ê[∫_t^θ ℓ ds + V̂(θ, X_θ)]|` with `V̂` interpolated from `field`.
///
/// Paths that reach `∂*Q` before `θ` contribute `g`; the field supplies the
/// continuation value otherwise.
#[allow(clippy::too_many_arguments)]
pub fn dpp_consistency(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
    rule: &StoppingRule,
    field: &ValueField,
) -> Result<DppReport> {
    check_policies(policies)?;
    let outer = field.interpolate(t, x);
    let horizon = domain.horizon;
    let (stop_domain, field_on_lateral) = match rule {
        StoppingRule::Immediate => {
            let inner = ValueEstimate {
                mean: outer,
                ci_half_width: 0.0,
                n_paths: 0,
                dt: cfg.dt,
                policy_id: policies[0].id().to_string(),
            };
            return Ok(DppReport { outer, inner, residual: 0.0 });
        }
        StoppingRule::ExitTime => {
            let inner = estimate_value(model, domain, policies, t, x, cfg)?;
            let residual = (outer - inner.mean).abs();
            return Ok(DppReport { outer, inner, residual });
        }
        StoppingRule::FixedTime(s) => {
            if !(*s >= t && *s <= horizon) {
                return Err(Error::invalid("theta", format!("fixed time {s} outside [{t}, {horizon}]")));
            }
            if *s == t {
                return dpp_consistency(model, domain, policies, t, x, cfg, &StoppingRule::Immediate, field);
            }
            (SpaceTimeDomain::new(domain.space.clone(), *s)?, false)
        }
        StoppingRule::InnerBox { t_cap, lo, hi } => {
            if !(*t_cap > t) {
                return Err(Error::invalid("theta", "inner box time cap must exceed the start time"));
            }
            let space = SpaceDomain::hyperrectangle(lo.clone(), hi.clone())?;
            if box_corners(lo, hi).iter().any(|c| domain.space.signed_distance(c) > 0.0) {
                return Err(Error::invalid(
                    "theta",
                    "inner box leaves the domain closure, so its exit could come after τ",
                ));
            }
            (SpaceTimeDomain::new(space, t_cap.min(horizon))?, true)
        }
    };

    let cfg = effective_cfg(model, cfg);
    let cap = stop_domain.horizon;
    let mut ests = Vec::with_capacity(policies.len());
    for p in policies {
        let batch = simulate_stopped(model, &stop_domain, p, t, x, &cfg)?;
        let samples: Vec<f64> = batch
            .paths
            .iter()
            .map(|r| {
                let continuation = match r.exit_face {
                    ExitFace::Terminal if cap == horizon => r.terminal_cost,
                    ExitFace::Terminal => field.interpolate(r.exit_time, &r.exit_state),
                    ExitFace::Lateral if field_on_lateral => field.interpolate(r.exit_time, &r.exit_state),
                    ExitFace::Lateral => r.terminal_cost,
                };
                r.running_cost + continuation
            })
            .collect();
        ests.push(estimate_from(&samples, &cfg, p));
    }
    let inner = pick_min(ests);
    Ok(DppReport { outer, residual: (outer - inner.mean).abs(), inner })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub time: Axis,
    pub space: Vec<Axis>,
}

impl GridSpec {
    pub fn new(time: Axis, space: Vec<Axis>) -> Result<Self> {
        if time.n < 2 || space.iter().any(|a| a.n < 2) {
            return Err(Error::invalid("grid", "every axis needs at least 2 nodes"));
        }
        Ok(GridSpec { time, space })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldMode {
    Stopped,
    Penalized(f64),
}

/// Estimate at every node, node-parallel, with the same seed at each node.
pub fn build_value_field(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    grid: &GridSpec,
    cfg: &SimConfig,
    mode: FieldMode,
) -> Result<ValueField> {
    check_policies(policies)?;
    if grid.space.len() != domain.dim() {
        return Err(Error::Dimension { what: "grid axes", expected: domain.dim(), got: grid.space.len() });
    }
    if grid.time.lo < 0.0 || grid.time.hi > domain.horizon {
        return Err(Error::invalid("grid", format!("time axis must lie in [0, {}]", domain.horizon)));
    }
    if let Some((lo, hi)) = domain.space.bounding_box() {
        let tol = domain.space.boundary_tolerance;
        for (k, ax) in grid.space.iter().enumerate() {
            if ax.lo < lo[k] - tol || ax.hi > hi[k] + tol {
                return Err(Error::invalid("grid", format!("space axis {k} leaves the domain bounding box")));
            }
        }
    }
    let len = grid.time.n * grid.space.iter().map(|a| a.n).product::<usize>();
    let shell = ValueField::new(grid.time, grid.space.clone(), vec![0.0; len], vec![0.0; len], Provenance::MonteCarlo)?;
    let results: Vec<Result<ValueEstimate>> = (0..len)
        .into_par_iter()
        .map(|i| {
            let (t, x) = shell.coords(i);
            let est = match mode {
                FieldMode::Stopped => estimate_value(model, domain, policies, t, &x, cfg),
                FieldMode::Penalized(eps) => estimate_penalized_value(model, domain, policies, t, &x, cfg, eps),
            };
            est.map_err(|e| Error::Node { t, x, source: Box::new(e) })
        })
        .collect();
    let mut values = Vec::with_capacity(len);
    let mut ci = Vec::with_capacity(len);
    for r in results {
        let e = r?;
        values.push(e.mean);
        ci.push(e.ci_half_width);
    }
    ValueField::new(grid.time, grid.space.clone(), values, ci, Provenance::MonteCarlo)
}
