//! Statistical checks of exit behaviour and of the penalized approximation.
//!
//! Each test returns a typed result that can be turned into a
//! [`DiagnosticRecord`] for JSON output or appended to a session CSV.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{SpaceDomain, SpaceTimeDomain};
use crate::model::{Policy, SdeModel};
use crate::regularity::{evaluate_condition6, DEFAULT_MARGIN};
use crate::rng::PathRng;
use crate::simulate::{simulate_penalized, simulate_stopped, time_grid, SimConfig};
use crate::value::{effective_cfg, mean_ci, ValueEstimate, Z95};

const SAMPLER_KEY: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub x: f64,
    pub y: f64,
    pub ci: f64,
}

/// One test outcome, in the shape written to JSON and the session CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRecord {
    pub test: String,
    pub inputs: serde_json::Value,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<SeriesPoint>,
}

impl DiagnosticRecord {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Append records to a CSV, one row per series point (or one row if there is no series).
pub fn append_session_csv(path: &Path, records: &[DiagnosticRecord]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "test,x,y,ci,statistic,threshold,pass")?;
    }
    for r in records {
        if r.series.is_empty() {
            writeln!(f, "{},,,,{},{},{}", r.test, r.statistic, r.threshold, r.pass)?;
        }
        for p in &r.series {
            writeln!(f, "{},{},{},{},{},{},{}", r.test, p.x, p.y, p.ci, r.statistic, r.threshold, r.pass)?;
        }
    }
    Ok(())
}

/// Path costs of the policy attaining the minimum mean, with its estimate.
struct MinSamples {
    estimate: ValueEstimate,
    samples: Vec<f64>,
}

fn pick(per_policy: Vec<(String, Vec<f64>)>, dt: f64) -> MinSamples {
    per_policy
        .into_iter()
        .map(|(id, samples)| {
            let (mean, ci) = mean_ci(&samples);
            let estimate = ValueEstimate { mean, ci_half_width: ci, n_paths: samples.len(), dt, policy_id: id };
            MinSamples { estimate, samples }
        })
        .min_by(|a, b| {
            a.estimate.mean.total_cmp(&b.estimate.mean).then_with(|| a.estimate.policy_id.cmp(&b.estimate.policy_id))
        })
        .expect("nonempty policy list")
}

fn stopped_min(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
) -> Result<MinSamples> {
    if policies.is_empty() {
        return Err(Error::EmptyPolicies);
    }
    let per = policies
        .iter()
        .map(|p| Ok((p.id().to_string(), simulate_stopped(model, domain, p, t, x, cfg)?.stopped_costs())))
        .collect::<Result<Vec<_>>>()?;
    Ok(pick(per, cfg.dt))
}

/// Stopped and penalized minima from the same penalized batches.
struct PenalizedMins {
    stopped: MinSamples,
    penalized: Vec<MinSamples>,
}

fn penalized_mins(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
    eps: &[f64],
) -> Result<PenalizedMins> {
    if policies.is_empty() {
        return Err(Error::EmptyPolicies);
    }
    let batches = policies
        .iter()
        .map(|p| simulate_penalized(model, domain, p, t, x, cfg, eps, false))
        .collect::<Result<Vec<_>>>()?;
    let ids = || policies.iter().map(|p| p.id().to_string());
    let stopped = pick(ids().zip(batches.iter().map(|b| b.stopped_costs())).collect(), cfg.dt);
    let penalized = eps
        .iter()
        .map(|&e| {
            let per =
                ids().zip(batches.iter()).map(|(id, b)| Ok((id, b.penalized_costs(e)?))).collect::<Result<Vec<_>>>()?;
            Ok(pick(per, cfg.dt))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PenalizedMins { stopped, penalized })
}

/// Mean and 95% half-width of `a_i − b_i` over paths paired by index.
fn paired_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(u, v)| u - v).collect();
    mean_ci(&d)
}

// ---------------------------------------------------------------- immediate exit

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImmediateExit {
    pub t: f64,
    pub y: Vec<f64>,
    pub control: Vec<f64>,
    pub delta: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub fraction: f64,
    pub ci_half_width: f64,
    /// Whether the weak regularity condition holds for this control at `(t, y)`.
    pub condition6_holds: bool,
    /// Per path, the first fine step at which `ρ̂ > 0`, if any.
    #[serde(skip)]
    pub first_exit_step: Vec<Option<usize>>,
    #[serde(skip)]
    times: Vec<f64>,
}

impl ImmediateExit {
    /// Fraction of paths with `ρ̂ > 0` at some grid time in `(t, t + d]`, `d ≤ δ`.
    pub fn fraction_within(&self, d: f64) -> f64 {
        let cut = self.times[0] + d + 1e-12 * d.abs().max(1.0);
        let hit = self.first_exit_step.iter().filter(|s| s.is_some_and(|k| self.times[k] <= cut)).count();
        hit as f64 / self.first_exit_step.len() as f64
    }

    pub fn record(&self, threshold: f64) -> DiagnosticRecord {
        DiagnosticRecord {
            test: "immediate_exit".into(),
            inputs: json!({"t": self.t, "y": self.y, "control": self.control, "delta": self.delta, "dt": self.dt, "n_paths": self.n_paths}),
            statistic: self.fraction,
            threshold,
            pass: self.fraction >= threshold,
            series: vec![],
        }
    }
}

/// Euler path from `y` under a constant control on the fine grid `times`,
/// stepping on every `factor`-th node with summed increments. Returns the
/// first fine index at which `ρ̂ > 0` is observed.
#[allow(clippy::too_many_arguments)]
fn window_first_exit(
    model: &dyn SdeModel,
    space: &SpaceDomain,
    a: &[f64],
    y: &[f64],
    times: &[f64],
    factor: usize,
    clip: f64,
    rng: &mut PathRng,
) -> Option<usize> {
    let n = model.dim_state();
    let d = model.dim_noise();
    let deterministic = model.is_deterministic();
    let steps = times.len() - 1;
    let mut x = y.to_vec();
    let mut b = vec![0.0; n];
    let mut sig = vec![0.0; n * d];
    let mut dw = vec![0.0; d];
    let mut start = 0;
    for j in 0..steps {
        if !deterministic {
            let sq = (times[j + 1] - times[j]).sqrt();
            for w in dw.iter_mut() {
                *w += sq * rng.normal();
            }
        }
        if (j + 1) % factor != 0 && j + 1 != steps {
            continue;
        }
        let s = times[start];
        let h = times[j + 1] - s;
        model.drift(s, &x, a, &mut b);
        if !deterministic {
            model.diffusion(s, &x, a, &mut sig);
        }
        for i in 0..n {
            let mut v = x[i] + b[i] * h;
            if !deterministic {
                for k in 0..d {
                    v += sig[i * d + k] * dw[k];
                }
            }
            x[i] = v.clamp(-clip, clip);
        }
        dw.iter_mut().for_each(|w| *w = 0.0);
        start = j + 1;
        if space.signed_distance(&x) > 0.0 {
            return Some(j + 1);
        }
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn immediate_exit_with_factor(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    control: &[f64],
    t: f64,
    y: &[f64],
    delta: f64,
    cfg: &SimConfig,
    factor: usize,
) -> Result<ImmediateExit> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta", "must be positive"));
    }
    if factor == 0 {
        return Err(Error::invalid("factor", "must be at least 1"));
    }
    let cfg = effective_cfg(model, cfg);
    let c6 = evaluate_condition6(
        model,
        domain,
        &crate::model::ControlSet::singleton(control.to_vec())?,
        t,
        y,
        DEFAULT_MARGIN,
    )?;
    let end = t + delta;
    let window = SpaceTimeDomain::new(domain.space.clone(), end)?;
    cfg.validate(window.horizon - t)?;
    let times = time_grid(t, end, cfg.dt);
    let first: Vec<Option<usize>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = PathRng::new(cfg.seed, i as u64);
            window_first_exit(model, &window.space, control, y, &times, factor, cfg.clip_bound, &mut rng)
        })
        .collect();
    let hits: Vec<f64> = first.iter().map(|s| if s.is_some() { 1.0 } else { 0.0 }).collect();
    let (fraction, ci) = mean_ci(&hits);
    Ok(ImmediateExit {
        t,
        y: y.to_vec(),
        control: control.to_vec(),
        delta,
        dt: cfg.dt * factor as f64,
        n_paths: cfg.n_paths,
        fraction,
        ci_half_width: ci,
        condition6_holds: c6.condition6_holds,
        first_exit_step: first,
        times,
    })
}

/// Fraction of constant-control paths from `(t, y) ∈ [0,T) × ∂O` with
/// `ρ̂(Y) > 0` at some grid time in `(t, t + δ]`.
pub fn immediate_exit_test(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    control: &[f64],
    t: f64,
    y: &[f64],
    delta: f64,
    cfg: &SimConfig,
) -> Result<ImmediateExit> {
    immediate_exit_with_factor(model, domain, control, t, y, delta, cfg, 1)
}

/// The same test at step `cfg.dt · factor` for each factor, with every coarse
/// path driven by sums of the fine Brownian increments.
#[allow(clippy::too_many_arguments)]
pub fn immediate_exit_refinement(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    control: &[f64],
    t: f64,
    y: &[f64],
    delta: f64,
    cfg: &SimConfig,
    factors: &[usize],
) -> Result<Vec<ImmediateExit>> {
    factors.iter().map(|&f| immediate_exit_with_factor(model, domain, control, t, y, delta, cfg, f)).collect()
}

// ---------------------------------------------------------------- martingale hitting

/// A strictly positive volatility functional `σ̂(s, M_s)`.
#[derive(Clone)]
pub struct SigmaHat {
    pub label: String,
    f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for SigmaHat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigmaHat({})", self.label)
    }
}

impl Default for SigmaHat {
    /// `1 + sin²(s)`.
    fn default() -> Self {
        SigmaHat::new("1+sin^2(s)", |s, _| 1.0 + s.sin().powi(2))
    }
}

impl SigmaHat {
    pub fn new(label: impl Into<String>, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        SigmaHat { label: label.into(), f: Arc::new(f) }
    }

    pub fn constant(c: f64) -> Self {
        SigmaHat::new(format!("{c}"), move |_, _| c)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let f = self.f.clone();
        SigmaHat::new(format!("{c}*({})", self.label), move |s, m| c * f(s, m))
    }

    pub fn eval(&self, s: f64, m: f64) -> f64 {
        (self.f)(s, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HittingResult {
    pub sigma: String,
    pub t: f64,
    pub delta: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub fraction: f64,
    pub ci_half_width: f64,
}

impl HittingResult {
    pub fn record(&self, threshold: f64) -> DiagnosticRecord {
        DiagnosticRecord {
            test: "martingale_hitting".into(),
            inputs: json!({"sigma": self.sigma, "t": self.t, "delta": self.delta, "n_steps": self.n_steps, "n_paths": self.n_paths}),
            statistic: self.fraction,
            threshold,
            pass: self.fraction >= threshold,
            series: vec![],
        }
    }
}

/// Fraction of paths of `M_s = Σ σ̂ ΔB` (from `M_t = 0`) that are positive at
/// some step in `(t, t + δ]`.
pub fn martingale_hitting_test(
    sigma: &SigmaHat,
    t: f64,
    delta: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<HittingResult> {
    if !(delta > 0.0) || n_steps == 0 || n_paths == 0 {
        return Err(Error::invalid("hitting test", "need delta > 0, n_steps ≥ 1, n_paths ≥ 1"));
    }
    let h = delta / n_steps as f64;
    let sq = h.sqrt();
    let hits = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = PathRng::new(seed, i as u64);
            let mut m = 0.0;
            for k in 0..n_steps {
                let s = t + k as f64 * h;
                let v = sigma.eval(s, m);
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::NonPositiveVolatility { s, value: v });
                }
                m += v * sq * rng.normal();
                if m > 0.0 {
                    return Ok(1.0);
                }
            }
            Ok(0.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (fraction, ci) = mean_ci(&hits);
    Ok(HittingResult { sigma: sigma.label.clone(), t, delta, n_steps, n_paths, fraction, ci_half_width: ci })
}

// ---------------------------------------------------------------- dwell time

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DwellRow {
    pub h: f64,
    pub dt: f64,
    /// `(policy id, Ê[θ − t] / h², CI of the ratio)`.
    pub per_policy: Vec<(String, f64, f64)>,
    pub min_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DwellTable {
    pub t: f64,
    pub x: Vec<f64>,
    pub rows: Vec<DwellRow>,
    /// Smallest ratio over every `h` and policy.
    pub min_ratio: f64,
    /// `(max − min) / max` of the per-`h` minimum ratios.
    pub variation: f64,
}

impl DwellTable {
    pub fn record(&self, lower: f64, max_variation: f64) -> DiagnosticRecord {
        let in_range = self.rows.iter().all(|r| r.min_ratio > lower && r.min_ratio <= 1.0 + 1e-12);
        DiagnosticRecord {
            test: "dwell_time".into(),
            inputs: json!({"t": self.t, "x": self.x, "h": self.rows.iter().map(|r| r.h).collect::<Vec<_>>()}),
            statistic: self.min_ratio,
            threshold: lower,
            pass: in_range && self.variation < max_variation,
            series: self
                .rows
                .iter()
                .map(|r| SeriesPoint {
                    x: r.h,
                    y: r.min_ratio,
                    ci: r.per_policy.iter().map(|p| p.2).fold(0.0, f64::max),
                })
                .collect(),
        }
    }
}

/// `Ê[θ − t] / h²` where `θ` is the first exit of `(s, X_s)` from
/// `[t, t + h²) × B(x, h)`; the step is `h² / steps_per_cell`.
#[allow(clippy::too_many_arguments)]
pub fn dwell_time_test(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    t: f64,
    x: &[f64],
    hs: &[f64],
    steps_per_cell: usize,
    n_paths: usize,
    seed: u64,
) -> Result<DwellTable> {
    if policies.is_empty() {
        return Err(Error::EmptyPolicies);
    }
    if hs.is_empty() || hs.iter().any(|&h| !(h > 0.0 && h < 1.0)) {
        return Err(Error::invalid("h", format!("values must lie in (0, 1), got {hs:?}")));
    }
    if steps_per_cell == 0 {
        return Err(Error::invalid("steps_per_cell", "must be at least 1"));
    }
    let hmax = hs.iter().cloned().fold(0.0, f64::max);
    let rho = domain.space.signed_distance(x);
    if rho > -hmax {
        return Err(Error::invalid("x", format!("ball of radius {hmax} around {x:?} leaves the domain (ρ̂ = {rho})")));
    }
    if t + hmax * hmax >= domain.horizon {
        return Err(Error::invalid(
            "t",
            format!("t + h² = {} reaches the horizon {}", t + hmax * hmax, domain.horizon),
        ));
    }
    let mut rows = Vec::with_capacity(hs.len());
    for &h in hs {
        let cap = h * h;
        let cell = SpaceTimeDomain::new(SpaceDomain::ball(x.to_vec(), h)?, t + cap)?;
        let cfg = effective_cfg(model, &SimConfig::new(cap / steps_per_cell as f64, n_paths, seed));
        let mut per_policy = Vec::with_capacity(policies.len());
        for p in policies {
            let batch = simulate_stopped(model, &cell, p, t, x, &cfg)?;
            let ratios: Vec<f64> = batch.paths.iter().map(|r| (r.exit_time - t) / cap).collect();
            let (m, ci) = mean_ci(&ratios);
            per_policy.push((p.id().to_string(), m, ci));
        }
        let min_ratio = per_policy.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        rows.push(DwellRow { h, dt: cfg.dt, per_policy, min_ratio });
    }
    let lo = rows.iter().map(|r| r.min_ratio).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.min_ratio).fold(f64::NEG_INFINITY, f64::max);
    Ok(DwellTable { t, x: x.to_vec(), rows, min_ratio: lo, variation: if hi > 0.0 { (hi - lo) / hi } else { 0.0 } })
}

// ---------------------------------------------------------------- regime

/// Check `ℓ ≥ 0` and `g = 0` at sampled points; the penalized diagnostics assume both.
pub fn check_cost_regime(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    extra: &[(f64, Vec<f64>)],
    samples: usize,
    seed: u64,
) -> Result<()> {
    let mut pts: Vec<(f64, Vec<f64>)> = extra.to_vec();
    if let Some((lo, hi)) = domain.space.bounding_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLER_KEY);
        for _ in 0..samples {
            let t = rng.random::<f64>() * domain.horizon;
            let x = lo.iter().zip(&hi).map(|(&l, &h)| l + rng.random::<f64>() * (h - l)).collect();
            pts.push((t, x));
        }
    }
    for (t, x) in &pts {
        let g = model.terminal_cost(*t, x);
        if g != 0.0 {
            return Err(Error::Regime(format!("terminal cost g({t}, {x:?}) = {g} is not zero")));
        }
        let g_end = model.terminal_cost(domain.horizon, x);
        if g_end != 0.0 {
            return Err(Error::Regime(format!("terminal cost g({}, {x:?}) = {g_end} is not zero", domain.horizon)));
        }
        for p in policies {
            let l = model.running_cost(*t, x, p.control_at(*t, x));
            if l < 0.0 {
                return Err(Error::Regime(format!("running cost at ({t}, {x:?}) under {} is {l} < 0", p.id())));
            }
        }
    }
    Ok(())
}

const REGIME_SAMPLES: usize = 256;

// ---------------------------------------------------------------- Dini curve

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiniCurve {
    pub eps: Vec<f64>,
    /// `ĥ(ε)`: max over boundary samples of `V̂^ε`.
    pub h: Vec<f64>,
    pub ci: Vec<f64>,
    /// Index into `samples` attaining each maximum.
    pub argmax: Vec<usize>,
    pub samples: Vec<(f64, Vec<f64>)>,
    /// `values[s][e]`: estimate at sample `s` for `eps[e]`.
    pub values: Vec<Vec<ValueEstimate>>,
    /// `ĥ` nonincreasing as `ε` decreases.
    pub monotone: bool,
}

impl DiniCurve {
    pub fn record(&self) -> DiagnosticRecord {
        let last = *self.h.last().unwrap_or(&f64::NAN);
        DiagnosticRecord {
            test: "dini_curve".into(),
            inputs: json!({"eps": self.eps, "samples": self.samples}),
            statistic: last,
            threshold: self.h[0],
            pass: self.monotone,
            series: self
                .eps
                .iter()
                .zip(&self.h)
                .zip(&self.ci)
                .map(|((&e, &h), &c)| SeriesPoint { x: e, y: h, ci: c })
                .collect(),
        }
    }
}

/// `ĥ(ε)` for a strictly decreasing `ε` list, one batch per sample and policy.
pub fn dini_curve(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    samples: &[(f64, Vec<f64>)],
    eps: &[f64],
    cfg: &SimConfig,
) -> Result<DiniCurve> {
    if eps.is_empty() || eps.iter().any(|&e| !(e > 0.0)) || eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::EpsilonOrder(eps.to_vec()));
    }
    if samples.is_empty() {
        return Err(Error::invalid("samples", "need at least one boundary sample"));
    }
    check_cost_regime(model, domain, policies, samples, REGIME_SAMPLES, cfg.seed)?;
    let cfg = effective_cfg(model, cfg);
    let values = samples
        .iter()
        .map(|(t, x)| {
            Ok(penalized_mins(model, domain, policies, *t, x, &cfg, eps)?
                .penalized
                .into_iter()
                .map(|m| m.estimate)
                .collect())
        })
        .collect::<Result<Vec<Vec<ValueEstimate>>>>()?;
    let mut h = Vec::with_capacity(eps.len());
    let mut ci = Vec::with_capacity(eps.len());
    let mut argmax = Vec::with_capacity(eps.len());
    for e in 0..eps.len() {
        let (i, best) = values
            .iter()
            .enumerate()
            .map(|(i, v)| (i, &v[e]))
            .max_by(|a, b| a.1.mean.total_cmp(&b.1.mean).then_with(|| b.0.cmp(&a.0)))
            .expect("nonempty samples");
        h.push(best.mean);
        ci.push(best.ci_half_width);
        argmax.push(i);
    }
    let monotone = h.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
    Ok(DiniCurve { eps: eps.to_vec(), h, ci, argmax, samples: samples.to_vec(), values, monotone })
}

// ---------------------------------------------------------------- sandwich

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub value: ValueEstimate,
    pub penalized: ValueEstimate,
    /// `V̂ − V̂^ε`; nonpositive on shared batches.
    pub lower_gap: f64,
    /// `V̂^ε − V̂ − ĥ(ε)`.
    pub upper_excess: f64,
    /// Paired CI of `V̂^ε − V̂` plus the CI of `ĥ(ε)`.
    pub combined_ci: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub eps: f64,
    pub h_eps: f64,
    pub h_ci: f64,
    pub rows: Vec<SandwichRow>,
    pub lower_holds_exactly: bool,
    /// `max(lower_gap, upper_excess − combined_ci)` over samples.
    pub max_violation: f64,
}

impl SandwichReport {
    pub fn record(&self) -> DiagnosticRecord {
        DiagnosticRecord {
            test: "sandwich".into(),
            inputs: json!({"eps": self.eps, "samples": self.rows.iter().map(|r| (r.t, r.x.clone())).collect::<Vec<_>>()}),
            statistic: self.max_violation,
            threshold: 0.0,
            pass: self.lower_holds_exactly && self.max_violation <= 0.0,
            series: vec![],
        }
    }
}

/// `V̂ ≤ V̂^ε ≤ V̂ + ĥ(ε)` at interior samples, with `ĥ` from `boundary`.
pub fn sandwich_test(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    interior: &[(f64, Vec<f64>)],
    boundary: &[(f64, Vec<f64>)],
    eps: f64,
    cfg: &SimConfig,
) -> Result<SandwichReport> {
    let dini = dini_curve(model, domain, policies, boundary, &[eps], cfg)?;
    check_cost_regime(model, domain, policies, interior, 0, cfg.seed)?;
    let (h_eps, h_ci) = (dini.h[0], dini.ci[0]);
    let cfg = effective_cfg(model, cfg);
    let mut rows = Vec::with_capacity(interior.len());
    for (t, x) in interior {
        let m = penalized_mins(model, domain, policies, *t, x, &cfg, &[eps])?;
        let pen = &m.penalized[0];
        let (diff, diff_ci) = paired_difference(&pen.samples, &m.stopped.samples);
        rows.push(SandwichRow {
            t: *t,
            x: x.clone(),
            value: m.stopped.estimate.clone(),
            penalized: pen.estimate.clone(),
            lower_gap: m.stopped.estimate.mean - pen.estimate.mean,
            upper_excess: diff - h_eps,
            combined_ci: diff_ci + h_ci,
        });
    }
    let lower_holds_exactly = rows.iter().all(|r| r.lower_gap <= 0.0);
    let max_violation =
        rows.iter().map(|r| r.lower_gap.max(r.upper_excess - r.combined_ci)).fold(f64::NEG_INFINITY, f64::max);
    Ok(SandwichReport { eps, h_eps, h_ci, rows, lower_holds_exactly, max_violation })
}

// ---------------------------------------------------------------- jump probe

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpRow {
    pub t: f64,
    pub delta: f64,
    pub above: ValueEstimate,
    pub below: ValueEstimate,
    /// `V̂(t, c(t) + δ) − V̂(t, c(t) − δ)`.
    pub diff: f64,
    pub gap: f64,
    /// Paired 95% half-width of `diff`.
    pub ci_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpProbe {
    pub axis: usize,
    pub offsets: Vec<f64>,
    pub rows: Vec<JumpRow>,
}

impl JumpProbe {
    pub fn record(&self) -> DiagnosticRecord {
        DiagnosticRecord {
            test: "jump_probe".into(),
            inputs: json!({"axis": self.axis, "offsets": self.offsets, "times": self.rows.iter().map(|r| r.t).collect::<Vec<_>>()}),
            statistic: self.rows.iter().map(|r| r.gap).fold(0.0, f64::max),
            threshold: f64::NAN,
            pass: true,
            series: self.rows.iter().map(|r| SeriesPoint { x: r.delta, y: r.gap, ci: r.ci_half_width }).collect(),
        }
    }
}

/// Value gaps across a curve `t ↦ c(t)` at offsets `±δ` along one spatial axis,
/// with common random numbers on both sides.
#[allow(clippy::too_many_arguments)]
pub fn jump_probe(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    curve: &dyn Fn(f64) -> Vec<f64>,
    times: &[f64],
    offsets: &[f64],
    axis: usize,
    cfg: &SimConfig,
) -> Result<JumpProbe> {
    if offsets.is_empty() || offsets.iter().any(|&d| !(d > 0.0)) || offsets.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("offsets", format!("need positive values sorted descending, got {offsets:?}")));
    }
    if axis >= model.dim_state() {
        return Err(Error::Dimension { what: "offset axis", expected: model.dim_state(), got: axis });
    }
    let cfg = effective_cfg(model, cfg);
    let mut rows = Vec::new();
    for &t in times {
        let c = curve(t);
        let rho = domain.space.signed_distance(&c);
        if !(rho < 0.0) {
            return Err(Error::CurveOutside { t, rho });
        }
        for &delta in offsets {
            let mut up = c.clone();
            up[axis] += delta;
            let mut down = c.clone();
            down[axis] -= delta;
            let a = stopped_min(model, domain, policies, t, &up, &cfg)?;
            let b = stopped_min(model, domain, policies, t, &down, &cfg)?;
            let (diff, ci) = paired_difference(&a.samples, &b.samples);
            rows.push(JumpRow {
                t,
                delta,
                above: a.estimate,
                below: b.estimate,
                diff,
                gap: diff.abs(),
                ci_half_width: ci,
            });
        }
    }
    Ok(JumpProbe { axis, offsets: offsets.to_vec(), rows })
}

// ---------------------------------------------------------------- modulus probe

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModulusPair {
    pub t1: f64,
    pub x1: Vec<f64>,
    pub t2: f64,
    pub x2: Vec<f64>,
    /// `‖x¹ − x²‖ + |t₁ − t₂|^{1/2}`.
    pub distance: f64,
    /// `|V̂^ε(t₁,x¹) − V̂^ε(t₂,x²)|`.
    pub abs_diff: f64,
    pub ci_half_width: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModulusProbe {
    pub eps: f64,
    /// Least-squares slope through the origin.
    pub slope: f64,
    pub pairs: Vec<ModulusPair>,
    /// Largest `|residual| / CI` (infinite when some CI is zero and its residual is not).
    pub max_residual_ratio: f64,
    /// Largest `|ΔV̂| / distance`, the smallest constant bounding every pair.
    pub envelope: f64,
    pub residual_factor: f64,
    pub pass: bool,
    /// Intercept of an ordinary fit with intercept, and its 95% half-width.
    pub free_intercept: f64,
    pub free_intercept_ci: f64,
}

impl ModulusProbe {
    pub fn record(&self) -> DiagnosticRecord {
        DiagnosticRecord {
            test: "modulus_probe".into(),
            inputs: json!({"eps": self.eps, "pairs": self.pairs.len(), "residual_factor": self.residual_factor}),
            statistic: self.max_residual_ratio,
            threshold: self.residual_factor,
            pass: self.pass,
            series: self
                .pairs
                .iter()
                .map(|p| SeriesPoint { x: p.distance, y: p.abs_diff, ci: p.ci_half_width })
                .collect(),
        }
    }
}

/// How the second point of a pair is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PairSampling {
    /// Both points uniform on `[0, T) × O`.
    Independent,
    /// Second point within `max_dx` (per axis) and `max_dt` of the first.
    Local { max_dx: f64, max_dt: f64 },
}

fn uniform_point(domain: &SpaceTimeDomain, lo: &[f64], hi: &[f64], rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    loop {
        let t = rng.random::<f64>() * domain.horizon;
        let x: Vec<f64> = lo.iter().zip(hi).map(|(&l, &h)| l + rng.random::<f64>() * (h - l)).collect();
        if domain.space.signed_distance(&x) < 0.0 {
            return (t, x);
        }
    }
}

/// Regress `|ΔV̂^ε|` on `‖Δx‖ + |Δt|^{1/2}` through the origin over random pairs.
///
/// Passes when the slope is finite and positive and every residual is within
/// `residual_factor` times the paired CI of its pair.
#[allow(clippy::too_many_arguments)]
pub fn modulus_probe(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policies: &[Policy],
    eps: f64,
    n_pairs: usize,
    sampling: PairSampling,
    residual_factor: f64,
    cfg: &SimConfig,
) -> Result<ModulusProbe> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", "must be positive"));
    }
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs", "need at least one pair"));
    }
    let (lo, hi) = domain.space.bounding_box().ok_or_else(|| Error::UnsupportedDomain {
        shape: domain.space.shape().name().into(),
        reason: "pair sampling needs a bounding box".into(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_KEY);
    let mut starts = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = uniform_point(domain, &lo, &hi, &mut rng);
        let b = match sampling {
            PairSampling::Independent => uniform_point(domain, &lo, &hi, &mut rng),
            PairSampling::Local { max_dx, max_dt } => loop {
                let t = (a.0 + (2.0 * rng.random::<f64>() - 1.0) * max_dt).clamp(0.0, domain.horizon * (1.0 - 1e-12));
                let x: Vec<f64> = a.1.iter().map(|v| v + (2.0 * rng.random::<f64>() - 1.0) * max_dx).collect();
                if domain.space.signed_distance(&x) < 0.0 {
                    break (t, x);
                }
            },
        };
        starts.push((a, b));
    }
    let cfg = effective_cfg(model, cfg);
    let mut pairs = Vec::with_capacity(n_pairs);
    for ((t1, x1), (t2, x2)) in starts {
        let a = penalized_mins(model, domain, policies, t1, &x1, &cfg, &[eps])?;
        let b = penalized_mins(model, domain, policies, t2, &x2, &cfg, &[eps])?;
        let (diff, ci) = paired_difference(&a.penalized[0].samples, &b.penalized[0].samples);
        let dx = x1.iter().zip(&x2).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        let distance = dx + (t1 - t2).abs().sqrt();
        pairs.push(ModulusPair {
            t1,
            x1,
            t2,
            x2,
            distance,
            abs_diff: diff.abs(),
            ci_half_width: ci,
            residual: f64::NAN,
        });
    }
    let sxy: f64 = pairs.iter().map(|p| p.distance * p.abs_diff).sum();
    let sxx: f64 = pairs.iter().map(|p| p.distance * p.distance).sum();
    let slope = sxy / sxx;
    let mut max_ratio: f64 = 0.0;
    for p in pairs.iter_mut() {
        p.residual = p.abs_diff - slope * p.distance;
        let r = if p.ci_half_width > 0.0 {
            p.residual.abs() / p.ci_half_width
        } else if p.residual == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        max_ratio = max_ratio.max(r);
    }
    let envelope = pairs.iter().filter(|p| p.distance > 0.0).map(|p| p.abs_diff / p.distance).fold(0.0, f64::max);
    let pass = slope.is_finite() && slope > 0.0 && max_ratio <= residual_factor;
    let (free_intercept, free_intercept_ci) = intercept_fit(&pairs);
    Ok(ModulusProbe {
        eps,
        slope,
        pairs,
        max_residual_ratio: max_ratio,
        envelope,
        residual_factor,
        pass,
        free_intercept,
        free_intercept_ci,
    })
}

fn intercept_fit(pairs: &[ModulusPair]) -> (f64, f64) {
    let n = pairs.len() as f64;
    if pairs.len() < 3 {
        return (f64::NAN, f64::NAN);
    }
    let mx = pairs.iter().map(|p| p.distance).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.abs_diff).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.distance - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.distance - mx) * (p.abs_diff - my)).sum();
    let b1 = sxy / sxx;
    let b0 = my - b1 * mx;
    let ssr: f64 = pairs.iter().map(|p| (p.abs_diff - b0 - b1 * p.distance).powi(2)).sum();
    let se = (ssr / (n - 2.0) * (1.0 / n + mx * mx / sxx)).sqrt();
    (b0, Z95 * se)
}
