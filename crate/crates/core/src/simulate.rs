//! Euler–Maruyama paths with first-exit detection and cost accumulation.
//!
//! The time grid starts at the initial time `t` and steps by `dt`, with a
//! shorter final step landing exactly on the horizon. Integrals of `ℓ` and of
//! `d̂ = ρ̂⁺` use the left endpoint of each step. A path exits at the first
//! grid time `t_k`, `k ≥ 1`, where `ρ̂(X_k) ≥ 0`; the recorded exit state is
//! the crossing point on the last step's segment, so it sits on `∂O` up to
//! bisection accuracy.
//!
//! Penalized batches run every path to the horizon and keep the stopped
//! quantities as well, so stopped and penalized costs come from identical
//! increments.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SpaceDomain, SpaceTimeDomain};
use crate::model::{Policy, SdeModel};
use crate::rng::PathRng;

pub const DEFAULT_CLIP_BOUND: f64 = 1e6;
pub const PATH_DUMP_VERSION: u32 = 1;
const PATH_MAGIC: &[u8; 4] = b"EXPB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExitDetection {
    #[default]
    GridPoint,
    /// Also kill a path between grid points with the Brownian-bridge
    /// crossing probability `exp(−2ρ̂_k ρ̂_{k+1} / (‖σ'Dρ̂‖² Δt))`.
    BridgeCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub exit_detection: ExitDetection,
    /// States are clamped componentwise to `[−clip_bound, clip_bound]`.
    pub clip_bound: f64,
    pub record_trajectories: bool,
}

impl SimConfig {
    pub fn new(dt: f64, n_paths: usize, seed: u64) -> Self {
        SimConfig {
            dt,
            n_paths,
            seed,
            exit_detection: ExitDetection::GridPoint,
            clip_bound: DEFAULT_CLIP_BOUND,
            record_trajectories: false,
        }
    }

    pub fn with_exit_detection(mut self, d: ExitDetection) -> Self {
        self.exit_detection = d;
        self
    }

    pub fn with_trajectories(mut self, on: bool) -> Self {
        self.record_trajectories = on;
        self
    }

    pub fn with_paths(mut self, n: usize) -> Self {
        self.n_paths = n;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.dt > horizon {
            return Err(Error::invalid("dt", format!("need 0 < dt ≤ T = {horizon}, got {}", self.dt)));
        }
        if self.n_paths == 0 {
            return Err(Error::invalid("n_paths", "must be at least 1"));
        }
        if !(self.clip_bound > 0.0) {
            return Err(Error::invalid("clip_bound", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitFace {
    Lateral,
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Stopped,
    Penalized,
}

/// Grid-time samples of one path. `running` and `dhat` hold the left-endpoint
/// values of `ℓ` and `d̂` for each step taken.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub running: Vec<f64>,
    pub dhat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub exit_time: f64,
    pub exit_state: Vec<f64>,
    pub exit_face: ExitFace,
    /// `∫_t^τ ℓ ds`
    pub running_cost: f64,
    /// `g(τ, X_τ)`
    pub terminal_cost: f64,
    /// `∫_t^T d̂(X_s) ds` for penalized batches, `0` for stopped ones.
    pub lambda_log_integral: f64,
    /// `∫_t^T ℓ ds + g(T, X_T)` along the unkilled path (penalized batches).
    pub full_horizon_cost: f64,
    /// `g(T, X_T)` along the unkilled path (penalized batches).
    pub horizon_terminal_cost: f64,
    /// Penalized cost for each `ε` of the batch, in batch order.
    pub penalized: Vec<f64>,
    pub clipped: bool,
    pub trajectory: Option<Trajectory>,
}

impl PathRecord {
    pub fn cost(&self) -> f64 {
        self.running_cost + self.terminal_cost
    }

    /// `∫_t^T Λ^ε ℓ ds + Λ^ε(T) g(T, X_T)` from the recorded trajectory.
    pub fn penalized_from_trajectory(&self, times: &[f64], eps: f64) -> Option<f64> {
        let tr = self.trajectory.as_ref()?;
        let mut dint = 0.0;
        let mut acc = 0.0;
        for k in 0..tr.running.len() {
            let h = times[k + 1] - times[k];
            acc += lambda(dint, eps) * tr.running[k] * h;
            dint += tr.dhat[k] * h;
        }
        Some(acc + lambda(dint, eps) * self.horizon_terminal_cost)
    }
}

#[inline]
fn lambda(dint: f64, eps: f64) -> f64 {
    if dint == 0.0 {
        1.0
    } else {
        (-dint / eps).exp()
    }
}

#[derive(Debug, Clone)]
pub struct PathBatch {
    pub start_t: f64,
    pub start_x: Vec<f64>,
    pub policy_id: String,
    pub mode: BatchMode,
    pub dt: f64,
    pub seed: u64,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub eps: Vec<f64>,
    pub shifted_cost: bool,
    pub paths: Vec<PathRecord>,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn stopped_costs(&self) -> Vec<f64> {
        self.paths.iter().map(PathRecord::cost).collect()
    }

    pub fn full_horizon_costs(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.full_horizon_cost).collect()
    }

    /// Per-path penalized costs at `eps`, from the batch list or from trajectories.
    pub fn penalized_costs(&self, eps: f64) -> Result<Vec<f64>> {
        if self.mode != BatchMode::Penalized {
            return Err(Error::MissingEpsilon(eps));
        }
        if let Some(j) = self.eps.iter().position(|&e| e == eps) {
            return Ok(self.paths.iter().map(|p| p.penalized[j]).collect());
        }
        self.paths
            .iter()
            .map(|p| p.penalized_from_trajectory(&self.times, eps).ok_or(Error::MissingEpsilon(eps)))
            .collect()
    }

    pub fn clipped_count(&self) -> usize {
        self.paths.iter().filter(|p| p.clipped).count()
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.start_x.len();
        let mut header = String::from("path,exit_time,exit_face");
        for k in 0..n {
            header.push_str(&format!(",exit_x{k}"));
        }
        header.push_str(",running_cost,terminal_cost,lambda_log_integral,clipped");
        for e in &self.eps {
            header.push_str(&format!(",penalized_eps_{e}"));
        }
        writeln!(w, "{header}")?;
        for (i, p) in self.paths.iter().enumerate() {
            let face = match p.exit_face {
                ExitFace::Lateral => "lateral",
                ExitFace::Terminal => "terminal",
            };
            let mut row = format!("{i},{},{face}", p.exit_time);
            for v in &p.exit_state {
                row.push_str(&format!(",{v}"));
            }
            row.push_str(&format!(
                ",{},{},{},{}",
                p.running_cost, p.terminal_cost, p.lambda_log_integral, p.clipped as u8
            ));
            for v in &p.penalized {
                row.push_str(&format!(",{v}"));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    /// Binary dump: magic `EXPB`, `u32` version, `u32` dim, `f64` dt,
    /// `u64` n_paths, `u64` seed, then per path `f64` exit time, `u8` face,
    /// `dim × f64` exit state, `f64` running cost, `f64` terminal cost,
    /// `f64` lambda log-integral, `u8` clipped.
    pub fn write_path_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PATH_MAGIC)?;
        w.write_all(&PATH_DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.start_x.len() as u32).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&(self.paths.len() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for p in &self.paths {
            w.write_all(&p.exit_time.to_le_bytes())?;
            w.write_all(&[(p.exit_face == ExitFace::Terminal) as u8])?;
            for v in &p.exit_state {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in [p.running_cost, p.terminal_cost, p.lambda_log_integral] {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[p.clipped as u8])?;
        }
        Ok(())
    }
}

/// Header and per-path records read back from a path dump.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDump {
    pub dim: usize,
    pub dt: f64,
    pub seed: u64,
    pub paths: Vec<DumpedPath>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpedPath {
    pub exit_time: f64,
    pub exit_face: ExitFace,
    pub exit_state: Vec<f64>,
    pub running_cost: f64,
    pub terminal_cost: f64,
    pub lambda_log_integral: f64,
    pub clipped: bool,
}

pub fn read_path_dump<R: Read>(mut r: R) -> Result<PathDump> {
    let mut buf4 = [0u8; 4];
    let mut buf8 = [0u8; 8];
    let mut byte = [0u8; 1];
    r.read_exact(&mut buf4)?;
    if &buf4 != PATH_MAGIC {
        return Err(Error::Format("not a path dump".into()));
    }
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != PATH_DUMP_VERSION {
        return Err(Error::Format(format!("unsupported path dump version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let dim = u32::from_le_bytes(buf4) as usize;
    let mut f64_in = |r: &mut R| -> Result<f64> {
        r.read_exact(&mut buf8)?;
        Ok(f64::from_le_bytes(buf8))
    };
    let dt = f64_in(&mut r)?;
    let n = f64_in(&mut r)?.to_bits();
    let seed = f64_in(&mut r)?.to_bits();
    let mut paths = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let exit_time = f64_in(&mut r)?;
        r.read_exact(&mut byte)?;
        let exit_face = if byte[0] == 1 { ExitFace::Terminal } else { ExitFace::Lateral };
        let exit_state = (0..dim).map(|_| f64_in(&mut r)).collect::<Result<Vec<_>>>()?;
        let running_cost = f64_in(&mut r)?;
        let terminal_cost = f64_in(&mut r)?;
        let lambda_log_integral = f64_in(&mut r)?;
        r.read_exact(&mut byte)?;
        paths.push(DumpedPath {
            exit_time,
            exit_face,
            exit_state,
            running_cost,
            terminal_cost,
            lambda_log_integral,
            clipped: byte[0] == 1,
        });
    }
    Ok(PathDump { dim, dt, seed, paths })
}

/// Grid times `t, t+dt, …, T`; the last step may be shorter than `dt`.
pub fn time_grid(t0: f64, horizon: f64, dt: f64) -> Vec<f64> {
    let span = horizon - t0;
    if span <= 0.0 {
        return vec![t0.min(horizon)];
    }
    let steps = ((span / dt) * (1.0 - 1e-9)).ceil().max(1.0) as usize;
    let mut v: Vec<f64> = (0..steps).map(|k| t0 + k as f64 * dt).collect();
    v.push(horizon);
    v
}

struct Kernel<'a> {
    model: &'a dyn SdeModel,
    space: &'a SpaceDomain,
    policy: &'a Policy,
    cfg: &'a SimConfig,
    times: &'a [f64],
    x0: &'a [f64],
    penalized: bool,
    eps: &'a [f64],
    start_outside: bool,
}

impl Kernel<'_> {
    fn run(&self, path: usize) -> PathRecord {
        let model = self.model;
        let n = model.dim_state();
        let d = model.dim_noise();
        let deterministic = model.is_deterministic();
        let bridge = self.cfg.exit_detection == ExitDetection::BridgeCorrected && !deterministic;
        let horizon = *self.times.last().unwrap();
        let t0 = self.times[0];
        let steps = self.times.len() - 1;

        let mut rng = PathRng::new(self.cfg.seed, path as u64);
        let mut x = self.x0.to_vec();
        let mut xn = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut sig = vec![0.0; n * d];
        let mut dw = vec![0.0; d];
        let mut pen = vec![0.0; self.eps.len()];
        let mut traj = self.cfg.record_trajectories.then(|| {
            let mut t = Trajectory::default();
            t.states.extend_from_slice(&x);
            t
        });

        let mut running = 0.0;
        let mut full = 0.0;
        let mut dint = 0.0;
        let mut clipped = false;
        let mut exit: Option<(f64, Vec<f64>)> = if self.start_outside { Some((t0, x.clone())) } else { None };
        let stop_early = !self.penalized;

        if !(stop_early && exit.is_some()) {
            for k in 0..steps {
                let s = self.times[k];
                let h = self.times[k + 1] - s;
                let a = self.policy.control_at(s, &x);
                let l = model.running_cost(s, &x, a);
                if exit.is_none() {
                    running += l * h;
                }
                let dhat = if self.penalized { self.space.distance_plus(&x) } else { 0.0 };
                if self.penalized {
                    for (acc, &e) in pen.iter_mut().zip(self.eps) {
                        *acc += lambda(dint, e) * l * h;
                    }
                    full += l * h;
                    dint += dhat * h;
                }
                if let Some(tr) = traj.as_mut() {
                    tr.running.push(l);
                    tr.dhat.push(dhat);
                }

                model.drift(s, &x, a, &mut b);
                if deterministic {
                    for i in 0..n {
                        xn[i] = x[i] + b[i] * h;
                    }
                } else {
                    model.diffusion(s, &x, a, &mut sig);
                    let sq = h.sqrt();
                    for w in dw.iter_mut() {
                        *w = sq * rng.normal();
                    }
                    for i in 0..n {
                        let mut noise = 0.0;
                        for j in 0..d {
                            noise += sig[i * d + j] * dw[j];
                        }
                        xn[i] = x[i] + b[i] * h + noise;
                    }
                }
                for v in xn.iter_mut() {
                    if v.abs() > self.cfg.clip_bound {
                        *v = v.clamp(-self.cfg.clip_bound, self.cfg.clip_bound);
                        clipped = true;
                    }
                }

                if exit.is_none() {
                    let rho_n = self.space.signed_distance(&xn);
                    if rho_n >= 0.0 {
                        exit = Some((self.times[k + 1], crossing_point(self.space, &x, &xn)));
                    } else if bridge {
                        let p = self.bridge_probability(&x, &sig, rho_n, h, n, d);
                        if p > 0.0 && rng.uniform() < p {
                            let g = self.space.grad_hess(&xn).grad;
                            let proj = xn.iter().zip(&g).map(|(v, gi)| v - rho_n * gi).collect();
                            exit = Some((self.times[k + 1], proj));
                        }
                    }
                }
                std::mem::swap(&mut x, &mut xn);
                if let Some(tr) = traj.as_mut() {
                    tr.states.extend_from_slice(&x);
                }
                if stop_early && exit.is_some() {
                    break;
                }
            }
        }

        let (exit_time, exit_state, exit_face) = match exit {
            Some((t, state)) => (t, state, ExitFace::Lateral),
            None => (horizon, x.clone(), ExitFace::Terminal),
        };
        let terminal_cost = model.terminal_cost(exit_time, &exit_state);
        let (horizon_terminal_cost, full_horizon_cost) = if self.penalized {
            let g_t = model.terminal_cost(horizon, &x);
            for (acc, &e) in pen.iter_mut().zip(self.eps) {
                *acc += lambda(dint, e) * g_t;
            }
            (g_t, full + g_t)
        } else {
            (f64::NAN, f64::NAN)
        };
        PathRecord {
            exit_time,
            exit_state,
            exit_face,
            running_cost: running,
            terminal_cost,
            lambda_log_integral: dint,
            full_horizon_cost,
            horizon_terminal_cost,
            penalized: pen,
            clipped,
            trajectory: traj,
        }
    }

    fn bridge_probability(&self, x: &[f64], sig: &[f64], rho_n: f64, h: f64, n: usize, d: usize) -> f64 {
        let rho = self.space.signed_distance(x);
        if rho >= 0.0 {
            return 0.0;
        }
        let g = self.space.grad_hess(x).grad;
        let mut q = 0.0;
        for j in 0..d {
            let mut c = 0.0;
            for i in 0..n {
                c += sig[i * d + j] * g[i];
            }
            q += c * c;
        }
        if q <= 0.0 {
            return 0.0;
        }
        (-2.0 * rho * rho_n / (q * h)).exp()
    }
}

/// Point on the segment `x → xn` where `ρ̂` first becomes nonnegative, by bisection.
fn crossing_point(space: &SpaceDomain, x: &[f64], xn: &[f64]) -> Vec<f64> {
    let at = |lam: f64| -> Vec<f64> { x.iter().zip(xn).map(|(a, b)| a + lam * (b - a)).collect() };
    if space.signed_distance(x) >= 0.0 {
        return x.to_vec();
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if space.signed_distance(&at(mid)) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    at(hi)
}

fn check_start(model: &dyn SdeModel, domain: &SpaceTimeDomain, t: f64, x: &[f64]) -> Result<()> {
    if x.len() != model.dim_state() || domain.dim() != model.dim_state() {
        return Err(Error::Dimension { what: "start state", expected: model.dim_state(), got: x.len() });
    }
    if !(t >= 0.0 && t <= domain.horizon) {
        return Err(Error::invalid("t", format!("start time {t} outside [0, {}]", domain.horizon)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("x", "start state is not finite"));
    }
    Ok(())
}

fn check_eps(eps: &[f64]) -> Result<()> {
    if eps.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::invalid("eps", format!("all values must be positive, got {eps:?}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policy: &Policy,
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
    penalized: bool,
    eps: &[f64],
    shifted_cost: bool,
) -> Result<PathBatch> {
    check_start(model, domain, t, x)?;
    cfg.validate(domain.horizon)?;
    let times = time_grid(t, domain.horizon, cfg.dt);
    let start_outside = domain.space.signed_distance(x) > domain.space.boundary_tolerance;
    let kernel =
        Kernel { model, space: &domain.space, policy, cfg, times: &times, x0: x, penalized, eps, start_outside };
    let paths: Vec<PathRecord> = (0..cfg.n_paths).into_par_iter().map(|i| kernel.run(i)).collect();
    Ok(PathBatch {
        start_t: t,
        start_x: x.to_vec(),
        policy_id: policy.id().to_string(),
        mode: if penalized { BatchMode::Penalized } else { BatchMode::Stopped },
        dt: cfg.dt,
        seed: cfg.seed,
        horizon: domain.horizon,
        times,
        eps: eps.to_vec(),
        shifted_cost,
        paths,
    })
}

/// Paths stopped at the first exit from `Q`. A start outside `Ō` exits at once.
pub fn simulate_stopped(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policy: &Policy,
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
) -> Result<PathBatch> {
    run(model, domain, policy, t, x, cfg, false, &[], false)
}

/// Unkilled paths to `T` carrying `∫d̂` and penalized costs for every `ε` in `eps`.
/// With `with_shifted_cost` the costs use `ℓ + G^a g` and `g ≡ 0`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_penalized(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policy: &Policy,
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
    eps: &[f64],
    with_shifted_cost: bool,
) -> Result<PathBatch> {
    check_eps(eps)?;
    if with_shifted_cost {
        let shifted = crate::model::ShiftedCostModel::new(model, domain.space.fd_step);
        run(&shifted, domain, policy, t, x, cfg, true, eps, true)
    } else {
        run(model, domain, policy, t, x, cfg, true, eps, false)
    }
}

/// Two stopped batches driven by the same increments path by path.
pub fn crn_pair(
    model: &dyn SdeModel,
    domain: &SpaceTimeDomain,
    policy: &Policy,
    start1: (f64, &[f64]),
    start2: (f64, &[f64]),
    cfg: &SimConfig,
) -> Result<(PathBatch, PathBatch)> {
    let a = simulate_stopped(model, domain, policy, start1.0, start1.1, cfg)?;
    let b = simulate_stopped(model, domain, policy, start2.0, start2.1, cfg)?;
    Ok((a, b))
}

/// `sup_s ‖X¹_s − X²_s‖` per path over the common grid, for batches with trajectories.
pub fn max_separation(a: &PathBatch, b: &PathBatch) -> Option<Vec<f64>> {
    let n = a.start_x.len();
    a.paths
        .iter()
        .zip(&b.paths)
        .map(|(p, q)| {
            let (s1, s2) = (&p.trajectory.as_ref()?.states, &q.trajectory.as_ref()?.states);
            let m = s1.len().min(s2.len()) / n;
            Some(
                (0..m)
                    .map(|k| (0..n).map(|i| (s1[k * n + i] - s2[k * n + i]).powi(2)).sum::<f64>().sqrt())
                    .fold(0.0, f64::max),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_scenario, Example41, FnModel};

    fn det() -> (Example41, SpaceTimeDomain, Policy) {
        let s = builtin_scenario("example41_deterministic").unwrap();
        (Example41::deterministic(), s.domain, Policy::constant("c", vec![0.0]))
    }

    #[test]
    fn grid_lands_on_horizon() {
        let g = time_grid(0.3, 2.0, 0.25);
        assert_eq!(g.len(), 8);
        assert_eq!(*g.last().unwrap(), 2.0);
        assert!((g[6] - 1.8).abs() < 1e-15);
        let g = time_grid(0.0, 2.0, 1e-3);
        assert_eq!(g.len(), 2001);
        assert_eq!(time_grid(2.0, 2.0, 0.1), vec![2.0]);
    }

    #[test]
    fn deterministic_exit_times() {
        let (m, d, p) = det();
        let cfg = SimConfig::new(1e-4, 1, 0);
        let up = simulate_stopped(&m, &d, &p, 0.0, &[0.01], &cfg).unwrap();
        let r = &up.paths[0];
        assert!((r.exit_time - 0.9).abs() < 2e-3, "{}", r.exit_time);
        assert_eq!(r.exit_face, ExitFace::Lateral);
        assert!((r.exit_state[0] - 1.0).abs() < 1e-12);
        assert!((r.cost() - r.exit_time).abs() < 1e-9);

        let down = simulate_stopped(&m, &d, &p, 0.0, &[-0.01], &cfg).unwrap();
        assert_eq!(down.paths[0].exit_time, 2.0);
        assert_eq!(down.paths[0].exit_face, ExitFace::Terminal);
    }

    #[test]
    fn outside_start_exits_immediately() {
        let (m, d, p) = det();
        let b = simulate_stopped(&m, &d, &p, 0.4, &[1.5], &SimConfig::new(1e-3, 3, 1)).unwrap();
        for r in &b.paths {
            assert_eq!(r.exit_time, 0.4);
            assert_eq!(r.running_cost, 0.0);
        }
    }

    #[test]
    fn halving_dt_moves_exit_time_by_order_dt() {
        let (m, d, p) = det();
        let tau =
            |dt| simulate_stopped(&m, &d, &p, 0.0, &[0.01], &SimConfig::new(dt, 1, 0)).unwrap().paths[0].exit_time;
        let (a, b, c) = (tau(4e-3), tau(2e-3), tau(1e-3));
        // Euler overshoots the flow by about s·dt, so the crossing comes ~4.5·dt early.
        assert!((a - 0.9).abs() <= 6.0 * 4e-3);
        assert!((c - 0.9).abs() <= (a - 0.9).abs() + 1e-12);
        assert!((b - c).abs() <= 6.0 * 2e-3);
    }

    #[test]
    fn penalized_constant_outside_path() {
        let m = FnModel::new("still", 1, 1, 1).running_cost(|_, _, _| 1.0);
        let d = SpaceTimeDomain::new(SpaceDomain::interval(-1.0, 1.0).unwrap(), 1.0).unwrap();
        let p = Policy::constant("c", vec![0.0]);
        let cfg = SimConfig::new(1e-3, 1, 0).with_trajectories(true);
        let b = simulate_penalized(&m, &d, &p, 0.0, &[1.5], &cfg, &[0.5], false).unwrap();
        let r = &b.paths[0];
        assert!((r.lambda_log_integral - 0.5).abs() < 1e-12);
        assert!(((-r.lambda_log_integral / 0.5).exp() - (-1f64).exp()).abs() < 1e-12);
        // ∫_0^1 e^{-s} ds with left-endpoint sums
        assert!((r.penalized[0] - (1.0 - (-1f64).exp())).abs() < 1e-3);
        assert_eq!(r.penalized_from_trajectory(&b.times, 0.5).unwrap(), r.penalized[0]);
    }

    #[test]
    fn penalized_path_inside_closure_has_unit_lambda() {
        let (m, d, p) = det();
        let b =
            simulate_penalized(&m, &d, &p, 0.0, &[-0.01], &SimConfig::new(1e-4, 1, 0), &[0.1, 0.01], false).unwrap();
        let r = &b.paths[0];
        assert_eq!(r.lambda_log_integral, 0.0);
        assert_eq!(r.penalized, vec![r.full_horizon_cost; 2]);
        assert!((r.full_horizon_cost - 2.0).abs() < 1e-9);
    }

    #[test]
    fn stopped_and_penalized_agree_up_to_exit() {
        let m = Example41::stochastic();
        let s = builtin_scenario("example41_stochastic").unwrap();
        let p = Policy::constant("c", vec![0.0]);
        let cfg = SimConfig::new(1e-3, 64, 11).with_trajectories(true);
        let a = simulate_stopped(&m, &s.domain, &p, 0.5, &[0.3], &cfg).unwrap();
        let b = simulate_penalized(&m, &s.domain, &p, 0.5, &[0.3], &cfg, &[0.05], false).unwrap();
        for (u, v) in a.paths.iter().zip(&b.paths) {
            assert_eq!(u.exit_time, v.exit_time);
            assert_eq!(u.running_cost, v.running_cost);
            let su = &u.trajectory.as_ref().unwrap().states;
            let sv = &v.trajectory.as_ref().unwrap().states;
            assert_eq!(su[..], sv[..su.len()]);
            assert!(v.penalized[0] >= u.cost());
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let m = Example41::stochastic();
        let s = builtin_scenario("example41_stochastic").unwrap();
        let p = Policy::constant("c", vec![0.0]);
        let cfg = SimConfig::new(1e-3, 200, 5);
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let multi = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = serial.install(|| simulate_stopped(&m, &s.domain, &p, 0.2, &[0.1], &cfg).unwrap());
        let b = multi.install(|| simulate_stopped(&m, &s.domain, &p, 0.2, &[0.1], &cfg).unwrap());
        let key = |b: &PathBatch| -> Vec<(u64, u64, u64)> {
            b.paths
                .iter()
                .map(|p| (p.exit_time.to_bits(), p.exit_state[0].to_bits(), p.running_cost.to_bits()))
                .collect()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn bridge_correction_only_shortens_exit_times() {
        let m = Example41::stochastic();
        let s = builtin_scenario("example41_stochastic").unwrap();
        let p = Policy::constant("c", vec![0.0]);
        let cfg = SimConfig::new(1e-2, 300, 2);
        let plain = simulate_stopped(&m, &s.domain, &p, 0.5, &[0.0], &cfg).unwrap();
        let bridged = simulate_stopped(
            &m,
            &s.domain,
            &p,
            0.5,
            &[0.0],
            &cfg.clone().with_exit_detection(ExitDetection::BridgeCorrected),
        )
        .unwrap();
        let mut shorter = 0;
        for (a, b) in plain.paths.iter().zip(&bridged.paths) {
            assert!(b.exit_time <= a.exit_time);
            shorter += (b.exit_time < a.exit_time) as usize;
            if b.exit_face == ExitFace::Lateral {
                assert!(s.domain.space.signed_distance(&b.exit_state).abs() < 1e-9);
            }
        }
        assert!(shorter > 0);
    }

    #[test]
    fn clipping_is_flagged() {
        let m = FnModel::new("blowup", 1, 1, 1).drift(|_, x, _, b| b[0] = 10.0 * x[0] * x[0]);
        let d = SpaceTimeDomain::new(SpaceDomain::interval(-1.0, 1.0).unwrap(), 1.0).unwrap();
        let p = Policy::constant("c", vec![0.0]);
        let mut cfg = SimConfig::new(0.1, 1, 0);
        cfg.clip_bound = 10.0;
        let b = simulate_penalized(&m, &d, &p, 0.0, &[0.9], &cfg, &[1.0], false).unwrap();
        assert!(b.paths[0].clipped);
        assert_eq!(b.clipped_count(), 1);
    }

    #[test]
    fn path_dump_round_trip() {
        let m = Example41::stochastic();
        let s = builtin_scenario("example41_stochastic").unwrap();
        let p = Policy::constant("c", vec![0.0]);
        let b = simulate_stopped(&m, &s.domain, &p, 0.5, &[0.2], &SimConfig::new(1e-2, 5, 3)).unwrap();
        let mut buf = Vec::new();
        b.write_path_dump(&mut buf).unwrap();
        let d = read_path_dump(buf.as_slice()).unwrap();
        assert_eq!(d.paths.len(), 5);
        assert_eq!(d.seed, 3);
        for (x, y) in d.paths.iter().zip(&b.paths) {
            assert_eq!(x.exit_time, y.exit_time);
            assert_eq!(x.running_cost, y.running_cost);
        }
        let mut csv = Vec::new();
        b.write_summary_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 6);
    }
}
