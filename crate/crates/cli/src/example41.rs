use exitcontrol::diagnostics::{dini_curve, immediate_exit_test, jump_probe, sandwich_test};
use exitcontrol::hjb::{solve_hjb, FdScheme};
use exitcontrol::regularity::{scan_boundary, BoundaryGrid};
use exitcontrol::simulate::simulate_stopped;
use exitcontrol::value::estimate_value;
use exitcontrol::{builtin_scenario, ExitFace, Policy, Result, SimConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::run::Context;
use crate::Example41Args;

const DET_DT: f64 = 1e-4;
const DET_DELTA: f64 = 1e-3;
const JUMP_TOL: f64 = 0.01;
const EXIT_TOL: f64 = 0.002;
const IMMEDIATE_DT: f64 = 1e-6;
const IMMEDIATE_PATHS: usize = 10_000;
const MIN_HIT_FRACTION: f64 = 0.98;
const FORMULA_TOL: f64 = 1e-10;
const FD_DX: f64 = 0.01;
const FD_SLACK: f64 = 0.05;

#[derive(Serialize)]
struct Check {
    name: &'static str,
    pass: bool,
    detail: Value,
}

fn parabola(t: f64) -> Vec<f64> {
    vec![-t * t + 2.0 * t]
}

fn boundary_samples() -> Vec<(f64, Vec<f64>)> {
    [1.0, -1.0].iter().flat_map(|&y| [0.25, 0.75, 1.25, 1.75].map(|t| (t, vec![y]))).collect()
}

/// The tangency example end to end: deterministic discontinuity, exit times,
/// stochastic continuity, boundary formulas, Dini curve, sandwich, immediate
/// exit and, unless skipped, the finite-difference comparison.
pub fn run(ctx: &mut Context, a: &Example41Args) -> Result<bool> {
    let det = builtin_scenario("example41_deterministic")?;
    let sto = builtin_scenario("example41_stochastic")?;
    let single = vec![Policy::constant("a0", vec![0.0])];
    let cfg = ctx.sim.clone();
    let mut checks = Vec::new();

    // Along the parabola the one-sided values differ by 1 in the limit and by 1 + √δ at offset δ.
    let times = [0.1, 0.3, 0.5, 0.7, 0.9];
    let j = jump_probe(
        det.model.as_ref(),
        &det.domain,
        &single,
        &parabola,
        &times,
        &[DET_DELTA],
        0,
        &SimConfig::new(DET_DT, 1, 0),
    )?;
    let expected = 1.0 + DET_DELTA.sqrt();
    checks.push(Check {
        name: "deterministic_jump",
        pass: j.rows.iter().all(|r| (r.gap - expected).abs() <= JUMP_TOL),
        detail: json!({"limit": 1.0, "expected_at_offset": expected, "offset": DET_DELTA, "rows": j.rows}),
    });

    let p = &single[0];
    let det_cfg = SimConfig::new(DET_DT, 1, 0);
    let above = simulate_stopped(det.model.as_ref(), &det.domain, p, 0.0, &[0.01], &det_cfg)?;
    let below = simulate_stopped(det.model.as_ref(), &det.domain, p, 0.0, &[-0.01], &det_cfg)?;
    let (ta, tb) = (above.paths[0].exit_time, below.paths[0].exit_time);
    checks.push(Check {
        name: "exit_times",
        pass: (ta - 0.9).abs() <= EXIT_TOL
            && above.paths[0].exit_face == ExitFace::Lateral
            && tb == det.domain.horizon
            && below.paths[0].exit_face == ExitFace::Terminal,
        detail: json!({"tau_above": ta, "expected_above": 0.9, "tau_below": tb, "expected_below": det.domain.horizon}),
    });

    let j = jump_probe(sto.model.as_ref(), &sto.domain, &single, &parabola, &[0.5], &[0.04, 0.02, 0.01], 0, &cfg)?;
    let excludes_one = j.rows.iter().all(|r| (r.gap - 1.0).abs() > r.ci_half_width);
    let shrinking = j.rows.windows(2).all(|w| w[1].gap <= w[0].gap + w[0].ci_half_width + w[1].ci_half_width);
    checks.push(Check {
        name: "stochastic_continuity",
        pass: excludes_one && shrinking,
        detail: json!({"rows": j.rows}),
    });

    let btimes: Vec<f64> = (1..=39).map(|k| k as f64 * 0.05).collect();
    let r = scan_boundary(
        sto.model.as_ref(),
        &sto.domain,
        &sto.controls,
        &BoundaryGrid::new(btimes, vec![vec![1.0], vec![-1.0]]),
    )?;
    let mut worst: f64 = 0.0;
    for q in &r.points {
        let (t, y) = (q.t, q.y[0]);
        let (gen, sig) = if y > 0.0 {
            (-2.0 * (t - 1.0), (2.0 * t - 1.0).max(0.0))
        } else {
            (2.0 * (t - 1.0), (2.0 * t + 1.0).max(0.0))
        };
        worst = worst.max((q.terms[0].generator - gen).abs()).max((q.terms[0].sigma_term - sig).abs());
    }
    checks.push(Check {
        name: "boundary_formulas",
        pass: worst <= FORMULA_TOL && r.condition6_everywhere,
        detail: json!({"max_formula_error": worst, "condition6_everywhere": r.condition6_everywhere, "points": r.points.len()}),
    });

    let c = dini_curve(sto.model.as_ref(), &sto.domain, &single, &boundary_samples(), ctx.eps(), &cfg)?;
    checks.push(Check { name: "dini_curve", pass: c.monotone, detail: json!({"eps": c.eps, "h": c.h, "ci": c.ci}) });

    let eps = *ctx.eps().last().unwrap_or(&0.05);
    let interior = vec![(0.5, vec![0.0]), (1.0, vec![0.5]), (0.25, vec![-0.5])];
    let s = sandwich_test(sto.model.as_ref(), &sto.domain, &single, &interior, &boundary_samples(), eps, &cfg)?;
    let upper_ok = s.rows.iter().all(|row| row.upper_excess <= row.combined_ci);
    checks.push(Check {
        name: "sandwich",
        pass: s.lower_holds_exactly && upper_ok,
        detail: serde_json::to_value(&s).unwrap_or(Value::Null),
    });

    let icfg = SimConfig::new(IMMEDIATE_DT, cfg.n_paths.min(IMMEDIATE_PATHS), cfg.seed);
    let drift = immediate_exit_test(sto.model.as_ref(), &sto.domain, &[0.0], 0.25, &[1.0], 0.01, &icfg)?;
    let noise = immediate_exit_test(sto.model.as_ref(), &sto.domain, &[0.0], 1.5, &[1.0], 0.01, &icfg)?;
    let inward = immediate_exit_test(det.model.as_ref(), &det.domain, &[0.0], 0.5, &[-1.0], 0.01, &icfg)?;
    checks.push(Check {
        name: "immediate_exit",
        pass: drift.fraction == 1.0 && noise.fraction >= MIN_HIT_FRACTION && inward.fraction == 0.0,
        detail: json!({"drift": drift.fraction, "diffusion": noise.fraction, "inward": inward.fraction, "threshold": MIN_HIT_FRACTION}),
    });

    if !a.skip_fd {
        let sol = solve_hjb(sto.model.as_ref(), &sto.domain, &sto.controls, &FdScheme::new(vec![FD_DX]))?;
        let mut rows = Vec::new();
        let mut pass = true;
        for t in [0.25, 0.75, 1.25] {
            for x in [-0.5, 0.0, 0.5] {
                let fd = sol.field.interpolate(t, &[x]);
                let mc = estimate_value(sto.model.as_ref(), &sto.domain, &single, t, &[x], &cfg)?;
                pass &= (fd - mc.mean).abs() <= 2.0 * (mc.ci_half_width + FD_SLACK);
                rows.push(json!({"t": t, "x": x, "fd": fd, "mc": mc.mean, "mc_ci": mc.ci_half_width}));
            }
        }
        checks.push(Check { name: "fd_vs_monte_carlo", pass, detail: json!({"fd_dt": sol.dt, "rows": rows}) });
    }

    for c in &checks {
        println!("{:<24} {}", c.name, if c.pass { "PASS" } else { "FAIL" });
    }
    let pass = checks.iter().all(|c| c.pass);
    ctx.report("example41.json", "example41", &checks)?;
    Ok(pass)
}
