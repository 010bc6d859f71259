use std::io::Write;
use std::sync::Arc;

use exitcontrol::diagnostics::{
    append_session_csv, dini_curve, dwell_time_test, immediate_exit_test, jump_probe, martingale_hitting_test,
    modulus_probe, sandwich_test, DiagnosticRecord, PairSampling, SigmaHat,
};
use exitcontrol::hjb::{solve_hjb, CrossTerms, FdScheme};
use exitcontrol::model::expr::CompiledExpr;
use exitcontrol::regularity::{scan_boundary, BoundaryGrid};
use exitcontrol::simulate::{simulate_penalized, simulate_stopped};
use exitcontrol::value::{build_value_field, estimate_penalized_values, estimate_value, FieldMode, GridSpec};
use exitcontrol::{Axis, Error, Policy, Result, ValueField};
use serde_json::json;

use crate::run::{parse_points, Context};
use crate::{DiagnoseArgs, DiagnosticName, DiniArgs, HjbArgs, RegularityArgs, SimulateArgs, ValueArgs};

const IMMEDIATE_EXIT_DT: f64 = 1e-6;
const MIN_HIT_FRACTION: f64 = 0.98;
const DWELL_LOWER: f64 = 0.3;
const DWELL_MAX_VARIATION: f64 = 0.3;
const RESIDUAL_FACTOR: f64 = 3.0;

fn check_dim(what: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension { what, expected: n, got: v.len() });
    }
    Ok(())
}

fn spacing(dx: &[f64], n: usize) -> Result<Vec<f64>> {
    match dx.len() {
        1 => Ok(vec![dx[0]; n]),
        k if k == n => Ok(dx.to_vec()),
        k => Err(Error::Dimension { what: "--dx", expected: n, got: k }),
    }
}

fn space_axes(ctx: &Context, nodes: usize) -> Result<Vec<Axis>> {
    let (lo, hi) = ctx.scenario.domain.space.bounding_box().ok_or_else(|| Error::UnsupportedDomain {
        shape: ctx.scenario.domain.space.shape().name().into(),
        reason: "field grids need a bounding box".into(),
    })?;
    lo.iter().zip(&hi).map(|(&l, &h)| Axis::new(l, h, nodes)).collect()
}

/// Boundary samples `((k + ½)·T/n, y)` for every boundary point `y`.
fn boundary_samples(ctx: &Context, times: usize, per_axis: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    let d = &ctx.scenario.domain;
    let points = d.space.boundary_samples(per_axis)?;
    let n = times.max(1);
    let mut out = Vec::with_capacity(n * points.len());
    for y in &points {
        for k in 0..n {
            out.push(((k as f64 + 0.5) * d.horizon / n as f64, y.clone()));
        }
    }
    Ok(out)
}

fn policies(ctx: &Context) -> Vec<Policy> {
    ctx.scenario.controls.constant_policies()
}

fn write_field(ctx: &mut Context, stem: &str, field: &ValueField) -> Result<()> {
    let mut w = ctx.create(&format!("{stem}.csv"))?;
    field.write_csv(&mut w)?;
    w.flush()?;
    let mut w = ctx.create(&format!("{stem}.bin"))?;
    field.write_binary(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn simulate(ctx: &mut Context, a: &SimulateArgs) -> Result<bool> {
    let s = &ctx.scenario;
    check_dim("--x", &a.x, s.domain.dim())?;
    let control = s.controls.points().get(a.control).cloned().ok_or_else(|| {
        Error::Config(format!("--control {} out of range ({} controls)", a.control, s.controls.len()))
    })?;
    let policy = Policy::constant(format!("a{}", a.control), control);
    let batch = if a.penalized {
        simulate_penalized(s.model.as_ref(), &s.domain, &policy, a.t, &a.x, &ctx.sim, ctx.eps(), false)?
    } else {
        simulate_stopped(s.model.as_ref(), &s.domain, &policy, a.t, &a.x, &ctx.sim)?
    };
    let mut w = ctx.create("simulate_summary.csv")?;
    batch.write_summary_csv(&mut w)?;
    w.flush()?;
    if a.dump {
        let mut w = ctx.create("simulate_paths.bin")?;
        batch.write_path_dump(&mut w)?;
        w.flush()?;
    }
    let (mean, ci) = exitcontrol::value::mean_ci(&batch.stopped_costs());
    let lateral = batch.paths.iter().filter(|p| p.exit_face == exitcontrol::ExitFace::Lateral).count();
    println!(
        "paths {}  lateral exits {}  clipped {}  stopped cost {mean:.6} ± {ci:.6}",
        batch.n_paths(),
        lateral,
        batch.clipped_count()
    );
    ctx.report(
        "simulate.json",
        "simulate",
        &json!({
            "t": a.t, "x": a.x, "policy": batch.policy_id, "dt": batch.dt, "n_paths": batch.n_paths(),
            "lateral_exits": lateral, "clipped": batch.clipped_count(),
            "stopped_cost": {"mean": mean, "ci_half_width": ci},
        }),
    )?;
    Ok(true)
}

pub fn value(ctx: &mut Context, a: &ValueArgs) -> Result<bool> {
    let mut pols = policies(ctx);
    let s = &ctx.scenario;
    if let Some(dx) = a.hjb_policy {
        let scheme = FdScheme::new(spacing(&[dx], s.domain.dim())?);
        pols.push(solve_hjb(s.model.as_ref(), &s.domain, &s.controls, &scheme)?.policy);
    }
    let (model, domain) = (s.model.clone(), s.domain.clone());
    if a.field {
        let grid = GridSpec::new(Axis::new(0.0, domain.horizon, a.time_nodes)?, space_axes(ctx, a.space_nodes)?)?;
        let mut summary = Vec::new();
        let modes: Vec<(String, FieldMode)> = if a.penalized {
            ctx.eps().iter().map(|&e| (format!("value_field_eps_{e}"), FieldMode::Penalized(e))).collect()
        } else {
            vec![("value_field".to_string(), FieldMode::Stopped)]
        };
        for (stem, mode) in modes {
            let f = build_value_field(model.as_ref(), &domain, &pols, &grid, &ctx.sim, mode)?;
            write_field(ctx, &stem, &f)?;
            let lo = f.values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = f.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            println!("{stem}: {} nodes, values in [{lo:.6}, {hi:.6}]", f.len());
            summary.push(json!({"file": stem, "nodes": f.len(), "min": lo, "max": hi}));
        }
        ctx.report("value.json", "value", &summary)?;
    } else {
        let x = a.x.clone().ok_or_else(|| Error::Config("`value` needs --x or --field".into()))?;
        check_dim("--x", &x, domain.dim())?;
        let result = if a.penalized {
            let ests = estimate_penalized_values(model.as_ref(), &domain, &pols, a.t, &x, &ctx.sim, ctx.eps())?;
            for (e, v) in ctx.eps().iter().zip(&ests) {
                println!("eps {e}: {:.6} ± {:.6} ({})", v.mean, v.ci_half_width, v.policy_id);
            }
            json!({"t": a.t, "x": x, "eps": ctx.eps(), "estimates": ests})
        } else {
            let v = estimate_value(model.as_ref(), &domain, &pols, a.t, &x, &ctx.sim)?;
            println!("{:.6} ± {:.6} ({})", v.mean, v.ci_half_width, v.policy_id);
            json!({"t": a.t, "x": x, "estimate": v})
        };
        ctx.report("value.json", "value", &result)?;
    }
    Ok(true)
}

pub fn hjb(ctx: &mut Context, a: &HjbArgs) -> Result<bool> {
    let s = &ctx.scenario;
    let n = s.domain.dim();
    let mut scheme = FdScheme::new(spacing(&a.dx, n)?).with_output_time_nodes(a.output_times);
    if let Some(dt) = a.step {
        scheme = scheme.with_dt(dt);
    }
    if a.wide_stencil {
        scheme = scheme.with_cross_terms(CrossTerms::WideStencil);
    }
    let (model, domain, controls) = (s.model.clone(), s.domain.clone(), s.controls.clone());
    let sol = solve_hjb(model.as_ref(), &domain, &controls, &scheme)?;
    eprintln!("hjb: dx {:?}, dt {:.3e}, {} steps, {} output times", sol.dx, sol.dt, sol.steps, sol.field.time.n);
    write_field(ctx, "hjb_field", &sol.field)?;

    let mut w = ctx.create("hjb_policy.csv")?;
    let mut header = String::from("t");
    for k in 0..n {
        header.push_str(&format!(",x{k}"));
    }
    for k in 0..controls.dim {
        header.push_str(&format!(",a{k}"));
    }
    writeln!(w, "{header}")?;
    for i in 0..sol.field.len() {
        let (t, x) = sol.field.coords(i);
        let mut row = format!("{t}");
        for v in &x {
            row.push_str(&format!(",{v}"));
        }
        for v in sol.policy.control_at(t, &x) {
            row.push_str(&format!(",{v}"));
        }
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    ctx.report(
        "hjb.json",
        "hjb",
        &json!({"dx": sol.dx, "dt": sol.dt, "steps": sol.steps, "output_times": sol.field.time.n, "scheme": scheme}),
    )?;
    Ok(true)
}

pub fn regularity(ctx: &mut Context, a: &RegularityArgs) -> Result<bool> {
    let s = &ctx.scenario;
    let mut grid = BoundaryGrid::for_domain(&s.domain, a.times, a.per_axis)?.with_margin(a.margin);
    if a.no_condition9 {
        grid = grid.with_condition9(None);
    }
    let report = scan_boundary(s.model.as_ref(), &s.domain, &s.controls, &grid)?;
    print!("{}", report.to_table());
    ctx.report("regularity.json", "regularity", &report)?;
    Ok(report.all_pass())
}

fn sigma_hat(src: &str) -> Result<SigmaHat> {
    let e = Arc::new(CompiledExpr::compile(src, 1, 1)?);
    Ok(SigmaHat::new(src, move |s, m| e.eval(s, &[m], &[0.0])))
}

fn curve(src: &str, dim: usize, axis: usize) -> Result<impl Fn(f64) -> Vec<f64>> {
    let e = CompiledExpr::compile(src, 1, 1)?;
    Ok(move |t: f64| {
        let mut x = vec![0.0; dim];
        x[axis] = e.eval(t, &[0.0], &[0.0]);
        x
    })
}

fn finish(ctx: &mut Context, name: &str, record: DiagnosticRecord, detail: serde_json::Value) -> Result<bool> {
    println!(
        "{}: statistic {:.6}, threshold {}, {}",
        record.test,
        record.statistic,
        record.threshold,
        if record.pass { "PASS" } else { "FAIL" }
    );
    let path = ctx.path("session.csv");
    append_session_csv(&path, std::slice::from_ref(&record))?;
    let pass = record.pass;
    ctx.report(&format!("diagnose_{name}.json"), "diagnose", &json!({"record": record, "detail": detail}))?;
    Ok(pass)
}

fn to_json(v: &impl serde::Serialize) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

pub fn diagnose(ctx: &mut Context, a: &DiagnoseArgs) -> Result<bool> {
    let s = ctx.scenario.clone();
    let (model, domain) = (s.model.as_ref(), &s.domain);
    let pols = policies(ctx);
    let n = domain.dim();
    let cfg = ctx.sim.clone();
    match a.test {
        DiagnosticName::ImmediateExit => {
            let y = a.y.clone().ok_or_else(|| Error::Config("immediate-exit needs --y".into()))?;
            check_dim("--y", &y, n)?;
            let control = a.control.clone().unwrap_or_else(|| s.controls.points()[0].clone());
            let cfg = if ctx.dt_explicit { cfg } else { cfg.with_dt(IMMEDIATE_EXIT_DT) };
            let r = immediate_exit_test(model, domain, &control, a.t, &y, a.delta, &cfg)?;
            let record = r.record(a.threshold.unwrap_or(MIN_HIT_FRACTION));
            finish(ctx, "immediate_exit", record, to_json(&r)?)
        }
        DiagnosticName::Martingale => {
            let sigma = match &a.sigma_hat {
                Some(src) => sigma_hat(src)?,
                None => SigmaHat::default(),
            };
            let r = martingale_hitting_test(&sigma, a.t, a.delta, a.n_steps, cfg.n_paths, cfg.seed)?;
            finish(ctx, "martingale", r.record(a.threshold.unwrap_or(MIN_HIT_FRACTION)), to_json(&r)?)
        }
        DiagnosticName::Dwell => {
            let x = a.y.clone().ok_or_else(|| Error::Config("dwell needs --y (the interior point)".into()))?;
            check_dim("--y", &x, n)?;
            let r = dwell_time_test(model, domain, &pols, a.t, &x, &a.hs, a.steps_per_cell, cfg.n_paths, cfg.seed)?;
            finish(ctx, "dwell", r.record(a.threshold.unwrap_or(DWELL_LOWER), DWELL_MAX_VARIATION), to_json(&r)?)
        }
        DiagnosticName::Sandwich => {
            let interior = parse_points(a.points.as_deref().unwrap_or(""))?;
            if interior.is_empty() {
                return Err(Error::Config("sandwich needs --points".into()));
            }
            let boundary = boundary_samples(ctx, a.boundary_times, a.per_axis)?;
            let eps = *ctx.eps().first().ok_or_else(|| Error::Config("run.eps is empty".into()))?;
            let r = sandwich_test(model, domain, &pols, &interior, &boundary, eps, &cfg)?;
            finish(ctx, "sandwich", r.record(), to_json(&r)?)
        }
        DiagnosticName::Jump => {
            if a.axis >= n {
                return Err(Error::Dimension { what: "--axis", expected: n, got: a.axis });
            }
            let c = curve(&a.curve, n, a.axis)?;
            let r = jump_probe(model, domain, &pols, &c, &a.times, &a.offsets, a.axis, &cfg)?;
            let mut record = r.record();
            if let Some(th) = a.threshold {
                record.threshold = th;
                record.pass = record.statistic <= th;
            }
            for row in &r.rows {
                println!("t {}  delta {}  diff {:.6} ± {:.6}", row.t, row.delta, row.diff, row.ci_half_width);
            }
            finish(ctx, "jump", record, to_json(&r)?)
        }
        DiagnosticName::Modulus => {
            let sampling = match a.local.as_deref() {
                None => PairSampling::Independent,
                Some([dx, dt]) => PairSampling::Local { max_dx: *dx, max_dt: *dt },
                Some(v) => return Err(Error::Config(format!("--local takes dx,dt; got {v:?}"))),
            };
            let eps = *ctx.eps().first().ok_or_else(|| Error::Config("run.eps is empty".into()))?;
            let factor = a.threshold.unwrap_or(RESIDUAL_FACTOR);
            let r = modulus_probe(model, domain, &pols, eps, a.pairs, sampling, factor, &cfg)?;
            println!(
                "slope {:.6}, envelope {:.6}, free-fit intercept {:.6} ± {:.6}",
                r.slope, r.envelope, r.free_intercept, r.free_intercept_ci
            );
            finish(ctx, "modulus", r.record(), to_json(&r)?)
        }
    }
}

pub fn dini(ctx: &mut Context, a: &DiniArgs) -> Result<bool> {
    let s = ctx.scenario.clone();
    let samples = boundary_samples(ctx, a.times, a.per_axis)?;
    let pols = policies(ctx);
    let c = dini_curve(s.model.as_ref(), &s.domain, &pols, &samples, ctx.eps(), &ctx.sim)?;
    let mut w = ctx.create("dini.csv")?;
    writeln!(w, "eps,h,ci,argmax_t,argmax_x")?;
    for (k, &e) in c.eps.iter().enumerate() {
        let (t, y) = &c.samples[c.argmax[k]];
        let y: Vec<String> = y.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{e},{},{},{t},{}", c.h[k], c.ci[k], y.join(" "))?;
        println!("eps {e}: h {:.6} ± {:.6}", c.h[k], c.ci[k]);
    }
    w.flush()?;
    println!("monotone: {}", c.monotone);
    let record = c.record();
    let path = ctx.path("session.csv");
    append_session_csv(&path, std::slice::from_ref(&record))?;
    ctx.report("dini.json", "dini", &c)?;
    Ok(c.monotone)
}
