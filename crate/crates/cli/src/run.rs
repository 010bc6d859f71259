use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use exitcontrol::config::{parse_override, ScenarioConfig};
use exitcontrol::{Error, Result, Scenario, SimConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{commands, example41, Cli, Command};

pub const SCHEMA_VERSION: u32 = 1;

pub struct Context {
    pub config: ScenarioConfig,
    pub scenario: Scenario,
    pub sim: SimConfig,
    pub out: PathBuf,
    /// Whether the time step came from the command line or an override.
    pub dt_explicit: bool,
    outputs: Vec<String>,
}

impl Context {
    pub fn eps(&self) -> &[f64] {
        &self.config.run.eps
    }

    /// Create `name` in the output directory and remember it for the manifest.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<fs::File>> {
        let path = self.out.join(name);
        self.outputs.push(path.display().to_string());
        Ok(BufWriter::new(fs::File::create(path)?))
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        let path = self.out.join(name);
        let shown = path.display().to_string();
        if !self.outputs.contains(&shown) {
            self.outputs.push(shown);
        }
        path
    }

    /// Write a versioned JSON report.
    pub fn report(&mut self, name: &str, command: &str, result: &impl Serialize) -> Result<()> {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "scenario": self.config.label(),
            "result": result,
        });
        let text = serde_json::to_string_pretty(&body).map_err(|e| Error::Format(e.to_string()))?;
        let path = self.path(name);
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let g = &cli.global;
    let mut overrides = Vec::new();
    if let Some(s) = g.seed {
        overrides.push(("run.seed".to_string(), s.to_string()));
    }
    if let Some(dt) = g.dt {
        overrides.push(("run.dt".to_string(), format!("{dt:e}")));
    }
    if let Some(p) = g.paths {
        overrides.push(("run.paths".to_string(), p.to_string()));
    }
    if let Some(eps) = &g.eps {
        let list: Vec<String> = eps.iter().map(|e| format!("{e:e}")).collect();
        overrides.push(("run.eps".to_string(), format!("[{}]", list.join(", "))));
    }
    for s in &g.overrides {
        overrides.push(parse_override(s)?);
    }
    match &g.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            ScenarioConfig::from_toml(&text, &overrides).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })
        }
        None => ScenarioConfig::builtin(&g.scenario).with_overrides(&overrides),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Value(_) => "value",
        Command::Hjb(_) => "hjb",
        Command::Regularity(_) => "regularity",
        Command::Diagnose(_) => "diagnose",
        Command::Example41(_) => "example41",
        Command::Dini(_) => "dini",
    }
}

#[derive(Serialize)]
struct RunManifest {
    schema_version: u32,
    toolkit_version: &'static str,
    command: &'static str,
    scenario: String,
    config_path: Option<String>,
    effective_config: String,
    parameters: Value,
    seed: u64,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
    pass: bool,
}

pub fn execute(cli: &Cli) -> Result<bool> {
    let start = Instant::now();
    if let Some(n) = cli.global.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--workers: {e}")))?;
    }
    let config = load_config(cli)?;
    let scenario = config.build()?;
    let sim = config.run.sim_config()?;
    fs::create_dir_all(&cli.global.out)?;
    let dt_explicit =
        cli.global.dt.is_some() || cli.global.overrides.iter().any(|o| o.trim_start().starts_with("run.dt"));
    let mut ctx = Context { config, scenario, sim, out: cli.global.out.clone(), dt_explicit, outputs: Vec::new() };

    let pass = match &cli.command {
        Command::Simulate(a) => commands::simulate(&mut ctx, a)?,
        Command::Value(a) => commands::value(&mut ctx, a)?,
        Command::Hjb(a) => commands::hjb(&mut ctx, a)?,
        Command::Regularity(a) => commands::regularity(&mut ctx, a)?,
        Command::Diagnose(a) => commands::diagnose(&mut ctx, a)?,
        Command::Example41(a) => example41::run(&mut ctx, a)?,
        Command::Dini(a) => commands::dini(&mut ctx, a)?,
    };

    let name = command_name(&cli.command);
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        toolkit_version: env!("CARGO_PKG_VERSION"),
        command: name,
        scenario: ctx.config.label(),
        config_path: cli.global.config.as_ref().map(|p| p.display().to_string()),
        effective_config: ctx.config.to_toml()?,
        parameters: serde_json::to_value(&cli.command).map_err(|e| Error::Format(e.to_string()))?,
        seed: ctx.config.run.seed,
        outputs: ctx.outputs.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        pass,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(ctx.out.join(format!("manifest_{name}.json")), text + "\n")?;
    fs::write(ctx.out.join(format!("effective_{name}.toml")), &manifest.effective_config)?;
    Ok(pass)
}

/// `t:x0,x1;t:x0,...`.
pub fn parse_points(s: &str) -> Result<Vec<(f64, Vec<f64>)>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (t, x) = p.split_once(':').ok_or_else(|| Error::Config(format!("point `{p}` is not t:x")))?;
            let num = |v: &str| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("point `{p}`: {e}")));
            Ok((num(t)?, x.split(',').map(num).collect::<Result<Vec<_>>>()?))
        })
        .collect()
}
