//! Scenario files.
//!
//! A scenario is either a built-in name or a model given by coefficient
//! expressions, plus a domain, a control set and run parameters:
//!
//! ```toml
//! horizon = 1.0
//!
//! [model]
//! dim_state = 1
//! drift = ["0"]
//! diffusion = ["1"]
//! running_cost = "1"
//!
//! [domain]
//! type = "interval"
//! lo = -1.0
//! hi = 1.0
//!
//! [controls]
//! type = "singleton"
//! points = [[0.0]]
//!
//! [run]
//! seed = 7
//! dt = 1e-3
//! ```
//!
//! Overrides are flat `dotted.key=value` pairs applied to the parsed table
//! before it is interpreted; values use TOML syntax and fall back to strings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GradMode, SpaceDomain, SpaceTimeDomain};
use crate::model::expr::{ExprModel, ExprModelSpec};
use crate::model::{builtin_scenario, ControlSet, Scenario};
use crate::simulate::{ExitDetection, SimConfig, DEFAULT_CLIP_BOUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalars {
    One(f64),
    Many(Vec<f64>),
}

impl Scalars {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Scalars::One(v) => vec![*v],
            Scalars::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_model_name")]
    pub name: String,
    pub dim_state: usize,
    /// Defaults to `dim_state`.
    pub dim_noise: Option<usize>,
    #[serde(default = "one")]
    pub dim_control: usize,
    pub drift: Vec<String>,
    /// Row-major `dim_state × dim_noise`; omitted means no noise.
    pub diffusion: Option<Vec<String>>,
    #[serde(default = "zero_expr")]
    pub running_cost: String,
    #[serde(default = "zero_expr")]
    pub terminal_cost: String,
}

fn default_model_name() -> String {
    "expression_model".into()
}

fn one() -> usize {
    1
}

fn zero_expr() -> String {
    "0".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    /// `interval`, `box` or `ball`.
    #[serde(rename = "type")]
    pub kind: String,
    pub lo: Option<Scalars>,
    pub hi: Option<Scalars>,
    pub center: Option<Vec<f64>>,
    pub radius: Option<f64>,
    pub boundary_tolerance: Option<f64>,
    pub fd_step: Option<f64>,
    pub c2_band: Option<f64>,
    /// `analytic` or `finite_difference`.
    pub grad_mode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsConfig {
    /// `singleton`, `finite` or `box_grid`.
    #[serde(rename = "type")]
    pub kind: String,
    pub points: Option<Vec<Vec<f64>>>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    pub resolution: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    /// `grid_point` or `bridge_corrected`.
    #[serde(default = "default_detection")]
    pub exit_detection: String,
    #[serde(default = "default_clip")]
    pub clip_bound: f64,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_paths() -> usize {
    100_000
}
fn default_eps() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}
fn default_detection() -> String {
    "grid_point".into()
}
fn default_clip() -> f64 {
    DEFAULT_CLIP_BOUND
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dt: default_dt(),
            paths: default_paths(),
            eps: default_eps(),
            exit_detection: default_detection(),
            clip_bound: default_clip(),
        }
    }
}

impl RunConfig {
    pub fn sim_config(&self) -> Result<SimConfig> {
        let detection = match self.exit_detection.as_str() {
            "grid_point" => ExitDetection::GridPoint,
            "bridge_corrected" => ExitDetection::BridgeCorrected,
            other => return Err(Error::Config(format!("run.exit_detection: unknown value `{other}`"))),
        };
        let mut cfg = SimConfig::new(self.dt, self.paths, self.seed).with_exit_detection(detection);
        cfg.clip_bound = self.clip_bound;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub builtin: Option<String>,
    pub horizon: Option<f64>,
    pub model: Option<ModelConfig>,
    pub domain: Option<DomainConfig>,
    pub controls: Option<ControlsConfig>,
    #[serde(default)]
    pub run: RunConfig,
}

/// Parse a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), override_value(raw));
    Ok(())
}

impl ScenarioConfig {
    pub fn builtin(name: &str) -> Self {
        ScenarioConfig { builtin: Some(name.into()), ..Default::default() }
    }

    /// Parse TOML text, then apply overrides in order.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        ScenarioConfig::from_toml(&self.to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build(&self) -> Result<Scenario> {
        let base = match &self.builtin {
            Some(name) => Some(builtin_scenario(name)?),
            None => None,
        };
        let model = match (&self.model, &base) {
            (Some(m), _) => {
                let d = m.dim_noise.unwrap_or(m.dim_state);
                let diffusion = m.diffusion.clone().unwrap_or_else(|| vec!["0".into(); m.dim_state * d]);
                let spec = ExprModelSpec {
                    name: &m.name,
                    dim_state: m.dim_state,
                    dim_noise: d,
                    dim_control: m.dim_control,
                    drift: &m.drift,
                    diffusion: &diffusion,
                    running_cost: &m.running_cost,
                    terminal_cost: &m.terminal_cost,
                };
                ExprModel::compile(&spec)? as std::sync::Arc<dyn crate::model::SdeModel>
            }
            (None, Some(b)) => b.model.clone(),
            (None, None) => return Err(Error::Config("need either `builtin` or a [model] table".into())),
        };
        let horizon = match (self.horizon, &base) {
            (Some(h), _) => h,
            (None, Some(b)) => b.domain.horizon,
            (None, None) => return Err(Error::Config("`horizon` is required without a builtin".into())),
        };
        let space = match (&self.domain, &base) {
            (Some(d), _) => d.build()?,
            (None, Some(b)) => b.domain.space.clone(),
            (None, None) => return Err(Error::Config("a [domain] table is required without a builtin".into())),
        };
        let controls = match (&self.controls, &base) {
            (Some(c), _) => c.build()?,
            (None, Some(b)) => b.controls.clone(),
            (None, None) => ControlSet::singleton(vec![0.0; model.dim_control()])?,
        };
        if controls.dim != model.dim_control() {
            return Err(Error::Config(format!(
                "controls have dimension {} but the model expects {}",
                controls.dim,
                model.dim_control()
            )));
        }
        let domain = SpaceTimeDomain::new(space, horizon)?;
        if domain.dim() != model.dim_state() {
            return Err(Error::Config(format!(
                "domain has dimension {} but the model state has {}",
                domain.dim(),
                model.dim_state()
            )));
        }
        Ok(Scenario { model, domain, controls })
    }

    /// Label for reports: the builtin name or the model name.
    pub fn label(&self) -> String {
        match (&self.builtin, &self.model) {
            (_, Some(m)) => m.name.clone(),
            (Some(b), None) => b.clone(),
            (None, None) => "unnamed".into(),
        }
    }
}

fn need<T: Clone>(v: &Option<T>, what: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("missing `{what}`")))
}

impl DomainConfig {
    pub fn build(&self) -> Result<SpaceDomain> {
        let mut d = match self.kind.as_str() {
            "interval" => {
                let lo = need(&self.lo, "domain.lo")?.to_vec();
                let hi = need(&self.hi, "domain.hi")?.to_vec();
                if lo.len() != 1 || hi.len() != 1 {
                    return Err(Error::Config("interval needs scalar `lo` and `hi`".into()));
                }
                SpaceDomain::interval(lo[0], hi[0])?
            }
            "box" => SpaceDomain::hyperrectangle(
                need(&self.lo, "domain.lo")?.to_vec(),
                need(&self.hi, "domain.hi")?.to_vec(),
            )?,
            "ball" => SpaceDomain::ball(need(&self.center, "domain.center")?, need(&self.radius, "domain.radius")?)?,
            other => return Err(Error::Config(format!("domain.type: unknown value `{other}`"))),
        };
        if let Some(t) = self.boundary_tolerance {
            d = d.with_boundary_tolerance(t);
        }
        if let Some(h) = self.fd_step {
            d = d.with_fd_step(h);
        }
        if let Some(b) = self.c2_band {
            d.c2_band = b;
        }
        match self.grad_mode.as_deref() {
            None | Some("analytic") => {}
            Some("finite_difference") => d = d.with_grad_mode(GradMode::FiniteDifference),
            Some(other) => return Err(Error::Config(format!("domain.grad_mode: unknown value `{other}`"))),
        }
        Ok(d)
    }
}

impl ControlsConfig {
    pub fn build(&self) -> Result<ControlSet> {
        match self.kind.as_str() {
            "singleton" => {
                let mut p = need(&self.points, "controls.points")?;
                if p.len() != 1 {
                    return Err(Error::Config("singleton control set needs exactly one point".into()));
                }
                ControlSet::singleton(p.remove(0))
            }
            "finite" => ControlSet::finite(need(&self.points, "controls.points")?),
            "box_grid" => ControlSet::box_grid(
                &need(&self.lo, "controls.lo")?,
                &need(&self.hi, "controls.hi")?,
                &need(&self.resolution, "controls.resolution")?,
            ),
            other => Err(Error::Config(format!("controls.type: unknown value `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BM: &str = r#"
horizon = 1.0

[model]
name = "bm"
dim_state = 1
drift = ["0"]
diffusion = ["1"]
running_cost = "1"

[domain]
type = "interval"
lo = -1.0
hi = 1.0

[controls]
type = "finite"
points = [[0.0], [1.0]]

[run]
seed = 7
"#;

    #[test]
    fn expression_scenario_builds() {
        let c = ScenarioConfig::from_toml(BM, &[]).unwrap();
        let s = c.build().unwrap();
        assert_eq!(s.model.name(), "bm");
        assert_eq!(s.controls.len(), 2);
        assert_eq!(s.domain.horizon, 1.0);
        assert!(!s.model.is_deterministic());
        assert_eq!(c.run.seed, 7);
        assert_eq!(c.run.paths, 100_000);
    }

    #[test]
    fn overrides_take_precedence_and_round_trip() {
        let ov = vec![
            parse_override("run.seed=11").unwrap(),
            parse_override("model.drift=[\"x\"]").unwrap(),
            parse_override("run.exit_detection=bridge_corrected").unwrap(),
        ];
        let c = ScenarioConfig::from_toml(BM, &ov).unwrap();
        assert_eq!(c.run.seed, 11);
        assert_eq!(c.model.as_ref().unwrap().drift, vec!["x".to_string()]);
        assert_eq!(c.run.sim_config().unwrap().exit_detection, ExitDetection::BridgeCorrected);
        let again = ScenarioConfig::from_toml(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn builtin_with_partial_overrides() {
        let c = ScenarioConfig::builtin("example41_stochastic")
            .with_overrides(&[parse_override("horizon=1.5").unwrap()])
            .unwrap();
        let s = c.build().unwrap();
        assert_eq!(s.domain.horizon, 1.5);
        assert_eq!(s.model.name(), "example41_stochastic");
    }

    #[test]
    fn errors_name_the_field() {
        let e = ScenarioConfig::from_toml(
            "horizon = 1.0\n[domain]\ntype = \"interval\"\nlo = -1\nhi = 1\nwidth = 2\n",
            &[],
        );
        assert!(matches!(&e, Err(Error::Config(m)) if m.contains("width")), "{e:?}");
        let e = ScenarioConfig::from_toml("horizon = 1.0\nbuiltin = \"nope\"\n", &[]).unwrap().build();
        assert!(matches!(e, Err(Error::UnknownScenario(_))));
        let e = ScenarioConfig::from_toml("horizon = \n", &[]);
        assert!(matches!(&e, Err(Error::Config(m)) if m.contains("line 1")), "{e:?}");
        assert!(ScenarioConfig::default().build().is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let ov = vec![
            parse_override("controls.points=[[0.0, 1.0]]").unwrap(),
            parse_override("controls.type=singleton").unwrap(),
        ];
        let e = ScenarioConfig::from_toml(BM, &ov).unwrap().build();
        assert!(matches!(e, Err(Error::Config(_))));
    }
}
