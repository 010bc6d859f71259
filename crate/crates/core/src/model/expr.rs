//! Coefficient expressions for models declared in scenario files.
//!
//! Variables: `t`, `x` (alias of `x0`), `x0..x{n-1}`, `a` (alias of `a0`),
//! `a0..a{k-1}`, constants `pi` and `e`. Functions: `sin cos tan exp ln log
//! sqrt abs sign floor ceil tanh pos max min`, where `pos(v) = max(v, 0)`.

use std::sync::Arc;

use meval::{ContextProvider, Expr, FuncEvalError};

use super::{CostDerivs, SdeModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CompiledExpr {
    source: String,
    expr: Expr,
}

struct Vars<'a> {
    t: f64,
    x: &'a [f64],
    a: &'a [f64],
}

fn indexed(name: &str, prefix: char, values: &[f64]) -> Option<f64> {
    let rest = name.strip_prefix(prefix)?;
    if rest.is_empty() {
        return values.first().copied();
    }
    let idx: usize = rest.parse().ok()?;
    values.get(idx).copied()
}

impl ContextProvider for Vars<'_> {
    fn get_var(&self, name: &str) -> Option<f64> {
        match name {
            "t" => Some(self.t),
            "pi" => Some(std::f64::consts::PI),
            "e" => Some(std::f64::consts::E),
            _ => indexed(name, 'x', self.x).or_else(|| indexed(name, 'a', self.a)),
        }
    }

    fn eval_func(&self, name: &str, args: &[f64]) -> std::result::Result<f64, FuncEvalError> {
        let unary = |f: fn(f64) -> f64| {
            if args.len() == 1 {
                Ok(f(args[0]))
            } else {
                Err(FuncEvalError::NumberArgs(1))
            }
        };
        match name {
            "sin" => unary(f64::sin),
            "cos" => unary(f64::cos),
            "tan" => unary(f64::tan),
            "exp" => unary(f64::exp),
            "ln" | "log" => unary(f64::ln),
            "sqrt" => unary(f64::sqrt),
            "abs" => unary(f64::abs),
            "sign" => unary(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            "floor" => unary(f64::floor),
            "ceil" => unary(f64::ceil),
            "tanh" => unary(f64::tanh),
            "pos" => unary(|v| v.max(0.0)),
            "max" | "min" => {
                if args.is_empty() {
                    return Err(FuncEvalError::TooFewArguments);
                }
                let init = args[0];
                Ok(args[1..].iter().fold(init, |acc, &v| if name == "max" { acc.max(v) } else { acc.min(v) }))
            }
            _ => Err(FuncEvalError::UnknownFunction),
        }
    }
}

impl CompiledExpr {
    /// Parse and validate against the given state/control dimensions.
    pub fn compile(source: &str, dim_state: usize, dim_control: usize) -> Result<Self> {
        let expr: Expr = source
            .parse()
            .map_err(|e: meval::Error| Error::Expression { expr: source.to_string(), reason: e.to_string() })?;
        let compiled = CompiledExpr { source: source.to_string(), expr };
        let x = vec![0.25; dim_state];
        let a = vec![0.25; dim_control];
        compiled.try_eval(0.5, &x, &a)?;
        Ok(compiled)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn try_eval(&self, t: f64, x: &[f64], a: &[f64]) -> Result<f64> {
        self.expr
            .eval_with_context(Vars { t, x, a })
            .map_err(|e| Error::Expression { expr: self.source.clone(), reason: e.to_string() })
    }

    /// Evaluate; variables were checked at compile time, so failures surface as NaN.
    pub fn eval(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        self.try_eval(t, x, a).unwrap_or(f64::NAN)
    }
}

/// A model whose coefficients are given as expressions.
#[derive(Debug, Clone)]
pub struct ExprModel {
    name: String,
    dim_state: usize,
    dim_noise: usize,
    dim_control: usize,
    drift: Vec<CompiledExpr>,
    diffusion: Vec<CompiledExpr>,
    running_cost: CompiledExpr,
    terminal_cost: CompiledExpr,
    zero_diffusion: bool,
}

#[derive(Debug, Clone)]
pub struct ExprModelSpec<'a> {
    pub name: &'a str,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub dim_control: usize,
    pub drift: &'a [String],
    /// Row-major `dim_state × dim_noise`.
    pub diffusion: &'a [String],
    pub running_cost: &'a str,
    pub terminal_cost: &'a str,
}

impl ExprModel {
    pub fn compile(spec: &ExprModelSpec<'_>) -> Result<Arc<Self>> {
        let (n, d, k) = (spec.dim_state, spec.dim_noise, spec.dim_control);
        if n == 0 || d == 0 || k == 0 {
            return Err(Error::invalid("model", "dimensions must be positive"));
        }
        if spec.drift.len() != n {
            return Err(Error::Dimension { what: "drift expressions", expected: n, got: spec.drift.len() });
        }
        if spec.diffusion.len() != n * d {
            return Err(Error::Dimension { what: "diffusion expressions", expected: n * d, got: spec.diffusion.len() });
        }
        let comp = |s: &String| CompiledExpr::compile(s, n, k);
        let diffusion = spec.diffusion.iter().map(comp).collect::<Result<Vec<_>>>()?;
        let zero_diffusion = spec.diffusion.iter().all(|s| s.trim().parse::<f64>().ok() == Some(0.0));
        Ok(Arc::new(ExprModel {
            name: spec.name.to_string(),
            dim_state: n,
            dim_noise: d,
            dim_control: k,
            drift: spec.drift.iter().map(comp).collect::<Result<Vec<_>>>()?,
            diffusion,
            running_cost: CompiledExpr::compile(spec.running_cost, n, k)?,
            terminal_cost: CompiledExpr::compile(spec.terminal_cost, n, k)?,
            zero_diffusion,
        }))
    }
}

impl SdeModel for ExprModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim_state(&self) -> usize {
        self.dim_state
    }
    fn dim_noise(&self) -> usize {
        self.dim_noise
    }
    fn dim_control(&self) -> usize {
        self.dim_control
    }
    fn drift(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.drift) {
            *o = e.eval(t, x, a);
        }
    }
    fn diffusion(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.diffusion) {
            *o = e.eval(t, x, a);
        }
    }
    fn running_cost(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        self.running_cost.eval(t, x, a)
    }
    fn terminal_cost(&self, t: f64, x: &[f64]) -> f64 {
        self.terminal_cost.eval(t, x, &[])
    }
    fn terminal_cost_derivs(&self, _t: f64, _x: &[f64]) -> Option<CostDerivs> {
        None
    }
    fn is_deterministic(&self) -> bool {
        self.zero_diffusion
    }
}
