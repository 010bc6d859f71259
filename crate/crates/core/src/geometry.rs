//! Bounded spatial domains described by their signed distance function.
//!
//! The signed distance is negative inside the open set `O`, zero on `∂O` and
//! equal to the Euclidean distance to `Ō` outside. Its positive part
//! [`SpaceDomain::distance_plus`] drives the soft-killing factor used by the
//! penalized value function.
//!
//! Box domains have a signed distance that is only piecewise `C²` (kinks along
//! the diagonals and at corners). Gradients and Hessians are still returned
//! there, but the unit-gradient diagnostic is skipped at corners. Boundary
//! regularity results that need `∂O ∈ C²` should be used with interval or ball
//! domains, or with a smooth user-supplied distance.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_BOUNDARY_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_C2_BAND: f64 = 0.1;

pub type DistanceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum DomainShape {
    Interval { lo: f64, hi: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Custom { dim: usize, label: String, sdf: DistanceFn },
}

impl fmt::Debug for DomainShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainShape::Interval { lo, hi } => write!(f, "Interval({lo}, {hi})"),
            DomainShape::Box { lo, hi } => write!(f, "Box({lo:?}, {hi:?})"),
            DomainShape::Ball { center, radius } => write!(f, "Ball({center:?}, {radius})"),
            DomainShape::Custom { dim, label, .. } => write!(f, "Custom({label}, dim={dim})"),
        }
    }
}

impl DomainShape {
    pub fn name(&self) -> &'static str {
        match self {
            DomainShape::Interval { .. } => "interval",
            DomainShape::Box { .. } => "box",
            DomainShape::Ball { .. } => "ball",
            DomainShape::Custom { .. } => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Analytic,
    FiniteDifference,
}

/// Gradient and Hessian of the signed distance at a point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradHess {
    pub grad: Vec<f64>,
    /// Row-major `n × n`.
    pub hess: Vec<f64>,
    /// Set when the point is inside the C² band but `‖Dρ̂‖` is off by more than `10·h_fd`.
    pub degraded: bool,
}

impl GradHess {
    pub fn hess_at(&self, i: usize, j: usize) -> f64 {
        self.hess[i * self.grad.len() + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    InteriorQ,
    LateralBoundary,
    TerminalFace,
    Exterior,
}

#[derive(Debug, Clone)]
pub struct SpaceDomain {
    shape: DomainShape,
    pub grad_mode: GradMode,
    pub boundary_tolerance: f64,
    pub fd_step: f64,
    /// Half-width of the band around `∂O` where `ρ̂` is assumed `C²`.
    pub c2_band: f64,
}

impl SpaceDomain {
    fn with_shape(shape: DomainShape, grad_mode: GradMode) -> Self {
        SpaceDomain {
            shape,
            grad_mode,
            boundary_tolerance: DEFAULT_BOUNDARY_TOLERANCE,
            fd_step: DEFAULT_FD_STEP,
            c2_band: DEFAULT_C2_BAND,
        }
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid("interval", format!("need lo < hi, got ({lo}, {hi})")));
        }
        Ok(Self::with_shape(DomainShape::Interval { lo, hi }, GradMode::Analytic))
    }

    pub fn hyperrectangle(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::invalid("box", "lo/hi must be nonempty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
            return Err(Error::invalid("box", format!("need lo < hi per axis, got {lo:?} {hi:?}")));
        }
        Ok(Self::with_shape(DomainShape::Box { lo, hi }, GradMode::Analytic))
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() || !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid("ball", "need nonempty center and radius > 0"));
        }
        Ok(Self::with_shape(DomainShape::Ball { center, radius }, GradMode::Analytic))
    }

    /// User-supplied signed distance. Derivatives always come from finite differences.
    pub fn custom(dim: usize, label: impl Into<String>, sdf: DistanceFn) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("custom", "dimension must be positive"));
        }
        Ok(Self::with_shape(DomainShape::Custom { dim, label: label.into(), sdf }, GradMode::FiniteDifference))
    }

    pub fn with_grad_mode(mut self, mode: GradMode) -> Self {
        if !matches!(self.shape, DomainShape::Custom { .. }) {
            self.grad_mode = mode;
        }
        self
    }

    pub fn with_boundary_tolerance(mut self, tol: f64) -> Self {
        self.boundary_tolerance = tol;
        self
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = h;
        self
    }

    pub fn shape(&self) -> &DomainShape {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            DomainShape::Interval { .. } => 1,
            DomainShape::Box { lo, .. } => lo.len(),
            DomainShape::Ball { center, .. } => center.len(),
            DomainShape::Custom { dim, .. } => *dim,
        }
    }

    /// Axis-aligned bounding box of `Ō`, when it is known.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.shape {
            DomainShape::Interval { lo, hi } => Some((vec![*lo], vec![*hi])),
            DomainShape::Box { lo, hi } => Some((lo.clone(), hi.clone())),
            DomainShape::Ball { center, radius } => {
                Some((center.iter().map(|c| c - radius).collect(), center.iter().map(|c| c + radius).collect()))
            }
            DomainShape::Custom { .. } => None,
        }
    }

    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match &self.shape {
            DomainShape::Interval { lo, hi } => (lo - x[0]).max(x[0] - hi),
            DomainShape::Box { lo, hi } => {
                let mut inner = f64::NEG_INFINITY;
                let mut outer2 = 0.0;
                let mut outside = false;
                for i in 0..lo.len() {
                    let q = (lo[i] - x[i]).max(x[i] - hi[i]);
                    inner = inner.max(q);
                    if q > 0.0 {
                        outside = true;
                        outer2 += q * q;
                    }
                }
                if outside {
                    outer2.sqrt()
                } else {
                    inner
                }
            }
            DomainShape::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                r2.sqrt() - radius
            }
            DomainShape::Custom { sdf, .. } => sdf(x),
        }
    }

    pub fn distance_plus(&self, x: &[f64]) -> f64 {
        self.signed_distance(x).max(0.0)
    }

    pub fn grad_hess(&self, x: &[f64]) -> GradHess {
        let (grad, hess) = match self.grad_mode {
            GradMode::Analytic => self.analytic_grad_hess(x),
            GradMode::FiniteDifference => self.fd_grad_hess(x),
        };
        let rho = self.signed_distance(x);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let near = rho.abs() <= self.c2_band;
        let degraded = near && !self.is_corner(x) && (norm - 1.0).abs() > 10.0 * self.fd_step;
        GradHess { grad, hess, degraded }
    }

    /// Central finite differences of the signed distance, regardless of `grad_mode`.
    pub fn fd_grad_hess(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        let h = self.fd_step;
        let f0 = self.signed_distance(x);
        let mut p = x.to_vec();
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        for i in 0..n {
            p[i] = x[i] + h;
            let fp = self.signed_distance(&p);
            p[i] = x[i] - h;
            let fm = self.signed_distance(&p);
            p[i] = x[i];
            grad[i] = (fp - fm) / (2.0 * h);
            hess[i * n + i] = (fp - 2.0 * f0 + fm) / (h * h);
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let mut eval = |si: f64, sj: f64| {
                    p[i] = x[i] + si * h;
                    p[j] = x[j] + sj * h;
                    let v = self.signed_distance(&p);
                    p[i] = x[i];
                    p[j] = x[j];
                    v
                };
                let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h * h);
                hess[i * n + j] = v;
                hess[j * n + i] = v;
            }
        }
        (grad, hess)
    }

    fn analytic_grad_hess(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match &self.shape {
            DomainShape::Interval { lo, hi } => {
                let g = if x[0] - hi >= lo - x[0] { 1.0 } else { -1.0 };
                (vec![g], vec![0.0])
            }
            DomainShape::Box { lo, hi } => {
                let n = lo.len();
                let q: Vec<f64> = (0..n).map(|i| (lo[i] - x[i]).max(x[i] - hi[i])).collect();
                let side = |i: usize| if x[i] - hi[i] >= lo[i] - x[i] { 1.0 } else { -1.0 };
                let mut grad = vec![0.0; n];
                let mut hess = vec![0.0; n * n];
                if q.iter().any(|&v| v > 0.0) {
                    let norm = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                    for i in 0..n {
                        if q[i] > 0.0 {
                            grad[i] = side(i) * q[i] / norm;
                        }
                    }
                    for i in 0..n {
                        for j in 0..n {
                            if q[i] > 0.0 && q[j] > 0.0 {
                                let delta = if i == j { 1.0 } else { 0.0 };
                                hess[i * n + j] = (delta - grad[i] * grad[j]) / norm;
                            }
                        }
                    }
                } else {
                    let (imax, _) =
                        q.iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                    grad[imax] = side(imax);
                }
                (grad, hess)
            }
            DomainShape::Ball { center, .. } => {
                let n = center.len();
                let d: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
                let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r == 0.0 {
                    // the distance is not differentiable at the center
                    return (vec![0.0; n], vec![0.0; n * n]);
                }
                let grad: Vec<f64> = d.iter().map(|v| v / r).collect();
                let mut hess = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        hess[i * n + j] = (delta - grad[i] * grad[j]) / r;
                    }
                }
                (grad, hess)
            }
            DomainShape::Custom { .. } => self.fd_grad_hess(x),
        }
    }

    /// True at points where more than one face of a box is (nearly) active.
    pub fn is_corner(&self, x: &[f64]) -> bool {
        match &self.shape {
            DomainShape::Box { lo, hi } => {
                let q: Vec<f64> = (0..lo.len()).map(|i| (lo[i] - x[i]).max(x[i] - hi[i])).collect();
                let band = 10.0 * self.fd_step;
                let outside = q.iter().filter(|&&v| v > -band).count();
                if q.iter().any(|&v| v > 0.0) {
                    outside >= 2 || q.iter().filter(|&&v| v > 0.0).count() >= 2
                } else {
                    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    q.iter().filter(|&&v| v >= m - band).count() >= 2
                }
            }
            _ => false,
        }
    }

    pub fn is_inside(&self, x: &[f64]) -> bool {
        self.signed_distance(x) < 0.0
    }

    /// Evenly spread sample points on `∂O` (per-face grids for boxes, angles for 2-D balls).
    pub fn boundary_samples(&self, per_axis: usize) -> Result<Vec<Vec<f64>>> {
        let per_axis = per_axis.max(1);
        match &self.shape {
            DomainShape::Interval { lo, hi } => Ok(vec![vec![*lo], vec![*hi]]),
            DomainShape::Box { lo, hi } => {
                let n = lo.len();
                let mut pts = Vec::new();
                for axis in 0..n {
                    for &face in &[lo[axis], hi[axis]] {
                        let others: Vec<usize> = (0..n).filter(|&i| i != axis).collect();
                        let count = per_axis.pow(others.len() as u32);
                        for idx in 0..count {
                            let mut p = vec![0.0; n];
                            p[axis] = face;
                            let mut rem = idx;
                            for &o in &others {
                                let k = rem % per_axis;
                                rem /= per_axis;
                                // cell centres keep samples away from corners
                                let frac = (k as f64 + 0.5) / per_axis as f64;
                                p[o] = lo[o] + frac * (hi[o] - lo[o]);
                            }
                            pts.push(p);
                        }
                    }
                }
                Ok(pts)
            }
            DomainShape::Ball { center, radius } if center.len() == 2 => Ok((0..per_axis)
                .map(|k| {
                    let th = 2.0 * std::f64::consts::PI * k as f64 / per_axis as f64;
                    vec![center[0] + radius * th.cos(), center[1] + radius * th.sin()]
                })
                .collect()),
            DomainShape::Ball { center, radius } => {
                let mut pts = Vec::new();
                for i in 0..center.len() {
                    for s in [-1.0, 1.0] {
                        let mut p = center.clone();
                        p[i] += s * radius;
                        pts.push(p);
                    }
                }
                Ok(pts)
            }
            DomainShape::Custom { .. } => Err(Error::UnsupportedDomain {
                shape: "custom".into(),
                reason: "boundary samples must be supplied explicitly".into(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpaceTimeDomain {
    pub space: SpaceDomain,
    pub horizon: f64,
}

impl SpaceTimeDomain {
    pub fn new(space: SpaceDomain, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon", format!("must be positive, got {horizon}")));
        }
        Ok(SpaceTimeDomain { space, horizon })
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn time_tolerance(&self) -> f64 {
        1e-12 * self.horizon.max(1.0)
    }

    /// Place `(t, x)` in the partition `Q`, lateral boundary, terminal face, or outside.
    pub fn classify(&self, t: f64, x: &[f64]) -> Region {
        let rho = self.space.signed_distance(x);
        let tol = self.space.boundary_tolerance;
        let at_terminal = (t - self.horizon).abs() <= self.time_tolerance();
        if at_terminal {
            if rho <= tol {
                Region::TerminalFace
            } else {
                Region::Exterior
            }
        } else if t > self.horizon {
            Region::Exterior
        } else if rho < -tol {
            Region::InteriorQ
        } else if rho <= tol {
            Region::LateralBoundary
        } else {
            Region::Exterior
        }
    }
}
