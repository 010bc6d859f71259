//! Uniform space-time grids of value estimates and their on-disk formats.
//!
//! CSV layout: comment header with format version, provenance and axes, then
//! one row per node `t,x0,..,value,ci,provenance`. Binary layout
//! (little-endian): magic `EXVF`, `u32` version, `u8` provenance, `u32` space
//! dimension, axes as `(f64 lo, f64 hi, u64 n)` starting with time, then all
//! values and all CI half-widths as `f64` in node order.

use std::io::{BufRead, Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};

pub const FIELD_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EXVF";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 || !lo.is_finite() || !hi.is_finite() || lo > hi || (n > 1 && lo == hi) {
            return Err(Error::invalid("axis", format!("need lo < hi and n ≥ 1, got [{lo}, {hi}] n={n}")));
        }
        Ok(Axis { lo, hi, n })
    }

    pub fn spacing(&self) -> f64 {
        if self.n > 1 {
            (self.hi - self.lo) / (self.n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + self.spacing() * i as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    /// Index of the closest node, clamped to the axis.
    pub fn nearest(&self, x: f64) -> usize {
        if self.n == 1 {
            return 0;
        }
        let r = ((x - self.lo) / self.spacing()).round();
        if r.is_nan() || r <= 0.0 {
            0
        } else {
            (r as usize).min(self.n - 1)
        }
    }

    /// Cell index and weight of the upper node, clamped to the axis.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        if self.n == 1 {
            return (0, 0.0);
        }
        let s = ((x - self.lo) / self.spacing()).clamp(0.0, (self.n - 1) as f64);
        let i = (s.floor() as usize).min(self.n - 2);
        (i, s - i as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MonteCarlo,
    FiniteDifference,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::MonteCarlo => "monte_carlo",
            Provenance::FiniteDifference => "finite_difference",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "monte_carlo" => Ok(Provenance::MonteCarlo),
            "finite_difference" => Ok(Provenance::FiniteDifference),
            _ => Err(Error::Format(format!("unknown provenance `{s}`"))),
        }
    }
}

/// Values on `time × space[0] × …`, time-major with the last space axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub time: Axis,
    pub space: Vec<Axis>,
    pub values: Vec<f64>,
    /// 95% half-widths; zero for finite-difference fields.
    pub ci: Vec<f64>,
    pub provenance: Provenance,
}

impl ValueField {
    pub fn new(time: Axis, space: Vec<Axis>, values: Vec<f64>, ci: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let len = time.n * space.iter().map(|a| a.n).product::<usize>();
        if values.len() != len || ci.len() != len {
            return Err(Error::Dimension { what: "value field", expected: len, got: values.len().min(ci.len()) });
        }
        Ok(ValueField { time, space, values, ci, provenance })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn space_len(&self) -> usize {
        self.space.iter().map(|a| a.n).product()
    }

    pub fn index(&self, ti: usize, xi: &[usize]) -> usize {
        let mut idx = ti;
        for (ax, &i) in self.space.iter().zip(xi) {
            idx = idx * ax.n + i;
        }
        idx
    }

    /// Grid indices of a flat node index.
    pub fn unravel(&self, mut flat: usize) -> (usize, Vec<usize>) {
        let mut xi = vec![0; self.space.len()];
        for (k, ax) in self.space.iter().enumerate().rev() {
            xi[k] = flat % ax.n;
            flat /= ax.n;
        }
        (flat, xi)
    }

    pub fn coords(&self, flat: usize) -> (f64, Vec<f64>) {
        let (ti, xi) = self.unravel(flat);
        (self.time.node(ti), xi.iter().zip(&self.space).map(|(&i, a)| a.node(i)).collect())
    }

    pub fn value_at(&self, ti: usize, xi: &[usize]) -> f64 {
        self.values[self.index(ti, xi)]
    }

    /// Multilinear interpolation in `(t, x)`, clamped to the grid.
    pub fn interpolate(&self, t: f64, x: &[f64]) -> f64 {
        let dims = 1 + self.space.len();
        let mut cell = Vec::with_capacity(dims);
        cell.push(self.time.locate(t));
        for (ax, &xi) in self.space.iter().zip(x) {
            cell.push(ax.locate(xi));
        }
        let axes: Vec<&Axis> = std::iter::once(&self.time).chain(&self.space).collect();
        let mut total = 0.0;
        for corner in 0..(1usize << dims) {
            let mut w = 1.0;
            let mut idx = 0;
            for k in 0..dims {
                let (i, f) = cell[k];
                let up = (corner >> k) & 1 == 1;
                w *= if up { f } else { 1.0 - f };
                let j = if up { (i + 1).min(axes[k].n - 1) } else { i };
                idx = idx * axes[k].n + j;
            }
            if w != 0.0 {
                total += w * self.values[idx];
            }
        }
        total
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# exitcontrol value field v{FIELD_FORMAT_VERSION}")?;
        writeln!(w, "# provenance={}", self.provenance.as_str())?;
        let mut axes = format!("# axes t:{}:{}:{}", self.time.lo, self.time.hi, self.time.n);
        for (k, a) in self.space.iter().enumerate() {
            axes.push_str(&format!(" x{k}:{}:{}:{}", a.lo, a.hi, a.n));
        }
        writeln!(w, "{axes}")?;
        let mut header = String::from("t");
        for k in 0..self.space.len() {
            header.push_str(&format!(",x{k}"));
        }
        writeln!(w, "{header},value,ci,provenance")?;
        for i in 0..self.len() {
            let (t, x) = self.coords(i);
            let mut row = t.to_string();
            for v in x {
                row.push(',');
                row.push_str(&v.to_string());
            }
            writeln!(w, "{row},{},{},{}", self.values[i], self.ci[i], self.provenance.as_str())?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| Error::Format("truncated value field CSV".into()))?.map_err(Error::from)
        };
        let version = next()?;
        let expected = format!("# exitcontrol value field v{FIELD_FORMAT_VERSION}");
        if version.trim() != expected {
            return Err(Error::Format(format!("unsupported header `{version}`")));
        }
        let prov_line = next()?;
        let provenance = Provenance::parse(
            prov_line.trim().strip_prefix("# provenance=").ok_or_else(|| Error::Format("missing provenance".into()))?,
        )?;
        let axes_line = next()?;
        let mut axes = Vec::new();
        for tok in axes_line
            .trim()
            .strip_prefix("# axes ")
            .ok_or_else(|| Error::Format("missing axes line".into()))?
            .split_whitespace()
        {
            let parts: Vec<&str> = tok.split(':').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("bad axis `{tok}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("axis `{tok}`: {e}")));
            let n = parts[3].parse::<usize>().map_err(|e| Error::Format(format!("axis `{tok}`: {e}")))?;
            axes.push(Axis::new(num(parts[1])?, num(parts[2])?, n)?);
        }
        if axes.is_empty() {
            return Err(Error::Format("no axes".into()));
        }
        let time = axes.remove(0);
        next()?;
        let cols = axes.len() + 4;
        let mut values = Vec::new();
        let mut ci = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols {
                return Err(Error::Format(format!("row {}: expected {cols} columns", lineno + 1)));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("row {}: {e}", lineno + 1)));
            values.push(parse(f[cols - 3])?);
            ci.push(parse(f[cols - 2])?);
        }
        ValueField::new(time, axes, values, ci, provenance)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FIELD_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[match self.provenance {
            Provenance::MonteCarlo => 0u8,
            Provenance::FiniteDifference => 1u8,
        }])?;
        w.write_all(&(self.space.len() as u32).to_le_bytes())?;
        for a in std::iter::once(&self.time).chain(&self.space) {
            w.write_all(&a.lo.to_le_bytes())?;
            w.write_all(&a.hi.to_le_bytes())?;
            w.write_all(&(a.n as u64).to_le_bytes())?;
        }
        for v in self.values.iter().chain(&self.ci) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a value field file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FIELD_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported value field version {version}")));
        }
        let mut p = [0u8; 1];
        r.read_exact(&mut p)?;
        let provenance = match p[0] {
            0 => Provenance::MonteCarlo,
            1 => Provenance::FiniteDifference,
            other => return Err(Error::Format(format!("bad provenance byte {other}"))),
        };
        let dim = read_u32(&mut r)? as usize;
        let mut axes = Vec::with_capacity(dim + 1);
        for _ in 0..=dim {
            let lo = read_f64(&mut r)?;
            let hi = read_f64(&mut r)?;
            let n = read_u64(&mut r)? as usize;
            axes.push(Axis::new(lo, hi, n)?);
        }
        let time = axes.remove(0);
        let len = time.n * axes.iter().map(|a| a.n).product::<usize>();
        let values = (0..len).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let ci = (0..len).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        ValueField::new(time, axes, values, ci, provenance)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ValueField {
        let time = Axis::new(0.0, 1.0, 3).unwrap();
        let space = vec![Axis::new(-1.0, 1.0, 5).unwrap()];
        let values = (0..15).map(|i| i as f64 * 0.1 + 1.0 / 3.0).collect();
        let ci = (0..15).map(|i| i as f64 * 1e-3).collect();
        ValueField::new(time, space, values, ci, Provenance::MonteCarlo).unwrap()
    }

    #[test]
    fn axis_lookup() {
        let a = Axis::new(-1.0, 1.0, 5).unwrap();
        assert_eq!(a.spacing(), 0.5);
        assert_eq!(a.nearest(0.2), 2);
        assert_eq!(a.nearest(-7.0), 0);
        assert_eq!(a.nearest(9.0), 4);
        assert_eq!(a.locate(1.0), (3, 1.0));
        assert_eq!(a.locate(-0.75), (0, 0.5));
        assert!(Axis::new(1.0, 0.0, 3).is_err());
    }

    #[test]
    fn interpolation_reproduces_bilinear_functions() {
        let time = Axis::new(0.0, 2.0, 5).unwrap();
        let space = vec![Axis::new(-1.0, 1.0, 9).unwrap()];
        let f = |t: f64, x: f64| 1.0 + 2.0 * t - x + 0.5 * t * x;
        let mut values = Vec::new();
        for t in time.nodes() {
            for x in space[0].nodes() {
                values.push(f(t, x));
            }
        }
        let n = values.len();
        let field = ValueField::new(time, space, values, vec![0.0; n], Provenance::FiniteDifference).unwrap();
        for &(t, x) in &[(0.3, 0.1), (1.77, -0.93), (2.0, 1.0), (0.0, -1.0)] {
            assert!((field.interpolate(t, &[x]) - f(t, x)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let f = sample();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let g = ValueField::read_csv(buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let f = sample();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"EXVF");
        let g = ValueField::read_binary(buf.as_slice()).unwrap();
        assert_eq!(f, g);
        buf[4] = 9;
        assert!(ValueField::read_binary(buf.as_slice()).is_err());
    }
}
