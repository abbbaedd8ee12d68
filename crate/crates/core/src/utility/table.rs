//! Monotone piecewise-cubic (Fritsch–Carlson) interpolation of a utility table.

use std::path::Path;

use crate::error::{Error, Result};

/// A utility given by a strictly increasing table `(x_i, U(x_i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableUtility {
    x: Vec<f64>,
    u: Vec<f64>,
    slopes: Vec<f64>,
    growth: Option<(f64, f64)>,
    source: String,
}

impl TableUtility {
    pub fn new(x: Vec<f64>, u: Vec<f64>, growth: Option<(f64, f64)>, source: impl Into<String>) -> Result<Self> {
        if x.len() != u.len() || x.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "utility table needs at least 3 rows with two columns, got {} and {}",
                x.len(),
                u.len()
            )));
        }
        if x.iter().chain(&u).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("utility table values must be finite".into()));
        }
        if x[0] < 0.0 || x.windows(2).any(|w| w[0] >= w[1]) || u.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "utility table must be strictly increasing in both columns with x >= 0".into(),
            ));
        }
        if let Some((c, p)) = growth {
            if !(c > 0.0 && p > 1.0) {
                return Err(Error::InvalidInput(format!("growth constants need C > 0, p > 1 (got C={c}, p={p})")));
            }
        }
        let slopes = pchip_slopes(&x, &u);
        Ok(Self {
            x,
            u,
            slopes,
            growth,
            source: source.into(),
        })
    }

    /// Reads a two-column table (`x, U(x)`), comma- or whitespace-separated.
    /// Blank lines, `#` comments and a non-numeric header line are skipped.
    pub fn from_file(path: &Path, growth: Option<(f64, f64)>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut x = Vec::new();
        let mut u = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
            let parsed: std::result::Result<Vec<f64>, _> = cols.iter().map(|c| c.parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.len() == 2 => {
                    x.push(v[0]);
                    u.push(v[1]);
                }
                Err(_) if x.is_empty() => continue,
                _ => {
                    return Err(Error::Parse(format!(
                        "{}: line {} is not a pair of numbers",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        Self::new(x, u, growth, path.display().to_string())
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    pub fn range(&self) -> (f64, f64) {
        (self.u[0], self.u[self.u.len() - 1])
    }

    pub fn growth(&self) -> Option<(f64, f64)> {
        self.growth
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn interval(&self, x: f64) -> Result<usize> {
        let (lo, hi) = self.domain();
        if !(x >= lo && x <= hi) {
            return Err(Error::Domain(format!("{x} outside the utility table domain [{lo}, {hi}]")));
        }
        Ok(self.x.partition_point(|v| *v <= x).clamp(1, self.x.len() - 1) - 1)
    }

    fn hermite(&self, i: usize, x: f64) -> (f64, f64) {
        let h = self.x[i + 1] - self.x[i];
        let t = (x - self.x[i]) / h;
        let (y0, y1, m0, m1) = (self.u[i], self.u[i + 1], self.slopes[i], self.slopes[i + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        let value = (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * h * m0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * h * m1;
        let deriv = ((6.0 * t2 - 6.0 * t) * y0 + (6.0 * t - 6.0 * t2) * y1) / h + (3.0 * t2 - 4.0 * t + 1.0) * m0 + (3.0 * t2 - 2.0 * t) * m1;
        (value, deriv)
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        let i = self.interval(x)?;
        Ok(self.hermite(i, x).0)
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        let i = self.interval(x)?;
        Ok(self.hermite(i, x).1)
    }

    /// `U⁻¹(y)` by bisection inside the bracketing interval (the interpolant is monotone).
    pub fn inverse(&self, y: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(y >= lo && y <= hi) {
            return Err(Error::Domain(format!("{y} outside the utility table range [{lo}, {hi}]")));
        }
        let i = self.u.partition_point(|v| *v <= y).clamp(1, self.u.len() - 1) - 1;
        let (mut a, mut b) = (self.x[i], self.x[i + 1]);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if self.hermite(i, m).0 < y {
                a = m;
            } else {
                b = m;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// `(U′)⁻¹(y)`: the point where the interpolant's slope crosses `y`.
    pub fn marginal_inverse(&self, y: f64) -> Result<f64> {
        let (lo, hi) = self.domain();
        let (d_lo, d_hi) = (self.derivative(lo)?, self.derivative(hi)?);
        if !(y <= d_lo && y >= d_hi) {
            return Err(Error::Domain(format!(
                "marginal utility {y} outside the table's slope range [{d_hi}, {d_lo}]"
            )));
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let m = if a > 0.0 { (a * b).sqrt() } else { 0.5 * (a + b) };
            if m <= a || m >= b {
                break;
            }
            if self.derivative(m)? > y {
                a = m;
            } else {
                b = m;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// `sup_x [U(x) − x·y]` over the table domain by golden-section search on `x`.
    pub fn conjugate(&self, y: f64) -> Result<f64> {
        let (lo, hi) = self.domain();
        let f = |x: f64| self.value(x).map(|u| u - x * y);
        // Coarse scan over nodes, then refine around the best node.
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, x) in self.x.iter().enumerate() {
            let v = f(*x)?;
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let mut a = if best > 0 { self.x[best - 1] } else { lo };
        let mut b = if best + 1 < self.x.len() { self.x[best + 1] } else { hi };
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (f(c)?, f(d)?);
        for _ in 0..200 {
            if (b - a) <= 1e-15 * (1.0 + b.abs()) {
                break;
            }
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = f(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = f(d)?;
            }
        }
        Ok(best_v.max(fc).max(fd))
    }
}

/// Fritsch–Carlson slopes: harmonic-mean interior slopes, one-sided three-point ends.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    m[0] = end(h[0], h[1], delta[0], delta[1]);
    m[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sqrt_table() -> TableUtility {
        let x: Vec<f64> = (0..=400).map(|i| 10f64.powf(-6.0 + 12.0 * i as f64 / 400.0)).collect();
        let u = x.iter().map(|v| 2.0 * v.sqrt()).collect();
        TableUtility::new(x, u, Some((2.0, 2.0)), "sqrt").unwrap()
    }

    #[test]
    fn interpolates_nodes_exactly_and_between_closely() {
        let t = sqrt_table();
        assert_eq!(t.value(1.0).unwrap(), 2.0);
        for x in [1e-5, 3e-3, 0.7, 42.0, 9e5] {
            let exact = 2.0 * f64::sqrt(x);
            assert!((t.value(x).unwrap() - exact).abs() < 1e-4 * exact, "x = {x}");
            let d = t.derivative(x).unwrap();
            assert!((d - 1.0 / f64::sqrt(x)).abs() < 1e-3 / f64::sqrt(x), "x = {x}");
        }
        assert!(t.value(2e6).is_err());
    }

    #[test]
    fn inverse_and_conjugate() {
        let t = sqrt_table();
        for x in [1e-4, 0.5, 7.0, 1e4] {
            let y = t.value(x).unwrap();
            assert!((t.inverse(y).unwrap() - x).abs() < 1e-10 * x);
            let mi = t.marginal_inverse(1.0 / f64::sqrt(x)).unwrap();
            assert!((mi - x).abs() < 1e-2 * x, "x = {x}, got {mi}");
        }
        // V(y) = 1/y for U = 2 sqrt(x)
        for y in [0.1, 1.0, 3.0] {
            assert!((t.conjugate(y).unwrap() - 1.0 / y).abs() < 1e-4 / y);
        }
    }

    #[test]
    fn rejects_non_monotone() {
        assert!(TableUtility::new(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 1.0], None, "t").is_err());
        assert!(TableUtility::new(vec![0.0, 1.0], vec![0.0, 2.0], None, "t").is_err());
    }

    #[test]
    fn reads_files_with_header_and_comments() {
        let dir = std::env::temp_dir().join(format!("weaksens-table-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("u.csv");
        std::fs::write(&p, "x,u\n# comment\n0,0\n1,1\n4,2\n9,3\n").unwrap();
        let t = TableUtility::from_file(&p, None).unwrap();
        assert_eq!(t.domain(), (0.0, 9.0));
        std::fs::write(&p, "0,0\n1,oops\n").unwrap();
        assert!(TableUtility::from_file(&p, None).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
