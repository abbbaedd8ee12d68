//! Declarative coefficient processes and their config mini-language.
//!
//! ```text
//! const:[v1,...]
//! pw:t=[b1,...];v=[...]              values of all pieces, concatenated
//! ind:j=<int>;c=<float>;lo=[...];hi=[...]
//! ```
//!
//! Matrices are row-major. The indicator driver `j` is 1-based in the
//! mini-language (`j=1` reads `W^1`) and 0-based in the Rust API.

use std::fmt;

use crate::error::{Error, Result};
use crate::paths::BrownianPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// rows × cols
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "vector({n})"),
            Shape::Matrix(r, c) => write!(f, "matrix({r}x{c})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientKind {
    Constant(Vec<f64>),
    /// `values[s]` holds on `[breakpoints[s-1], breakpoints[s])`.
    Piecewise {
        breakpoints: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// `high` where `W^driver_t < threshold`, `low` otherwise.
    Indicator {
        driver: usize,
        threshold: f64,
        low: Vec<f64>,
        high: Vec<f64>,
    },
}

/// A bounded, predictable coefficient (drift, volatility, rate, or a
/// perturbation direction) of one of three declarative kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientProcess {
    shape: Shape,
    kind: CoefficientKind,
}

fn check_values(shape: Shape, values: &[f64], what: &str) -> Result<()> {
    if values.len() != shape.len() {
        return Err(Error::Shape(format!(
            "{what}: {} values for {shape} ({} expected)",
            values.len(),
            shape.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what}: coefficient values must be finite")));
    }
    Ok(())
}

impl CoefficientProcess {
    pub fn constant(shape: Shape, values: Vec<f64>) -> Result<Self> {
        check_values(shape, &values, "const")?;
        Ok(Self {
            shape,
            kind: CoefficientKind::Constant(values),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Shape::Scalar,
            kind: CoefficientKind::Constant(vec![value]),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            kind: CoefficientKind::Constant(vec![0.0; shape.len()]),
        }
    }

    /// `n × n` identity.
    pub fn identity(n: usize) -> Self {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Self {
            shape: Shape::Matrix(n, n),
            kind: CoefficientKind::Constant(v),
        }
    }

    pub fn piecewise(shape: Shape, breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != breakpoints.len() + 1 {
            return Err(Error::Shape(format!(
                "pw: {} pieces for {} breakpoints",
                values.len(),
                breakpoints.len()
            )));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) || breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("pw: breakpoints must be finite and strictly increasing".into()));
        }
        for v in &values {
            check_values(shape, v, "pw")?;
        }
        Ok(Self {
            shape,
            kind: CoefficientKind::Piecewise { breakpoints, values },
        })
    }

    pub fn indicator(shape: Shape, driver: usize, threshold: f64, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        check_values(shape, &low, "ind lo")?;
        check_values(shape, &high, "ind hi")?;
        if !threshold.is_finite() {
            return Err(Error::InvalidInput("ind: threshold must be finite".into()));
        }
        Ok(Self {
            shape,
            kind: CoefficientKind::Indicator {
                driver,
                threshold,
                low,
                high,
            },
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn kind(&self) -> &CoefficientKind {
        &self.kind
    }

    /// True when the value depends on the Brownian path.
    pub fn is_adapted(&self) -> bool {
        matches!(self.kind, CoefficientKind::Indicator { .. })
    }

    /// The `(driver, threshold)` pair of an indicator coefficient.
    pub fn condition(&self) -> Option<(usize, f64)> {
        match self.kind {
            CoefficientKind::Indicator { driver, threshold, .. } => Some((driver, threshold)),
            _ => None,
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        match &self.kind {
            CoefficientKind::Piecewise { breakpoints, .. } => breakpoints,
            _ => &[],
        }
    }

    /// Uniform bound `B` with `|value| ≤ B` everywhere.
    pub fn bound(&self) -> f64 {
        let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        match &self.kind {
            CoefficientKind::Constant(v) => max_abs(v),
            CoefficientKind::Piecewise { values, .. } => values.iter().map(|v| max_abs(v)).fold(0.0, f64::max),
            CoefficientKind::Indicator { low, high, .. } => max_abs(low).max(max_abs(high)),
        }
    }

    /// Value at time `t` given the Brownian position `w = W_t`.
    ///
    /// Predictable evaluation: on the grid, node `k` passes `W_{t_k}` and the
    /// result multiplies the increment over `[t_k, t_{k+1}]`.
    pub fn evaluate(&self, t: f64, w: &[f64]) -> &[f64] {
        match &self.kind {
            CoefficientKind::Indicator { driver, threshold, .. } => self.value_in_state(t, w[*driver] < *threshold),
            _ => self.value_in_state(t, false),
        }
    }

    /// Value at time `t` with the indicator (if any) forced to `high`.
    pub(crate) fn value_in_state(&self, t: f64, high_state: bool) -> &[f64] {
        match &self.kind {
            CoefficientKind::Constant(v) => v,
            CoefficientKind::Piecewise { breakpoints, values } => {
                let s = breakpoints.partition_point(|b| *b <= t);
                &values[s]
            }
            CoefficientKind::Indicator { low, high, .. } => {
                if high_state {
                    high
                } else {
                    low
                }
            }
        }
    }

    /// Evaluates the process at every node `t_0..=t_N` of `path`, row by row.
    pub fn evaluate_path(&self, path: &BrownianPath) -> Result<Vec<f64>> {
        self.check_driver(path.dim())?;
        let grid = path.grid();
        let mut out = Vec::with_capacity((grid.steps() + 1) * self.shape.len());
        for k in 0..=grid.steps() {
            out.extend_from_slice(self.evaluate(grid.time(k), path.w(k)));
        }
        Ok(out)
    }

    pub(crate) fn check_driver(&self, dim: usize) -> Result<()> {
        if let Some((j, _)) = self.condition() {
            if j >= dim {
                return Err(Error::Shape(format!(
                    "indicator driver W^{} on a {dim}-dimensional Brownian motion",
                    j + 1
                )));
            }
        }
        Ok(())
    }

    pub fn check_shape(&self, expected: Shape, what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape(format!("{what} is {} but {expected} is required", self.shape)));
        }
        Ok(())
    }

    /// Same values under another shape with the same number of entries.
    pub fn reshaped(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::Shape(format!("cannot view {} as {shape}", self.shape)));
        }
        Ok(Self {
            shape,
            kind: self.kind.clone(),
        })
    }

    /// `c · self`.
    pub fn scaled(&self, c: f64) -> Self {
        let s = |v: &Vec<f64>| v.iter().map(|x| c * x).collect::<Vec<f64>>();
        let kind = match &self.kind {
            CoefficientKind::Constant(v) => CoefficientKind::Constant(s(v)),
            CoefficientKind::Piecewise { breakpoints, values } => CoefficientKind::Piecewise {
                breakpoints: breakpoints.clone(),
                values: values.iter().map(s).collect(),
            },
            CoefficientKind::Indicator {
                driver,
                threshold,
                low,
                high,
            } => CoefficientKind::Indicator {
                driver: *driver,
                threshold: *threshold,
                low: s(low),
                high: s(high),
            },
        };
        Self { shape: self.shape, kind }
    }

    /// Combines two processes value by value, when the result is again one of
    /// the three kinds: deterministic with deterministic (breakpoints merged),
    /// an indicator with a constant, or two indicators on the same condition.
    pub fn zip_with<F>(&self, other: &Self, shape: Shape, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
    {
        match (self.condition(), other.condition()) {
            (None, None) => {
                let mut merged: Vec<f64> = self.breakpoints().iter().chain(other.breakpoints()).copied().collect();
                merged.sort_by(|a, b| a.total_cmp(b));
                merged.dedup();
                let values = (0..=merged.len())
                    .map(|s| {
                        let t = if s == 0 { f64::NEG_INFINITY } else { merged[s - 1] };
                        f(self.value_in_state(t, false), other.value_in_state(t, false))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if merged.is_empty() {
                    Self::constant(shape, values.into_iter().next().unwrap_or_default())
                } else {
                    Self::piecewise(shape, merged, values)
                }
            }
            (Some((j, c)), None) | (None, Some((j, c))) => {
                let (ind, det) = if self.is_adapted() { (self, other) } else { (other, self) };
                if !det.breakpoints().is_empty() {
                    return Err(Error::Unsupported(
                        "an indicator combined with a piecewise coefficient is not a declarative kind".into(),
                    ));
                }
                let d = det.value_in_state(0.0, false);
                let pick = |high: bool| {
                    let iv = ind.value_in_state(0.0, high);
                    if self.is_adapted() {
                        f(iv, d)
                    } else {
                        f(d, iv)
                    }
                };
                Self::indicator(shape, j, c, pick(false)?, pick(true)?)
            }
            (Some(a), Some(b)) => {
                if a.0 != b.0 || a.1.to_bits() != b.1.to_bits() {
                    return Err(Error::Unsupported(
                        "indicators on different conditions cannot be combined into one coefficient".into(),
                    ));
                }
                let low = f(self.value_in_state(0.0, false), other.value_in_state(0.0, false))?;
                let high = f(self.value_in_state(0.0, true), other.value_in_state(0.0, true))?;
                Self::indicator(shape, a.0, a.1, low, high)
            }
        }
    }

    /// Parses the mini-language for a coefficient of the given shape.
    pub fn parse(spec: &str, shape: Shape) -> Result<Self> {
        let spec = spec.trim();
        let (tag, body) = spec
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("`{spec}`: expected const:, pw: or ind:")))?;
        match tag.trim() {
            "const" => Self::constant(shape, parse_list(body)?),
            "pw" => {
                let fields = parse_fields(body, &["t", "v"])?;
                let breakpoints = parse_list(fields[0])?;
                let flat = parse_list(fields[1])?;
                let len = shape.len();
                if len == 0 || flat.len() != len * (breakpoints.len() + 1) {
                    return Err(Error::Shape(format!(
                        "pw: {} values for {} pieces of {shape}",
                        flat.len(),
                        breakpoints.len() + 1
                    )));
                }
                Self::piecewise(shape, breakpoints, flat.chunks(len).map(|c| c.to_vec()).collect())
            }
            "ind" => {
                let fields = parse_fields(body, &["j", "c", "lo", "hi"])?;
                let j: usize = fields[0]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("ind: bad driver index `{}`", fields[0])))?;
                if j == 0 {
                    return Err(Error::Parse("ind: driver index j is 1-based".into()));
                }
                let c = parse_number(fields[1])?;
                Self::indicator(shape, j - 1, c, parse_list(fields[2])?, parse_list(fields[3])?)
            }
            other => Err(Error::Parse(format!("unknown coefficient kind `{other}`"))),
        }
    }
}

fn parse_number(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad number `{}`", s.trim())))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::Parse(format!("expected a bracketed list, got `{s}`")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(parse_number).collect()
}

/// Splits `k1=v1;k2=v2` and returns the values in the order of `keys`.
fn parse_fields<'a>(body: &'a str, keys: &[&str]) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = body.split(';').collect();
    if parts.len() != keys.len() {
        return Err(Error::Parse(format!("expected fields {keys:?} in `{body}`")));
    }
    parts
        .iter()
        .zip(keys)
        .map(|(part, key)| {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected `{key}=...` in `{part}`")))?;
            if k.trim() != *key {
                return Err(Error::Parse(format!("expected field `{key}`, found `{}`", k.trim())));
            }
            Ok(v)
        })
        .collect()
}

struct List<'a>(&'a [f64]);

impl fmt::Display for List<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}

impl fmt::Display for CoefficientProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            CoefficientKind::Constant(v) => write!(f, "const:{}", List(v)),
            CoefficientKind::Piecewise { breakpoints, values } => {
                let flat: Vec<f64> = values.iter().flatten().copied().collect();
                write!(f, "pw:t={};v={}", List(breakpoints), List(&flat))
            }
            CoefficientKind::Indicator {
                driver,
                threshold,
                low,
                high,
            } => write!(
                f,
                "ind:j={};c={threshold};lo={};hi={}",
                driver + 1,
                List(low),
                List(high)
            ),
        }
    }
}
