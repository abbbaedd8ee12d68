//! Utility functions: value, marginal utility, inverse, Fenchel conjugate.
//!
//! Positive powers are parameterized as `U(x) = p·x^{1/p}` with `p > 1`, so
//! that `U′(x) = x^{1/p − 1}`, `(U′)⁻¹(y) = y^{−q}` and `V(y) = (p − 1)·y^{1−q}`
//! with the conjugate exponent `q = p/(p − 1)`.

mod table;

use std::fmt;
use std::path::Path;

pub use table::TableUtility;

use crate::error::{Error, Result};

/// Probe points for the marginal-utility limits at zero and infinity.
pub const INADA_PROBES: (f64, f64) = (1e-8, 1e8);
const INADA_LOW_MIN: f64 = 1e2;
const INADA_HIGH_MAX: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub enum UtilitySpec {
    /// `U(x) = p·x^{1/p}`.
    Power { p: f64 },
    /// `U(x) = log x`.
    Log,
    Custom(TableUtility),
}

impl UtilitySpec {
    pub fn power(p: f64) -> Result<Self> {
        if !(p.is_finite() && p > 1.0) {
            return Err(Error::InvalidInput(format!("power utility needs p > 1, got {p}")));
        }
        Ok(UtilitySpec::Power { p })
    }

    /// `U(x) = 2√x`.
    pub fn sqrt() -> Self {
        UtilitySpec::Power { p: 2.0 }
    }

    /// Parses `power:p=<p>`, `log`, `sqrt` or `custom:file=<path>[;C=<c>;p=<p>]`.
    /// Relative table paths resolve against `base_dir` when given.
    pub fn parse(spec: &str, base_dir: Option<&Path>) -> Result<Self> {
        let spec = spec.trim();
        match spec {
            "log" => return Ok(UtilitySpec::Log),
            "sqrt" => return Ok(UtilitySpec::sqrt()),
            _ => {}
        }
        let (tag, body) = spec
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("unknown utility `{spec}`")))?;
        let mut fields = std::collections::BTreeMap::new();
        for part in body.split(';') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value in `{part}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let number = |key: &str| -> Result<Option<f64>> {
            fields
                .get(key)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{v}` for `{key}`"))))
                .transpose()
        };
        match tag.trim() {
            "power" => {
                let p = number("p")?.ok_or_else(|| Error::Parse("power utility needs p=<value>".into()))?;
                Self::power(p)
            }
            "custom" => {
                let file = fields
                    .get("file")
                    .ok_or_else(|| Error::Parse("custom utility needs file=<path>".into()))?;
                let mut path = Path::new(file).to_path_buf();
                if let (true, Some(base)) = (path.is_relative(), base_dir) {
                    path = base.join(path);
                }
                let growth = match (number("C")?, number("p")?) {
                    (Some(c), Some(p)) => Some((c, p)),
                    (None, None) => None,
                    _ => return Err(Error::Parse("growth constants need both C and p".into())),
                };
                Ok(UtilitySpec::Custom(TableUtility::from_file(&path, growth)?))
            }
            other => Err(Error::Parse(format!("unknown utility kind `{other}`"))),
        }
    }

    /// `p` of a power utility.
    pub fn exponent(&self) -> Option<f64> {
        match self {
            UtilitySpec::Power { p } => Some(*p),
            _ => None,
        }
    }

    /// Conjugate exponent `q = p/(p−1)` of a power utility.
    pub fn conjugate_exponent(&self) -> Option<f64> {
        self.exponent().map(|p| p / (p - 1.0))
    }

    /// Constants `(C, p)` with `0 ≤ U(x) ≤ C·x^{1/p}`, when known.
    pub fn growth(&self) -> Option<(f64, f64)> {
        match self {
            UtilitySpec::Power { p } => Some((*p, *p)),
            UtilitySpec::Log => None,
            UtilitySpec::Custom(t) => t.growth(),
        }
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        if x < 0.0 || x.is_nan() {
            return Err(Error::Domain(format!("utility evaluated at {x} < 0")));
        }
        match self {
            UtilitySpec::Power { p } => Ok(p * x.powf(1.0 / p)),
            UtilitySpec::Log => Ok(x.ln()),
            UtilitySpec::Custom(t) => t.value(x),
        }
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::Domain(format!("marginal utility evaluated at {x} <= 0")));
        }
        match self {
            UtilitySpec::Power { p } => Ok(x.powf(1.0 / p - 1.0)),
            UtilitySpec::Log => Ok(1.0 / x),
            UtilitySpec::Custom(t) => t.derivative(x),
        }
    }

    /// `U⁻¹(y)`.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        match self {
            UtilitySpec::Power { p } => {
                if y < 0.0 || y.is_nan() {
                    return Err(Error::Domain(format!("power utility takes no negative value {y}")));
                }
                Ok((y / p).powf(*p))
            }
            UtilitySpec::Log => Ok(y.exp()),
            UtilitySpec::Custom(t) => t.inverse(y),
        }
    }

    /// `(U′)⁻¹(y)`, the function `I` of the first-order condition `X = I(y·Z)`.
    pub fn marginal_inverse(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("marginal inverse at {y} <= 0")));
        }
        match self {
            UtilitySpec::Power { p } => Ok(y.powf(-p / (p - 1.0))),
            UtilitySpec::Log => Ok(1.0 / y),
            UtilitySpec::Custom(t) => t.marginal_inverse(y),
        }
    }

    /// Fenchel conjugate `V(y) = sup_x [U(x) − x·y]`.
    pub fn conjugate(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("conjugate at {y} <= 0")));
        }
        match self {
            UtilitySpec::Power { p } => Ok((p - 1.0) * y.powf(1.0 - p / (p - 1.0))),
            UtilitySpec::Log => Ok(-y.ln() - 1.0),
            UtilitySpec::Custom(t) => t.conjugate(y),
        }
    }

    pub fn check_hypotheses(&self) -> HypothesisReport {
        check_hypotheses(self)
    }
}

impl fmt::Display for UtilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilitySpec::Power { p } => write!(f, "power:p={p}"),
            UtilitySpec::Log => write!(f, "log"),
            UtilitySpec::Custom(t) => {
                write!(f, "custom:file={}", t.source())?;
                if let Some((c, p)) = t.growth() {
                    write!(f, ";C={c};p={p}")?;
                }
                Ok(())
            }
        }
    }
}

/// Which of the structural hypotheses on `U` hold on the probe grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub increasing: bool,
    pub concave: bool,
    /// `U′` is large at the lower probe.
    pub inada_zero: bool,
    /// `U′` is small at the upper probe.
    pub inada_infinity: bool,
    /// `U(0+) = 0`.
    pub zero_at_origin: bool,
    /// `0 ≤ U(x) ≤ C·x^{1/p}` on the probe grid; `None` without growth constants.
    pub growth_bound: Option<bool>,
    pub notes: Vec<String>,
}

impl HypothesisReport {
    /// Every hypothesis of the sensitivity theorem holds.
    pub fn in_theorem_scope(&self) -> bool {
        self.increasing && self.concave && self.inada_zero && self.inada_infinity && self.zero_at_origin && self.growth_bound == Some(true)
    }
}

fn probe_grid() -> Vec<f64> {
    (0..=160).map(|i| 10f64.powf(-8.0 + i as f64 / 10.0)).collect()
}

pub fn check_hypotheses(u: &UtilitySpec) -> HypothesisReport {
    let mut notes = Vec::new();
    let grid: Vec<f64> = match u {
        UtilitySpec::Custom(t) => {
            let (lo, hi) = t.domain();
            let g: Vec<f64> = probe_grid().into_iter().filter(|x| *x >= lo && *x <= hi).collect();
            if g.len() < 161 {
                notes.push(format!("table domain [{lo}, {hi}] does not cover every probe point"));
            }
            g
        }
        _ => probe_grid(),
    };
    let values: Vec<f64> = grid.iter().map(|x| u.value(*x).unwrap_or(f64::NAN)).collect();
    let increasing = values.len() >= 2 && values.windows(2).all(|w| w[1] > w[0]);
    let mut concave = values.len() >= 3;
    let mut strict = false;
    for i in 0..grid.len().saturating_sub(2) {
        let (a, b) = (grid[i], grid[i + 2]);
        let Ok(mid) = u.value(0.5 * (a + b)) else {
            concave = false;
            break;
        };
        let avg = 0.5 * (values[i] + values[i + 2]);
        if mid < avg - 1e-12 * (1.0 + avg.abs()) {
            concave = false;
        }
        strict |= mid > avg;
    }
    concave &= strict;
    let inada_zero = u.derivative(INADA_PROBES.0).is_ok_and(|d| d > INADA_LOW_MIN);
    let inada_infinity = u.derivative(INADA_PROBES.1).is_ok_and(|d| d < INADA_HIGH_MAX);
    let zero_at_origin = match u {
        UtilitySpec::Power { .. } => true,
        UtilitySpec::Log => {
            notes.push("log utility is unbounded below at 0".into());
            false
        }
        UtilitySpec::Custom(t) => {
            let (lo, _) = t.domain();
            let scale = t.value(1.0f64.clamp(t.domain().0, t.domain().1)).map(f64::abs).unwrap_or(1.0).max(1.0);
            lo <= INADA_PROBES.0 && t.value(lo).is_ok_and(|v| v.abs() <= 1e-3 * scale)
        }
    };
    let growth_bound = u.growth().map(|(c, p)| {
        grid.iter()
            .zip(&values)
            .all(|(x, v)| *v >= 0.0 && *v <= c * x.powf(1.0 / p) * (1.0 + 1e-9))
    });
    if growth_bound.is_none() {
        notes.push("no growth constants (C, p): growth bound not checked".into());
    }
    HypothesisReport {
        increasing,
        concave,
        inada_zero,
        inada_infinity,
        zero_at_origin,
        growth_bound,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn square_root_values() {
        let u = UtilitySpec::sqrt();
        assert_eq!(u.value(4.0).unwrap(), 4.0);
        assert_eq!(u.derivative(4.0).unwrap(), 0.5);
        assert_eq!(u.inverse(4.0).unwrap(), 4.0);
        assert!(u.value(-1.0).is_err());
    }

    #[test]
    fn log_values() {
        let u = UtilitySpec::Log;
        assert_eq!(u.value(1.0).unwrap(), 0.0);
        assert_eq!(u.derivative(1.0).unwrap(), 1.0);
        assert_eq!(u.value(0.0).unwrap(), f64::NEG_INFINITY);
    }

    /// Brute-force `sup_x [U(x) − xy]` on a dense log grid.
    fn grid_conjugate(u: &UtilitySpec, y: f64) -> f64 {
        (0..=40_000)
            .map(|i| 10f64.powf(-8.0 + 16.0 * i as f64 / 40_000.0))
            .map(|x| u.value(x).unwrap() - x * y)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn conjugate_matches_grid_maximization() {
        for u in [UtilitySpec::power(3.0).unwrap(), UtilitySpec::sqrt(), UtilitySpec::Log] {
            for y in [0.05, 0.3, 1.0, 2.5] {
                let v = u.conjugate(y).unwrap();
                let g = grid_conjugate(&u, y);
                assert!(g <= v + 1e-12 * (1.0 + v.abs()), "{u} y={y}");
                assert_relative_eq!(g, v, max_relative = 1e-6, epsilon = 1e-8);
                let x = u.marginal_inverse(y).unwrap();
                assert_relative_eq!(u.value(x).unwrap() - x * y, v, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn fenchel_inequality(x in 1e-4f64..1e4, y in 1e-3f64..1e2, p in 1.1f64..6.0) {
            let u = UtilitySpec::power(p).unwrap();
            let lhs = u.conjugate(y).unwrap();
            let rhs = u.value(x).unwrap() - x * y;
            prop_assert!(lhs >= rhs - 1e-10 * (1.0 + rhs.abs()));
        }

        #[test]
        fn inverses_round_trip(x in 1e-6f64..1e6, p in 1.1f64..6.0) {
            let u = UtilitySpec::power(p).unwrap();
            let back = u.inverse(u.value(x).unwrap()).unwrap();
            prop_assert!((back - x).abs() <= 1e-12 * x.max(1.0) * 10.0);
            let d = u.derivative(x).unwrap();
            let back = u.marginal_inverse(d).unwrap();
            prop_assert!((back - x).abs() <= 1e-10 * x);
        }

        #[test]
        fn strictly_concave(x in 1e-4f64..1e4, y in 1e-4f64..1e4) {
            prop_assume!((x - y).abs() > 1e-6 * x.max(y));
            let u = UtilitySpec::power(3.0).unwrap();
            let mid = u.value(0.5 * (x + y)).unwrap();
            prop_assert!(mid > 0.5 * (u.value(x).unwrap() + u.value(y).unwrap()));
        }
    }

    #[test]
    fn duality_recovers_utility() {
        // U(x) = inf_y [V(y) + xy], minimized at y = U'(x).
        let u = UtilitySpec::power(2.5).unwrap();
        for x in [0.01, 1.0, 50.0] {
            let best = (0..=20_000)
                .map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 20_000.0))
                .map(|y| u.conjugate(y).unwrap() + x * y)
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(best, u.value(x).unwrap(), max_relative = 1e-6);
        }
    }

    #[test]
    fn hypotheses_for_power_and_log() {
        let r = UtilitySpec::power(3.0).unwrap().check_hypotheses();
        assert!(r.in_theorem_scope(), "{r:?}");
        let r = UtilitySpec::Log.check_hypotheses();
        assert!(r.increasing && r.concave && r.inada_zero && r.inada_infinity);
        assert!(!r.zero_at_origin);
        assert!(!r.in_theorem_scope());
    }

    #[test]
    fn inverse_of_exponential_excess_is_in_scope() {
        // U = R⁻¹ with R(y) = e^y − y − 1, tabulated through y ↦ (R(y), y).
        let ys: Vec<f64> = (0..=3000).map(|i| 10f64.powf(-6.0 + 7.35 * i as f64 / 3000.0)).collect();
        let xs: Vec<f64> = ys.iter().map(|y| y.exp_m1() - y).collect();
        let t = TableUtility::new(xs, ys, Some((2f64.sqrt(), 2.0)), "R-inverse").unwrap();
        let r = UtilitySpec::Custom(t).check_hypotheses();
        assert!(r.in_theorem_scope(), "{r:?}");
    }

    #[test]
    fn parse_specs() {
        assert_eq!(UtilitySpec::parse("power:p=3", None).unwrap(), UtilitySpec::Power { p: 3.0 });
        assert_eq!(UtilitySpec::parse("sqrt", None).unwrap(), UtilitySpec::Power { p: 2.0 });
        assert_eq!(UtilitySpec::parse(" log ", None).unwrap(), UtilitySpec::Log);
        assert!(UtilitySpec::parse("power:p=1", None).is_err());
        assert!(UtilitySpec::parse("exp", None).is_err());
        assert!(UtilitySpec::parse("custom:file=/nonexistent/table.csv", None).is_err());
        assert_eq!(UtilitySpec::power(3.0).unwrap().to_string(), "power:p=3");
    }
}
