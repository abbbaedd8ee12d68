//! Modular functionals `J` and `I`, their norms, and the Hölder pairing.
//!
//! For a finite family `{ν}` of kernel-valued processes (`σ̄ν = 0`) let
//! `Y^ν = E(−∫(λ̄ + ν)·dW)_T`. On the empirical measure of an ensemble:
//!
//! ```text
//! J(Z) = max_ν mean[Y^ν · U⁻¹(|Z|)]
//! I(Z) = min_ν mean[|Z| · V(Y^ν / |Z|)]
//! ‖Z‖_I = (min_ν mean[(Y^ν)^{1−q} |Z|^q])^{1/q}
//! ‖X‖_J = (max_ν mean[Y^ν |X|^p])^{1/p}
//! ```
//!
//! Multiplicative constants that only depend on `p` are dropped. Since all
//! quantities live on the same finite measure, Hölder's inequality
//! `|mean(YZ)| ≤ ‖Y‖_I·‖Z‖_J` holds exactly up to round-off.
//!
//! With a finite family `‖·‖_I` is an upper and `‖·‖_J` a lower
//! approximation of the norms over the whole kernel.

use crate::error::{Error, Result};
use crate::estimate::Estimate;
use crate::exec::mean;
use crate::field::NodeField;
use crate::market::{market_price_of_risk, CoefficientProcess, MarketModel, Shape};
use crate::paths::PathEnsemble;
use crate::utility::UtilitySpec;

/// Tolerance for `σ̄ν = 0`, relative to `1 + |σ̄|·|ν|`.
pub const KERNEL_TOL: f64 = 1e-9;
/// Relative slack allowed in the Hölder check (round-off only).
pub const HOLDER_SLACK: f64 = 1e-9;

const LUX_MAX_ITER: usize = 200;
const SCALE_LIMIT: f64 = 1e300;
const AMEMIYA_LOG_K: (f64, f64, f64) = (-30.0, 30.0, 0.5);
const GOLDEN_ITER: usize = 200;

/// Which modular to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModularKind {
    /// `max_ν mean Y^ν U⁻¹(|Z|)`
    J,
    /// `min_ν mean |Z| V(Y^ν/|Z|)`
    I,
    /// `min_ν mean (Y^ν)^{1−q}|Z|^q` (power utilities)
    PowerI,
}

/// A utility together with the densities `Y^ν` of a kernel family on one ensemble.
#[derive(Debug, Clone)]
pub struct ModularFunctional {
    utility: UtilitySpec,
    /// `densities[f][i]` is `Y^{ν_f}` on path `i`.
    densities: Vec<Vec<f64>>,
    seed: u64,
}

/// Checks `σ̄ν = 0` in every (segment, indicator state).
fn check_kernel_member(model: &MarketModel, nu: &CoefficientProcess, ens: &PathEnsemble, index: usize) -> Result<()> {
    let (d, n) = (model.d(), model.n());
    nu.check_shape(Shape::Vector(n), "kernel family member")?;
    NodeField::tabulate(&[model.sigma(), nu], ens.grid(), n, 0, |v| {
        let (sigma, nu) = (v[0], v[1]);
        let snorm = sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nnorm = nu.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..d {
            let row: f64 = (0..n).map(|j| sigma[i * n + j] * nu[j]).sum();
            if row.abs() > KERNEL_TOL * (1.0 + snorm * nnorm) {
                return Err(Error::InvalidInput(format!(
                    "kernel family member {index} is not annihilated by the volatility (residual {row:e})"
                )));
            }
        }
        Ok(Vec::new())
    })
    .map(|_| ())
}

impl ModularFunctional {
    /// Builds `Y^ν` for each family member; an empty family means `{0}`.
    pub fn new(model: &MarketModel, utility: &UtilitySpec, family: &[CoefficientProcess], ens: &PathEnsemble) -> Result<Self> {
        let n = model.n();
        if ens.dim() != n {
            return Err(Error::Shape(format!("{}-dimensional paths for a model driven by {n} Brownian motions", ens.dim())));
        }
        let zero = [CoefficientProcess::zeros(Shape::Vector(n))];
        let family = if family.is_empty() { &zero[..] } else { family };
        for (i, nu) in family.iter().enumerate() {
            check_kernel_member(model, nu, ens, i)?;
        }
        let grid = *ens.grid();
        let lambda = market_price_of_risk(model, &grid)?.into_field();
        let fields = family
            .iter()
            .map(|nu| NodeField::from_process(nu, &grid, n))
            .collect::<Result<Vec<_>>>()?;
        let dt = grid.dt();
        let per_path = ens.map_paths(|p| {
            let mut logs = vec![0.0; fields.len()];
            for k in 0..grid.steps() {
                let w = p.w(k);
                let dw = p.dw(k);
                let l = lambda.at(k, w);
                for (f, field) in fields.iter().enumerate() {
                    let nu = field.at(k, w);
                    let (mut dot, mut sq) = (0.0, 0.0);
                    for j in 0..n {
                        let th = l[j] + nu[j];
                        dot += th * dw[j];
                        sq += th * th;
                    }
                    logs[f] += -dot - 0.5 * sq * dt;
                }
            }
            logs
        });
        let densities = (0..fields.len())
            .map(|f| per_path.iter().map(|v| v[f].exp()).collect::<Vec<f64>>())
            .collect::<Vec<_>>();
        if densities.iter().flatten().any(|y| !(y.is_finite() && *y > 0.0)) {
            return Err(Error::Numerical("density of a kernel family member over- or underflowed".into()));
        }
        Ok(Self {
            utility: utility.clone(),
            densities,
            seed: ens.seed(),
        })
    }

    pub fn family_size(&self) -> usize {
        self.densities.len()
    }

    /// `Y^ν` of family member `f`.
    pub fn density(&self, f: usize) -> &[f64] {
        &self.densities[f]
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        let m = self.densities[0].len();
        if z.len() != m {
            return Err(Error::Shape(format!("{} samples for {m} paths", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample".into()));
        }
        Ok(())
    }

    fn power_exponents(&self) -> Result<(f64, f64)> {
        match (self.utility.exponent(), self.utility.conjugate_exponent()) {
            (Some(p), Some(q)) => Ok((p, q)),
            _ => Err(Error::Unsupported("explicit modular norms need a power utility".into())),
        }
    }

    /// Evaluates `sample(y, z)` for every member and keeps the best one.
    fn extremum<F>(&self, z: &[f64], maximize: bool, what: &str, sample: F) -> Result<Estimate>
    where
        F: Fn(f64, f64) -> Result<f64>,
    {
        self.check_len(z)?;
        let mut best: Option<Estimate> = None;
        for y in &self.densities {
            let samples = y.iter().zip(z).map(|(y, z)| sample(*y, *z)).collect::<Result<Vec<f64>>>()?;
            if samples.iter().any(|s| !s.is_finite()) {
                return Err(Error::Numerical(format!("{what}: non-finite moment")));
            }
            let e = Estimate::from_samples(samples, self.seed, what)?;
            let better = match &best {
                None => true,
                Some(b) => (maximize && e.mean() > b.mean()) || (!maximize && e.mean() < b.mean()),
            };
            if better {
                best = Some(e);
            }
        }
        Ok(best.expect("family is never empty"))
    }

    /// `J(Z) = max_ν mean[Y^ν U⁻¹(|Z|)]`.
    pub fn j_functional(&self, z: &[f64]) -> Result<Estimate> {
        self.extremum(z, true, "J modular", |y, z| Ok(y * self.utility.inverse(z.abs())?))
    }

    /// `I(Z) = min_ν mean[|Z| V(Y^ν/|Z|)]`, with the `Z = 0` terms set to their limit 0.
    pub fn i_modular(&self, z: &[f64]) -> Result<Estimate> {
        self.extremum(z, false, "I modular", |y, z| {
            let a = z.abs();
            if a == 0.0 {
                Ok(0.0)
            } else {
                Ok(a * self.utility.conjugate(y / a)?)
            }
        })
    }

    /// `min_ν mean[(Y^ν)^{1−q}|Z|^q]`.
    pub fn power_i_modular(&self, z: &[f64]) -> Result<Estimate> {
        let (_, q) = self.power_exponents()?;
        self.extremum(z, false, "power I modular", |y, z| Ok(y.powf(1.0 - q) * z.abs().powf(q)))
    }

    /// Value of the chosen modular; `+∞` when a moment overflows, which is
    /// what the norm searches need at extreme scales.
    pub fn modular(&self, kind: ModularKind, z: &[f64]) -> Result<f64> {
        let e = match kind {
            ModularKind::J => self.j_functional(z),
            ModularKind::I => self.i_modular(z),
            ModularKind::PowerI => self.power_i_modular(z),
        };
        match e {
            Ok(e) => Ok(e.mean()),
            Err(Error::Numerical(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    /// `‖Z‖_I = (min_ν mean[(Y^ν)^{1−q}|Z|^q])^{1/q}`.
    pub fn norm_i(&self, z: &[f64]) -> Result<f64> {
        let (_, q) = self.power_exponents()?;
        Ok(self.power_i_modular(z)?.mean().powf(1.0 / q))
    }

    /// `‖X‖_J = (max_ν mean[Y^ν|X|^p])^{1/p}`.
    pub fn norm_j(&self, x: &[f64]) -> Result<f64> {
        let (p, _) = self.power_exponents()?;
        let e = self.extremum(x, true, "J norm moment", |y, x| Ok(y * x.abs().powf(p)))?;
        Ok(e.mean().powf(1.0 / p))
    }

    /// `F(s·z)`, infinite once the scaled sample overflows.
    fn scaled_modular(&self, kind: ModularKind, z: &[f64], s: f64) -> Result<f64> {
        let sz = scaled(z, s);
        if sz.iter().any(|v| !v.is_finite()) {
            self.check_len(z)?;
            return Ok(f64::INFINITY);
        }
        self.modular(kind, &sz)
    }

    /// Luxemburg norm of `z` under the chosen modular.
    pub fn luxemburg(&self, kind: ModularKind, z: &[f64]) -> Result<f64> {
        luxemburg_norm(|s| self.scaled_modular(kind, z, s))
    }

    /// Amemiya norm of `z` under the chosen modular.
    pub fn amemiya(&self, kind: ModularKind, z: &[f64]) -> Result<f64> {
        amemiya_norm(|s| self.scaled_modular(kind, z, s))
    }

    /// `|mean(YZ)| ≤ ‖Y‖_I·‖Z‖_J`.
    pub fn holder_check(&self, y: &[f64], z: &[f64]) -> Result<HolderReport> {
        self.check_len(y)?;
        self.check_len(z)?;
        let prod: Vec<f64> = y.iter().zip(z).map(|(a, b)| a * b).collect();
        let lhs = mean(&prod).abs();
        let (norm_i, norm_j) = (self.norm_i(y)?, self.norm_j(z)?);
        let rhs = norm_i * norm_j;
        Ok(HolderReport {
            lhs,
            norm_i,
            norm_j,
            ratio: if rhs > 0.0 { lhs / rhs } else if lhs == 0.0 { 0.0 } else { f64::INFINITY },
            holds: lhs <= rhs * (1.0 + HOLDER_SLACK),
        })
    }
}

fn scaled(z: &[f64], s: f64) -> Vec<f64> {
    z.iter().map(|v| v * s).collect()
}

/// Outcome of a Hölder check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderReport {
    pub lhs: f64,
    pub norm_i: f64,
    pub norm_j: f64,
    /// `lhs / (norm_i·norm_j)`.
    pub ratio: f64,
    pub holds: bool,
}

/// `inf{β > 0 : F(Z/β) ≤ 1}` by bisection in `log β`, where `f(s) = F(s·Z)`.
pub fn luxemburg_norm<F>(f: F) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let ok = |beta: f64| -> Result<bool> {
        let v = f(1.0 / beta)?;
        Ok(v.is_finite() && v <= 1.0)
    };
    if ok(1.0 / SCALE_LIMIT)? {
        return Ok(0.0);
    }
    if !ok(SCALE_LIMIT)? {
        return Err(Error::Numerical("modular exceeds 1 at every scale: no finite Luxemburg norm".into()));
    }
    let (mut lo, mut hi) = (1.0, 1.0);
    while ok(lo)? {
        lo *= 0.5;
    }
    while !ok(hi)? {
        hi *= 2.0;
    }
    for _ in 0..LUX_MAX_ITER {
        let mid = (lo * hi).sqrt();
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(hi)
}

/// `inf_{k>0} (1 + F(kZ))/k`: log-grid scan, then golden section, where `f(s) = F(s·Z)`.
pub fn amemiya_norm<F>(f: F) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let (lo, hi, step) = AMEMIYA_LOG_K;
    if f(hi.exp())? == 0.0 {
        return Ok(0.0);
    }
    let g = |t: f64| -> Result<f64> {
        let v = f(t.exp())?;
        Ok(if v.is_finite() { (1.0 + v) * (-t).exp() } else { f64::INFINITY })
    };
    let count = ((hi - lo) / step).round() as usize;
    let ts: Vec<f64> = (0..=count).map(|i| lo + step * i as f64).collect();
    let vals = ts.iter().map(|t| g(*t)).collect::<Result<Vec<f64>>>()?;
    let (imin, vmin) = vals
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
    if !vmin.is_finite() {
        return Err(Error::Numerical("modular is infinite at every scale: no finite Amemiya norm".into()));
    }
    let (mut a, mut b) = (ts[imin.saturating_sub(1)], ts[(imin + 1).min(count)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - phi * (b - a), a + phi * (b - a));
    let (mut gc, mut gd) = (g(c)?, g(d)?);
    for _ in 0..GOLDEN_ITER {
        if b - a < 1e-12 {
            break;
        }
        if gc < gd {
            b = d;
            d = c;
            gd = gc;
            c = b - phi * (b - a);
            gc = g(c)?;
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + phi * (b - a);
            gd = g(d)?;
        }
    }
    Ok(vmin.min(gc).min(gd))
}
