//! Optimal terminal wealth through the budget constraint.
//!
//! With state price density `Z` and an objective weight `H` (the Girsanov
//! weight of a measure change and/or the rate factor `e^{(1/p)∫r dt}`), the
//! problem `max E[H·U(X)]` subject to `E[Z·X] = x0` has first-order
//! condition `H·U′(X) = y·Z`, so `X = I(y·Z/H)` with `I = (U′)⁻¹`. For power
//! utility `y` is explicit:
//!
//! ```text
//! X = x0 · (Z/H)^{−q} / m,   m = E[H^q Z^{1−q}],   value = p · x0^{1/p} · m^{1/q}
//! ```
//!
//! and for log utility `X = x0·H / (E[H]·Z)`. Bisection on the budget map
//! `y ↦ E[Z·I(yZ/H)] − x0` is provided as an independent route.
//!
//! Only complete markets (`n = d`) and deterministic markets are solved: there
//! the minimal density (`ν = 0`) is the dual optimizer.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::estimate::{Estimate, ValueEstimate};
use crate::exec::{compensated_sum, mean};
use crate::field::NodeField;
use crate::market::{market_price_of_risk, MarketModel};
use crate::paths::{PathEnsemble, PathFunctional, TimeGrid};
use crate::utility::UtilitySpec;

const BISECTION_MAX_ITER: usize = 200;
const BISECTION_REL_TOL: f64 = 1e-12;

/// Optimal terminal wealth of one problem on one ensemble.
#[derive(Debug, Clone)]
pub struct OptimalWealth {
    /// `X*_T` per path.
    pub xstar: Vec<f64>,
    /// Budget multiplier `y`.
    pub multiplier: f64,
    /// State price density `Z_T` per path.
    pub density: PathFunctional,
    /// Objective weight `H` per path (all ones without rate).
    pub weight: Vec<f64>,
    /// `E[H·U(X*)]`.
    pub value: Estimate,
    /// `E[Z·X*]`, which should equal `x0`.
    pub budget: Estimate,
}

impl OptimalWealth {
    /// Wraps externally computed optimal wealth (e.g. for an incomplete
    /// market solved elsewhere) so sensitivities can consume it.
    pub fn from_external(model: &MarketModel, utility: &UtilitySpec, ens: &PathEnsemble, xstar: Vec<f64>) -> Result<Self> {
        if xstar.len() != ens.count() {
            return Err(Error::Shape(format!("{} wealth samples for {} paths", xstar.len(), ens.count())));
        }
        if let Some(i) = xstar.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidInput(format!("terminal wealth must be positive (path {i})")));
        }
        let stats = base_stats(model, ens)?;
        let logh = log_rate_weight(model, utility, &stats)?;
        let weight: Vec<f64> = logh.iter().map(|l| l.exp()).collect();
        let z: Vec<f64> = stats.iter().map(|s| s.0.exp()).collect();
        let payoff = xstar
            .iter()
            .zip(&weight)
            .map(|(x, h)| utility.value(*x).map(|u| h * u))
            .collect::<Result<Vec<f64>>>()?;
        let value = Estimate::from_samples(payoff, ens.seed(), "external optimal wealth value")?;
        let budget = Estimate::from_samples(z.iter().zip(&xstar).map(|(a, b)| a * b).collect(), ens.seed(), "budget")?;
        Ok(Self {
            xstar,
            multiplier: f64::NAN,
            density: PathFunctional::new(z, ens.seed())?,
            weight,
            value,
            budget,
        })
    }

    /// `H·U(X*)` per path.
    pub fn payoff(&self, utility: &UtilitySpec) -> Result<Vec<f64>> {
        self.xstar
            .iter()
            .zip(&self.weight)
            .map(|(x, h)| utility.value(*x).map(|u| h * u))
            .collect()
    }
}

/// Per path: `(log Z̄, ∫r dt)` with `Z̄ = E(−∫λ̄·dW)`.
pub(crate) fn base_stats(model: &MarketModel, ens: &PathEnsemble) -> Result<Vec<(f64, f64)>> {
    if ens.dim() != model.n() {
        return Err(Error::Shape(format!(
            "{}-dimensional paths for a model driven by {} Brownian motions",
            ens.dim(),
            model.n()
        )));
    }
    let grid = *ens.grid();
    let lambda = market_price_of_risk(model, &grid)?.into_field();
    let rate = model.rate().map(|r| NodeField::from_process(r, &grid, model.n())).transpose()?;
    let dt = grid.dt();
    Ok(ens.map_paths(|p| {
        let (mut log_z, mut r_int) = (0.0, 0.0);
        for k in 0..grid.steps() {
            let w = p.w(k);
            let l = lambda.at(k, w);
            let mut dot = 0.0;
            let mut sq = 0.0;
            for (a, b) in l.iter().zip(p.dw(k)) {
                dot += a * b;
                sq += a * a;
            }
            log_z += -dot - 0.5 * sq * dt;
            if let Some(r) = &rate {
                r_int += r.at(k, w)[0] * dt;
            }
        }
        (log_z, r_int)
    }))
}

/// `log H = (1/p)∫r dt` per path; rejects a rate under a non-power utility.
fn log_rate_weight(model: &MarketModel, utility: &UtilitySpec, stats: &[(f64, f64)]) -> Result<Vec<f64>> {
    match (model.rate(), utility.exponent()) {
        (None, _) => Ok(vec![0.0; stats.len()]),
        (Some(_), Some(p)) => Ok(stats.iter().map(|s| s.1 / p).collect()),
        (Some(_), None) => Err(Error::Unsupported(
            "a non-zero interest rate is only supported for power utilities".into(),
        )),
    }
}

pub(crate) fn check_solvable(model: &MarketModel) -> Result<()> {
    if model.is_complete() || model.is_deterministic() {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "incomplete market (d = {}, n = {}) with adapted coefficients: supply the optimal wealth externally",
            model.d(),
            model.n()
        )))
    }
}

/// Optimum of `max mean[H·U(X)]` s.t. `mean[Z·X] = x0`, given `log Z` and `log H` per path.
#[derive(Debug, Clone)]
pub struct WeightedOptimum {
    pub xstar: Vec<f64>,
    pub multiplier: f64,
    pub value: Estimate,
}

/// Closed-form weighted optimum for power and log utility.
pub fn solve_weighted(utility: &UtilitySpec, x0: f64, log_z: &[f64], log_h: &[f64], seed: u64) -> Result<WeightedOptimum> {
    if log_z.len() != log_h.len() || log_z.is_empty() {
        return Err(Error::Shape("density and weight samples differ in length".into()));
    }
    match utility {
        UtilitySpec::Power { p } => {
            let q = p / (p - 1.0);
            let a: Vec<f64> = log_z.iter().zip(log_h).map(|(z, h)| (q * h + (1.0 - q) * z).exp()).collect();
            let m = mean(&a);
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Numerical(format!("moment E[H^q Z^(1-q)] = {m}")));
            }
            let xstar: Vec<f64> = log_z.iter().zip(log_h).map(|(z, h)| x0 * (-q * (z - h)).exp() / m).collect();
            let c = p * x0.powf(1.0 / p);
            let value = c * m.powf(1.0 / q);
            let slope = c * m.powf(1.0 / q - 1.0) / q;
            let influence = a.iter().map(|ai| value + slope * (ai - m)).collect();
            Ok(WeightedOptimum {
                xstar,
                multiplier: (m / x0).powf(1.0 / q),
                value: Estimate::from_influence(value, influence, seed, format!("power value p={p}"))?,
            })
        }
        UtilitySpec::Log => {
            let h: Vec<f64> = log_h.iter().map(|l| l.exp()).collect();
            let hbar = mean(&h);
            let xstar: Vec<f64> = log_z.iter().zip(log_h).map(|(z, lh)| x0 * (lh - z).exp() / hbar).collect();
            // value = mean[h·(log x0 + log h − log Z)] − h̄·log h̄
            let a: Vec<f64> = log_z.iter().zip(log_h).zip(&h).map(|((z, lh), hi)| hi * (x0.ln() + lh - z)).collect();
            let abar = mean(&a);
            let value = abar - hbar * hbar.ln();
            let slope = hbar.ln() + 1.0;
            let influence = a.iter().zip(&h).map(|(ai, hi)| value + (ai - abar) - slope * (hi - hbar)).collect();
            Ok(WeightedOptimum {
                xstar,
                multiplier: hbar / x0,
                value: Estimate::from_influence(value, influence, seed, "log value")?,
            })
        }
        UtilitySpec::Custom(_) => Err(Error::Unsupported(
            "closed-form optimum only for power and log utilities; use the bisection solver".into(),
        )),
    }
}

/// Solves `mean[Z·I(y·Z/H)] = x0` for `y` by bisection in `log y`.
///
/// `bracket` overrides the initial `(y_lo, y_hi)`; it is widened
/// geometrically until it brackets the root.
pub fn solve_budget_bisection(
    utility: &UtilitySpec,
    x0: f64,
    z: &[f64],
    h: &[f64],
    bracket: Option<(f64, f64)>,
) -> Result<(f64, Vec<f64>)> {
    if z.len() != h.len() || z.is_empty() {
        return Err(Error::Shape("density and weight samples differ in length".into()));
    }
    let wealth = |y: f64| -> Result<Vec<f64>> { z.iter().zip(h).map(|(zi, hi)| utility.marginal_inverse(y * zi / hi)).collect() };
    let excess = |y: f64| -> Result<f64> {
        let x = wealth(y)?;
        Ok(compensated_sum(z.iter().zip(&x).map(|(a, b)| a * b)) / z.len() as f64 - x0)
    };
    let (mut lo, mut hi) = bracket.unwrap_or((0.5, 2.0));
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidInput(format!("bad bisection bracket ({lo}, {hi})")));
    }
    let mut widen = 0;
    while excess(lo)? < 0.0 {
        lo /= 16.0;
        widen += 1;
        if widen > 64 {
            return Err(Error::Numerical("budget map does not bracket its root from below".into()));
        }
    }
    while excess(hi)? > 0.0 {
        hi *= 16.0;
        widen += 1;
        if widen > 128 {
            return Err(Error::Numerical("budget map does not bracket its root from above".into()));
        }
    }
    for _ in 0..BISECTION_MAX_ITER {
        let mid = (lo * hi).sqrt();
        if excess(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= BISECTION_REL_TOL * hi {
            break;
        }
    }
    let y = (lo * hi).sqrt();
    Ok((y, wealth(y)?))
}

/// `Z̄_T = E(−∫λ̄ᵀdW)_T` per path (the minimal density, `ν = 0`).
pub fn state_price_density(model: &MarketModel, ens: &PathEnsemble) -> Result<PathFunctional> {
    let stats = base_stats(model, ens)?;
    PathFunctional::new(stats.iter().map(|s| s.0.exp()).collect(), ens.seed())
}

fn assemble(
    utility: &UtilitySpec,
    ens: &PathEnsemble,
    log_z: Vec<f64>,
    log_h: Vec<f64>,
    xstar: Vec<f64>,
    multiplier: f64,
    value: Option<Estimate>,
) -> Result<OptimalWealth> {
    let z: Vec<f64> = log_z.iter().map(|l| l.exp()).collect();
    let weight: Vec<f64> = log_h.iter().map(|l| l.exp()).collect();
    let value = match value {
        Some(v) => v,
        None => {
            let payoff = xstar
                .iter()
                .zip(&weight)
                .map(|(x, h)| utility.value(*x).map(|u| h * u))
                .collect::<Result<Vec<f64>>>()?;
            Estimate::from_samples(payoff, ens.seed(), "optimal value")?
        }
    };
    let budget = Estimate::from_samples(z.iter().zip(&xstar).map(|(a, b)| a * b).collect(), ens.seed(), "budget")?;
    if let Some(i) = xstar.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::Numerical(format!("optimal wealth not positive at path {i}")));
    }
    Ok(OptimalWealth {
        xstar,
        multiplier,
        density: PathFunctional::new(z, ens.seed())?,
        weight,
        value,
        budget,
    })
}

/// Optimal terminal wealth `X* = I(y·Z/H)` (closed form for power and log).
pub fn optimal_terminal_wealth(model: &MarketModel, utility: &UtilitySpec, ens: &PathEnsemble) -> Result<OptimalWealth> {
    check_solvable(model)?;
    let stats = base_stats(model, ens)?;
    let log_h = log_rate_weight(model, utility, &stats)?;
    let log_z: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let opt = solve_weighted(utility, model.x0(), &log_z, &log_h, ens.seed())?;
    assemble(utility, ens, log_z, log_h, opt.xstar, opt.multiplier, Some(opt.value))
}

/// Same problem as [`optimal_terminal_wealth`], solved by bisection on the budget map.
pub fn optimal_terminal_wealth_bisection(
    model: &MarketModel,
    utility: &UtilitySpec,
    ens: &PathEnsemble,
    bracket: Option<(f64, f64)>,
) -> Result<OptimalWealth> {
    check_solvable(model)?;
    let stats = base_stats(model, ens)?;
    let log_h = log_rate_weight(model, utility, &stats)?;
    let log_z: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let z: Vec<f64> = log_z.iter().map(|l| l.exp()).collect();
    let h: Vec<f64> = log_h.iter().map(|l| l.exp()).collect();
    let (y, xstar) = solve_budget_bisection(utility, model.x0(), &z, &h, bracket)?;
    assemble(utility, ens, log_z, log_h, xstar, y, None)
}

/// An exact (or reduced Monte Carlo) optimal value.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormValue {
    pub value: ValueEstimate,
    pub formula: String,
    /// Hash of the model, utility and grid the value was computed for.
    pub digest: String,
}

/// `Σ_k |λ_k|² Δt` and `Σ_k r_k Δt` of a deterministic model on `grid`.
pub(crate) fn deterministic_integrals(model: &MarketModel, grid: &TimeGrid) -> Result<(f64, f64)> {
    let lambda = market_price_of_risk(model, grid)?.into_field();
    let rate = model.rate().map(|r| NodeField::from_process(r, grid, model.n())).transpose()?;
    let w = vec![0.0; model.n()];
    let dt = grid.dt();
    let mut sq = 0.0;
    let mut r_int = 0.0;
    for k in 0..grid.steps() {
        sq += lambda.at(k, &w).iter().map(|v| v * v).sum::<f64>() * dt;
        if let Some(r) = &rate {
            r_int += r.at(k, &w)[0] * dt;
        }
    }
    Ok((sq, r_int))
}

/// Closed-form optimal value:
///
/// - log: `log x0 + ½·E∫|λ̄|²dt` (exact for deterministic `λ̄`, Monte Carlo otherwise, which needs `ens`);
/// - power with deterministic coefficients: `p·x0^{1/p}·exp((1/p)∫r dt + (q−1)/2·∫|λ̄|²dt)`.
///
/// Time integrals are left-point sums on `grid`, matching the simulated estimators.
pub fn value_closed_form(
    model: &MarketModel,
    utility: &UtilitySpec,
    grid: &TimeGrid,
    ens: Option<&PathEnsemble>,
) -> Result<ClosedFormValue> {
    let mut hasher = DefaultHasher::new();
    format!("{model:?}|{utility}|{}|{}", grid.horizon(), grid.steps()).hash(&mut hasher);
    let digest = format!("{:016x}", hasher.finish());
    let x0 = model.x0();
    match utility {
        UtilitySpec::Log => {
            if model.rate().is_some() {
                return Err(Error::Unsupported("log utility with an interest rate".into()));
            }
            if model.is_deterministic() {
                let (sq, _) = deterministic_integrals(model, grid)?;
                return Ok(ClosedFormValue {
                    value: ValueEstimate::exact(x0.ln() + 0.5 * sq, "log closed form"),
                    formula: "log x0 + 1/2 int |lambda|^2 dt".into(),
                    digest,
                });
            }
            let ens = ens.ok_or_else(|| {
                Error::InvalidInput("an adapted market price of risk needs an ensemble for E int |lambda|^2 dt".into())
            })?;
            if ens.grid() != grid {
                return Err(Error::Shape("ensemble grid differs from the requested grid".into()));
            }
            let lambda = market_price_of_risk(model, grid)?.into_field();
            let dt = grid.dt();
            let samples = ens.map_paths(|p| {
                let mut s = 0.0;
                for k in 0..grid.steps() {
                    s += lambda.at(k, p.w(k)).iter().map(|v| v * v).sum::<f64>() * dt;
                }
                x0.ln() + 0.5 * s
            });
            Ok(ClosedFormValue {
                value: Estimate::from_samples(samples, ens.seed(), "log closed form (MC)")?.value,
                formula: "log x0 + 1/2 E int |lambda|^2 dt".into(),
                digest,
            })
        }
        UtilitySpec::Power { p } => {
            if !model.is_deterministic() {
                return Err(Error::Unsupported(
                    "power closed form needs deterministic coefficients".into(),
                ));
            }
            let q = p / (p - 1.0);
            let (sq, r_int) = deterministic_integrals(model, grid)?;
            let v = p * x0.powf(1.0 / p) * (r_int / p + 0.5 * (q - 1.0) * sq).exp();
            Ok(ClosedFormValue {
                value: ValueEstimate::exact(v, format!("power closed form p={p}")),
                formula: "p x0^(1/p) exp((1/p) int r dt + (q-1)/2 int |lambda|^2 dt)".into(),
                digest,
            })
        }
        UtilitySpec::Custom(_) => Err(Error::Unsupported("no closed form for tabulated utilities".into())),
    }
}
