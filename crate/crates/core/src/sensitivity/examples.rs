//! The two counterexamples where weak and strong sensitivities separate.
//!
//! Indicator-drift example: one asset, `σ̄ = 1`, `λ̄_t = 1{W_t < 0}`, log utility, `Δ ≡ 1`.
//! The strong sensitivity is `E∫λ̄Δ dt = T/2`; the weak one adds
//! `½E∫(∫₀ᵗΔdW)λ̄_t² dt`, which equals `−T^{3/2}/(3√(2π))`.
//!
//! Discrepancy functional
//! `E[e^{∫λ̄dW + ½∫λ̄²dt}(∫ΔdW − ∫Δλ̄dt)]` vanishes exactly when the two
//! sensitivities agree.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::estimate::Estimate;
use crate::field::NodeField;
use crate::market::{market_price_of_risk, CoefficientProcess, MarketModel};
use crate::paths::{PathEnsemble, TimeGrid};

/// `(strong, weak)` closed-form sensitivities of the indicator-drift example at horizon `t`.
pub fn example1_targets(t: f64) -> (f64, f64) {
    let strong = 0.5 * t;
    (strong, strong - t.powf(1.5) / (3.0 * (2.0 * PI).sqrt()))
}

/// Strong and weak indicator-drift sensitivities on one ensemble.
#[derive(Debug, Clone)]
pub struct Example1Report {
    pub horizon: f64,
    pub strong: Estimate,
    pub weak: Estimate,
    pub strong_target: f64,
    pub weak_target: f64,
    /// `weak − strong`, with the common-random-numbers standard error.
    pub gap: Estimate,
}

impl Example1Report {
    pub fn gap_target(&self) -> f64 {
        self.weak_target - self.strong_target
    }

    /// `|gap| / se(gap)`.
    pub fn gap_separation(&self) -> f64 {
        self.gap.mean().abs() / self.gap.std_error()
    }
}

/// The indicator-drift example on an existing one-dimensional ensemble.
pub fn example1_on(ens: &PathEnsemble) -> Result<Example1Report> {
    if ens.dim() != 1 {
        return Err(Error::Shape(format!("the indicator-drift example is one-dimensional, got {} Brownian motions", ens.dim())));
    }
    let grid = *ens.grid();
    let dt = grid.dt();
    let per_path = ens.map_paths(|p| {
        let (mut occupation, mut weak_extra) = (0.0, 0.0);
        for k in 0..grid.steps() {
            let w = p.w(k)[0];
            if w < 0.0 {
                occupation += dt;
                // ∫₀ᵗΔdW = W_t for Δ ≡ 1, and λ̄² = λ̄.
                weak_extra += w * dt;
            }
        }
        (occupation, occupation + 0.5 * weak_extra)
    });
    let seed = ens.seed();
    let strong = Estimate::from_samples(per_path.iter().map(|v| v.0).collect(), seed, "indicator-drift strong sensitivity")?;
    let weak = Estimate::from_samples(per_path.iter().map(|v| v.1).collect(), seed, "indicator-drift weak sensitivity")?;
    let gap = weak.difference(&strong, "indicator-drift weak - strong")?;
    let (strong_target, weak_target) = example1_targets(grid.horizon());
    Ok(Example1Report {
        horizon: grid.horizon(),
        strong,
        weak,
        strong_target,
        weak_target,
        gap,
    })
}

/// The indicator-drift example with a fresh ensemble of `paths` paths and `steps` steps.
pub fn example1_report(horizon: f64, paths: usize, steps: usize, seed: u64) -> Result<Example1Report> {
    let ens = PathEnsemble::simulate(TimeGrid::new(horizon, steps)?, 1, paths, seed)?;
    example1_on(&ens)
}

/// `E[e^{∫λ̄dW + ½∫λ̄²dt}(∫ΔdW − ∫Δλ̄dt)]` for a one-dimensional complete model.
pub fn example2_discrepancy(model: &MarketModel, delta: &CoefficientProcess, ens: &PathEnsemble) -> Result<Estimate> {
    if model.d() != 1 || model.n() != 1 || ens.dim() != 1 {
        return Err(Error::Shape("the discrepancy functional is defined for one asset and one Brownian motion".into()));
    }
    if delta.shape().len() != 1 {
        return Err(Error::Shape(format!("direction must be scalar, got shape {:?}", delta.shape())));
    }
    delta.check_driver(1)?;
    let grid = *ens.grid();
    let lambda = market_price_of_risk(model, &grid)?.into_field();
    let delta = NodeField::from_process(delta, &grid, 1)?;
    let dt = grid.dt();
    let samples = ens.map_paths(|p| {
        let (mut log_e, mut centred) = (0.0, 0.0);
        for k in 0..grid.steps() {
            let w = p.w(k);
            let (l, d, dw) = (lambda.at(k, w)[0], delta.at(k, w)[0], p.dw(k)[0]);
            log_e += l * dw + 0.5 * l * l * dt;
            centred += d * dw - d * l * dt;
        }
        log_e.exp() * centred
    });
    Estimate::from_samples(samples, ens.seed(), "weak-strong discrepancy")
}
