//! Weakly and strongly perturbed optimal values.
//!
//! Strong: the perturbed coefficients `(μ^τ, σ^τ, r^τ)` drive the wealth
//! dynamics under `P`, so the optimum uses `Z_s = E(−∫λ^τ·dW)`.
//!
//! Weak: the base dynamics are kept and the measure changes to `P^τ` with
//! density `G = E(∫(λ^τ − λ̄)·dW)`. Under `P^τ` the base market has price of
//! risk `λ^τ` against the Brownian motion `W^τ = W − ∫(λ^τ − λ̄)dt`, so its
//! density is `Z^τ = E(−∫λ^τ·dW^τ)`. The coefficients are read on the
//! original path `W`: they are the same random variables, only the measure
//! changes. Note `G·Z^τ = Z̄` pathwise.
//!
//! Both estimators run on the same ensemble (common random numbers) and at
//! `τ = 0` return bit-identical results.

use crate::error::{Error, Result};
use crate::estimate::Estimate;
use crate::field::NodeField;
use crate::market::{lambda_row, matrix, numerical_rank, CoefficientProcess, MarketModel, PerturbationSpec, Shape, DEFAULT_RANK_TOL};
use crate::paths::PathEnsemble;
use crate::solver::solve_weighted;
use crate::utility::UtilitySpec;

/// Per-path functionals of a perturbed model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedPath {
    /// `log G`, the log Girsanov weight of `P^τ` against `P`.
    pub log_weight: f64,
    /// `log Z^τ` built on the shifted Brownian motion.
    pub log_density_weak: f64,
    /// `log E(−∫λ^τ·dW)`.
    pub log_density_strong: f64,
    /// `log Z̄`.
    pub log_density_base: f64,
    /// `∫r^τ dt`.
    pub rate_integral: f64,
    /// `∫|λ^τ|² dt`.
    pub lambda_sq: f64,
}

fn check_model_class(model: &MarketModel, pert: &PerturbationSpec) -> Result<()> {
    if model.is_complete() || (model.is_deterministic() && pert.is_deterministic()) {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "incomplete market (d = {}, n = {}) with adapted coefficients has no built-in optimizer",
            model.d(),
            model.n()
        )))
    }
}

/// Tabulates `[λ̄, λ^τ, r̄, r^τ]` per state, refusing kernel-changing perturbations.
fn perturbed_table(model: &MarketModel, pert: &PerturbationSpec, ens: &PathEnsemble) -> Result<NodeField> {
    pert.validate(model)?;
    if ens.dim() != model.n() {
        return Err(Error::Shape(format!(
            "{}-dimensional paths for a model driven by {} Brownian motions",
            ens.dim(),
            model.n()
        )));
    }
    let (d, n, cap, tau) = (model.d(), model.n(), model.cond_cap(), pert.tau);
    let rate = model.rate_or_zero();
    let zmu = CoefficientProcess::zeros(Shape::Vector(d));
    let zsig = CoefficientProcess::zeros(Shape::Matrix(d, n));
    let zr = CoefficientProcess::zeros(Shape::Scalar);
    let procs = [
        model.mu(),
        model.sigma(),
        &rate,
        pert.dmu.as_ref().unwrap_or(&zmu),
        pert.dsigma.as_ref().unwrap_or(&zsig),
        pert.dr.as_ref().unwrap_or(&zr),
    ];
    let check_kernel = pert.dsigma.is_some() && tau != 0.0;
    NodeField::tabulate(&procs, ens.grid(), n, 2 * n + 2, |v| {
        let mu_t: Vec<f64> = v[0].iter().zip(v[3]).map(|(a, b)| a + tau * b).collect();
        let sig_t: Vec<f64> = v[1].iter().zip(v[4]).map(|(a, b)| a + tau * b).collect();
        let r_t = v[2][0] + tau * v[5][0];
        if check_kernel {
            let a = matrix(v[1], d, n);
            let b = matrix(&sig_t, d, n);
            let stacked = nalgebra::DMatrix::from_fn(2 * d, n, |i, j| if i < d { a[(i, j)] } else { b[(i - d, j)] });
            let ranks = (
                numerical_rank(&a, DEFAULT_RANK_TOL),
                numerical_rank(&b, DEFAULT_RANK_TOL),
                numerical_rank(&stacked, DEFAULT_RANK_TOL),
            );
            if !(ranks.0 == ranks.1 && ranks.1 == ranks.2) {
                return Err(Error::KernelStability(format!(
                    "perturbed volatility at tau = {tau} changes the kernel (ranks {} / {} / stacked {})",
                    ranks.0, ranks.1, ranks.2
                )));
            }
        }
        let mut row = lambda_row(v[0], v[1], v[2][0], d, n, cap)?;
        row.extend(lambda_row(&mu_t, &sig_t, r_t, d, n, cap)?);
        row.push(v[2][0]);
        row.push(r_t);
        Ok(row)
    })
}

/// Per-path functionals of the perturbed model, in path order.
pub fn perturbed_paths(model: &MarketModel, pert: &PerturbationSpec, ens: &PathEnsemble) -> Result<Vec<PerturbedPath>> {
    let table = perturbed_table(model, pert, ens)?;
    let n = model.n();
    let grid = *ens.grid();
    let dt = grid.dt();
    Ok(ens.map_paths(|p| {
        let mut s = PerturbedPath {
            log_weight: 0.0,
            log_density_weak: 0.0,
            log_density_strong: 0.0,
            log_density_base: 0.0,
            rate_integral: 0.0,
            lambda_sq: 0.0,
        };
        for k in 0..grid.steps() {
            let row = table.at(k, p.w(k));
            let (base, pert) = (&row[..n], &row[n..2 * n]);
            let dw = p.dw(k);
            let (mut g_dot, mut g_sq, mut zw_dot, mut zs_dot, mut sq, mut b_dot, mut b_sq) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..n {
                let delta = pert[j] - base[j];
                let shifted = dw[j] - delta * dt;
                g_dot += delta * dw[j];
                g_sq += delta * delta;
                zw_dot += pert[j] * shifted;
                zs_dot += pert[j] * dw[j];
                sq += pert[j] * pert[j];
                b_dot += base[j] * dw[j];
                b_sq += base[j] * base[j];
            }
            s.log_weight += g_dot - 0.5 * g_sq * dt;
            s.log_density_weak += -zw_dot - 0.5 * sq * dt;
            s.log_density_strong += -zs_dot - 0.5 * sq * dt;
            s.log_density_base += -b_dot - 0.5 * b_sq * dt;
            s.rate_integral += row[2 * n + 1] * dt;
            s.lambda_sq += sq * dt;
        }
        s
    }))
}

/// A weak value together with the mean of its Girsanov weight (which should be 1).
#[derive(Debug, Clone)]
pub struct WeakValue {
    pub value: Estimate,
    pub weight_mean: Estimate,
}

fn rate_exponent(model: &MarketModel, pert: &PerturbationSpec, utility: &UtilitySpec) -> Result<Option<f64>> {
    let has_rate = model.rate().is_some() || pert.dr.is_some();
    match (has_rate, utility) {
        (false, _) => Ok(None),
        (true, UtilitySpec::Power { p }) => Ok(Some(*p)),
        (true, _) => Err(Error::Unsupported("interest rates are only supported for power utilities".into())),
    }
}

fn weak_from_paths(
    model: &MarketModel,
    utility: &UtilitySpec,
    pert: &PerturbationSpec,
    stats: &[PerturbedPath],
    seed: u64,
) -> Result<WeakValue> {
    let weights: Vec<f64> = stats.iter().map(|s| s.log_weight.exp()).collect();
    let weight_mean = Estimate::from_samples(weights.clone(), seed, "girsanov weight mean")?;
    let value = match utility {
        UtilitySpec::Log => {
            rate_exponent(model, pert, utility)?;
            let x0 = model.x0().ln();
            let samples = stats.iter().zip(&weights).map(|(s, g)| x0 + g * (0.5 * s.lambda_sq)).collect();
            Estimate::from_samples(samples, seed, format!("weak log value tau={}", pert.tau))?
        }
        UtilitySpec::Power { .. } => {
            let p = rate_exponent(model, pert, utility)?;
            let log_h: Vec<f64> = stats
                .iter()
                .map(|s| s.log_weight + p.map_or(0.0, |p| s.rate_integral / p))
                .collect();
            let log_z: Vec<f64> = stats.iter().map(|s| s.log_weight + s.log_density_weak).collect();
            let mut v = solve_weighted(utility, model.x0(), &log_z, &log_h, seed)?.value;
            v.value.estimator = format!("weak power value tau={}", pert.tau);
            v
        }
        UtilitySpec::Custom(_) => return Err(Error::Unsupported("no optimizer for tabulated utilities".into())),
    };
    Ok(WeakValue { value, weight_mean })
}

fn strong_from_paths(
    model: &MarketModel,
    utility: &UtilitySpec,
    pert: &PerturbationSpec,
    stats: &[PerturbedPath],
    seed: u64,
) -> Result<Estimate> {
    match utility {
        UtilitySpec::Log => {
            rate_exponent(model, pert, utility)?;
            let x0 = model.x0().ln();
            let samples = stats.iter().map(|s| x0 + 0.5 * s.lambda_sq).collect();
            Estimate::from_samples(samples, seed, format!("strong log value tau={}", pert.tau))
        }
        UtilitySpec::Power { .. } => {
            let p = rate_exponent(model, pert, utility)?;
            let log_h: Vec<f64> = stats.iter().map(|s| p.map_or(0.0, |p| s.rate_integral / p)).collect();
            let log_z: Vec<f64> = stats.iter().map(|s| s.log_density_strong).collect();
            let mut v = solve_weighted(utility, model.x0(), &log_z, &log_h, seed)?.value;
            v.value.estimator = format!("strong power value tau={}", pert.tau);
            Ok(v)
        }
        UtilitySpec::Custom(_) => Err(Error::Unsupported("no optimizer for tabulated utilities".into())),
    }
}

/// Weakly perturbed value `u^w(λ^τ) = sup E^{P^τ}[U(X)]` over the base market's budget set.
///
/// Refuses (with [`Error::KernelStability`]) volatility perturbations that change `Ker σ̄`.
pub fn weak_value(model: &MarketModel, utility: &UtilitySpec, pert: &PerturbationSpec, ens: &PathEnsemble) -> Result<WeakValue> {
    check_model_class(model, pert)?;
    let stats = perturbed_paths(model, pert, ens)?;
    weak_from_paths(model, utility, pert, &stats, ens.seed())
}

/// Strongly perturbed value: the optimum of the market `(μ^τ, σ^τ, r^τ)` under `P`.
pub fn strong_value(model: &MarketModel, utility: &UtilitySpec, pert: &PerturbationSpec, ens: &PathEnsemble) -> Result<Estimate> {
    check_model_class(model, pert)?;
    let stats = perturbed_paths(model, pert, ens)?;
    strong_from_paths(model, utility, pert, &stats, ens.seed())
}

/// One row of a value surface.
#[derive(Debug, Clone)]
pub struct SurfaceRow {
    pub tau: f64,
    pub weak: Estimate,
    pub strong: Estimate,
    pub weight_mean: Estimate,
}

impl SurfaceRow {
    /// `u^w − u^s` with its common-random-numbers standard error.
    pub fn gap(&self) -> Result<Estimate> {
        self.weak.difference(&self.strong, format!("weak - strong tau={}", self.tau))
    }
}

/// Weak and strong values over `taus`, all on the same ensemble.
pub fn value_surface(
    model: &MarketModel,
    utility: &UtilitySpec,
    pert: &PerturbationSpec,
    taus: &[f64],
    ens: &PathEnsemble,
) -> Result<Vec<SurfaceRow>> {
    taus.iter()
        .map(|&tau| {
            let spec = pert.at(tau);
            check_model_class(model, &spec)?;
            let stats = perturbed_paths(model, &spec, ens)?;
            let weak = weak_from_paths(model, utility, &spec, &stats, ens.seed())?;
            let strong = strong_from_paths(model, utility, &spec, &stats, ens.seed())?;
            Ok(SurfaceRow {
                tau,
                weak: weak.value,
                strong,
                weight_mean: weak.weight_mean,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::TimeGrid;
    use crate::solver::{optimal_terminal_wealth, value_closed_form};
    use approx::assert_relative_eq;

    fn ens(m: usize, steps: usize, dim: usize, seed: u64) -> PathEnsemble {
        PathEnsemble::simulate(TimeGrid::new(1.0, steps).unwrap(), dim, m, seed).unwrap()
    }

    fn indicator_model() -> MarketModel {
        let mu = CoefficientProcess::parse("ind:j=1;c=0;lo=[0];hi=[1]", Shape::Vector(1)).unwrap();
        MarketModel::new(mu, CoefficientProcess::scalar(1.0), None, 1.0).unwrap()
    }

    #[test]
    fn tau_zero_is_the_unperturbed_value_exactly() {
        let e = ens(2_000, 50, 1, 8);
        let model = indicator_model();
        let pert = PerturbationSpec::new(0.0).with_dmu(CoefficientProcess::scalar(1.0).reshaped(Shape::Vector(1)).unwrap());
        for u in [UtilitySpec::sqrt(), UtilitySpec::Log] {
            let rows = value_surface(&model, &u, &pert, &[0.0], &e).unwrap();
            assert_eq!(rows[0].weak.mean(), rows[0].strong.mean());
            assert_eq!(rows[0].weak.influence(), rows[0].strong.influence());
            assert_eq!(rows[0].weight_mean.mean(), 1.0);
        }
        let base = optimal_terminal_wealth(&model, &UtilitySpec::sqrt(), &e).unwrap();
        let weak = weak_value(&model, &UtilitySpec::sqrt(), &pert, &e).unwrap();
        assert_relative_eq!(weak.value.mean(), base.value.mean(), max_relative = 1e-14);
    }

    #[test]
    fn weight_times_weak_density_is_base_density() {
        let e = ens(200, 40, 1, 2);
        let pert = PerturbationSpec::new(0.3).with_dmu(CoefficientProcess::parse("ind:j=1;c=0.2;lo=[0.5];hi=[-1]", Shape::Vector(1)).unwrap());
        for s in perturbed_paths(&indicator_model(), &pert, &e).unwrap() {
            assert_relative_eq!(s.log_weight + s.log_density_weak, s.log_density_base, epsilon = 1e-12);
        }
    }

    #[test]
    fn strong_power_value_deterministic() {
        let e = ens(100_000, 2, 1, 13);
        let model = MarketModel::new(CoefficientProcess::scalar(1.0), CoefficientProcess::scalar(1.0), None, 1.0).unwrap();
        let dmu = CoefficientProcess::constant(Shape::Vector(1), vec![1.0]).unwrap();
        let tau = 0.2;
        let s = strong_value(&model, &UtilitySpec::sqrt(), &PerturbationSpec::new(tau).with_dmu(dmu), &e).unwrap();
        let target = 2.0 * (0.5 * (1.0 + tau) * (1.0 + tau)).exp();
        assert!(s.value.within_se(target, 3.0), "{:?} vs {target}", s.value);
    }

    #[test]
    fn log_values_follow_the_expansions() {
        let e = ens(20_000, 200, 1, 21);
        let model = indicator_model();
        let tau = 0.2;
        let pert = PerturbationSpec::new(tau).with_dmu(CoefficientProcess::constant(Shape::Vector(1), vec![1.0]).unwrap());
        let strong = strong_value(&model, &UtilitySpec::Log, &pert, &e).unwrap();
        let weak = weak_value(&model, &UtilitySpec::Log, &pert, &e).unwrap();
        // Independent oracles: occupation time L = ∫1{W<0}dt, weight G = exp(τW_T − τ²T/2).
        let grid = *e.grid();
        let per_path = e.map_paths_seq(|p| {
            let occ: f64 = (0..grid.steps()).filter(|k| p.w(*k)[0] < 0.0).count() as f64 * grid.dt();
            let g = (tau * p.terminal()[0] - 0.5 * tau * tau).exp();
            // ½∫(1{W<0} + τ)² dt = ½(L(1 + 2τ) + τ²T)
            let half_sq = 0.5 * (occ * (1.0 + 2.0 * tau) + tau * tau);
            (half_sq, g * half_sq)
        });
        let s_oracle = crate::exec::mean(&per_path.iter().map(|v| v.0).collect::<Vec<_>>());
        let w_oracle = crate::exec::mean(&per_path.iter().map(|v| v.1).collect::<Vec<_>>());
        assert_relative_eq!(strong.mean(), s_oracle, max_relative = 1e-10);
        assert_relative_eq!(weak.value.mean(), w_oracle, max_relative = 1e-10);
        let cf = value_closed_form(&model, &UtilitySpec::Log, &grid, Some(&e)).unwrap();
        assert!(strong.mean() > cf.value.mean);
    }

    #[test]
    fn kernel_changing_perturbation_is_refused() {
        let e = ens(10, 4, 2, 1);
        let model = MarketModel::new(
            CoefficientProcess::constant(Shape::Vector(1), vec![0.2]).unwrap(),
            CoefficientProcess::constant(Shape::Matrix(1, 2), vec![1.0, 0.0]).unwrap(),
            None,
            1.0,
        )
        .unwrap();
        let rot = CoefficientProcess::constant(Shape::Matrix(1, 2), vec![0.0, 1.0]).unwrap();
        let pert = PerturbationSpec::new(0.1).with_dsigma(rot);
        assert!(matches!(
            weak_value(&model, &UtilitySpec::sqrt(), &pert, &e),
            Err(Error::KernelStability(_))
        ));
        let scale = CoefficientProcess::constant(Shape::Matrix(1, 2), vec![1.0, 0.0]).unwrap();
        assert!(weak_value(&model, &UtilitySpec::sqrt(), &PerturbationSpec::new(0.1).with_dsigma(scale), &e).is_ok());
    }

    #[test]
    fn weak_differs_from_strong_for_adapted_coefficients() {
        let e = ens(20_000, 200, 1, 5);
        let pert = PerturbationSpec::new(0.5).with_dmu(CoefficientProcess::constant(Shape::Vector(1), vec![1.0]).unwrap());
        let rows = value_surface(&indicator_model(), &UtilitySpec::Log, &pert, &[0.5], &e).unwrap();
        let gap = rows[0].gap().unwrap();
        assert!(gap.mean().abs() > 5.0 * gap.std_error(), "{:?}", gap.value);
    }

    #[test]
    fn values_scale_with_initial_wealth() {
        let e = ens(500, 20, 1, 3);
        let u = UtilitySpec::power(3.0).unwrap();
        let pert = PerturbationSpec::new(0.3).with_dmu(CoefficientProcess::constant(Shape::Vector(1), vec![0.5]).unwrap());
        let m1 = indicator_model();
        let m8 = m1.clone().with_x0(8.0).unwrap();
        let w1 = weak_value(&m1, &u, &pert, &e).unwrap().value.mean();
        let w8 = weak_value(&m8, &u, &pert, &e).unwrap().value.mean();
        assert_relative_eq!(w8, 2.0 * w1, max_relative = 1e-13);
    }
}
