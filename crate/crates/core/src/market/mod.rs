//! Market coefficients, the market price of risk, and kernel stability.
//!
//! All per-node linear algebra runs on small `d × n` matrices. Since every
//! coefficient takes finitely many values, results are tabulated once per
//! (time segment, indicator state) in a [`NodeField`] and looked up inside
//! path loops.

mod coefficient;

use nalgebra::{DMatrix, DVector};

pub use coefficient::{CoefficientKind, CoefficientProcess, Shape};

use crate::error::{Error, Result};
use crate::field::NodeField;
use crate::paths::{PathEnsemble, TimeGrid};

/// Default cap on the condition number of `σσᵀ`.
pub const DEFAULT_CONDITION_CAP: f64 = 1e8;
/// Default relative singular-value threshold for numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

pub(crate) fn matrix(values: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, values)
}

/// `(σσᵀ)⁻¹` for a `d × n` row-major `σ`, refusing condition numbers above `cap`.
pub(crate) fn gram_inverse(sigma: &DMatrix<f64>, cap: f64) -> Result<DMatrix<f64>> {
    let sv = sigma.singular_values();
    let smax = sv.max();
    let smin = if sv.is_empty() { 0.0 } else { sv.min() };
    let condition = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    if !(condition <= cap) {
        return Err(Error::Singular {
            path: None,
            node: 0,
            condition,
        });
    }
    let gram = sigma * sigma.transpose();
    gram.cholesky().map(|c| c.inverse()).ok_or(Error::Singular {
        path: None,
        node: 0,
        condition,
    })
}

/// `σᵀ(σσᵀ)⁻¹(μ − r·1)` for one state.
pub(crate) fn lambda_row(mu: &[f64], sigma: &[f64], rate: f64, d: usize, n: usize, cap: f64) -> Result<Vec<f64>> {
    let s = matrix(sigma, d, n);
    let g = gram_inverse(&s, cap)?;
    let excess = DVector::from_iterator(d, mu.iter().map(|m| m - rate));
    Ok((s.transpose() * (g * excess)).as_slice().to_vec())
}

/// Number of singular values above `tol` times the largest one.
pub(crate) fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let sv = m.singular_values();
    let smax = sv.max();
    if !(smax > 0.0) {
        return 0;
    }
    sv.iter().filter(|s| **s > tol * smax).count()
}

/// Drift, volatility and (optional) interest rate of a Brownian market with
/// `d` assets driven by an `n`-dimensional Brownian motion, plus initial wealth.
#[derive(Debug, Clone)]
pub struct MarketModel {
    d: usize,
    n: usize,
    mu: CoefficientProcess,
    sigma: CoefficientProcess,
    rate: Option<CoefficientProcess>,
    x0: f64,
    cond_cap: f64,
}

impl MarketModel {
    pub fn new(mu: CoefficientProcess, sigma: CoefficientProcess, rate: Option<CoefficientProcess>, x0: f64) -> Result<Self> {
        let (d, n) = match sigma.shape() {
            Shape::Matrix(d, n) => (d, n),
            Shape::Scalar => (1, 1),
            other => return Err(Error::Shape(format!("volatility must be a d x n matrix, got {other}"))),
        };
        let sigma = if sigma.shape() == Shape::Scalar {
            sigma.reshaped(Shape::Matrix(1, 1))?
        } else {
            sigma
        };
        if d == 0 || n < d {
            return Err(Error::Shape(format!("need n >= d >= 1, got d = {d}, n = {n}")));
        }
        let mu = if mu.shape() == Shape::Scalar && d == 1 {
            mu.reshaped(Shape::Vector(1))?
        } else {
            mu
        };
        mu.check_shape(Shape::Vector(d), "drift")?;
        if let Some(r) = &rate {
            r.check_shape(Shape::Scalar, "interest rate")?;
        }
        if !(x0.is_finite() && x0 > 0.0) {
            return Err(Error::InvalidInput(format!("initial wealth must be positive, got {x0}")));
        }
        for p in [Some(&mu), Some(&sigma), rate.as_ref()].into_iter().flatten() {
            p.check_driver(n)?;
        }
        Ok(Self {
            d,
            n,
            mu,
            sigma,
            rate,
            x0,
            cond_cap: DEFAULT_CONDITION_CAP,
        })
    }

    pub fn with_cond_cap(mut self, cap: f64) -> Self {
        self.cond_cap = cap;
        self
    }

    pub fn with_x0(mut self, x0: f64) -> Result<Self> {
        if !(x0.is_finite() && x0 > 0.0) {
            return Err(Error::InvalidInput(format!("initial wealth must be positive, got {x0}")));
        }
        self.x0 = x0;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mu(&self) -> &CoefficientProcess {
        &self.mu
    }

    pub fn sigma(&self) -> &CoefficientProcess {
        &self.sigma
    }

    pub fn rate(&self) -> Option<&CoefficientProcess> {
        self.rate.as_ref()
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn cond_cap(&self) -> f64 {
        self.cond_cap
    }

    /// `n = d`: every claim is replicable and the state price density is unique.
    pub fn is_complete(&self) -> bool {
        self.n == self.d
    }

    /// No coefficient depends on the Brownian path.
    pub fn is_deterministic(&self) -> bool {
        !self.mu.is_adapted() && !self.sigma.is_adapted() && !self.rate.as_ref().is_some_and(|r| r.is_adapted())
    }

    /// The rate coefficient, or zero.
    pub fn rate_or_zero(&self) -> CoefficientProcess {
        self.rate.clone().unwrap_or_else(|| CoefficientProcess::zeros(Shape::Scalar))
    }

    /// `(μ̄ + τΔμ, σ̄ + τΔσ, r̄ + τΔr)`.
    pub fn perturbed(&self, pert: &PerturbationSpec) -> Result<MarketModel> {
        pert.validate(self)?;
        let add = |base: &CoefficientProcess, dir: &CoefficientProcess, shape: Shape| {
            base.zip_with(dir, shape, |a, b| Ok(a.iter().zip(b).map(|(x, y)| x + pert.tau * y).collect()))
        };
        let mu = match &pert.dmu {
            Some(dm) => add(&self.mu, dm, self.mu.shape())?,
            None => self.mu.clone(),
        };
        let sigma = match &pert.dsigma {
            Some(ds) => add(&self.sigma, ds, self.sigma.shape())?,
            None => self.sigma.clone(),
        };
        let rate = match (&self.rate, &pert.dr) {
            (Some(r), Some(dr)) => Some(add(r, dr, Shape::Scalar)?),
            (None, Some(dr)) => Some(dr.scaled(pert.tau)),
            (r, None) => r.clone(),
        };
        Ok(MarketModel {
            mu,
            sigma,
            rate,
            ..self.clone()
        })
    }

    /// Market price of risk tabulated on `grid`.
    pub fn market_price_of_risk(&self, grid: &TimeGrid) -> Result<MprProcess> {
        market_price_of_risk(self, grid)
    }
}

/// Perturbation directions `(Δμ, Δσ, Δr)` and a magnitude `τ`.
#[derive(Debug, Clone, Default)]
pub struct PerturbationSpec {
    pub dmu: Option<CoefficientProcess>,
    pub dsigma: Option<CoefficientProcess>,
    pub dr: Option<CoefficientProcess>,
    pub tau: f64,
}

impl PerturbationSpec {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn with_dmu(mut self, dmu: CoefficientProcess) -> Self {
        self.dmu = Some(dmu);
        self
    }

    pub fn with_dsigma(mut self, dsigma: CoefficientProcess) -> Self {
        self.dsigma = Some(dsigma);
        self
    }

    pub fn with_dr(mut self, dr: CoefficientProcess) -> Self {
        self.dr = Some(dr);
        self
    }

    /// Same directions, magnitude `tau`.
    pub fn at(&self, tau: f64) -> Self {
        Self { tau, ..self.clone() }
    }

    pub fn validate(&self, model: &MarketModel) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::InvalidInput("perturbation magnitude must be finite".into()));
        }
        if let Some(p) = &self.dmu {
            p.check_shape(Shape::Vector(model.d), "drift direction")?;
            p.check_driver(model.n)?;
        }
        if let Some(p) = &self.dsigma {
            p.check_shape(Shape::Matrix(model.d, model.n), "volatility direction")?;
            p.check_driver(model.n)?;
        }
        if let Some(p) = &self.dr {
            p.check_shape(Shape::Scalar, "rate direction")?;
            p.check_driver(model.n)?;
        }
        Ok(())
    }

    /// True when every present direction is adapted-free.
    pub fn is_deterministic(&self) -> bool {
        [&self.dmu, &self.dsigma, &self.dr]
            .into_iter()
            .flatten()
            .all(|p| !p.is_adapted())
    }
}

/// Market price of risk `λ = σᵀ(σσᵀ)⁻¹(μ − r·1)`, one `n`-vector per node and state.
#[derive(Debug, Clone)]
pub struct MprProcess {
    lambda: NodeField,
}

impl MprProcess {
    #[inline]
    pub fn at(&self, k: usize, w: &[f64]) -> &[f64] {
        self.lambda.at(k, w)
    }

    pub fn field(&self) -> &NodeField {
        &self.lambda
    }

    pub fn into_field(self) -> NodeField {
        self.lambda
    }

    pub fn evaluate_path(&self, path: &crate::paths::BrownianPath) -> Vec<f64> {
        self.lambda.evaluate_path(path)
    }
}

pub fn market_price_of_risk(model: &MarketModel, grid: &TimeGrid) -> Result<MprProcess> {
    let rate = model.rate_or_zero();
    let (d, n, cap) = (model.d, model.n, model.cond_cap);
    let lambda = NodeField::tabulate(&[&model.mu, &model.sigma, &rate], grid, n, n, |v| {
        lambda_row(v[0], v[1], v[2][0], d, n, cap)
    })?;
    Ok(MprProcess { lambda })
}

/// Outcome of the kernel-stability check between a base and a perturbed volatility.
#[derive(Debug, Clone, PartialEq)]
pub struct H1Report {
    /// The base volatility has rank `d` at every checked node.
    pub full_rank: bool,
    /// Largest `‖(σ̄σ̄ᵀ)⁻¹‖₂` seen (infinite when rank is lost).
    pub inv_bound: f64,
    /// `Ker σ^τ = Ker σ̄` at every checked node.
    pub kernel_equal: bool,
    /// First violating (path, node), or the node where `inv_bound` is attained.
    pub worst_path: Option<usize>,
    pub worst_node: Option<usize>,
    pub checked_nodes: usize,
}

impl H1Report {
    pub fn passed(&self) -> bool {
        self.full_rank && self.kernel_equal
    }
}

/// Per state: `[full_rank, kernel_equal, ‖(σ̄σ̄ᵀ)⁻¹‖₂]`.
fn h1_table(base: &CoefficientProcess, pert: &CoefficientProcess, grid: &TimeGrid, dim: usize, tol: f64) -> Result<NodeField> {
    let (d, n) = match base.shape() {
        Shape::Matrix(d, n) => (d, n),
        other => return Err(Error::Shape(format!("volatility must be a matrix, got {other}"))),
    };
    pert.check_shape(base.shape(), "perturbed volatility")?;
    NodeField::tabulate(&[base, pert], grid, dim, 3, |v| {
        let a = matrix(v[0], d, n);
        let b = matrix(v[1], d, n);
        let stacked = DMatrix::from_fn(2 * d, n, |i, j| if i < d { a[(i, j)] } else { b[(i - d, j)] });
        let (ra, rb, rs) = (numerical_rank(&a, tol), numerical_rank(&b, tol), numerical_rank(&stacked, tol));
        let sv = a.singular_values();
        let smin = if ra == d { sv.min() } else { 0.0 };
        let inv = if smin > 0.0 { 1.0 / (smin * smin) } else { f64::INFINITY };
        let flag = |c: bool| if c { 1.0 } else { 0.0 };
        Ok(vec![flag(ra == d), flag(ra == rb && rb == rs), inv])
    })
}

/// Kernel stability of `sigma_pert` against `sigma_base` along every node of every path of `ens`.
pub fn check_h1(sigma_base: &CoefficientProcess, sigma_pert: &CoefficientProcess, ens: &PathEnsemble, tol: f64) -> Result<H1Report> {
    let table = h1_table(sigma_base, sigma_pert, ens.grid(), ens.dim(), tol)?;
    let steps = ens.grid().steps();
    // (first violating node, max inverse norm, node of max)
    let per_path = ens.map_paths(|p| {
        let mut first_bad = None;
        let mut worst = (0.0_f64, 0usize);
        let (mut rank_ok, mut kernel_ok) = (true, true);
        for k in 0..=steps {
            let row = table.at(k, p.w(k));
            let ok = (row[0] == 1.0, row[1] == 1.0);
            rank_ok &= ok.0;
            kernel_ok &= ok.1;
            if first_bad.is_none() && !(ok.0 && ok.1) {
                first_bad = Some(k);
            }
            if row[2] > worst.0 {
                worst = (row[2], k);
            }
        }
        (rank_ok, kernel_ok, first_bad, worst)
    });
    let mut report = H1Report {
        full_rank: true,
        inv_bound: 0.0,
        kernel_equal: true,
        worst_path: None,
        worst_node: None,
        checked_nodes: ens.count() * (steps + 1),
    };
    let mut violation_found = false;
    for (i, (rank_ok, kernel_ok, first_bad, (inv, node))) in per_path.into_iter().enumerate() {
        report.full_rank &= rank_ok;
        report.kernel_equal &= kernel_ok;
        if let (false, Some(k)) = (violation_found, first_bad) {
            violation_found = true;
            report.worst_path = Some(i);
            report.worst_node = Some(k);
        }
        if inv > report.inv_bound {
            report.inv_bound = inv;
            if !violation_found {
                report.worst_path = Some(i);
                report.worst_node = Some(node);
            }
        }
    }
    Ok(report)
}

/// Kernel stability over every reachable (segment, indicator state): a
/// superset of what any path can visit, and independent of sampling.
pub fn check_h1_states(
    sigma_base: &CoefficientProcess,
    sigma_pert: &CoefficientProcess,
    grid: &TimeGrid,
    dim: usize,
    tol: f64,
) -> Result<H1Report> {
    let table = h1_table(sigma_base, sigma_pert, grid, dim, tol)?;
    let mut report = H1Report {
        full_rank: true,
        inv_bound: 0.0,
        kernel_equal: true,
        worst_path: None,
        worst_node: None,
        checked_nodes: 0,
    };
    for row in table.rows() {
        report.checked_nodes += 1;
        report.full_rank &= row[0] == 1.0;
        report.kernel_equal &= row[1] == 1.0;
        report.inv_bound = report.inv_bound.max(row[2]);
    }
    Ok(report)
}

/// A volatility perturbation that keeps `Ker σ̄`.
#[derive(Debug, Clone)]
pub struct KernelPerturbation {
    pub sigma: CoefficientProcess,
    /// `1 / max ‖A(σ̄σ̄ᵀ)⁻¹‖₂`; below it `σ^τ = (I + τA(σ̄σ̄ᵀ)⁻¹)σ̄` keeps full rank.
    pub safe_bound: f64,
    pub warning: Option<String>,
}

/// `σ̄ + τ·A·(σ̄σ̄ᵀ)⁻¹σ̄` for a `d × d` direction `A`.
pub fn kernel_preserving_perturbation(
    sigma_base: &CoefficientProcess,
    a: &CoefficientProcess,
    tau: f64,
    cond_cap: f64,
) -> Result<KernelPerturbation> {
    let (d, n) = match sigma_base.shape() {
        Shape::Matrix(d, n) => (d, n),
        other => return Err(Error::Shape(format!("volatility must be a matrix, got {other}"))),
    };
    let a = if a.shape() == Shape::Scalar && d == 1 {
        a.reshaped(Shape::Matrix(1, 1))?
    } else {
        a.clone()
    };
    a.check_shape(Shape::Matrix(d, d), "kernel-preserving direction")?;
    let sigma = sigma_base.zip_with(&a, sigma_base.shape(), |s, av| {
        let s = matrix(s, d, n);
        let g = gram_inverse(&s, cond_cap)?;
        let out = &s + (matrix(av, d, d) * g * &s) * tau;
        Ok(row_major(&out))
    })?;
    let norms = sigma_base.zip_with(&a, Shape::Scalar, |s, av| {
        let g = gram_inverse(&matrix(s, d, n), cond_cap)?;
        let m = matrix(av, d, d) * g;
        Ok(vec![m.singular_values().max()])
    })?;
    let worst = norms.bound();
    let safe_bound = if worst > 0.0 { 1.0 / worst } else { f64::INFINITY };
    let warning = (tau.abs() >= safe_bound).then(|| {
        format!("|tau| = {} is not below the safe bound {safe_bound}; the perturbed volatility may lose rank", tau.abs())
    });
    Ok(KernelPerturbation {
        sigma,
        safe_bound,
        warning,
    })
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Directional derivative of the market price of risk along `(Δμ, Δσ, Δr)`:
///
/// `σ̄ᵀG(Δμ − Δr·1) + ΔσᵀG·e − σ̄ᵀG[σ̄Δσᵀ + Δσσ̄ᵀ]G·e`, with `G = (σ̄σ̄ᵀ)⁻¹` and `e = μ̄ − r̄·1`.
pub fn dlambda_direction(
    model: &MarketModel,
    dmu: Option<&CoefficientProcess>,
    dsigma: Option<&CoefficientProcess>,
    dr: Option<&CoefficientProcess>,
    grid: &TimeGrid,
) -> Result<NodeField> {
    let (d, n, cap) = (model.d, model.n, model.cond_cap);
    let spec = PerturbationSpec {
        dmu: dmu.cloned(),
        dsigma: dsigma.cloned(),
        dr: dr.cloned(),
        tau: 0.0,
    };
    spec.validate(model)?;
    let rate = model.rate_or_zero();
    let zmu = CoefficientProcess::zeros(Shape::Vector(d));
    let zsig = CoefficientProcess::zeros(Shape::Matrix(d, n));
    let zr = CoefficientProcess::zeros(Shape::Scalar);
    let procs = [
        &model.mu,
        &model.sigma,
        &rate,
        dmu.unwrap_or(&zmu),
        dsigma.unwrap_or(&zsig),
        dr.unwrap_or(&zr),
    ];
    NodeField::tabulate(&procs, grid, n, n, |v| {
        let s = matrix(v[1], d, n);
        let g = gram_inverse(&s, cap)?;
        let ds = matrix(v[4], d, n);
        let e = DVector::from_iterator(d, v[0].iter().map(|m| m - v[2][0]));
        let de = DVector::from_iterator(d, v[3].iter().map(|m| m - v[5][0]));
        let ge = &g * &e;
        let middle = &s * ds.transpose() + &ds * s.transpose();
        let out = s.transpose() * (&g * de) + ds.transpose() * &ge - s.transpose() * (&g * (middle * &ge));
        Ok(out.as_slice().to_vec())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 8).unwrap()
    }

    fn cst(shape: Shape, v: &[f64]) -> CoefficientProcess {
        CoefficientProcess::constant(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn scalar_market_price_of_risk() {
        let m = MarketModel::new(CoefficientProcess::scalar(1.0), CoefficientProcess::scalar(2.0), None, 1.0).unwrap();
        let l = market_price_of_risk(&m, &grid()).unwrap();
        assert_eq!(l.at(0, &[0.0]), &[0.5]);
    }

    #[test]
    fn identity_volatility_passes_drift_through() {
        let m = MarketModel::new(cst(Shape::Vector(2), &[0.3, 0.1]), CoefficientProcess::identity(2), None, 1.0).unwrap();
        let l = market_price_of_risk(&m, &grid()).unwrap();
        assert_abs_diff_eq!(l.at(3, &[0.0, 0.0])[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(l.at(3, &[0.0, 0.0])[1], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn incomplete_market_price_of_risk_is_least_squares() {
        let m = MarketModel::new(cst(Shape::Vector(1), &[2.0]), cst(Shape::Matrix(1, 2), &[1.0, 1.0]), None, 1.0).unwrap();
        let l = market_price_of_risk(&m, &grid()).unwrap();
        // minimum-norm solution of x1 + x2 = 2
        assert_abs_diff_eq!(l.at(0, &[0.0, 0.0])[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l.at(0, &[0.0, 0.0])[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn rate_is_subtracted() {
        let m = MarketModel::new(
            CoefficientProcess::scalar(0.5),
            CoefficientProcess::scalar(2.0),
            Some(CoefficientProcess::scalar(0.1)),
            1.0,
        )
        .unwrap();
        let l = market_price_of_risk(&m, &grid()).unwrap();
        assert_abs_diff_eq!(l.at(0, &[0.0])[0], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn singular_volatility_names_the_node() {
        let sigma = CoefficientProcess::parse("pw:t=[0.5];v=[1,0]", Shape::Matrix(1, 1)).unwrap();
        let m = MarketModel::new(CoefficientProcess::scalar(1.0), sigma, None, 1.0).unwrap();
        match market_price_of_risk(&m, &grid()) {
            Err(Error::Singular { node, .. }) => assert_eq!(node, 4),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn model_validation() {
        let mu = cst(Shape::Vector(2), &[0.1, 0.1]);
        assert!(MarketModel::new(mu.clone(), cst(Shape::Matrix(2, 1), &[1.0, 1.0]), None, 1.0).is_err());
        assert!(MarketModel::new(mu.clone(), CoefficientProcess::identity(2), None, 0.0).is_err());
        assert!(MarketModel::new(mu, CoefficientProcess::identity(3), None, 1.0).is_err());
        let ind = CoefficientProcess::parse("ind:j=3;c=0;lo=[1];hi=[2]", Shape::Vector(1)).unwrap();
        assert!(MarketModel::new(ind, CoefficientProcess::identity(1), None, 1.0).is_err());
    }

    fn h1(base: &[f64], pert: &[f64], shape: Shape) -> H1Report {
        check_h1_states(&cst(shape, base), &cst(shape, pert), &grid(), 2, DEFAULT_RANK_TOL).unwrap()
    }

    #[test]
    fn h1_examples() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert!(h1(&eye, &eye, Shape::Matrix(2, 2)).passed());
        assert!(!h1(&[1.0, 0.0], &[1.0, 0.1], Shape::Matrix(1, 2)).kernel_equal);
        assert!(h1(&[1.0, 0.0], &[1.1, 0.0], Shape::Matrix(1, 2)).passed());
        let r = h1(&[1.0, 0.0], &[0.0, 0.0], Shape::Matrix(1, 2));
        assert!(r.full_rank && !r.kernel_equal);
    }

    #[test]
    fn h1_along_paths_reports_first_violation() {
        let ens = PathEnsemble::simulate(grid(), 2, 30, 3).unwrap();
        let base = cst(Shape::Matrix(1, 2), &[1.0, 0.0]);
        let pert = CoefficientProcess::parse("ind:j=1;c=0;lo=[1,0];hi=[1,0.5]", Shape::Matrix(1, 2)).unwrap();
        let r = check_h1(&base, &pert, &ens, DEFAULT_RANK_TOL).unwrap();
        assert!(!r.kernel_equal && r.full_rank);
        let (i, k) = (r.worst_path.unwrap(), r.worst_node.unwrap());
        assert!(ens.path(i).w(k)[0] < 0.0);
        let ok = check_h1(&base, &base, &ens, DEFAULT_RANK_TOL).unwrap();
        assert!(ok.passed());
        assert_abs_diff_eq!(ok.inv_bound, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_preserving_examples() {
        let eye = CoefficientProcess::identity(2);
        let zero = CoefficientProcess::zeros(Shape::Matrix(2, 2));
        let kp = kernel_preserving_perturbation(&eye, &zero, 0.7, DEFAULT_CONDITION_CAP).unwrap();
        assert_eq!(kp.sigma.evaluate(0.0, &[0.0, 0.0]), eye.evaluate(0.0, &[0.0, 0.0]));
        assert!(kp.safe_bound.is_infinite());
        let kp = kernel_preserving_perturbation(&eye, &eye, 0.5, DEFAULT_CONDITION_CAP).unwrap();
        assert_eq!(kp.sigma.evaluate(0.0, &[0.0, 0.0]), &[1.5, 0.0, 0.0, 1.5]);
        assert!(kp.warning.is_none());
        let row = cst(Shape::Matrix(1, 2), &[1.0, 0.0]);
        let kp = kernel_preserving_perturbation(&row, &CoefficientProcess::scalar(2.0), 0.1, DEFAULT_CONDITION_CAP).unwrap();
        let v = kp.sigma.evaluate(0.0, &[0.0, 0.0]);
        assert_abs_diff_eq!(v[0], 1.2, epsilon = 1e-15);
        assert_eq!(v[1], 0.0);
        assert!(check_h1_states(&row, &kp.sigma, &grid(), 2, DEFAULT_RANK_TOL).unwrap().passed());
        assert_abs_diff_eq!(kp.safe_bound, 0.5, epsilon = 1e-15);
        let bad = kernel_preserving_perturbation(&row, &CoefficientProcess::scalar(2.0), -0.5, DEFAULT_CONDITION_CAP).unwrap();
        assert!(bad.warning.is_some());
    }

    #[test]
    fn dlambda_examples() {
        let g = grid();
        let m = MarketModel::new(CoefficientProcess::scalar(1.0), CoefficientProcess::scalar(1.0), None, 1.0).unwrap();
        let zero = dlambda_direction(&m, None, None, None, &g).unwrap();
        assert_eq!(zero.at(0, &[0.0]), &[0.0]);
        let ds = CoefficientProcess::constant(Shape::Matrix(1, 1), vec![1.0]).unwrap();
        let v = dlambda_direction(&m, None, Some(&ds), None, &g).unwrap();
        assert_abs_diff_eq!(v.at(0, &[0.0])[0], -1.0, epsilon = 1e-15);
        let m2 = MarketModel::new(CoefficientProcess::scalar(1.0), CoefficientProcess::scalar(2.0), None, 1.0).unwrap();
        let dm = CoefficientProcess::constant(Shape::Vector(1), vec![1.0]).unwrap();
        let v = dlambda_direction(&m2, Some(&dm), None, None, &g).unwrap();
        assert_abs_diff_eq!(v.at(0, &[0.0])[0], 0.5, epsilon = 1e-15);
    }
}
