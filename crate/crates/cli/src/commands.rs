//! The experiment commands. Each returns a [`Table`]; `main` writes it.

use std::path::Path;

use weaksens::danskin::{directional_derivative, support_value, CompactSet};
use weaksens::market::{check_h1, check_h1_states, kernel_preserving_perturbation, DEFAULT_RANK_TOL};
use weaksens::modular::{ModularFunctional, ModularKind};
use weaksens::sensitivity::{
    example1_report, example2_discrepancy, gap_report, second_order_check, weak_derivative, weak_sensitivity_report,
    SensitivityReport,
};
use weaksens::solver::optimal_terminal_wealth;
use weaksens::{
    value_surface, CoefficientProcess, Direction, MarketModel, NodeField, OptimalWealth, PathEnsemble, PerturbationSpec,
    UtilitySpec,
};

use crate::config::{ExperimentConfig, Mc};
use crate::error::{CliError, ConfigContext};

/// Steps of the default second-order grid (halving from 0.2).
const SECOND_ORDER_EPS: [f64; 5] = [0.2, 0.1, 0.05, 0.025, 0.0125];
/// Minimal log-log slope of the first-order residuals.
const SECOND_ORDER_MIN_SLOPE: f64 = 1.8;

/// CSV rows plus a human-readable summary.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub summary: Vec<String>,
    /// Set when a verdict failed; the command then exits with code 3.
    pub failure: Option<String>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
            summary: Vec::new(),
            failure: None,
        }
    }

    fn fail(&mut self, why: String) {
        if self.failure.is_none() {
            self.failure = Some(why);
        }
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn ensemble(model: &MarketModel, mc: &Mc) -> Result<PathEnsemble, CliError> {
    Ok(PathEnsemble::simulate(mc.grid()?, model.n(), mc.paths, mc.seed)?)
}

/// The `[perturbation]` market directions, with a kernel-preserving
/// direction `A` folded into `Δσ` as `A(σ̄σ̄ᵀ)⁻¹σ̄`.
fn market_direction(cfg: &ExperimentConfig, model: &MarketModel) -> Result<PerturbationSpec, CliError> {
    let mut pert = cfg.perturbation()?;
    if let Some(a) = cfg.kernel_a()? {
        let kp = kernel_preserving_perturbation(model.sigma(), &a, 1.0, model.cond_cap()).config("[perturbation] kernel_a")?;
        let ds = kp
            .sigma
            .zip_with(model.sigma(), model.sigma().shape(), |s, b| Ok(s.iter().zip(b).map(|(x, y)| x - y).collect()))?;
        pert.dsigma = Some(match pert.dsigma.take() {
            None => ds,
            Some(d) => d.zip_with(&ds, d.shape(), |x, y| Ok(x.iter().zip(y).map(|(a, b)| a + b).collect()))?,
        });
    }
    Ok(pert)
}

pub fn value(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let (model, utility, mc) = (cfg.model()?, cfg.utility()?, cfg.mc()?);
    let pert = market_direction(cfg, &model)?;
    let taus = cfg.taus()?;
    let ens = ensemble(&model, &mc)?;
    let surface = value_surface(&model, &utility, &pert, &taus, &ens)?;
    let mut t = Table::new(&["tau", "u_weak", "se_weak", "u_strong", "se_strong", "weight_mean", "seed"]);
    for row in &surface {
        t.rows.push(vec![
            num(row.tau),
            num(row.weak.mean()),
            num(row.weak.std_error()),
            num(row.strong.mean()),
            num(row.strong.std_error()),
            num(row.weight_mean.mean()),
            mc.seed.to_string(),
        ]);
        t.summary.push(format!(
            "tau = {}: weak {:.6} ± {:.6}, strong {:.6} ± {:.6}, E[G] = {:.6}",
            row.tau,
            row.weak.mean(),
            row.weak.std_error(),
            row.strong.mean(),
            row.strong.std_error(),
            row.weight_mean.mean()
        ));
    }
    Ok(t)
}

fn sens_row(t: &mut Table, name: &str, kind: &str, r: &SensitivityReport, seed: u64) {
    // Gap rows are diagnostics: a separation is a finding, not a failure.
    let verdict = match (kind, r.verdict) {
        ("gap", true) => "indistinguishable",
        ("gap", false) => "distinct",
        (_, true) => "pass",
        (_, false) => "fail",
    };
    t.rows.push(vec![
        name.to_string(),
        kind.to_string(),
        num(r.formula.mean()),
        num(r.formula.std_error()),
        num(r.fd.value.mean()),
        num(r.fd.value.std_error()),
        num(r.fd.bias),
        num(r.gap),
        num(r.combined_se),
        verdict.to_string(),
        seed.to_string(),
    ]);
    t.summary.push(format!(
        "{name} [{kind}]: formula {:.6} ± {:.6}, fd {:.6} ± {:.6} (bias {:.2e}), gap {:.3e}, verdict {}",
        r.formula.mean(),
        r.formula.std_error(),
        r.fd.value.mean(),
        r.fd.value.std_error(),
        r.fd.bias,
        r.gap,
        verdict
    ));
}

/// Reads `path_index,xstar` rows; indices must be `0..count` in order.
pub fn read_xstar(path: &Path, count: usize) -> Result<Vec<f64>, CliError> {
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for (i, rec) in reader.deserialize::<(usize, f64)>().enumerate() {
        let (idx, x) = rec.map_err(|e| bad(e.to_string()))?;
        if idx != i {
            return Err(bad(format!("row {i} has path_index {idx}")));
        }
        out.push(x);
    }
    if out.len() != count {
        return Err(bad(format!("{} rows for {count} paths", out.len())));
    }
    Ok(out)
}

pub fn write_xstar(path: &Path, xstar: &[f64]) -> Result<(), CliError> {
    let fail = |e: csv::Error| CliError::Failure(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    w.write_record(["path_index", "xstar"]).map_err(fail)?;
    for (i, x) in xstar.iter().enumerate() {
        w.write_record([i.to_string(), num(*x)]).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

pub fn sens(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let (model, utility, mc) = (cfg.model()?, cfg.utility()?, cfg.mc()?);
    let base = market_direction(cfg, &model)?;
    let eps = cfg.eps();
    let mut directions: Vec<(&str, Direction, Option<PerturbationSpec>)> = Vec::new();
    let single = |f: fn(PerturbationSpec, CoefficientProcess) -> PerturbationSpec, c: &Option<CoefficientProcess>| {
        c.clone().map(|c| {
            let p = f(PerturbationSpec::new(0.0), c);
            (Direction::Market(p.clone()), Some(p))
        })
    };
    if let Some((d, p)) = single(PerturbationSpec::with_dmu, &base.dmu) {
        directions.push(("dmu", d, p));
    }
    if let Some((d, p)) = single(PerturbationSpec::with_dsigma, &base.dsigma) {
        directions.push(("dsigma", d, p));
    }
    if let Some((d, p)) = single(PerturbationSpec::with_dr, &base.dr) {
        directions.push(("dr", d, p));
    }
    let ens = ensemble(&model, &mc)?;
    if let Some(dl) = cfg.dlambda()? {
        let field = NodeField::from_process(&dl, ens.grid(), model.n()).config("[perturbation] dlambda")?;
        directions.push(("dlambda", Direction::Lambda(field), None));
    }
    if directions.is_empty() {
        return Err(CliError::Config("[perturbation] names no direction (dmu, dsigma, dr, dlambda, kernel_a)".into()));
    }

    let mut t = Table::new(&[
        "direction",
        "kind",
        "formula",
        "se_formula",
        "fd",
        "se_fd",
        "fd_bias",
        "gap",
        "combined_se",
        "verdict",
        "seed",
    ]);

    if let Some(file) = &cfg.mc.xstar_file {
        // Externally supplied optimal wealth: the formula is all we can evaluate.
        let xstar = read_xstar(&cfg.resolve(file), ens.count())?;
        let opt = OptimalWealth::from_external(&model, &utility, &ens, xstar)?;
        for (name, dir, _) in &directions {
            let dlam = dir.lambda_field(&model, &ens)?;
            let dr = match dir {
                Direction::Market(p) => p.dr.as_ref(),
                Direction::Lambda(_) => None,
            };
            let f = weak_derivative(&model, &utility, &opt, &dlam, dr, &ens)?;
            let empty = String::new;
            t.rows.push(vec![
                name.to_string(),
                "formula-external".into(),
                num(f.mean()),
                num(f.std_error()),
                empty(),
                empty(),
                empty(),
                empty(),
                empty(),
                empty(),
                mc.seed.to_string(),
            ]);
            t.summary.push(format!("{name} [external X*]: formula {:.6} ± {:.6}", f.mean(), f.std_error()));
        }
        return Ok(t);
    }

    for (name, dir, market) in &directions {
        let r = weak_sensitivity_report(&model, &utility, dir, &ens, &eps, name)?;
        sens_row(&mut t, name, "weak-fd", &r, mc.seed);
        if !r.verdict {
            t.fail(format!("{name}: weak formula and finite differences disagree"));
        }
        if let Some(p) = market {
            // Diagnostic only: for adapted coefficients the gap is expected.
            let g = gap_report(&model, &utility, p, &ens, &eps)?;
            sens_row(&mut t, name, "gap", &g, mc.seed);
        }
    }
    if cfg.output.export_xstar {
        let opt = optimal_terminal_wealth(&model, &utility, &ens)?;
        t.summary.push(format!("exported {} optimal wealth samples", opt.xstar.len()));
        export_xstar(cfg, &opt.xstar)?;
    }
    Ok(t)
}

fn export_xstar(cfg: &ExperimentConfig, xstar: &[f64]) -> Result<(), CliError> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Failure(format!("{}: {e}", dir.display())))?;
    write_xstar(&dir.join("xstar.csv"), xstar)
}

pub fn example1(mc: &Mc, tol_strong: f64, tol_weak: f64) -> Result<Table, CliError> {
    let r = example1_report(mc.horizon, mc.paths, mc.steps, mc.seed)?;
    let mut t = Table::new(&[
        "horizon",
        "quantity",
        "estimate",
        "se",
        "target",
        "abs_error",
        "tolerance",
        "verdict",
        "paths",
        "steps",
        "seed",
    ]);
    let rows = [
        ("strong", &r.strong, r.strong_target, tol_strong),
        ("weak", &r.weak, r.weak_target, tol_weak),
        ("weak-strong", &r.gap, r.gap_target(), tol_strong + tol_weak),
    ];
    for (name, est, target, tol) in rows {
        let err = (est.mean() - target).abs();
        let ok = err <= tol;
        t.rows.push(vec![
            num(r.horizon),
            name.into(),
            num(est.mean()),
            num(est.std_error()),
            num(target),
            num(err),
            num(tol),
            if ok { "pass" } else { "fail" }.into(),
            mc.paths.to_string(),
            mc.steps.to_string(),
            mc.seed.to_string(),
        ]);
        t.summary.push(format!(
            "{name}: {:.6} ± {:.6} vs closed form {target:.6} (|error| {err:.2e}, tolerance {tol})",
            est.mean(),
            est.std_error()
        ));
        if !ok {
            t.fail(format!("{name} estimate misses its closed form by {err}"));
        }
    }
    t.summary.push(format!("weak - strong separated by {:.1} standard errors", r.gap_separation()));
    Ok(t)
}

pub fn example2(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let (model, mc) = (cfg.model()?, cfg.mc()?);
    let delta = cfg
        .dlambda()?
        .ok_or_else(|| CliError::Config("example2 needs [perturbation] dlambda".into()))?;
    let ens = ensemble(&model, &mc)?;
    let e = example2_discrepancy(&model, &delta, &ens)?;
    let z = e.value.z_score(0.0);
    let coincide = z <= 3.0;
    let mut t = Table::new(&["estimate", "se", "z", "coincide", "paths", "steps", "seed"]);
    t.rows.push(vec![
        num(e.mean()),
        num(e.std_error()),
        num(z),
        coincide.to_string(),
        mc.paths.to_string(),
        mc.steps.to_string(),
        mc.seed.to_string(),
    ]);
    t.summary.push(format!(
        "discrepancy {:.6} ± {:.6} (|z| = {z:.2}); weak and strong derivatives {}",
        e.mean(),
        e.std_error(),
        if coincide { "indistinguishable" } else { "differ" }
    ));
    Ok(t)
}

pub fn h1check(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let (model, mc) = (cfg.model()?, cfg.mc()?);
    let taus = cfg.taus()?;
    let (a, ds) = (cfg.kernel_a()?, cfg.dsigma()?);
    if a.is_none() && ds.is_none() {
        return Err(CliError::Config("h1check needs [perturbation] kernel_a or dsigma".into()));
    }
    let ens = ensemble(&model, &mc)?;
    let sigma = model.sigma();
    let mut t = Table::new(&[
        "tau",
        "construction",
        "full_rank",
        "kernel_equal",
        "inv_bound",
        "worst_path",
        "worst_node",
        "checked_nodes",
        "states_passed",
        "safe_bound",
        "warning",
    ]);
    for &tau in &taus {
        let mut cases: Vec<(&str, CoefficientProcess, Option<f64>, Option<String>)> = Vec::new();
        if let Some(a) = &a {
            let kp = kernel_preserving_perturbation(sigma, a, tau, model.cond_cap())?;
            cases.push(("kernel-preserving", kp.sigma, Some(kp.safe_bound), kp.warning));
        }
        if let Some(ds) = &ds {
            let s = sigma.zip_with(ds, sigma.shape(), |s, d| Ok(s.iter().zip(d).map(|(x, y)| x + tau * y).collect()))?;
            cases.push(("additive", s, None, None));
        }
        for (name, pert, safe, warning) in cases {
            let r = check_h1(sigma, &pert, &ens, DEFAULT_RANK_TOL)?;
            let states = check_h1_states(sigma, &pert, ens.grid(), model.n(), DEFAULT_RANK_TOL)?;
            let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
            t.rows.push(vec![
                num(tau),
                name.into(),
                r.full_rank.to_string(),
                r.kernel_equal.to_string(),
                num(r.inv_bound),
                opt(r.worst_path),
                opt(r.worst_node),
                r.checked_nodes.to_string(),
                states.passed().to_string(),
                safe.map(num).unwrap_or_default(),
                warning.clone().unwrap_or_default(),
            ]);
            t.summary.push(format!(
                "tau = {tau} [{name}]: full rank {}, kernel equal {}, states {}{}",
                r.full_rank,
                r.kernel_equal,
                if states.passed() { "pass" } else { "fail" },
                warning.map(|w| format!(" (warning: {w})")).unwrap_or_default()
            ));
            if !(r.passed() && states.passed()) {
                t.fail(format!("kernel stability fails at tau = {tau} ({name})"));
            }
        }
    }
    Ok(t)
}

pub fn norms(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let (model, utility, mc) = (cfg.model()?, cfg.utility()?, cfg.mc()?);
    if !matches!(utility, UtilitySpec::Power { .. }) {
        return Err(CliError::Config("norms needs a power utility".into()));
    }
    let family = cfg.family()?;
    let ens = ensemble(&model, &mc)?;
    let mf = ModularFunctional::new(&model, &utility, &family, &ens)?;
    let opt = optimal_terminal_wealth(&model, &utility, &ens)?;
    let payoff = opt.payoff(&utility)?;
    let zbar = opt.density.values();
    let j = mf.j_functional(&payoff)?;
    let am = mf.amemiya(ModularKind::J, &payoff)?;
    let lux = mf.luxemburg(ModularKind::J, &payoff)?;
    let nj = mf.norm_j(&opt.xstar)?;
    let ni = mf.norm_i(zbar)?;
    let h = mf.holder_check(zbar, &opt.xstar)?;
    let x0 = model.x0();

    let mut t = Table::new(&["quantity", "value", "se"]);
    let mut push = |q: &str, v: f64, se: Option<f64>| t.rows.push(vec![q.into(), num(v), se.map(num).unwrap_or_default()]);
    push("J(U(X*))", j.mean(), Some(j.std_error()));
    push("amemiya_J(U(X*))", am, None);
    push("luxemburg_J(U(X*))", lux, None);
    push("norm_J(X*)", nj, None);
    push("norm_I(Zbar)", ni, None);
    push("holder_lhs", h.lhs, None);
    push("holder_ratio", h.ratio, None);
    t.summary.push(format!("J(U(X*)) = {:.8} ± {:.2e} (x0 = {x0})", j.mean(), j.std_error()));
    t.summary.push(format!("Amemiya norm {am:.6} (bound {}), Luxemburg norm {lux:.6}", 1.0 + x0));
    t.summary.push(format!(
        "Hölder: |E[Zbar X*]| = {:.6} <= {:.6} x {:.6} (ratio {:.6})",
        h.lhs, h.norm_i, h.norm_j, h.ratio
    ));
    if !j.value.within_se(x0, 3.0) {
        t.fail(format!("J(U(X*)) = {} does not saturate the budget {x0}", j.mean()));
    }
    if am > 1.0 + x0 {
        t.fail(format!("Amemiya norm {am} exceeds 1 + x0"));
    }
    if !h.holds {
        t.fail("Hölder inequality violated".into());
    }
    Ok(t)
}

fn parse_vector(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad number `{v}` in {what}"))))
        .collect()
}

/// Points, one per line, comma separated; `#` starts a comment line.
pub fn read_cloud(path: &Path) -> Result<CompactSet, CliError> {
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut points = Vec::new();
    for rec in reader.deserialize::<Vec<f64>>() {
        points.push(rec.map_err(|e| bad(e.to_string()))?);
    }
    CompactSet::new(points).map_err(|e| bad(e.to_string()))
}

pub fn danskin(cloud: &Path, direction: &str, delta: Option<&str>, tie_tol: f64) -> Result<Table, CliError> {
    let k = read_cloud(cloud)?;
    let d = parse_vector(direction, "--direction")?;
    if d.len() != k.dim() {
        return Err(CliError::Usage(format!("direction has {} entries, the cloud lives in dimension {}", d.len(), k.dim())));
    }
    let s = support_value(&d, &k, tie_tol)?;
    let derivative = match delta {
        Some(v) => {
            let delta = parse_vector(v, "--delta")?;
            if delta.len() != k.dim() {
                return Err(CliError::Usage(format!("delta has {} entries, expected {}", delta.len(), k.dim())));
            }
            Some(directional_derivative(&d, &delta, &k, tie_tol)?)
        }
        None => None,
    };
    let argmax: Vec<String> = s.argmax.iter().map(usize::to_string).collect();
    let mut t = Table::new(&["value", "argmax", "radius", "derivative", "tie_tol"]);
    t.rows.push(vec![
        num(s.value),
        argmax.join(";"),
        num(s.radius),
        derivative.map(num).unwrap_or_default(),
        num(tie_tol),
    ]);
    t.summary.push(format!("support value {} attained at points [{}]", s.value, argmax.join(", ")));
    if let Some(dv) = derivative {
        t.summary.push(format!("directional derivative {dv}"));
    }
    Ok(t)
}

pub fn second_order(cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let (model, utility, mc) = (cfg.model()?, cfg.utility()?, cfg.mc()?);
    let ens = ensemble(&model, &mc)?;
    let dlam = match cfg.dlambda()? {
        Some(dl) => NodeField::from_process(&dl, ens.grid(), model.n()).config("[perturbation] dlambda")?,
        None => {
            let p = market_direction(cfg, &model)?;
            if p.dmu.is_none() && p.dsigma.is_none() {
                return Err(CliError::Config("secondorder needs [perturbation] dlambda, dmu, dsigma or kernel_a".into()));
            }
            Direction::Market(p).lambda_field(&model, &ens)?
        }
    };
    let eps = cfg.perturbation.eps.clone().unwrap_or_else(|| SECOND_ORDER_EPS.to_vec());
    let r = second_order_check(&model, &utility, &dlam, &eps, &ens)?;
    let mut t = Table::new(&["eps", "value", "residual", "negative_part", "seed"]);
    for p in &r.points {
        t.rows.push(vec![num(p.eps), num(p.value), num(p.residual), num(p.negative_part), mc.seed.to_string()]);
    }
    let slope = |s: Option<f64>| s.map_or("none (below round-off)".to_string(), |s| format!("{s:.3}"));
    t.summary.push(format!(
        "u(0) = {:.6}, derivative {:.6}, constant C = {:.3e}",
        r.base.mean(),
        r.derivative.mean(),
        r.constant
    ));
    t.summary.push(format!(
        "log-log slopes: negative part {}, |residual| {}",
        slope(r.negative_slope),
        slope(r.abs_slope)
    ));
    if !r.passed(SECOND_ORDER_MIN_SLOPE) {
        t.fail(format!("residual slopes below {SECOND_ORDER_MIN_SLOPE}"));
    }
    Ok(t)
}
