//! Experiment configuration (TOML).
//!
//! ```toml
//! [market]
//! d = 1
//! n = 1
//! mu = "ind:j=1;c=0;lo=[0.2];hi=[1]"
//! sigma = "const:[1]"
//! # r = "const:[0.02]"
//! x0 = 1.0
//!
//! [perturbation]
//! dmu = "const:[1]"
//! tau_grid = [0.0, 0.1, 0.2]
//!
//! [mc]
//! paths = 20000
//! steps = 200
//! horizon = 1.0
//! seed = 7
//!
//! [utility]
//! spec = "power:p=2"
//! ```
//!
//! Coefficients use the library's mini-language. Relative file paths are
//! resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use weaksens::sensitivity::DEFAULT_EPS_SCHEDULE;
use weaksens::{CoefficientProcess, MarketModel, PerturbationSpec, Shape, TimeGrid, UtilitySpec};

use crate::error::{CliError, ConfigContext};

const DEFAULT_PATHS: usize = 10_000;
const DEFAULT_STEPS: usize = 100;
const DEFAULT_HORIZON: f64 = 1.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub market: Option<MarketSection>,
    #[serde(default)]
    pub perturbation: PerturbationSection,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub utility: UtilitySection,
    #[serde(default)]
    pub norms: NormsSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory of the config file, for relative paths.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub d: usize,
    pub n: usize,
    pub mu: String,
    pub sigma: String,
    pub r: Option<String>,
    #[serde(default = "one")]
    pub x0: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    pub dmu: Option<String>,
    pub dsigma: Option<String>,
    pub dr: Option<String>,
    /// Raw market-price-of-risk direction (`n`-vector).
    pub dlambda: Option<String>,
    /// `d × d` direction of the kernel-preserving family `σ̄ + τA(σ̄σ̄ᵀ)⁻¹σ̄`.
    pub kernel_a: Option<String>,
    pub tau: Option<f64>,
    pub tau_grid: Option<Vec<f64>>,
    /// Finite-difference step schedule.
    pub eps: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    /// Optional CSV (`path_index,xstar`) with externally computed optimal wealth.
    pub xstar_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySection {
    pub spec: String,
}

impl Default for UtilitySection {
    fn default() -> Self {
        Self { spec: "power:p=2".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormsSection {
    /// Kernel-valued processes `ν` (`n`-vectors); empty means `{0}`.
    #[serde(default)]
    pub family: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Also write the base optimal wealth as `xstar.csv`.
    #[serde(default)]
    pub export_xstar: bool,
}

/// Command-line overrides of the `[mc]` and `[output]` sections.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Resolved Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mc {
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub seed: u64,
}

impl Mc {
    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.horizon, self.steps).config("[mc]")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        let mc = &mut self.mc;
        mc.paths = o.paths.or(mc.paths);
        mc.steps = o.steps.or(mc.steps);
        mc.horizon = o.horizon.or(mc.horizon);
        mc.seed = o.seed.or(mc.seed);
        if o.out.is_some() {
            self.output.dir = o.out.clone();
        }
    }

    /// Monte Carlo settings with the given defaults; the seed is mandatory.
    pub fn mc_with(&self, paths: usize, steps: usize) -> Result<Mc, CliError> {
        let seed = self
            .mc
            .seed
            .ok_or_else(|| CliError::Config("a seed is mandatory ([mc] seed or --seed)".into()))?;
        let mc = Mc {
            paths: self.mc.paths.unwrap_or(paths),
            steps: self.mc.steps.unwrap_or(steps),
            horizon: self.mc.horizon.unwrap_or(DEFAULT_HORIZON),
            seed,
        };
        if mc.paths == 0 || mc.steps == 0 || !(mc.horizon.is_finite() && mc.horizon > 0.0) {
            return Err(CliError::Config("paths, steps and horizon must be positive".into()));
        }
        Ok(mc)
    }

    pub fn mc(&self) -> Result<Mc, CliError> {
        self.mc_with(DEFAULT_PATHS, DEFAULT_STEPS)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| PathBuf::from("weaksens-out"))
    }

    fn market(&self) -> Result<&MarketSection, CliError> {
        self.market
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs a [market] section".into()))
    }

    pub fn model(&self) -> Result<MarketModel, CliError> {
        let m = self.market()?;
        if m.d == 0 || m.n < m.d {
            return Err(CliError::Config(format!("need 1 <= d <= n, got d = {}, n = {}", m.d, m.n)));
        }
        let mu = CoefficientProcess::parse(&m.mu, Shape::Vector(m.d)).config("[market] mu")?;
        let sigma = CoefficientProcess::parse(&m.sigma, Shape::Matrix(m.d, m.n)).config("[market] sigma")?;
        let r = m
            .r
            .as_deref()
            .map(|s| CoefficientProcess::parse(s, Shape::Scalar))
            .transpose()
            .config("[market] r")?;
        MarketModel::new(mu, sigma, r, m.x0).config("[market]")
    }

    pub fn utility(&self) -> Result<UtilitySpec, CliError> {
        UtilitySpec::parse(&self.utility.spec, self.base_dir.as_deref()).config("[utility] spec")
    }

    fn direction(&self, spec: &Option<String>, shape: Shape, what: &str) -> Result<Option<CoefficientProcess>, CliError> {
        spec.as_deref()
            .map(|s| CoefficientProcess::parse(s, shape))
            .transpose()
            .config(&format!("[perturbation] {what}"))
    }

    pub fn dmu(&self) -> Result<Option<CoefficientProcess>, CliError> {
        let d = self.market()?.d;
        self.direction(&self.perturbation.dmu, Shape::Vector(d), "dmu")
    }

    pub fn dsigma(&self) -> Result<Option<CoefficientProcess>, CliError> {
        let m = self.market()?;
        self.direction(&self.perturbation.dsigma, Shape::Matrix(m.d, m.n), "dsigma")
    }

    pub fn dr(&self) -> Result<Option<CoefficientProcess>, CliError> {
        self.direction(&self.perturbation.dr, Shape::Scalar, "dr")
    }

    pub fn dlambda(&self) -> Result<Option<CoefficientProcess>, CliError> {
        let n = self.market()?.n;
        self.direction(&self.perturbation.dlambda, Shape::Vector(n), "dlambda")
    }

    pub fn kernel_a(&self) -> Result<Option<CoefficientProcess>, CliError> {
        let d = self.market()?.d;
        self.direction(&self.perturbation.kernel_a, Shape::Matrix(d, d), "kernel_a")
    }

    /// All coefficient directions, with `τ = 0`.
    pub fn perturbation(&self) -> Result<PerturbationSpec, CliError> {
        let mut p = PerturbationSpec::new(0.0);
        p.dmu = self.dmu()?;
        p.dsigma = self.dsigma()?;
        p.dr = self.dr()?;
        Ok(p)
    }

    pub fn taus(&self) -> Result<Vec<f64>, CliError> {
        let taus = match (&self.perturbation.tau_grid, self.perturbation.tau) {
            (Some(g), _) if !g.is_empty() => g.clone(),
            (_, Some(t)) => vec![t],
            _ => return Err(CliError::Config("[perturbation] needs tau or tau_grid".into())),
        };
        if taus.iter().any(|t| !t.is_finite()) {
            return Err(CliError::Config("perturbation magnitudes must be finite".into()));
        }
        Ok(taus)
    }

    pub fn eps(&self) -> Vec<f64> {
        self.perturbation.eps.clone().unwrap_or_else(|| DEFAULT_EPS_SCHEDULE.to_vec())
    }

    pub fn family(&self) -> Result<Vec<CoefficientProcess>, CliError> {
        let n = self.market()?.n;
        self.norms
            .family
            .iter()
            .map(|s| CoefficientProcess::parse(s, Shape::Vector(n)).config("[norms] family"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[market]
d = 1
n = 2
mu = "const:[0.3]"
sigma = "ind:j=1;c=0;lo=[1,0];hi=[2,0]"
r = "const:[0.01]"
x0 = 2.0

[perturbation]
dmu = "const:[1]"
kernel_a = "const:[0.5]"
tau_grid = [0.0, 0.1]
eps = [0.1, 0.05]

[mc]
paths = 100
steps = 10
horizon = 2.0
seed = 3

[utility]
spec = "power:p=3"

[norms]
family = ["const:[0,0]", "const:[0,1]"]

[output]
dir = "out"
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::parse(FULL).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        let model = cfg.model().unwrap();
        assert_eq!((model.d(), model.n(), model.x0()), (1, 2, 2.0));
        assert_eq!(cfg.family().unwrap().len(), 2);
        assert_eq!(cfg.taus().unwrap(), vec![0.0, 0.1]);
        assert_eq!(cfg.mc().unwrap(), Mc { paths: 100, steps: 10, horizon: 2.0, seed: 3 });
    }

    #[test]
    fn overrides_and_mandatory_seed() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.mc(), Err(CliError::Config(_))));
        cfg.apply(&Overrides {
            seed: Some(9),
            paths: Some(5),
            ..Default::default()
        });
        let mc = cfg.mc().unwrap();
        assert_eq!((mc.seed, mc.paths, mc.steps), (9, 5, DEFAULT_STEPS));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_shapes() {
        assert!(ExperimentConfig::parse("[mc]\nseeds = 3\n").is_err());
        let bad = FULL.replace("mu = \"const:[0.3]\"", "mu = \"const:[0.3, 1]\"");
        assert!(matches!(ExperimentConfig::parse(&bad).unwrap().model(), Err(CliError::Config(_))));
    }
}
