//! Seeded Brownian path ensembles and path functionals.
//!
//! Paths are regenerated on demand: path `i` draws its increments from a
//! ChaCha8 generator seeded with the ensemble seed and switched to stream
//! `i`. Two runs with the same `(seed, M, N, n)` see identical paths no matter
//! how many workers split the work.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimate::Estimate;
use crate::exec;
use crate::market::{CoefficientProcess, Shape};

/// Stream scheme id: one ChaCha8 stream per path index.
pub const STREAM_CHACHA8_PER_PATH: u64 = 1;
/// Stream scheme id for ensembles built from explicit increments.
pub const STREAM_STORED: u64 = 0;

const DUMP_MAGIC: [u8; 8] = *b"WSENSBM\0";
const DUMP_VERSION: u64 = 1;
const MAX_PATH_VALUES: usize = 1 << 28;
const MAX_STORED_VALUES: usize = 1 << 28;

/// Uniform grid `t_k = kT/N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidInput("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }
}

/// One Brownian path: increments over each step and positions at each node.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    index: usize,
    grid: TimeGrid,
    dim: usize,
    increments: Vec<f64>,
    positions: Vec<f64>,
}

impl BrownianPath {
    fn empty(grid: TimeGrid, dim: usize) -> Self {
        Self {
            index: 0,
            grid,
            dim,
            increments: vec![0.0; grid.steps() * dim],
            positions: vec![0.0; (grid.steps() + 1) * dim],
        }
    }

    /// Builds a path from its increments (`N × n`, row-major).
    pub fn from_increments(grid: TimeGrid, dim: usize, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.steps() * dim {
            return Err(Error::Shape(format!(
                "{} increments for {} steps of dimension {dim}",
                increments.len(),
                grid.steps()
            )));
        }
        let mut p = Self::empty(grid, dim);
        p.increments = increments;
        p.accumulate();
        Ok(p)
    }

    fn accumulate(&mut self) {
        let n = self.dim;
        self.positions[..n].fill(0.0);
        for k in 0..self.grid.steps() {
            for j in 0..n {
                self.positions[(k + 1) * n + j] = self.positions[k * n + j] + self.increments[k * n + j];
            }
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `W_{t_k}`, `k = 0..=N`.
    #[inline]
    pub fn w(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dim..(k + 1) * self.dim]
    }

    /// `W_{t_{k+1}} - W_{t_k}`, `k = 0..N`.
    #[inline]
    pub fn dw(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.w(self.grid.steps())
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }
}

#[derive(Debug, Clone)]
enum Source {
    Seeded,
    Stored(Arc<Vec<f64>>),
}

/// `M` Brownian paths of dimension `n` on a [`TimeGrid`].
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    count: usize,
    seed: u64,
    scheme: u64,
    source: Source,
}

impl PathEnsemble {
    pub fn simulate(grid: TimeGrid, dim: usize, count: usize, seed: u64) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::InvalidInput("ensemble needs M >= 1 paths of dimension n >= 1".into()));
        }
        let per_path = grid
            .steps()
            .checked_mul(dim)
            .filter(|v| *v <= MAX_PATH_VALUES)
            .ok_or_else(|| Error::Resource(format!("{} steps x {dim} dims per path", grid.steps())))?;
        per_path
            .checked_mul(count)
            .ok_or_else(|| Error::Resource(format!("M*N*n overflows for M = {count}")))?;
        Ok(Self {
            grid,
            dim,
            count,
            seed,
            scheme: STREAM_CHACHA8_PER_PATH,
            source: Source::Seeded,
        })
    }

    /// Ensemble over explicit increments laid out `[path][step][coordinate]`.
    pub fn from_increments(grid: TimeGrid, dim: usize, increments: Vec<f64>) -> Result<Self> {
        Self::stored(grid, dim, 0, increments)
    }

    fn stored(grid: TimeGrid, dim: usize, seed: u64, increments: Vec<f64>) -> Result<Self> {
        let per_path = grid.steps() * dim;
        if dim == 0 || increments.is_empty() || !increments.len().is_multiple_of(per_path) {
            return Err(Error::Shape(format!(
                "{} increments do not split into paths of {per_path}",
                increments.len()
            )));
        }
        if increments.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("increments must be finite".into()));
        }
        Ok(Self {
            grid,
            dim,
            count: increments.len() / per_path,
            seed,
            scheme: STREAM_STORED,
            source: Source::Stored(Arc::new(increments)),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_scheme(&self) -> u64 {
        self.scheme
    }

    /// The first `count` paths of this ensemble.
    pub fn truncated(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.count {
            return Err(Error::InvalidInput(format!("cannot take {count} of {} paths", self.count)));
        }
        let mut out = self.clone();
        out.count = count;
        if let Source::Stored(v) = &self.source {
            let per_path = self.grid.steps() * self.dim;
            out.source = Source::Stored(Arc::new(v[..count * per_path].to_vec()));
        }
        Ok(out)
    }

    pub fn path(&self, i: usize) -> BrownianPath {
        let mut p = BrownianPath::empty(self.grid, self.dim);
        self.fill_path(i, &mut p);
        p
    }

    fn fill_path(&self, i: usize, p: &mut BrownianPath) {
        assert!(i < self.count, "path {i} out of range");
        p.index = i;
        match &self.source {
            Source::Seeded => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(i as u64);
                let sd = self.grid.dt().sqrt();
                for v in p.increments.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = sd * z;
                }
            }
            Source::Stored(all) => {
                let per_path = self.grid.steps() * self.dim;
                p.increments.copy_from_slice(&all[i * per_path..(i + 1) * per_path]);
            }
        }
        p.accumulate();
    }

    /// Applies `f` to every path, in parallel when enabled; results are in path order.
    pub fn map_paths<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&BrownianPath) -> T + Sync + Send,
    {
        exec::map_indexed(
            self.count,
            || BrownianPath::empty(self.grid, self.dim),
            |buf, i| {
                self.fill_path(i, buf);
                f(buf)
            },
        )
    }

    /// Sequential [`PathEnsemble::map_paths`].
    pub fn map_paths_seq<T, F>(&self, f: F) -> Vec<T>
    where
        F: Fn(&BrownianPath) -> T,
    {
        exec::map_indexed_seq(
            self.count,
            || BrownianPath::empty(self.grid, self.dim),
            |buf, i| {
                self.fill_path(i, buf);
                f(buf)
            },
        )
    }

    /// All increments, `[path][step][coordinate]`.
    pub fn increments(&self) -> Result<Vec<f64>> {
        let total = self.count * self.grid.steps() * self.dim;
        if total > MAX_STORED_VALUES {
            return Err(Error::Resource(format!("{total} increments exceed the in-memory limit")));
        }
        match &self.source {
            Source::Stored(v) => Ok(v.as_ref().clone()),
            Source::Seeded => Ok(self.map_paths(|p| p.increments.clone()).concat()),
        }
    }

    /// Writes the binary dump: seven little-endian 64-bit header fields
    /// (magic, version, seed, M, N, n, T) followed by the increments as
    /// little-endian `f64`, `[path][step][coordinate]`.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&DUMP_MAGIC)?;
        for v in [
            DUMP_VERSION,
            self.seed,
            self.count as u64,
            self.grid.steps() as u64,
            self.dim as u64,
            self.grid.horizon().to_bits(),
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for i in 0..self.count {
            let p = self.path(i);
            for v in p.increments() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        if word != DUMP_MAGIC {
            return Err(Error::Parse("not a path ensemble dump (bad magic)".into()));
        }
        let mut next = || -> Result<u64> {
            input.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let version = next()?;
        if version != DUMP_VERSION {
            return Err(Error::Parse(format!("unsupported dump version {version}")));
        }
        let seed = next()?;
        let count = next()? as usize;
        let steps = next()? as usize;
        let dim = next()? as usize;
        let horizon = f64::from_bits(next()?);
        let grid = TimeGrid::new(horizon, steps)?;
        let total = count
            .checked_mul(steps)
            .and_then(|v| v.checked_mul(dim))
            .filter(|v| *v <= MAX_STORED_VALUES)
            .ok_or_else(|| Error::Resource("dump too large to load".into()))?;
        let mut bytes = vec![0u8; total * 8];
        input.read_exact(&mut bytes)?;
        let increments = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::stored(grid, dim, seed, increments)
    }
}

/// One scalar per path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFunctional {
    values: Vec<f64>,
    seed: u64,
}

impl PathFunctional {
    pub fn new(values: Vec<f64>, seed: u64) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite path functional at path {i}")));
        }
        Ok(Self { values, seed })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        exec::mean(&self.values)
    }

    pub fn estimate(&self, estimator: &str) -> Result<Estimate> {
        Estimate::from_samples(self.values.clone(), self.seed, estimator)
    }

    /// Pathwise product.
    pub fn product(&self, other: &PathFunctional) -> Result<PathFunctional> {
        if self.len() != other.len() {
            return Err(Error::Shape("path functionals of different lengths".into()));
        }
        let v = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        PathFunctional::new(v, self.seed)
    }
}

fn check_integrand(h: &CoefficientProcess, ens: &PathEnsemble) -> Result<()> {
    h.check_shape(Shape::Vector(ens.dim()), "integrand")?;
    h.check_driver(ens.dim())
}

/// `Σ_k ⟨H_{t_k}, ΔW_k⟩` on one path.
pub fn path_ito(h: &CoefficientProcess, path: &BrownianPath) -> f64 {
    let grid = path.grid();
    let mut s = 0.0;
    for k in 0..grid.steps() {
        let hk = h.evaluate(grid.time(k), path.w(k));
        s += hk.iter().zip(path.dw(k)).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

/// `Σ_k |H_{t_k}|² Δt` on one path.
pub fn path_quadratic_variation(h: &CoefficientProcess, path: &BrownianPath) -> f64 {
    let grid = path.grid();
    let dt = grid.dt();
    let mut s = 0.0;
    for k in 0..grid.steps() {
        let hk = h.evaluate(grid.time(k), path.w(k));
        s += hk.iter().map(|a| a * a).sum::<f64>() * dt;
    }
    s
}

/// Itô integral `∫ H dW` with left-endpoint integrand, per path.
pub fn ito_integral(h: &CoefficientProcess, ens: &PathEnsemble) -> Result<PathFunctional> {
    check_integrand(h, ens)?;
    PathFunctional::new(ens.map_paths(|p| path_ito(h, p)), ens.seed())
}

/// Quadratic variation `∫ |H|² dt` of `∫ H dW`, per path.
pub fn quadratic_variation(h: &CoefficientProcess, ens: &PathEnsemble) -> Result<PathFunctional> {
    check_integrand(h, ens)?;
    PathFunctional::new(ens.map_paths(|p| path_quadratic_variation(h, p)), ens.seed())
}

/// `log E(∫Γ dW)_T = ∫Γ dW − ½∫|Γ|² dt`, per path.
pub fn log_stochastic_exponential(gamma: &CoefficientProcess, ens: &PathEnsemble) -> Result<PathFunctional> {
    check_integrand(gamma, ens)?;
    let v = ens.map_paths(|p| path_ito(gamma, p) - 0.5 * path_quadratic_variation(gamma, p));
    PathFunctional::new(v, ens.seed())
}

/// Doléans-Dade exponential `E(∫Γ dW)_T`, accumulated in log space.
pub fn stochastic_exponential(gamma: &CoefficientProcess, ens: &PathEnsemble) -> Result<PathFunctional> {
    let logs = log_stochastic_exponential(gamma, ens)?;
    let v: Vec<f64> = logs.values().iter().map(|l| l.exp()).collect();
    if let Some(i) = v.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::Numerical(format!(
            "stochastic exponential under/overflows at path {i} (log value {})",
            logs.values()[i]
        )));
    }
    PathFunctional::new(v, ens.seed())
}

/// Girsanov density `E(∫(λ_new − λ_base)ᵀ dW)_T` per path.
pub fn girsanov_weight(
    lambda_new: &CoefficientProcess,
    lambda_base: &CoefficientProcess,
    ens: &PathEnsemble,
) -> Result<PathFunctional> {
    if lambda_new.shape() != lambda_base.shape() {
        return Err(Error::Shape("market prices of risk of different shapes".into()));
    }
    check_integrand(lambda_new, ens)?;
    check_integrand(lambda_base, ens)?;
    let grid = *ens.grid();
    let dt = grid.dt();
    let v = ens.map_paths(|p| {
        let mut log_w = 0.0;
        for k in 0..grid.steps() {
            let t = grid.time(k);
            let a = lambda_new.evaluate(t, p.w(k));
            let b = lambda_base.evaluate(t, p.w(k));
            for ((x, y), dw) in a.iter().zip(b).zip(p.dw(k)) {
                let d = x - y;
                log_w += d * dw - 0.5 * d * d * dt;
            }
        }
        log_w.exp()
    });
    PathFunctional::new(v, ens.seed())
}

/// `W^τ_{t_k} = W_{t_k} − Σ_{j<k} drift_{t_j} Δt`, with the drift read on the original path.
pub fn shifted_brownian(path: &BrownianPath, drift: &CoefficientProcess) -> Result<BrownianPath> {
    drift.check_shape(Shape::Vector(path.dim()), "drift")?;
    drift.check_driver(path.dim())?;
    let grid = *path.grid();
    let dt = grid.dt();
    let mut inc = Vec::with_capacity(path.increments.len());
    for k in 0..grid.steps() {
        let d = drift.evaluate(grid.time(k), path.w(k));
        inc.extend(path.dw(k).iter().zip(d).map(|(w, a)| w - a * dt));
    }
    let mut out = BrownianPath::from_increments(grid, path.dim(), inc)?;
    out.index = path.index;
    Ok(out)
}
