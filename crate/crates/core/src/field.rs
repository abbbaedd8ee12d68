//! Per-node tables of derived quantities.
//!
//! Every coefficient is piecewise constant in time and takes at most two
//! values across paths (indicator kinds). A derived quantity such as the
//! market price of risk is therefore a function of (time segment, indicator
//! mask), and can be tabulated once and looked up inside path loops.

use crate::error::{Error, Result};
use crate::market::CoefficientProcess;
use crate::paths::{BrownianPath, TimeGrid};

const MAX_CONDITIONS: usize = 12;

/// Distinct indicator conditions and time breakpoints of a set of processes.
#[derive(Debug, Clone, Default)]
pub(crate) struct Conditions {
    list: Vec<(usize, f64)>,
    breakpoints: Vec<f64>,
}

impl Conditions {
    pub fn collect<'a, I>(procs: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a CoefficientProcess>,
    {
        let mut list: Vec<(usize, f64)> = Vec::new();
        let mut breakpoints = Vec::new();
        for p in procs {
            p.check_driver(dim)?;
            if let Some((j, c)) = p.condition() {
                if !list.iter().any(|(j2, c2)| *j2 == j && c2.to_bits() == c.to_bits()) {
                    list.push((j, c));
                }
            }
            breakpoints.extend_from_slice(p.breakpoints());
        }
        if list.len() > MAX_CONDITIONS {
            return Err(Error::Resource(format!(
                "{} distinct indicator conditions (at most {MAX_CONDITIONS})",
                list.len()
            )));
        }
        breakpoints.sort_by(|a, b| a.total_cmp(b));
        breakpoints.dedup();
        Ok(Self { list, breakpoints })
    }

    pub fn states(&self) -> usize {
        1 << self.list.len()
    }

    pub fn segments(&self) -> usize {
        self.breakpoints.len() + 1
    }

    #[inline]
    pub fn mask(&self, w: &[f64]) -> usize {
        let mut m = 0;
        for (b, (j, c)) in self.list.iter().enumerate() {
            if w[*j] < *c {
                m |= 1 << b;
            }
        }
        m
    }

    /// False for masks no path can produce, e.g. `W^1 < 0` but not `W^1 < 1`.
    pub fn feasible(&self, mask: usize) -> bool {
        for (a, (ja, ca)) in self.list.iter().enumerate() {
            for (b, (jb, cb)) in self.list.iter().enumerate() {
                if ja == jb && ca < cb && mask & (1 << a) != 0 && mask & (1 << b) == 0 {
                    return false;
                }
            }
        }
        true
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn segment_of(&self, t: f64) -> usize {
        self.breakpoints.partition_point(|b| *b <= t)
    }

    fn representative_time(&self, segment: usize) -> f64 {
        if segment == 0 {
            f64::NEG_INFINITY
        } else {
            self.breakpoints[segment - 1]
        }
    }

    pub fn state(&self, segment: usize, mask: usize) -> State<'_> {
        State {
            t: self.representative_time(segment),
            segment,
            mask,
            conditions: self,
        }
    }
}

/// One (time segment, indicator mask) combination.
pub(crate) struct State<'a> {
    t: f64,
    segment: usize,
    mask: usize,
    conditions: &'a Conditions,
}

impl State<'_> {
    pub fn segment(&self) -> usize {
        self.segment
    }

    pub fn eval<'p>(&self, p: &'p CoefficientProcess) -> &'p [f64] {
        let high = match p.condition() {
            Some((j, c)) => {
                let b = self
                    .conditions
                    .list
                    .iter()
                    .position(|(j2, c2)| *j2 == j && c2.to_bits() == c.to_bits())
                    .expect("condition registered");
                self.mask & (1 << b) != 0
            }
            None => false,
        };
        p.value_in_state(self.t, high)
    }
}

/// Rows of width `width` indexed by (node, mask).
#[derive(Debug, Clone)]
pub(crate) struct NodeTable {
    width: usize,
    states: usize,
    node_segment: Vec<usize>,
    data: Vec<f64>,
}

impl NodeTable {
    pub fn build<F>(grid: &TimeGrid, conditions: &Conditions, width: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(&State<'_>) -> Result<Vec<f64>>,
    {
        let states = conditions.states();
        let segments = conditions.segments();
        let mut data = Vec::with_capacity(segments * states * width);
        for s in 0..segments {
            for m in 0..states {
                if !conditions.feasible(m) {
                    data.extend(std::iter::repeat_n(f64::NAN, width));
                    continue;
                }
                let row = f(&conditions.state(s, m))?;
                if row.len() != width {
                    return Err(Error::Shape(format!("table row of width {} (expected {width})", row.len())));
                }
                data.extend(row);
            }
        }
        let node_segment = (0..=grid.steps()).map(|k| conditions.segment_of(grid.time(k))).collect();
        Ok(Self {
            width,
            states,
            node_segment,
            data,
        })
    }

    #[inline]
    pub fn row(&self, node: usize, mask: usize) -> &[f64] {
        let start = (self.node_segment[node] * self.states + mask) * self.width;
        &self.data[start..start + self.width]
    }

    /// Every tabulated row of a reachable state.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.width.max(1)).filter(|r| !r.iter().any(|v| v.is_nan()))
    }

    /// First grid node lying in `segment`, if any.
    pub fn first_node(&self, segment: usize) -> Option<usize> {
        self.node_segment.iter().position(|s| *s == segment)
    }
}

/// A vector-valued predictable field tabulated on a grid.
///
/// Built either from a single [`CoefficientProcess`] or as a function of
/// several (the market price of risk is a function of drift, volatility and
/// rate). Lookups cost one mask computation and one slice.
#[derive(Debug, Clone)]
pub struct NodeField {
    conditions: Conditions,
    table: NodeTable,
    grid: TimeGrid,
    dim: usize,
}

impl NodeField {
    /// Tabulates `f` over every (segment, indicator state) of `procs`.
    /// `f` receives the values of `procs`, in order, for that state.
    pub(crate) fn tabulate<F>(
        procs: &[&CoefficientProcess],
        grid: &TimeGrid,
        dim: usize,
        width: usize,
        mut f: F,
    ) -> Result<Self>
    where
        F: FnMut(&[&[f64]]) -> Result<Vec<f64>>,
    {
        let conditions = Conditions::collect(procs.iter().copied(), dim)?;
        let mut segment = 0;
        let result = NodeTable::build(grid, &conditions, width, |st| {
            segment = st.segment();
            let values: Vec<&[f64]> = procs.iter().map(|p| st.eval(p)).collect();
            f(&values)
        });
        let table = match result {
            Ok(t) => t,
            Err(Error::Singular { path, condition, .. }) => {
                // Name the first grid node in the offending segment.
                let probe = NodeTable::build(grid, &conditions, 0, |_| Ok(Vec::new()))?;
                let node = probe.first_node(segment).unwrap_or(0);
                return Err(Error::Singular { path, node, condition });
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            conditions,
            table,
            grid: *grid,
            dim,
        })
    }

    pub fn from_process(p: &CoefficientProcess, grid: &TimeGrid, dim: usize) -> Result<Self> {
        Self::tabulate(&[p], grid, dim, p.shape().len(), |v| Ok(v[0].to_vec()))
    }

    /// Value at node `k` given `w = W_{t_k}`.
    #[inline]
    pub fn at(&self, k: usize, w: &[f64]) -> &[f64] {
        self.table.row(k, self.conditions.mask(w))
    }

    pub fn width(&self) -> usize {
        self.table.width
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Brownian dimension the field reads.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when no value depends on the path.
    pub fn is_deterministic(&self) -> bool {
        self.conditions.is_empty()
    }

    /// Largest Euclidean row norm over reachable states.
    pub fn max_norm(&self) -> f64 {
        self.table
            .rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Every reachable row, once per (segment, state).
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.table.rows()
    }

    /// Rows at nodes `0..=N` of `path`, concatenated.
    pub fn evaluate_path(&self, path: &BrownianPath) -> Vec<f64> {
        let mut out = Vec::with_capacity((self.grid.steps() + 1) * self.width());
        for k in 0..=self.grid.steps() {
            out.extend_from_slice(self.at(k, path.w(k)));
        }
        out
    }

    /// Checks that this field lives on `grid` with Brownian dimension `dim`.
    pub fn check_compatible(&self, grid: &TimeGrid, dim: usize, width: usize, what: &str) -> Result<()> {
        if self.grid != *grid || self.dim != dim || self.width() != width {
            return Err(Error::Shape(format!(
                "{what}: field of width {} on {} steps (dim {}) used with width {width} on {} steps (dim {dim})",
                self.width(),
                self.grid.steps(),
                self.dim,
                grid.steps()
            )));
        }
        Ok(())
    }
}
