//! Support functions of finite point clouds.
//!
//! `v(d) = max_{z∈K} ⟨d, z⟩` over a cloud `K` (the maximum over the convex
//! hull is attained at a point of the cloud). `v` is convex, positively
//! homogeneous and Lipschitz with constant `max‖z‖`; its directional
//! derivative is `v'(d; Δ) = max_{z∈S(d)} ⟨Δ, z⟩` over the argmax set `S(d)`,
//! in the Hadamard sense: along any `h_k → Δ`, `τ_k ↓ 0`.

use crate::error::{Error, Result};

/// Default relative tie tolerance for argmax sets.
pub const DEFAULT_TIE_TOL: f64 = 1e-12;

/// A non-empty finite cloud of points in `R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactSet {
    m: usize,
    points: Vec<Vec<f64>>,
}

impl CompactSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let m = points.first().map(Vec::len).ok_or_else(|| Error::InvalidInput("empty point cloud".into()))?;
        if m == 0 {
            return Err(Error::InvalidInput("points must have at least one coordinate".into()));
        }
        if let Some(i) = points.iter().position(|p| p.len() != m) {
            return Err(Error::Shape(format!("point {i} has {} coordinates, expected {m}", points[i].len())));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("point coordinates must be finite".into()));
        }
        Ok(Self { m, points })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `max ‖z‖`, the Lipschitz constant of the support function.
    pub fn radius(&self) -> f64 {
        self.points.iter().map(|p| norm(p)).fold(0.0, f64::max)
    }

    fn check_dim(&self, d: &[f64], what: &str) -> Result<()> {
        if d.len() != self.m {
            return Err(Error::Shape(format!("{what} has {} coordinates, cloud has {}", d.len(), self.m)));
        }
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("{what} must be finite")));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `v(d)`, the argmax set `S(d)` and the cloud radius.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportResult {
    pub value: f64,
    /// Indices attaining `value` within `tie_tol·(1 + |value|)`, ascending.
    pub argmax: Vec<usize>,
    pub radius: f64,
}

pub fn support_value(d: &[f64], k: &CompactSet, tie_tol: f64) -> Result<SupportResult> {
    k.check_dim(d, "direction")?;
    let values: Vec<f64> = k.points.iter().map(|z| dot(d, z)).collect();
    let value = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let slack = tie_tol * (1.0 + value.abs());
    let argmax = values
        .iter()
        .enumerate()
        .filter(|(_, v)| value - **v <= slack)
        .map(|(i, _)| i)
        .collect();
    Ok(SupportResult {
        value,
        argmax,
        radius: k.radius(),
    })
}

/// `v'(d; Δ) = max_{z∈S(d)} ⟨Δ, z⟩`.
pub fn directional_derivative(d: &[f64], delta: &[f64], k: &CompactSet, tie_tol: f64) -> Result<f64> {
    k.check_dim(delta, "perturbation")?;
    let s = support_value(d, k, tie_tol)?;
    Ok(s.argmax.iter().map(|&i| dot(delta, &k.points[i])).fold(f64::NEG_INFINITY, f64::max))
}

/// Difference quotients along an approach sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HadamardReport {
    pub derivative: f64,
    /// `(v(d + τ_k h_k) − v(d))/τ_k`.
    pub quotients: Vec<f64>,
    /// `|quotient_k − derivative|`.
    pub errors: Vec<f64>,
}

impl HadamardReport {
    /// The last quotient is within `tol·(1 + |derivative|)` of the derivative.
    pub fn converged(&self, tol: f64) -> bool {
        self.errors.last().is_some_and(|e| *e <= tol * (1.0 + self.derivative.abs()))
    }
}

/// Evaluates difference quotients along `(τ_k, h_k)` with `τ_k ↓ 0`, `h_k → Δ`.
pub fn hadamard_probe(d: &[f64], delta: &[f64], sequence: &[(f64, Vec<f64>)], k: &CompactSet, tie_tol: f64) -> Result<HadamardReport> {
    if sequence.is_empty() {
        return Err(Error::InvalidInput("empty approach sequence".into()));
    }
    let derivative = directional_derivative(d, delta, k, tie_tol)?;
    let base = support_value(d, k, tie_tol)?.value;
    let mut quotients = Vec::with_capacity(sequence.len());
    for (tau, h) in sequence {
        if !(tau.is_finite() && *tau > 0.0) {
            return Err(Error::InvalidInput(format!("step {tau} must be positive")));
        }
        k.check_dim(h, "approach direction")?;
        let shifted: Vec<f64> = d.iter().zip(h).map(|(a, b)| a + tau * b).collect();
        quotients.push((support_value(&shifted, k, tie_tol)?.value - base) / tau);
    }
    let errors = quotients.iter().map(|q| (q - derivative).abs()).collect();
    Ok(HadamardReport {
        derivative,
        quotients,
        errors,
    })
}

/// `τ_k = 2^{−k}` and `h_k = Δ + 2^{−k}·e` for `k = 1..=count`.
pub fn approach_sequence(delta: &[f64], e: &[f64], count: usize) -> Vec<(f64, Vec<f64>)> {
    (1..=count)
        .map(|k| {
            let t = 0.5f64.powi(k as i32);
            (t, delta.iter().zip(e).map(|(a, b)| a + t * b).collect())
        })
        .collect()
}

/// `|v(d1) − v(d2)|` against `‖d1 − d2‖·max‖z‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzReport {
    pub difference: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn lipschitz_check(d1: &[f64], d2: &[f64], k: &CompactSet) -> Result<LipschitzReport> {
    let v1 = support_value(d1, k, DEFAULT_TIE_TOL)?.value;
    let v2 = support_value(d2, k, DEFAULT_TIE_TOL)?.value;
    let diff: Vec<f64> = d1.iter().zip(d2).map(|(a, b)| a - b).collect();
    let bound = norm(&diff) * k.radius();
    let difference = (v1 - v2).abs();
    // Rounding in the two inner products is the only allowed excess.
    let slack = 8.0 * f64::EPSILON * (v1.abs() + v2.abs() + bound);
    Ok(LipschitzReport {
        difference,
        bound,
        holds: difference <= bound + slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> CompactSet {
        CompactSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn two_point_examples() {
        let k = unit();
        let s = support_value(&[2.0, 1.0], &k, DEFAULT_TIE_TOL).unwrap();
        assert_eq!((s.value, s.argmax), (2.0, vec![0]));
        let s = support_value(&[0.0, 0.0], &k, DEFAULT_TIE_TOL).unwrap();
        assert_eq!((s.value, s.argmax), (0.0, vec![0, 1]));
        assert_eq!(directional_derivative(&[2.0, 1.0], &[-3.0, 5.0], &k, DEFAULT_TIE_TOL).unwrap(), -3.0);
        for (a, b) in [(1.0, 2.0), (-4.0, -1.5), (0.3, 0.2)] {
            assert_eq!(directional_derivative(&[1.0, 1.0], &[a, b], &k, DEFAULT_TIE_TOL).unwrap(), f64::max(a, b));
        }
    }

    #[test]
    fn invalid_input() {
        assert!(CompactSet::new(vec![]).is_err());
        assert!(CompactSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(CompactSet::new(vec![vec![f64::NAN]]).is_err());
        assert!(support_value(&[1.0], &unit(), DEFAULT_TIE_TOL).is_err());
    }

    #[test]
    fn hadamard_limit_is_independent_of_the_approach() {
        let k = unit();
        let d = [1.0, 1.0];
        for delta in [[0.5, -0.25], [-1.0, 2.0]] {
            let straight = hadamard_probe(&d, &delta, &approach_sequence(&delta, &[0.0, 0.0], 20), &k, DEFAULT_TIE_TOL).unwrap();
            assert!(straight.errors.iter().all(|e| *e < 1e-9));
            for e in [[1.0, 0.0], [0.0, -1.0], [3.0, 3.0]] {
                let r = hadamard_probe(&d, &delta, &approach_sequence(&delta, &e, 30), &k, DEFAULT_TIE_TOL).unwrap();
                assert!(r.converged(1e-6), "{r:?}");
                assert_eq!(r.derivative, f64::max(delta[0], delta[1]));
            }
        }
    }

    #[test]
    fn lipschitz_instances() {
        let k = unit();
        let r = lipschitz_check(&[0.3, 0.7], &[0.3, 0.7], &k).unwrap();
        assert!(r.holds && r.difference == 0.0 && r.bound == 0.0);
        let r = lipschitz_check(&[0.0, 0.0], &[0.6, -0.8], &k).unwrap();
        assert!(r.holds && r.difference <= 1.0);
    }

    fn random_cloud(rng: &mut ChaCha8Rng) -> CompactSet {
        let m = rng.random_range(1..=5);
        let count = rng.random_range(1..=20);
        // Small integer coordinates produce exact ties.
        CompactSet::new((0..count).map(|_| (0..m).map(|_| rng.random_range(-3..=3) as f64).collect()).collect()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        (0..m).map(|_| rng.random_range(-2..=2) as f64).collect()
    }

    #[test]
    fn matches_enumeration_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let k = random_cloud(&mut rng);
            let d = random_vec(&mut rng, k.dim());
            let delta = random_vec(&mut rng, k.dim());
            // Brute-force oracle: exact integer arithmetic.
            let ip: Vec<i64> = k.points().iter().map(|z| z.iter().zip(&d).map(|(a, b)| (*a as i64) * (*b as i64)).sum()).collect();
            let best = *ip.iter().max().unwrap();
            let ties: Vec<usize> = (0..ip.len()).filter(|&i| ip[i] == best).collect();
            let s = support_value(&d, &k, DEFAULT_TIE_TOL).unwrap();
            assert_eq!(s.value, best as f64);
            assert_eq!(s.argmax, ties);
            let dd = ties
                .iter()
                .map(|&i| k.points()[i].iter().zip(&delta).map(|(a, b)| (*a as i64) * (*b as i64)).sum::<i64>())
                .max()
                .unwrap();
            assert_eq!(directional_derivative(&d, &delta, &k, DEFAULT_TIE_TOL).unwrap(), dd as f64);
            // Piecewise linearity: the quotient is exact once τ is below the gap to the runner-up.
            let tau = 1.0 / 1024.0;
            let shifted: Vec<f64> = d.iter().zip(&delta).map(|(a, b)| a + tau * b).collect();
            let q = (support_value(&shifted, &k, DEFAULT_TIE_TOL).unwrap().value - s.value) / tau;
            assert_eq!(q, dd as f64);
            let e = random_vec(&mut rng, k.dim());
            assert!(hadamard_probe(&d, &delta, &approach_sequence(&delta, &e, 40), &k, DEFAULT_TIE_TOL).unwrap().converged(1e-9));
            assert!(lipschitz_check(&d, &delta, &k).unwrap().holds);
        }
    }

    #[test]
    fn support_function_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k = random_cloud(&mut rng);
            let m = k.dim();
            let v = |d: &[f64]| support_value(d, &k, DEFAULT_TIE_TOL).unwrap().value;
            let (a, b) = (random_vec(&mut rng, m), random_vec(&mut rng, m));
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            assert!(v(&sum) <= v(&a) + v(&b));
            let scaled: Vec<f64> = a.iter().map(|x| 3.0 * x).collect();
            assert_eq!(v(&scaled), 3.0 * v(&a));
            // v'(d;Δ) ≥ ⟨Δ, z⟩ on S(d), and v(d + τΔ) ≥ v(d) + τ⟨Δ, z⟩.
            let s = support_value(&a, &k, DEFAULT_TIE_TOL).unwrap();
            let dd = directional_derivative(&a, &b, &k, DEFAULT_TIE_TOL).unwrap();
            for &i in &s.argmax {
                let z = &k.points()[i];
                assert!(dd >= dot(&b, z));
                for tau in [0.5, 1.0, 4.0] {
                    let sh: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + tau * y).collect();
                    assert!(v(&sh) >= s.value + tau * dot(&b, z));
                }
            }
            assert!(s.argmax.iter().any(|&i| dot(&b, &k.points()[i]) == dd));
        }
    }
}
