//! Hölder seminorm estimators on sampled point sets and Schauder ratio
//! experiments for manufactured solutions.
//!
//! Every estimator returns a lower bound: the supremum runs over the sampled
//! pairs only, and the sup over time slices replaces an essential sup.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::CoefficientField;
use crate::geometry::{stream, DriftStructure, GroupPoint};
use crate::solver::ManufacturedSolution;

#[derive(Debug, Error)]
pub enum HolderError {
    #[error("empty pair set")]
    EmptyPairs,
    #[error("exponent {0} outside (0,1)")]
    Exponent(f64),
    #[error("{points} points but {values} values")]
    Length { points: usize, values: usize },
    #[error("point dimension {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("degenerate solution: denominator {denominator}")]
    Degenerate { denominator: f64 },
}

/// Which quotient is maximized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// `|f(x,t) - f(y,t)| / ||x - y||^alpha`, same-time pairs only.
    Cx,
    /// `|f(xi) - f(eta)| / d(xi,eta)^alpha`.
    C,
    /// `|f(xi) - f(eta)| / (d^alpha + |t - s|^(alpha/q_N))`.
    Ct,
}

/// All pairs up to `ALL_PAIRS_LIMIT` points, otherwise `RANDOM_PAIRS`
/// seeded random pairs.
pub const ALL_PAIRS_LIMIT: usize = 2000;
pub const RANDOM_PAIRS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PairSelection {
    Auto { seed: u64 },
    All,
    Random { count: usize, seed: u64 },
}

impl Default for PairSelection {
    fn default() -> Self {
        PairSelection::Auto { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub estimate: f64,
    /// Ordered so that [`quotient`] on it returns `estimate`.
    pub witness: Option<(GroupPoint, GroupPoint)>,
    pub alpha: f64,
    pub variant: Variant,
    pub points: usize,
    pub pairs: usize,
}

/// Quotient for one ordered pair. `d` is taken from `xi` to `eta`.
pub fn quotient(drift: &DriftStructure, variant: Variant, alpha: f64, xi: &GroupPoint, fxi: f64, eta: &GroupPoint, feta: f64) -> f64 {
    let num = (fxi - feta).abs();
    if num == 0.0 {
        return 0.0;
    }
    let den = match variant {
        Variant::Cx => drift.dilation().quasi_norm(&(&xi.x - &eta.x)).powf(alpha),
        Variant::C => drift.dist(xi, eta).powf(alpha),
        Variant::Ct => {
            let qn = drift.dilation().top_exponent() as f64;
            drift.dist(xi, eta).powf(alpha) + (xi.t - eta.t).abs().powf(alpha / qn)
        }
    };
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn check(drift: &DriftStructure, alpha: f64, points: &[GroupPoint], values: &[f64]) -> Result<(), HolderError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(HolderError::Exponent(alpha));
    }
    if points.len() != values.len() {
        return Err(HolderError::Length {
            points: points.len(),
            values: values.len(),
        });
    }
    if let Some(p) = points.iter().find(|p| p.dim() != drift.dim()) {
        return Err(HolderError::Dimension {
            got: p.dim(),
            expected: drift.dim(),
        });
    }
    Ok(())
}

/// Index pairs `(i, j)` with `i < j` drawn from `idx`.
fn pairs_of(idx: &[usize], budget: Option<(usize, u64)>) -> Vec<(usize, usize)> {
    match budget {
        None => {
            let mut out = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    out.push((i, j));
                }
            }
            out
        }
        Some((count, seed)) => {
            if idx.len() < 2 {
                return Vec::new();
            }
            let mut rng = stream(seed, 40);
            (0..count)
                .filter_map(|_| {
                    let a = rng.random_range(0..idx.len());
                    let b = rng.random_range(0..idx.len());
                    (a != b).then(|| (idx[a.min(b)], idx[a.max(b)]))
                })
                .collect()
        }
    }
}

fn select_pairs(variant: Variant, points: &[GroupPoint], sel: PairSelection) -> Vec<(usize, usize)> {
    let groups: Vec<Vec<usize>> = if variant == Variant::Cx {
        let mut fibers: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (k, p) in points.iter().enumerate() {
            fibers.entry(p.t.to_bits()).or_default().push(k);
        }
        fibers.into_values().collect()
    } else {
        vec![(0..points.len()).collect()]
    };
    let total: usize = groups.iter().map(|g| g.len()).sum();
    let mut out = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let budget = match sel {
            PairSelection::All => None,
            PairSelection::Auto { seed } => {
                if g.len() <= ALL_PAIRS_LIMIT {
                    None
                } else {
                    Some((RANDOM_PAIRS * g.len() / total, seed.wrapping_add(gi as u64)))
                }
            }
            PairSelection::Random { count, seed } => Some((count * g.len() / total.max(1), seed.wrapping_add(gi as u64))),
        };
        out.extend(pairs_of(g, budget));
    }
    out
}

/// Sup of the `variant` quotient over selected pairs; both orders are tried
/// for the asymmetric quasi-distance. Ties go to the first pair in order,
/// so the result does not depend on the thread count.
pub fn seminorm(
    drift: &DriftStructure,
    variant: Variant,
    alpha: f64,
    points: &[GroupPoint],
    values: &[f64],
    selection: PairSelection,
) -> Result<HolderReport, HolderError> {
    check(drift, alpha, points, values)?;
    let pairs = select_pairs(variant, points, selection);
    if pairs.is_empty() {
        return Err(HolderError::EmptyPairs);
    }
    let best = pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let a = quotient(drift, variant, alpha, &points[i], values[i], &points[j], values[j]);
            let b = quotient(drift, variant, alpha, &points[j], values[j], &points[i], values[i]);
            if b > a {
                (b, k, (j, i))
            } else {
                (a, k, (i, j))
            }
        })
        .reduce(
            || (0.0, usize::MAX, (0, 0)),
            |x, y| {
                if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) {
                    y
                } else {
                    x
                }
            },
        );
    let witness = (best.0 > 0.0).then(|| (points[best.2 .0].clone(), points[best.2 .1].clone()));
    Ok(HolderReport {
        estimate: best.0,
        witness,
        alpha,
        variant,
        points: points.len(),
        pairs: pairs.len(),
    })
}

pub fn seminorm_cx(drift: &DriftStructure, alpha: f64, points: &[GroupPoint], values: &[f64], selection: PairSelection) -> Result<HolderReport, HolderError> {
    seminorm(drift, Variant::Cx, alpha, points, values, selection)
}

pub fn seminorm_c(drift: &DriftStructure, alpha: f64, points: &[GroupPoint], values: &[f64], selection: PairSelection) -> Result<HolderReport, HolderError> {
    seminorm(drift, Variant::C, alpha, points, values, selection)
}

pub fn seminorm_ct(drift: &DriftStructure, alpha: f64, points: &[GroupPoint], values: &[f64], selection: PairSelection) -> Result<HolderReport, HolderError> {
    seminorm(drift, Variant::Ct, alpha, points, values, selection)
}

/// One norm `sup|f| + [f]` of the ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchauderTerm {
    pub name: String,
    pub sup: f64,
    pub seminorm: f64,
}

impl SchauderTerm {
    pub fn norm(&self) -> f64 {
        self.sup + self.seminorm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchauderRatioReport {
    pub alpha: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
    /// Top-order seminorms only: `(sum [d_ij u]_x + [Yu]_x) / [Lu]_x`.
    /// Invariant under `u -> u o D(lambda)` for the model operator.
    pub homogeneous_ratio: f64,
    pub terms: Vec<SchauderTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeReport {
    pub alpha: f64,
    /// Largest `C_t` seminorm over `d_ij u`, `i, j <= q`.
    pub seminorm: f64,
    pub entry: (usize, usize),
    /// `||Lu||_{C_x} + ||u||_{C}`.
    pub denominator: f64,
    pub quotient: f64,
    pub witness: Option<(GroupPoint, GroupPoint)>,
}

fn term(drift: &DriftStructure, name: String, variant: Variant, alpha: f64, points: &[GroupPoint], values: &[f64], sel: PairSelection) -> Result<SchauderTerm, HolderError> {
    let r = seminorm(drift, variant, alpha, points, values, sel)?;
    Ok(SchauderTerm {
        name,
        sup: values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        seminorm: r.estimate,
    })
}

struct Sampled {
    u: Vec<f64>,
    grad: Vec<DVector<f64>>,
    hess: Vec<DMatrix<f64>>,
    yu: Vec<f64>,
    lu: Vec<f64>,
}

fn sample(drift: &DriftStructure, a: &dyn CoefficientField, u: &dyn ManufacturedSolution, points: &[GroupPoint]) -> Sampled {
    Sampled {
        u: points.iter().map(|p| u.u(&p.x, p.t)).collect(),
        grad: points.iter().map(|p| u.grad(&p.x, p.t)).collect(),
        hess: points.iter().map(|p| u.hessian(&p.x, p.t)).collect(),
        yu: points.iter().map(|p| u.yu(drift, &p.x, p.t)).collect(),
        lu: points.iter().map(|p| u.lu(drift, a, &p.x, p.t)).collect(),
    }
}

/// Both sides of the global estimate in space, sampled on `points`.
pub fn schauder_ratio(
    drift: &DriftStructure,
    a: &dyn CoefficientField,
    u: &dyn ManufacturedSolution,
    alpha: f64,
    points: &[GroupPoint],
    selection: PairSelection,
) -> Result<SchauderRatioReport, HolderError> {
    check(drift, alpha, points, &vec![0.0; points.len()])?;
    let q = drift.q();
    let s = sample(drift, a, u, points);
    let mut terms = Vec::new();
    let mut top = 0.0;
    for i in 0..q {
        for j in 0..q {
            let v: Vec<f64> = s.hess.iter().map(|h| h[(i, j)]).collect();
            let t = term(drift, format!("d{}{}u", i + 1, j + 1), Variant::Cx, alpha, points, &v, selection)?;
            top += t.seminorm;
            terms.push(t);
        }
    }
    let t = term(drift, "Yu".into(), Variant::Cx, alpha, points, &s.yu, selection)?;
    top += t.seminorm;
    terms.push(t);
    for i in 0..q {
        let v: Vec<f64> = s.grad.iter().map(|g| g[i]).collect();
        terms.push(term(drift, format!("d{}u", i + 1), Variant::C, alpha, points, &v, selection)?);
    }
    terms.push(term(drift, "u".into(), Variant::C, alpha, points, &s.u, selection)?);
    let numerator: f64 = terms.iter().map(|t| t.norm()).sum();

    let lu = term(drift, "Lu".into(), Variant::Cx, alpha, points, &s.lu, selection)?;
    let sup_u = s.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let denominator = lu.norm() + sup_u;
    if !(denominator > 0.0) || !(lu.seminorm > 0.0) {
        return Err(HolderError::Degenerate { denominator });
    }
    let homogeneous_ratio = top / lu.seminorm;
    terms.push(lu);
    Ok(SchauderRatioReport {
        alpha,
        numerator,
        denominator,
        ratio: numerator / denominator,
        homogeneous_ratio,
        terms,
    })
}

/// Local space-time quotient for `d_ij u` with time exponent `alpha/q_N`,
/// `points` being a sample of `K x [tau, T]`.
pub fn schauder_space_time(
    drift: &DriftStructure,
    a: &dyn CoefficientField,
    u: &dyn ManufacturedSolution,
    alpha: f64,
    points: &[GroupPoint],
    selection: PairSelection,
) -> Result<SpaceTimeReport, HolderError> {
    check(drift, alpha, points, &vec![0.0; points.len()])?;
    let q = drift.q();
    let s = sample(drift, a, u, points);
    let lu = term(drift, "Lu".into(), Variant::Cx, alpha, points, &s.lu, selection)?;
    let uc = term(drift, "u".into(), Variant::C, alpha, points, &s.u, selection)?;
    let denominator = lu.norm() + uc.norm();
    if !(denominator > 0.0) {
        return Err(HolderError::Degenerate { denominator });
    }
    let mut best: Option<(HolderReport, (usize, usize))> = None;
    for i in 0..q {
        for j in i..q {
            let v: Vec<f64> = s.hess.iter().map(|h| h[(i, j)]).collect();
            let r = seminorm(drift, Variant::Ct, alpha, points, &v, selection)?;
            if best.as_ref().is_none_or(|b| r.estimate > b.0.estimate) {
                best = Some((r, (i, j)));
            }
        }
    }
    let (r, entry) = best.expect("q >= 1");
    Ok(SpaceTimeReport {
        alpha,
        seminorm: r.estimate,
        entry,
        denominator,
        quotient: r.estimate / denominator,
        witness: r.witness,
    })
}

/// `u o D(lambda)`: `(x, t) -> u(D0(lambda) x, lambda^2 t)`.
pub struct DilatedSolution<'a> {
    inner: &'a dyn ManufacturedSolution,
    scale: Vec<f64>,
    lambda: f64,
}

impl<'a> DilatedSolution<'a> {
    pub fn new(drift: &DriftStructure, inner: &'a dyn ManufacturedSolution, lambda: f64) -> Self {
        let scale = drift.dilation().exponents().iter().map(|&e| lambda.powi(e as i32)).collect();
        DilatedSolution { inner, scale, lambda }
    }

    fn map(&self, x: &DVector<f64>, t: f64) -> (DVector<f64>, f64) {
        (DVector::from_fn(x.len(), |i, _| self.scale[i] * x[i]), self.lambda * self.lambda * t)
    }
}

impl ManufacturedSolution for DilatedSolution<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn tau(&self) -> f64 {
        self.inner.tau() / (self.lambda * self.lambda)
    }

    fn u(&self, x: &DVector<f64>, t: f64) -> f64 {
        let (y, s) = self.map(x, t);
        self.inner.u(&y, s)
    }

    fn grad(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let (y, s) = self.map(x, t);
        let g = self.inner.grad(&y, s);
        DVector::from_fn(g.len(), |i, _| self.scale[i] * g[i])
    }

    fn hessian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let (y, s) = self.map(x, t);
        let h = self.inner.hessian(&y, s);
        DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| self.scale[i] * self.scale[j] * h[(i, j)])
    }

    fn dt(&self, x: &DVector<f64>, t: f64) -> f64 {
        let (y, s) = self.map(x, t);
        self.lambda * self.lambda * self.inner.dt(&y, s)
    }

    fn sup(&self) -> f64 {
        self.inner.sup()
    }
}
