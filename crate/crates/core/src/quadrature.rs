//! Gaussian quadrature rules, whitened Gaussian integrals, graded time meshes
//! and a nested adaptive Gauss-Kronrod integrator.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuadratureError {
    #[error("rule needs at least one node")]
    NoNodes,
    #[error("covariance is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("mean has length {mean}, covariance is {cov}x{cov}")]
    Dimension { mean: usize, cov: usize },
    #[error("tensor Gauss-Hermite is limited to dimension 6, got {0}")]
    TooManyDimensions(usize),
    #[error("order {order} too small: {value} vs {doubled} at order {}", 2 * order)]
    OrderTooSmall { order: usize, value: f64, doubled: f64 },
    #[error("mesh needs finite tau < t, n >= 1 and grade >= 1")]
    BadMesh,
    #[error("bad integration interval [{0}, {1}]")]
    BadInterval(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// Weight 1 on [-1, 1].
    Legendre,
    /// Weight `exp(-x^2)` on the real line.
    Hermite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub kind: RuleKind,
    /// Ascending.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Legendre rule mapped to `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
    }
}

const NEWTON_EPS: f64 = 1e-15;
const NEWTON_MAX: usize = 100;

fn legendre(n: usize) -> Rule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..NEWTON_MAX {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < NEWTON_EPS {
                break;
            }
        }
        if 2 * i + 1 == n {
            z = 0.0;
        }
        let w = 2.0 / ((1.0 - z * z) * pp * pp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Rule {
        kind: RuleKind::Legendre,
        nodes,
        weights,
    }
}

fn hermite(n: usize) -> Rule {
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut roots: Vec<f64> = Vec::with_capacity(n.div_ceil(2));
    for i in 0..n.div_ceil(2) {
        let mut z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => roots[0] - 1.14 * nf.powf(0.426) / roots[0],
            2 => 1.86 * roots[1] - 0.86 * roots[0],
            3 => 1.91 * roots[2] - 0.91 * roots[1],
            _ => 2.0 * roots[i - 1] - roots[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..NEWTON_MAX {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < NEWTON_EPS * z.abs().max(1.0) {
                break;
            }
        }
        if 2 * i + 1 == n {
            z = 0.0;
        }
        roots.push(z);
        let w = 2.0 / (pp * pp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Rule {
        kind: RuleKind::Hermite,
        nodes,
        weights,
    }
}

/// Fresh `n`-node Gaussian rule.
pub fn rule(kind: RuleKind, n: usize) -> Result<Rule, QuadratureError> {
    if n == 0 {
        return Err(QuadratureError::NoNodes);
    }
    Ok(match kind {
        RuleKind::Legendre => legendre(n),
        RuleKind::Hermite => hermite(n),
    })
}

type RuleCache = RwLock<HashMap<(RuleKind, usize), Arc<Rule>>>;

/// Shared immutable copy of [`rule`].
pub fn cached_rule(kind: RuleKind, n: usize) -> Result<Arc<Rule>, QuadratureError> {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.read().expect("rule cache poisoned").get(&(kind, n)) {
        return Ok(Arc::clone(r));
    }
    let r = Arc::new(rule(kind, n)?);
    cache
        .write()
        .expect("rule cache poisoned")
        .entry((kind, n))
        .or_insert_with(|| Arc::clone(&r));
    Ok(r)
}

/// Default Gauss-Hermite order per axis for a tensor grid in dimension `n`.
pub fn default_hermite_order(n: usize) -> Result<usize, QuadratureError> {
    match n {
        0..=3 => Ok(20),
        4 | 5 => Ok(12),
        6 => Ok(8),
        _ => Err(QuadratureError::TooManyDimensions(n)),
    }
}

/// Calls `visit(z, weight)` for every node of the `dim`-fold tensor product.
pub fn for_each_tensor_node<F: FnMut(&[f64], f64)>(rule: &Rule, dim: usize, mut visit: F) {
    let n = rule.len();
    let mut idx = vec![0usize; dim];
    let mut z: Vec<f64> = vec![rule.nodes[0]; dim];
    loop {
        let w: f64 = idx.iter().map(|&i| rule.weights[i]).product();
        visit(&z, w);
        let mut axis = 0;
        loop {
            if axis == dim {
                return;
            }
            idx[axis] += 1;
            if idx[axis] < n {
                z[axis] = rule.nodes[idx[axis]];
                break;
            }
            idx[axis] = 0;
            z[axis] = rule.nodes[0];
            axis += 1;
        }
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, QuadratureError> {
    cov.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(QuadratureError::NotPositiveDefinite)
}

/// `E f(Y)` for `Y ~ N(mean, F F^T)` with `factor = F`, by tensor
/// Gauss-Hermite of `order` nodes per axis.
pub fn gaussian_expectation_factored<F>(f: F, mean: &DVector<f64>, factor: &DMatrix<f64>, order: usize) -> Result<f64, QuadratureError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let dim = mean.len();
    if factor.nrows() != dim || factor.ncols() != dim {
        return Err(QuadratureError::Dimension {
            mean: dim,
            cov: factor.nrows(),
        });
    }
    if dim > 6 {
        return Err(QuadratureError::TooManyDimensions(dim));
    }
    let r = cached_rule(RuleKind::Hermite, order)?;
    let scaled = factor * std::f64::consts::SQRT_2;
    let mut y = mean.clone();
    let mut zv = DVector::zeros(dim);
    let mut acc = 0.0;
    for_each_tensor_node(&r, dim, |z, w| {
        zv.copy_from_slice(z);
        y.copy_from(mean);
        y.gemv(1.0, &scaled, &zv, 1.0);
        acc += w * f(&y);
    });
    Ok(acc / PI.powf(0.5 * dim as f64))
}

/// `E f(Y)` for `Y ~ N(mean, covariance)`.
pub fn gaussian_integral<F>(f: F, mean: &DVector<f64>, covariance: &DMatrix<f64>, order: usize) -> Result<f64, QuadratureError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
        return Err(QuadratureError::Dimension {
            mean: mean.len(),
            cov: covariance.nrows(),
        });
    }
    let l = cholesky_factor(covariance)?;
    gaussian_expectation_factored(f, mean, &l, order)
}

/// [`gaussian_integral`] compared against the doubled order; fails when the
/// two differ by more than `tol * max(1, |value|)`. Returns the doubled-order
/// value.
pub fn gaussian_integral_checked<F>(
    f: F,
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
    order: usize,
    tol: f64,
) -> Result<f64, QuadratureError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let value = gaussian_integral(&f, mean, covariance, order)?;
    let doubled = gaussian_integral(&f, mean, covariance, 2 * order)?;
    if (value - doubled).abs() > tol * doubled.abs().max(1.0) {
        return Err(QuadratureError::OrderTooSmall { order, value, doubled });
    }
    Ok(doubled)
}

/// `∫ g(y) dy` where `g` is concentrated like `N(mean, F F^T)`, `factor = F`.
///
/// Uses Hermite weights multiplied by `exp(|z|^2)`, so `g` is evaluated
/// pointwise including its own Gaussian factor.
pub fn whitened_space_integral<G>(g: G, mean: &DVector<f64>, factor: &DMatrix<f64>, order: usize) -> Result<f64, QuadratureError>
where
    G: Fn(&DVector<f64>) -> f64,
{
    let dim = mean.len();
    if dim > 6 {
        return Err(QuadratureError::TooManyDimensions(dim));
    }
    let jac = 2f64.powf(0.5 * dim as f64) * factor.determinant().abs();
    let r = cached_rule(RuleKind::Hermite, order)?;
    let scaled = factor * std::f64::consts::SQRT_2;
    let mut y = mean.clone();
    let mut zv = DVector::zeros(dim);
    let mut acc = 0.0;
    for_each_tensor_node(&r, dim, |z, w| {
        zv.copy_from_slice(z);
        y.copy_from(mean);
        y.gemv(1.0, &scaled, &zv, 1.0);
        acc += w * zv.norm_squared().exp() * g(&y);
    });
    Ok(acc * jac)
}

/// Time mesh on `[tau, t]` refined toward the endpoint `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedMesh {
    pub tau: f64,
    pub t: f64,
    pub n: usize,
    pub grade: f64,
    /// `s_0 = tau < s_1 < ... < s_n = t`.
    pub breakpoints: Vec<f64>,
}

/// `t - s_j = (t - tau) ((n - j)/n)^grade`.
pub fn graded_mesh(tau: f64, t: f64, n: usize, grade: f64) -> Result<GradedMesh, QuadratureError> {
    if !(tau.is_finite() && t.is_finite() && tau < t && n >= 1 && grade >= 1.0) {
        return Err(QuadratureError::BadMesh);
    }
    let len = t - tau;
    let mut breakpoints: Vec<f64> = (0..=n)
        .map(|j| t - len * ((n - j) as f64 / n as f64).powf(grade))
        .collect();
    breakpoints[0] = tau;
    breakpoints[n] = t;
    Ok(GradedMesh {
        tau,
        t,
        n,
        grade,
        breakpoints,
    })
}

impl GradedMesh {
    pub fn cells(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.breakpoints.windows(2).map(|w| (w[0], w[1]))
    }

    /// Composite Gauss-Legendre with `nodes` points per cell; never samples
    /// the endpoints.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, nodes: usize, mut f: F) -> Result<f64, QuadratureError> {
        let r = cached_rule(RuleKind::Legendre, nodes)?;
        Ok(self.cells().map(|(a, b)| r.integrate(a, b, &mut f)).sum())
    }

    /// Like [`GradedMesh::integrate`] but `f` receives the gap `t - s`,
    /// computed without cancellation near the refined endpoint.
    pub fn integrate_gap<F: FnMut(f64) -> f64>(&self, nodes: usize, mut f: F) -> Result<f64, QuadratureError> {
        Ok(self.gap_nodes_and_weights(nodes)?.into_iter().map(|(g, w)| w * f(g)).sum())
    }

    /// Pairs `(t - s, weight)` of the composite rule.
    pub fn gap_nodes_and_weights(&self, nodes: usize) -> Result<Vec<(f64, f64)>, QuadratureError> {
        let r = cached_rule(RuleKind::Legendre, nodes)?;
        let len = self.t - self.tau;
        let n = self.n as f64;
        let mut out = Vec::with_capacity(self.n * nodes);
        for j in 0..self.n {
            let hi = len * ((self.n - j) as f64 / n).powf(self.grade);
            let lo = len * ((self.n - j - 1) as f64 / n).powf(self.grade);
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            for (x, w) in r.nodes.iter().zip(&r.weights) {
                out.push((mid + half * x, half * w));
            }
        }
        Ok(out)
    }

    /// Quadrature nodes and weights of [`GradedMesh::integrate`].
    pub fn nodes_and_weights(&self, nodes: usize) -> Result<Vec<(f64, f64)>, QuadratureError> {
        let r = cached_rule(RuleKind::Legendre, nodes)?;
        let mut out = Vec::with_capacity(self.n * nodes);
        for (a, b) in self.cells() {
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in r.nodes.iter().zip(&r.weights) {
                out.push((mid + half * x, half * w));
            }
        }
        Ok(out)
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// One G7/K15 panel: (Kronrod value, |Kronrod - Gauss|).
pub fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let dx = half * XGK[i];
        let s = f(mid - dx) + f(mid + dx);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * half, ((k - g) * half).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: u32,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_depth: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveResult {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

/// Recursive-bisection G7/K15. The tolerance is split between halves.
pub fn adaptive_gk15<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, opts: AdaptiveOptions) -> Result<AdaptiveResult, QuadratureError> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(QuadratureError::BadInterval(a, b));
    }
    if a == b {
        return Ok(AdaptiveResult {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
        });
    }
    let (whole, err) = gk15(&mut f, a, b);
    let mut evals = 15;
    let tol = opts.abs_tol.max(opts.rel_tol * whole.abs());
    let (value, error) = refine(&mut f, a, b, whole, err, tol, opts.max_depth, &mut evals);
    Ok(AdaptiveResult {
        value,
        error,
        evaluations: evals,
    })
}

#[allow(clippy::too_many_arguments)]
fn refine<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, whole: f64, err: f64, tol: f64, depth: u32, evals: &mut usize) -> (f64, f64) {
    if err <= tol || depth == 0 {
        return (whole, err);
    }
    let m = 0.5 * (a + b);
    let (l, el) = gk15(f, a, m);
    let (r, er) = gk15(f, m, b);
    *evals += 30;
    if el + er <= tol {
        return (l + r, el + er);
    }
    let (lv, le) = refine(f, a, m, l, el, 0.5 * tol, depth - 1, evals);
    let (rv, re) = refine(f, m, b, r, er, 0.5 * tol, depth - 1, evals);
    (lv + rv, le + re)
}

/// Vector-valued G7/K15 panel; error is the max-norm of Kronrod - Gauss.
pub fn gk15_vec<F: FnMut(f64) -> DVector<f64>>(f: &mut F, a: f64, b: f64) -> (DVector<f64>, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    let mut k = &fc * WGK[7];
    let mut g = fc * WG[3];
    for i in 0..7 {
        let dx = half * XGK[i];
        let s = f(mid - dx) + f(mid + dx);
        k.axpy(WGK[i], &s, 1.0);
        if i % 2 == 1 {
            g.axpy(WG[i / 2], &s, 1.0);
        }
    }
    let err = (&k - &g).amax() * half.abs();
    (k * half, err)
}

/// Adaptive bisection for vector integrands with a max-norm tolerance
/// `max(abs_tol, rel_tol * max|value|)`.
pub fn adaptive_gk15_vec<F: FnMut(f64) -> DVector<f64>>(
    mut f: F,
    a: f64,
    b: f64,
    opts: AdaptiveOptions,
) -> Result<(DVector<f64>, f64), QuadratureError> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(QuadratureError::BadInterval(a, b));
    }
    let (whole, err) = gk15_vec(&mut f, a, b);
    let tol = opts.abs_tol.max(opts.rel_tol * whole.amax());
    Ok(refine_vec(&mut f, a, b, whole, err, tol, opts.max_depth))
}

fn refine_vec<F: FnMut(f64) -> DVector<f64>>(f: &mut F, a: f64, b: f64, whole: DVector<f64>, err: f64, tol: f64, depth: u32) -> (DVector<f64>, f64) {
    if err <= tol || depth == 0 {
        return (whole, err);
    }
    let m = 0.5 * (a + b);
    let (l, el) = gk15_vec(f, a, m);
    let (r, er) = gk15_vec(f, m, b);
    if el + er <= tol {
        return (l + r, el + er);
    }
    let (lv, le) = refine_vec(f, a, m, l, el, 0.5 * tol, depth - 1);
    let (rv, re) = refine_vec(f, m, b, r, er, 0.5 * tol, depth - 1);
    (lv + rv, le + re)
}
