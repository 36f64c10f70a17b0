//! Covariance `C(t,s)`, the Gaussian kernel `Gamma`, its exact derivatives
//! and empirical checks of the Gaussian bounds.
//!
//! The covariance is always handled in scaled form: with `delta = t - s`
//! and `D = D_0(sqrt(delta))`,
//!
//! ```text
//! C(t,s) = D * Chat * D,   Chat = ∫_0^1 E(u) diag(A_0(t - delta u), 0) E(u)^T du
//! ```
//!
//! so `Chat` is `O(1)` for every `delta` and the Cholesky factor of `C` is
//! `D * chol(Chat)`. Whitened coordinates are `w = chol(Chat)^{-1} D^{-1} v`.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientError, TimeCoefficients, TimeKind};
use crate::geometry::{stream, Dilation, DriftStructure, GeometryError, GroupPoint};
use crate::quadrature::{
    adaptive_gk15_vec, cached_rule, default_hermite_order, whitened_space_integral, AdaptiveOptions, QuadratureError,
    RuleKind,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("covariance needs t > s, got t = {t}, s = {s}")]
    NotForward { t: f64, s: f64 },
    #[error("covariance factorization failed at t = {t}, gap = {gap}; scaled eigenvalues {eigenvalues:?}")]
    Factorization { t: f64, gap: f64, eigenvalues: Vec<f64> },
    #[error("kernel at its pole is not representable for gap {gap} (scales underflow)")]
    Precision { gap: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("bad multi-index `{0}`")]
    MultiIndex(String),
    #[error("coefficients have q = {coeff_q}, drift has q = {drift_q}")]
    CoefficientShape { coeff_q: usize, drift_q: usize },
    #[error("{count} sandwich violations; worst at xi = {xi:?}, eta = {eta:?}: {lower} <= {gamma} <= {upper} fails")]
    Sandwich {
        count: usize,
        xi: GroupPoint,
        eta: GroupPoint,
        gamma: f64,
        lower: f64,
        upper: f64,
    },
    #[error("finite-difference stencil crosses a coefficient breakpoint in ({0}, {1}]")]
    PieceCrossing(f64, f64),
    #[error("integral identity violated: got {value}, expected {expected} within {tol}")]
    Identity { value: f64, expected: f64, tol: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Multi-index `alpha = (a_1, ..., a_N)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn zero(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn unit(n: usize, i: usize) -> Self {
        let mut a = vec![0; n];
        a[i] = 1;
        Self(a)
    }

    pub fn pair(n: usize, i: usize, j: usize) -> Self {
        let mut a = vec![0; n];
        a[i] += 1;
        a[j] += 1;
        Self(a)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `|alpha| = sum a_i`.
    pub fn length(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `omega(alpha) = sum a_i q_i`.
    pub fn order(&self, dilation: &Dilation) -> u32 {
        dilation.order(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&a| a == 0)
    }

    /// Every multi-index of dimension `n` with `1 <= |alpha| <= max_len`.
    pub fn all_up_to(n: usize, max_len: u32) -> Vec<Self> {
        let mut out = Vec::new();
        let mut cur = vec![0u32; n];
        fn rec(k: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
            if k == cur.len() {
                if cur.iter().any(|&a| a > 0) {
                    out.push(MultiIndex(cur.clone()));
                }
                return;
            }
            for a in 0..=left {
                cur[k] = a;
                rec(k + 1, left - a, cur, out);
            }
            cur[k] = 0;
        }
        rec(0, max_len, &mut cur, &mut out);
        out.sort_by_key(|a| (a.length(), a.0.clone()));
        out
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join("."))
    }
}

impl FromStr for MultiIndex {
    type Err = KernelError;

    /// Parses `"a1.a2...."`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split('.')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
            .map_err(|_| KernelError::MultiIndex(s.to_string()))
    }
}

/// Which pole variable a derivative acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wrt {
    X,
    Y,
}

/// Polynomial in the whitened variable `w`; `D^alpha Gamma = P_alpha(w) Gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    dim: usize,
    terms: Vec<(Vec<u32>, f64)>,
}

impl Poly {
    pub fn one(dim: usize) -> Self {
        Self {
            dim,
            terms: vec![(vec![0; dim], 1.0)],
        }
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|(e, _)| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn terms(&self) -> &[(Vec<u32>, f64)] {
        &self.terms
    }

    /// `P e^{-|w|^2/4}` differentiated along `sum_k c_k d/dw_k`.
    pub fn apply_direction(&self, c: &[f64]) -> Self {
        let mut acc: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (e, a) in &self.terms {
            for (k, &ck) in c.iter().enumerate() {
                if ck == 0.0 {
                    continue;
                }
                if e[k] > 0 {
                    let mut d = e.clone();
                    d[k] -= 1;
                    *acc.entry(d).or_default() += a * ck * e[k] as f64;
                }
                let mut m = e.clone();
                m[k] += 1;
                *acc.entry(m).or_default() -= 0.5 * a * ck;
            }
        }
        Self {
            dim: self.dim,
            terms: acc.into_iter().filter(|(_, a)| *a != 0.0).collect(),
        }
    }

    pub fn eval(&self, w: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|(e, a)| {
                e.iter()
                    .enumerate()
                    .fold(*a, |p, (k, &ek)| if ek == 0 { p } else { p * w[k].powi(ek as i32) })
            })
            .sum()
    }
}

/// Numerical settings shared by kernel evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSettings {
    /// Gauss-Hermite nodes per axis; dimension default when `None`.
    pub hermite_order: Option<usize>,
    /// Tolerance for covariances of callable coefficients.
    pub callable_tol: f64,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            hermite_order: None,
            callable_tol: 1e-12,
        }
    }
}

/// `C(t,s)` in scaled, factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    pub t: f64,
    pub s: f64,
    /// `t - s`, kept separately to avoid cancellation.
    pub gap: f64,
    /// Diagonal of `D_0(sqrt(gap))`.
    scale: DVector<f64>,
    scaled: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl Covariance {
    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Full matrix `C(t,s)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.scale[i] * self.scaled[(i, j)] * self.scale[j])
    }

    /// `C(t,s)` conjugated by `D_0(1/sqrt(gap))`.
    pub fn scaled_matrix(&self) -> &DMatrix<f64> {
        &self.scaled
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    /// Lower factor `L` with `C = L L^T`.
    pub fn factor(&self) -> DMatrix<f64> {
        let mut l = self.chol.clone();
        for i in 0..self.dim() {
            l.row_mut(i).scale_mut(self.scale[i]);
        }
        l
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn det(&self) -> f64 {
        self.log_det.exp()
    }

    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        let scaled = v.component_div(&self.scale);
        self.chol
            .solve_lower_triangular(&scaled)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// Inverse of [`Covariance::whiten`].
    pub fn color(&self, w: &DVector<f64>) -> DVector<f64> {
        (&self.chol * w).component_mul(&self.scale)
    }

    /// `W = L^{-1}`, by triangular solve.
    pub fn whitening_matrix(&self) -> DMatrix<f64> {
        let dinv = DMatrix::from_diagonal(&self.scale.map(|d| 1.0 / d));
        self.chol
            .solve_lower_triangular(&dinv)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `<C^{-1} v, v>`.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }
}

/// Drift, coefficients and numerical settings.
#[derive(Debug, Clone)]
pub struct KernelContext {
    drift: DriftStructure,
    coeffs: TimeCoefficients,
    settings: KernelSettings,
}

impl KernelContext {
    pub fn new(drift: DriftStructure, coeffs: TimeCoefficients) -> Result<Self, KernelError> {
        if coeffs.q() != drift.q() {
            return Err(KernelError::CoefficientShape {
                coeff_q: coeffs.q(),
                drift_q: drift.q(),
            });
        }
        Ok(Self {
            drift,
            coeffs,
            settings: KernelSettings::default(),
        })
    }

    /// Constant coefficients `a = alpha * Id_q`, the kernel `Gamma_alpha`.
    pub fn constant(drift: DriftStructure, alpha: f64) -> Self {
        let coeffs = TimeCoefficients::constant(drift.q(), alpha);
        Self {
            drift,
            coeffs,
            settings: KernelSettings::default(),
        }
    }

    pub fn with_settings(mut self, settings: KernelSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn drift(&self) -> &DriftStructure {
        &self.drift
    }

    pub fn coeffs(&self) -> &TimeCoefficients {
        &self.coeffs
    }

    pub fn settings(&self) -> &KernelSettings {
        &self.settings
    }

    pub fn dilation(&self) -> &Dilation {
        self.drift.dilation()
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn hermite_order(&self) -> Result<usize, KernelError> {
        match self.settings.hermite_order {
            Some(n) => Ok(n),
            None => Ok(default_hermite_order(self.dim())?),
        }
    }

    fn embed(&self, a: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.drift.q();
        let eq = e.columns(0, q);
        &eq * a * eq.transpose()
    }

    /// `Chat(t, gap)`; see the module docs.
    pub fn scaled_covariance(&self, t: f64, gap: f64) -> Result<DMatrix<f64>, KernelError> {
        let n = self.dim();
        let m = match self.coeffs.kind() {
            TimeKind::Piecewise { breaks, .. } => {
                // breakpoints strictly inside (t - gap, t), as u = (t - b)/gap
                let mut cuts: Vec<f64> = breaks
                    .iter()
                    .map(|&b| (t - b) / gap)
                    .filter(|&u| u > 0.0 && u < 1.0)
                    .collect();
                cuts.push(0.0);
                cuts.push(1.0);
                cuts.sort_by(f64::total_cmp);
                let rule = cached_rule(RuleKind::Legendre, self.drift.nilpotency_index().max(1))?;
                let mut acc = DMatrix::zeros(n, n);
                for w in cuts.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    if hi <= lo {
                        continue;
                    }
                    let a = self.coeffs.at(t - gap * 0.5 * (lo + hi));
                    let half = 0.5 * (hi - lo);
                    let mid = 0.5 * (hi + lo);
                    for (x, wt) in rule.nodes.iter().zip(&rule.weights) {
                        let e = self.drift.propagator(mid + half * x);
                        acc += self.embed(&a, &e) * (half * wt);
                    }
                }
                acc
            }
            TimeKind::Callable(_) => {
                let opts = AdaptiveOptions {
                    abs_tol: 0.0,
                    rel_tol: self.settings.callable_tol,
                    max_depth: 45,
                };
                let f = |u: f64| {
                    let e = self.drift.propagator(u);
                    let a = self.coeffs.at(t - gap * u);
                    let m = self.embed(&a, &e);
                    DVector::from_column_slice(m.as_slice())
                };
                let (v, _) = adaptive_gk15_vec(f, 0.0, 1.0, opts)?;
                DMatrix::from_column_slice(n, n, v.as_slice())
            }
        };
        Ok((&m + m.transpose()) * 0.5)
    }

    pub fn covariance(&self, s: f64, t: f64) -> Result<Covariance, KernelError> {
        if !(t > s) {
            return Err(KernelError::NotForward { t, s });
        }
        self.covariance_gap(t, t - s)
    }

    /// `C(t, t - gap)` with the gap supplied exactly.
    pub fn covariance_gap(&self, t: f64, gap: f64) -> Result<Covariance, KernelError> {
        if !(gap > 0.0) || !t.is_finite() {
            return Err(KernelError::NotForward { t, s: t - gap });
        }
        let scaled = self.scaled_covariance(t, gap)?;
        let chol = match scaled.clone().cholesky() {
            Some(c) => c.l(),
            None => {
                let mut eigenvalues: Vec<f64> = scaled.symmetric_eigenvalues().iter().copied().collect();
                eigenvalues.sort_by(f64::total_cmp);
                return Err(KernelError::Factorization { t, gap, eigenvalues });
            }
        };
        let exps = self.dilation().exponents();
        let scale = DVector::from_iterator(exps.len(), exps.iter().map(|&q| gap.powf(0.5 * q as f64)));
        if scale.iter().any(|&d| !(d.is_normal())) {
            return Err(KernelError::Precision { gap });
        }
        let q_hom = self.dilation().homogeneous_dim() as f64;
        let log_det = q_hom * gap.ln() + 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Covariance {
            t,
            s: t - gap,
            gap,
            scale,
            scaled,
            chol,
            log_det,
        })
    }

    pub fn slice(&self, s: f64, t: f64) -> Result<KernelSlice, KernelError> {
        if !(t > s) {
            return Err(KernelError::NotForward { t, s });
        }
        self.slice_gap(t, t - s)
    }

    pub fn slice_gap(&self, t: f64, gap: f64) -> Result<KernelSlice, KernelError> {
        let cov = self.covariance_gap(t, gap)?;
        Ok(KernelSlice::new(&self.drift, cov))
    }

    fn check_points(&self, xi: &GroupPoint, eta: &GroupPoint) -> Result<(), KernelError> {
        for p in [xi, eta] {
            if p.dim() != self.dim() {
                return Err(KernelError::Dimension {
                    expected: self.dim(),
                    got: p.dim(),
                });
            }
        }
        Ok(())
    }

    /// `Gamma(xi; eta)`, zero for `t <= s`.
    pub fn gamma(&self, xi: &GroupPoint, eta: &GroupPoint) -> Result<f64, KernelError> {
        self.check_points(xi, eta)?;
        if xi.t <= eta.t {
            return Ok(0.0);
        }
        match self.slice(eta.t, xi.t) {
            Ok(sl) => Ok(sl.gamma_xy(&xi.x, &eta.x)),
            Err(KernelError::Precision { gap }) => {
                let v = &xi.x - &eta.x;
                if v.iter().all(|&c| c == 0.0) {
                    Err(KernelError::Precision { gap })
                } else {
                    Ok(0.0)
                }
            }
            Err(e) => Err(e),
        }
    }

    /// `D^alpha Gamma` in `x` or in `y`; zero for `t <= s`.
    pub fn gamma_derivative(&self, alpha: &MultiIndex, wrt: Wrt, xi: &GroupPoint, eta: &GroupPoint) -> Result<f64, KernelError> {
        self.check_points(xi, eta)?;
        if alpha.dim() != self.dim() {
            return Err(KernelError::Dimension {
                expected: self.dim(),
                got: alpha.dim(),
            });
        }
        if xi.t <= eta.t {
            return Ok(0.0);
        }
        let sl = self.slice(eta.t, xi.t)?;
        Ok(sl.derivative_xy(alpha, wrt, &xi.x, &eta.x))
    }

    /// `Y Gamma = -sum a_ij(t) d^2 Gamma / dx_i dx_j`.
    pub fn gamma_drift(&self, xi: &GroupPoint, eta: &GroupPoint) -> Result<f64, KernelError> {
        self.check_points(xi, eta)?;
        if xi.t <= eta.t {
            return Ok(0.0);
        }
        let sl = self.slice(eta.t, xi.t)?;
        Ok(sl.drift_xy(&self.coeffs.at(xi.t), &xi.x, &eta.x))
    }
}

type PolyCache = RwLock<HashMap<(MultiIndex, Wrt), Arc<Poly>>>;

/// Everything needed to evaluate `Gamma(., t; ., s)` for fixed `(t, s)`.
pub struct KernelSlice {
    cov: Covariance,
    /// `E(t - s)`.
    prop: DMatrix<f64>,
    /// `E(s - t)`.
    prop_inv: DMatrix<f64>,
    whitening: DMatrix<f64>,
    /// `W E(t - s)`.
    whitening_prop: DMatrix<f64>,
    log_norm: f64,
    cache: PolyCache,
}

impl fmt::Debug for KernelSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelSlice").field("cov", &self.cov).finish()
    }
}

impl KernelSlice {
    fn new(drift: &DriftStructure, cov: Covariance) -> Self {
        let n = cov.dim();
        let prop = drift.propagator(cov.gap);
        let prop_inv = drift.propagator(-cov.gap);
        let whitening = cov.whitening_matrix();
        let whitening_prop = &whitening * &prop;
        let log_norm = -0.5 * n as f64 * (4.0 * PI).ln() - 0.5 * cov.log_det;
        Self {
            cov,
            prop,
            prop_inv,
            whitening,
            whitening_prop,
            log_norm,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    pub fn propagator(&self) -> &DMatrix<f64> {
        &self.prop
    }

    /// `v = x - E(t-s) y`.
    pub fn offset(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        x - &self.prop * y
    }

    pub fn whiten_xy(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.cov.whiten(&self.offset(x, y))
    }

    /// Pole position `y` whose whitened offset from `x` is `w`.
    pub fn y_from_w(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.prop_inv * (x - self.cov.color(w))
    }

    /// `Gamma` as a function of the whitened offset.
    pub fn gamma_w(&self, w: &DVector<f64>) -> f64 {
        (self.log_norm - 0.25 * w.norm_squared()).exp()
    }

    pub fn gamma_xy(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.gamma_w(&self.whiten_xy(x, y))
    }

    /// Cached `P_alpha` with `D^alpha Gamma = P_alpha(w) Gamma`.
    pub fn poly(&self, alpha: &MultiIndex, wrt: Wrt) -> Arc<Poly> {
        let key = (alpha.clone(), wrt);
        if let Some(p) = self.cache.read().expect("poly cache poisoned").get(&key) {
            return Arc::clone(p);
        }
        let n = self.dim();
        let mut p = Poly::one(n);
        for (i, &ai) in alpha.0.iter().enumerate() {
            let dir: Vec<f64> = match wrt {
                Wrt::X => self.whitening.column(i).iter().copied().collect(),
                Wrt::Y => self.whitening_prop.column(i).iter().map(|c| -c).collect(),
            };
            for _ in 0..ai {
                p = p.apply_direction(&dir);
            }
        }
        let p = Arc::new(p);
        self.cache
            .write()
            .expect("poly cache poisoned")
            .entry(key)
            .or_insert_with(|| Arc::clone(&p));
        p
    }

    pub fn derivative_w(&self, alpha: &MultiIndex, wrt: Wrt, w: &DVector<f64>) -> f64 {
        self.poly(alpha, wrt).eval(w) * self.gamma_w(w)
    }

    pub fn derivative_xy(&self, alpha: &MultiIndex, wrt: Wrt, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.derivative_w(alpha, wrt, &self.whiten_xy(x, y))
    }

    /// Spatial Hessian `d^2 Gamma / dx_i dx_j` for `i, j < q`, from the
    /// closed form `(u_i u_j / 4 - (W^T W)_{ij} / 2) Gamma` with `u = W^T w`.
    pub fn hessian_q_w(&self, q: usize, w: &DVector<f64>) -> DMatrix<f64> {
        let wq = self.whitening.columns(0, q);
        let u = wq.transpose() * w;
        let g = self.gamma_w(w);
        let gram = wq.transpose() * wq;
        DMatrix::from_fn(q, q, |i, j| (0.25 * u[i] * u[j] - 0.5 * gram[(i, j)]) * g)
    }

    /// `-sum a_ij d^2 Gamma / dx_i dx_j` with the given `a`.
    pub fn drift_w(&self, a: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
        let h = self.hessian_q_w(a.nrows(), w);
        -a.component_mul(&h).sum()
    }

    pub fn drift_xy(&self, a: &DMatrix<f64>, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.drift_w(a, &self.whiten_xy(x, y))
    }
}

/// `∫ D_x^alpha Gamma(x,t;y,s) dy` by whitened quadrature; fails unless the
/// value is within `tol` of `1` (alpha = 0) or `0` (alpha != 0).
pub fn integral_identity(
    ctx: &KernelContext,
    alpha: &MultiIndex,
    x: &DVector<f64>,
    t: f64,
    s: f64,
    tol: f64,
) -> Result<f64, KernelError> {
    let value = derivative_integral(ctx, alpha, Wrt::X, x, t, s, ctx.hermite_order()?)?;
    let expected = if alpha.is_zero() { 1.0 } else { 0.0 };
    if (value - expected).abs() > tol {
        return Err(KernelError::Identity { value, expected, tol });
    }
    Ok(value)
}

/// `∫ D^alpha Gamma(x,t;y,s) dy`, integrating pointwise kernel values over
/// a Gauss-Hermite grid in the offset variable.
pub fn derivative_integral(
    ctx: &KernelContext,
    alpha: &MultiIndex,
    wrt: Wrt,
    x: &DVector<f64>,
    t: f64,
    s: f64,
    order: usize,
) -> Result<f64, KernelError> {
    let sl = ctx.slice(s, t)?;
    let factor = sl.covariance().factor() * std::f64::consts::SQRT_2;
    let zero = DVector::zeros(ctx.dim());
    let g = |v: &DVector<f64>| {
        let y = &sl.prop_inv * (x - v);
        sl.derivative_xy(alpha, wrt, x, &y)
    };
    Ok(whitened_space_integral(g, &zero, &factor, order)?)
}

/// Sampling parameters for [`bound_envelope`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSpec {
    pub samples: usize,
    pub seed: u64,
    /// Declared ellipticity constant used for the sandwich.
    pub nu: f64,
    /// Quasi-triangle constant for admissible mean-value triples.
    pub kappa_hat: f64,
    /// Pole times are drawn from this window.
    pub time_window: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub alpha: MultiIndex,
    pub samples: usize,
    pub nu: f64,
    /// `sup |D^alpha Gamma| d^{Q + omega}`.
    pub c_sup: f64,
    /// Same over the first half of the samples.
    pub c_sup_half: f64,
    pub mean_value_ratio: f64,
    pub mean_value_ratio_half: f64,
    pub admissible_triples: usize,
    /// Largest relative excess of `Gamma` over the sandwich bounds (<= 0
    /// when every sample is inside).
    pub worst_excess: f64,
}

const SANDWICH_SLACK: f64 = 1e-12;

/// Checks `nu^N Gamma_nu <= Gamma <= nu^{-N} Gamma_{1/nu}` and fits the
/// derivative and mean-value constants on random samples.
pub fn bound_envelope(ctx: &KernelContext, alpha: &MultiIndex, spec: &EnvelopeSpec) -> Result<EnvelopeReport, KernelError> {
    let n = ctx.dim();
    if alpha.dim() != n {
        return Err(KernelError::Dimension {
            expected: n,
            got: alpha.dim(),
        });
    }
    let ds = ctx.drift();
    let dil = ctx.dilation();
    let nu = spec.nu;
    let low_ctx = KernelContext::constant(ds.clone(), nu);
    let high_ctx = KernelContext::constant(ds.clone(), 1.0 / nu);
    let nu_n = nu.powi(n as i32);
    let hom = dil.homogeneous_dim() as f64 + alpha.order(dil) as f64;

    let mut rng = stream(spec.seed, 10);
    let mut c_sup: f64 = 0.0;
    let mut c_half: f64 = 0.0;
    let mut mv: f64 = 0.0;
    let mut mv_half: f64 = 0.0;
    let mut triples = 0usize;
    let mut violations = 0usize;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst: Option<(GroupPoint, GroupPoint, f64, f64, f64)> = None;
    let mut worst_violation = f64::NEG_INFINITY;
    let half = spec.samples / 2;

    for k in 0..spec.samples {
        let s = rng.random_range(spec.time_window.0..spec.time_window.1);
        let gap = rng.random_range((1e-3f64).ln()..(4.0f64).ln()).exp();
        let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let r = rng.random_range((0.05f64).ln()..(4.0f64).ln()).exp();
        let u = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0) * r);
        let eta = GroupPoint::new(y, s);
        let sl = ctx.slice(s, s + gap)?;
        let x = sl.propagator() * &eta.x + dil.scale(gap.sqrt(), &u);
        let xi = GroupPoint::new(x, s + gap);

        let g = sl.gamma_xy(&xi.x, &eta.x);
        let lower = nu_n * low_ctx.gamma(&xi, &eta)?;
        let upper = high_ctx.gamma(&xi, &eta)? / nu_n;
        let excess = ((lower - g) / lower.max(f64::MIN_POSITIVE)).max((g - upper) / upper.max(f64::MIN_POSITIVE));
        if excess > worst_excess {
            worst_excess = excess;
        }
        if g < lower * (1.0 - SANDWICH_SLACK) || g > upper * (1.0 + SANDWICH_SLACK) {
            violations += 1;
            if excess >= worst_violation {
                worst_violation = excess;
                worst = Some((xi.clone(), eta.clone(), g, lower, upper));
            }
        }

        let d = ds.dist(&xi, &eta);
        let dg = sl.derivative_xy(alpha, Wrt::X, &xi.x, &eta.x);
        let c = dg.abs() * d.powf(hom);
        c_sup = c_sup.max(c);
        if k < half {
            c_half = c_half.max(c);
        }

        let u2 = GroupPoint::new(
            DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            rng.random_range(-1.0..1.0),
        );
        let rho2 = ds.hom_norm(&u2);
        if rho2 > 0.0 {
            let eps = d / (4.0 * spec.kappa_hat * rho2) * rng.random_range(0.05..1.0);
            let xi2 = ds.compose_unchecked(&ds.dilate(eps, &u2)?, &xi);
            let d12 = ds.dist(&xi, &xi2);
            if d12 > 0.0 && d >= 4.0 * spec.kappa_hat * d12 {
                let dg2 = ctx.gamma_derivative(alpha, Wrt::X, &xi2, &eta)?;
                let ratio = (dg - dg2).abs() * d.powf(hom + 1.0) / d12;
                triples += 1;
                mv = mv.max(ratio);
                if k < half {
                    mv_half = mv_half.max(ratio);
                }
            }
        }
    }
    if let Some((xi, eta, gamma, lower, upper)) = worst {
        return Err(KernelError::Sandwich {
            count: violations,
            xi,
            eta,
            gamma,
            lower,
            upper,
        });
    }
    Ok(EnvelopeReport {
        alpha: alpha.clone(),
        samples: spec.samples,
        nu,
        c_sup,
        c_sup_half: c_half,
        mean_value_ratio: mv,
        mean_value_ratio_half: mv_half,
        admissible_triples: triples,
        worst_excess,
    })
}

/// Central-difference residual of `L Gamma(., eta)` at `xi`. Spatial steps
/// are `h * gap^{1/2}`, the drift step is `h * gap / 2`.
pub fn pde_residual(ctx: &KernelContext, xi: &GroupPoint, eta: &GroupPoint, h: f64) -> Result<f64, KernelError> {
    let gap = xi.t - eta.t;
    if !(gap > 0.0) {
        return Err(KernelError::NotForward { t: xi.t, s: eta.t });
    }
    let tau = 0.5 * h * gap;
    if !ctx.coeffs().is_constant_on(xi.t - tau, xi.t + tau) {
        return Err(KernelError::PieceCrossing(xi.t - tau, xi.t + tau));
    }
    let q = ctx.drift().q();
    let hx = h * gap.sqrt();
    let a = ctx.coeffs().at(xi.t);
    let g = |dx: &[(usize, f64)]| -> Result<f64, KernelError> {
        let mut p = xi.clone();
        for &(i, d) in dx {
            p.x[i] += d;
        }
        ctx.gamma(&p, eta)
    };
    let mut lg = 0.0;
    let g0 = g(&[])?;
    for i in 0..q {
        for j in 0..q {
            if a[(i, j)] == 0.0 {
                continue;
            }
            let d2 = if i == j {
                (g(&[(i, hx)])? - 2.0 * g0 + g(&[(i, -hx)])?) / (hx * hx)
            } else {
                (g(&[(i, hx), (j, hx)])? - g(&[(i, hx), (j, -hx)])? - g(&[(i, -hx), (j, hx)])? + g(&[(i, -hx), (j, -hx)])?)
                    / (4.0 * hx * hx)
            };
            lg += a[(i, j)] * d2;
        }
    }
    let fwd = GroupPoint::new(ctx.drift().propagator(-tau) * &xi.x, xi.t - tau);
    let bwd = GroupPoint::new(ctx.drift().propagator(tau) * &xi.x, xi.t + tau);
    lg += (ctx.gamma(&fwd, eta)? - ctx.gamma(&bwd, eta)?) / (2.0 * tau);
    Ok(lg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSlope {
    pub steps: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Least-squares slope of `log |residual|` against `log h`.
    pub slope: f64,
}

pub fn pde_residual_slope(ctx: &KernelContext, xi: &GroupPoint, eta: &GroupPoint, steps: &[f64]) -> Result<ResidualSlope, KernelError> {
    let residuals = steps
        .iter()
        .map(|&h| pde_residual(ctx, xi, eta, h).map(f64::abs))
        .collect::<Result<Vec<_>, _>>()?;
    let slope = loglog_slope(steps, &residuals);
    Ok(ResidualSlope {
        steps: steps.to_vec(),
        residuals,
        slope,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn kolmo() -> KernelContext {
        KernelContext::constant(DriftStructure::kolmogorov(1).unwrap(), 1.0)
    }

    fn c0_closed(t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[t, -t * t / 2.0, -t * t / 2.0, t * t * t / 3.0])
    }

    fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        let scale = b.amax();
        assert!((a - b).amax() <= tol * scale, "{a} vs {b}");
    }

    #[test]
    fn kolmogorov_covariance_closed_form() {
        let ctx = kolmo();
        for t in [0.1, 1.0, 5.0] {
            let c = ctx.covariance(0.0, t).unwrap();
            let m = c.matrix();
            let exact = c0_closed(t);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((m[(i, j)] - exact[(i, j)]).abs() <= 1e-13 * exact[(i, j)].abs(), "t={t}");
                }
            }
            assert!((c.det() - t.powi(4) / 12.0).abs() <= 1e-13 * t.powi(4) / 12.0);
        }
    }

    #[test]
    fn covariance_linear_in_coefficients() {
        let ds = DriftStructure::kolmogorov(3).unwrap();
        let one = KernelContext::constant(ds.clone(), 1.0).covariance(0.3, 1.7).unwrap().matrix();
        let two = KernelContext::constant(ds, 2.0).covariance(0.3, 1.7).unwrap().matrix();
        rel_close(&two, &(one * 2.0), 1e-14);
    }

    #[test]
    fn covariance_homogeneity() {
        for m in [vec![1, 1], vec![2, 1, 1], vec![1, 1, 1, 1]] {
            let ds = DriftStructure::chain(&m).unwrap();
            let ctx = KernelContext::constant(ds.clone(), 1.0);
            let c1 = ctx.covariance(0.0, 1.0).unwrap().matrix();
            for tau in [0.1f64, 1.0, 7.0] {
                let d = ds.dilation().matrix(tau.sqrt());
                let lhs = ctx.covariance(0.0, tau).unwrap().matrix();
                let rhs = &d * &c1 * &d;
                for i in 0..ds.dim() {
                    for j in 0..ds.dim() {
                        assert!((lhs[(i, j)] - rhs[(i, j)]).abs() <= 1e-12 * rhs[(i, j)].abs().max(1e-300));
                    }
                }
            }
        }
    }

    #[test]
    fn piecewise_covariance_matches_closed_form() {
        // a = 1 on (-inf, 1), 3 on [1, 2), 0.5 after
        let coeffs = TimeCoefficients::piecewise_scalar(1, vec![1.0, 2.0], &[1.0, 3.0, 0.5], 0.3).unwrap();
        let ctx = KernelContext::new(DriftStructure::kolmogorov(1).unwrap(), coeffs).unwrap();
        let (s, t) = (0.4, 2.6);
        let prim = |tau: f64| [tau, -tau * tau / 2.0, tau.powi(3) / 3.0];
        let mut c = [0.0; 3];
        for (lo, hi, a) in [(s, 1.0, 1.0), (1.0, 2.0, 3.0), (2.0, t, 0.5)] {
            let (p1, p2) = (prim(t - lo), prim(t - hi));
            for k in 0..3 {
                c[k] += a * (p1[k] - p2[k]);
            }
        }
        let exact = DMatrix::from_row_slice(2, 2, &[c[0], c[1], c[1], c[2]]);
        rel_close(&ctx.covariance(s, t).unwrap().matrix(), &exact, 1e-14);
        // callable with the same values agrees to the adaptive tolerance
        let f = TimeCoefficients::callable(1, 0.3, |t| {
            DMatrix::from_element(1, 1, if t < 1.0 { 1.0 } else if t < 2.0 { 3.0 } else { 0.5 })
        });
        let ctx2 = KernelContext::new(DriftStructure::kolmogorov(1).unwrap(), f).unwrap();
        rel_close(&ctx2.covariance(s, t).unwrap().matrix(), &exact, 1e-11);
    }

    #[test]
    fn covariance_errors() {
        let ctx = kolmo();
        assert!(matches!(ctx.covariance(1.0, 1.0), Err(KernelError::NotForward { .. })));
        let degenerate = TimeCoefficients::constant(1, 0.0);
        let ctx = KernelContext::new(DriftStructure::kolmogorov(1).unwrap(), degenerate).unwrap();
        assert!(matches!(ctx.covariance(0.0, 1.0), Err(KernelError::Factorization { .. })));
    }

    #[test]
    fn gamma_values() {
        let ctx = kolmo();
        let eta = GroupPoint::from_slice(&[0.3, -0.2], 0.5);
        assert_eq!(ctx.gamma(&GroupPoint::from_slice(&[0.0, 0.0], 0.5), &eta).unwrap(), 0.0);
        assert_eq!(ctx.gamma(&GroupPoint::from_slice(&[0.0, 0.0], 0.1), &eta).unwrap(), 0.0);
        let peak = ctx.drift().propagator(1.0) * &eta.x;
        let g = ctx.gamma(&GroupPoint::new(peak, 1.5), &eta).unwrap();
        assert_abs_diff_eq!(g, 3f64.sqrt() / (2.0 * PI), epsilon = 1e-15);
        // explicit-inverse oracle off the peak
        let xi = GroupPoint::from_slice(&[0.7, 1.1], 2.2);
        let c = c0_closed(1.7);
        let v = &xi.x - ctx.drift().propagator(1.7) * &eta.x;
        let inv = c.clone().try_inverse().unwrap();
        let oracle = (-0.25 * (v.transpose() * inv * &v)[(0, 0)]).exp() / (4.0 * PI * c.determinant().sqrt());
        assert!((ctx.gamma(&xi, &eta).unwrap() - oracle).abs() <= 1e-14 * oracle);
    }

    #[test]
    fn normalization_by_quadrature() {
        for m in [vec![1, 1], vec![2, 1, 1]] {
            let ctx = KernelContext::constant(DriftStructure::chain(&m).unwrap(), 1.0);
            let n = ctx.dim();
            let x = DVector::from_fn(n, |i, _| 0.3 * i as f64 - 0.4);
            let v = integral_identity(&ctx, &MultiIndex::zero(n), &x, 1.3, 0.2, 1e-8).unwrap();
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn vanishing_moments() {
        let ctx = kolmo();
        let x = DVector::from_vec(vec![0.2, -0.5]);
        for a in [MultiIndex::unit(2, 0), MultiIndex::unit(2, 1), MultiIndex::pair(2, 0, 1), MultiIndex::pair(2, 1, 1)] {
            integral_identity(&ctx, &a, &x, 0.9, 0.1, 1e-8).unwrap();
        }
        // drift derivative integrates to zero
        let sl = ctx.slice(0.1, 0.9).unwrap();
        let factor = sl.covariance().factor() * std::f64::consts::SQRT_2;
        let a = ctx.coeffs().at(0.9);
        let val = whitened_space_integral(
            |v| sl.drift_xy(&a, &x, &(&sl.prop_inv * (&x - v))),
            &DVector::zeros(2),
            &factor,
            20,
        )
        .unwrap();
        assert!(val.abs() < 1e-7);
        assert!(matches!(
            integral_identity(&ctx, &MultiIndex::zero(2), &x, 0.9, 0.1, -1.0),
            Err(KernelError::Identity { .. })
        ));
    }

    #[test]
    fn derivatives_at_peak() {
        let ctx = kolmo();
        let eta = GroupPoint::from_slice(&[0.1, 0.4], 0.0);
        let t = 0.8;
        let peak = GroupPoint::new(ctx.drift().propagator(t) * &eta.x, t);
        for i in 0..2 {
            let g = ctx.gamma_derivative(&MultiIndex::unit(2, i), Wrt::X, &peak, &eta).unwrap();
            assert!(g.abs() < 1e-14);
        }
        let gp = ctx.gamma(&peak, &eta).unwrap();
        let inv = c0_closed(t).try_inverse().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let h = ctx.gamma_derivative(&MultiIndex::pair(2, i, j), Wrt::X, &peak, &eta).unwrap();
                let expect = -0.5 * inv[(i, j)] * gp;
                assert!((h - expect).abs() <= 1e-12 * expect.abs(), "{i}{j}");
            }
        }
    }

    /// Tensor central-difference stencil for `D^alpha`, one Richardson step.
    fn fd_derivative(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, alpha: &[u32], steps: &[f64]) -> f64 {
        let stencil = |k: u32| -> Vec<(i32, f64)> {
            match k {
                0 => vec![(0, 1.0)],
                1 => vec![(-1, -0.5), (1, 0.5)],
                2 => vec![(-1, 1.0), (0, -2.0), (1, 1.0)],
                3 => vec![(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
                _ => unreachable!(),
            }
        };
        let level = |scale: f64| {
            let mut acc = 0.0;
            let mut combos: Vec<(Vec<i32>, f64)> = vec![(vec![], 1.0)];
            for &a in alpha {
                let mut next = Vec::new();
                for (c, w) in &combos {
                    for &(o, sw) in &stencil(a) {
                        let mut c2 = c.clone();
                        c2.push(o);
                        next.push((c2, w * sw));
                    }
                }
                combos = next;
            }
            for (offs, w) in combos {
                let mut p = x.clone();
                for (i, &o) in offs.iter().enumerate() {
                    p[i] += o as f64 * steps[i] * scale;
                }
                acc += w * f(&p);
            }
            let denom: f64 = alpha.iter().zip(steps).map(|(&a, h)| (h * scale).powi(a as i32)).product();
            acc / denom
        };
        let (d1, d2, d4) = (level(1.0), level(0.5), level(0.25));
        let r1 = (4.0 * d2 - d1) / 3.0;
        let r2 = (4.0 * d4 - d2) / 3.0;
        (16.0 * r2 - r1) / 15.0
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let ctx = kolmo();
        let eta = GroupPoint::from_slice(&[0.2, -0.3], 0.1);
        let t = 0.7;
        let gap = t - eta.t;
        let sl = ctx.slice(eta.t, t).unwrap();
        let x0 = sl.propagator() * &eta.x + ctx.dilation().scale(gap.sqrt(), &DVector::from_vec(vec![0.8, -0.6]));
        let steps: Vec<f64> = ctx.dilation().exponents().iter().map(|&q| 0.05 * gap.powf(0.5 * q as f64)).collect();
        for alpha in MultiIndex::all_up_to(2, 3) {
            for wrt in [Wrt::X, Wrt::Y] {
                let f = |p: &DVector<f64>| match wrt {
                    Wrt::X => sl.gamma_xy(p, &eta.x),
                    Wrt::Y => sl.gamma_xy(&x0, p),
                };
                let base = if wrt == Wrt::X { x0.clone() } else { eta.x.clone() };
                let fd = fd_derivative(&f, &base, &alpha.0, &steps);
                let an = sl.derivative_xy(&alpha, wrt, &x0, &eta.x);
                let floor = 1e-2 * sl.gamma_xy(&x0, &eta.x) * gap.powf(-0.5 * alpha.order(ctx.dilation()) as f64);
                let rel = (fd - an).abs() / an.abs().max(floor);
                assert!(rel < 1e-6, "{alpha} {wrt:?}: {an} vs {fd} ({rel})");
            }
        }
    }

    #[test]
    fn drift_derivative() {
        let ctx = kolmo();
        let eta = GroupPoint::from_slice(&[0.2, -0.3], 0.1);
        let xi = GroupPoint::from_slice(&[0.5, 0.4], 1.0);
        let y = ctx.gamma_drift(&xi, &eta).unwrap();
        let d11 = ctx.gamma_derivative(&MultiIndex::pair(2, 0, 0), Wrt::X, &xi, &eta).unwrap();
        assert_abs_diff_eq!(y, -d11, epsilon = 1e-15);
        // derivative along the integral curve (E(-h) x, t - h)
        let g = |h: f64| ctx.gamma(&GroupPoint::new(ctx.drift().propagator(-h) * &xi.x, xi.t - h), &eta).unwrap();
        let d = |h: f64| (g(h) - g(-h)) / (2.0 * h);
        let (d1, d2, d4) = (d(0.02), d(0.01), d(0.005));
        let r = (16.0 * (4.0 * d4 - d2) / 3.0 - (4.0 * d2 - d1) / 3.0) / 15.0;
        assert!((r - y).abs() <= 1e-6 * y.abs(), "{r} vs {y}");
    }

    #[test]
    fn covariance_ordering() {
        let coeffs = TimeCoefficients::piecewise_scalar(1, vec![0.5, 1.0, 1.5], &[0.5, 2.0, 1.0, 0.7], 0.5).unwrap();
        let ctx = KernelContext::new(DriftStructure::chain(&[1, 1, 1]).unwrap(), coeffs).unwrap();
        let base = KernelContext::constant(ctx.drift().clone(), 1.0);
        for (s, t) in [(0.0, 0.3), (0.2, 1.7), (-1.0, 3.0)] {
            let cinv = ctx.covariance(s, t).unwrap().matrix().try_inverse().unwrap();
            let c0inv = base.covariance(s, t).unwrap().matrix().try_inverse().unwrap();
            let nu = 0.5;
            let lo = (&cinv - &c0inv * nu).symmetric_eigenvalues().min() / cinv.norm();
            let hi = (&c0inv / nu - &cinv).symmetric_eigenvalues().min() / cinv.norm();
            assert!(lo >= -1e-12 && hi >= -1e-12);
        }
    }

    #[test]
    fn convolution_and_scaling() {
        let ds = DriftStructure::chain(&[2, 1, 1]).unwrap();
        let alpha = 1.7;
        let ctx = KernelContext::constant(ds.clone(), alpha);
        let origin = GroupPoint::origin(4);
        let xi = GroupPoint::from_slice(&[0.2, -0.1, 0.5, 0.3], 1.4);
        let eta = GroupPoint::from_slice(&[0.1, 0.4, -0.2, 0.6], 0.3);
        let direct = ctx.gamma(&xi, &eta).unwrap();
        let moved = ds.compose(&ds.invert(&eta).unwrap(), &xi).unwrap();
        let conv = ctx.gamma(&moved, &origin).unwrap();
        assert!((direct - conv).abs() <= 1e-12 * direct);
        let q = ds.dilation().homogeneous_dim() as i32;
        for lambda in [0.3f64, 2.5] {
            let scaled = ctx.gamma(&ds.dilate(lambda, &moved).unwrap(), &origin).unwrap();
            assert!((scaled - lambda.powi(-q) * conv).abs() <= 1e-12 * scaled);
        }
    }

    #[test]
    fn sandwich_equality_and_piecewise() {
        let ctx = kolmo();
        let spec = EnvelopeSpec {
            samples: 500,
            seed: 7,
            nu: 1.0,
            kappa_hat: 2.0,
            time_window: (-1.0, 1.0),
        };
        let r = bound_envelope(&ctx, &MultiIndex::unit(2, 0), &spec).unwrap();
        assert!(r.worst_excess.abs() < 1e-13);

        let coeffs = TimeCoefficients::piecewise_scalar(1, vec![-0.5, 0.0, 0.5], &[0.5, 2.0, 0.5, 2.0], 0.5).unwrap();
        let pw = KernelContext::new(DriftStructure::kolmogorov(1).unwrap(), coeffs).unwrap();
        let spec = EnvelopeSpec { nu: 0.5, ..spec };
        let r = bound_envelope(&pw, &MultiIndex::pair(2, 0, 0), &spec).unwrap();
        assert!(r.worst_excess <= 0.0);
        assert!(r.c_sup >= r.c_sup_half && r.c_sup.is_finite());
        assert!(r.admissible_triples > 0 && r.mean_value_ratio.is_finite());
        let broken = EnvelopeSpec { nu: 0.9, ..spec };
        assert!(matches!(
            bound_envelope(&pw, &MultiIndex::unit(2, 0), &broken),
            Err(KernelError::Sandwich { .. })
        ));
    }

    #[test]
    fn mean_value_numerator_vanishes_on_diagonal() {
        let ctx = kolmo();
        let eta = GroupPoint::from_slice(&[0.0, 0.0], 0.0);
        let xi = GroupPoint::from_slice(&[0.3, 0.1], 0.5);
        let a = MultiIndex::unit(2, 1);
        let d1 = ctx.gamma_derivative(&a, Wrt::X, &xi, &eta).unwrap();
        let d2 = ctx.gamma_derivative(&a, Wrt::X, &xi.clone(), &eta).unwrap();
        assert_eq!(d1 - d2, 0.0);
    }

    #[test]
    fn residual_converges_at_second_order() {
        let coeffs = TimeCoefficients::piecewise_scalar(1, vec![1.0], &[0.7, 1.8], 0.5).unwrap();
        let ctx = KernelContext::new(DriftStructure::kolmogorov(1).unwrap(), coeffs).unwrap();
        let eta = GroupPoint::from_slice(&[0.1, 0.2], 0.0);
        let xi = GroupPoint::from_slice(&[0.9, -0.3], 1.5);
        let r = pde_residual_slope(&ctx, &xi, &eta, &[0.2, 0.1, 0.05, 0.025]).unwrap();
        assert!(r.slope >= 1.9, "{r:?}");
        let near = GroupPoint::from_slice(&[0.9, -0.3], 1.05);
        assert!(matches!(pde_residual(&ctx, &near, &eta, 0.2), Err(KernelError::PieceCrossing(..))));
    }

    #[test]
    fn multi_index_parsing() {
        let a: MultiIndex = "1.0.2".parse().unwrap();
        assert_eq!(a, MultiIndex(vec![1, 0, 2]));
        assert_eq!(a.to_string(), "1.0.2");
        assert!("1.x".parse::<MultiIndex>().is_err());
        let d = crate::geometry::dilation_exponents(&[2, 1]).unwrap();
        assert_eq!(a.order(&d), 1 + 6);
        for b in MultiIndex::all_up_to(3, 3) {
            let w = b.order(&d);
            assert!(w >= b.length());
            assert_eq!(w == b.length(), b.0[2] == 0);
        }
        assert_eq!(MultiIndex::all_up_to(2, 3).len(), 9);
    }

    #[test]
    fn small_gap_is_stable() {
        let ctx = kolmo();
        let eta = GroupPoint::from_slice(&[1.0, 2.0], 3.0);
        for gap in [1e-6, 1e-12, 1e-20] {
            let t = eta.t + gap;
            let c = ctx.covariance_gap(t, gap).unwrap();
            rel_close(c.scaled_matrix(), &c0_closed(1.0), 1e-13);
            let sl = ctx.slice_gap(t, gap).unwrap();
            let peak = sl.propagator() * &eta.x;
            let g = sl.gamma_xy(&peak, &eta.x);
            let expect = 3f64.sqrt() / (2.0 * PI) / (gap * gap);
            assert!((g - expect).abs() <= 1e-12 * expect);
        }
        assert!(matches!(ctx.covariance_gap(0.0, 1e-250), Err(KernelError::Precision { .. })));
    }
}
