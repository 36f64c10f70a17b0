//! Cauchy and Duhamel solution operators, first- and second-derivative
//! representations (the operator `T_ij`), the cancellation integral and
//! manufactured solutions, for coefficients depending on time only.
//!
//! Space integrals against `Gamma(x,t;.,s)` use the offset `v = x - E(t-s) y`,
//! which is `N(0, 2C(t,s))` distributed under `Gamma dy`. With Gauss-Hermite
//! nodes `z` the whitened offset is `w = 2z`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, TimeCoefficients};
use crate::geometry::{DriftStructure, GroupPoint};
use crate::kernel::{KernelContext, KernelError, KernelSlice, MultiIndex, Wrt};
use crate::quadrature::{
    adaptive_gk15, cached_rule, for_each_tensor_node, graded_mesh, AdaptiveOptions, QuadratureError, RuleKind,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("need t > s, got t = {t}, s = {s}")]
    NotForward { t: f64, s: f64 },
    #[error("bad time window: tau = {tau}, horizon = {horizon}")]
    Window { tau: f64, horizon: f64 },
    #[error("point time {t} is beyond the horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },
    #[error("index ({i}, {j}) outside the diffusive block of size {q}")]
    Index { i: usize, j: usize, q: usize },
    #[error("source does not vanish at the support floor: f = {value} at t = {t}")]
    SourceSupport { t: f64, value: f64 },
    #[error("no convergence under refinement: {coarse} vs {fine}")]
    NonConvergence { coarse: f64, fine: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// `R^N x (tau, horizon)`; sources vanish for `t <= tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub tau: f64,
    pub horizon: f64,
}

impl TimeWindow {
    pub fn new(tau: f64, horizon: f64) -> Result<Self, SolverError> {
        if !(tau.is_finite() && horizon.is_finite() && tau < horizon) {
            return Err(SolverError::Window { tau, horizon });
        }
        Ok(Self { tau, horizon })
    }

    pub fn length(&self) -> f64 {
        self.horizon - self.tau
    }
}

type ScalarFn = Arc<dyn Fn(&DVector<f64>, f64) -> f64 + Send + Sync>;

/// A source term `f(x, t)` vanishing for `t <= tau`.
#[derive(Clone)]
pub struct SourceField {
    f: ScalarFn,
    /// Declared Hölder exponent in `x`.
    pub alpha: f64,
    /// Declared sup norm, if known.
    pub sup: Option<f64>,
}

impl std::fmt::Debug for SourceField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SourceField")
            .field("alpha", &self.alpha)
            .field("sup", &self.sup)
            .finish()
    }
}

impl SourceField {
    pub fn new<F>(alpha: f64, f: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            f: Arc::new(f),
            alpha,
            sup: None,
        }
    }

    pub fn with_sup(mut self, sup: f64) -> Self {
        self.sup = Some(sup);
        self
    }

    pub fn zero() -> Self {
        Self::new(1.0, |_, _| 0.0)
    }

    pub fn eval(&self, x: &DVector<f64>, t: f64) -> f64 {
        (self.f)(x, t)
    }
}

/// Discretization of the space-time integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub time_cells: usize,
    pub nodes_per_cell: usize,
    /// Mesh grade; `2/alpha` of the source when `None` for `T_ij`, `1`
    /// otherwise.
    pub grade: Option<f64>,
    pub hermite_order: Option<usize>,
    /// If set, repeat with doubled time cells and fail when results differ
    /// by more than this times `max(1, |value|)`.
    pub doubling_tol: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            time_cells: 32,
            nodes_per_cell: 4,
            grade: None,
            hermite_order: None,
            doubling_tol: None,
        }
    }
}

struct HermiteGrid {
    /// `(w = 2z, weight / pi^{N/2})`.
    nodes: Vec<(DVector<f64>, f64)>,
}

fn hermite_grid(ctx: &KernelContext, order: Option<usize>) -> Result<HermiteGrid, SolverError> {
    let n = ctx.dim();
    let order = match order {
        Some(o) => o,
        None => ctx.hermite_order()?,
    };
    let r = cached_rule(RuleKind::Hermite, order)?;
    let norm = PI.powf(-0.5 * n as f64);
    let mut nodes = Vec::with_capacity(order.pow(n as u32));
    for_each_tensor_node(&r, n, |z, w| {
        nodes.push((DVector::from_fn(n, |i, _| 2.0 * z[i]), w * norm));
    });
    Ok(HermiteGrid { nodes })
}

/// `∫_tau^t (∑_k W_k g(slice, s, w_k, y_k)) ds` on a graded mesh in `t - s`.
fn space_time<G>(ctx: &KernelContext, x: &DVector<f64>, t: f64, tau: f64, grade: f64, settings: &SolverSettings, g: G) -> Result<f64, SolverError>
where
    G: Fn(&KernelSlice, f64, &DVector<f64>, &DVector<f64>) -> f64,
{
    if !(t > tau) {
        return Ok(0.0);
    }
    let grid = hermite_grid(ctx, settings.hermite_order)?;
    let run = |cells: usize| -> Result<f64, SolverError> {
        let mesh = graded_mesh(tau, t, cells, grade)?;
        let mut total = 0.0;
        for (gap, wt) in mesh.gap_nodes_and_weights(settings.nodes_per_cell)? {
            let sl = ctx.slice_gap(t, gap)?;
            let s = t - gap;
            let inner: f64 = grid
                .nodes
                .iter()
                .map(|(w, c)| c * g(&sl, s, w, &sl.y_from_w(x, w)))
                .sum();
            total += wt * inner;
        }
        Ok(total)
    };
    let value = run(settings.time_cells)?;
    if let Some(tol) = settings.doubling_tol {
        let fine = run(2 * settings.time_cells)?;
        if (fine - value).abs() > tol * fine.abs().max(1.0) {
            return Err(SolverError::NonConvergence { coarse: value, fine });
        }
        return Ok(fine);
    }
    Ok(value)
}

fn check_window(window: &TimeWindow, xi: &GroupPoint, f: &SourceField) -> Result<(), SolverError> {
    if xi.t > window.horizon {
        return Err(SolverError::BeyondHorizon {
            t: xi.t,
            horizon: window.horizon,
        });
    }
    let value = f.eval(&xi.x, window.tau);
    if value.abs() > 1e-12 {
        return Err(SolverError::SourceSupport { t: window.tau, value });
    }
    Ok(())
}

fn check_index(ctx: &KernelContext, i: usize, j: usize) -> Result<(), SolverError> {
    let q = ctx.drift().q();
    if i >= q || j >= q {
        return Err(SolverError::Index { i, j, q });
    }
    Ok(())
}

/// `u(x,t) = ∫ Gamma(x,t;y,s) f(y) dy`.
pub fn cauchy_homogeneous<F>(ctx: &KernelContext, f: F, s: f64, xi: &GroupPoint, settings: &SolverSettings) -> Result<f64, SolverError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if !(xi.t > s) {
        return Err(SolverError::NotForward { t: xi.t, s });
    }
    let sl = ctx.slice(s, xi.t)?;
    let eval = |order: Option<usize>| -> Result<f64, SolverError> {
        let grid = hermite_grid(ctx, order)?;
        Ok(grid.nodes.iter().map(|(w, c)| c * f(&sl.y_from_w(&xi.x, w))).sum())
    };
    let order = match settings.hermite_order {
        Some(o) => o,
        None => ctx.hermite_order()?,
    };
    let value = eval(Some(order))?;
    if let Some(tol) = settings.doubling_tol {
        let fine = eval(Some(2 * order))?;
        if (fine - value).abs() > tol * fine.abs().max(1.0) {
            return Err(SolverError::NonConvergence { coarse: value, fine });
        }
        return Ok(fine);
    }
    Ok(value)
}

/// `sup_grid |u(x, s + eps) - f(x)|` for each `eps`.
pub fn initial_trace_error<F>(ctx: &KernelContext, f: F, s: f64, eps: &[f64], grid: &[DVector<f64>], settings: &SolverSettings) -> Result<Vec<f64>, SolverError>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    eps.iter()
        .map(|&e| {
            let errs: Vec<f64> = grid
                .par_iter()
                .map(|x| {
                    let u = cauchy_homogeneous(ctx, &f, s, &GroupPoint::new(x.clone(), s + e), settings)?;
                    Ok((u - f(x)).abs())
                })
                .collect::<Result<_, SolverError>>()?;
            Ok(errs.into_iter().fold(0.0, f64::max))
        })
        .collect()
}

/// `u(x,t) = -∫_tau^t ∫ Gamma(x,t;y,s) f(y,s) dy ds`.
pub fn duhamel(ctx: &KernelContext, f: &SourceField, window: &TimeWindow, xi: &GroupPoint, settings: &SolverSettings) -> Result<f64, SolverError> {
    check_window(window, xi, f)?;
    let grade = settings.grade.unwrap_or(1.0);
    let v = space_time(ctx, &xi.x, xi.t, window.tau, grade, settings, |_, s, _, y| f.eval(y, s))?;
    Ok(-v)
}

/// `d u / d x_i = -∫∫ d Gamma / d x_i f dy ds`, `i < q`.
pub fn first_derivative(
    ctx: &KernelContext,
    f: &SourceField,
    window: &TimeWindow,
    xi: &GroupPoint,
    i: usize,
    settings: &SolverSettings,
) -> Result<f64, SolverError> {
    check_window(window, xi, f)?;
    check_index(ctx, i, i)?;
    let alpha = MultiIndex::unit(ctx.dim(), i);
    let grade = settings.grade.unwrap_or(1.0);
    let v = space_time(ctx, &xi.x, xi.t, window.tau, grade, settings, |sl, s, w, y| {
        sl.poly(&alpha, Wrt::X).eval(w) * f.eval(y, s)
    })?;
    Ok(-v)
}

/// `T_ij f(x,t) = ∫∫ d^2 Gamma / dx_i dx_j [f(E(s-t)x, s) - f(y,s)] dy ds`.
pub fn second_derivative(
    ctx: &KernelContext,
    f: &SourceField,
    window: &TimeWindow,
    xi: &GroupPoint,
    i: usize,
    j: usize,
    settings: &SolverSettings,
) -> Result<f64, SolverError> {
    check_window(window, xi, f)?;
    check_index(ctx, i, j)?;
    let alpha = MultiIndex::pair(ctx.dim(), i, j);
    let grade = settings.grade.unwrap_or(2.0 / f.alpha);
    let zero = DVector::zeros(ctx.dim());
    space_time(ctx, &xi.x, xi.t, window.tau, grade, settings, |sl, s, w, y| {
        let frozen = f.eval(&sl.y_from_w(&xi.x, &zero), s);
        sl.poly(&alpha, Wrt::X).eval(w) * (frozen - f.eval(y, s))
    })
}

/// `∫_tau^t ∫ |d^2 Gamma / dx_i dx_j| ||E(s-t)x - y||^alpha dy ds`.
pub fn integrability_integral(
    ctx: &KernelContext,
    xi: &GroupPoint,
    tau: f64,
    i: usize,
    j: usize,
    alpha: f64,
    settings: &SolverSettings,
) -> Result<f64, SolverError> {
    check_index(ctx, i, j)?;
    let mi = MultiIndex::pair(ctx.dim(), i, j);
    let grade = settings.grade.unwrap_or(2.0 / alpha);
    let dil = ctx.dilation().clone();
    let zero = DVector::zeros(ctx.dim());
    space_time(ctx, &xi.x, xi.t, tau, grade, settings, |sl, _, w, y| {
        let centre = sl.y_from_w(&xi.x, &zero);
        sl.poly(&mi, Wrt::X).eval(w).abs() * dil.quasi_norm(&(centre - y)).powf(alpha)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityProfile {
    pub lengths: Vec<f64>,
    pub values: Vec<f64>,
    /// Log-log slope of `values` against `lengths`; `alpha / 2` expected.
    pub slope: f64,
    /// `max values / lengths^{alpha/2}`.
    pub c_fit: f64,
}

pub fn integrability_profile(
    ctx: &KernelContext,
    xi: &GroupPoint,
    lengths: &[f64],
    i: usize,
    j: usize,
    alpha: f64,
    settings: &SolverSettings,
) -> Result<IntegrabilityProfile, SolverError> {
    let values = lengths
        .iter()
        .map(|&l| integrability_integral(ctx, xi, xi.t - l, i, j, alpha, settings))
        .collect::<Result<Vec<_>, _>>()?;
    let slope = crate::kernel::loglog_slope(lengths, &values);
    let c_fit = values
        .iter()
        .zip(lengths)
        .map(|(v, l)| v / l.powf(0.5 * alpha))
        .fold(0.0, f64::max);
    Ok(IntegrabilityProfile {
        lengths: lengths.to_vec(),
        values,
        slope,
        c_fit,
    })
}

/// `∫_tau^t ∫ |d Gamma / dx_i| dy ds / sqrt(t - tau)`: the sharp constant in
/// `|d u / dx_i| <= c ||f||_inf sqrt(t - tau)`.
pub fn first_derivative_sharp_constant(ctx: &KernelContext, xi: &GroupPoint, tau: f64, i: usize, settings: &SolverSettings) -> Result<f64, SolverError> {
    check_index(ctx, i, i)?;
    let alpha = MultiIndex::unit(ctx.dim(), i);
    let grade = settings.grade.unwrap_or(2.0);
    let v = space_time(ctx, &xi.x, xi.t, tau, grade, settings, |sl, _, w, _| sl.poly(&alpha, Wrt::X).eval(w).abs())?;
    Ok(v / (xi.t - tau).sqrt())
}

/// Adaptive settings for the cancellation integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CancellationSettings {
    pub rel_tol: f64,
    /// Whitened half-width beyond which the region `{d < r}` holds the whole
    /// Gaussian mass and the inner integral is taken as 0.
    pub saturation: f64,
}

impl Default for CancellationSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            saturation: 40.0,
        }
    }
}

/// Adaptive GK15 over `[a, b]` after splitting at `a + h 2^k`, so features of
/// width `h` near `a` are resolved.
fn presplit_integral<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, h: f64, opts: AdaptiveOptions) -> Result<f64, SolverError> {
    let mut cuts = vec![a];
    let mut c = h;
    while a + c < b && c > 0.0 {
        cuts.push(a + c);
        c *= 2.0;
    }
    cuts.push(b);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += adaptive_gk15(&mut f, w[0], w[1], opts)?.value;
    }
    Ok(total)
}

/// `∫_{d((x,t),(y,s)) >= r} d^2 Gamma / dx_i dx_j (x,t;y,s) dy`, computed as
/// minus the integral over the quasi-ball `{||v|| < r - sqrt(t-s)}`.
/// With time-only coefficients the value does not depend on `x`.
pub fn cancellation_inner(
    ctx: &KernelContext,
    _x: &DVector<f64>,
    t: f64,
    s: f64,
    r: f64,
    i: usize,
    j: usize,
    settings: &CancellationSettings,
) -> Result<f64, SolverError> {
    check_index(ctx, i, j)?;
    if !(t > s) {
        return Ok(0.0);
    }
    let sigma = t - s;
    let rho = r - sigma.sqrt();
    if rho <= 0.0 {
        return Ok(0.0);
    }
    let sl = ctx.slice(s, t)?;
    let n = ctx.dim();
    let exps: Vec<i32> = ctx.dilation().exponents().iter().map(|&q| q as i32).collect();
    let c = sl.covariance().matrix();
    let reach = (0..n)
        .map(|k| (rho / n as f64).powi(exps[k]) / (2.0 * c[(k, k)]).sqrt())
        .fold(f64::INFINITY, f64::min);
    if reach > settings.saturation {
        return Ok(0.0);
    }
    let alpha = MultiIndex::pair(n, i, j);
    let poly = sl.poly(&alpha, Wrt::X);
    // natural width of the kernel in root coordinates u_k = |v_k|^{1/q_k}
    let widths: Vec<f64> = (0..n).map(|k| (2.0 * c[(k, k)]).sqrt().powf(1.0 / exps[k] as f64)).collect();
    let scale = 1.0 / sigma;
    let opts = AdaptiveOptions {
        abs_tol: settings.rel_tol * 1e-3 * scale,
        rel_tol: settings.rel_tol,
        max_depth: 30,
    };

    let mut total = 0.0;
    for signs in 0..(1u32 << n) {
        let sgn: Vec<f64> = (0..n).map(|k| if signs >> k & 1 == 1 { -1.0 } else { 1.0 }).collect();
        let mut u = vec![0.0; n];
        total += simplex_level(0, rho, &mut u, &sgn, &exps, &widths, opts, &|u: &[f64]| {
            let v = DVector::from_fn(n, |k, _| sgn[k] * u[k].powi(exps[k]));
            let jac: f64 = (0..n).map(|k| exps[k] as f64 * u[k].powi(exps[k] - 1)).product();
            let w = sl.covariance().whiten(&v);
            poly.eval(&w) * sl.gamma_w(&w) * jac
        })?;
    }
    Ok(-total)
}

#[allow(clippy::too_many_arguments)]
fn simplex_level(
    k: usize,
    left: f64,
    u: &mut Vec<f64>,
    sgn: &[f64],
    exps: &[i32],
    widths: &[f64],
    opts: AdaptiveOptions,
    g: &dyn Fn(&[f64]) -> f64,
) -> Result<f64, SolverError> {
    let n = u.len();
    if left <= 0.0 {
        return Ok(0.0);
    }
    let h = (0.25 * widths[k]).min(left);
    let mut err: Option<SolverError> = None;
    let value = presplit_integral(
        |uk| {
            if err.is_some() {
                return 0.0;
            }
            u[k] = uk;
            if k + 1 == n {
                g(u)
            } else {
                let mut inner = u.clone();
                match simplex_level(k + 1, left - uk, &mut inner, sgn, exps, widths, opts, g) {
                    Ok(v) => v,
                    Err(e) => {
                        err = Some(e);
                        0.0
                    }
                }
            }
        },
        0.0,
        left,
        h,
        opts,
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(value),
    }
}

/// `I_{r,tau}(x,t) = ∫_tau^t |∫_{d >= r} d^2 Gamma / dx_i dx_j dy| ds`.
/// Only `s > t - r^2` contributes.
#[allow(clippy::too_many_arguments)]
pub fn cancellation_integral(
    ctx: &KernelContext,
    x: &DVector<f64>,
    t: f64,
    tau: f64,
    r: f64,
    i: usize,
    j: usize,
    settings: &CancellationSettings,
) -> Result<f64, SolverError> {
    check_index(ctx, i, j)?;
    let len = (t - tau).min(r * r);
    if !(len > 0.0) {
        return Ok(0.0);
    }
    let mut err: Option<SolverError> = None;
    // theta = sigma / r^2
    let top = len / (r * r);
    let opts = AdaptiveOptions {
        abs_tol: settings.rel_tol * 1e-3,
        rel_tol: settings.rel_tol * 10.0,
        max_depth: 30,
    };
    let value = presplit_integral(
        |theta| {
            if err.is_some() || theta <= 0.0 {
                return 0.0;
            }
            let sigma = theta * r * r;
            match cancellation_inner(ctx, x, t, t - sigma, r, i, j, settings) {
                Ok(v) => v.abs() * r * r,
                Err(e) => {
                    err = Some(e);
                    0.0
                }
            }
        },
        0.0,
        top,
        1e-4 * top,
        opts,
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(value),
    }
}

/// Analytic test function with derivatives, used as a manufactured solution.
pub trait ManufacturedSolution: Send + Sync {
    fn dim(&self) -> usize;
    /// `u(., t) = 0` for `t <= tau`.
    fn tau(&self) -> f64;
    fn u(&self, x: &DVector<f64>, t: f64) -> f64;
    fn grad(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64>;
    fn dt(&self, x: &DVector<f64>, t: f64) -> f64;
    /// Sup of `|u|`, if known.
    fn sup(&self) -> f64;

    /// `Yu = <Bx, grad u> - du/dt`.
    fn yu(&self, drift: &DriftStructure, x: &DVector<f64>, t: f64) -> f64 {
        (drift.matrix() * x).dot(&self.grad(x, t)) - self.dt(x, t)
    }

    /// `Lu = sum a_ij d^2 u + Yu`.
    fn lu(&self, drift: &DriftStructure, a: &dyn CoefficientField, x: &DVector<f64>, t: f64) -> f64 {
        let q = drift.q();
        let am = a.eval(x, t);
        let h = self.hessian(x, t);
        let mut s = 0.0;
        for i in 0..q {
            for j in 0..q {
                s += am[(i, j)] * h[(i, j)];
            }
        }
        s + self.yu(drift, x, t)
    }
}

/// `u(x,t) = A (t - tau)_+^2 prod_k exp(-(x_k - c_k)^2 / (2 w_k^2)) cos(omega_k (x_k - c_k))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpSolution {
    pub tau: f64,
    pub amplitude: f64,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    pub freqs: Vec<f64>,
}

impl BumpSolution {
    /// Gaussian bump, no oscillation.
    pub fn gaussian(tau: f64, amplitude: f64, centers: Vec<f64>, widths: Vec<f64>) -> Self {
        let n = centers.len();
        Self {
            tau,
            amplitude,
            centers,
            widths,
            freqs: vec![0.0; n],
        }
    }

    fn phi(&self, t: f64) -> (f64, f64) {
        let d = (t - self.tau).max(0.0);
        (self.amplitude * d * d, 2.0 * self.amplitude * d)
    }

    /// `(g, g', g'')` of the one-dimensional factor `k`.
    fn factor(&self, k: usize, x: f64) -> (f64, f64, f64) {
        let z = x - self.centers[k];
        let w2 = self.widths[k] * self.widths[k];
        let om = self.freqs[k];
        let e = (-0.5 * z * z / w2).exp();
        let (c, s) = ((om * z).cos(), (om * z).sin());
        let g = e * c;
        let g1 = e * (-z / w2 * c - om * s);
        let g2 = e * ((z * z / (w2 * w2) - 1.0 / w2 - om * om) * c + 2.0 * om * z / w2 * s);
        (g, g1, g2)
    }

    fn factors(&self, x: &DVector<f64>) -> Vec<(f64, f64, f64)> {
        (0..self.centers.len()).map(|k| self.factor(k, x[k])).collect()
    }

    /// Source `Lu` for the given drift and coefficients.
    pub fn source(&self, drift: &DriftStructure, coeffs: &TimeCoefficients) -> SourceField {
        let me = self.clone();
        let drift = drift.clone();
        let coeffs = coeffs.clone();
        SourceField::new(1.0, move |x, t| me.lu(&drift, &coeffs, x, t))
    }
}

impl ManufacturedSolution for BumpSolution {
    fn dim(&self) -> usize {
        self.centers.len()
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn u(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.phi(t).0 * self.factors(x).iter().map(|f| f.0).product::<f64>()
    }

    fn grad(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let f = self.factors(x);
        let p = self.phi(t).0;
        DVector::from_fn(f.len(), |k, _| {
            p * f.iter().enumerate().map(|(l, fl)| if l == k { fl.1 } else { fl.0 }).product::<f64>()
        })
    }

    fn hessian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let f = self.factors(x);
        let p = self.phi(t).0;
        let n = f.len();
        DMatrix::from_fn(n, n, |i, j| {
            p * f
                .iter()
                .enumerate()
                .map(|(l, fl)| {
                    if i == j && l == i {
                        fl.2
                    } else if l == i || l == j {
                        fl.1
                    } else {
                        fl.0
                    }
                })
                .product::<f64>()
        })
    }

    fn dt(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.phi(t).1 * self.factors(x).iter().map(|f| f.0).product::<f64>()
    }

    fn sup(&self) -> f64 {
        // factors are bounded by 1
        let (p, _) = self.phi(f64::MAX.sqrt());
        if p.is_finite() {
            p
        } else {
            f64::INFINITY
        }
    }
}

/// Rectangular space grid at a list of times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(rename = "box")]
    pub bounds: Vec<[f64; 2]>,
    pub points_per_axis: usize,
    pub times: Vec<f64>,
}

impl GridSpec {
    pub fn space_points(&self) -> Vec<DVector<f64>> {
        let n = self.bounds.len();
        let k = self.points_per_axis.max(1);
        let coord = |axis: usize, idx: usize| {
            let [lo, hi] = self.bounds[axis];
            if k == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * idx as f64 / (k - 1) as f64
            }
        };
        let total = k.pow(n as u32);
        (0..total)
            .map(|mut flat| {
                DVector::from_fn(n, |axis, _| {
                    let idx = flat % k;
                    flat /= k;
                    coord(axis, idx)
                })
            })
            .collect()
    }

    pub fn points(&self) -> Vec<GroupPoint> {
        let space = self.space_points();
        self.times
            .iter()
            .flat_map(|&t| space.iter().map(move |x| GroupPoint::new(x.clone(), t)))
            .collect()
    }
}

/// Evaluates `op` at every point in parallel, keeping the input order.
pub fn on_points<F>(points: &[GroupPoint], op: F) -> Result<Vec<f64>, SolverError>
where
    F: Fn(&GroupPoint) -> Result<f64, SolverError> + Sync + Send,
{
    points.par_iter().map(|p| op(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn kolmo() -> KernelContext {
        KernelContext::constant(DriftStructure::kolmogorov(1).unwrap(), 1.0)
    }

    fn bump() -> BumpSolution {
        BumpSolution {
            tau: 0.0,
            amplitude: 1.0,
            centers: vec![0.1, -0.2],
            widths: vec![0.8, 0.9],
            freqs: vec![0.7, 0.0],
        }
    }

    fn interior() -> Vec<GroupPoint> {
        let mut pts = Vec::new();
        for &a in &[-0.6, 0.0, 0.5] {
            for &b in &[-0.5, 0.2, 0.7] {
                pts.push(GroupPoint::from_slice(&[a, b], 0.8));
            }
        }
        pts
    }

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let u = bump();
        let x = DVector::from_vec(vec![0.3, -0.4]);
        let t = 0.6;
        let h = 1e-4;
        let e = |k: usize| DVector::from_fn(2, |i, _| if i == k { h } else { 0.0 });
        let g = u.grad(&x, t);
        let hs = u.hessian(&x, t);
        for k in 0..2 {
            let fd = (u.u(&(&x + e(k)), t) - u.u(&(&x - e(k)), t)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "grad {k}");
            for l in 0..2 {
                let fd = (u.grad(&(&x + e(l)), t)[k] - u.grad(&(&x - e(l)), t)[k]) / (2.0 * h);
                assert!((fd - hs[(k, l)]).abs() < 1e-6, "hess {k}{l}");
            }
        }
        let fd = (u.u(&x, t + h) - u.u(&x, t - h)) / (2.0 * h);
        assert!((fd - u.dt(&x, t)).abs() < 1e-6);
        assert_eq!(u.u(&x, -0.1), 0.0);
    }

    #[test]
    fn cauchy_examples() {
        let ctx = kolmo();
        let st = SolverSettings::default();
        let xi = GroupPoint::from_slice(&[0.4, -1.2], 0.9);
        assert_abs_diff_eq!(cauchy_homogeneous(&ctx, |_| 1.0, 0.0, &xi, &st).unwrap(), 1.0, epsilon = 1e-8);
        let m = cauchy_homogeneous(&ctx, |y| y[1], 0.0, &xi, &st).unwrap();
        assert_abs_diff_eq!(m, -1.2 + 0.9 * 0.4, epsilon = 1e-12);
        assert!(matches!(
            cauchy_homogeneous(&ctx, |_| 1.0, 1.0, &xi, &st),
            Err(SolverError::NotForward { .. })
        ));
    }

    #[test]
    fn cauchy_solves_the_equation() {
        let ctx = kolmo();
        let st = SolverSettings::default();
        // wider than the kernel at t = 0.7, so the default order resolves it
        let f = |y: &DVector<f64>| (-(y[0] * y[0] + (y[1] - 0.3).powi(2)) / 4.0).exp();
        let u = |x: f64, y: f64, t: f64| cauchy_homogeneous(&ctx, f, 0.0, &GroupPoint::from_slice(&[x, y], t), &st).unwrap();
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for &(x, y) in &[(0.0, 0.0), (0.5, -0.3), (-0.4, 0.6)] {
            let t = 0.7;
            let uxx = (u(x + h, y, t) - 2.0 * u(x, y, t) + u(x - h, y, t)) / (h * h);
            let uy = (u(x, y + h, t) - u(x, y - h, t)) / (2.0 * h);
            let ut = (u(x, y, t + h) - u(x, y, t - h)) / (2.0 * h);
            worst = worst.max((uxx + x * uy - ut).abs());
        }
        println!("cauchy residual {worst:e}");
        assert!(worst <= 1e-4);
    }

    #[test]
    fn initial_trace() {
        let ctx = kolmo();
        let st = SolverSettings::default();
        let grid: Vec<DVector<f64>> = (0..7)
            .flat_map(|i| (0..7).map(move |j| DVector::from_vec(vec![-1.5 + 0.5 * i as f64, -1.5 + 0.5 * j as f64])))
            .collect();
        let eps = [1e-1, 1e-2, 1e-3, 1e-4];
        let c = initial_trace_error(&ctx, |_| 2.5, 0.0, &eps, &grid, &st).unwrap();
        assert!(c.iter().all(|&e| e <= 1e-8));
        let bump = |y: &DVector<f64>| (1.0 - y.norm_squared()).max(0.0).powi(2);
        let e = initial_trace_error(&ctx, bump, 0.0, &eps, &grid, &st).unwrap();
        println!("trace {e:?}");
        assert!(e.windows(2).all(|w| w[1] < w[0]));
        assert!(e[3] <= 1e-3);
    }

    #[test]
    fn duhamel_examples() {
        let ctx = kolmo();
        let st = SolverSettings::default();
        let window = TimeWindow::new(0.0, 1.0).unwrap();
        // g(s) = sin(2 s), f = -g'(s) for s > 0
        let f = SourceField::new(1.0, |_, s| if s > 0.0 { -2.0 * (2.0 * s).cos() } else { 0.0 });
        let xi = GroupPoint::from_slice(&[0.3, 0.2], 0.9);
        let u = duhamel(&ctx, &f, &window, &xi, &st).unwrap();
        assert_abs_diff_eq!(u, (1.8f64).sin(), epsilon = 1e-8);
        let z = SourceField::zero();
        assert_eq!(duhamel(&ctx, &z, &window, &xi, &st).unwrap(), 0.0);
        assert_eq!(first_derivative(&ctx, &z, &window, &xi, 0, &st).unwrap(), 0.0);
        assert_eq!(second_derivative(&ctx, &z, &window, &xi, 0, 0, &st).unwrap(), 0.0);
        let d = first_derivative(&ctx, &f, &window, &xi, 0, &st).unwrap();
        assert!(d.abs() <= 1e-8);
        let t = second_derivative(&ctx, &f, &window, &xi, 0, 0, &st).unwrap();
        assert!(t.abs() <= 1e-8);
        let late = GroupPoint::from_slice(&[0.0, 0.0], 1.5);
        assert!(matches!(duhamel(&ctx, &f, &window, &late, &st), Err(SolverError::BeyondHorizon { .. })));
        let bad = SourceField::new(1.0, |_, _| 1.0);
        assert!(matches!(duhamel(&ctx, &bad, &window, &xi, &st), Err(SolverError::SourceSupport { .. })));
        assert!(matches!(
            first_derivative(&ctx, &f, &window, &xi, 1, &st),
            Err(SolverError::Index { .. })
        ));
    }

    #[test]
    fn manufactured_round_trip() {
        let ctx = kolmo();
        let st = SolverSettings::default();
        let u = bump();
        let f = u.source(ctx.drift(), ctx.coeffs());
        let window = TimeWindow::new(0.0, 1.0).unwrap();
        let (mut e0, mut e1, mut e2) = (0.0f64, 0.0f64, 0.0f64);
        let (mut s0, mut s1, mut s2) = (0.0f64, 0.0f64, 0.0f64);
        for xi in interior() {
            let d = duhamel(&ctx, &f, &window, &xi, &st).unwrap();
            let d1 = first_derivative(&ctx, &f, &window, &xi, 0, &st).unwrap();
            let d2 = second_derivative(&ctx, &f, &window, &xi, 0, 0, &st).unwrap();
            e0 = e0.max((d - u.u(&xi.x, xi.t)).abs());
            e1 = e1.max((d1 - u.grad(&xi.x, xi.t)[0]).abs());
            e2 = e2.max((d2 - u.hessian(&xi.x, xi.t)[(0, 0)]).abs());
            s0 = s0.max(u.u(&xi.x, xi.t).abs());
            s1 = s1.max(u.grad(&xi.x, xi.t)[0].abs());
            s2 = s2.max(u.hessian(&xi.x, xi.t)[(0, 0)].abs());
        }
        println!("round trip {e0:e}/{s0} {e1:e}/{s1} {e2:e}/{s2}");
        assert!(e0 <= 1e-3 * s0);
        assert!(e1 <= 1e-4);
        assert!(e2 <= 5e-3);
    }

    #[test]
    fn first_derivative_matches_fd_of_duhamel() {
        let ctx = kolmo();
        let st = SolverSettings::default();
        let f = bump().source(ctx.drift(), ctx.coeffs());
        let window = TimeWindow::new(0.0, 1.0).unwrap();
        let h = 1e-3;
        for xi in interior().into_iter().step_by(2) {
            let mut p = xi.clone();
            let mut m = xi.clone();
            p.x[1] += h;
            m.x[1] -= h;
            let fd = (duhamel(&ctx, &f, &window, &p, &st).unwrap() - duhamel(&ctx, &f, &window, &m, &st).unwrap()) / (2.0 * h);
            let d = first_derivative(&ctx, &f, &window, &xi, 1, &st);
            assert!(matches!(d, Err(SolverError::Index { .. })));
            p = xi.clone();
            m = xi.clone();
            p.x[0] += h;
            m.x[0] -= h;
            let fd0 = (duhamel(&ctx, &f, &window, &p, &st).unwrap() - duhamel(&ctx, &f, &window, &m, &st).unwrap()) / (2.0 * h);
            let d0 = first_derivative(&ctx, &f, &window, &xi, 0, &st).unwrap();
            assert!((fd0 - d0).abs() <= 1e-4, "{fd0} {d0}");
            assert!(fd.is_finite());
        }
    }

    #[test]
    fn rough_source_is_stable_under_doubling() {
        let ctx = kolmo();
        let dil = ctx.dilation().clone();
        let f = SourceField::new(0.5, move |y, s| if s > 0.0 { dil.quasi_norm(y).sqrt() * s } else { 0.0 });
        let window = TimeWindow::new(0.0, 1.0).unwrap();
        let xi = GroupPoint::from_slice(&[0.2, 0.1], 0.7);
        let st = SolverSettings::default();
        let a = second_derivative(&ctx, &f, &window, &xi, 0, 0, &st).unwrap();
        let b = second_derivative(&ctx, &f, &window, &xi, 0, 0, &SolverSettings { time_cells: 64, ..st }).unwrap();
        println!("rough {a} {b}");
        assert!(a.is_finite());
        assert!((a - b).abs() <= 1e-3 * b.abs().max(1.0));
    }

    #[test]
    fn cancellation_parabolic_oracle() {
        let ctx = KernelContext::constant(DriftStructure::parabolic(1).unwrap(), 1.0);
        let st = CancellationSettings::default();
        let x = DVector::from_element(1, 0.3);
        let r = 0.7;
        let t = 2.0;
        let g = |rho: f64, sigma: f64| (-rho * rho / (4.0 * sigma)).exp() / (4.0 * PI * sigma).sqrt();
        for sigma in [1e-4, 1e-2, 0.1, 0.3, 0.45] {
            let inner = cancellation_inner(&ctx, &x, t, t - sigma, r, 0, 0, &st).unwrap();
            let rho = r - sigma.sqrt();
            let exact = rho / sigma * g(rho, sigma);
            println!("inner {sigma} {inner:e} {exact:e}");
            assert!((inner - exact).abs() <= 1e-6 * exact.abs().max(1e-300) || (inner - exact).abs() < 1e-12);
        }
        let total = cancellation_integral(&ctx, &x, t, 0.0, r, 0, 0, &st).unwrap();
        let oracle = adaptive_gk15(
            |s: f64| {
                let rho = r - s.sqrt();
                rho / s * g(rho, s)
            },
            0.0,
            r * r,
            AdaptiveOptions {
                abs_tol: 1e-14,
                rel_tol: 1e-12,
                max_depth: 50,
            },
        )
        .unwrap()
        .value;
        println!("I {total} {oracle}");
        assert!((total - oracle).abs() <= 1e-6 * oracle);
        assert_eq!(cancellation_integral(&ctx, &x, t, t, r, 0, 0, &st).unwrap(), 0.0);
    }

    #[test]
    fn cancellation_kolmogorov_flat() {
        let ctx = kolmo();
        let st = CancellationSettings::default();
        let x = DVector::from_vec(vec![0.2, -0.4]);
        let vals: Vec<f64> = [0.0625, 1.0, 4.0]
            .iter()
            .map(|&r| cancellation_integral(&ctx, &x, 0.0, -100.0, r, 0, 0, &st).unwrap())
            .collect();
        println!("kolmo I {vals:?}");
        let hi = vals.iter().cloned().fold(0.0, f64::max);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(lo > 0.0 && hi / lo <= 3.0);
    }

    #[test]
    fn integrability_slope() {
        let ctx = kolmo();
        let xi = GroupPoint::from_slice(&[0.1, 0.3], 1.0);
        let p = integrability_profile(&ctx, &xi, &[0.05, 0.2, 0.8], 0, 0, 0.5, &SolverSettings::default()).unwrap();
        println!("{p:?}");
        assert!((p.slope - 0.25).abs() <= 0.1);
    }

    #[test]
    fn grid_spec_points() {
        let g: GridSpec = serde_json::from_str(r#"{"box":[[0,1],[-1,1]],"points_per_axis":3,"times":[0.5,1.0]}"#).unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 18);
        assert_eq!(pts[0].x.as_slice(), &[0.0, -1.0]);
        assert_eq!(pts[1].x.as_slice(), &[0.5, -1.0]);
        assert_eq!(pts[17].t, 1.0);
    }
}
