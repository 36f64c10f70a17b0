//! Diffusion coefficients `a_ij` of the second-order part.
//!
//! Two representable classes: fields depending on time only (piecewise
//! constant or given by a closure) and fields depending on `(x, t)`.
//! Piecewise-constant fields are right-continuous at their breakpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{Dilation, GroupPoint};

/// Relative tolerance for the symmetry check `A = A^T`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoefficientError {
    #[error("coefficient matrix is not symmetric at {point:?} (max |A - A^T| = {deviation:e})")]
    Asymmetric { point: GroupPoint, deviation: f64 },
    #[error("coefficient matrix has a non-finite entry at {point:?}")]
    NonFinite { point: GroupPoint },
    #[error("coefficient matrix has shape {rows}x{cols}, expected {q}x{q}")]
    Shape { rows: usize, cols: usize, q: usize },
    #[error("ellipticity fails: nu_hat = {nu_hat} at {point:?}")]
    Degenerate { nu_hat: f64, point: GroupPoint },
    #[error("breakpoints must be finite and strictly increasing")]
    Breakpoints,
    #[error("piecewise field needs {expected} matrices for {breaks} breakpoints, got {got}")]
    PieceCount {
        expected: usize,
        breaks: usize,
        got: usize,
    },
    #[error("empty sample set")]
    EmptySamples,
    #[error("Hölder exponent must lie in (0,1), got {0}")]
    Exponent(f64),
    #[error("unknown coefficient preset `{0}`")]
    UnknownPreset(String),
}

type TimeFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
type SpaceTimeFn = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;

/// Any coefficient field that can be sampled at `(x, t)`.
pub trait CoefficientField: Send + Sync {
    fn q(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64>;
}

#[derive(Clone)]
pub enum TimeKind {
    /// `matrices[k]` holds on `[breaks[k-1], breaks[k])`, extended constantly
    /// beyond the first and last breakpoint.
    Piecewise {
        breaks: Vec<f64>,
        matrices: Vec<DMatrix<f64>>,
    },
    Callable(TimeFn),
}

/// Coefficients `A_0(t)` depending on time only.
#[derive(Clone)]
pub struct TimeCoefficients {
    kind: TimeKind,
    q: usize,
    nu: f64,
}

impl fmt::Debug for TimeCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            TimeKind::Piecewise { breaks, matrices } => f
                .debug_struct("TimeCoefficients")
                .field("q", &self.q)
                .field("nu", &self.nu)
                .field("breaks", breaks)
                .field("matrices", matrices)
                .finish(),
            TimeKind::Callable(_) => f
                .debug_struct("TimeCoefficients")
                .field("q", &self.q)
                .field("nu", &self.nu)
                .field("kind", &"callable")
                .finish(),
        }
    }
}

fn check_matrix(a: &DMatrix<f64>, q: usize, point: impl FnOnce() -> GroupPoint) -> Result<(), CoefficientError> {
    if a.nrows() != q || a.ncols() != q {
        return Err(CoefficientError::Shape {
            rows: a.nrows(),
            cols: a.ncols(),
            q,
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(CoefficientError::NonFinite { point: point() });
    }
    let deviation = (a - a.transpose()).amax();
    if deviation > SYMMETRY_TOLERANCE * a.amax().max(1.0) {
        return Err(CoefficientError::Asymmetric {
            point: point(),
            deviation,
        });
    }
    Ok(())
}

impl TimeCoefficients {
    pub fn piecewise(breaks: Vec<f64>, matrices: Vec<DMatrix<f64>>, nu: f64) -> Result<Self, CoefficientError> {
        if breaks.iter().any(|b| !b.is_finite()) || breaks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoefficientError::Breakpoints);
        }
        if matrices.len() != breaks.len() + 1 {
            return Err(CoefficientError::PieceCount {
                expected: breaks.len() + 1,
                breaks: breaks.len(),
                got: matrices.len(),
            });
        }
        let q = matrices[0].nrows();
        for (k, a) in matrices.iter().enumerate() {
            let t = if k == 0 {
                breaks.first().map_or(0.0, |b| b - 1.0)
            } else {
                breaks[k - 1]
            };
            check_matrix(a, q, || GroupPoint::from_slice(&[], t))?;
        }
        Ok(Self {
            kind: TimeKind::Piecewise { breaks, matrices },
            q,
            nu,
        })
    }

    /// `A_0(t) = c * Id_q`.
    pub fn constant(q: usize, c: f64) -> Self {
        Self {
            kind: TimeKind::Piecewise {
                breaks: vec![],
                matrices: vec![DMatrix::identity(q, q) * c],
            },
            q,
            nu: c.min(1.0 / c),
        }
    }

    /// Scalar piecewise field `a(t) Id_q` with values on consecutive pieces.
    pub fn piecewise_scalar(q: usize, breaks: Vec<f64>, values: &[f64], nu: f64) -> Result<Self, CoefficientError> {
        let matrices = values.iter().map(|&v| DMatrix::identity(q, q) * v).collect();
        Self::piecewise(breaks, matrices, nu)
    }

    pub fn callable<F>(q: usize, nu: f64, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            kind: TimeKind::Callable(Arc::new(f)),
            q,
            nu,
        }
    }

    pub fn kind(&self) -> &TimeKind {
        &self.kind
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Declared ellipticity constant.
    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn with_nu(mut self, nu: f64) -> Self {
        self.nu = nu;
        self
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match &self.kind {
            TimeKind::Piecewise { breaks, matrices } => {
                matrices[breaks.partition_point(|&b| b <= t)].clone()
            }
            TimeKind::Callable(f) => f(t),
        }
    }

    /// Maximal subintervals of `[s, t]` on which a piecewise field is
    /// constant, with the matrix that holds there. `None` for callables.
    pub fn pieces(&self, s: f64, t: f64) -> Option<Vec<(f64, f64, &DMatrix<f64>)>> {
        let TimeKind::Piecewise { breaks, matrices } = &self.kind else {
            return None;
        };
        let mut out = Vec::new();
        let mut lo = s;
        let mut idx = breaks.partition_point(|&b| b <= s);
        while lo < t {
            let hi = breaks.get(idx).copied().unwrap_or(f64::INFINITY).min(t);
            if hi > lo {
                out.push((lo, hi, &matrices[idx]));
            }
            lo = hi;
            idx += 1;
        }
        Some(out)
    }

    /// True when the field is provably constant on `[a, b]`.
    pub fn is_constant_on(&self, a: f64, b: f64) -> bool {
        match &self.kind {
            TimeKind::Piecewise { breaks, .. } => !breaks.iter().any(|&br| br > a && br <= b),
            TimeKind::Callable(_) => false,
        }
    }
}

impl CoefficientField for TimeCoefficients {
    fn q(&self) -> usize {
        self.q
    }

    fn eval(&self, _x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        self.at(t)
    }
}

/// Coefficients `A_0(x, t)`, Hölder continuous in `x`.
#[derive(Clone)]
pub struct SpaceTimeCoefficients {
    f: SpaceTimeFn,
    q: usize,
    nu: f64,
    alpha: f64,
    lambda: Option<f64>,
}

impl fmt::Debug for SpaceTimeCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpaceTimeCoefficients")
            .field("q", &self.q)
            .field("nu", &self.nu)
            .field("alpha", &self.alpha)
            .field("lambda", &self.lambda)
            .finish()
    }
}

impl SpaceTimeCoefficients {
    pub fn new<F>(q: usize, nu: f64, alpha: f64, f: F) -> Result<Self, CoefficientError>
    where
        F: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CoefficientError::Exponent(alpha));
        }
        Ok(Self {
            f: Arc::new(f),
            q,
            nu,
            alpha,
            lambda: None,
        })
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    /// Coefficients frozen at the space point `x_bar`, variable in time.
    pub fn freeze(&self, x_bar: &DVector<f64>) -> TimeCoefficients {
        let f = Arc::clone(&self.f);
        let x_bar = x_bar.clone();
        TimeCoefficients::callable(self.q, self.nu, move |t| f(&x_bar, t))
    }
}

impl CoefficientField for SpaceTimeCoefficients {
    fn q(&self) -> usize {
        self.q
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.f)(x, t)
    }
}

/// Either class of coefficients.
#[derive(Debug, Clone)]
pub enum Coefficients {
    Time(TimeCoefficients),
    SpaceTime(SpaceTimeCoefficients),
}

impl Coefficients {
    pub fn nu(&self) -> f64 {
        match self {
            Self::Time(c) => c.nu(),
            Self::SpaceTime(c) => c.nu(),
        }
    }

    pub fn field(&self) -> &dyn CoefficientField {
        match self {
            Self::Time(c) => c,
            Self::SpaceTime(c) => c,
        }
    }

    /// Frozen coefficients at `x_bar`; a time-only field is returned as is.
    pub fn freeze(&self, x_bar: &DVector<f64>) -> TimeCoefficients {
        match self {
            Self::Time(c) => c.clone(),
            Self::SpaceTime(c) => c.freeze(x_bar),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    /// Largest `nu` certified on the samples.
    pub nu_hat: f64,
    pub worst_point: GroupPoint,
    pub samples: usize,
    pub description: String,
}

/// `nu_hat = min over samples of min(lambda_min(A), 1 / lambda_max(A))`.
pub fn check_ellipticity(
    field: &dyn CoefficientField,
    samples: &[GroupPoint],
    description: &str,
) -> Result<EllipticityReport, CoefficientError> {
    if samples.is_empty() {
        return Err(CoefficientError::EmptySamples);
    }
    let mut nu_hat = f64::INFINITY;
    let mut worst = samples[0].clone();
    for p in samples {
        let a = field.eval(&p.x, p.t);
        check_matrix(&a, field.q(), || p.clone())?;
        let eig = a.symmetric_eigenvalues();
        let lo = eig.min();
        let hi = eig.max();
        let local = if hi > 0.0 { lo.min(1.0 / hi) } else { lo.min(0.0) };
        if local < nu_hat {
            nu_hat = local;
            worst = p.clone();
        }
    }
    if !(nu_hat > 0.0) {
        return Err(CoefficientError::Degenerate {
            nu_hat,
            point: worst,
        });
    }
    Ok(EllipticityReport {
        nu_hat,
        worst_point: worst,
        samples: samples.len(),
        description: description.to_string(),
    })
}

/// Lower estimate of `Lambda = max_ij ||a_ij||_{C^alpha_x}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderLambda {
    pub lambda: f64,
    /// Entry `(i, j)` attaining the maximum.
    pub entry: (usize, usize),
    pub sup_norm: f64,
    pub seminorm: f64,
    /// Same-time pair realizing `seminorm` for that entry.
    pub witness: Option<(GroupPoint, GroupPoint)>,
}

/// Sup norm plus pairwise `C^alpha_x` quotient over same-time pairs of
/// `points`, maximized over entries. Points are grouped by exact time.
pub fn holder_lambda(
    field: &dyn CoefficientField,
    alpha: f64,
    dilation: &Dilation,
    points: &[GroupPoint],
) -> Result<HolderLambda, CoefficientError> {
    if points.is_empty() {
        return Err(CoefficientError::EmptySamples);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CoefficientError::Exponent(alpha));
    }
    let q = field.q();
    let values: Vec<DMatrix<f64>> = points.iter().map(|p| field.eval(&p.x, p.t)).collect();
    let mut fibers: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (k, p) in points.iter().enumerate() {
        fibers.entry(p.t.to_bits()).or_default().push(k);
    }

    let mut best: Option<HolderLambda> = None;
    for i in 0..q {
        for j in i..q {
            let sup_norm = values.iter().map(|a| a[(i, j)].abs()).fold(0.0, f64::max);
            let mut seminorm = 0.0;
            let mut witness = None;
            for idx in fibers.values() {
                for (a, &k1) in idx.iter().enumerate() {
                    for &k2 in &idx[a + 1..] {
                        let dx = dilation.quasi_norm(&(&points[k1].x - &points[k2].x));
                        if dx == 0.0 {
                            continue;
                        }
                        let quot = (values[k1][(i, j)] - values[k2][(i, j)]).abs() / dx.powf(alpha);
                        if quot > seminorm {
                            seminorm = quot;
                            witness = Some((points[k1].clone(), points[k2].clone()));
                        }
                    }
                }
            }
            let cand = HolderLambda {
                lambda: sup_norm + seminorm,
                entry: (i, j),
                sup_norm,
                seminorm,
                witness,
            };
            if best.as_ref().is_none_or(|b| cand.lambda > b.lambda) {
                best = Some(cand);
            }
        }
    }
    Ok(best.expect("q >= 1"))
}

fn default_one() -> f64 {
    1.0
}

/// JSON coefficient specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum CoefficientSpec {
    #[serde(rename = "piecewise_t")]
    Piecewise {
        #[serde(default)]
        breaks: Vec<f64>,
        matrices: Vec<Vec<Vec<f64>>>,
    },
    /// Named preset formulas, all multiples of the identity:
    /// `constant`: `scale`;
    /// `oscillating_t`: `scale (1 + amplitude sin(frequency t))`;
    /// `sin_x1`: `scale (1 + amplitude sin(x_1))`;
    /// `sin_x1_cos_t`: `scale (1 + amplitude sin(x_1) cos(frequency t))`.
    #[serde(rename = "expr")]
    Expr {
        name: String,
        #[serde(default = "default_one")]
        scale: f64,
        #[serde(default)]
        amplitude: f64,
        #[serde(default = "default_one")]
        frequency: f64,
    },
}

impl CoefficientSpec {
    pub fn build(&self, q: usize, nu: f64, alpha: f64) -> Result<Coefficients, CoefficientError> {
        match self {
            Self::Piecewise { breaks, matrices } => {
                let mats = matrices
                    .iter()
                    .map(|rows| {
                        let r = rows.len();
                        let c = rows.first().map_or(0, Vec::len);
                        if rows.iter().any(|row| row.len() != c) {
                            return Err(CoefficientError::Shape { rows: r, cols: c, q });
                        }
                        Ok(DMatrix::from_fn(r, c, |i, k| rows[i][k]))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if mats.is_empty() {
                    return Err(CoefficientError::PieceCount {
                        expected: breaks.len() + 1,
                        breaks: breaks.len(),
                        got: 0,
                    });
                }
                let field = TimeCoefficients::piecewise(breaks.clone(), mats, nu)?;
                if field.q() != q {
                    return Err(CoefficientError::Shape {
                        rows: field.q(),
                        cols: field.q(),
                        q,
                    });
                }
                Ok(Coefficients::Time(field))
            }
            Self::Expr {
                name,
                scale,
                amplitude,
                frequency,
            } => {
                let (c, a, w) = (*scale, *amplitude, *frequency);
                let id = DMatrix::<f64>::identity(q, q);
                match name.as_str() {
                    "constant" => Ok(Coefficients::Time(TimeCoefficients::constant(q, c).with_nu(nu))),
                    "oscillating_t" => Ok(Coefficients::Time(TimeCoefficients::callable(q, nu, move |t| {
                        &id * (c * (1.0 + a * (w * t).sin()))
                    }))),
                    "sin_x1" => Ok(Coefficients::SpaceTime(SpaceTimeCoefficients::new(
                        q,
                        nu,
                        alpha,
                        move |x, _| &id * (c * (1.0 + a * x[0].sin())),
                    )?)),
                    "sin_x1_cos_t" => Ok(Coefficients::SpaceTime(SpaceTimeCoefficients::new(
                        q,
                        nu,
                        alpha,
                        move |x, t| &id * (c * (1.0 + a * x[0].sin() * (w * t).cos())),
                    )?)),
                    other => Err(CoefficientError::UnknownPreset(other.to_string())),
                }
            }
        }
    }
}
