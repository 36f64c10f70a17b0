//! Algebraic and metric structure of a Kolmogorov-type operator.
//!
//! The drift matrix `B` has the lower block-diagonal shape
//!
//! ```text
//!     | 0   0   ...  0   0 |
//!     | B1  0   ...  0   0 |
//! B = | 0   B2  ...  0   0 |
//!     | .   .   ...  .   . |
//!     | 0   0   ...  Bk  0 |
//! ```
//!
//! with `B_j` of shape `m_j x m_{j-1}` and full row rank. Such a `B` is
//! nilpotent, so the propagator `E(t) = exp(-tB)` is a matrix polynomial in
//! `t`, and the space-time `R^{N+1}` carries the group law
//! `(y,s) o (x,t) = (x + E(t) y, t + s)` together with the dilations
//! `D(l)(x,t) = (l^{q_1} x_1, ..., l^{q_N} x_N, l^2 t)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Relative threshold on singular values used for the block rank check.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("block sizes must be a nonempty list of positive integers")]
    EmptyBlocks,
    #[error("block size m[{index}] must be positive")]
    ZeroBlock { index: usize },
    #[error("m must be nonincreasing: m[{index}] = {value} exceeds m[{prev}] = {prev_value}")]
    NotMonotone {
        index: usize,
        value: usize,
        prev: usize,
        prev_value: usize,
    },
    #[error("expected {expected} drift blocks for m of length {len}, got {got}")]
    BlockCount {
        expected: usize,
        len: usize,
        got: usize,
    },
    #[error("drift block B{index} has shape {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    BlockShape {
        index: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("drift block B{index} contains a non-finite entry")]
    NonFinite { index: usize },
    #[error("drift block B{index} is rank deficient (needs rank {required}); singular values {singular_values:?}")]
    RankDeficient {
        index: usize,
        required: usize,
        singular_values: Vec<f64>,
    },
    #[error("ragged matrix in drift block B{index}")]
    Ragged { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("dilation factor must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("unknown drift preset `{0}`")]
    UnknownPreset(String),
}

/// Anisotropic dilation exponents `q_1..q_N` attached to a block structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dilation {
    exponents: Vec<u32>,
}

impl Dilation {
    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    /// Homogeneous dimension `Q = sum q_i` of `R^N`.
    pub fn homogeneous_dim(&self) -> u32 {
        self.exponents.iter().sum()
    }

    /// Homogeneous dimension `Q + 2` of space-time.
    pub fn spacetime_dim(&self) -> u32 {
        self.homogeneous_dim() + 2
    }

    /// Largest exponent `q_N`.
    pub fn top_exponent(&self) -> u32 {
        self.exponents.iter().copied().max().unwrap_or(1)
    }

    /// `D_0(l) x`.
    pub fn scale(&self, lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(&self.exponents)
                .map(|(xi, &q)| xi * lambda.powi(q as i32)),
        )
    }

    /// The diagonal matrix `D_0(l)`.
    pub fn matrix(&self, lambda: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.dim(),
            self.exponents.iter().map(|&q| lambda.powi(q as i32)),
        ))
    }

    /// The anisotropic quasi-norm `||x|| = sum |x_i|^{1/q_i}`.
    pub fn quasi_norm(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .zip(&self.exponents)
            .map(|(xi, &q)| match q {
                1 => xi.abs(),
                3 => xi.abs().cbrt(),
                _ => xi.abs().powf(1.0 / q as f64),
            })
            .sum()
    }

    /// Order `sum alpha_i q_i` of a multi-index.
    pub fn order(&self, alpha: &[u32]) -> u32 {
        alpha.iter().zip(&self.exponents).map(|(a, q)| a * q).sum()
    }
}

/// Exponents `(1 x m_0, 3 x m_1, ..., (2k+1) x m_k)` for valid block sizes.
pub fn dilation_exponents(m: &[usize]) -> Result<Dilation, GeometryError> {
    validate_block_sizes(m)?;
    let exponents = m
        .iter()
        .enumerate()
        .flat_map(|(j, &mj)| std::iter::repeat_n(2 * j as u32 + 1, mj))
        .collect();
    Ok(Dilation { exponents })
}

fn validate_block_sizes(m: &[usize]) -> Result<(), GeometryError> {
    if m.is_empty() {
        return Err(GeometryError::EmptyBlocks);
    }
    for (index, &value) in m.iter().enumerate() {
        if value == 0 {
            return Err(GeometryError::ZeroBlock { index });
        }
        if index > 0 && value > m[index - 1] {
            return Err(GeometryError::NotMonotone {
                index,
                value,
                prev: index - 1,
                prev_value: m[index - 1],
            });
        }
    }
    Ok(())
}

/// A point `(x, t)` of space-time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPoint {
    pub x: DVector<f64>,
    pub t: f64,
}

impl GroupPoint {
    pub fn new(x: DVector<f64>, t: f64) -> Self {
        Self { x, t }
    }

    pub fn from_slice(x: &[f64], t: f64) -> Self {
        Self {
            x: DVector::from_column_slice(x),
            t,
        }
    }

    pub fn origin(n: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            t: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Validated drift matrix with its block skeleton, powers and dilations.
#[derive(Debug, Clone)]
pub struct DriftStructure {
    m: Vec<usize>,
    blocks: Vec<DMatrix<f64>>,
    b: DMatrix<f64>,
    /// `B^0, B^1, ..., B^{p-1}` with `p` the nilpotency index.
    powers: Vec<DMatrix<f64>>,
    dilation: Dilation,
}

/// JSON form of a drift structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DriftSpec {
    Preset { preset: String, n: usize },
    Blocks {
        m: Vec<usize>,
        #[serde(default)]
        blocks: Vec<Vec<Vec<f64>>>,
    },
}

impl DriftStructure {
    /// Validates the block sizes and blocks and assembles `B`.
    pub fn new(m: &[usize], blocks: Vec<DMatrix<f64>>) -> Result<Self, GeometryError> {
        validate_block_sizes(m)?;
        let k = m.len() - 1;
        if blocks.len() != k {
            return Err(GeometryError::BlockCount {
                expected: k,
                len: m.len(),
                got: blocks.len(),
            });
        }
        for (j, block) in blocks.iter().enumerate() {
            let index = j + 1;
            let (rows, cols) = block.shape();
            if rows != m[index] || cols != m[index - 1] {
                return Err(GeometryError::BlockShape {
                    index,
                    rows,
                    cols,
                    expected_rows: m[index],
                    expected_cols: m[index - 1],
                });
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(GeometryError::NonFinite { index });
            }
            let singular_values: Vec<f64> = block
                .clone()
                .svd(false, false)
                .singular_values
                .iter()
                .copied()
                .collect();
            let largest = singular_values.iter().copied().fold(0.0, f64::max);
            let rank = singular_values
                .iter()
                .filter(|&&sv| largest > 0.0 && sv > RANK_TOLERANCE * largest)
                .count();
            if rank < rows {
                return Err(GeometryError::RankDeficient {
                    index,
                    required: rows,
                    singular_values,
                });
            }
        }

        let n: usize = m.iter().sum();
        let mut b = DMatrix::zeros(n, n);
        let mut offsets = Vec::with_capacity(m.len());
        let mut acc = 0;
        for &mj in m {
            offsets.push(acc);
            acc += mj;
        }
        for (j, block) in blocks.iter().enumerate() {
            b.view_mut((offsets[j + 1], offsets[j]), block.shape())
                .copy_from(block);
        }

        let mut powers = vec![DMatrix::identity(n, n)];
        loop {
            let next = powers.last().unwrap() * &b;
            if next.iter().all(|&v| v == 0.0) {
                break;
            }
            powers.push(next);
        }

        Ok(Self {
            m: m.to_vec(),
            blocks,
            b,
            powers,
            dilation: dilation_exponents(m)?,
        })
    }

    /// Builds from row-major nested lists, as read from JSON.
    pub fn from_nested(m: &[usize], blocks: &[Vec<Vec<f64>>]) -> Result<Self, GeometryError> {
        let mats = blocks
            .iter()
            .enumerate()
            .map(|(j, rows)| {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|row| row.len() != c) {
                    return Err(GeometryError::Ragged { index: j + 1 });
                }
                Ok(DMatrix::from_fn(r, c, |i, k| rows[i][k]))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(m, mats)
    }

    pub fn from_spec(spec: &DriftSpec) -> Result<Self, GeometryError> {
        match spec {
            DriftSpec::Preset { preset, n } => match preset.as_str() {
                "kolmogorov" => Self::kolmogorov(*n),
                "parabolic" | "heat" => Self::parabolic(*n),
                other => Err(GeometryError::UnknownPreset(other.to_string())),
            },
            DriftSpec::Blocks { m, blocks } => Self::from_nested(m, blocks),
        }
    }

    pub fn to_spec(&self) -> DriftSpec {
        DriftSpec::Blocks {
            m: self.m.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    (0..b.nrows())
                        .map(|i| b.row(i).iter().copied().collect())
                        .collect()
                })
                .collect(),
        }
    }

    /// The Kolmogorov operator on `R^{2n}`: `m = (n, n)`, `B_1 = Id_n`.
    pub fn kolmogorov(n: usize) -> Result<Self, GeometryError> {
        Self::new(&[n, n], vec![DMatrix::identity(n, n)])
    }

    /// The uniformly parabolic case `B = 0` on `R^q`.
    pub fn parabolic(q: usize) -> Result<Self, GeometryError> {
        Self::new(&[q], vec![])
    }

    /// Chain with canonical blocks `B_j = [Id_{m_j} | 0]`.
    pub fn chain(m: &[usize]) -> Result<Self, GeometryError> {
        validate_block_sizes(m)?;
        let blocks = m
            .windows(2)
            .map(|w| DMatrix::from_fn(w[1], w[0], |i, j| if i == j { 1.0 } else { 0.0 }))
            .collect();
        Self::new(m, blocks)
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.m
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Number of diffusive variables `q = m_0`.
    pub fn q(&self) -> usize {
        self.m[0]
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Smallest `p` with `B^p = 0`.
    pub fn nilpotency_index(&self) -> usize {
        self.powers.len()
    }

    pub fn dilation(&self) -> &Dilation {
        &self.dilation
    }

    /// Same structure with every block negated (a valid structure with the
    /// opposite drift sign).
    pub fn negated(&self) -> Self {
        Self::new(&self.m, self.blocks.iter().map(|b| -b).collect())
            .expect("negating blocks preserves rank")
    }

    /// `E(t) = exp(-tB)` as the terminating series `sum_j (-tB)^j / j!`.
    pub fn propagator(&self, t: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut e = DMatrix::zeros(n, n);
        let mut coeff = 1.0;
        for (j, p) in self.powers.iter().enumerate() {
            if j > 0 {
                coeff *= -t / j as f64;
            }
            e += p * coeff;
        }
        e
    }

    fn check_dim(&self, p: &GroupPoint) -> Result<(), GeometryError> {
        if p.dim() != self.dim() {
            return Err(GeometryError::Dimension {
                expected: self.dim(),
                got: p.dim(),
            });
        }
        Ok(())
    }

    /// `(y,s) o (x,t) = (x + E(t) y, t + s)`.
    pub fn compose(&self, eta: &GroupPoint, xi: &GroupPoint) -> Result<GroupPoint, GeometryError> {
        self.check_dim(eta)?;
        self.check_dim(xi)?;
        Ok(GroupPoint {
            x: &xi.x + self.propagator(xi.t) * &eta.x,
            t: xi.t + eta.t,
        })
    }

    /// `(y,s)^{-1} = (-E(-s) y, -s)`.
    pub fn invert(&self, xi: &GroupPoint) -> Result<GroupPoint, GeometryError> {
        self.check_dim(xi)?;
        Ok(GroupPoint {
            x: -(self.propagator(-xi.t) * &xi.x),
            t: -xi.t,
        })
    }

    pub fn dilate(&self, lambda: f64, xi: &GroupPoint) -> Result<GroupPoint, GeometryError> {
        if !(lambda > 0.0) {
            return Err(GeometryError::NonPositiveScale(lambda));
        }
        self.check_dim(xi)?;
        Ok(GroupPoint {
            x: self.dilation.scale(lambda, &xi.x),
            t: lambda * lambda * xi.t,
        })
    }

    /// Homogeneous norm `rho(x,t) = ||x|| + sqrt|t|`.
    pub fn hom_norm(&self, xi: &GroupPoint) -> f64 {
        self.dilation.quasi_norm(&xi.x) + xi.t.abs().sqrt()
    }

    /// Quasi-distance `d(xi, eta) = ||x - E(t-s) y|| + sqrt|t-s|`.
    pub fn qdistance(&self, xi: &GroupPoint, eta: &GroupPoint) -> Result<f64, GeometryError> {
        self.check_dim(xi)?;
        self.check_dim(eta)?;
        let dt = xi.t - eta.t;
        let v = &xi.x - self.propagator(dt) * &eta.x;
        Ok(self.dilation.quasi_norm(&v) + dt.abs().sqrt())
    }

    /// Same as [`qdistance`](Self::qdistance) for callers that already
    /// validated dimensions.
    pub(crate) fn dist(&self, xi: &GroupPoint, eta: &GroupPoint) -> f64 {
        let dt = xi.t - eta.t;
        let v = &xi.x - self.propagator(dt) * &eta.x;
        self.dilation.quasi_norm(&v) + dt.abs().sqrt()
    }

    pub(crate) fn compose_unchecked(&self, eta: &GroupPoint, xi: &GroupPoint) -> GroupPoint {
        GroupPoint {
            x: &xi.x + self.propagator(xi.t) * &eta.x,
            t: xi.t + eta.t,
        }
    }
}

impl Serialize for DriftStructure {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_spec().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DriftStructure {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let spec = DriftSpec::deserialize(deserializer)?;
        DriftStructure::from_spec(&spec).map_err(serde::de::Error::custom)
    }
}

/// Empirical structural constants of the quasi-distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConstants {
    /// `max(kappa_triangle, kappa_symmetry, 1)`.
    pub kappa_hat: f64,
    pub kappa_triangle: f64,
    pub kappa_symmetry: f64,
    pub vartheta_hat: f64,
    /// Number of sampled pairs that satisfied the premise of the equivalence check.
    pub admissible_pairs: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub sampling: String,
}

const BOX_HALF_WIDTH: f64 = 1.0;
const LOG_SCALE_RANGE: f64 = 3.0;
const PILOT_SAMPLES: usize = 4096;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn box_point<R: Rng>(rng: &mut R, n: usize) -> GroupPoint {
    let x = DVector::from_fn(n, |_, _| rng.random_range(-BOX_HALF_WIDTH..BOX_HALF_WIDTH));
    let t = rng.random_range(-BOX_HALF_WIDTH..BOX_HALF_WIDTH);
    GroupPoint { x, t }
}

/// `base o D(l) u` with `u` uniform in the box.
fn offset_point<R: Rng>(ds: &DriftStructure, rng: &mut R, base: &GroupPoint, lambda: f64) -> GroupPoint {
    let u = box_point(rng, ds.dim());
    let scaled = GroupPoint {
        x: ds.dilation.scale(lambda, &u.x),
        t: lambda * lambda * u.t,
    };
    ds.compose_unchecked(base, &scaled)
}

fn quotient(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Sup of the quasi-triangle and quasi-symmetry quotients over `count`
/// sampled triples from stream `id`.
fn sample_kappa(ds: &DriftStructure, count: usize, seed: u64, id: u64) -> (f64, f64) {
    let mut rng = stream(seed, id);
    let mut tri: f64 = 0.0;
    let mut sym: f64 = 0.0;
    for _ in 0..count {
        let zeta = box_point(&mut rng, ds.dim());
        let l1 = rng.random_range(-LOG_SCALE_RANGE..LOG_SCALE_RANGE).exp();
        let xi = offset_point(ds, &mut rng, &zeta, l1);
        let l2 = rng.random_range(-LOG_SCALE_RANGE..LOG_SCALE_RANGE).exp();
        let eta = offset_point(ds, &mut rng, &zeta, l2);
        let d_xe = ds.dist(&xi, &eta);
        let d_ex = ds.dist(&eta, &xi);
        tri = tri.max(quotient(d_xe, ds.dist(&xi, &zeta) + ds.dist(&eta, &zeta)));
        sym = sym.max(quotient(d_xe, d_ex)).max(quotient(d_ex, d_xe));
    }
    (tri, sym)
}

/// Monte Carlo estimates of the quasi-triangle constant `kappa` and the
/// equivalence constant `vartheta`.
///
/// Samples are drawn from a fixed-width stream so the first `n` samples of a
/// larger run coincide with a run of size `n`; both estimates are therefore
/// nondecreasing in `sample_count`. The `vartheta` premise is checked against
/// `2 * 1.1 * kappa_pilot` where `kappa_pilot` comes from a fixed-size pilot
/// sample, which keeps the admissible set independent of `sample_count`.
pub fn estimate_kappa(ds: &DriftStructure, sample_count: usize, seed: u64) -> GeometryConstants {
    let (tri, sym) = sample_kappa(ds, sample_count, seed, 0);
    let (pilot_tri, pilot_sym) = sample_kappa(ds, PILOT_SAMPLES, seed, 2);
    let premise = 2.0 * 1.1 * pilot_tri.max(pilot_sym).max(1.0);

    let mut rng = stream(seed, 1);
    let mut vartheta: f64 = 1.0;
    let mut admissible = 0;
    for _ in 0..sample_count {
        let eta = box_point(&mut rng, ds.dim());
        let lambda_log = rng.random_range(-LOG_SCALE_RANGE..LOG_SCALE_RANGE);
        let xi1 = offset_point(ds, &mut rng, &eta, lambda_log.exp());
        let shrink = rng.random_range(-6.0..0.0);
        let xi2 = offset_point(ds, &mut rng, &xi1, (lambda_log + shrink).exp());
        let d1 = ds.dist(&xi1, &eta);
        if d1 < premise * ds.dist(&xi1, &xi2) {
            continue;
        }
        admissible += 1;
        let d2 = ds.dist(&xi2, &eta);
        vartheta = vartheta.max(quotient(d1, d2)).max(quotient(d2, d1));
    }

    GeometryConstants {
        kappa_hat: tri.max(sym).max(1.0),
        kappa_triangle: tri,
        kappa_symmetry: sym,
        vartheta_hat: vartheta,
        admissible_pairs: admissible,
        sample_count,
        seed,
        sampling: format!(
            "base points uniform in [-{BOX_HALF_WIDTH},{BOX_HALF_WIDTH}]^(N+1), offsets dilated by exp(U(-{LOG_SCALE_RANGE},{LOG_SCALE_RANGE}))"
        ),
    }
}

/// Fitted constant `c` in `||E(t) x|| <= c (||x|| + sqrt|t|)`: the sup of the
/// left side over points sampled on the unit sphere `rho(x,t) = 1`.
pub fn fit_propagator_constant(ds: &DriftStructure, sample_count: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, 3);
    let mut best: f64 = 0.0;
    for _ in 0..sample_count {
        let p = box_point(&mut rng, ds.dim());
        let r = ds.hom_norm(&p);
        if r == 0.0 {
            continue;
        }
        let x = ds.dilation.scale(1.0 / r, &p.x);
        let t = p.t / (r * r);
        best = best.max(ds.dilation.quasi_norm(&(ds.propagator(t) * x)));
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn kolmogorov() -> DriftStructure {
        DriftStructure::kolmogorov(1).unwrap()
    }

    #[test]
    fn kolmogorov_drift_matrix() {
        let ds = kolmogorov();
        assert_eq!(ds.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(ds.nilpotency_index(), 2);
    }

    #[test]
    fn parabolic_drift_is_zero() {
        let ds = DriftStructure::parabolic(3).unwrap();
        assert!(ds.matrix().iter().all(|&v| v == 0.0));
        assert_eq!(ds.nilpotency_index(), 1);
        assert_eq!(ds.propagator(5.0), DMatrix::identity(3, 3));
    }

    #[test]
    fn rank_check() {
        let ok = DriftStructure::new(&[2, 1], vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0])]);
        assert!(ok.is_ok());
        let err = DriftStructure::new(&[2, 1], vec![DMatrix::zeros(1, 2)]).unwrap_err();
        assert!(matches!(err, GeometryError::RankDeficient { index: 1, required: 1, .. }));
        let err = DriftStructure::new(
            &[2, 2],
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0])],
        )
        .unwrap_err();
        match err {
            GeometryError::RankDeficient { singular_values, .. } => {
                assert_eq!(singular_values.len(), 2);
                assert!(singular_values.iter().any(|&s| s < 1e-12));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn shape_and_monotonicity_errors() {
        assert!(matches!(
            DriftStructure::new(&[1, 2], vec![DMatrix::zeros(2, 1)]),
            Err(GeometryError::NotMonotone { index: 1, .. })
        ));
        assert!(matches!(
            DriftStructure::new(&[2, 1], vec![DMatrix::zeros(2, 1)]),
            Err(GeometryError::BlockShape { index: 1, .. })
        ));
        assert!(matches!(
            DriftStructure::new(&[2, 1], vec![]),
            Err(GeometryError::BlockCount { expected: 1, .. })
        ));
        assert!(matches!(
            DriftStructure::new(&[1, 1], vec![DMatrix::from_element(1, 1, f64::NAN)]),
            Err(GeometryError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn dilation_patterns() {
        let d = dilation_exponents(&[1, 1]).unwrap();
        assert_eq!(d.exponents(), &[1, 3]);
        assert_eq!(d.homogeneous_dim(), 4);
        let d = dilation_exponents(&[2, 2, 1]).unwrap();
        assert_eq!(d.exponents(), &[1, 1, 3, 3, 5]);
        assert_eq!(d.homogeneous_dim(), 13);
        let d = dilation_exponents(&[3]).unwrap();
        assert_eq!(d.exponents(), &[1, 1, 1]);
        assert_eq!(d.homogeneous_dim(), 3);
        assert!(dilation_exponents(&[1, 2]).is_err());
    }

    #[test]
    fn kolmogorov_propagator() {
        let ds = kolmogorov();
        let e = ds.propagator(0.7);
        assert_eq!(e, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -0.7, 1.0]));
        assert_eq!(ds.propagator(0.0), DMatrix::identity(2, 2));
        let lambda = 2.0;
        let d = ds.dilation();
        let lhs = ds.propagator(lambda * lambda * 0.7);
        let rhs = d.matrix(lambda) * ds.propagator(0.7) * d.matrix(1.0 / lambda);
        assert_abs_diff_eq!((lhs - rhs).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn group_law_examples() {
        let ds = kolmogorov();
        let id = GroupPoint::origin(2);
        let xi = GroupPoint::from_slice(&[0.3, -1.2], 0.4);
        assert_eq!(ds.compose(&id, &xi).unwrap(), xi);
        let a = GroupPoint::from_slice(&[1.0, 0.0], 0.0);
        let b = GroupPoint::from_slice(&[0.0, 0.0], 1.0);
        assert_eq!(ds.compose(&a, &b).unwrap(), GroupPoint::from_slice(&[1.0, -1.0], 1.0));
        let inv = ds.invert(&GroupPoint::from_slice(&[1.0, 0.0], 1.0)).unwrap();
        assert_eq!(inv, GroupPoint::from_slice(&[-1.0, -1.0], -1.0));
        let bad = GroupPoint::from_slice(&[1.0], 0.0);
        assert!(matches!(ds.compose(&bad, &xi), Err(GeometryError::Dimension { .. })));
    }

    #[test]
    fn dilation_examples() {
        let ds = kolmogorov();
        let xi = GroupPoint::from_slice(&[1.0, 1.0], 1.0);
        assert_eq!(ds.dilate(1.0, &xi).unwrap(), xi);
        assert_eq!(ds.dilate(2.0, &xi).unwrap(), GroupPoint::from_slice(&[2.0, 8.0], 4.0));
        assert!(matches!(ds.dilate(0.0, &xi), Err(GeometryError::NonPositiveScale(_))));
        assert!(ds.dilate(-1.0, &xi).is_err());
    }

    #[test]
    fn norm_and_distance_examples() {
        let ds = kolmogorov();
        assert_eq!(ds.hom_norm(&GroupPoint::origin(2)), 0.0);
        assert_abs_diff_eq!(ds.hom_norm(&GroupPoint::from_slice(&[1.0, 8.0], 4.0)), 5.0, epsilon = 1e-15);
        let a = GroupPoint::from_slice(&[0.0, 0.0], 1.0);
        let b = GroupPoint::from_slice(&[1.0, 0.0], 0.0);
        assert_abs_diff_eq!(ds.qdistance(&a, &b).unwrap(), 3.0, epsilon = 1e-15);
        assert_eq!(ds.qdistance(&a, &a).unwrap(), 0.0);
        let x = GroupPoint::from_slice(&[0.5, -2.0], 0.3);
        let y = GroupPoint::from_slice(&[-1.0, 0.25], 0.3);
        let expected = ds.dilation().quasi_norm(&(&x.x - &y.x));
        assert_abs_diff_eq!(ds.qdistance(&x, &y).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn distance_is_norm_of_quotient() {
        let ds = DriftStructure::chain(&[2, 1, 1]).unwrap();
        let xi = GroupPoint::from_slice(&[0.1, -0.4, 0.9, 2.0], 0.8);
        let eta = GroupPoint::from_slice(&[1.1, 0.3, -0.2, 0.5], -0.6);
        let via_group = ds.hom_norm(&ds.compose(&ds.invert(&eta).unwrap(), &xi).unwrap());
        assert_abs_diff_eq!(ds.qdistance(&xi, &eta).unwrap(), via_group, epsilon = 1e-12);
    }

    #[test]
    fn parabolic_kappa_is_one() {
        let ds = DriftStructure::parabolic(2).unwrap();
        let c = estimate_kappa(&ds, 2000, 7);
        assert_eq!(c.kappa_symmetry, 1.0);
        assert!(c.kappa_triangle <= 1.0);
        assert_eq!(c.kappa_hat, 1.0);
    }

    #[test]
    fn kappa_monotone_in_sample_count() {
        let ds = kolmogorov();
        let small = estimate_kappa(&ds, 500, 11);
        let large = estimate_kappa(&ds, 1000, 11);
        assert!(large.kappa_hat >= small.kappa_hat);
        assert!(large.kappa_triangle >= small.kappa_triangle);
        assert!(large.vartheta_hat >= small.vartheta_hat);
        assert!(small.kappa_hat >= 1.0 && small.vartheta_hat >= 1.0);
        assert_eq!(small, estimate_kappa(&ds, 500, 11));
    }

    #[test]
    fn spec_round_trip() {
        let json = r#"{"preset":"kolmogorov","n":1}"#;
        let ds: DriftStructure = serde_json::from_str(json).unwrap();
        assert_eq!(ds.dim(), 2);
        let text = serde_json::to_string(&ds).unwrap();
        assert_eq!(text, r#"{"m":[1,1],"blocks":[[[1.0]]]}"#);
        let back: DriftStructure = serde_json::from_str(&text).unwrap();
        assert_eq!(back.matrix(), ds.matrix());
        let err = serde_json::from_str::<DriftStructure>(r#"{"m":[1,2],"blocks":[[[1.0],[1.0]]]}"#)
            .unwrap_err();
        assert!(err.to_string().contains("m must be nonincreasing"));
    }
}
