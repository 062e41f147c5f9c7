//! Measurement models and their Gaussian linearization.
//!
//! A factor observes `d ~ h(X) + ε` with `ε ~ N(0, Σ_n)`. Linearizing `h`
//! about `X₀` gives a canonical-form Gaussian over the concatenated state of
//! the factor's neighbors. Optional Huber robustness is realized by covariance
//! scaling: `Σ_n` is inflated so the quadratic energy at the current residual
//! equals the Huber energy there.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GbpError, Result};
use crate::gaussian::{spd_inverse, symmetrize, GaussianCanonical, DEFAULT_PIVOT_TOL};

/// Default just-in-time relinearization threshold, in problem units.
pub const DEFAULT_RELIN_THRESHOLD: f64 = 0.1;

/// A measurement function `h` together with its Jacobian.
pub trait MeasurementFn: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        finite_difference_jacobian(|p| self.eval(p), x)
    }

    /// True when `h` is affine, so linearization is exact everywhere.
    fn is_affine(&self) -> bool {
        false
    }

    /// Map a residual `d − h(X)` to its canonical representative (angle wrapping).
    fn wrap_residual(&self, _r: &mut DVector<f64>) {}
}

/// Central-difference Jacobian with step `1e-6·max(1, |xᵢ|)`.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let m = f(x)?.len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        jac.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Wrap an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// `h(x) = x`.
#[derive(Debug, Clone)]
pub struct Identity {
    pub dim: usize,
}

impl MeasurementFn for Identity {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(x.clone())
    }
    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.dim, self.dim))
    }
    fn is_affine(&self) -> bool {
        true
    }
}

/// `h(a, b) = b − a` for two blocks of equal dimension.
#[derive(Debug, Clone)]
pub struct Difference {
    pub dim: usize,
}

impl MeasurementFn for Difference {
    fn input_dim(&self) -> usize {
        2 * self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(x.rows(self.dim, self.dim) - x.rows(0, self.dim))
    }
    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim;
        let mut j = DMatrix::zeros(d, 2 * d);
        for i in 0..d {
            j[(i, i)] = -1.0;
            j[(i, d + i)] = 1.0;
        }
        Ok(j)
    }
    fn is_affine(&self) -> bool {
        true
    }
}

/// `h(x) = J x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub jacobian: DMatrix<f64>,
}

impl MeasurementFn for Linear {
    fn input_dim(&self) -> usize {
        self.jacobian.ncols()
    }
    fn output_dim(&self) -> usize {
        self.jacobian.nrows()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.jacobian * x)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.jacobian.clone())
    }
    fn is_affine(&self) -> bool {
        true
    }
}

/// Scalar `h(x) = x²`.
#[derive(Debug, Clone)]
pub struct Square;

impl MeasurementFn for Square {
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, x[0] * x[0]))
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, 2.0 * x[0]))
    }
}

/// Range and bearing from a 2D robot position to a 2D landmark.
/// Input is `[r_x, r_y, l_x, l_y]`.
#[derive(Debug, Clone)]
pub struct RangeBearing;

const COINCIDENT_EPS: f64 = 1e-9;

/// `[‖l − r‖, atan2(l_y − r_y, l_x − r_x)]`.
pub fn range_bearing_h(r: [f64; 2], l: [f64; 2]) -> Result<[f64; 2]> {
    let (dx, dy) = (l[0] - r[0], l[1] - r[1]);
    let range = dx.hypot(dy);
    if range < COINCIDENT_EPS {
        return Err(GbpError::CoincidentPoints);
    }
    Ok([range, dy.atan2(dx)])
}

impl MeasurementFn for RangeBearing {
    fn input_dim(&self) -> usize {
        4
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let [range, bearing] = range_bearing_h([x[0], x[1]], [x[2], x[3]])?;
        Ok(DVector::from_vec(vec![range, bearing]))
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (dx, dy) = (x[2] - x[0], x[3] - x[1]);
        let q = dx * dx + dy * dy;
        let rho = q.sqrt();
        if rho < COINCIDENT_EPS {
            return Err(GbpError::CoincidentPoints);
        }
        #[rustfmt::skip]
        let j = DMatrix::from_row_slice(2, 4, &[
            -dx / rho, -dy / rho, dx / rho, dy / rho,
            dy / q,    -dx / q,   -dy / q,  dx / q,
        ]);
        Ok(j)
    }
    fn wrap_residual(&self, r: &mut DVector<f64>) {
        r[1] = wrap_angle(r[1]);
    }
}

/// A user-supplied `h` without an analytic Jacobian; finite differences are used.
#[derive(Clone)]
pub struct ClosureFn {
    pub input_dim: usize,
    pub output_dim: usize,
    #[allow(clippy::type_complexity)]
    pub f: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
}

impl fmt::Debug for ClosureFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosureFn")
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .finish()
    }
}

impl MeasurementFn for ClosureFn {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let y = (self.f)(x);
        if y.iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(GbpError::EvaluationFailure("non-finite output".into()))
        }
    }
}

/// Huber transition point, measured in Mahalanobis units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberParams {
    t: f64,
}

impl HuberParams {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self { t })
        } else {
            Err(GbpError::InvalidSpec(format!("huber t must be > 0, got {t}")))
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

/// Huber energy of a residual: `½M²` below the transition, `tM − ½t²` above,
/// where `M = √(rᵀΣ_n⁻¹r)`.
pub fn huber_energy(r: &DVector<f64>, noise_precision: &DMatrix<f64>, t: f64) -> f64 {
    huber_of_mahalanobis(mahalanobis_sq(r, noise_precision).sqrt(), t)
}

pub(crate) fn huber_of_mahalanobis(m: f64, t: f64) -> f64 {
    if m < t {
        0.5 * m * m
    } else {
        t * m - 0.5 * t * t
    }
}

fn mahalanobis_sq(r: &DVector<f64>, precision: &DMatrix<f64>) -> f64 {
    r.dot(&(precision * r)).max(0.0)
}

/// A measurement model `d ~ h(X) + ε` with optional Huber robustness.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    function: Arc<dyn MeasurementFn>,
    observed: DVector<f64>,
    noise_cov: DMatrix<f64>,
    noise_precision: DMatrix<f64>,
    robust: Option<HuberParams>,
}

/// A factor's Gaussian approximation at a linearization point.
#[derive(Debug, Clone)]
pub struct LinearizedFactor {
    pub gaussian: GaussianCanonical,
    pub linearization_point: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// `c = h(X₀) − J X₀`.
    pub offset: DVector<f64>,
    /// The covariance actually used (scaled when robust).
    pub covariance: DMatrix<f64>,
}

impl MeasurementModel {
    pub fn new(
        function: Arc<dyn MeasurementFn>,
        observed: DVector<f64>,
        noise_cov: DMatrix<f64>,
        robust: Option<HuberParams>,
    ) -> Result<Self> {
        let m = function.output_dim();
        if observed.len() != m {
            return Err(GbpError::DimensionMismatch {
                expected: m,
                found: observed.len(),
            });
        }
        if noise_cov.nrows() != m || noise_cov.ncols() != m {
            return Err(GbpError::DimensionMismatch {
                expected: m,
                found: noise_cov.nrows(),
            });
        }
        let mut noise_cov = noise_cov;
        symmetrize(&mut noise_cov);
        let noise_precision =
            spd_inverse(&noise_cov, DEFAULT_PIVOT_TOL).ok_or(GbpError::SingularCovariance)?;
        Ok(Self {
            function,
            observed,
            noise_cov,
            noise_precision,
            robust,
        })
    }

    /// Isotropic noise `σ²I` convenience constructor.
    pub fn isotropic(
        function: Arc<dyn MeasurementFn>,
        observed: DVector<f64>,
        sigma: f64,
        robust: Option<HuberParams>,
    ) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(GbpError::InvalidSpec(format!("sigma must be > 0, got {sigma}")));
        }
        let m = function.output_dim();
        Self::new(
            function,
            observed,
            DMatrix::identity(m, m) * (sigma * sigma),
            robust,
        )
    }

    pub fn function(&self) -> &Arc<dyn MeasurementFn> {
        &self.function
    }
    pub fn observed(&self) -> &DVector<f64> {
        &self.observed
    }
    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }
    pub fn noise_precision(&self) -> &DMatrix<f64> {
        &self.noise_precision
    }
    pub fn robust(&self) -> Option<HuberParams> {
        self.robust
    }
    pub fn set_robust(&mut self, robust: Option<HuberParams>) {
        self.robust = robust;
    }
    pub(crate) fn clear_robust(&mut self) {
        self.robust = None;
    }
    pub fn input_dim(&self) -> usize {
        self.function.input_dim()
    }
    pub fn is_affine(&self) -> bool {
        self.function.is_affine()
    }

    /// Whether the factor depends on the linearization point at all.
    pub fn requires_relinearization(&self) -> bool {
        !self.is_affine() || self.robust.is_some()
    }

    /// `d − h(X)`, wrapped where the measurement space has angles.
    pub fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let mut r = &self.observed - self.function.eval(x)?;
        self.function.wrap_residual(&mut r);
        Ok(r)
    }

    pub fn mahalanobis(&self, r: &DVector<f64>) -> f64 {
        mahalanobis_sq(r, &self.noise_precision).sqrt()
    }

    /// Energy of the factor at `x` (Huber energy when robust).
    pub fn energy(&self, x: &DVector<f64>) -> Result<f64> {
        let r = self.residual(x)?;
        Ok(match self.robust {
            Some(h) => huber_energy(&r, &self.noise_precision, h.t),
            None => 0.5 * mahalanobis_sq(&r, &self.noise_precision),
        })
    }

    /// Scaled covariance whose quadratic energy matches the Huber energy at `r`.
    pub fn robust_scale(&self, r: &DVector<f64>) -> DMatrix<f64> {
        match self.robust {
            None => self.noise_cov.clone(),
            Some(h) => {
                let m = self.mahalanobis(r);
                if m < h.t {
                    self.noise_cov.clone()
                } else {
                    // ½ rᵀ(kΣ_n)⁻¹r = M²/(2k) = E  ⇒  k = M²/(2E)
                    let e = huber_of_mahalanobis(m, h.t);
                    &self.noise_cov * (m * m / (2.0 * e))
                }
            }
        }
    }

    /// Precision matching [`robust_scale`](Self::robust_scale), without inverting.
    fn scaled_precision(&self, r: &DVector<f64>) -> DMatrix<f64> {
        match self.robust {
            None => self.noise_precision.clone(),
            Some(h) => {
                let m = self.mahalanobis(r);
                if m < h.t {
                    self.noise_precision.clone()
                } else {
                    let e = huber_of_mahalanobis(m, h.t);
                    &self.noise_precision * (2.0 * e / (m * m))
                }
            }
        }
    }

    /// First-order Gaussian approximation at `x0`:
    /// `η = JᵀΣ⁻¹(d − c)`, `Λ = JᵀΣ⁻¹J` with `c = h(X₀) − J X₀`.
    pub fn linearize(&self, x0: &DVector<f64>) -> Result<LinearizedFactor> {
        self.check_input(x0)?;
        let jacobian = self.function.jacobian(x0)?;
        if jacobian.iter().any(|v| !v.is_finite()) {
            return Err(GbpError::NonFiniteJacobian);
        }
        let h0 = self.function.eval(x0)?;
        let mut r0 = &self.observed - &h0;
        self.function.wrap_residual(&mut r0);
        let precision = self.scaled_precision(&r0);
        let covariance = self.robust_scale(&r0);
        let jx0 = &jacobian * x0;
        let offset = &h0 - &jx0;
        // d − c = (d − h(X₀)) + J X₀, using the wrapped residual
        let target = r0 + jx0;
        let jt_p = jacobian.transpose() * &precision;
        let info = &jt_p * target;
        let mut lam = &jt_p * &jacobian;
        symmetrize(&mut lam);
        Ok(LinearizedFactor {
            gaussian: GaussianCanonical {
                info,
                precision: lam,
            },
            linearization_point: x0.clone(),
            jacobian,
            offset,
            covariance,
        })
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(GbpError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }
}

/// `‖X_current − X₀‖_∞ > threshold`.
pub fn needs_relinearization(
    factor: &LinearizedFactor,
    current: &DVector<f64>,
    threshold: f64,
) -> bool {
    (current - &factor.linearization_point).amax() > threshold
}

/// Serializable factor parameters, one variant per shipped factor type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum FactorParams {
    /// Unary Gaussian anchor on a variable of any dimension.
    #[serde(rename = "prior")]
    Prior { mean: Vec<f64>, sigma_n: Vec<Vec<f64>> },
    #[serde(rename = "offset1d")]
    Offset1d {
        d: f64,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        huber_t: Option<f64>,
    },
    #[serde(rename = "smooth1d")]
    Smooth1d {
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        huber_t: Option<f64>,
    },
    #[serde(rename = "relpos2d")]
    RelPos2d { dx: f64, dy: f64, sigma: f64 },
    #[serde(rename = "rangebearing")]
    RangeBearing {
        range: f64,
        bearing: f64,
        sigma_r: f64,
        sigma_b: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        huber_t: Option<f64>,
    },
    #[serde(rename = "custom_linear")]
    CustomLinear {
        #[serde(rename = "J")]
        j: Vec<Vec<f64>>,
        d: Vec<f64>,
        sigma_n: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        huber_t: Option<f64>,
    },
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(GbpError::InvalidSpec("ragged matrix".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn huber(t: Option<f64>) -> Result<Option<HuberParams>> {
    t.map(HuberParams::new).transpose()
}

impl FactorParams {
    /// Type tag as it appears in the graph JSON.
    pub fn type_name(&self) -> &'static str {
        match self {
            FactorParams::Prior { .. } => "prior",
            FactorParams::Offset1d { .. } => "offset1d",
            FactorParams::Smooth1d { .. } => "smooth1d",
            FactorParams::RelPos2d { .. } => "relpos2d",
            FactorParams::RangeBearing { .. } => "rangebearing",
            FactorParams::CustomLinear { .. } => "custom_linear",
        }
    }

    /// Build the measurement model, checking it against the neighbor dimensions.
    pub fn to_model(&self, neighbor_dims: &[usize]) -> Result<MeasurementModel> {
        let expect = |dims: &[usize]| -> Result<()> {
            if neighbor_dims == dims {
                Ok(())
            } else {
                Err(GbpError::InvalidSpec(format!(
                    "{} factor expects neighbor dims {:?}, got {:?}",
                    self.type_name(),
                    dims,
                    neighbor_dims
                )))
            }
        };
        match self {
            FactorParams::Prior { mean, sigma_n } => {
                expect(&[mean.len()])?;
                MeasurementModel::new(
                    Arc::new(Identity { dim: mean.len() }),
                    DVector::from_column_slice(mean),
                    matrix_from_rows(sigma_n)?,
                    None,
                )
            }
            FactorParams::Offset1d { d, sigma, huber_t } => {
                expect(&[1])?;
                MeasurementModel::isotropic(
                    Arc::new(Identity { dim: 1 }),
                    DVector::from_element(1, *d),
                    *sigma,
                    huber(*huber_t)?,
                )
            }
            FactorParams::Smooth1d { sigma, huber_t } => {
                expect(&[1, 1])?;
                MeasurementModel::isotropic(
                    Arc::new(Difference { dim: 1 }),
                    DVector::zeros(1),
                    *sigma,
                    huber(*huber_t)?,
                )
            }
            FactorParams::RelPos2d { dx, dy, sigma } => {
                expect(&[2, 2])?;
                MeasurementModel::isotropic(
                    Arc::new(Difference { dim: 2 }),
                    DVector::from_vec(vec![*dx, *dy]),
                    *sigma,
                    None,
                )
            }
            FactorParams::RangeBearing {
                range,
                bearing,
                sigma_r,
                sigma_b,
                huber_t,
            } => {
                expect(&[2, 2])?;
                if !(*sigma_r > 0.0 && *sigma_b > 0.0) {
                    return Err(GbpError::InvalidSpec("range-bearing sigmas must be > 0".into()));
                }
                MeasurementModel::new(
                    Arc::new(RangeBearing),
                    DVector::from_vec(vec![*range, *bearing]),
                    DMatrix::from_diagonal(&DVector::from_vec(vec![
                        sigma_r * sigma_r,
                        sigma_b * sigma_b,
                    ])),
                    huber(*huber_t)?,
                )
            }
            FactorParams::CustomLinear {
                j,
                d,
                sigma_n,
                huber_t,
            } => {
                let jac = matrix_from_rows(j)?;
                let total: usize = neighbor_dims.iter().sum();
                if jac.ncols() != total {
                    return Err(GbpError::DimensionMismatch {
                        expected: total,
                        found: jac.ncols(),
                    });
                }
                MeasurementModel::new(
                    Arc::new(Linear { jacobian: jac }),
                    DVector::from_column_slice(d),
                    matrix_from_rows(sigma_n)?,
                    huber(*huber_t)?,
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn scalar(function: Arc<dyn MeasurementFn>, d: f64, sigma: f64, t: Option<f64>) -> MeasurementModel {
        MeasurementModel::isotropic(
            function,
            dvector![d],
            sigma,
            t.map(|t| HuberParams::new(t).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn affine_identity_is_point_independent() {
        let m = scalar(Arc::new(Identity { dim: 1 }), 5.0, 1.0, None);
        for x0 in [-3.0, 0.0, 7.5] {
            let lin = m.linearize(&dvector![x0]).unwrap();
            assert_relative_eq!(lin.gaussian.info, dvector![5.0], epsilon = 1e-12);
            assert_eq!(lin.gaussian.precision, dmatrix![1.0]);
        }
    }

    #[test]
    fn square_linearization() {
        // h = x², X₀ = 1: J = 2, c = 1 − 2 = −1, η = 2·(2 − (−1)) = 6, Λ = 4.
        let m = scalar(Arc::new(Square), 2.0, 1.0, None);
        let lin = m.linearize(&dvector![1.0]).unwrap();
        assert_eq!(lin.jacobian, dmatrix![2.0]);
        assert_relative_eq!(lin.offset, dvector![-1.0]);
        assert_relative_eq!(lin.gaussian.info, dvector![6.0], epsilon = 1e-12);
        assert_relative_eq!(lin.gaussian.precision, dmatrix![4.0], epsilon = 1e-12);
    }

    #[test]
    fn smoothness_linearization_is_rank_one() {
        let sigma = 0.5;
        let m = MeasurementModel::isotropic(Arc::new(Difference { dim: 1 }), dvector![0.0], sigma, None)
            .unwrap();
        let lin = m.linearize(&dvector![0.3, -1.2]).unwrap();
        assert_eq!(lin.jacobian, dmatrix![-1.0, 1.0]);
        let expected = dmatrix![1.0, -1.0; -1.0, 1.0] / (sigma * sigma);
        assert_relative_eq!(lin.gaussian.precision, expected, epsilon = 1e-12);
        assert_relative_eq!(lin.gaussian.info, dvector![0.0, 0.0], epsilon = 1e-12);
        assert!(lin.gaussian.to_moments().is_err());
    }

    #[test]
    fn huber_energy_examples() {
        let p = dmatrix![1.0];
        assert_eq!(huber_energy(&dvector![0.0], &p, 1.0), 0.0);
        assert_relative_eq!(huber_energy(&dvector![2.0], &p, 1.0), 1.5, epsilon = 1e-15);
        for t in [0.3, 1.0, 2.5] {
            let quad: f64 = 0.5 * t * t;
            let lin = t * t - 0.5 * t * t;
            assert!((quad - lin).abs() <= 1e-12);
            assert!((huber_energy(&dvector![t], &p, t) - quad).abs() <= 1e-12);
        }
    }

    #[test]
    fn robust_scale_examples() {
        let m = scalar(Arc::new(Identity { dim: 1 }), 0.0, 1.0, Some(1.0));
        assert_eq!(m.robust_scale(&dvector![0.5]), dmatrix![1.0]);
        // r = 2, t = 1: E = 1.5, Σ_sc = r²/(2E) = 4/3.
        assert_relative_eq!(m.robust_scale(&dvector![2.0]), dmatrix![4.0 / 3.0], epsilon = 1e-15);
    }

    #[test]
    fn relinearization_threshold() {
        let m = scalar(Arc::new(Square), 2.0, 1.0, None);
        let lin = m.linearize(&dvector![1.0]).unwrap();
        assert!(!needs_relinearization(&lin, &dvector![1.0], 0.1));
        assert!(needs_relinearization(&lin, &dvector![1.2], 0.1));
        assert!(!needs_relinearization(&lin, &dvector![1.05], 0.1));
        let affine = scalar(Arc::new(Identity { dim: 1 }), 0.0, 1.0, None);
        assert!(!affine.requires_relinearization());
        assert!(m.requires_relinearization());
    }

    #[test]
    fn range_bearing_examples() {
        assert_eq!(range_bearing_h([0.0, 0.0], [1.0, 0.0]).unwrap(), [1.0, 0.0]);
        let [r, b] = range_bearing_h([0.0, 0.0], [0.0, 2.0]).unwrap();
        assert_eq!(r, 2.0);
        assert_relative_eq!(b, PI / 2.0);
        assert!(matches!(
            range_bearing_h([1.0, 1.0], [1.0, 1.0]),
            Err(GbpError::CoincidentPoints)
        ));
        let x = dvector![0.0, 0.0, 1.0, 0.0];
        let a = RangeBearing.jacobian(&x).unwrap();
        let fd = finite_difference_jacobian(|p| RangeBearing.eval(p), &x).unwrap();
        assert!((a - fd).amax() <= 1e-5);
    }

    #[test]
    fn bearing_residual_wraps() {
        let m = FactorParams::RangeBearing {
            range: 1.0,
            bearing: PI - 0.01,
            sigma_r: 0.1,
            sigma_b: 0.1,
            huber_t: None,
        }
        .to_model(&[2, 2])
        .unwrap();
        // True bearing just below −π + 0.01, observed near +π: residual must be small.
        let x = dvector![0.0, 0.0, -1.0, -0.01];
        let r = m.residual(&x).unwrap();
        assert!(r[1].abs() < 0.03, "{}", r[1]);
        assert!(wrap_angle(PI) == PI && wrap_angle(-PI) == PI);
    }

    #[test]
    fn params_dimension_checks() {
        let p = FactorParams::Smooth1d { sigma: 1.0, huber_t: None };
        assert!(p.to_model(&[1, 1]).is_ok());
        assert!(matches!(p.to_model(&[2, 2]), Err(GbpError::InvalidSpec(_))));
        let bad = FactorParams::Offset1d { d: 0.0, sigma: -1.0, huber_t: None };
        assert!(bad.to_model(&[1]).is_err());
    }

    proptest! {
        #[test]
        fn energy_matching_identity(r in -50.0f64..50.0, s in 0.1f64..3.0, t in 0.1f64..4.0) {
            let m = scalar(Arc::new(Identity { dim: 1 }), 0.0, s, Some(t));
            let r = dvector![r];
            let sc = m.robust_scale(&r);
            let quad = 0.5 * r[0] * r[0] / sc[(0, 0)];
            let e = huber_energy(&r, m.noise_precision(), t);
            prop_assert!((quad - e).abs() <= 1e-12 * e.max(1.0));
            prop_assert!(sc[(0, 0)] >= m.noise_cov()[(0, 0)] * (1.0 - 1e-15));
        }

        #[test]
        fn huber_monotone(a in 0.0f64..20.0, b in 0.0f64..20.0, t in 0.1f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(huber_of_mahalanobis(lo, t) <= huber_of_mahalanobis(hi, t));
        }

        #[test]
        fn affine_linearization_point_independent(
            j in prop::collection::vec(-2.0f64..2.0, 6),
            x0 in prop::collection::vec(-5.0f64..5.0, 3),
            x1 in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let m = MeasurementModel::isotropic(
                Arc::new(Linear { jacobian: DMatrix::from_row_slice(2, 3, &j) }),
                dvector![1.0, -0.5],
                0.7,
                None,
            ).unwrap();
            let a = m.linearize(&DVector::from_vec(x0)).unwrap().gaussian;
            let b = m.linearize(&DVector::from_vec(x1)).unwrap().gaussian;
            prop_assert!((&a.info - &b.info).amax() <= 1e-12);
            prop_assert!((&a.precision - &b.precision).amax() <= 1e-12);
        }
    }
}
