//! Dense Gaussian algebra in moments and canonical (information) form.
//!
//! Canonical form is the currency of the engine: factors, messages and
//! beliefs are all `(η, Λ)` pairs. Products are sums, marginals are Schur
//! complements, and a rank-deficient `Λ` is a legal value that simply leaves
//! some directions unconstrained.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GbpError, Result};

/// Relative pivot threshold shared by every invertibility check.
pub const DEFAULT_PIVOT_TOL: f64 = 1e-12;

/// Gaussian parameterized by mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Gaussian parameterized by information vector `η = Σ⁻¹μ` and precision `Λ = Σ⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCanonical {
    pub info: DVector<f64>,
    pub precision: DMatrix<f64>,
}

/// Replace `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization that also rejects numerically singular matrices:
/// the smallest pivot must exceed `tol` times the largest.
pub(crate) fn spd_factor(m: &DMatrix<f64>, tol: f64) -> Option<Cholesky<f64, Dyn>> {
    if m.nrows() == 0 || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = Cholesky::new(m.clone())?;
    let l = chol.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..m.nrows() {
        let pivot = l[(i, i)] * l[(i, i)];
        lo = lo.min(pivot);
        hi = hi.max(pivot);
    }
    if !(lo > tol * hi) {
        return None;
    }
    Some(chol)
}

/// Inverse of a symmetric positive definite matrix, or `None` when singular.
pub(crate) fn spd_inverse(m: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let mut inv = spd_factor(m, tol)?.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_square(&covariance, mean.len())?;
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_canonical(&self) -> Result<GaussianCanonical> {
        self.to_canonical_with_tol(DEFAULT_PIVOT_TOL)
    }

    pub fn to_canonical_with_tol(&self, tol: f64) -> Result<GaussianCanonical> {
        let chol = spd_factor(&self.covariance, tol).ok_or(GbpError::SingularCovariance)?;
        let mut precision = chol.inverse();
        symmetrize(&mut precision);
        let info = chol.solve(&self.mean);
        Ok(GaussianCanonical { info, precision })
    }
}

impl GaussianCanonical {
    pub fn new(info: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        check_square(&precision, info.len())?;
        let mut precision = precision;
        symmetrize(&mut precision);
        Ok(Self { info, precision })
    }

    /// The zero-information Gaussian (`η = 0`, `Λ = 0`), identity of [`product`](Self::product).
    pub fn zero(dim: usize) -> Self {
        Self {
            info: DVector::zeros(dim),
            precision: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.info.len()
    }

    pub fn is_zero(&self) -> bool {
        self.info.iter().all(|v| *v == 0.0) && self.precision.iter().all(|v| *v == 0.0)
    }

    pub fn to_moments(&self) -> Result<GaussianMoments> {
        self.to_moments_with_tol(DEFAULT_PIVOT_TOL)
    }

    pub fn to_moments_with_tol(&self, tol: f64) -> Result<GaussianMoments> {
        let chol = spd_factor(&self.precision, tol).ok_or(GbpError::SingularPrecision)?;
        let mut covariance = chol.inverse();
        symmetrize(&mut covariance);
        let mean = chol.solve(&self.info);
        Ok(GaussianMoments { mean, covariance })
    }

    /// Mean only, solving `Λμ = η` without forming the covariance.
    pub fn mean_with_tol(&self, tol: f64) -> Result<DVector<f64>> {
        if self.dim() == 1 {
            let lam = self.precision[(0, 0)];
            return if lam > 0.0 && lam.is_finite() {
                Ok(DVector::from_element(1, self.info[0] / lam))
            } else {
                Err(GbpError::SingularPrecision)
            };
        }
        let chol = spd_factor(&self.precision, tol).ok_or(GbpError::SingularPrecision)?;
        Ok(chol.solve(&self.info))
    }

    /// Product of densities (up to normalization).
    pub fn product(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(GbpError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let mut precision = &self.precision + &other.precision;
        symmetrize(&mut precision);
        Ok(Self {
            info: &self.info + &other.info,
            precision,
        })
    }

    /// In-place product; dimensions must agree.
    pub(crate) fn accumulate(&mut self, other: &Self) {
        self.info += &other.info;
        self.precision += &other.precision;
    }

    pub fn marginalize(&self, keep: &[usize]) -> Result<Self> {
        self.marginalize_with_tol(keep, DEFAULT_PIVOT_TOL)
    }

    /// Marginal over the indices in `keep` (in the given order), via the
    /// Schur complement of the dropped block.
    pub fn marginalize_with_tol(&self, keep: &[usize], tol: f64) -> Result<Self> {
        let n = self.dim();
        let mut kept = vec![false; n];
        for &k in keep {
            if k >= n {
                return Err(GbpError::DimensionMismatch {
                    expected: n,
                    found: k + 1,
                });
            }
            kept[k] = true;
        }
        let drop: Vec<usize> = (0..n).filter(|i| !kept[*i]).collect();
        let eta_a = DVector::from_fn(keep.len(), |i, _| self.info[keep[i]]);
        let mut lam_aa = DMatrix::from_fn(keep.len(), keep.len(), |i, j| {
            self.precision[(keep[i], keep[j])]
        });
        if drop.is_empty() {
            symmetrize(&mut lam_aa);
            return Ok(Self {
                info: eta_a,
                precision: lam_aa,
            });
        }
        let eta_b = DVector::from_fn(drop.len(), |i, _| self.info[drop[i]]);
        let lam_ab = DMatrix::from_fn(keep.len(), drop.len(), |i, j| {
            self.precision[(keep[i], drop[j])]
        });
        let lam_bb = DMatrix::from_fn(drop.len(), drop.len(), |i, j| {
            self.precision[(drop[i], drop[j])]
        });
        let chol = spd_factor(&lam_bb, tol).ok_or(GbpError::SingularBlock)?;
        // Λ_bb⁻¹ Λ_ba and Λ_bb⁻¹ η_b
        let lam_bb_inv_ba = chol.solve(&lam_ab.transpose());
        let lam_bb_inv_eta = chol.solve(&eta_b);
        let info = eta_a - &lam_ab * lam_bb_inv_eta;
        let mut precision = lam_aa - &lam_ab * lam_bb_inv_ba;
        symmetrize(&mut precision);
        Ok(Self { info, precision })
    }

    /// `β·self + (1−β)·old`, the canonical-form message damping rule.
    pub fn blend(&self, old: &Self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(GbpError::InvalidBeta(beta));
        }
        if self.dim() != old.dim() {
            return Err(GbpError::DimensionMismatch {
                expected: self.dim(),
                found: old.dim(),
            });
        }
        if beta == 1.0 {
            return Ok(self.clone());
        }
        let mut precision = &self.precision * beta + &old.precision * (1.0 - beta);
        symmetrize(&mut precision);
        Ok(Self {
            info: &self.info * beta + &old.info * (1.0 - beta),
            precision,
        })
    }

    /// `‖η_a − η_b‖₂ + ‖Λ_a − Λ_b‖_F`.
    pub fn distance(&self, other: &Self) -> f64 {
        (&self.info - &other.info).norm() + (&self.precision - &other.precision).norm()
    }
}

fn check_square(m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.nrows() != dim {
        return Err(GbpError::DimensionMismatch {
            expected: dim,
            found: m.nrows(),
        });
    }
    if m.ncols() != dim {
        return Err(GbpError::DimensionMismatch {
            expected: dim,
            found: m.ncols(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn canon(eta: DVector<f64>, lam: DMatrix<f64>) -> GaussianCanonical {
        GaussianCanonical::new(eta, lam).unwrap()
    }

    #[test]
    fn identity_precision_to_moments() {
        let m = canon(dvector![0.0], dmatrix![1.0]).to_moments().unwrap();
        assert_eq!(m.mean, dvector![0.0]);
        assert_eq!(m.covariance, dmatrix![1.0]);
    }

    #[test]
    fn two_by_two_to_moments() {
        // Λμ = η with Λ = [[2,-1],[-1,2]], η = [1,1]: 2μ₁ − μ₂ = 1 and −μ₁ + 2μ₂ = 1 give μ = [1,1].
        let m = canon(dvector![1.0, 1.0], dmatrix![2.0, -1.0; -1.0, 2.0])
            .to_moments()
            .unwrap();
        assert_relative_eq!(m.mean, dvector![1.0, 1.0], epsilon = 1e-12);
        let expected = dmatrix![2.0, 1.0; 1.0, 2.0] / 3.0;
        assert_relative_eq!(m.covariance, expected, epsilon = 1e-12);
    }

    #[test]
    fn rank_one_precision_is_singular() {
        let err = canon(dvector![0.0, 0.0], dmatrix![1.0, -1.0; -1.0, 1.0]).to_moments();
        assert!(matches!(err, Err(GbpError::SingularPrecision)));
    }

    #[test]
    fn moments_to_canonical_examples() {
        let g = GaussianMoments::new(dvector![0.0], dmatrix![1.0])
            .unwrap()
            .to_canonical()
            .unwrap();
        assert_eq!(g.info, dvector![0.0]);
        assert_eq!(g.precision, dmatrix![1.0]);

        let g = GaussianMoments::new(dvector![2.0], dmatrix![0.5])
            .unwrap()
            .to_canonical()
            .unwrap();
        assert_relative_eq!(g.info, dvector![4.0], epsilon = 1e-12);
        assert_relative_eq!(g.precision, dmatrix![2.0], epsilon = 1e-12);

        let g = GaussianMoments::new(dvector![1.0, 1.0], dmatrix![2.0, 1.0; 1.0, 2.0] / 3.0)
            .unwrap()
            .to_canonical()
            .unwrap();
        assert_relative_eq!(g.info, dvector![1.0, 1.0], epsilon = 1e-12);
        assert_relative_eq!(g.precision, dmatrix![2.0, -1.0; -1.0, 2.0], epsilon = 1e-12);
    }

    #[test]
    fn singular_covariance() {
        let r = GaussianMoments::new(dvector![0.0, 0.0], dmatrix![1.0, 1.0; 1.0, 1.0])
            .unwrap()
            .to_canonical();
        assert!(matches!(r, Err(GbpError::SingularCovariance)));
    }

    #[test]
    fn product_examples() {
        let g = canon(dvector![1.0, -2.0], dmatrix![3.0, 1.0; 1.0, 2.0]);
        assert_eq!(g.product(&GaussianCanonical::zero(2)).unwrap(), g);

        let a = canon(dvector![0.0], dmatrix![1.0]);
        let b = canon(dvector![1.0], dmatrix![1.0]);
        let p = a.product(&b).unwrap();
        assert_eq!(p.info, dvector![1.0]);
        assert_eq!(p.precision, dmatrix![2.0]);
        let m = p.to_moments().unwrap();
        assert_relative_eq!(m.mean[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(m.covariance[(0, 0)], 0.5, epsilon = 1e-15);

        let r = a.product(&g);
        assert!(matches!(r, Err(GbpError::DimensionMismatch { .. })));
    }

    #[test]
    fn marginalize_examples() {
        let g = canon(dvector![1.0, 1.0], dmatrix![2.0, 1.0; 1.0, 2.0]);
        assert_eq!(g.marginalize(&[0, 1]).unwrap(), g);

        // Σ = Λ⁻¹ = (1/3)[[2,-1],[-1,2]], μ = Σ·[1,1] = [1/3, 1/3]; marginal of x₀: σ² = 2/3, μ = 1/3
        // so Λ' = 1.5 and η' = 1.5/3 = 0.5.
        let m = g.marginalize(&[0]).unwrap();
        assert_relative_eq!(m.info, dvector![0.5], epsilon = 1e-12);
        assert_relative_eq!(m.precision, dmatrix![1.5], epsilon = 1e-12);

        let block = canon(
            dvector![1.0, 2.0, 3.0],
            dmatrix![2.0, 0.5, 0.0; 0.5, 1.0, 0.0; 0.0, 0.0, 4.0],
        );
        let m = block.marginalize(&[0, 1]).unwrap();
        assert_eq!(m.info, dvector![1.0, 2.0]);
        assert_eq!(m.precision, dmatrix![2.0, 0.5; 0.5, 1.0]);
    }

    #[test]
    fn marginalize_singular_block() {
        let g = canon(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 0.0]);
        assert!(matches!(g.marginalize(&[0]), Err(GbpError::SingularBlock)));
    }

    #[test]
    fn blend_rules() {
        let new = canon(dvector![2.0], dmatrix![2.0]);
        let old = canon(dvector![0.0], dmatrix![1.0]);
        assert_eq!(new.blend(&old, 1.0).unwrap(), new);
        let d = new.blend(&old, 0.5).unwrap();
        assert_eq!(d.info, dvector![1.0]);
        assert_eq!(d.precision, dmatrix![1.5]);
        for beta in [0.1, 0.3, 0.9] {
            assert_eq!(new.blend(&new, beta).unwrap(), new);
        }
        assert!(matches!(new.blend(&old, 0.0), Err(GbpError::InvalidBeta(_))));
        assert!(matches!(new.blend(&old, 1.5), Err(GbpError::InvalidBeta(_))));
    }

    fn spd(dim: usize) -> impl Strategy<Value = GaussianCanonical> {
        (
            prop::collection::vec(-1.0f64..1.0, dim * dim),
            prop::collection::vec(-3.0f64..3.0, dim),
        )
            .prop_map(move |(a, eta)| {
                let a = DMatrix::from_vec(dim, dim, a);
                let lam = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5;
                GaussianCanonical::new(DVector::from_vec(eta), lam).unwrap()
            })
    }

    fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        let scale = b.amax().max(1.0);
        (a - b).amax() <= tol * scale
    }

    proptest! {
        #[test]
        fn round_trip(g in (1usize..=6).prop_flat_map(spd)) {
            let back = g.to_moments().unwrap().to_canonical().unwrap();
            prop_assert!(rel_close(&back.precision, &g.precision, 1e-9));
            let scale = g.info.amax().max(1.0);
            prop_assert!((&back.info - &g.info).amax() <= 1e-9 * scale);
        }

        #[test]
        fn product_associative(a in spd(3), b in spd(3), c in spd(3)) {
            let l = a.product(&b).unwrap().product(&c).unwrap();
            let r = a.product(&b.product(&c).unwrap()).unwrap();
            prop_assert!((&l.info - &r.info).amax() <= 1e-12);
            prop_assert!((&l.precision - &r.precision).amax() <= 1e-12);
            prop_assert_eq!(a.product(&b).unwrap(), b.product(&a).unwrap());
        }

        #[test]
        fn nested_marginalization(g in spd(6), split in 1usize..5) {
            let outer: Vec<usize> = (0..=split).collect();
            let inner: Vec<usize> = (0..split).collect();
            let two_step = g.marginalize(&outer).unwrap().marginalize(&inner).unwrap();
            let direct = g.marginalize(&inner).unwrap();
            prop_assert!(rel_close(&two_step.precision, &direct.precision, 1e-9));
            prop_assert!((&two_step.info - &direct.info).amax() <= 1e-9 * direct.info.amax().max(1.0));
        }

        #[test]
        fn marginal_matches_covariance_deletion(g in spd(5), mask in prop::collection::vec(any::<bool>(), 5)) {
            let keep: Vec<usize> = (0..5).filter(|i| mask[*i]).collect();
            prop_assume!(!keep.is_empty());
            let m = g.to_moments().unwrap();
            let sub = GaussianMoments::new(
                DVector::from_fn(keep.len(), |i, _| m.mean[keep[i]]),
                DMatrix::from_fn(keep.len(), keep.len(), |i, j| m.covariance[(keep[i], keep[j])]),
            ).unwrap().to_canonical().unwrap();
            let direct = g.marginalize(&keep).unwrap();
            prop_assert!(rel_close(&direct.precision, &sub.precision, 1e-9));
            prop_assert!((&direct.info - &sub.info).amax() <= 1e-9 * sub.info.amax().max(1.0));
        }

        #[test]
        fn results_symmetric(g in spd(4), h in spd(4)) {
            let p = g.product(&h).unwrap().marginalize(&[0, 2]).unwrap();
            prop_assert!((&p.precision - p.precision.transpose()).amax() <= 1e-12);
            let m = g.to_moments().unwrap();
            prop_assert!((&m.covariance - m.covariance.transpose()).amax() <= 1e-12);
        }
    }
}
