//! Exact dense reference solvers and two classical baselines.
//!
//! The joint Gaussian `p(X) ∝ exp(−½XᵀΛX + ηᵀX)` is assembled into dense
//! storage, so the MAP estimate is `Λ⁻¹η` and marginal covariances are the
//! diagonal blocks of `Λ⁻¹`. Meant for desk-scale verification only.

use nalgebra::{DMatrix, DVector};

use crate::error::{GbpError, Result};
use crate::factor_graph::{Assignment, FactorGraph, VarId};
use crate::gaussian::{spd_factor, symmetrize, GaussianMoments, DEFAULT_PIVOT_TOL};

/// Stacked joint canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSystem {
    pub eta: DVector<f64>,
    pub lambda: DMatrix<f64>,
    /// `(variable, offset, dim)` for every live variable.
    pub layout: Vec<(VarId, usize, usize)>,
    slots: usize,
}

impl DenseSystem {
    /// A system of scalar variables `VarId(0..n)`.
    pub fn scalar(eta: DVector<f64>, lambda: DMatrix<f64>) -> Self {
        let layout = (0..eta.len()).map(|i| (VarId(i), i, 1)).collect();
        Self {
            slots: eta.len(),
            eta,
            lambda,
            layout,
        }
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    /// Offset and dimension of `v` in the stacked vector.
    pub fn block(&self, v: VarId) -> Option<(usize, usize)> {
        self.layout
            .iter()
            .find(|(id, _, _)| *id == v)
            .map(|(_, o, d)| (*o, *d))
    }

    /// Split a stacked vector into a per-slot assignment.
    pub fn unstack(&self, x: &DVector<f64>) -> Assignment {
        let mut out = vec![None; self.slots];
        for (v, o, d) in &self.layout {
            out[v.0] = Some(x.rows(*o, *d).into_owned());
        }
        out
    }

    /// Stack a per-slot assignment; missing entries are zero.
    pub fn stack(&self, x: &Assignment) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (v, o, d) in &self.layout {
            if let Some(Some(val)) = x.get(v.0) {
                out.rows_mut(*o, *d).copy_from(val);
            }
        }
        out
    }
}

/// Sum every prior and every factor's current Gaussian into the joint layout.
pub fn assemble(g: &FactorGraph) -> DenseSystem {
    let (layout, total) = g.layout();
    let mut offsets = vec![usize::MAX; g.variable_slots()];
    for (v, o, _) in &layout {
        offsets[v.0] = *o;
    }
    let mut eta = DVector::zeros(total);
    let mut lambda = DMatrix::zeros(total, total);
    for (id, var) in g.variables() {
        if let Some(p) = var.prior() {
            let o = offsets[id.0];
            let d = var.dim();
            let mut rows = eta.rows_mut(o, d);
            rows += &p.info;
            let mut block = lambda.view_mut((o, o), (d, d));
            block += &p.precision;
        }
    }
    for (_, f) in g.factors() {
        let gauss = f.gaussian();
        let blocks = g.factor_blocks(f);
        for (vi, li, di) in &blocks {
            let oi = offsets[vi.0];
            let mut rows = eta.rows_mut(oi, *di);
            rows += gauss.info.rows(*li, *di);
            for (vj, lj, dj) in &blocks {
                let oj = offsets[vj.0];
                let mut block = lambda.view_mut((oi, oj), (*di, *dj));
                block += gauss.precision.view((*li, *lj), (*di, *dj));
            }
        }
    }
    symmetrize(&mut lambda);
    DenseSystem {
        eta,
        lambda,
        layout,
        slots: g.variable_slots(),
    }
}

/// MAP means `μ = Λ⁻¹η` as a per-slot assignment.
pub fn map_solve(sys: &DenseSystem) -> Result<Assignment> {
    Ok(sys.unstack(&solve_stacked(sys)?))
}

fn solve_stacked(sys: &DenseSystem) -> Result<DVector<f64>> {
    if sys.dim() == 0 {
        return Ok(DVector::zeros(0));
    }
    let chol = spd_factor(&sys.lambda, DEFAULT_PIVOT_TOL).ok_or(GbpError::SingularPrecision)?;
    Ok(chol.solve(&sys.eta))
}

/// Per-variable marginal moments: blocks of `Λ⁻¹η` and diagonal blocks of `Λ⁻¹`.
pub fn marginals(sys: &DenseSystem) -> Result<Vec<Option<GaussianMoments>>> {
    let mut out = vec![None; sys.slots];
    if sys.dim() == 0 {
        return Ok(out);
    }
    let chol = spd_factor(&sys.lambda, DEFAULT_PIVOT_TOL).ok_or(GbpError::SingularPrecision)?;
    let mu = chol.solve(&sys.eta);
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    for (v, o, d) in &sys.layout {
        out[v.0] = Some(GaussianMoments {
            mean: mu.rows(*o, *d).into_owned(),
            covariance: cov.view((*o, *o), (*d, *d)).into_owned(),
        });
    }
    Ok(out)
}

/// Result of [`gauss_newton`].
#[derive(Debug, Clone)]
pub struct GaussNewtonResult {
    pub means: Assignment,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Total energy after each iteration.
    pub energies: Vec<f64>,
}

/// Plain Gauss-Newton: relinearize every factor at the current estimate and
/// solve the resulting linear system, until the step is below `tol` (∞-norm).
/// Robust factors are rescaled at every relinearization (IRLS).
///
/// Starts from the graph's current estimates and works on a copy.
pub fn gauss_newton(g: &FactorGraph, max_iters: usize, tol: f64) -> Result<GaussNewtonResult> {
    let mut work = g.clone();
    let mut x = work.current_estimates();
    let mut energies = Vec::new();
    for iter in 1..=max_iters {
        work.relinearize_all(&x)?;
        let sys = assemble(&work);
        let next = solve_stacked(&sys)?;
        let step = (&next - sys.stack(&x)).amax();
        x = sys.unstack(&next);
        energies.push(work.total_energy(&x)?);
        if step < tol {
            return Ok(GaussNewtonResult {
                means: x,
                energy: *energies.last().expect("nonempty"),
                iterations: iter,
                converged: true,
                energies,
            });
        }
    }
    let energy = match energies.last() {
        Some(e) => *e,
        None => work.total_energy(&x)?,
    };
    Ok(GaussNewtonResult {
        means: x,
        energy,
        iterations: max_iters,
        converged: false,
        energies,
    })
}

/// Jacobi iteration `μ ← D⁻¹(η − (Λ−D)μ)` from `μ = 0`, for `iters` sweeps.
pub fn jacobi_solve(sys: &DenseSystem, iters: usize) -> Result<Assignment> {
    let n = sys.dim();
    let diag = sys.lambda.diagonal();
    if let Some(i) = (0..n).find(|i| diag[*i] == 0.0) {
        return Err(GbpError::ZeroDiagonal(i));
    }
    let mut mu = DVector::zeros(n);
    for _ in 0..iters {
        let mut off = &sys.lambda * &mu;
        off -= diag.component_mul(&mu);
        mu = (&sys.eta - off).component_div(&diag);
    }
    Ok(sys.unstack(&mu))
}
