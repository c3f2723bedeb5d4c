//! Small dense linear-control algebra.
//!
//! Spectra, continuous Lyapunov equations, and the degenerate Riccati
//! equation `MᵀQ + QM = Q²` whose stabilizing solution gives the minimal
//! stationary effort needed to stabilize `dX = MX dt + dW`:
//!
//! ```text
//! (1/2) trace(Q) = Λ⁺(M) = sum of Re λ over the unstable spectrum of M
//! ```
//!
//! Problem sizes are tiny (d ≤ 8 in practice), so Lyapunov equations are
//! solved through their dense Kronecker linearization.

use std::fmt;
use std::ops::Deref;

use nalgebra::{Complex, DMatrix, DVector, Schur};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Eigenvalues with `|Re λ|` at or below this are treated as lying on the imaginary axis.
pub const DEFAULT_AXIS_TOL: f64 = 1e-9;

const SCHUR_MAX_ITER: usize = 10_000;

/// A finite, real, square matrix of dimension at least one.
///
/// Serializes as a row-major array of rows.
#[derive(Clone, PartialEq)]
pub struct SquareMatrix(DMatrix<f64>);

impl SquareMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::domain(format!(
                "matrix is {}x{}, expected square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::domain("matrix dimension must be at least 1"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("matrix has non-finite entries"));
        }
        Ok(SquareMatrix(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::domain("ragged or non-square row data"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(d, d, &flat))
    }

    pub fn from_row_slice(d: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != d * d {
            return Err(Error::domain(format!(
                "expected {} entries for a {d}x{d} matrix, got {}",
                d * d,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(d, d, entries))
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, v))
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn identity(d: usize) -> Self {
        SquareMatrix(DMatrix::identity(d, d))
    }

    pub fn zeros(d: usize) -> Self {
        SquareMatrix(DMatrix::zeros(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// Frobenius norm of `self - selfᵀ`.
    pub fn asymmetry(&self) -> f64 {
        (&self.0 - self.0.transpose()).norm()
    }
}

impl Deref for SquareMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl fmt::Debug for SquareMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("SquareMatrix").field(&self.to_rows()).finish()
    }
}

impl Serialize for SquareMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SquareMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        SquareMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Spectrum of a real matrix relative to the imaginary axis.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralSummary {
    #[serde(serialize_with = "serialize_complex_list")]
    pub eigenvalues: Vec<Complex<f64>>,
    pub is_hurwitz: bool,
    pub is_dichotomous: bool,
    /// Λ⁺: sum of real parts of eigenvalues with `Re λ > axis_tol`.
    pub unstable_trace: f64,
    /// Number of eigenvalues with `Re λ > axis_tol` (the index of an equilibrium).
    pub unstable_count: usize,
    pub min_abs_real: f64,
}

fn serialize_complex_list<S: Serializer>(
    v: &[Complex<f64>],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let pairs: Vec<[f64; 2]> = v.iter().map(|c| [c.re, c.im]).collect();
    pairs.serialize(s)
}

/// Eigenvalues of a dense nonsymmetric matrix, sorted by real then imaginary part.
pub fn eigenvalues(m: &SquareMatrix) -> Result<Vec<Complex<f64>>> {
    let mut ev: Vec<Complex<f64>> = if m.dim() == 1 {
        vec![Complex::new(m[(0, 0)], 0.0)]
    } else {
        let schur = Schur::try_new(m.as_matrix().clone(), f64::EPSILON, SCHUR_MAX_ITER)
            .ok_or_else(|| Error::numeric_with("Schur iteration did not converge", m))?;
        schur.complex_eigenvalues().iter().copied().collect()
    };
    ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(ev)
}

pub fn spectral_summary(m: &SquareMatrix, axis_tol: f64) -> Result<SpectralSummary> {
    let eigenvalues = eigenvalues(m)?;
    let mut unstable_trace = 0.0;
    let mut unstable_count = 0;
    let mut max_re = f64::NEG_INFINITY;
    let mut min_abs_real = f64::INFINITY;
    for l in &eigenvalues {
        if l.re > axis_tol {
            unstable_trace += l.re;
            unstable_count += 1;
        }
        max_re = max_re.max(l.re);
        min_abs_real = min_abs_real.min(l.re.abs());
    }
    Ok(SpectralSummary {
        is_hurwitz: max_re < -axis_tol,
        is_dichotomous: min_abs_real > axis_tol,
        unstable_trace,
        unstable_count,
        min_abs_real,
        eigenvalues,
    })
}

/// Λ⁺(M) with the default axis tolerance.
pub fn unstable_trace(m: &SquareMatrix) -> Result<f64> {
    Ok(spectral_summary(m, DEFAULT_AXIS_TOL)?.unstable_trace)
}

fn require_hurwitz(a: &DMatrix<f64>, what: &str) -> Result<()> {
    let sq = SquareMatrix::new(a.clone())?;
    let spec = spectral_summary(&sq, 0.0)?;
    if spec.is_hurwitz {
        Ok(())
    } else {
        let max_re = spec
            .eigenvalues
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max);
        Err(Error::domain(format!(
            "{what} is not Hurwitz (max Re λ = {max_re:.3e})"
        )))
    }
}

/// `‖A X + X Aᵀ + C‖_F`.
pub fn lyapunov_residual(a: &DMatrix<f64>, x: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    (a * x + x * a.transpose() + c).norm()
}

/// Solves `A X + X Aᵀ = −C` by the Kronecker linearization, without a stability check.
fn lyapunov_kron(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let n = d * d;
    // vec index p = i + d*j holds X[(i, j)] (column-major).
    let mut k = DMatrix::<f64>::zeros(n, n);
    for j in 0..d {
        for i in 0..d {
            let p = i + d * j;
            for q in 0..d {
                k[(p, q + d * j)] += a[(i, q)];
                k[(p, i + d * q)] += a[(j, q)];
            }
        }
    }
    let lu = k.lu();
    let solve = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let b = DVector::from_iterator(n, rhs.iter().copied());
        let x = lu
            .solve(&b)
            .ok_or_else(|| Error::numeric_with("singular Kronecker system in Lyapunov solve", a))?;
        Ok(DMatrix::from_column_slice(d, d, x.as_slice()))
    };
    let mut x = solve(&(-c))?;
    // one step of iterative refinement
    let r = -(a * &x + &x * a.transpose() + c);
    x += solve(&r)?;
    let xs = (&x + x.transpose()) * 0.5;
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric_with("non-finite Lyapunov solution", a));
    }
    Ok(xs)
}

/// Symmetric solution of `A X + X Aᵀ = −C` for Hurwitz `A` and symmetric `C`.
pub fn solve_lyapunov(a: &SquareMatrix, c: &SquareMatrix) -> Result<SquareMatrix> {
    if a.dim() != c.dim() {
        return Err(Error::domain("Lyapunov operands have different dimensions"));
    }
    if c.asymmetry() > 1e-12 * (1.0 + c.norm()) {
        return Err(Error::domain("right-hand side C is not symmetric"));
    }
    require_hurwitz(a, "A")?;
    SquareMatrix::new(lyapunov_kron(a, c)?)
}

/// Block splitting of a dichotomous matrix into its stable and unstable parts.
///
/// The rows of `transform` are `[W_sᵀ; W_uᵀ]` where `W_s` and `W_u` are
/// orthonormal bases of the stable and unstable invariant subspaces of `Mᵀ`,
/// so that `T M = diag(stable_block, unstable_block) T`.
#[derive(Clone, Debug)]
pub struct DichotomySplit {
    pub transform: DMatrix<f64>,
    pub stable_basis: DMatrix<f64>,
    pub unstable_basis: DMatrix<f64>,
    pub stable_block: DMatrix<f64>,
    pub unstable_block: DMatrix<f64>,
}

impl DichotomySplit {
    pub fn stable_dim(&self) -> usize {
        self.stable_basis.ncols()
    }

    pub fn unstable_dim(&self) -> usize {
        self.unstable_basis.ncols()
    }
}

/// Matrix sign function by the scaled Newton iteration `S ← (μS + (μS)⁻¹)/2`.
fn matrix_sign(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let mut s = m.clone();
    let mut scaling = true;
    for _ in 0..200 {
        let inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numeric_with("singular iterate in sign-function iteration", m))?;
        let mu = if scaling {
            let det = s.determinant().abs();
            if det.is_finite() && det > 0.0 {
                det.powf(-1.0 / d as f64)
            } else {
                1.0
            }
        } else {
            1.0
        };
        let next = (&s * mu + inv / mu) * 0.5;
        let change = (&next - &s).norm();
        let scale = next.norm();
        s = next;
        if change <= 1e-2 * scale {
            scaling = false;
        }
        if change <= 1e-14 * scale {
            return Ok(s);
        }
    }
    Err(Error::numeric_with("sign-function iteration did not converge", m))
}

/// Orthonormal basis of the range of a rank-`k` projector `p`: the leading
/// eigenvectors of `p pᵀ`, whose nonzero eigenvalues are all at least 1.
fn range_basis(p: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let d = p.nrows();
    let eig = (p * p.transpose()).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    if k < d && eig.eigenvalues[order[k]] > 0.5 {
        return Err(Error::numeric_with("projector rank exceeds the unstable count", p));
    }
    let mut basis = DMatrix::zeros(d, k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        basis.set_column(col, &eig.eigenvectors.column(idx));
    }
    Ok(basis)
}

pub fn dichotomy_split(m: &SquareMatrix, axis_tol: f64) -> Result<DichotomySplit> {
    let spec = spectral_summary(m, axis_tol)?;
    if !spec.is_dichotomous {
        return Err(Error::NotDichotomous {
            min_abs_real: spec.min_abs_real,
            axis_tol,
        });
    }
    let d = m.dim();
    let q = spec.unstable_count;
    let (stable_basis, unstable_basis) = if q == 0 {
        (DMatrix::identity(d, d), DMatrix::zeros(d, 0))
    } else if q == d {
        (DMatrix::zeros(d, 0), DMatrix::identity(d, d))
    } else {
        let sign = matrix_sign(&m.transpose())?;
        let eye = DMatrix::<f64>::identity(d, d);
        let p_unstable = (&eye + &sign) * 0.5;
        let p_stable = (&eye - &sign) * 0.5;
        (range_basis(&p_stable, d - q)?, range_basis(&p_unstable, q)?)
    };
    let mut transform = DMatrix::zeros(d, d);
    for c in 0..stable_basis.ncols() {
        transform.set_row(c, &stable_basis.column(c).transpose());
    }
    for c in 0..unstable_basis.ncols() {
        transform.set_row(d - q + c, &unstable_basis.column(c).transpose());
    }
    let stable_block = stable_basis.transpose() * m.as_matrix() * &stable_basis;
    let unstable_block = unstable_basis.transpose() * m.as_matrix() * &unstable_basis;
    Ok(DichotomySplit {
        transform,
        stable_basis,
        unstable_basis,
        stable_block,
        unstable_block,
    })
}

/// The stabilizing pair `(Q̂, Σ̂)` of a dichotomous matrix `M`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiccatiPair {
    #[serde(rename = "Q")]
    pub q: SquareMatrix,
    #[serde(rename = "Sigma")]
    pub sigma: SquareMatrix,
    /// `‖MᵀQ + QM − Q²‖_F`
    pub riccati_residual: f64,
    /// `‖(M−Q)Σ + Σ(M−Q)ᵀ + I‖_F`
    pub lyapunov_residual: f64,
    /// Λ⁺(M), computed from the spectrum.
    pub unstable_trace: f64,
}

impl RiccatiPair {
    /// Closed-loop matrix `M − Q`.
    pub fn closed_loop(&self, m: &SquareMatrix) -> DMatrix<f64> {
        m.as_matrix() - self.q.as_matrix()
    }
}

pub fn riccati_residual(m: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (m.transpose() * q + q * m - q * q).norm()
}

/// Solves `MᵀQ + QM = Q²` for the unique PSD `Q` with `M − Q` Hurwitz, and the
/// closed-loop covariance `(M−Q)Σ + Σ(M−Q)ᵀ = −I`.
pub fn solve_degenerate_riccati(m: &SquareMatrix) -> Result<RiccatiPair> {
    solve_degenerate_riccati_tol(m, DEFAULT_AXIS_TOL)
}

pub fn solve_degenerate_riccati_tol(m: &SquareMatrix, axis_tol: f64) -> Result<RiccatiPair> {
    let spec = spectral_summary(m, axis_tol)?;
    if !spec.is_dichotomous {
        return Err(Error::NotDichotomous {
            min_abs_real: spec.min_abs_real,
            axis_tol,
        });
    }
    let d = m.dim();
    let mm = m.as_matrix();
    let mut q = if spec.unstable_count == 0 {
        DMatrix::zeros(d, d)
    } else {
        let split = dichotomy_split(m, axis_tol)?;
        let k = split.unstable_dim();
        // On the anti-Hurwitz block A: (−A)Y + Y(−A)ᵀ = −I, and Q₂ = Y⁻¹.
        let y = lyapunov_kron(&(-&split.unstable_block), &DMatrix::identity(k, k))?;
        let q2 = y
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric_with("unstable-block Gramian is not positive definite", mm))?
            .inverse();
        let w = &split.unstable_basis;
        let q = w * q2 * w.transpose();
        (&q + q.transpose()) * 0.5
    };

    if spec.unstable_count > 0 {
        // One Newton step on R(Q) = MᵀQ + QM − Q²:
        // (M−Q)ᵀΔ + Δ(M−Q) = −R(Q).
        let closed = mm - &q;
        require_hurwitz(&closed, "M − Q before refinement").map_err(|_| {
            Error::numeric_with("invariant-subspace Q does not stabilize M", mm)
        })?;
        let r = mm.transpose() * &q + &q * mm - &q * &q;
        let delta = lyapunov_kron(&closed.transpose(), &r)?;
        q += delta;
        q = (&q + q.transpose()) * 0.5;
    }

    let closed = mm - &q;
    require_hurwitz(&closed, "M − Q")
        .map_err(|_| Error::numeric_with("M − Q is not Hurwitz after refinement", mm))?;
    let eye = DMatrix::identity(d, d);
    let sigma = lyapunov_kron(&closed, &eye)?;
    let riccati_residual = riccati_residual(mm, &q);
    let lyapunov_residual = lyapunov_residual(&closed, &sigma, &eye);
    Ok(RiccatiPair {
        q: SquareMatrix::new(q)?,
        sigma: SquareMatrix::new(sigma)?,
        riccati_residual,
        lyapunov_residual,
        unstable_trace: spec.unstable_trace,
    })
}

/// Stabilizing solution of `Q² − MᵀQ − QM = 2κI` by Newton–Kleinman iteration.
///
/// Independent of the invariant-subspace route; as `κ ↓ 0` it decreases
/// monotonically to the degenerate solution.
pub fn solve_riccati_kappa(m: &SquareMatrix, kappa: f64) -> Result<SquareMatrix> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::domain(format!("kappa must be positive, got {kappa}")));
    }
    let d = m.dim();
    let mm = m.as_matrix();
    let eye = DMatrix::<f64>::identity(d, d);
    // M − cI is Hurwitz for c above the spectral abscissa; ‖M‖_F + 1 bounds it.
    let mut q = &eye * (mm.norm() + 1.0);
    for _ in 0..200 {
        let closed = mm - &q;
        let rhs = &q * &q + &eye * (2.0 * kappa);
        let next = lyapunov_kron(&closed.transpose(), &rhs)?;
        let change = (&next - &q).norm();
        q = next;
        if change <= 1e-14 * (1.0 + q.norm()) {
            break;
        }
    }
    require_hurwitz(&(mm - &q), "M − Q_κ")
        .map_err(|_| Error::numeric_with("Newton–Kleinman iterate is not stabilizing", mm))?;
    if q.clone().cholesky().is_none() {
        return Err(Error::numeric_with("Q_κ is not positive definite", mm));
    }
    SquareMatrix::new(q)
}

/// `(1/2) trace(G Σ_G Gᵀ)` where `(M−G)Σ_G + Σ_G(M−G)ᵀ = −I`.
///
/// The stationary effort of the linear feedback `v = −Gx` on `dX = MX dt + dW`.
pub fn gain_cost(m: &SquareMatrix, g: &SquareMatrix) -> Result<f64> {
    if m.dim() != g.dim() {
        return Err(Error::domain("M and G have different dimensions"));
    }
    let closed = m.as_matrix() - g.as_matrix();
    require_hurwitz(&closed, "M − G")?;
    let d = m.dim();
    let sigma = lyapunov_kron(&closed, &DMatrix::identity(d, d))?;
    Ok(0.5 * (g.as_matrix() * sigma * g.transpose()).trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sq(rows: &[&[f64]]) -> SquareMatrix {
        SquareMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn spectral_examples() {
        let s = spectral_summary(&sq(&[&[-1.0]]), DEFAULT_AXIS_TOL).unwrap();
        assert_eq!(s.unstable_trace, 0.0);
        assert!(s.is_hurwitz);

        let s = spectral_summary(&sq(&[&[2.0]]), DEFAULT_AXIS_TOL).unwrap();
        assert_eq!(s.unstable_trace, 2.0);
        assert!(!s.is_hurwitz);

        // characteristic polynomial λ² − 2λ + 2, roots 1 ± i
        let s = spectral_summary(&sq(&[&[0.0, 1.0], &[-2.0, 2.0]]), DEFAULT_AXIS_TOL).unwrap();
        assert_relative_eq!(s.unstable_trace, 2.0, epsilon = 1e-12);
        assert!(s.is_dichotomous);
        assert_eq!(s.unstable_count, 2);
        for l in &s.eigenvalues {
            assert_relative_eq!(l.re, 1.0, epsilon = 1e-12);
            assert_relative_eq!(l.im.abs(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn center_eigenvalue_is_not_dichotomous() {
        let s = spectral_summary(&sq(&[&[0.0, 1.0], &[-1.0, 0.0]]), DEFAULT_AXIS_TOL).unwrap();
        assert!(!s.is_dichotomous);
        let err = solve_degenerate_riccati(&sq(&[&[0.0, 1.0], &[-1.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::NotDichotomous { .. }));
    }

    #[test]
    fn lyapunov_examples() {
        let x = solve_lyapunov(&sq(&[&[-1.0]]), &SquareMatrix::identity(1)).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.5, epsilon = 1e-14);

        let x = solve_lyapunov(
            &SquareMatrix::diagonal(&[-1.0, -2.0]).unwrap(),
            &SquareMatrix::identity(2),
        )
        .unwrap();
        assert_relative_eq!(x[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(x[(1, 1)], 0.25, epsilon = 1e-14);
        assert_relative_eq!(x[(0, 1)], 0.0, epsilon = 1e-14);

        // hand-solved Kronecker system: -2a + 2b = -1, -2b + c = 0, -2c = -1
        let x = solve_lyapunov(&sq(&[&[-1.0, 1.0], &[0.0, -1.0]]), &SquareMatrix::identity(2))
            .unwrap();
        assert_relative_eq!(x[(0, 0)], 0.75, epsilon = 1e-14);
        assert_relative_eq!(x[(0, 1)], 0.25, epsilon = 1e-14);
        assert_relative_eq!(x[(1, 0)], 0.25, epsilon = 1e-14);
        assert_relative_eq!(x[(1, 1)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable_and_asymmetric() {
        let err = solve_lyapunov(&sq(&[&[1.0]]), &SquareMatrix::identity(1)).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        let err = solve_lyapunov(
            &SquareMatrix::diagonal(&[-1.0, -1.0]).unwrap(),
            &sq(&[&[1.0, 1.0], &[0.0, 1.0]]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn degenerate_riccati_examples() {
        let p = solve_degenerate_riccati(&sq(&[&[1.0]])).unwrap();
        assert_relative_eq!(p.q[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(p.sigma[(0, 0)], 0.5, epsilon = 1e-12);

        let p = solve_degenerate_riccati(&SquareMatrix::diagonal(&[-1.0, -3.0]).unwrap()).unwrap();
        assert!(p.q.norm() == 0.0);
        assert_relative_eq!(p.sigma[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(p.sigma[(1, 1)], 1.0 / 6.0, epsilon = 1e-12);

        let m = SquareMatrix::diagonal(&[1.0, -1.0]).unwrap();
        let p = solve_degenerate_riccati(&m).unwrap();
        assert_relative_eq!(p.q[(0, 0)], 2.0, epsilon = 1e-12);
        assert!(p.q[(0, 1)].abs() < 1e-12 && p.q[(1, 1)].abs() < 1e-12);
        assert_relative_eq!(p.sigma[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(p.sigma[(1, 1)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(0.5 * p.q.trace(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.unstable_trace, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fully_unstable_complex_pair() {
        let m = sq(&[&[0.0, 1.0], &[-2.0, 2.0]]);
        let p = solve_degenerate_riccati(&m).unwrap();
        assert_relative_eq!(0.5 * p.q.trace(), 2.0, epsilon = 1e-10);
        assert!(p.riccati_residual < 1e-10);
        assert!(p.lyapunov_residual < 1e-10);
    }

    #[test]
    fn kappa_examples() {
        let q = solve_riccati_kappa(&sq(&[&[1.0]]), 0.5).unwrap();
        assert_relative_eq!(q[(0, 0)], 1.0 + 2f64.sqrt(), epsilon = 1e-12);
        let q = solve_riccati_kappa(&sq(&[&[-1.0]]), 0.5).unwrap();
        assert_relative_eq!(q[(0, 0)], -1.0 + 2f64.sqrt(), epsilon = 1e-12);
        let q = solve_riccati_kappa(&sq(&[&[-1.0]]), 1e-10).unwrap();
        assert!(q[(0, 0)] < 1e-9);
        assert!(matches!(
            solve_riccati_kappa(&sq(&[&[1.0]]), 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gain_cost_examples() {
        let m = sq(&[&[1.0]]);
        assert_relative_eq!(gain_cost(&m, &sq(&[&[2.0]])).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(gain_cost(&m, &sq(&[&[3.0]])).unwrap(), 9.0 / 8.0, epsilon = 1e-14);
        let stable = SquareMatrix::diagonal(&[-1.0, -2.0]).unwrap();
        assert_eq!(gain_cost(&stable, &SquareMatrix::zeros(2)).unwrap(), 0.0);
        assert!(matches!(gain_cost(&m, &sq(&[&[0.5]])), Err(Error::Domain(_))));
    }

    #[test]
    fn square_matrix_validation_and_serde() {
        assert!(SquareMatrix::new(DMatrix::zeros(2, 3)).is_err());
        assert!(SquareMatrix::scalar(f64::NAN).is_err());
        let m = sq(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, "[[1.0,2.0],[3.0,4.0]]");
        let back: SquareMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
