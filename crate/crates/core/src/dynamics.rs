//! Vector fields, equilibria, regime sets and local energy functions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matctrl::{self, SquareMatrix, DEFAULT_AXIS_TOL};

/// Residual bound `‖m(z)‖` accepted for an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;
/// Points closer than this are merged into one equilibrium.
pub const MERGE_TOL: f64 = 1e-6;
/// Relative tolerance used to keep ties in argmin sets.
pub const TIE_TOL: f64 = 1e-9;

/// Drift `m` and running penalty `ℓ` of a controlled diffusion.
///
/// Implementations must be re-entrant: they are evaluated concurrently from
/// simulation replicas and sweep workers.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    fn penalty(&self, x: &[f64]) -> f64;

    /// Analytic Jacobian `Dm(x)`, if available.
    fn drift_jacobian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Analytic gradient `∇ℓ(x)`, if available.
    fn penalty_gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::domain("box bounds must have equal, nonzero length"));
        }
        for (a, b) in lo.iter().zip(&hi) {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::domain(format!("invalid box side [{a}, {b}]")));
            }
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// The box scaled by `factor` about its center.
    pub fn scaled(&self, factor: f64) -> BoxDomain {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| {
                let c = 0.5 * (a + b);
                let r = 0.5 * (b - a) * factor;
                (c - r, c + r)
            })
            .unzip();
        BoxDomain { lo, hi }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

/// A vector field together with its box of validity.
#[derive(Clone)]
pub struct VectorFieldSystem {
    pub name: String,
    pub field: Arc<dyn VectorField>,
    pub domain: BoxDomain,
}

impl fmt::Debug for VectorFieldSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorFieldSystem")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("domain", &self.domain)
            .finish()
    }
}

fn fd_step(x: f64) -> f64 {
    1e-6 * (1.0 + x.abs())
}

impl VectorFieldSystem {
    pub fn new(
        name: impl Into<String>,
        field: Arc<dyn VectorField>,
        domain: BoxDomain,
    ) -> Result<Self> {
        if field.dim() == 0 || field.dim() != domain.dim() {
            return Err(Error::domain(format!(
                "field dimension {} does not match box dimension {}",
                field.dim(),
                domain.dim()
            )));
        }
        Ok(VectorFieldSystem {
            name: name.into(),
            field,
            domain,
        })
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.field.drift(x, &mut out);
        out
    }

    pub fn penalty(&self, x: &[f64]) -> f64 {
        self.field.penalty(x)
    }

    /// `Dm(x)`: analytic when provided, otherwise central differences.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.field
            .drift_jacobian(x)
            .unwrap_or_else(|| self.fd_jacobian(x))
    }

    pub fn fd_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut jac = DMatrix::zeros(d, d);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.field.drift(&xp, &mut fp);
            xp[j] = x[j] - h;
            self.field.drift(&xp, &mut fm);
            xp[j] = x[j];
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    pub fn penalty_gradient(&self, x: &[f64]) -> Vec<f64> {
        if let Some(g) = self.field.penalty_gradient(x) {
            return g;
        }
        let mut xp = x.to_vec();
        (0..self.dim())
            .map(|j| {
                let h = fd_step(x[j]);
                xp[j] = x[j] + h;
                let up = self.penalty(&xp);
                xp[j] = x[j] - h;
                let down = self.penalty(&xp);
                xp[j] = x[j];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Scalar drift for one-dimensional systems.
    pub fn drift_1d(&self, x: f64) -> f64 {
        let mut out = [0.0];
        self.field.drift(&[x], &mut out);
        out[0]
    }

    pub fn drift_derivative_1d(&self, x: f64) -> f64 {
        self.jacobian(&[x])[(0, 0)]
    }

    pub fn penalty_1d(&self, x: f64) -> f64 {
        self.field.penalty(&[x])
    }

    pub fn require_1d(&self) -> Result<()> {
        if self.dim() == 1 {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "operation requires a one-dimensional system, '{}' has dimension {}",
                self.name,
                self.dim()
            )))
        }
    }

    /// Probes the box and returns warnings for soft violations.
    ///
    /// Non-finite values and analytic Jacobians that disagree with central
    /// differences are errors. Negative penalties and boundary points where
    /// the drift does not point inward are reported as warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let d = self.dim();
        let per_axis = match d {
            1 => 201,
            2 => 21,
            3 => 9,
            _ => 4,
        };
        let mut warnings = Vec::new();
        let mut min_penalty = f64::INFINITY;
        let mut worst_jac = 0.0f64;
        for p in lattice(&self.domain, per_axis) {
            let m = self.drift(&p);
            let l = self.penalty(&p);
            if m.iter().any(|v| !v.is_finite()) || !l.is_finite() {
                return Err(Error::domain(format!(
                    "system '{}' is not finite at {p:?}",
                    self.name
                )));
            }
            min_penalty = min_penalty.min(l);
            if let Some(jac) = self.field.drift_jacobian(&p) {
                let fd = self.fd_jacobian(&p);
                let rel = (&jac - &fd).norm() / (1.0 + fd.norm());
                worst_jac = worst_jac.max(rel);
            }
        }
        if worst_jac > 1e-5 {
            return Err(Error::domain(format!(
                "analytic Jacobian of '{}' disagrees with central differences (relative {worst_jac:.2e})",
                self.name
            )));
        }
        if min_penalty < 0.0 {
            warnings.push(format!(
                "penalty of '{}' is negative on the box (min {min_penalty:.4})",
                self.name
            ));
        }
        let center = self.domain.center();
        let outward = lattice(&self.domain, per_axis)
            .filter(|p| on_boundary(&self.domain, p))
            .filter(|p| {
                let m = self.drift(p);
                m.iter()
                    .zip(p.iter().zip(&center))
                    .map(|(mi, (pi, ci))| mi * (pi - ci))
                    .sum::<f64>()
                    >= 0.0
            })
            .count();
        if outward > 0 {
            warnings.push(format!(
                "drift of '{}' does not point inward at {outward} boundary probes",
                self.name
            ));
        }
        Ok(warnings)
    }
}

fn on_boundary(b: &BoxDomain, p: &[f64]) -> bool {
    p.iter()
        .zip(b.lo.iter().zip(&b.hi))
        .any(|(v, (a, c))| v == a || v == c)
}

/// Tensor lattice with `n` points per axis including the box faces.
fn lattice(b: &BoxDomain, n: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    let d = b.dim();
    let total = n.pow(d as u32);
    (0..total).map(move |mut k| {
        (0..d)
            .map(|j| {
                let i = k % n;
                k /= n;
                b.lo[j] + (b.hi[j] - b.lo[j]) * i as f64 / (n - 1) as f64
            })
            .collect()
    })
}

/// One-dimensional polynomial drift and penalty, coefficients in ascending powers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial1D {
    pub drift: Vec<f64>,
    pub penalty: Vec<f64>,
}

pub(crate) fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, a| acc * x + a)
}

pub(crate) fn poly_derivative(c: &[f64]) -> Vec<f64> {
    c.iter()
        .enumerate()
        .skip(1)
        .map(|(k, a)| k as f64 * a)
        .collect()
}

impl Polynomial1D {
    pub fn new(drift: Vec<f64>, penalty: Vec<f64>) -> Result<Self> {
        if drift.is_empty() || penalty.is_empty() {
            return Err(Error::domain("polynomial coefficient lists must be non-empty"));
        }
        if drift.iter().chain(&penalty).any(|c| !c.is_finite()) {
            return Err(Error::domain("polynomial coefficients must be finite"));
        }
        Ok(Polynomial1D { drift, penalty })
    }
}

impl VectorField for Polynomial1D {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = poly_eval(&self.drift, x[0]);
    }

    fn penalty(&self, x: &[f64]) -> f64 {
        poly_eval(&self.penalty, x[0])
    }

    fn drift_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(
            1,
            1,
            poly_eval(&poly_derivative(&self.drift), x[0]),
        ))
    }

    fn penalty_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![poly_eval(&poly_derivative(&self.penalty), x[0])])
    }
}

type DriftFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type PenaltyFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type JacobianFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// A vector field assembled from closures.
#[derive(Clone)]
pub struct FnField {
    dim: usize,
    drift: Arc<DriftFn>,
    penalty: Arc<PenaltyFn>,
    jacobian: Option<Arc<JacobianFn>>,
}

impl FnField {
    pub fn new(
        dim: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        penalty: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnField {
            dim,
            drift: Arc::new(drift),
            penalty: Arc::new(penalty),
            jacobian: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    /// `m(x) = M x` with penalty `(1/2)|x|²`.
    pub fn linear(m: &SquareMatrix) -> Self {
        let d = m.dim();
        let mat = m.as_matrix().clone();
        let jac = mat.clone();
        FnField::new(
            d,
            move |x, out| {
                let y = &mat * DVector::from_column_slice(x);
                out.copy_from_slice(y.as_slice());
            },
            |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
        )
        .with_jacobian(move |_| jac.clone())
    }
}

impl VectorField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    fn penalty(&self, x: &[f64]) -> f64 {
        (self.penalty)(x)
    }

    fn drift_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.jacobian.as_ref().map(|j| j(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    Saddle,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Equilibrium {
    pub z: Vec<f64>,
    pub jacobian: SquareMatrix,
    pub classification: Stability,
    /// Dimension of the unstable manifold.
    pub index: usize,
    pub penalty_at: f64,
    /// Λ⁺(Dm(z)).
    pub unstable_trace: f64,
}

impl Equilibrium {
    pub fn is_stable(&self) -> bool {
        self.classification == Stability::Stable
    }

    pub fn dist(&self, x: &[f64]) -> f64 {
        self.z
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn classify_equilibrium(sys: &VectorFieldSystem, z: &[f64]) -> Result<Equilibrium> {
    if z.len() != sys.dim() {
        return Err(Error::domain("point dimension does not match system"));
    }
    let res = norm(&sys.drift(z));
    if res > 1e-8 {
        return Err(Error::domain(format!(
            "‖m(z)‖ = {res:.3e} at {z:?}; not an equilibrium"
        )));
    }
    let jacobian = SquareMatrix::new(sys.jacobian(z))?;
    let spec = matctrl::spectral_summary(&jacobian, DEFAULT_AXIS_TOL)?;
    if !spec.is_dichotomous {
        return Err(Error::domain(format!(
            "equilibrium at {z:?} is not hyperbolic (min |Re λ| = {:.3e})",
            spec.min_abs_real
        )));
    }
    let index = spec.unstable_count;
    let classification = if index == 0 {
        Stability::Stable
    } else if index == sys.dim() {
        Stability::Unstable
    } else {
        Stability::Saddle
    };
    Ok(Equilibrium {
        z: z.to_vec(),
        jacobian,
        classification,
        index,
        penalty_at: sys.penalty(z),
        unstable_trace: spec.unstable_trace,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Damped Newton iteration for `m(x) = 0`.
pub fn newton_root(sys: &VectorFieldSystem, x0: &[f64]) -> Option<Vec<f64>> {
    let d = sys.dim();
    let mut x = x0.to_vec();
    let mut f = sys.drift(&x);
    let mut fnorm = norm(&f);
    for _ in 0..200 {
        if fnorm <= 1e-13 {
            break;
        }
        let jac = sys.jacobian(&x);
        let step = jac.lu().solve(&DVector::from_column_slice(&f))?;
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-4 {
            let trial: Vec<f64> = (0..d).map(|i| x[i] - t * step[i]).collect();
            let ft = sys.drift(&trial);
            let n = norm(&ft);
            if n.is_finite() && n < fnorm {
                x = trial;
                f = ft;
                fnorm = n;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        if t == 1.0 && step.norm() <= 1e-15 * (1.0 + norm(&x)) {
            break;
        }
    }
    (fnorm <= EQUILIBRIUM_TOL && x.iter().all(|v| v.is_finite())).then_some(x)
}

/// Result of an equilibrium scan.
#[derive(Clone, Debug, Serialize)]
pub struct EquilibriumScan {
    pub equilibria: Vec<Equilibrium>,
    pub warnings: Vec<String>,
}

/// Locates and classifies all hyperbolic equilibria in the box.
///
/// Seeds are sign changes of the drift on the grid (1D) and grid nodes where
/// `‖m‖` is a local minimum; each seed is polished by damped Newton.
pub fn find_equilibria(sys: &VectorFieldSystem, grid_density: usize) -> Result<EquilibriumScan> {
    if grid_density < 8 {
        return Err(Error::domain("grid_density must be at least 8 per axis"));
    }
    let d = sys.dim();
    let total = (grid_density as f64).powi(d as i32);
    if total > 4e6 {
        return Err(Error::domain(format!(
            "grid of {grid_density}^{d} points is too large"
        )));
    }
    let mut warnings = Vec::new();
    let mut roots: Vec<Vec<f64>> = Vec::new();
    let mut failed_seeds = 0usize;

    if d == 1 {
        let (lo, hi) = (sys.domain.lo[0], sys.domain.hi[0]);
        let n = grid_density;
        let xs: Vec<f64> = (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect();
        let fs: Vec<f64> = xs.iter().map(|&x| sys.drift_1d(x)).collect();
        for i in 0..n {
            if fs[i] == 0.0 {
                roots.push(vec![xs[i]]);
            }
            if i + 1 < n && fs[i] * fs[i + 1] < 0.0 {
                roots.push(vec![bracketed_root(sys, xs[i], xs[i + 1], fs[i])]);
            }
            let local_min = (i == 0 || fs[i].abs() <= fs[i - 1].abs())
                && (i + 1 == n || fs[i].abs() <= fs[i + 1].abs());
            if local_min && fs[i] != 0.0 {
                match newton_root(sys, &[xs[i]]) {
                    Some(r) => roots.push(r),
                    None => failed_seeds += 1,
                }
            }
        }
    } else {
        let n = grid_density;
        let points: Vec<Vec<f64>> = lattice(&sys.domain, n).collect();
        let norms: Vec<f64> = points.iter().map(|p| norm(&sys.drift(p))).collect();
        for (k, p) in points.iter().enumerate() {
            if is_lattice_local_min(k, &norms, n, d) {
                match newton_root(sys, p) {
                    Some(r) => roots.push(r),
                    None => failed_seeds += 1,
                }
            }
        }
    }
    if failed_seeds > 0 {
        log::debug!("{failed_seeds} Newton seeds did not converge");
    }

    let mut merged: Vec<Vec<f64>> = Vec::new();
    for r in roots {
        if !sys.domain.contains(&r) {
            continue;
        }
        if merged
            .iter()
            .all(|m| norm(&m.iter().zip(&r).map(|(a, b)| a - b).collect::<Vec<_>>()) > MERGE_TOL)
        {
            merged.push(r);
        }
    }
    merged.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut equilibria = Vec::new();
    for z in merged {
        let z = newton_root(sys, &z).unwrap_or(z);
        match classify_equilibrium(sys, &z) {
            Ok(e) => equilibria.push(e),
            Err(e) => {
                let msg = format!("excluded candidate {z:?}: {e}");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    Ok(EquilibriumScan {
        equilibria,
        warnings,
    })
}

fn is_lattice_local_min(k: usize, norms: &[f64], n: usize, d: usize) -> bool {
    let mut stride = 1;
    for _ in 0..d {
        let i = (k / stride) % n;
        if i > 0 && norms[k - stride] < norms[k] {
            return false;
        }
        if i + 1 < n && norms[k + stride] < norms[k] {
            return false;
        }
        stride *= n;
    }
    true
}

/// Safeguarded Newton–bisection on a sign-change bracket.
fn bracketed_root(sys: &VectorFieldSystem, mut a: f64, mut b: f64, fa: f64) -> f64 {
    let sa = fa.signum();
    let mut x = 0.5 * (a + b);
    for _ in 0..200 {
        let f = sys.drift_1d(x);
        if f == 0.0 {
            return x;
        }
        if f.signum() == sa {
            a = x;
        } else {
            b = x;
        }
        let df = sys.drift_derivative_1d(x);
        let newton = x - f / df;
        let next = if df != 0.0 && newton > a.min(b) && newton < a.max(b) {
            newton
        } else {
            0.5 * (a + b)
        };
        if (next - x).abs() <= 1e-16 * (1.0 + x.abs()) {
            return next;
        }
        x = next;
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
}

impl Regime {
    pub fn of(nu: f64) -> Regime {
        if (nu - 1.0).abs() <= 1e-12 {
            Regime::Critical
        } else if nu > 1.0 {
            Regime::Supercritical
        } else {
            Regime::Subcritical
        }
    }
}

/// Selection sets and values for one noise exponent `ν`.
///
/// Sets hold equilibrium locations; ties within [`TIE_TOL`] are retained.
#[derive(Clone, Debug, Serialize)]
pub struct RegimeReport {
    pub nu: f64,
    pub regime: Regime,
    /// argmin of ℓ over all equilibria.
    pub z_set: Vec<Vec<f64>>,
    /// argmin of ℓ over stable equilibria (empty if there are none).
    pub zs_set: Vec<Vec<f64>>,
    /// argmin of ℓ + Λ⁺ over all equilibria.
    pub zc_set: Vec<Vec<f64>>,
    /// argmin of Λ⁺ over `z_set`.
    pub ztilde_set: Vec<Vec<f64>>,
    pub j: f64,
    pub js: Option<f64>,
    pub jc: f64,
    pub jtilde: f64,
    pub predicted_s: Vec<Vec<f64>>,
    /// Limit of the optimal value as ε → 0; `None` when it is undefined.
    pub beta_limit: Option<f64>,
    pub beta_bounds: String,
    pub effort_order: String,
}

fn argmin_set<'a>(
    items: impl Iterator<Item = &'a Equilibrium> + Clone,
    key: impl Fn(&Equilibrium) -> f64,
) -> (Vec<&'a Equilibrium>, Option<f64>) {
    let best = items.clone().map(&key).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return (Vec::new(), None);
    }
    let tol = TIE_TOL * (1.0 + best.abs());
    (
        items.filter(|e| key(e) <= best + tol).collect(),
        Some(best),
    )
}

fn points(set: &[&Equilibrium]) -> Vec<Vec<f64>> {
    set.iter().map(|e| e.z.clone()).collect()
}

pub fn regime_report(equilibria: &[Equilibrium], nu: f64) -> Result<RegimeReport> {
    if equilibria.is_empty() {
        return Err(Error::domain("regime report needs at least one equilibrium"));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::domain(format!("nu must be positive, got {nu}")));
    }
    let (z, j) = argmin_set(equilibria.iter(), |e| e.penalty_at);
    let (zs, js) = argmin_set(equilibria.iter().filter(|e| e.is_stable()), |e| e.penalty_at);
    let (zc, jc) = argmin_set(equilibria.iter(), |e| e.penalty_at + e.unstable_trace);
    let (zt, jt) = argmin_set(z.iter().copied(), |e| e.unstable_trace);
    let (j, jc, jtilde) = (j.unwrap(), jc.unwrap(), jt.unwrap());

    let regime = Regime::of(nu);
    let (predicted, beta_limit, beta_bounds, effort_order) = match regime {
        Regime::Supercritical => {
            let at_stable = js.is_some_and(|s| (s - j).abs() <= TIE_TOL * (1.0 + j.abs()));
            let (bounds, effort) = if at_stable {
                (
                    "O(eps^(2 min nu)) <= beta - J <= O(eps^(2 nu))",
                    "O(eps^(nu min 2))",
                )
            } else {
                (
                    "O(eps^(2 min nu)) <= beta - J <= eps^(2 nu - 2) Jtilde + O(eps^(2 nu))",
                    "O(eps^((2 nu - 2) min 2))",
                )
            };
            (&zt, Some(j), bounds, effort)
        }
        Regime::Subcritical => (
            &zs,
            js,
            "O(eps^nu) <= beta - Js <= O(eps^(nu max (4 nu - 2)))",
            "O(eps^nu)",
        ),
        Regime::Critical => (
            &zc,
            Some(jc),
            "beta <= Jc + O(eps^2), beta -> Jc",
            "not specified",
        ),
    };
    Ok(RegimeReport {
        nu,
        regime,
        z_set: points(&z),
        zs_set: points(&zs),
        zc_set: points(&zc),
        ztilde_set: points(&zt),
        j,
        js,
        jc,
        jtilde,
        predicted_s: points(predicted),
        beta_limit,
        beta_bounds: beta_bounds.to_string(),
        effort_order: effort_order.to_string(),
    })
}

impl RegimeReport {
    /// Exponents `p` of the reference rates `ε^p` bounding `|β* − β_limit|`, ascending.
    pub fn reference_exponents(&self) -> Vec<f64> {
        let nu = self.nu;
        let mut out = match self.regime {
            Regime::Supercritical => {
                let at_stable = self
                    .js
                    .is_some_and(|s| (s - self.j).abs() <= TIE_TOL * (1.0 + self.j.abs()));
                vec![nu.min(2.0), if at_stable { 2.0 * nu } else { 2.0 * nu - 2.0 }]
            }
            Regime::Subcritical => vec![nu, nu.max(4.0 * nu - 2.0)],
            Regime::Critical => {
                let tied = self
                    .js
                    .is_some_and(|s| (s - self.jc).abs() <= TIE_TOL * (1.0 + self.jc.abs()));
                if tied {
                    vec![1.0, 2.0]
                } else {
                    vec![2.0]
                }
            }
        };
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}

/// Local quadratic energy function `ŵ(x) = (x−z)ᵀ F (x−z)` near a hyperbolic equilibrium,
/// with `F = Tᵀ diag(Q̃₁, −θQ̃₂) T`.
#[derive(Clone, Debug, Serialize)]
pub struct LocalEnergyForm {
    pub center: Equilibrium,
    pub transform: SquareMatrix,
    /// `Q̃₁` on the stable block (empty when the index equals the dimension).
    pub qtilde1: DMatrix<f64>,
    /// `Q̃₂` on the unstable block (empty for stable equilibria).
    pub qtilde2: DMatrix<f64>,
    pub theta: f64,
    /// Level `a_z` supplied by the caller.
    pub level: f64,
    pub quadratic_form: SquareMatrix,
    pub laplacian_at_center: f64,
    pub stable_dim: usize,
}

impl LocalEnergyForm {
    pub fn value(&self, x: &[f64]) -> f64 {
        let y = self.offset(x);
        self.level + y.dot(&(self.quadratic_form.as_matrix() * &y))
    }

    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let y = self.offset(x);
        self.quadratic_form.as_matrix() * y * 2.0
    }

    /// `−|T_s y|² − θ|T_u y|²`: the exact value of `⟨My, ∇ŵ⟩` for the linearization.
    pub fn linear_descent(&self, x: &[f64]) -> f64 {
        let ty = self.transform.as_matrix() * self.offset(x);
        let k = self.stable_dim;
        let s: f64 = ty.rows(0, k).norm_squared();
        let u: f64 = ty.rows(k, ty.len() - k).norm_squared();
        -s - self.theta * u
    }

    fn offset(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().zip(&self.center.z).map(|(a, b)| a - b))
    }
}

/// Builds the local energy form at `eq` with level `a_z = level`.
pub fn local_energy_form(eq: &Equilibrium, theta_margin: f64, level: f64) -> Result<LocalEnergyForm> {
    if !(theta_margin > 0.0) {
        return Err(Error::domain("theta_margin must be positive"));
    }
    let split = matctrl::dichotomy_split(&eq.jacobian, DEFAULT_AXIS_TOL)?;
    let ks = split.stable_dim();
    let ku = split.unstable_dim();
    let d = ks + ku;
    // M̃ᵀQ̃ + Q̃M̃ = −I, i.e. A X + X Aᵀ = −I with A = M̃ᵀ.
    let solve = |mt: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let k = mt.nrows();
        if k == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let x = matctrl::solve_lyapunov(
            &SquareMatrix::new(mt.transpose())?,
            &SquareMatrix::identity(k),
        )?;
        Ok(x.into_inner())
    };
    let q1 = solve(&split.stable_block)?;
    let q2 = solve(&(-&split.unstable_block))?;
    let t = &split.transform;
    let ts = t.rows(0, ks).into_owned();
    let tu = t.rows(ks, ku).into_owned();
    let p1 = ts.transpose() * &q1 * &ts;
    let p2 = tu.transpose() * &q2 * &tu;
    let theta = if ku == 0 {
        1.0
    } else {
        (1.0 + theta_margin) * (p1.trace() / p2.trace()).max(1.0)
    };
    let mut form = p1 - p2 * theta;
    form = (&form + form.transpose()) * 0.5;
    let laplacian_at_center = 2.0 * form.trace();
    debug_assert_eq!(form.nrows(), d);
    Ok(LocalEnergyForm {
        center: eq.clone(),
        transform: SquareMatrix::new(t.clone())?,
        qtilde1: q1,
        qtilde2: q2,
        theta,
        level,
        quadratic_form: SquareMatrix::new(form)?,
        laplacian_at_center,
        stable_dim: ks,
    })
}

/// Default locality radius: a fifth of the distance to the nearest other equilibrium.
pub fn local_radius(z: &Equilibrium, others: &[Equilibrium], domain: &BoxDomain) -> f64 {
    let nearest = others
        .iter()
        .map(|e| e.dist(&z.z))
        .filter(|&r| r > MERGE_TOL)
        .fold(f64::INFINITY, f64::min);
    if nearest.is_finite() {
        0.2 * nearest
    } else {
        let half = domain
            .lo
            .iter()
            .zip(&domain.hi)
            .map(|(a, b)| 0.5 * (b - a))
            .fold(f64::INFINITY, f64::min);
        0.2 * half
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DescentReport {
    pub radius: f64,
    pub samples: usize,
    /// min and max of `⟨m(x), ∇ŵ(x)⟩` over samples.
    pub min_descent: f64,
    pub max_descent: f64,
    /// Largest `C₀ ≤ 1` with `C₀ r_x² ≤ |⟨m,∇ŵ⟩| ≤ r_x²/C₀` at every sample, where
    /// `r_x` ranges over `|x−z|` and `|∇ŵ|`. Zero when descent fails somewhere.
    pub c0: f64,
    pub violations: usize,
}

/// Samples `⟨m(x), ∇ŵ(x)⟩` on the punctured ball `0 < |x−z| ≤ radius`.
pub fn descent_check(
    sys: &VectorFieldSystem,
    form: &LocalEnergyForm,
    radius: f64,
    samples: usize,
    seed: u64,
) -> DescentReport {
    let d = sys.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_descent = f64::INFINITY;
    let mut max_descent = f64::NEG_INFINITY;
    let mut c0 = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..samples {
        let mut dir: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let n = norm(&dir).max(f64::MIN_POSITIVE);
        let r = radius * rng.random_range(1e-3..=1.0f64);
        dir.iter_mut().for_each(|v| *v *= r / n);
        let x: Vec<f64> = form.center.z.iter().zip(&dir).map(|(a, b)| a + b).collect();
        let m = DVector::from_vec(sys.drift(&x));
        let grad = form.gradient(&x);
        let g = m.dot(&grad);
        min_descent = min_descent.min(g);
        max_descent = max_descent.max(g);
        if g >= 0.0 {
            violations += 1;
            c0 = 0.0;
            continue;
        }
        let a = r.min(grad.norm());
        let b = r.max(grad.norm());
        c0 = c0.min((g.abs() / (b * b)).min(a * a / g.abs())).min(1.0);
    }
    DescentReport {
        radius,
        samples,
        min_descent,
        max_descent,
        c0: if c0.is_finite() { c0 } else { 0.0 },
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn poly_system(drift: Vec<f64>, penalty: Vec<f64>, lo: f64, hi: f64) -> VectorFieldSystem {
        VectorFieldSystem::new(
            "poly",
            Arc::new(Polynomial1D::new(drift, penalty).unwrap()),
            BoxDomain::interval(lo, hi).unwrap(),
        )
        .unwrap()
    }

    fn linear_system(rows: &[Vec<f64>]) -> VectorFieldSystem {
        let m = SquareMatrix::from_rows(rows).unwrap();
        let d = m.dim();
        VectorFieldSystem::new(
            "linear",
            Arc::new(FnField::linear(&m)),
            BoxDomain::new(vec![-1.0; d], vec![1.0; d]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn linear_field_has_single_equilibrium() {
        let sys = poly_system(vec![0.0, 1.0], vec![0.0, 0.0, 1.0], -3.0, 3.0);
        let scan = find_equilibria(&sys, 64).unwrap();
        assert_eq!(scan.equilibria.len(), 1);
        assert!(scan.equilibria[0].z[0].abs() < 1e-14);
        assert_eq!(scan.equilibria[0].classification, Stability::Unstable);
    }

    #[test]
    fn two_dimensional_saddle_is_found() {
        let sys = linear_system(&[vec![1.0, 0.5], vec![0.0, -1.0]]);
        let scan = find_equilibria(&sys, 11).unwrap();
        assert_eq!(scan.equilibria.len(), 1);
        let e = &scan.equilibria[0];
        assert_eq!(e.classification, Stability::Saddle);
        assert_eq!(e.index, 1);
        assert_relative_eq!(e.unstable_trace, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn non_hyperbolic_candidate_is_excluded() {
        // m = x³ has a degenerate root at 0
        let sys = poly_system(vec![0.0, 0.0, 0.0, 1.0], vec![1.0], -1.0, 1.0);
        let err = classify_equilibrium(&sys, &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        let scan = find_equilibria(&sys, 33).unwrap();
        assert!(scan.equilibria.is_empty());
        assert!(!scan.warnings.is_empty());
    }

    #[test]
    fn classify_rejects_non_equilibrium() {
        let sys = poly_system(vec![1.0, 1.0], vec![0.0], -3.0, 3.0);
        assert!(classify_equilibrium(&sys, &[0.0]).is_err());
    }

    #[test]
    fn scalar_stable_energy_form() {
        let sys = poly_system(vec![0.0, -3.0], vec![0.0], -1.0, 1.0);
        let eq = classify_equilibrium(&sys, &[0.0]).unwrap();
        let form = local_energy_form(&eq, 0.1, 0.0).unwrap();
        assert_relative_eq!(form.quadratic_form[(0, 0)], 1.0 / 6.0, epsilon = 1e-14);
        assert_eq!(form.theta, 1.0);
        let rep = descent_check(&sys, &form, 0.1, 200, 7);
        assert_eq!(rep.violations, 0);
        assert!(rep.max_descent < 0.0);
        // ⟨−3x, x/3⟩ = −x²
        assert_relative_eq!(form.linear_descent(&[0.05]), -0.0025, epsilon = 1e-14);
    }

    #[test]
    fn scalar_unstable_energy_form() {
        let sys = poly_system(vec![0.0, 2.0], vec![0.0], -1.0, 1.0);
        let eq = classify_equilibrium(&sys, &[0.0]).unwrap();
        let form = local_energy_form(&eq, 0.5, 1.0).unwrap();
        assert_relative_eq!(form.qtilde2[(0, 0)], 0.25, epsilon = 1e-14);
        assert!(form.theta > 1.0);
        assert_relative_eq!(form.quadratic_form[(0, 0)], -form.theta / 4.0, epsilon = 1e-14);
        assert!(form.laplacian_at_center < 0.0);
        assert_relative_eq!(form.value(&[0.0]), 1.0);
    }

    #[test]
    fn saddle_energy_form() {
        let sys = linear_system(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        let eq = classify_equilibrium(&sys, &[0.0, 0.0]).unwrap();
        let form = local_energy_form(&eq, 1.0, 0.0).unwrap();
        assert_relative_eq!(form.theta, 2.0, epsilon = 1e-12);
        let f = form.quadratic_form.as_matrix();
        assert_relative_eq!(f[(0, 0)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(f[(1, 1)], 0.5, epsilon = 1e-12);
        assert!(f[(0, 1)].abs() < 1e-12);
        assert_relative_eq!(form.laplacian_at_center, -1.0, epsilon = 1e-12);
        let rep = descent_check(&sys, &form, 0.1, 200, 11);
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn energy_form_is_only_local() {
        let sys = crate::bench::get_problem(&crate::bench::ProblemSpec::DoubleWell1 { c: 5.0 })
            .unwrap()
            .system;
        let eq = classify_equilibrium(&sys, &[0.0]).unwrap();
        let form = local_energy_form(&eq, 0.25, 0.0).unwrap();
        assert_eq!(descent_check(&sys, &form, 0.1, 400, 3).violations, 0);
        let wide = descent_check(&sys, &form, 2.5, 400, 3);
        assert!(wide.violations > 0 && wide.max_descent > 0.0 && wide.c0 == 0.0);
    }

    #[test]
    fn linear_descent_is_exact_for_linear_fields() {
        let sys = linear_system(&[
            vec![1.0, 2.0, 0.0],
            vec![0.0, -1.0, 0.5],
            vec![0.3, 0.0, -2.0],
        ]);
        let eq = classify_equilibrium(&sys, &[0.0, 0.0, 0.0]).unwrap();
        let form = local_energy_form(&eq, 0.25, 0.0).unwrap();
        for x in [[0.1, -0.2, 0.05], [0.0, 0.3, -0.1], [-0.2, 0.1, 0.2]] {
            let m = DVector::from_vec(sys.drift(&x));
            let exact = m.dot(&form.gradient(&x));
            assert_relative_eq!(exact, form.linear_descent(&x), epsilon = 1e-12);
            assert!(exact < 0.0);
        }
    }

    #[test]
    fn regime_report_rejects_empty() {
        assert!(regime_report(&[], 1.0).is_err());
    }

    #[test]
    fn polynomial_helpers() {
        assert_eq!(poly_eval(&[1.0, 2.0, 3.0], 2.0), 17.0);
        assert_eq!(poly_derivative(&[1.0, 2.0, 3.0]), vec![2.0, 6.0]);
    }

    #[test]
    fn box_scaling_keeps_center() {
        let b = BoxDomain::interval(-1.0, 3.0).unwrap();
        let s = b.scaled(2.0);
        assert_eq!(s.lo, vec![-3.0]);
        assert_eq!(s.hi, vec![5.0]);
        assert!(BoxDomain::interval(1.0, 1.0).is_err());
    }

    #[test]
    fn reference_exponents_by_regime() {
        let p = crate::bench::get_problem(&crate::bench::ProblemSpec::DoubleWell1 { c: 5.0 }).unwrap();
        let eqs = find_equilibria(&p.system, 2001).unwrap().equilibria;
        let exps = |nu: f64| regime_report(&eqs, nu).unwrap().reference_exponents();
        assert_eq!(exps(0.5), vec![0.5]);
        assert_eq!(exps(0.75), vec![0.75, 1.0]);
        assert_eq!(exps(1.0), vec![2.0]);
        assert_eq!(exps(1.5), vec![1.0, 1.5]);
        assert_eq!(exps(3.0), vec![2.0, 4.0]);
    }
}
