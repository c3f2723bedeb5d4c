//! One-dimensional ergodic HJB solver.
//!
//! Solves
//!
//! ```text
//! (ε^{2ν}/2) V'' + m V' − (ε²/2) |V'|² + ℓ = β
//! ```
//!
//! through the ground-state transform `ψ = exp(−ε^{2−2ν} V)`, which turns it
//! into the linear eigenproblem
//!
//! ```text
//! −(D/2) ψ'' − ε^{2ν−2} m ψ' + ℓ ψ = β ψ,   D = ε^{4ν−2}.
//! ```
//!
//! The operator is self-adjoint in `L²(e^{2g})` with `g' = m/ε^{2ν}`, so it is
//! discretized in flux form with geometric-mean face weights and symmetrized by
//! `φ = e^{g} ψ`. The result is a symmetric tridiagonal M-matrix with constant
//! off-diagonal `−D/(2h²)`, for any cell Péclet number. The smallest
//! eigenvalue is found by Sturm-count bisection and the positive eigenvector
//! by a twisted factorization evaluated in log space, since `ψ` easily spans
//! more than `e^{±10⁴}` on the box.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{find_equilibria, Equilibrium, VectorFieldSystem};
use crate::error::{Error, Result};

/// Log-density window, relative to the peak, on which residuals are evaluated.
pub const TRUSTED_LOG_WINDOW: f64 = 36.0;
/// Required log-density drop from the peak at the nodes next to each box end.
pub const BOX_DECAY_LOG: f64 = 30.0;
/// Exponent clamp for `e^{Δg}`; only reached where the density is negligible.
const MAX_EXPONENT: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid1D {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::domain(format!("invalid grid interval [{lo}, {hi}]")));
        }
        if n < 64 {
            return Err(Error::domain(format!("grid needs n ≥ 64 nodes, got {n}")));
        }
        Ok(Grid1D { lo, hi, n })
    }

    pub fn h(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + self.h() * i as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }
}

/// Automatic box and resolution selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridPolicy {
    /// Fixed node count; when `None` it follows from `points_per_width`.
    pub n: Option<usize>,
    /// Nodes per characteristic width of the ground state at its narrowest well.
    pub points_per_width: f64,
    pub min_n: usize,
    pub max_n: usize,
    /// WKB decay exponent of `φ` required beyond the outermost turning point.
    pub decay_target: f64,
    pub max_enlargements: usize,
    /// Grid density of the equilibrium scan used to place the box.
    pub scan_density: usize,
}

impl Default for GridPolicy {
    fn default() -> Self {
        GridPolicy {
            n: None,
            points_per_width: 40.0,
            min_n: 4001,
            max_n: 400_001,
            decay_target: 40.0,
            max_enlargements: 5,
            scan_density: 2001,
        }
    }
}

impl GridPolicy {
    pub fn fixed_n(n: usize) -> Self {
        GridPolicy {
            n: Some(n),
            ..GridPolicy::default()
        }
    }
}

struct Scales {
    eps: f64,
    /// ε^{2ν}
    noise: f64,
    /// ε^{2ν−2}
    c: f64,
    /// ε^{4ν−2}
    d: f64,
}

fn scales(epsilon: f64, nu: f64) -> Result<Scales> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::domain(format!("nu must be positive, got {nu}")));
    }
    Ok(Scales {
        eps: epsilon,
        noise: epsilon.powf(2.0 * nu),
        c: epsilon.powf(2.0 * nu - 2.0),
        d: epsilon.powf(4.0 * nu - 2.0),
    })
}

/// Effective Schrödinger potential `ℓ + m²/(2ε²) + ε^{2ν−2} m'/2` of the symmetrized problem.
pub fn effective_potential(sys: &VectorFieldSystem, epsilon: f64, nu: f64, x: f64) -> f64 {
    let m = sys.drift_1d(x);
    sys.penalty_1d(x)
        + m * m / (2.0 * epsilon * epsilon)
        + 0.5 * epsilon.powf(2.0 * nu - 2.0) * sys.drift_derivative_1d(x)
}

fn penalty_curvature(sys: &VectorFieldSystem, z: f64) -> f64 {
    let d = 1e-4 * (1.0 + z.abs());
    (sys.penalty_1d(z + d) - 2.0 * sys.penalty_1d(z) + sys.penalty_1d(z - d)) / (d * d)
}

fn equilibria_1d(sys: &VectorFieldSystem, density: usize) -> Result<Vec<Equilibrium>> {
    sys.require_1d()?;
    let eqs = find_equilibria(sys, density)?.equilibria;
    if eqs.is_empty() {
        return Err(Error::domain(format!(
            "system '{}' has no hyperbolic equilibria in its box",
            sys.name
        )));
    }
    Ok(eqs)
}

/// Chooses the box and node count for `(ε, ν)`.
///
/// The box covers all equilibria with margin `max(5ε^{ν∧1}, 0.5)` and extends
/// on each side until the WKB exponent of the ground state past the last
/// classical turning point reaches `decay_target`; it is clipped to the
/// system's box. The spacing resolves the narrowest harmonic well.
pub fn auto_grid(
    sys: &VectorFieldSystem,
    epsilon: f64,
    nu: f64,
    policy: &GridPolicy,
    equilibria: &[Equilibrium],
) -> Result<Grid1D> {
    sys.require_1d()?;
    let sc = scales(epsilon, nu)?;
    if equilibria.is_empty() {
        return Err(Error::domain("automatic grid needs at least one equilibrium"));
    }
    let zs: Vec<f64> = equilibria.iter().map(|e| e.z[0]).collect();
    let zmin = zs.iter().copied().fold(f64::INFINITY, f64::min);
    let zmax = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let margin = (5.0 * epsilon.powf(nu.min(1.0))).max(0.5);
    let beta_est = equilibria
        .iter()
        .map(|e| e.penalty_at + sc.c * e.unstable_trace)
        .fold(f64::INFINITY, f64::min)
        + 1.0;
    let width = equilibria
        .iter()
        .map(|e| {
            let dm = e.jacobian[(0, 0)];
            let harmonic = dm * dm / (sc.eps * sc.eps);
            let k = (harmonic + penalty_curvature(sys, e.z[0])).max(0.5 * harmonic);
            (sc.d / k).powf(0.25)
        })
        .fold(f64::INFINITY, f64::min);
    let h_target = width / policy.points_per_width;
    let (box_lo, box_hi) = (sys.domain.lo[0], sys.domain.hi[0]);
    let step = (width / 4.0).max((box_hi - box_lo) * 1e-6);

    let march = |start: f64, dir: f64, limit: f64| -> f64 {
        let mut x = start;
        let mut acc = 0.0;
        loop {
            let next = x + dir * step;
            if (next - limit) * dir >= 0.0 {
                return limit;
            }
            x = next;
            let q = effective_potential(sys, epsilon, nu, x) - beta_est;
            if q <= 0.0 || !q.is_finite() {
                acc = 0.0;
            } else {
                acc += (2.0 * q / sc.d).sqrt() * step;
            }
            if acc >= policy.decay_target && (x - start) * dir >= margin {
                return x;
            }
        }
    };
    let lo = march(zmin, -1.0, box_lo).min(zmin - margin).max(box_lo);
    let hi = march(zmax, 1.0, box_hi).max(zmax + margin).min(box_hi);
    let n = match policy.n {
        Some(n) => n,
        None => {
            let raw = ((hi - lo) / h_target).ceil() as usize + 1;
            raw.clamp(policy.min_n, policy.max_n)
        }
    };
    Grid1D::new(lo, hi, n)
}

/// Numerical solution of the ergodic HJB equation on the interior nodes of a grid.
#[derive(Clone, Debug, Serialize)]
pub struct HjbSolution {
    pub grid: Grid1D,
    pub epsilon: f64,
    pub nu: f64,
    /// Interior nodes; the Dirichlet end nodes are excluded.
    pub x: Vec<f64>,
    /// `V`, shifted so that its minimum is 0.
    pub value: Vec<f64>,
    /// Constant added to the raw `V` to normalize its minimum.
    pub value_shift: f64,
    /// `log ψ = −ε^{2−2ν} V`.
    pub log_psi: Vec<f64>,
    /// `log φ` of the symmetrized eigenvector, with maximum 0.
    pub log_phi: Vec<f64>,
    pub beta: f64,
    /// `v* = −ε V'`.
    pub feedback: Vec<f64>,
    pub residual_sup: f64,
    /// Nodes on which the residual is evaluated: away from the Dirichlet ends
    /// and within `e^{−36}` of the peak density.
    pub trusted: Vec<bool>,
    /// Whether `V` attains its minimum where `ℓ ≤ β`.
    pub max_principle_ok: bool,
}

impl HjbSolution {
    pub fn h(&self) -> f64 {
        self.grid.h()
    }

    /// Linear interpolation of `v*`, constant beyond the outermost nodes.
    pub fn feedback_at(&self, x: f64) -> f64 {
        interp(&self.x, &self.feedback, x)
    }

    pub fn value_at(&self, x: f64) -> f64 {
        interp(&self.x, &self.value, x)
    }
}

pub(crate) fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let h = (xs[n - 1] - xs[0]) / (n - 1) as f64;
    let j = (((x - xs[0]) / h) as usize).min(n - 2);
    let t = (x - xs[j]) / h;
    ys[j] * (1.0 - t) + ys[j + 1] * t
}

/// Increments `∫_{x_i}^{x_{i+1}} m/ε^{2ν}` by the trapezoid rule with the
/// Euler–Maclaurin end correction.
fn drift_potential_increments(sys: &VectorFieldSystem, x: &[f64], noise: f64) -> Vec<f64> {
    let h = x[1] - x[0];
    let f: Vec<f64> = x.iter().map(|&v| sys.drift_1d(v) / noise).collect();
    let fp: Vec<f64> = x.iter().map(|&v| sys.drift_derivative_1d(v) / noise).collect();
    (0..x.len() - 1)
        .map(|i| 0.5 * h * (f[i] + f[i + 1]) - h * h / 12.0 * (fp[i + 1] - fp[i]))
        .collect()
}

/// Number of eigenvalues of the symmetric tridiagonal matrix below `sigma`.
fn sturm_count(diag: &[f64], off: f64, sigma: f64) -> usize {
    let e2 = off * off;
    let mut count = 0;
    let mut d = diag[0] - sigma;
    for i in 0..diag.len() {
        if i > 0 {
            d = diag[i] - sigma - e2 / d;
        }
        if d == 0.0 {
            d = -f64::MIN_POSITIVE;
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Smallest eigenvalue bracket `[lo, hi]` by bisection on Sturm counts.
fn smallest_eigenvalue(diag: &[f64], off: f64) -> Result<(f64, f64)> {
    let mut lo = diag.iter().copied().fold(f64::INFINITY, f64::min) - 2.0 * off.abs();
    let mut hi = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::numeric("non-finite discretized operator"));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(diag, off, mid) == 0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(1e-300) {
            break;
        }
    }
    Ok((lo, hi))
}

/// `log φ` of the eigenvector nearest `sigma < λ_min`, normalized to `log φ_k = 0`
/// at the twist index `k`. Returns the per-edge increments `log φ_{j+1} − log φ_j`.
fn twisted_log_increments(diag: &[f64], off: f64, sigma: f64) -> Result<(Vec<f64>, usize)> {
    let n = diag.len();
    let ae = off.abs();
    let mut p = vec![0.0; n];
    p[0] = diag[0] - sigma;
    for i in 1..n {
        p[i] = diag[i] - sigma - ae * ae / p[i - 1];
    }
    let mut r = vec![0.0; n];
    r[n - 1] = diag[n - 1] - sigma;
    for i in (0..n - 1).rev() {
        r[i] = diag[i] - sigma - ae * ae / r[i + 1];
    }
    let k = (0..n)
        .min_by(|&a, &b| {
            let ga = (p[a] + r[a] - (diag[a] - sigma)).abs();
            let gb = (p[b] + r[b] - (diag[b] - sigma)).abs();
            ga.total_cmp(&gb)
        })
        .unwrap_or(0);
    let mut inc = vec![0.0; n - 1];
    for j in 0..n - 1 {
        let piv = if j < k { p[j] } else { r[j + 1] };
        if !(piv > 0.0) || !piv.is_finite() {
            return Err(Error::numeric(format!(
                "non-positive pivot {piv:.3e} in twisted factorization at node {j}"
            )));
        }
        let ratio = (ae / piv).ln();
        inc[j] = if j < k { -ratio } else { ratio };
    }
    Ok((inc, k))
}

fn cumulative(inc: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(inc.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for d in inc {
        acc += d;
        out.push(acc);
    }
    out
}

/// Solves the ergodic HJB equation on a fixed grid with Dirichlet `ψ = 0` at both ends.
pub fn solve_ergodic_hjb(
    sys: &VectorFieldSystem,
    epsilon: f64,
    nu: f64,
    grid: &Grid1D,
) -> Result<HjbSolution> {
    sys.require_1d()?;
    let sc = scales(epsilon, nu)?;
    let nodes = grid.nodes();
    let h = grid.h();
    let dg = drift_potential_increments(sys, &nodes, sc.noise);
    let n_int = grid.n - 2;
    let x: Vec<f64> = nodes[1..grid.n - 1].to_vec();
    let kappa = sc.d / (2.0 * h * h);
    let diag: Vec<f64> = (0..n_int)
        .map(|j| {
            let i = j + 1;
            let up = dg[i].min(MAX_EXPONENT).exp();
            let down = (-dg[i - 1]).min(MAX_EXPONENT).exp();
            sys.penalty_1d(nodes[i]) + kappa * (up + down)
        })
        .collect();
    if diag.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("discretized operator has non-finite diagonal"));
    }
    let off = -kappa;
    let (lo, hi) = smallest_eigenvalue(&diag, off)?;
    let beta = 0.5 * (lo + hi);
    let sigma = lo - (hi - lo).max(1e-14 * lo.abs().max(1.0));
    let (log_phi_inc, _) = twisted_log_increments(&diag, off, sigma)?;

    let raw_log_phi = cumulative(&log_phi_inc);
    let max_log_phi = raw_log_phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_phi: Vec<f64> = raw_log_phi.iter().map(|v| v - max_log_phi).collect();

    // Box adequacy: density ρ ∝ φ² must be negligible next to both ends.
    let left = 2.0 * log_phi[0];
    let right = 2.0 * log_phi[n_int - 1];
    if left > -BOX_DECAY_LOG || right > -BOX_DECAY_LOG {
        let w = grid.hi - grid.lo;
        return Err(Error::BoxTooSmall {
            lo: grid.lo,
            hi: grid.hi,
            suggested_lo: if left > -BOX_DECAY_LOG { grid.lo - 0.25 * w } else { grid.lo },
            suggested_hi: if right > -BOX_DECAY_LOG { grid.hi + 0.25 * w } else { grid.hi },
            reason: format!(
                "log density at the ends is {left:.1} / {right:.1} relative to the peak"
            ),
        });
    }

    // ΔV = −ε^{2ν−2} (Δ log φ − Δg), accumulated from local increments.
    let dv: Vec<f64> = (0..n_int - 1)
        .map(|j| -sc.c * (log_phi_inc[j] - dg[j + 1]))
        .collect();
    let raw_v = cumulative(&dv);
    let vmin = raw_v.iter().copied().fold(f64::INFINITY, f64::min);
    let value: Vec<f64> = raw_v.iter().map(|v| v - vmin).collect();
    let log_psi: Vec<f64> = value.iter().map(|v| -v / sc.c).collect();

    let mut feedback = vec![0.0; n_int];
    feedback[0] = -sc.eps * dv[0] / h;
    feedback[n_int - 1] = -sc.eps * dv[n_int - 2] / h;
    for j in 1..n_int - 1 {
        feedback[j] = -sc.eps * (dv[j - 1] + dv[j]) / (2.0 * h);
    }

    let trusted: Vec<bool> = (0..n_int)
        .map(|j| j >= 2 && j + 3 <= n_int && 2.0 * log_phi[j] >= -TRUSTED_LOG_WINDOW)
        .collect();
    let argmin = value
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, _)| j)
        .unwrap_or(0);
    let max_principle_ok = sys.penalty_1d(x[argmin]) <= beta + 1e-6 * (1.0 + beta.abs());

    let mut sol = HjbSolution {
        grid: *grid,
        epsilon,
        nu,
        x,
        value,
        value_shift: -vmin,
        log_psi,
        log_phi,
        beta,
        feedback,
        residual_sup: 0.0,
        trusted,
        max_principle_ok,
    };
    sol.residual_sup = hjb_residual(&sol, sys);
    if !sol.beta.is_finite() || !sol.residual_sup.is_finite() {
        return Err(Error::numeric("HJB solve produced non-finite output"));
    }
    Ok(sol)
}

/// Solves with an automatically chosen grid, enlarging the box when it truncates the solution.
pub fn solve_auto(
    sys: &VectorFieldSystem,
    epsilon: f64,
    nu: f64,
    policy: &GridPolicy,
) -> Result<HjbSolution> {
    let eqs = equilibria_1d(sys, policy.scan_density)?;
    solve_auto_with(sys, epsilon, nu, policy, &eqs)
}

pub fn solve_auto_with(
    sys: &VectorFieldSystem,
    epsilon: f64,
    nu: f64,
    policy: &GridPolicy,
    equilibria: &[Equilibrium],
) -> Result<HjbSolution> {
    let mut grid = auto_grid(sys, epsilon, nu, policy, equilibria)?;
    let h = grid.h();
    let (box_lo, box_hi) = (sys.domain.lo[0], sys.domain.hi[0]);
    let mut attempt = 0;
    loop {
        match solve_ergodic_hjb(sys, epsilon, nu, &grid) {
            Err(Error::BoxTooSmall {
                suggested_lo,
                suggested_hi,
                lo,
                hi,
                reason,
            }) if attempt < policy.max_enlargements => {
                let new_lo = suggested_lo.max(box_lo);
                let new_hi = suggested_hi.min(box_hi);
                if new_lo >= lo && new_hi <= hi {
                    return Err(Error::BoxTooSmall {
                        lo,
                        hi,
                        suggested_lo,
                        suggested_hi,
                        reason: format!("{reason}; system box reached"),
                    });
                }
                log::info!("enlarging HJB box to [{new_lo}, {new_hi}]: {reason}");
                let n = if policy.n.is_some() {
                    grid.n
                } else {
                    (((new_hi - new_lo) / h).ceil() as usize + 1).min(policy.max_n)
                };
                grid = Grid1D::new(new_lo, new_hi, n)?;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// `sup |(ε^{2ν}/2)V'' + mV' − (ε²/2)V'² + ℓ − β|` over trusted nodes, by central differences.
pub fn hjb_residual(sol: &HjbSolution, sys: &VectorFieldSystem) -> f64 {
    let h = sol.h();
    let eps = sol.epsilon;
    let noise = eps.powf(2.0 * sol.nu);
    let v = &sol.value;
    let mut sup: f64 = 0.0;
    for j in 1..v.len() - 1 {
        if !sol.trusted[j] {
            continue;
        }
        let x = sol.x[j];
        let d1 = (v[j + 1] - v[j - 1]) / (2.0 * h);
        let d2 = ((v[j + 1] - v[j]) - (v[j] - v[j - 1])) / (h * h);
        let r = 0.5 * noise * d2 + sys.drift_1d(x) * d1 - 0.5 * eps * eps * d1 * d1
            + sys.penalty_1d(x)
            - sol.beta;
        sup = sup.max(r.abs());
    }
    sup
}

/// Stationary density of `dX = (m − ε² V') dt + ε^ν dW` on a uniform node set.
#[derive(Clone, Debug, Serialize)]
pub struct ClosedLoopDensity1D {
    pub x: Vec<f64>,
    /// Normalized so that the trapezoid integral of `exp(log_density)` is 1.
    pub log_density: Vec<f64>,
    /// Log of the trapezoid normalization constant of the peak-scaled density.
    pub log_normalization: f64,
    pub mean: f64,
    pub variance: f64,
}

impl ClosedLoopDensity1D {
    fn weights(&self) -> Vec<f64> {
        let n = self.x.len();
        let h = (self.x[n - 1] - self.x[0]) / (n - 1) as f64;
        (0..n)
            .map(|i| if i == 0 || i + 1 == n { 0.5 * h } else { h })
            .collect()
    }

    pub fn density(&self) -> Vec<f64> {
        self.log_density.iter().map(|v| v.exp()).collect()
    }

    /// Trapezoid integral of `f(x) ρ(x)`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.weights()
            .iter()
            .zip(&self.x)
            .zip(&self.log_density)
            .map(|((w, &x), l)| w * l.exp() * f(x))
            .sum()
    }

    /// Expectation of a nodal array.
    pub fn expect_nodal(&self, values: &[f64]) -> f64 {
        self.weights()
            .iter()
            .zip(values)
            .zip(&self.log_density)
            .map(|((w, v), l)| w * l.exp() * v)
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.expect(|_| 1.0)
    }

    pub fn mass_near(&self, z: f64, r: f64) -> f64 {
        self.expect(|x| if (x - z).abs() <= r { 1.0 } else { 0.0 })
    }

    /// Cumulative distribution at the nodes (trapezoid).
    pub fn cdf(&self) -> Vec<f64> {
        let n = self.x.len();
        let rho = self.density();
        let mut out = vec![0.0; n];
        for i in 1..n {
            out[i] = out[i - 1] + 0.5 * (self.x[i] - self.x[i - 1]) * (rho[i] + rho[i - 1]);
        }
        out
    }

    /// Single-point CDF; rebuilds the cumulative sums, so use [`Self::cdf_fn`] for many points.
    pub fn cdf_at(&self, x: f64) -> f64 {
        let c = self.cdf();
        interp(&self.x, &c, x)
    }

    pub fn cdf_fn(&self) -> impl Fn(f64) -> f64 + '_ {
        let c = self.cdf();
        move |x| interp(&self.x, &c, x)
    }
}

/// Exact 1D stationary density for the value function `v` on nodes `x`:
/// `log ρ = (2/ε^{2ν}) (∫m − ε² (V − V(x₀)))`, normalized in log space.
pub fn closed_loop_density_from_value(
    sys: &VectorFieldSystem,
    epsilon: f64,
    nu: f64,
    x: &[f64],
    v: &[f64],
) -> Result<ClosedLoopDensity1D> {
    sys.require_1d()?;
    let sc = scales(epsilon, nu)?;
    if x.len() != v.len() || x.len() < 3 {
        return Err(Error::domain("node and value arrays must match and have ≥ 3 entries"));
    }
    let dg = drift_potential_increments(sys, x, sc.noise);
    let g = cumulative(&dg);
    let raw: Vec<f64> = g
        .iter()
        .zip(v)
        .map(|(gi, vi)| 2.0 * gi - 2.0 * (vi - v[0]) / sc.c)
        .collect();
    normalized_density(x, raw)
}

fn normalized_density(x: &[f64], raw: Vec<f64>) -> Result<ClosedLoopDensity1D> {
    let peak = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::numeric("density has no finite peak"));
    }
    let n = x.len();
    let h = (x[n - 1] - x[0]) / (n - 1) as f64;
    let z: f64 = raw
        .iter()
        .enumerate()
        .map(|(i, l)| (l - peak).exp() * if i == 0 || i + 1 == n { 0.5 * h } else { h })
        .sum();
    let log_z = z.ln();
    let log_density: Vec<f64> = raw.iter().map(|l| l - peak - log_z).collect();
    let mut dens = ClosedLoopDensity1D {
        x: x.to_vec(),
        log_density,
        log_normalization: log_z + peak,
        mean: 0.0,
        variance: 0.0,
    };
    dens.mean = dens.expect(|x| x);
    let mean = dens.mean;
    dens.variance = dens.expect(|x| (x - mean) * (x - mean));
    Ok(dens)
}

/// Closed-loop stationary density of an HJB solution.
pub fn closed_loop_density(sol: &HjbSolution, sys: &VectorFieldSystem) -> Result<ClosedLoopDensity1D> {
    closed_loop_density_from_value(sys, sol.epsilon, sol.nu, &sol.x, &sol.value)
}

/// `∫ (1/2) |v*|² dρ`.
pub fn control_effort(sol: &HjbSolution, density: &ClosedLoopDensity1D) -> f64 {
    let half_sq: Vec<f64> = sol.feedback.iter().map(|u| 0.5 * u * u).collect();
    density.expect_nodal(&half_sq)
}

/// Ergodic cost `∫ ℓ dη₀` of the zero control, an upper bound for `β*`.
pub fn uncontrolled_cost(sys: &VectorFieldSystem, epsilon: f64, nu: f64, grid: &Grid1D) -> Result<f64> {
    let x = grid.nodes();
    let zeros = vec![0.0; x.len()];
    let dens = closed_loop_density_from_value(sys, epsilon, nu, &x, &zeros)?;
    Ok(dens.expect(|x| sys.penalty_1d(x)))
}

/// Ball radius for per-equilibrium mass: 0.3 × the smallest gap between equilibria.
pub fn default_mass_radius(equilibria: &[Equilibrium]) -> f64 {
    let mut zs: Vec<f64> = equilibria.iter().map(|e| e.z[0]).collect();
    zs.sort_by(f64::total_cmp);
    let gap = zs
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if gap.is_finite() {
        0.3 * gap
    } else {
        0.3
    }
}

/// Summary of one HJB solve, as exported next to the nodal CSV.
#[derive(Clone, Debug, Serialize)]
pub struct HjbSummary {
    pub epsilon: f64,
    pub nu: f64,
    pub beta: f64,
    pub residual_sup: f64,
    pub effort: f64,
    pub penalty_average: f64,
    pub mean: f64,
    pub variance: f64,
    pub grid: Grid1D,
    pub value_shift: f64,
    pub max_principle_ok: bool,
}

pub fn summarize(sol: &HjbSolution, sys: &VectorFieldSystem) -> Result<(HjbSummary, ClosedLoopDensity1D)> {
    let dens = closed_loop_density(sol, sys)?;
    let effort = control_effort(sol, &dens);
    let penalty_average = dens.expect(|x| sys.penalty_1d(x));
    Ok((
        HjbSummary {
            epsilon: sol.epsilon,
            nu: sol.nu,
            beta: sol.beta,
            residual_sup: sol.residual_sup,
            effort,
            penalty_average,
            mean: dens.mean,
            variance: dens.variance,
            grid: sol.grid,
            value_shift: sol.value_shift,
            max_principle_ok: sol.max_principle_ok,
        },
        dens,
    ))
}

/// One row of a β-curve sweep; solver failures are kept per row.
#[derive(Clone, Debug, Serialize)]
pub struct BetaCurveRow {
    pub epsilon: f64,
    pub beta: Option<f64>,
    pub effort: Option<f64>,
    pub penalty_average: Option<f64>,
    pub residual_sup: Option<f64>,
    pub n: Option<usize>,
    /// Mass within `mass_radius` of each equilibrium, in equilibrium order.
    pub masses: Vec<f64>,
    pub error: Option<String>,
}

/// Solves for every `ε` in `eps_list` (in parallel) and reports β*, effort and masses.
pub fn beta_curve(
    sys: &VectorFieldSystem,
    nu: f64,
    eps_list: &[f64],
    policy: &GridPolicy,
) -> Result<(Vec<Equilibrium>, Vec<BetaCurveRow>)> {
    let eqs = equilibria_1d(sys, policy.scan_density)?;
    let radius = default_mass_radius(&eqs);
    let rows = eps_list
        .par_iter()
        .map(|&eps| {
            let row = solve_auto_with(sys, eps, nu, policy, &eqs)
                .and_then(|sol| summarize(&sol, sys).map(|(s, d)| (sol, s, d)));
            match row {
                Ok((sol, s, dens)) => BetaCurveRow {
                    epsilon: eps,
                    beta: Some(s.beta),
                    effort: Some(s.effort),
                    penalty_average: Some(s.penalty_average),
                    residual_sup: Some(s.residual_sup),
                    n: Some(sol.grid.n),
                    masses: eqs.iter().map(|e| dens.mass_near(e.z[0], radius)).collect(),
                    error: None,
                },
                Err(e) => BetaCurveRow {
                    epsilon: eps,
                    beta: None,
                    effort: None,
                    penalty_average: None,
                    residual_sup: None,
                    n: None,
                    masses: Vec::new(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok((eqs, rows))
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicyIterationResult {
    pub x: Vec<f64>,
    pub feedback: Vec<f64>,
    pub beta: f64,
    pub beta_history: Vec<f64>,
    pub converged: bool,
}

/// Grid for [`policy_iteration`] built from an eigen solution.
///
/// Policy evaluation uses the stationary density on the box, whose ends act
/// as reflecting walls. A wall where `ℓ < β` holds mass for free, so the grid
/// of `sol` is extended at the same spacing until `ℓ ≥ β + margin` at both
/// ends, staying inside the system box.
pub fn policy_grid(sys: &VectorFieldSystem, sol: &HjbSolution, margin: f64) -> Result<Grid1D> {
    sys.require_1d()?;
    let h = sol.grid.h();
    let level = sol.beta + margin;
    let (box_lo, box_hi) = (sys.domain.lo[0], sys.domain.hi[0]);
    let mut lo = sol.grid.lo;
    while sys.penalty_1d(lo) < level && lo - h >= box_lo {
        lo -= h;
    }
    let mut hi = sol.grid.hi;
    while sys.penalty_1d(hi) < level && hi + h <= box_hi {
        hi += h;
    }
    if sys.penalty_1d(lo) < level || sys.penalty_1d(hi) < level {
        return Err(Error::domain(format!(
            "penalty stays below beta + {margin} at the system box; policy evaluation would be biased"
        )));
    }
    let n = ((hi - lo) / h).round() as usize + 1;
    Grid1D::new(lo, hi, n)
}

/// Policy iteration as an independent check of the eigen solver.
///
/// Starts from the stabilizing policy with closed-loop drift `−(x − x̄)`,
/// `x̄` the grid minimizer of `ℓ`. Each step evaluates `u` exactly in 1D: the
/// stationary density `e^Φ` of `b = m + εu` gives `β_u`, and the Poisson
/// equation for `w = V'` is integrated with the integrating factor `e^Φ`,
/// always in the direction of increasing `Φ`.
pub fn policy_iteration(
    sys: &VectorFieldSystem,
    epsilon: f64,
    nu: f64,
    grid: &Grid1D,
    max_iter: usize,
    tol: f64,
) -> Result<PolicyIterationResult> {
    sys.require_1d()?;
    let sc = scales(epsilon, nu)?;
    let x = grid.nodes();
    let n = x.len();
    let h = grid.h();
    let m: Vec<f64> = x.iter().map(|&v| sys.drift_1d(v)).collect();
    let l: Vec<f64> = x.iter().map(|&v| sys.penalty_1d(v)).collect();
    let xbar = x[l
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)];
    let mut u: Vec<f64> = x
        .iter()
        .zip(&m)
        .map(|(xi, mi)| -(mi + (xi - xbar)) / sc.eps)
        .collect();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let b: Vec<f64> = m.iter().zip(&u).map(|(mi, ui)| mi + sc.eps * ui).collect();
        let mut phi = vec![0.0; n];
        for i in 1..n {
            phi[i] = phi[i - 1] + h * (b[i - 1] + b[i]) / sc.noise;
        }
        let dens = normalized_density(&x, phi.clone())?;
        let cost: Vec<f64> = l.iter().zip(&u).map(|(li, ui)| li + 0.5 * ui * ui).collect();
        let beta = dens.expect_nodal(&cost);
        if !beta.is_finite() {
            return Err(Error::numeric("policy evaluation produced a non-finite cost"));
        }
        let g: Vec<f64> = cost.iter().map(|c| 2.0 * (beta - c) / sc.noise).collect();
        let w = poisson_gradient(&phi, &g, h);
        u = w.iter().map(|wi| -sc.eps * wi).collect();
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("policy improvement produced a non-finite control"));
        }
        let done = history
            .last()
            .is_some_and(|prev: &f64| (prev - beta).abs() <= tol * (1.0 + beta.abs()));
        history.push(beta);
        if done {
            converged = true;
            break;
        }
    }
    Ok(PolicyIterationResult {
        x,
        feedback: u,
        beta: *history.last().unwrap_or(&f64::NAN),
        beta_history: history,
        converged,
    })
}

/// Solves `w' + Φ' w = g` with `w = 0` at both ends, given `∫ g e^Φ = 0`.
///
/// Rising stretches of `Φ` are swept left to right, falling stretches right
/// to left; strict interior minima of `Φ` are seeded from the scaled
/// cumulative integral.
fn poisson_gradient(phi: &[f64], g: &[f64], h: f64) -> Vec<f64> {
    let n = phi.len();
    let peak = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = vec![0.0; n];
    for i in 1..n {
        acc[i] = acc[i - 1]
            + 0.5 * h * (g[i - 1] * (phi[i - 1] - peak).exp() + g[i] * (phi[i] - peak).exp());
    }
    let mut w = vec![0.0; n];
    for i in 1..n - 1 {
        // Deep in the tails `acc` is rounding noise; seed zero there.
        if phi[i] < phi[i - 1] && phi[i] < phi[i + 1] && peak - phi[i] <= TRUSTED_LOG_WINDOW {
            w[i] = acc[i] * (peak - phi[i]).exp();
        }
    }
    for i in 1..n - 1 {
        if phi[i] >= phi[i - 1] {
            let f = (phi[i - 1] - phi[i]).exp();
            w[i] = f * w[i - 1] + 0.5 * h * (g[i - 1] * f + g[i]);
        }
    }
    for i in (1..n - 1).rev() {
        if phi[i] >= phi[i + 1] {
            let f = (phi[i + 1] - phi[i]).exp();
            w[i] = f * w[i + 1] - 0.5 * h * (g[i + 1] * f + g[i]);
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{closed_form, get_problem, ProblemSpec};
    use crate::dynamics::{BoxDomain, Polynomial1D};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn poly(drift: Vec<f64>, penalty: Vec<f64>, lo: f64, hi: f64) -> VectorFieldSystem {
        VectorFieldSystem::new(
            "p",
            Arc::new(Polynomial1D::new(drift, penalty).unwrap()),
            BoxDomain::interval(lo, hi).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn constant_penalty_gives_zero_value() {
        let sys = poly(vec![0.0, -1.0], vec![3.0], -1.0, 1.0);
        let grid = Grid1D::new(-1.0, 1.0, 201).unwrap();
        let sol = solve_ergodic_hjb(&sys, 0.1, 1.0, &grid).unwrap();
        assert_relative_eq!(sol.beta, 3.0, epsilon = 1e-12);
        assert!(sol.residual_sup <= 1e-12, "residual {}", sol.residual_sup);
        let trusted_max = sol
            .value
            .iter()
            .zip(&sol.trusted)
            .filter(|(_, t)| **t)
            .map(|(v, _)| v.abs())
            .fold(0.0, f64::max);
        assert!(trusted_max < 1e-12);
    }

    #[test]
    fn linear_unstable_matches_closed_form() {
        let p = get_problem(&ProblemSpec::LinearUnstable).unwrap();
        let sol = solve_auto(&p.system, 0.1, 1.0, &GridPolicy::fixed_n(4001)).unwrap();
        let cf = closed_form(&ProblemSpec::LinearUnstable, 0.1, 1.0).unwrap();
        assert_relative_eq!(sol.beta, cf.beta, max_relative = 1e-4);
        assert!(sol.residual_sup <= 1e-3 * (1.0 + sol.beta));
        let (s, _) = summarize(&sol, &p.system).unwrap();
        assert_relative_eq!(s.mean, cf.mean, max_relative = 1e-3);
        assert_relative_eq!(s.variance, cf.variance, max_relative = 1e-3);
        assert_relative_eq!(s.effort, cf.effort, max_relative = 1e-3);
        assert!(sol.max_principle_ok);
    }

    #[test]
    fn linear_quadratic_matches_closed_form() {
        let spec = ProblemSpec::LinearQuadratic { m: 1.0, l: 2.0 };
        let p = get_problem(&spec).unwrap();
        let sol = solve_auto(&p.system, 0.1, 1.0, &GridPolicy::default()).unwrap();
        assert_relative_eq!(sol.beta, 1.0049752, max_relative = 1e-5);
    }

    #[test]
    fn ornstein_uhlenbeck_density() {
        let sys = poly(vec![0.0, -1.0], vec![0.0], -1.0, 1.0);
        let x = Grid1D::new(-1.0, 1.0, 2001).unwrap().nodes();
        let v = vec![0.0; x.len()];
        let d = closed_loop_density_from_value(&sys, 0.1, 1.0, &x, &v).unwrap();
        assert_relative_eq!(d.total_mass(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(d.variance, 0.005, max_relative = 1e-6);
        assert!(d.mean.abs() < 1e-12);
    }

    #[test]
    fn uncontrolled_gradient_density_is_boltzmann() {
        // m = −F′ with F = x⁴/4 − x²/2
        let sys = poly(vec![0.0, 1.0, 0.0, -1.0], vec![0.0], -2.5, 2.5);
        let grid = Grid1D::new(-2.5, 2.5, 4001).unwrap();
        let x = grid.nodes();
        let v = vec![0.0; x.len()];
        let (eps, nu) = (0.3, 1.0);
        let d = closed_loop_density_from_value(&sys, eps, nu, &x, &v).unwrap();
        let f = |x: f64| x.powi(4) / 4.0 - x * x / 2.0;
        let noise: f64 = eps * eps;
        let i0 = 2000;
        for i in [500, 1500, 2600, 3900] {
            let expected = -2.0 * (f(x[i]) - f(x[i0])) / noise;
            assert_relative_eq!(d.log_density[i] - d.log_density[i0], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn box_too_small_is_reported() {
        let p = get_problem(&ProblemSpec::LinearUnstable).unwrap();
        let grid = Grid1D::new(-0.05, 0.05, 401).unwrap();
        let err = solve_ergodic_hjb(&p.system, 0.1, 1.0, &grid).unwrap_err();
        match err {
            Error::BoxTooSmall {
                suggested_lo,
                suggested_hi,
                ..
            } => assert!(suggested_lo < -0.05 && suggested_hi > 0.05),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn beta_below_uncontrolled_cost() {
        let p = get_problem(&ProblemSpec::DoubleWell1 { c: 5.0 }).unwrap();
        let sol = solve_auto(&p.system, 0.2, 1.0, &GridPolicy::default()).unwrap();
        let b0 = uncontrolled_cost(&p.system, 0.2, 1.0, &sol.grid).unwrap();
        assert!(sol.beta <= b0 + 1e-9, "β = {} > β₀ = {b0}", sol.beta);
    }

    #[test]
    fn scaled_variance_at_selected_stable_well() {
        // c = 1 selects z = −1 at ν = 1; M = Dm(−1) = −3 is Hurwitz, so Q̂ = 0, Σ̂ = 1/6.
        let p = get_problem(&ProblemSpec::DoubleWell1 { c: 1.0 }).unwrap();
        let mut last = f64::NAN;
        for eps in [0.04, 0.02, 0.01] {
            let sol = solve_auto(&p.system, eps, 1.0, &GridPolicy::default()).unwrap();
            let dens = closed_loop_density(&sol, &p.system).unwrap();
            let w = |x: f64| if (x + 1.0).abs() < 0.5 { 1.0 } else { 0.0 };
            let mass = dens.expect(w);
            let mean = dens.expect(|x| w(x) * x) / mass;
            let var = dens.expect(|x| w(x) * (x - mean).powi(2)) / mass;
            assert!(mass > 0.99, "mass {mass} at eps = {eps}");
            last = var / (eps * eps);
        }
        assert_relative_eq!(last, 1.0 / 6.0, max_relative = 0.02);
    }

    #[test]
    fn policy_grid_covers_low_penalty_walls() {
        let p = get_problem(&ProblemSpec::LinearUnstable).unwrap();
        let sol = solve_auto(&p.system, 0.1, 1.0, &GridPolicy::fixed_n(4001)).unwrap();
        assert!(p.system.penalty_1d(sol.grid.lo) < sol.beta);
        let grid = policy_grid(&p.system, &sol, 1.0).unwrap();
        assert!(p.system.penalty_1d(grid.lo) >= sol.beta + 1.0);
        assert!(p.system.penalty_1d(grid.hi) >= sol.beta + 1.0);
        assert_relative_eq!(grid.h(), sol.grid.h(), max_relative = 1e-9);
        let pi = policy_iteration(&p.system, 0.1, 1.0, &grid, 100, 1e-12).unwrap();
        assert!(pi.converged);
        assert_relative_eq!(pi.beta, sol.beta, max_relative = 1e-4);
    }

    #[test]
    fn policy_iteration_agrees_with_eigen_solver() {
        let p = get_problem(&ProblemSpec::LinearUnstable).unwrap();
        let sol = solve_auto(&p.system, 0.2, 1.0, &GridPolicy::fixed_n(4001)).unwrap();
        let pi = policy_iteration(&p.system, 0.2, 1.0, &sol.grid, 100, 1e-12).unwrap();
        assert!(pi.converged);
        assert_relative_eq!(pi.beta, sol.beta, max_relative = 1e-4);
        for w in pi.beta_history.windows(2).skip(1) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn interpolation_clamps() {
        let xs = [0.0, 1.0, 2.0];
        let ys = [0.0, 10.0, 20.0];
        assert_eq!(interp(&xs, &ys, -1.0), 0.0);
        assert_eq!(interp(&xs, &ys, 0.5), 5.0);
        assert_eq!(interp(&xs, &ys, 3.0), 20.0);
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::new(0.0, 1.0, 10).is_err());
        assert!(Grid1D::new(1.0, 0.0, 100).is_err());
        let g = Grid1D::new(-1.0, 1.0, 101).unwrap();
        assert_relative_eq!(g.h(), 0.02);
        assert_eq!(g.x(100), 1.0);
    }
}
