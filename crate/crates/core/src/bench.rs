//! Built-in benchmark systems and their closed-form oracle values.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dynamics::{poly_derivative, poly_eval, BoxDomain, Polynomial1D, Stability, VectorField, VectorFieldSystem};
use crate::error::{Error, Result};

/// Default penalty weight for `double_well_1`.
pub const DEFAULT_C: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ProblemSpec {
    DoubleWell1 { c: f64 },
    DoubleWell2,
    LinearUnstable,
    LinearStable,
    LinearQuadratic { m: f64, l: f64 },
}

impl ProblemSpec {
    /// Parses a catalog name and parameter map; unknown names or parameters are rejected.
    pub fn parse(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let allowed: &[&str] = match name {
            "double_well_1" => &["c"],
            "linear_quadratic" => &["M", "L"],
            "double_well_2" | "linear_unstable" | "linear_stable" => &[],
            other => return Err(Error::domain(format!("unknown benchmark '{other}'"))),
        };
        if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::domain(format!(
                "benchmark '{name}' has no parameter '{k}'"
            )));
        }
        let spec = match name {
            "double_well_1" => ProblemSpec::DoubleWell1 {
                c: params.get("c").copied().unwrap_or(DEFAULT_C),
            },
            "double_well_2" => ProblemSpec::DoubleWell2,
            "linear_unstable" => ProblemSpec::LinearUnstable,
            "linear_stable" => ProblemSpec::LinearStable,
            _ => ProblemSpec::LinearQuadratic {
                m: params.get("M").copied().unwrap_or(1.0),
                l: params.get("L").copied().unwrap_or(0.0),
            },
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProblemSpec::DoubleWell1 { .. } => "double_well_1",
            ProblemSpec::DoubleWell2 => "double_well_2",
            ProblemSpec::LinearUnstable => "linear_unstable",
            ProblemSpec::LinearStable => "linear_stable",
            ProblemSpec::LinearQuadratic { .. } => "linear_quadratic",
        }
    }

    fn check(&self) -> Result<()> {
        match *self {
            ProblemSpec::DoubleWell1 { c } if !(c > 0.0 && c.is_finite()) => {
                Err(Error::domain(format!("double_well_1 needs c > 0, got {c}")))
            }
            ProblemSpec::LinearQuadratic { m, l } => {
                if !(m.is_finite() && l.is_finite() && l >= 0.0) {
                    Err(Error::domain("linear_quadratic needs finite M and L ≥ 0"))
                } else if m == 0.0 {
                    Err(Error::domain("linear_quadratic needs M ≠ 0 (hyperbolic origin)"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkProblem {
    pub spec: ProblemSpec,
    pub system: VectorFieldSystem,
    pub known_equilibria: Vec<(f64, Stability)>,
    pub has_closed_forms: bool,
    pub notes: &'static str,
}

/// `double_well_1`: `m = −F′` with `F = x⁴/4 − x³/3 − x²`, `ℓ = c x²`.
///
/// Outside `[−10, 10]` the drift blends into the constant `m(±10)` over a
/// quintic smoothstep of width 2, and the penalty continues along its tangent.
#[derive(Clone, Debug)]
pub struct DoubleWell1 {
    pub c: f64,
}

const DW1_DRIFT: [f64; 4] = [0.0, 2.0, 1.0, -1.0];
const TAPER_START: f64 = 10.0;
const TAPER_WIDTH: f64 = 2.0;

fn smoothstep(t: f64) -> (f64, f64) {
    let t = t.clamp(0.0, 1.0);
    let s = t * t * t * (t * (6.0 * t - 15.0) + 10.0);
    let ds = 30.0 * t * t * (t - 1.0) * (t - 1.0);
    (s, ds)
}

impl DoubleWell1 {
    fn drift_and_derivative(&self, x: f64) -> (f64, f64) {
        let dp = poly_derivative(&DW1_DRIFT);
        let mp = poly_eval(&DW1_DRIFT, x);
        let dmp = poly_eval(&dp, x);
        let a = x.abs();
        if a <= TAPER_START {
            return (mp, dmp);
        }
        let edge = poly_eval(&DW1_DRIFT, TAPER_START.copysign(x));
        let (s, ds) = smoothstep((a - TAPER_START) / TAPER_WIDTH);
        let dsdx = ds * x.signum() / TAPER_WIDTH;
        let m = (1.0 - s) * mp + s * edge;
        let dm = (1.0 - s) * dmp + dsdx * (edge - mp);
        (m, dm)
    }

    fn penalty_and_gradient(&self, x: f64) -> (f64, f64) {
        let a = x.abs();
        if a <= TAPER_START {
            (self.c * x * x, 2.0 * self.c * x)
        } else {
            let edge = self.c * TAPER_START * TAPER_START;
            let slope = 2.0 * self.c * TAPER_START;
            (edge + slope * (a - TAPER_START), slope * x.signum())
        }
    }
}

impl VectorField for DoubleWell1 {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.drift_and_derivative(x[0]).0;
    }

    fn penalty(&self, x: &[f64]) -> f64 {
        self.penalty_and_gradient(x[0]).0
    }

    fn drift_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, self.drift_and_derivative(x[0]).1))
    }

    fn penalty_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![self.penalty_and_gradient(x[0]).1])
    }
}

fn poly_system(name: &str, drift: Vec<f64>, penalty: Vec<f64>, lo: f64, hi: f64) -> Result<VectorFieldSystem> {
    VectorFieldSystem::new(
        name,
        Arc::new(Polynomial1D::new(drift, penalty)?),
        BoxDomain::interval(lo, hi)?,
    )
}

pub fn get_problem(spec: &ProblemSpec) -> Result<BenchmarkProblem> {
    spec.check()?;
    use Stability::*;
    let p = match *spec {
        ProblemSpec::DoubleWell1 { c } => BenchmarkProblem {
            spec: spec.clone(),
            system: VectorFieldSystem::new(
                "double_well_1",
                Arc::new(DoubleWell1 { c }),
                BoxDomain::interval(-12.0, 12.0)?,
            )?,
            known_equilibria: vec![(-1.0, Stable), (0.0, Unstable), (2.0, Stable)],
            has_closed_forms: false,
            notes: "double well with stable minima at -1 and 2; tapered to a constant drift beyond |x| = 10",
        },
        ProblemSpec::DoubleWell2 => BenchmarkProblem {
            spec: spec.clone(),
            // F′ = x⁵ − x⁴ − 7x³ + x² + 6x
            system: poly_system(
                "double_well_2",
                vec![0.0, -6.0, -1.0, 7.0, 1.0, -1.0],
                vec![16.0, 0.0, -20.0, -1.0, 5.0],
                -4.0,
                5.0,
            )?,
            known_equilibria: vec![
                (-2.0, Stable),
                (-1.0, Unstable),
                (0.0, Stable),
                (1.0, Unstable),
                (3.0, Stable),
            ],
            has_closed_forms: false,
            notes: "sextic potential with five equilibria; penalty is negative on part of the box",
        },
        ProblemSpec::LinearUnstable => BenchmarkProblem {
            spec: spec.clone(),
            system: poly_system("linear_unstable", vec![0.0, 1.0], vec![1.0, 2.0, 1.0], -10.0, 10.0)?,
            known_equilibria: vec![(0.0, Unstable)],
            has_closed_forms: true,
            notes: "m = x, penalty (x+1)^2; Gaussian optimal stationary law",
        },
        ProblemSpec::LinearStable => BenchmarkProblem {
            spec: spec.clone(),
            system: poly_system("linear_stable", vec![0.0, -1.0], vec![1.0, 2.0, 1.0], -10.0, 10.0)?,
            known_equilibria: vec![(0.0, Stable)],
            has_closed_forms: true,
            notes: "m = -x, penalty (x+1)^2; Gaussian optimal stationary law",
        },
        ProblemSpec::LinearQuadratic { m, l } => BenchmarkProblem {
            spec: spec.clone(),
            system: poly_system("linear_quadratic", vec![0.0, m], vec![0.0, 0.0, 0.5 * l], -10.0, 10.0)?,
            known_equilibria: vec![(0.0, if m > 0.0 { Unstable } else { Stable })],
            has_closed_forms: true,
            notes: "m = M x, penalty L x^2 / 2",
        },
    };
    Ok(p)
}

/// Closed-form oracle values at `(ε, ν)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedForm {
    pub beta: f64,
    pub mean: f64,
    pub variance: f64,
    pub effort: f64,
    /// Optimal closed-loop drift is `−rate·x + offset`.
    pub rate: f64,
    pub offset: f64,
}

pub fn closed_form(spec: &ProblemSpec, epsilon: f64, nu: f64) -> Result<ClosedForm> {
    if !(epsilon > 0.0 && nu > 0.0) {
        return Err(Error::domain("closed forms need ε > 0 and ν > 0"));
    }
    let e2 = epsilon * epsilon;
    let scale = epsilon.powf(2.0 * nu - 2.0);
    let noise = epsilon.powf(2.0 * nu);
    let s = (1.0 + 2.0 * e2).sqrt();
    let cf = match *spec {
        ProblemSpec::LinearUnstable => ClosedForm {
            beta: 1.0 / (s * s) + scale * (1.0 + s) / 2.0,
            mean: -2.0 * e2 / (s * s),
            variance: noise / (2.0 * s),
            effort: scale * (1.0 + s).powi(2) / (4.0 * s) + 2.0 * e2 / s.powi(4),
            rate: s,
            offset: -2.0 * e2 / s,
        },
        ProblemSpec::LinearStable => ClosedForm {
            beta: 1.0 / (s * s) + scale * (s - 1.0) / 2.0,
            mean: -2.0 * e2 / (s * s),
            variance: noise / (2.0 * s),
            effort: epsilon.powf(2.0 * nu + 2.0) / ((1.0 + s).powi(2) * s) + 2.0 * e2 / s.powi(4),
            rate: s,
            offset: -2.0 * e2 / s,
        },
        ProblemSpec::LinearQuadratic { m, l } => {
            spec.check()?;
            let r = (m * m + l * e2).sqrt();
            // V = a x²/2 with ε²a = M + r
            let ae2 = m + r;
            let variance = noise / (2.0 * r);
            ClosedForm {
                beta: scale * ae2 / 2.0,
                mean: 0.0,
                variance,
                effort: 0.5 * ae2 * ae2 / e2 * variance,
                rate: r,
                offset: 0.0,
            }
        }
        _ => {
            return Err(Error::domain(format!(
                "benchmark '{}' has no closed forms",
                spec.name()
            )))
        }
    };
    Ok(cf)
}
