//! Monte Carlo simulation of the controlled diffusion
//! `dX = (m(X) + ε u(X)) dt + ε^ν dW` and its stationary statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{find_equilibria, local_energy_form, Equilibrium, VectorFieldSystem};
use crate::error::{Error, Result};
use crate::hjb::HjbSolution;
use crate::matctrl::{self, RiccatiPair, SquareMatrix};

/// Magic bytes opening a binary trace file.
pub const TRACE_MAGIC: &[u8; 8] = b"EQSTRACE";

fn default_dt() -> f64 {
    1e-3
}
fn default_horizon() -> f64 {
    1000.0
}
fn default_replicas() -> usize {
    8
}
fn default_stride() -> usize {
    10
}
fn default_bins() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub epsilon: f64,
    pub nu: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Defaults to 10% of the horizon.
    #[serde(default)]
    pub burn_in: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    pub x0: Vec<f64>,
    /// Keep every `sample_stride`-th post-burn-in state; 0 keeps none.
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Histogram range for the first coordinate; defaults to the system box.
    #[serde(default)]
    pub histogram_range: Option<[f64; 2]>,
    /// Points whose neighbourhood mass is reported; defaults to all equilibria.
    #[serde(default)]
    pub equilibria: Option<Vec<Vec<f64>>>,
    /// Ball radius for masses; defaults to 0.3 × the smallest equilibrium gap.
    #[serde(default)]
    pub mass_radius: Option<f64>,
    /// Radius for the mass outside the neighbourhood of the equilibrium set.
    #[serde(default)]
    pub far_radius: Option<f64>,
    /// Restricts the squared-distance moment to the ball of this radius around the set.
    #[serde(default)]
    pub dist_radius: Option<f64>,
    /// Binary trace of replica 0 at the sample stride.
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
}

impl SimConfig {
    pub fn new(epsilon: f64, nu: f64, x0: Vec<f64>) -> Self {
        SimConfig {
            epsilon,
            nu,
            dt: default_dt(),
            horizon: default_horizon(),
            burn_in: None,
            seed: 0,
            replicas: default_replicas(),
            x0,
            sample_stride: default_stride(),
            histogram_bins: default_bins(),
            histogram_range: None,
            equilibria: None,
            mass_radius: None,
            far_radius: None,
            dist_radius: None,
            trace_path: None,
        }
    }

    pub fn burn_in(&self) -> f64 {
        self.burn_in.unwrap_or(0.1 * self.horizon)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::domain(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return bad("nu must be positive");
        }
        if !(self.dt > 0.0 && self.horizon > 0.0 && self.dt < self.horizon) {
            return bad("need 0 < dt < horizon");
        }
        let b = self.burn_in();
        if !(b >= 0.0 && b < self.horizon) {
            return bad("burn_in must lie in [0, horizon)");
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1");
        }
        if self.x0.len() != dim {
            return bad("x0 dimension does not match the system");
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Zero,
    HjbFeedback,
    Barv,
    Tube,
    GradientShaping,
    Custom,
}

type ControlFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A stationary Markov control `x ↦ u(x)`.
#[derive(Clone)]
pub struct ControlField {
    pub kind: ControlKind,
    dim: usize,
    eval: Arc<ControlFn>,
}

impl std::fmt::Debug for ControlField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlField")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .finish()
    }
}

impl ControlField {
    pub fn zero(dim: usize) -> Self {
        ControlField {
            kind: ControlKind::Zero,
            dim,
            eval: Arc::new(|_, out| out.iter_mut().for_each(|v| *v = 0.0)),
        }
    }

    pub fn custom(dim: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        ControlField {
            kind: ControlKind::Custom,
            dim,
            eval: Arc::new(f),
        }
    }

    /// The optimal feedback `v* = −εV'`, linearly interpolated between grid nodes.
    pub fn hjb_feedback(sol: Arc<HjbSolution>) -> Self {
        ControlField {
            kind: ControlKind::HjbFeedback,
            dim: 1,
            eval: Arc::new(move |x, out| out[0] = sol.feedback_at(x[0])),
        }
    }

    /// `v̄(x) = ((M − Q̂)(x − z) − m(x)) / ε`: makes the closed loop exactly linear about `z`.
    pub fn barv(sys: &VectorFieldSystem, eq: &Equilibrium, pair: &RiccatiPair, epsilon: f64) -> Self {
        let gain = eq.jacobian.as_matrix() - pair.q.as_matrix();
        let z = eq.z.clone();
        let sys = sys.clone();
        ControlField {
            kind: ControlKind::Barv,
            dim: z.len(),
            eval: Arc::new(move |x, out| {
                let y = DVector::from_iterator(x.len(), x.iter().zip(&z).map(|(a, b)| a - b));
                let lin = &gain * y;
                let m = sys.drift(x);
                for i in 0..out.len() {
                    out[i] = (lin[i] - m[i]) / epsilon;
                }
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }
}

/// Tube control at a stable equilibrium.
///
/// Outside the tube `|R(x−z)| < ε^{ν/2}` the control replaces the drift by its
/// linearization `M(x−z)`; inside it is zero. `R⁻¹` solves
/// `M R⁻¹ + R⁻¹ Mᵀ = −4I`, and `R` is scaled so that `trace(R) ≤ 1`.
#[derive(Clone, Debug)]
pub struct TubeControl {
    pub control: ControlField,
    pub r: SquareMatrix,
    pub r_inv_norm: f64,
    pub tube_radius: f64,
}

pub fn tube_control(sys: &VectorFieldSystem, eq: &Equilibrium, epsilon: f64, nu: f64) -> Result<TubeControl> {
    if !eq.is_stable() {
        return Err(Error::domain(format!(
            "tube control needs a stable equilibrium, {:?} has index {}",
            eq.z, eq.index
        )));
    }
    let d = eq.z.len();
    let x = matctrl::solve_lyapunov(&eq.jacobian, &SquareMatrix::diagonal(&vec![4.0; d])?)?;
    let mut r = x
        .as_matrix()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numeric_with("tube Lyapunov solution is singular", x.as_matrix()))?;
    let tr = r.trace();
    if tr > 1.0 {
        r /= tr;
    }
    let r_inv_norm = r
        .clone()
        .try_inverse()
        .map(|ri| ri.norm())
        .unwrap_or(f64::INFINITY);
    let tube_radius = epsilon.powf(nu / 2.0);
    let jac = eq.jacobian.as_matrix().clone();
    let z = eq.z.clone();
    let rr = r.clone();
    let sys = sys.clone();
    let control = ControlField {
        kind: ControlKind::Tube,
        dim: d,
        eval: Arc::new(move |x, out| {
            let y = DVector::from_iterator(x.len(), x.iter().zip(&z).map(|(a, b)| a - b));
            if (&rr * &y).norm() < tube_radius {
                out.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            let lin = &jac * y;
            let m = sys.drift(x);
            for i in 0..out.len() {
                out[i] = (lin[i] - m[i]) / epsilon;
            }
        }),
    };
    Ok(TubeControl {
        control,
        r: SquareMatrix::new(r)?,
        r_inv_norm,
        tube_radius,
    })
}

/// `v(x) = −(m(x) + ∇ŵ(x)) / ε` with `ŵ` the local quadratic energy at a stable `z`,
/// so that the closed loop is the gradient flow of `ŵ` plus noise.
pub fn gradient_shaping(sys: &VectorFieldSystem, eq: &Equilibrium, epsilon: f64) -> Result<ControlField> {
    if !eq.is_stable() {
        return Err(Error::domain("gradient shaping needs a stable equilibrium"));
    }
    let form = local_energy_form(eq, 0.1, 0.0)?;
    let sys = sys.clone();
    Ok(ControlField {
        kind: ControlKind::GradientShaping,
        dim: eq.z.len(),
        eval: Arc::new(move |x, out| {
            let g = form.gradient(x);
            let m = sys.drift(x);
            for i in 0..out.len() {
                out[i] = -(m[i] + g[i]) / epsilon;
            }
        }),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }
}

/// Post-burn-in states kept at the sample stride, row-major.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.iter().map(|x| x[k]).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StandardErrors {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub masses: Vec<f64>,
    pub dist2_mean: f64,
    pub penalty_average: f64,
    pub effort: f64,
    pub ergodic_cost: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StationaryEstimate {
    pub dim: usize,
    pub replicas: usize,
    pub steps_per_replica: u64,
    /// Post-burn-in states accumulated over all replicas.
    pub sample_count: u64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub equilibria: Vec<Vec<f64>>,
    pub mass_radius: f64,
    pub masses: Vec<f64>,
    pub far_radius: Option<f64>,
    pub far_mass: Option<f64>,
    /// Time average of the squared distance to the equilibrium set, counted
    /// only inside `dist_radius` when that is set.
    pub dist2_mean: f64,
    pub penalty_average: f64,
    pub effort: f64,
    /// `penalty_average + effort`, accumulated on the same samples.
    pub ergodic_cost: f64,
    pub histogram: Option<Histogram>,
    pub stderr: StandardErrors,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub samples: SampleSet,
}

impl StationaryEstimate {
    pub fn variance(&self, k: usize) -> f64 {
        self.covariance[k][k]
    }
}

struct Accumulator {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    penalty: f64,
    effort: f64,
    dist2: f64,
    mass: Vec<u64>,
    far: u64,
    hist: Vec<u64>,
    samples: Vec<f64>,
}

impl Accumulator {
    fn new(d: usize, k: usize, bins: usize) -> Self {
        Accumulator {
            n: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d * d],
            penalty: 0.0,
            effort: 0.0,
            dist2: 0.0,
            mass: vec![0; k],
            far: 0,
            hist: vec![0; bins],
            samples: Vec::new(),
        }
    }

    fn push(&mut self, x: &[f64], delta: &mut [f64]) {
        let d = x.len();
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for i in 0..d {
            delta[i] = x[i] - self.mean[i];
            self.mean[i] += delta[i] * inv;
        }
        for i in 0..d {
            let after = x[i] - self.mean[i];
            for j in 0..d {
                self.m2[i * d + j] += delta[j] * after;
            }
        }
    }

    fn covariance(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.m2.iter().map(|v| v / n).collect()
    }
}

struct Observables {
    targets: Vec<Vec<f64>>,
    radius: f64,
    far_radius: Option<f64>,
    dist_radius: Option<f64>,
    hist_lo: f64,
    hist_hi: f64,
}

fn min_gap(points: &[Vec<f64>]) -> f64 {
    let mut gap = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            gap = gap.min(dist(a, b));
        }
    }
    gap
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// Default equilibrium set used for mass and distance statistics.
pub fn equilibrium_points(sys: &VectorFieldSystem) -> Result<Vec<Vec<f64>>> {
    let density = match sys.dim() {
        1 => 2001,
        2 => 201,
        3 => 41,
        _ => 8,
    };
    Ok(find_equilibria(sys, density)?
        .equilibria
        .into_iter()
        .map(|e| e.z)
        .collect())
}

/// Largest `‖∂b‖` of the closed-loop drift at the start point and the target points.
fn stiffness(sys: &VectorFieldSystem, control: &ControlField, eps: f64, points: &[Vec<f64>]) -> f64 {
    let d = sys.dim();
    let mut u_plus = vec![0.0; d];
    let mut u_minus = vec![0.0; d];
    points
        .iter()
        .map(|p| {
            let mut jac = sys.jacobian(p);
            let mut xp = p.clone();
            for j in 0..d {
                let h = 1e-6 * (1.0 + p[j].abs());
                xp[j] = p[j] + h;
                control.eval(&xp, &mut u_plus);
                xp[j] = p[j] - h;
                control.eval(&xp, &mut u_minus);
                xp[j] = p[j];
                for i in 0..d {
                    jac[(i, j)] += eps * (u_plus[i] - u_minus[i]) / (2.0 * h);
                }
            }
            jac.norm()
        })
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
}

struct TraceSink {
    writer: BufWriter<File>,
}

impl TraceSink {
    fn create(path: &Path, cfg: &SimConfig, dim: usize) -> Result<Self> {
        let file = File::create(path)
            .map_err(|e| Error::domain(format!("cannot create trace file {}: {e}", path.display())))?;
        let mut writer = BufWriter::new(file);
        // The file's own location is left out so identical runs give identical bytes.
        let cfg = SimConfig { trace_path: None, ..cfg.clone() };
        let header = serde_json::json!({ "config": cfg, "dim": dim, "record": "t, x[0..dim]" });
        let bytes = serde_json::to_vec(&header).map_err(|e| Error::domain(e.to_string()))?;
        let io = |e: std::io::Error| Error::domain(format!("trace write failed: {e}"));
        writer.write_all(TRACE_MAGIC).map_err(io)?;
        writer.write_all(&(bytes.len() as u64).to_le_bytes()).map_err(io)?;
        writer.write_all(&bytes).map_err(io)?;
        Ok(TraceSink { writer })
    }

    fn record(&mut self, t: f64, x: &[f64]) -> Result<()> {
        let io = |e: std::io::Error| Error::domain(format!("trace write failed: {e}"));
        self.writer.write_all(&t.to_le_bytes()).map_err(io)?;
        for v in x {
            self.writer.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::domain(format!("trace flush failed: {e}")))
    }
}

/// A decoded trace: header JSON and `(t, x)` records.
#[derive(Clone, Debug)]
pub struct Trace {
    pub header: serde_json::Value,
    pub dim: usize,
    pub records: Vec<(f64, Vec<f64>)>,
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let io = |e: std::io::Error| Error::domain(format!("trace read failed: {e}"));
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TRACE_MAGIC {
        return Err(Error::domain("not a trace file"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header: serde_json::Value =
        serde_json::from_slice(&header).map_err(|e| Error::domain(e.to_string()))?;
    let dim = header["dim"]
        .as_u64()
        .ok_or_else(|| Error::domain("trace header lacks dim"))? as usize;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    let width = 8 * (dim + 1);
    if rest.len() % width != 0 {
        return Err(Error::domain("truncated trace record"));
    }
    let records = rest
        .chunks_exact(width)
        .map(|c| {
            let vals: Vec<f64> = c
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            (vals[0], vals[1..].to_vec())
        })
        .collect();
    Ok(Trace { header, dim, records })
}

fn run_replica(
    sys: &VectorFieldSystem,
    control: &ControlField,
    cfg: &SimConfig,
    obs: &Observables,
    replica: usize,
) -> Result<Accumulator> {
    let d = sys.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(replica as u64);
    let steps = (cfg.horizon / cfg.dt).round() as u64;
    let burn = (cfg.burn_in() / cfg.dt).round() as u64;
    let sqdt = cfg.dt.sqrt();
    let noise = cfg.epsilon.powf(cfg.nu) * sqdt;
    let escape = sys.domain.scaled(2.0);
    let bins = cfg.histogram_bins;
    let mut acc = Accumulator::new(d, obs.targets.len(), bins);
    let mut trace = match (&cfg.trace_path, replica) {
        (Some(p), 0) => Some(TraceSink::create(p, cfg, d)?),
        _ => None,
    };
    let mut x = cfg.x0.clone();
    let mut m = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut delta = vec![0.0; d];
    let r2 = obs.radius * obs.radius;
    let far2 = obs.far_radius.map(|r| r * r);
    let window2 = obs.dist_radius.map_or(f64::INFINITY, |r| r * r);
    let hist_scale = bins as f64 / (obs.hist_hi - obs.hist_lo);
    for step in 1..=steps {
        sys.field.drift(&x, &mut m);
        control.eval(&x, &mut u);
        for i in 0..d {
            let xi: f64 = StandardNormal.sample(&mut rng);
            x[i] += (m[i] + cfg.epsilon * u[i]) * cfg.dt + noise * xi;
        }
        if !escape.contains(&x) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                replica,
                time: step as f64 * cfg.dt,
                state: x,
            });
        }
        if step <= burn {
            continue;
        }
        // effort uses the control at the post-step state, like the penalty
        control.eval(&x, &mut u);
        acc.push(&x, &mut delta);
        acc.penalty += sys.penalty(&x);
        acc.effort += 0.5 * u.iter().map(|v| v * v).sum::<f64>();
        let mut nearest = f64::INFINITY;
        for (k, z) in obs.targets.iter().enumerate() {
            let dz: f64 = z.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            if dz <= r2 {
                acc.mass[k] += 1;
            }
            nearest = nearest.min(dz);
        }
        if nearest < window2 {
            acc.dist2 += nearest;
        }
        if let Some(f2) = far2 {
            if nearest > f2 {
                acc.far += 1;
            }
        }
        let b = ((x[0] - obs.hist_lo) * hist_scale).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        acc.hist[b] += 1;
        if cfg.sample_stride > 0 && (step - burn).is_multiple_of(cfg.sample_stride as u64) {
            acc.samples.extend_from_slice(&x);
            if let Some(t) = trace.as_mut() {
                t.record(step as f64 * cfg.dt, &x)?;
            }
        }
    }
    if let Some(t) = trace {
        t.finish()?;
    }
    Ok(acc)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

/// Euler–Maruyama integration with independent replicas.
///
/// Each replica owns the ChaCha8 stream `(seed, replica)`; replicas run in
/// parallel and are merged in index order, so results are bit-identical for a
/// given configuration.
pub fn integrate(sys: &VectorFieldSystem, control: &ControlField, cfg: &SimConfig) -> Result<StationaryEstimate> {
    let d = sys.dim();
    cfg.validate(d)?;
    if control.dim() != d {
        return Err(Error::domain("control dimension does not match the system"));
    }
    let mut warnings = Vec::new();
    let targets = match &cfg.equilibria {
        Some(t) => t.clone(),
        None => equilibrium_points(sys)?,
    };
    if targets.iter().any(|t| t.len() != d) {
        return Err(Error::domain("equilibrium point dimension does not match the system"));
    }
    let radius = cfg.mass_radius.unwrap_or_else(|| {
        let gap = min_gap(&targets);
        if gap.is_finite() {
            0.3 * gap
        } else {
            0.3
        }
    });
    let [hist_lo, hist_hi] = cfg
        .histogram_range
        .unwrap_or([sys.domain.lo[0], sys.domain.hi[0]]);
    if !(hist_lo < hist_hi) {
        return Err(Error::domain("histogram range must be increasing"));
    }
    let obs = Observables {
        targets: targets.clone(),
        radius,
        far_radius: cfg.far_radius,
        dist_radius: cfg.dist_radius,
        hist_lo,
        hist_hi,
    };

    let mut probe = targets.clone();
    probe.push(cfg.x0.clone());
    let stiff = stiffness(sys, control, cfg.epsilon, &probe);
    let dt_max = 0.01f64.min(if stiff > 0.0 { 0.1 / stiff } else { f64::INFINITY });
    if cfg.dt > dt_max {
        let msg = format!(
            "dt = {} exceeds the stiffness heuristic min(0.01, 0.1/|∂b|) = {dt_max:.2e}",
            cfg.dt
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let accs: Vec<Accumulator> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| run_replica(sys, control, cfg, &obs, r))
        .collect::<Result<Vec<_>>>()?;

    let n_per = accs[0].n;
    let total = n_per * accs.len() as u64;
    if n_per == 0 {
        return Err(Error::InsufficientSamples {
            found: 0,
            required: 1,
            context: "no post-burn-in steps".into(),
        });
    }
    let nf = n_per as f64;
    let per_rep = |f: &dyn Fn(&Accumulator) -> f64| -> (f64, f64) {
        mean_and_se(&accs.iter().map(f).collect::<Vec<_>>())
    };

    // Pooled mean and covariance (equal replica weights).
    let mut mean = vec![0.0; d];
    let mut mean_se = vec![0.0; d];
    for i in 0..d {
        let (m, se) = per_rep(&|a| a.mean[i]);
        mean[i] = m;
        mean_se[i] = se;
    }
    let mut cov = vec![vec![0.0; d]; d];
    let covs: Vec<Vec<f64>> = accs.iter().map(|a| a.covariance()).collect();
    for i in 0..d {
        for j in 0..d {
            let within: f64 = covs.iter().map(|c| c[i * d + j]).sum::<f64>() / accs.len() as f64;
            let between: f64 = accs
                .iter()
                .map(|a| (a.mean[i] - mean[i]) * (a.mean[j] - mean[j]))
                .sum::<f64>()
                / accs.len() as f64;
            cov[i][j] = within + between;
        }
    }
    let var_se: Vec<f64> = (0..d).map(|i| per_rep(&|a| a.covariance()[i * d + i]).1).collect();
    let (penalty_average, pen_se) = per_rep(&|a| a.penalty / nf);
    let (effort, eff_se) = per_rep(&|a| a.effort / nf);
    let (_, cost_se) = per_rep(&|a| (a.penalty + a.effort) / nf);
    let (dist2_mean, dist2_se) = per_rep(&|a| a.dist2 / nf);
    let mut masses = Vec::new();
    let mut mass_se = Vec::new();
    for k in 0..targets.len() {
        let (m, se) = per_rep(&|a| a.mass[k] as f64 / nf);
        masses.push(m);
        mass_se.push(se);
    }
    let far_mass = cfg
        .far_radius
        .map(|_| accs.iter().map(|a| a.far).sum::<u64>() as f64 / total as f64);
    let mut counts = vec![0u64; cfg.histogram_bins];
    for a in &accs {
        for (c, h) in counts.iter_mut().zip(&a.hist) {
            *c += h;
        }
    }
    let mut samples = SampleSet {
        dim: d,
        data: Vec::new(),
    };
    for a in &accs {
        samples.data.extend_from_slice(&a.samples);
    }

    Ok(StationaryEstimate {
        dim: d,
        replicas: cfg.replicas,
        steps_per_replica: n_per,
        sample_count: total,
        mean,
        covariance: cov,
        equilibria: targets,
        mass_radius: radius,
        masses,
        far_radius: cfg.far_radius,
        far_mass,
        dist2_mean,
        penalty_average,
        effort,
        ergodic_cost: penalty_average + effort,
        histogram: Some(Histogram {
            lo: hist_lo,
            hi: hist_hi,
            counts,
        }),
        stderr: StandardErrors {
            mean: mean_se,
            variance: var_se,
            masses: mass_se,
            dist2_mean: dist2_se,
            penalty_average: pen_se,
            effort: eff_se,
            ergodic_cost: cost_se,
        },
        warnings,
        samples,
    })
}

/// Statistics of `y = (x − z)/ε^ν` over samples inside the ball of radius `window_radius`.
#[derive(Clone, Debug, Serialize)]
pub struct ScaledStatistics {
    pub count: usize,
    pub covariance: Vec<Vec<f64>>,
    /// Normalized histogram of the first scaled coordinate.
    pub histogram_edges: Vec<f64>,
    pub histogram_density: Vec<f64>,
}

pub const MIN_WINDOW_SAMPLES: usize = 10_000;

pub fn scaled_statistics(
    samples: &SampleSet,
    z: &[f64],
    epsilon: f64,
    nu: f64,
    window_radius: f64,
    bins: usize,
) -> Result<ScaledStatistics> {
    if z.len() != samples.dim {
        return Err(Error::domain("center dimension does not match samples"));
    }
    let scale = epsilon.powf(nu);
    let ys: Vec<Vec<f64>> = samples
        .iter()
        .filter(|x| dist(x, z) <= window_radius)
        .map(|x| x.iter().zip(z).map(|(a, b)| (a - b) / scale).collect())
        .collect();
    if ys.len() < MIN_WINDOW_SAMPLES {
        return Err(Error::InsufficientSamples {
            found: ys.len(),
            required: MIN_WINDOW_SAMPLES,
            context: format!("samples within {window_radius} of {z:?}"),
        });
    }
    let d = z.len();
    let n = ys.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| ys.iter().map(|y| y[i]).sum::<f64>() / n).collect();
    let covariance = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| ys.iter().map(|y| (y[i] - mean[i]) * (y[j] - mean[j])).sum::<f64>() / n)
                .collect()
        })
        .collect();
    let bins = bins.max(1);
    let half = window_radius / scale;
    let width = 2.0 * half / bins as f64;
    let mut counts = vec![0usize; bins];
    for y in &ys {
        let b = ((y[0] + half) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1;
    }
    Ok(ScaledStatistics {
        count: ys.len(),
        covariance,
        histogram_edges: (0..=bins).map(|k| -half + width * k as f64).collect(),
        histogram_density: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
    })
}

/// Kolmogorov–Smirnov distance between the empirical law of `samples` and `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentRow {
    pub epsilon: f64,
    pub dist2_mean: f64,
    pub dist2_stderr: f64,
    pub far_radius: f64,
    pub far_mass: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeReport {
    pub nu: f64,
    pub rows: Vec<MomentRow>,
    pub slope: f64,
    pub intercept: f64,
    /// `2 (ν ∧ 2)`.
    pub expected_slope: f64,
}

/// Fits `log E[dist(X, 𝒮)²; dist(X, 𝒮) < r]` against `log ε`, with `𝒮` the
/// equilibria in `cfg` (all equilibria by default).
///
/// `control_family` builds the control for each `ε`; the far-mass radius is
/// `kappa2 · ε^{ν∧1}`.
pub fn moment_scaling_study(
    sys: &VectorFieldSystem,
    control_family: &(dyn Fn(f64) -> Result<ControlField> + Sync),
    nu: f64,
    eps_list: &[f64],
    cfg: &SimConfig,
    r: f64,
    kappa2: f64,
) -> Result<SlopeReport> {
    if eps_list.len() < 4 {
        return Err(Error::domain("moment scaling needs at least 4 values of epsilon"));
    }
    let lo = eps_list.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eps_list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi / lo < 10.0 * (1.0 - 1e-12) {
        return Err(Error::domain("epsilon values must span at least a decade"));
    }
    let mut rows = Vec::new();
    for &eps in eps_list {
        let control = control_family(eps)?;
        let far = kappa2 * eps.powf(nu.min(1.0));
        let mut c = cfg.clone();
        c.epsilon = eps;
        c.nu = nu;
        c.far_radius = Some(far);
        c.dist_radius = Some(r);
        c.sample_stride = 0;
        let est = integrate(sys, &control, &c)?;
        rows.push(MomentRow {
            epsilon: eps,
            dist2_mean: est.dist2_mean,
            dist2_stderr: est.stderr.dist2_mean,
            far_radius: far,
            far_mass: est.far_mass.unwrap_or(0.0),
        });
    }
    let lx: Vec<f64> = rows.iter().map(|r| r.epsilon.ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.dist2_mean.ln()).collect();
    let (slope, intercept) = fit_line(&lx, &ly);
    Ok(SlopeReport {
        nu,
        rows,
        slope,
        intercept,
        expected_slope: 2.0 * nu.min(2.0),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BarvRow {
    pub epsilon: f64,
    pub effort: f64,
    pub effort_stderr: f64,
    /// `effort / ε^{2ν−2}`, which tends to Λ⁺.
    pub scaled_effort: f64,
    pub unstable_trace: f64,
    pub penalty_average: f64,
    pub penalty_at: f64,
    pub covariance: Vec<Vec<f64>>,
    /// `ε^{2ν} Σ̂`.
    pub expected_covariance: Vec<Vec<f64>>,
}

/// Simulates under `v̄_z` for each `ε` and compares the effort with `ε^{2ν−2}Λ⁺` and the
/// covariance with `ε^{2ν}Σ̂`.
pub fn barv_effort_check(
    sys: &VectorFieldSystem,
    eq: &Equilibrium,
    nu: f64,
    eps_list: &[f64],
    cfg: &SimConfig,
) -> Result<Vec<BarvRow>> {
    let pair = matctrl::solve_degenerate_riccati(&eq.jacobian)?;
    let mut rows = Vec::new();
    for &eps in eps_list {
        let control = ControlField::barv(sys, eq, &pair, eps);
        let mut c = cfg.clone();
        c.epsilon = eps;
        c.nu = nu;
        c.x0 = eq.z.clone();
        c.sample_stride = 0;
        if c.equilibria.is_none() {
            c.equilibria = Some(vec![eq.z.clone()]);
        }
        let est = match integrate(sys, &control, &c) {
            Err(Error::BlowUp { replica, time, .. }) => {
                return Err(Error::numeric(format!(
                    "closed loop under v̄ blew up in replica {replica} at t = {time}"
                )))
            }
            other => other?,
        };
        let scale = eps.powf(2.0 * nu - 2.0);
        let noise = eps.powf(2.0 * nu);
        let sigma = pair.sigma.as_matrix();
        rows.push(BarvRow {
            epsilon: eps,
            effort: est.effort,
            effort_stderr: est.stderr.effort,
            scaled_effort: est.effort / scale,
            unstable_trace: pair.unstable_trace,
            penalty_average: est.penalty_average,
            penalty_at: eq.penalty_at,
            covariance: est.covariance.clone(),
            expected_covariance: (0..sigma.nrows())
                .map(|i| (0..sigma.ncols()).map(|j| noise * sigma[(i, j)]).collect())
                .collect(),
        });
    }
    Ok(rows)
}

/// Covariance matrix helper for callers comparing with `Σ̂`.
pub fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}
