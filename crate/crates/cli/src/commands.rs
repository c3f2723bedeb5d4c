use std::sync::Arc;

use eqsel_core::dynamics::{
    classify_equilibrium, find_equilibria, regime_report, Equilibrium, RegimeReport, VectorFieldSystem,
};
use eqsel_core::hjb::{default_mass_radius, policy_grid, policy_iteration, solve_auto_with, summarize, HjbSolution};
use eqsel_core::matctrl::{
    solve_degenerate_riccati, solve_riccati_kappa, spectral_summary, SquareMatrix, DEFAULT_AXIS_TOL,
};
use eqsel_core::simulate::{
    fit_line, gradient_shaping, integrate, tube_control, ControlField, ControlKind, SimConfig,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Mode, SimOptions};
use crate::error::CliError;
use crate::output::{csv_bytes, num, opt, tag, Artifacts};
use crate::svg::{Plot, Series};

const POLICY_MAX_ITER: usize = 100;
const POLICY_TOL: f64 = 1e-12;
const POLICY_WALL_MARGIN: f64 = 1.0;
/// Relative disagreement between the two solvers that triggers a warning.
const POLICY_AGREEMENT: f64 = 1e-3;

pub struct Context {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub art: Artifacts,
    pub timestamp: Option<String>,
}

/// Descriptive anchors of the results each mode exercises.
pub fn anchors(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::Analyze => &[
            "hyperbolic equilibria and their unstable traces",
            "regime selection: stochastically stable set for sub-, critical and supercritical noise",
            "limits of the optimal ergodic value per regime",
        ],
        Mode::Solve => &[
            "ergodic HJB equation via the ground-state transform",
            "optimal stationary feedback v* = -eps V'",
            "closed-loop stationary density and control effort",
        ],
        Mode::Simulate => &[
            "Euler-Maruyama simulation of the controlled diffusion",
            "concentration of optimal stationary distributions near equilibria",
            "stabilizing controls from the degenerate Riccati pair",
        ],
        Mode::Sweep => &[
            "optimal value rates as eps -> 0 per regime",
            "Gaussian limit of the scaled stationary density with covariance Sigma-hat",
            "regime selection: stochastically stable set",
        ],
        Mode::Riccati => &[
            "degenerate Riccati equation M'Q + QM = Q^2 with M - Q Hurwitz",
            "minimal stabilizing effort equals the unstable trace trace(Q)/2",
        ],
    }
}

fn point(z: &[f64]) -> String {
    z.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";")
}

fn points(zs: &[Vec<f64>]) -> String {
    zs.iter().map(|z| point(z)).collect::<Vec<_>>().join(" ")
}

fn system(cfg: &ExperimentConfig) -> Result<VectorFieldSystem, CliError> {
    cfg.system
        .as_ref()
        .ok_or_else(|| CliError::Config("missing 'system'".into()))?
        .build()
}

fn scan(ctx: &mut Context, sys: &VectorFieldSystem) -> Result<Vec<Equilibrium>, CliError> {
    for w in sys.validate()? {
        ctx.art.warn(format!("system: {w}"));
    }
    let scan = find_equilibria(sys, ctx.cfg.grid.scan_density)?;
    for w in scan.warnings {
        ctx.art.warn(format!("equilibrium scan: {w}"));
    }
    if scan.equilibria.is_empty() {
        return Err(CliError::Numeric("no hyperbolic equilibria in the box".into()));
    }
    Ok(scan.equilibria)
}

fn mass_radius(ctx: &Context, eqs: &[Equilibrium]) -> f64 {
    ctx.cfg.mass_radius.unwrap_or_else(|| default_mass_radius(eqs))
}

fn mass_header(eqs: &[Equilibrium]) -> Vec<String> {
    eqs.iter().map(|e| format!("mass_{}", point(&e.z))).collect()
}

pub fn analyze(ctx: &mut Context) -> Result<(), CliError> {
    let sys = system(&ctx.cfg)?;
    let eqs = scan(ctx, &sys)?;
    let rows: Vec<Vec<String>> = eqs
        .iter()
        .map(|e| {
            vec![
                point(&e.z),
                format!("{:?}", e.classification).to_lowercase(),
                e.index.to_string(),
                num(e.penalty_at),
                num(e.unstable_trace),
                e.jacobian.to_rows().iter().map(|r| point(r)).collect::<Vec<_>>().join(" "),
            ]
        })
        .collect();
    ctx.art.write_csv(
        "equilibria.csv",
        &["z", "classification", "index", "penalty", "unstable_trace", "jacobian"],
        &rows,
    )?;
    ctx.art.write_json("equilibria.json", &eqs)?;
    let mut regime_rows = Vec::new();
    for &nu in &ctx.cfg.nu.clone() {
        let rep = regime_report(&eqs, nu)?;
        ctx.art.write_json(&format!("regime_nu{}.json", tag(nu)), &rep)?;
        regime_rows.push(vec![
            num(nu),
            format!("{:?}", rep.regime).to_lowercase(),
            points(&rep.predicted_s),
            opt(rep.beta_limit),
            num(rep.j),
            opt(rep.js),
            num(rep.jc),
            num(rep.jtilde),
            rep.beta_bounds.clone(),
            rep.effort_order.clone(),
        ]);
    }
    ctx.art.write_csv(
        "regimes.csv",
        &["nu", "regime", "predicted_s", "beta_limit", "J", "Js", "Jc", "Jtilde", "beta_bounds", "effort_order"],
        &regime_rows,
    )
}

fn pairs(cfg: &ExperimentConfig) -> Vec<(f64, f64)> {
    cfg.nu
        .iter()
        .flat_map(|&nu| cfg.epsilon.iter().map(move |&eps| (nu, eps)))
        .collect()
}

pub fn solve(ctx: &mut Context) -> Result<(), CliError> {
    let sys = system(&ctx.cfg)?;
    sys.require_1d()?;
    let eqs = scan(ctx, &sys)?;
    let policy = ctx.cfg.grid.clone();
    let check = ctx.cfg.policy_check;
    let results: Vec<_> = pairs(&ctx.cfg)
        .into_par_iter()
        .map(|(nu, eps)| {
            let sol = solve_auto_with(&sys, eps, nu, &policy, &eqs)?;
            let (summary, dens) = summarize(&sol, &sys)?;
            let pi = if check {
                let grid = policy_grid(&sys, &sol, POLICY_WALL_MARGIN)?;
                Some(policy_iteration(&sys, eps, nu, &grid, POLICY_MAX_ITER, POLICY_TOL)?)
            } else {
                None
            };
            Ok::<_, CliError>((nu, eps, sol, summary, dens, pi))
        })
        .collect::<Result<_, _>>()?;
    let radius = mass_radius(ctx, &eqs);
    let mut header: Vec<String> = [
        "nu", "epsilon", "beta", "residual_sup", "effort", "penalty_average", "mean", "variance", "n", "lo", "hi",
        "max_principle_ok",
    ]
    .map(String::from)
    .to_vec();
    header.extend(mass_header(&eqs));
    if check {
        header.extend(["policy_beta", "policy_converged"].map(String::from));
    }
    let mut rows = Vec::new();
    for (nu, eps, sol, s, dens, pi) in results {
        if !s.max_principle_ok {
            ctx.art.warn(format!("nu={nu} eps={eps}: minimum of V lies where penalty exceeds beta"));
        }
        let name = format!("solution_nu{}_eps{}", tag(nu), tag(eps));
        let rho = dens.density();
        let nodal: Vec<Vec<String>> = (0..sol.x.len())
            .map(|j| {
                vec![
                    num(sol.x[j]),
                    num(sol.value[j]),
                    num(sol.feedback[j]),
                    num(dens.log_density[j]),
                    num(rho[j]),
                    sol.trusted[j].to_string(),
                ]
            })
            .collect();
        ctx.art.write_csv(
            &format!("{name}.csv"),
            &["x", "value", "feedback", "log_density", "density", "trusted"],
            &nodal,
        )?;
        ctx.art.write_json(&format!("{name}.json"), &s)?;
        let mut row = vec![
            num(nu),
            num(eps),
            num(s.beta),
            num(s.residual_sup),
            num(s.effort),
            num(s.penalty_average),
            num(s.mean),
            num(s.variance),
            s.grid.n.to_string(),
            num(s.grid.lo),
            num(s.grid.hi),
            s.max_principle_ok.to_string(),
        ];
        row.extend(eqs.iter().map(|e| num(dens.mass_near(e.z[0], radius))));
        if let Some(pi) = pi {
            if !pi.converged || (pi.beta - s.beta).abs() > POLICY_AGREEMENT * s.beta.abs().max(1.0) {
                ctx.art.warn(format!(
                    "nu={nu} eps={eps}: policy iteration gives beta={} (converged: {}), eigen solver {}",
                    pi.beta, pi.converged, s.beta
                ));
            }
            row.push(num(pi.beta));
            row.push(pi.converged.to_string());
        }
        rows.push(row);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.art.write_csv("solutions.csv", &header, &rows)
}

fn target_equilibrium(
    sys: &VectorFieldSystem,
    eqs: &[Equilibrium],
    sim: &SimOptions,
    nu: f64,
) -> Result<Equilibrium, CliError> {
    match &sim.target {
        Some(z) => Ok(classify_equilibrium(sys, z)?),
        None => {
            let rep = regime_report(eqs, nu)?;
            let z = rep
                .predicted_s
                .first()
                .ok_or_else(|| CliError::Config(format!("no predicted equilibrium at nu={nu}; set sim.target")))?;
            Ok(classify_equilibrium(sys, z)?)
        }
    }
}

fn build_control(
    sys: &VectorFieldSystem,
    eqs: &[Equilibrium],
    sim: &SimOptions,
    policy: &eqsel_core::hjb::GridPolicy,
    nu: f64,
    eps: f64,
) -> Result<(ControlField, Option<Arc<HjbSolution>>), CliError> {
    let dim = sys.dim();
    Ok(match sim.control {
        ControlKind::Zero => (ControlField::zero(dim), None),
        ControlKind::HjbFeedback => {
            let sol = Arc::new(solve_auto_with(sys, eps, nu, policy, eqs)?);
            (ControlField::hjb_feedback(sol.clone()), Some(sol))
        }
        ControlKind::Barv => {
            let eq = target_equilibrium(sys, eqs, sim, nu)?;
            let pair = solve_degenerate_riccati(&eq.jacobian)?;
            (ControlField::barv(sys, &eq, &pair, eps), None)
        }
        ControlKind::Tube => {
            let eq = target_equilibrium(sys, eqs, sim, nu)?;
            (tube_control(sys, &eq, eps, nu)?.control, None)
        }
        ControlKind::GradientShaping => {
            let eq = target_equilibrium(sys, eqs, sim, nu)?;
            (gradient_shaping(sys, &eq, eps)?, None)
        }
        ControlKind::Custom => return Err(CliError::Config("control 'custom' is not configurable".into())),
    })
}

pub fn simulate(ctx: &mut Context) -> Result<(), CliError> {
    let sys = system(&ctx.cfg)?;
    let eqs = scan(ctx, &sys)?;
    let sim = ctx.cfg.sim.clone().unwrap_or_default();
    let policy = ctx.cfg.grid.clone();
    let radius = mass_radius(ctx, &eqs);
    let mut header: Vec<String> = [
        "nu", "epsilon", "control", "mean", "variance", "penalty_average", "effort", "ergodic_cost",
        "ergodic_cost_stderr", "hjb_beta", "far_mass", "samples",
    ]
    .map(String::from)
    .to_vec();
    header.extend(mass_header(&eqs));
    let mut rows = Vec::new();
    for (nu, eps) in pairs(&ctx.cfg) {
        let (control, sol) = build_control(&sys, &eqs, &sim, &policy, nu, eps)?;
        let x0 = match &sim.x0 {
            Some(x) => x.clone(),
            None => target_equilibrium(&sys, &eqs, &sim, nu)?.z,
        };
        let name = format!("estimate_nu{}_eps{}", tag(nu), tag(eps));
        let mut c = SimConfig::new(eps, nu, x0);
        c.dt = sim.dt;
        c.horizon = sim.horizon;
        c.burn_in = sim.burn_in;
        c.seed = ctx.seed;
        c.replicas = sim.replicas;
        c.sample_stride = sim.sample_stride;
        c.histogram_bins = sim.histogram_bins;
        c.equilibria = Some(eqs.iter().map(|e| e.z.clone()).collect());
        c.mass_radius = Some(radius);
        c.far_radius = sim.far_radius;
        if sim.trace {
            let trace = format!("trace_nu{}_eps{}.bin", tag(nu), tag(eps));
            c.trace_path = Some(ctx.art.dir().join(&trace));
            ctx.art.record(&trace);
        }
        let est = integrate(&sys, &control, &c)?;
        for w in &est.warnings {
            ctx.art.warn(format!("nu={nu} eps={eps}: {w}"));
        }
        ctx.art.write_json(&format!("{name}.json"), &est)?;
        if let Some(h) = &est.histogram {
            let total = h.total().max(1) as f64;
            let width = h.bin_width();
            let hist: Vec<Vec<String>> = h
                .counts
                .iter()
                .enumerate()
                .map(|(k, &cnt)| {
                    let lo = h.lo + width * k as f64;
                    vec![num(lo), num(lo + width), cnt.to_string(), num(cnt as f64 / (total * width))]
                })
                .collect();
            ctx.art.write_csv(
                &format!("histogram_nu{}_eps{}.csv", tag(nu), tag(eps)),
                &["bin_lo", "bin_hi", "count", "density"],
                &hist,
            )?;
        }
        let mut row = vec![
            num(nu),
            num(eps),
            serde_json::to_value(control.kind)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            num(est.mean[0]),
            num(est.covariance[0][0]),
            num(est.penalty_average),
            num(est.effort),
            num(est.ergodic_cost),
            num(est.stderr.ergodic_cost),
            opt(sol.map(|s| s.beta)),
            opt(est.far_mass),
            est.sample_count.to_string(),
        ];
        row.extend(est.masses.iter().map(|m| num(*m)));
        rows.push(row);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.art.write_csv("estimates.csv", &header, &rows)
}

struct SweepRow {
    nu: f64,
    eps: f64,
    beta: Option<f64>,
    effort: Option<f64>,
    penalty_average: Option<f64>,
    residual_sup: Option<f64>,
    n: Option<usize>,
    masses: Vec<f64>,
    overlay: Option<(String, Vec<(f64, f64)>)>,
    error: Option<String>,
}

struct NuInfo {
    report: RegimeReport,
    center: Option<Equilibrium>,
    sigma: Option<f64>,
}

fn gaussian(y: f64, var: f64) -> f64 {
    (-0.5 * y * y / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Solves one sweep row and writes its density overlay as a row-local file.
fn sweep_row(
    sys: &VectorFieldSystem,
    eqs: &[Equilibrium],
    policy: &eqsel_core::hjb::GridPolicy,
    info: &NuInfo,
    radius: f64,
    dir: &std::path::Path,
    nu: f64,
    eps: f64,
) -> SweepRow {
    let mut row = SweepRow {
        nu,
        eps,
        beta: None,
        effort: None,
        penalty_average: None,
        residual_sup: None,
        n: None,
        masses: Vec::new(),
        overlay: None,
        error: None,
    };
    let solved = solve_auto_with(sys, eps, nu, policy, eqs).and_then(|sol| summarize(&sol, sys).map(|(s, d)| (sol, s, d)));
    let (sol, s, dens) = match solved {
        Ok(v) => v,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.beta = Some(s.beta);
    row.effort = Some(s.effort);
    row.penalty_average = Some(s.penalty_average);
    row.residual_sup = Some(s.residual_sup);
    row.n = Some(sol.grid.n);
    row.masses = eqs.iter().map(|e| dens.mass_near(e.z[0], radius)).collect();
    if let (Some(center), Some(var)) = (&info.center, info.sigma) {
        let z = center.z[0];
        let scale = eps.powf(nu);
        let half = 5.0 * var.sqrt();
        let rho = dens.density();
        let idx: Vec<usize> = (0..dens.x.len()).filter(|&j| ((dens.x[j] - z) / scale).abs() <= half).collect();
        let step = (idx.len() / 400).max(1);
        let pts: Vec<(f64, f64)> = idx.iter().step_by(step).map(|&j| ((dens.x[j] - z) / scale, scale * rho[j])).collect();
        let name = format!("rows/overlay_nu{}_eps{}.csv", tag(nu), tag(eps));
        let cells: Vec<Vec<String>> = pts.iter().map(|&(y, d)| vec![num(y), num(d), num(gaussian(y, var))]).collect();
        let written = csv_bytes(&["y", "scaled_density", "gaussian_reference"], &cells)
            .and_then(|b| std::fs::write(dir.join(&name), b).map_err(CliError::from));
        match written {
            Ok(()) => row.overlay = Some((name, pts)),
            Err(e) => row.error = Some(format!("overlay not written: {e}")),
        }
    }
    row
}

pub fn sweep(ctx: &mut Context) -> Result<(), CliError> {
    let sys = system(&ctx.cfg)?;
    sys.require_1d()?;
    let eqs = scan(ctx, &sys)?;
    let policy = ctx.cfg.grid.clone();
    let radius = mass_radius(ctx, &eqs);
    let mut infos = Vec::new();
    for &nu in &ctx.cfg.nu {
        let report = regime_report(&eqs, nu)?;
        let center = report
            .predicted_s
            .first()
            .and_then(|z| eqs.iter().find(|e| &e.z == z).cloned());
        let sigma = match &center {
            Some(e) => Some(solve_degenerate_riccati(&e.jacobian)?.sigma[(0, 0)]),
            None => None,
        };
        infos.push(NuInfo { report, center, sigma });
    }
    std::fs::create_dir_all(ctx.art.dir().join("rows"))?;
    let dir = ctx.art.dir().to_path_buf();
    let jobs: Vec<(usize, f64, f64)> = ctx
        .cfg
        .nu
        .iter()
        .enumerate()
        .flat_map(|(k, &nu)| ctx.cfg.epsilon.iter().map(move |&eps| (k, nu, eps)))
        .collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(k, nu, eps)| sweep_row(&sys, &eqs, &policy, &infos[k], radius, &dir, nu, eps))
        .collect();

    // Single-threaded finalizer: merge row-local results in config order.
    let mut header: Vec<String> = [
        "nu", "epsilon", "beta", "beta_limit", "beta_minus_limit", "effort", "penalty_average", "residual_sup", "n",
    ]
    .map(String::from)
    .to_vec();
    header.extend(mass_header(&eqs));
    header.push("error".into());
    let mut csv_rows = Vec::new();
    for r in &rows {
        let info = &infos[ctx.cfg.nu.iter().position(|&n| n == r.nu).unwrap_or(0)];
        let limit = info.report.beta_limit;
        let diff = match (r.beta, limit) {
            (Some(b), Some(l)) => Some(b - l),
            _ => None,
        };
        let mut row = vec![
            num(r.nu),
            num(r.eps),
            opt(r.beta),
            opt(limit),
            opt(diff),
            opt(r.effort),
            opt(r.penalty_average),
            opt(r.residual_sup),
            r.n.map(|n| n.to_string()).unwrap_or_default(),
        ];
        if r.masses.is_empty() {
            row.extend(eqs.iter().map(|_| String::new()));
        } else {
            row.extend(r.masses.iter().map(|m| num(*m)));
        }
        row.push(r.error.clone().unwrap_or_default());
        csv_rows.push(row);
        if let Some(e) = &r.error {
            ctx.art.warn(format!("nu={} eps={}: {e}", r.nu, r.eps));
        }
        if let Some((name, _)) = &r.overlay {
            ctx.art.record(name);
        }
    }
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.art.write_csv("beta_curve.csv", &h, &csv_rows)?;

    let mut fit_rows = Vec::new();
    let mut beta_series = Vec::new();
    for (k, info) in infos.iter().enumerate() {
        let nu = ctx.cfg.nu[k];
        let exps = info.report.reference_exponents();
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.nu == nu)
            .filter_map(|r| Some((r.eps, (r.beta? - info.report.beta_limit?).abs())))
            .filter(|&(_, d)| d > 0.0)
            .collect();
        let fit = (pts.len() >= 2).then(|| {
            let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
            let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
            fit_line(&lx, &ly)
        });
        fit_rows.push(vec![
            num(nu),
            format!("{:?}", info.report.regime).to_lowercase(),
            opt(info.report.beta_limit),
            opt(fit.map(|f| f.0)),
            exps.iter().map(|e| num(*e)).collect::<Vec<_>>().join(";"),
            pts.len().to_string(),
        ]);
        if let Some(&(e0, d0)) = pts.first() {
            for p in &exps {
                let refl: Vec<(f64, f64)> = pts.iter().map(|&(e, _)| (e, d0 * (e / e0).powf(*p))).collect();
                beta_series.push(Series::dashed(format!("nu={nu}: eps^{p}"), refl));
            }
        }
        beta_series.push(Series::solid(format!("nu={nu}: |beta - {}|", opt(info.report.beta_limit)), pts));
    }
    ctx.art.write_csv(
        "slope_fit.csv",
        &["nu", "regime", "beta_limit", "fitted_slope", "reference_exponents", "points"],
        &fit_rows,
    )?;
    let ts = ctx.timestamp.clone();
    let plot = Plot {
        title: "optimal value against eps".into(),
        x_label: "eps".into(),
        y_label: "|beta - beta_limit|".into(),
        log_x: true,
        log_y: true,
        series: beta_series,
    };
    ctx.art.write_bytes("beta_curves.svg", plot.render(ts.as_deref()).as_bytes())?;
    for (k, info) in infos.iter().enumerate() {
        let (Some(center), Some(var)) = (&info.center, info.sigma) else {
            continue;
        };
        let nu = ctx.cfg.nu[k];
        let mut series: Vec<Series> = rows
            .iter()
            .filter(|r| r.nu == nu)
            .filter_map(|r| r.overlay.as_ref().map(|(_, pts)| Series::solid(format!("eps={}", r.eps), pts.clone())))
            .collect();
        let half = 5.0 * var.sqrt();
        let g: Vec<(f64, f64)> = (0..=200).map(|i| -half + 2.0 * half * i as f64 / 200.0).map(|y| (y, gaussian(y, var))).collect();
        series.push(Series::dashed(format!("Gaussian, Sigma-hat={}", num(var)), g));
        let plot = Plot {
            title: format!("scaled density near z={} (nu={nu})", point(&center.z)),
            x_label: "(x - z) / eps^nu".into(),
            y_label: "density".into(),
            log_x: false,
            log_y: false,
            series,
        };
        ctx.art
            .write_bytes(&format!("density_nu{}.svg", tag(nu)), plot.render(ts.as_deref()).as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RiccatiReport {
    #[serde(rename = "M")]
    m: SquareMatrix,
    eigenvalues: Vec<[f64; 2]>,
    unstable_trace: f64,
    #[serde(flatten)]
    pair: eqsel_core::matctrl::RiccatiPair,
    #[serde(skip_serializing_if = "Option::is_none")]
    kappa: Option<f64>,
    #[serde(rename = "Q_kappa", skip_serializing_if = "Option::is_none")]
    q_kappa: Option<SquareMatrix>,
}

pub fn riccati(ctx: &mut Context) -> Result<(), CliError> {
    let rows = ctx.cfg.matrix.clone().ok_or_else(|| CliError::Config("missing 'matrix'".into()))?;
    let m = SquareMatrix::from_rows(&rows).map_err(CliError::config)?;
    let spec = spectral_summary(&m, DEFAULT_AXIS_TOL)?;
    let pair = solve_degenerate_riccati(&m)?;
    let q_kappa = match ctx.cfg.kappa {
        Some(k) => Some(solve_riccati_kappa(&m, k)?),
        None => None,
    };
    let report = RiccatiReport {
        eigenvalues: spec.eigenvalues.iter().map(|l| [l.re, l.im]).collect(),
        unstable_trace: spec.unstable_trace,
        m,
        pair,
        kappa: ctx.cfg.kappa,
        q_kappa,
    };
    ctx.art.write_json("riccati.json", &report)
}
