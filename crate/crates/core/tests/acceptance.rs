//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{is_hurwitz, planted_dichotomous};
use eqsel_core::bench::{closed_form, get_problem, BenchmarkProblem, ProblemSpec};
use eqsel_core::dynamics::{classify_equilibrium, find_equilibria, regime_report, Equilibrium};
use eqsel_core::hjb::{
    closed_loop_density, default_mass_radius, solve_auto, solve_ergodic_hjb, summarize, Grid1D,
    GridPolicy, HjbSolution,
};
use eqsel_core::matctrl::{solve_degenerate_riccati, solve_riccati_kappa};
use eqsel_core::simulate::{
    barv_effort_check, integrate, ks_distance, moment_scaling_study, scaled_statistics,
    ControlField, SimConfig,
};
use eqsel_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn problem(spec: ProblemSpec) -> BenchmarkProblem {
    get_problem(&spec).expect("catalog problem")
}

fn equilibria(p: &BenchmarkProblem) -> Vec<Equilibrium> {
    find_equilibria(&p.system, 2001).expect("scan").equilibria
}

fn riccati_suite() -> Result<Outcome> {
    let mut worst_trace: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    let mut worst_kappa: f64 = 0.0;
    let mut failures = 0;
    for k in 0..200u64 {
        let d = 1 + (k % 6) as usize;
        let (m, lambda_plus) = planted_dichotomous(0xacce_0000 + k, d);
        let pair = solve_degenerate_riccati(&m)?;
        let trace_err = (pair.q.trace() / 2.0 - lambda_plus).abs();
        let res = pair.riccati_residual.max(pair.lyapunov_residual);
        let qk = solve_riccati_kappa(&m, 1e-6)?;
        let kdiff = (qk.as_matrix() - pair.q.as_matrix()).norm();
        worst_trace = worst_trace.max(trace_err);
        worst_res = worst_res.max(res);
        worst_kappa = worst_kappa.max(kdiff);
        if trace_err > 1e-7 || res > 1e-9 || kdiff > 1e-3 || !is_hurwitz(&pair.closed_loop(&m)) {
            failures += 1;
        }
    }
    check(
        failures == 0,
        format!(
            "200 matrices, {failures} failures; max |tr Q/2 − Λ⁺| = {worst_trace:.1e}, max residual = {worst_res:.1e}, max |Q_κ − Q| = {worst_kappa:.1e}"
        ),
    )
}

fn closed_form_match() -> Result<Outcome> {
    let spec = ProblemSpec::LinearUnstable;
    let p = problem(spec.clone());
    let mut pass = true;
    let mut parts = Vec::new();
    for eps in [0.05, 0.1, 0.2] {
        let sol = solve_auto(&p.system, eps, 1.0, &GridPolicy::fixed_n(4001))?;
        let (s, _) = summarize(&sol, &p.system)?;
        let cf = closed_form(&spec, eps, 1.0)?;
        let eb = rel(s.beta, cf.beta);
        let em = (s.mean - cf.mean).abs() / cf.variance.sqrt();
        let ev = rel(s.variance, cf.variance);
        let ee = rel(s.effort, cf.effort);
        pass &= eb <= 5e-3 && em <= 1e-2 && ev <= 1e-2 && ee <= 2e-2;
        parts.push(format!(
            "ε={eps}: β {:.6} vs {:.6} ({eb:.1e}), var rel {ev:.1e}, mean/sd {em:.1e}, effort rel {ee:.1e}",
            s.beta, cf.beta
        ));
    }
    check(pass, parts.join("; "))
}

fn mass(sol: &HjbSolution, p: &BenchmarkProblem, z: f64, r: f64) -> Result<f64> {
    Ok(closed_loop_density(sol, &p.system)?.mass_near(z, r))
}

fn double_well_1() -> Result<Outcome> {
    let eps = 0.08;
    let policy = GridPolicy::default();
    let p5 = problem(ProblemSpec::DoubleWell1 { c: 5.0 });
    let p1 = problem(ProblemSpec::DoubleWell1 { c: 1.0 });
    let s2 = solve_auto(&p5.system, eps, 2.0, &policy)?;
    let s05 = solve_auto(&p5.system, eps, 0.5, &policy)?;
    let s1 = solve_auto(&p5.system, eps, 1.0, &policy)?;
    let s1c = solve_auto(&p1.system, eps, 1.0, &policy)?;
    let m2 = mass(&s2, &p5, 0.0, 0.3)?;
    let m05 = mass(&s05, &p5, -1.0, 0.3)?;
    let m1 = mass(&s1, &p5, 0.0, 0.3)?;
    let m1c = mass(&s1c, &p1, -1.0, 0.3)?;
    let pass = m2 >= 0.9
        && m05 >= 0.9
        && m1 >= 0.9
        && (1.6..=2.4).contains(&s1.beta)
        && m1c >= 0.9
        && (0.85..=1.15).contains(&s1c.beta);
    check(
        pass,
        format!(
            "ν=2 mass(0)={m2:.3}; ν=0.5 mass(−1)={m05:.3}; ν=1 mass(0)={m1:.3} β={:.4}; c=1 ν=1 mass(−1)={m1c:.3} β={:.4}",
            s1.beta, s1c.beta
        ),
    )
}

fn double_well_2() -> Result<Outcome> {
    let eps = 0.05;
    let p = problem(ProblemSpec::DoubleWell2);
    let eqs = equilibria(&p);
    let r = default_mass_radius(&eqs);
    let mut pass = true;
    let mut parts = Vec::new();
    for (nu, expected) in [(2.0, 1.0), (1.0, -1.0), (0.5, 0.0)] {
        let sol = solve_auto(&p.system, eps, nu, &GridPolicy::default())?;
        let dens = closed_loop_density(&sol, &p.system)?;
        let (arg, best) = eqs
            .iter()
            .map(|e| (e.z[0], dens.mass_near(e.z[0], r)))
            .fold((f64::NAN, -1.0), |acc, (z, m)| if m > acc.1 { (z, m) } else { acc });
        let mut ok = (arg - expected).abs() < 1e-6;
        if nu == 1.0 {
            ok &= (8.5..=11.5).contains(&sol.beta);
        }
        pass &= ok;
        parts.push(format!("ν={nu}: argmax {arg:.3} (mass {best:.3}), β={:.4}", sol.beta));
    }
    check(pass, parts.join("; "))
}

fn gaussian_limit() -> Result<Outcome> {
    let eps = 0.05;
    let mut pass = true;
    let mut parts = Vec::new();
    for (spec, nu, z) in [
        (ProblemSpec::DoubleWell1 { c: 5.0 }, 0.5, -1.0),
        (ProblemSpec::DoubleWell1 { c: 5.0 }, 1.0, 0.0),
        (ProblemSpec::LinearUnstable, 1.0, 0.0),
    ] {
        let p = problem(spec.clone());
        let eq = classify_equilibrium(&p.system, &[z])?;
        let sigma = solve_degenerate_riccati(&eq.jacobian)?.sigma[(0, 0)];
        let sol = Arc::new(solve_auto(&p.system, eps, nu, &GridPolicy::default())?);
        let mut cfg = SimConfig::new(eps, nu, vec![z]);
        cfg.horizon = 2000.0;
        cfg.seed = 5;
        let est = integrate(&p.system, &ControlField::hjb_feedback(sol), &cfg)?;
        let ss = scaled_statistics(&est.samples, &[z], eps, nu, 0.3, 40)?;
        let c = ss.covariance[0][0];
        let e = rel(c, sigma);
        pass &= e <= 0.1;
        parts.push(format!("{} ν={nu}: {c:.4} vs Σ̂={sigma:.4} ({e:.1e})", spec.name()));
    }
    check(pass, parts.join("; "))
}

fn moment_scaling() -> Result<Outcome> {
    let p = problem(ProblemSpec::DoubleWell1 { c: 5.0 });
    let eqs = equilibria(&p);
    let eps_list = [0.025, 0.05, 0.1, 0.25];
    let mut pass = true;
    let mut parts = Vec::new();
    for nu in [0.5, 1.0, 1.5] {
        let report = regime_report(&eqs, nu)?;
        let mut cfg = SimConfig::new(eps_list[0], nu, report.predicted_s[0].clone());
        cfg.horizon = 500.0;
        cfg.seed = 6;
        cfg.equilibria = Some(eqs.iter().map(|e| e.z.clone()).collect());
        let sys = p.system.clone();
        let family = move |eps: f64| -> Result<ControlField> {
            let sol = solve_auto(&sys, eps, nu, &GridPolicy::default())?;
            Ok(ControlField::hjb_feedback(Arc::new(sol)))
        };
        let rep = moment_scaling_study(&p.system, &family, nu, &eps_list, &cfg, 0.5, 3.0)?;
        let ok = (rep.slope - rep.expected_slope).abs() <= 0.3;
        pass &= ok;
        parts.push(format!("ν={nu}: slope {:.3} vs {:.1}", rep.slope, rep.expected_slope));
    }
    check(pass, parts.join("; "))
}

fn barv_control() -> Result<Outcome> {
    let p = problem(ProblemSpec::DoubleWell1 { c: 5.0 });
    let eq = classify_equilibrium(&p.system, &[0.0])?;
    let mut cfg = SimConfig::new(0.05, 1.5, vec![0.0]);
    cfg.horizon = 4000.0;
    cfg.seed = 7;
    let rows = barv_effort_check(&p.system, &eq, 1.5, &[0.05, 0.1], &cfg)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for r in rows {
        let ratio = r.scaled_effort / r.unstable_trace;
        let ce = rel(r.covariance[0][0], r.expected_covariance[0][0]);
        pass &= (0.9..=1.1).contains(&ratio) && ce <= 0.05 && r.unstable_trace == 2.0;
        parts.push(format!(
            "ε={}: effort/ε^(2ν−2) = {:.4} (Λ⁺={}), covariance rel {ce:.1e}",
            r.epsilon, r.scaled_effort, r.unstable_trace
        ));
    }
    check(pass, parts.join("; "))
}

fn invariants() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();

    // Second-order convergence of the central-difference residual.
    let p = problem(ProblemSpec::DoubleWell1 { c: 5.0 });
    let mut res = Vec::new();
    for n in [2001, 4001, 8001] {
        res.push(solve_ergodic_hjb(&p.system, 0.2, 1.0, &Grid1D::new(-2.5, 3.5, n)?)?.residual_sup);
    }
    let orders: Vec<f64> = res.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let ok = orders.iter().all(|o| (1.8..=2.2).contains(o));
    pass &= ok;
    parts.push(format!("residual orders {:.2}/{:.2}", orders[0], orders[1]));

    // β does not move when the box grows.
    let sol = solve_auto(&p.system, 0.1, 1.0, &GridPolicy::default())?;
    let g = sol.grid;
    let w = g.hi - g.lo;
    let extra = ((0.25 * w) / g.h()).round() as usize;
    let big = Grid1D::new(g.lo - extra as f64 * g.h(), g.hi + extra as f64 * g.h(), g.n + 2 * extra)?;
    let sol_big = solve_ergodic_hjb(&p.system, 0.1, 1.0, &big)?;
    let db = rel(sol_big.beta, sol.beta);
    pass &= db <= 1e-6;
    parts.push(format!("box-enlarged β rel change {db:.1e}"));

    // KS between long-run samples and the exact closed-loop density.
    for (spec, eps) in [(ProblemSpec::LinearUnstable, 0.1), (ProblemSpec::DoubleWell1 { c: 5.0 }, 0.2)] {
        let p = problem(spec.clone());
        let sol = Arc::new(solve_auto(&p.system, eps, 1.0, &GridPolicy::default())?);
        let dens = closed_loop_density(&sol, &p.system)?;
        let mut cfg = SimConfig::new(eps, 1.0, vec![0.0]);
        cfg.horizon = 5000.0;
        cfg.replicas = 4;
        cfg.seed = 8;
        let est = integrate(&p.system, &ControlField::hjb_feedback(sol), &cfg)?;
        let ks = ks_distance(&est.samples.coordinate(0), dens.cdf_fn());
        pass &= ks <= 0.02;
        parts.push(format!("KS {} {ks:.4}", spec.name()));
    }

    // Fixed seed gives identical output; a different seed does not.
    let p = problem(ProblemSpec::DoubleWell1 { c: 5.0 });
    let mut cfg = SimConfig::new(0.2, 1.0, vec![0.0]);
    cfg.horizon = 100.0;
    let a = integrate(&p.system, &ControlField::zero(1), &cfg)?;
    let b = integrate(&p.system, &ControlField::zero(1), &cfg)?;
    cfg.seed = 1;
    let c = integrate(&p.system, &ControlField::zero(1), &cfg)?;
    let same = serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap()
        && a.samples.data == b.samples.data;
    let differs = a.samples.data != c.samples.data;
    pass &= same && differs;
    parts.push(format!("deterministic {same}, seed-sensitive {differs}"));

    check(pass, parts.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>, Option<Duration>); 8] = [
        ("1 riccati suite", riccati_suite, Some(Duration::from_secs(5))),
        ("2 closed-form HJB match", closed_form_match, Some(Duration::from_secs(10))),
        ("3 double_well_1 regimes", double_well_1, Some(Duration::from_secs(60))),
        ("4 double_well_2 regimes", double_well_2, Some(Duration::from_secs(60))),
        ("5 gaussian limit", gaussian_limit, Some(Duration::from_secs(120))),
        ("6 moment scaling", moment_scaling, None),
        ("7 barv control", barv_control, None),
        ("8 invariant suites", invariants, None),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let t = Instant::now();
        let outcome = run();
        let elapsed = t.elapsed();
        let (pass, detail) = match outcome {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let ok = pass && in_time;
        if !ok {
            failed += 1;
        }
        let budget_note = budget.map_or(String::new(), |b| format!(" / {:.0}s", b.as_secs_f64()));
        println!(
            "{} criterion {name}: {detail} [{:.2}s{budget_note}]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
