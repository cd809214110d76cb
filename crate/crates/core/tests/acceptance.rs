//! Acceptance criteria 1–10 plus the MLP trend checks, run in sequence with
//! one PASS/FAIL line each. Positional arguments select criteria by label
//! (`3`, `mlp`, ...).

use std::time::Instant;

use stabsde::analysis::{
    bound_check, constraint_value, weak_order, BoundCheckConfig, GradProxy, ProblemConstants, TestFunction, TheoremId,
    WeakOrderConfig,
};
use stabsde::clients::{homogeneous, ClientSummary};
use stabsde::compressors::CompressorSpec;
use stabsde::noise::NoiseSpec;
use stabsde::objectives::Objective;
use stabsde::optimizers::{run, step, Algorithm, InitPoint, RunConfig};
use stabsde::repro::{protocol, run_protocol, Curve, Scale, OMEGAS};
use stabsde::rng::{stream, Purpose};
use stabsde::schedulers::SchedulerSpec;
use stabsde::sde::{build_sde, integrate, xi_constants, IntegrateOptions, SdeAlgorithm, SdeFamily, XiFunction};
use stabsde::trajectory::RunStatus;

type Outcome = stabsde::Result<(bool, String)>;

fn gd(objective: Objective, eta: f64, steps: usize, x0: Vec<f64>) -> RunConfig {
    let mut c = RunConfig::new(
        objective,
        homogeneous(1, NoiseSpec::None, CompressorSpec::Identity),
        SchedulerSpec::constant(eta),
        steps,
    );
    c.x0 = InitPoint::Fixed(x0);
    c
}

fn criterion_1() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for eta in [1.0, 1.5, 1.9] {
        let rec = run(&gd(Objective::quadratic(1.0), eta, 200, vec![1.0]), Algorithm::Dsgd)?;
        let f0 = rec.first().unwrap().loss;
        let f200 = rec.at_step(200).map(|p| p.loss).unwrap_or(f64::INFINITY);
        let pass = rec.status == RunStatus::Completed && f200 < 1e-8 * f0;
        ok &= pass;
        detail.push(format!("eta={eta} f200/f0={:.1e}", f200 / f0));
    }
    for eta in [2.1, 2.5] {
        let rec = run(&gd(Objective::quadratic(1.0), eta, 200, vec![1.0]), Algorithm::Dsgd)?;
        ok &= rec.status.diverged();
        detail.push(format!("eta={eta} {}", rec.status.label()));
    }
    Ok((ok, detail.join(", ")))
}

fn criterion_2() -> Outcome {
    let (eta, lambda, t) = (1.0, 1.0, 2.0);
    let cases = [
        (SdeFamily::CorrectedFirst, -2.0 * lambda * (1.0 - lambda * eta / 2.0) * t),
        (SdeFamily::ClassicFirst, -2.0 * lambda * t),
        (SdeFamily::ClassicSecond, -2.0 * lambda * (1.0 + lambda * eta / 2.0) * t),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (family, exponent) in cases {
        let clients = homogeneous(1, NoiseSpec::None, CompressorSpec::Identity);
        let model = build_sde(family, SdeAlgorithm::Sgd, Objective::quadratic(lambda), clients, eta)?;
        let mut rng = stream(0, 0, 0, 0, Purpose::Diffusion);
        let rec = integrate(&model, &[1.0], &SchedulerSpec::constant(eta), IntegrateOptions::new(1e-3, t), 0, &mut rng)?;
        let got = rec.last().unwrap().loss;
        let want = 0.5 * exponent.exp();
        let rel = (got - want).abs() / want;
        ok &= rel < 0.02;
        detail.push(format!("{family:?} rel={rel:.1e}"));
    }
    Ok((ok, detail.join(", ")))
}

fn criterion_3() -> Outcome {
    let eta = 0.1;
    // (a) first-step expansion on a 100-point grid
    let cfg = gd(Objective::Quartic1D, eta, 1, vec![1.0]);
    let mut mismatches = 0;
    for j in 0..100 {
        let x0 = 0.1 + j as f64 * 0.1;
        let (x1, _) = step(Algorithm::Dsgd, &cfg, &[x0], 0, 0)?;
        let expands = x1[0].abs() > x0.abs();
        if expands != (x0 * x0 > 2.0 / eta) {
            mismatches += 1;
        }
    }
    // (b) loss drift of the corrected model
    let model = build_sde(
        SdeFamily::CorrectedFirst,
        SdeAlgorithm::Sgd,
        Objective::Quartic1D,
        homogeneous(1, NoiseSpec::None, CompressorSpec::Identity),
        eta,
    )?;
    let mut worst = 0.0f64;
    for j in 0..=200 {
        let x = -2.0 + j as f64 * 0.02;
        let b = model.drift(&[x])?;
        let generator = x.powi(3) * b[0];
        let want = -x.powi(6) + 1.5 * eta * x.powi(8);
        worst = worst.max((generator - want).abs());
    }
    // (c) classic ODE closed form
    let classic = build_sde(
        SdeFamily::ClassicFirst,
        SdeAlgorithm::Sgd,
        Objective::Quartic1D,
        homogeneous(1, NoiseSpec::None, CompressorSpec::Identity),
        eta,
    )?;
    let mut rng = stream(0, 0, 0, 0, Purpose::Diffusion);
    let rec = integrate(&classic, &[1.0], &SchedulerSpec::constant(eta), IntegrateOptions::new(1e-4, 5.0), 0, &mut rng)?;
    let x_t = rec.final_x[0];
    let want = (1.0f64 + 2.0 * 5.0).powf(-0.5);
    let err_c = (x_t - want).abs();
    let ok = mismatches == 0 && worst < 1e-9 && err_c < 1e-3;
    Ok((ok, format!("(a) mismatches={mismatches} (b) max_err={worst:.1e} (c) err={err_c:.1e}")))
}

fn criterion_4() -> Outcome {
    let d = 1000;
    let draws = 10_000;
    let v: Vec<f64> = (0..d).map(|j| 1.0 + (j as f64 * 0.37).sin()).collect();
    let vsq: f64 = v.iter().map(|x| x * x).sum();
    let mut ok = true;
    let mut detail = Vec::new();
    for omega in [4.0, 8.0, 16.0] {
        let c = CompressorSpec::RandomSparsify { p: omega / (omega + 1.0) };
        let mut sum = vec![0.0; d];
        let mut dist = 0.0;
        for k in 0..draws {
            let mut rng = stream(5, 0, 0, k, Purpose::Compression);
            let out = c.compress(&v, &mut rng)?;
            dist += out.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / vsq;
            sum.iter_mut().zip(&out).for_each(|(s, o)| *s += o);
        }
        let ratio = dist / draws as f64;
        let worst_z = (0..d)
            .map(|j| {
                let se = v[j].abs() * omega.sqrt() / (draws as f64).sqrt();
                (sum[j] / draws as f64 - v[j]).abs() / se
            })
            .fold(0.0, f64::max);
        ok &= (ratio / omega - 1.0).abs() <= 0.05 && worst_z <= 4.0;
        detail.push(format!("omega={omega} distortion={ratio:.3} max_z={worst_z:.2}"));
    }
    Ok((ok, detail.join(", ")))
}

fn criterion_5() -> Outcome {
    let xi1 = XiFunction::new(1.0)?;
    let worst = (0..1000)
        .map(|j| {
            let x = -50.0 + 100.0 * j as f64 / 999.0;
            (xi1.value(x) - x.atan() / std::f64::consts::PI).abs()
        })
        .fold(0.0, f64::max);
    let (ell, _) = xi_constants(1.0)?;
    let ell_err = (ell - 2.0 / std::f64::consts::PI).abs();
    let mut fd_worst = 0.0f64;
    for nu in [1.0, 2.0, 3.0, 5.0] {
        let xi = XiFunction::new(nu)?;
        let h = 1e-5;
        let fd = (xi.value(h) - xi.value(-h)) / (2.0 * h);
        fd_worst = fd_worst.max((fd - xi.derivative(0.0)).abs());
    }
    let ok = worst < 1e-9 && ell_err < 1e-9 && fd_worst < 1e-6;
    Ok((ok, format!("atan err={worst:.1e}, ell err={ell_err:.1e}, fd err={fd_worst:.1e}")))
}

fn criterion_6() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for family in [SdeFamily::ClassicFirst, SdeFamily::CorrectedFirst] {
        let cfg = WeakOrderConfig {
            algorithm: Algorithm::Dsgd,
            family,
            objective: Objective::quadratic(1.0),
            clients: homogeneous(1, NoiseSpec::gaussian(0.1, 0.0), CompressorSpec::Identity),
            eta_grid: vec![0.05, 0.1, 0.2, 0.4],
            t_end: 1.0,
            test_fn: TestFunction::NormSq,
            samples: 100_000,
            seed: 6,
            dt_fraction: 1.0 / 50.0,
            x0: vec![1.0],
        };
        match weak_order(&cfg) {
            Ok(rep) => {
                let pass = (0.7..=1.3).contains(&rep.slope);
                ok &= pass;
                let used = rep.rows.iter().filter(|r| r.used_in_fit).count();
                detail.push(format!("{family:?} slope={:.3}±{:.3} ({used}/4 points)", rep.slope, rep.slope_se));
            }
            Err(e) => {
                ok = false;
                detail.push(format!("{family:?} {e}"));
            }
        }
    }
    Ok((ok, detail.join(", ")))
}

/// `(earliest step with ≥10× growth, mean there)`; `None` when never reached.
fn growth_key(c: &Curve) -> Option<(usize, f64)> {
    let s = c.first_growth(10.0)?;
    Some((s, c.at_step(s).unwrap()))
}

fn strictly_faster(a: (usize, f64), b: (usize, f64)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 > b.1)
}

fn divergence_trend(name: &str, runs: Option<usize>) -> stabsde::Result<(bool, String)> {
    let mut p = protocol(name, Scale::Desk)?;
    if let Some(r) = runs {
        p = p.with_runs(r);
    }
    let res = run_protocol(&p, 7)?;
    let keys: Vec<Option<(usize, f64)>> = res.curves.iter().map(growth_key).collect();
    let mut ok = keys.iter().all(|k| k.is_some_and(|(s, _)| s <= 10));
    for w in keys.windows(2) {
        ok &= matches!((w[0], w[1]), (Some(a), Some(b)) if strictly_faster(b, a));
    }
    let detail: Vec<String> = res
        .curves
        .iter()
        .zip(&keys)
        .map(|(c, k)| match k {
            Some((s, v)) => format!("{}: 10x at step {s} (mean {v:.2e})", c.label),
            None => format!("{}: step-10 ratio {:.2}", c.label, c.at_step(10).unwrap() / c.mean_grad_norm_sq[0]),
        })
        .collect();
    Ok((ok, detail.join(", ")))
}

fn convergence_trend(name: &str, runs: Option<usize>) -> stabsde::Result<(bool, String)> {
    let mut p = protocol(name, Scale::Desk)?;
    if let Some(r) = runs {
        p = p.with_runs(r);
    }
    let res = run_protocol(&p, 7)?;
    let mut ok = true;
    let mut detail = Vec::new();
    for c in &res.curves {
        let ratio = c.mean_grad_norm_sq.last().unwrap() / c.mean_grad_norm_sq[0];
        ok &= ratio < 0.01 && c.diverged_runs == 0;
        detail.push(format!("{}: final/initial={ratio:.2e}", c.label));
    }
    Ok((ok, format!("{} steps: {}", p.steps, detail.join(", "))))
}

fn criterion_7() -> Outcome {
    let (a, da) = divergence_trend("quartic-dcsgd-diverge", None)?;
    let (b, db) = convergence_trend("quartic-dcsgd-scheduled", None)?;
    Ok((a && b, format!("unscheduled [{da}]; scheduled [{db}]")))
}

fn criterion_8() -> Outcome {
    let constant = run_protocol(&protocol("quartic-dsign-const", Scale::Desk)?, 8)?;
    let sqrt = run_protocol(&protocol("quartic-dsign-sqrt", Scale::Desk)?, 8)?;
    let mut ok = true;
    let mut detail = Vec::new();
    for (c, s) in constant.curves.iter().zip(&sqrt.curves) {
        let tc = c.tail_mean(0.1);
        let ts = s.tail_mean(0.1);
        ok &= tc > 1e-4 && ts * 10.0 <= tc;
        detail.push(format!("{}: const={tc:.2e} sqrt={ts:.2e}", c.label));
    }
    Ok((ok, detail.join(", ")))
}

fn criterion_9() -> Outcome {
    let clients = homogeneous(4, NoiseSpec::gaussian(0.1, 0.0), CompressorSpec::Identity);
    let summary = ClientSummary::from_clients(&clients)?;
    let limit = constraint_value(TheoremId::D2, &ProblemConstants::affine(1.0, 0.0, 1, 0.5, 0.5, 0.5, summary), 0.0)?;
    let eta = 0.5;
    let cfg = BoundCheckConfig {
        theorem: TheoremId::D2,
        objective: Objective::quadratic(1.0),
        clients,
        scheduler: SchedulerSpec::power_law(eta, 0.5),
        x0: vec![1.0],
        t_grid: vec![1.0, 10.0, 100.0],
        samples: 10_000,
        dt: 0.01,
        seed: 9,
        l0: 1.0,
        l1: 0.0,
        eps: 0.5,
        g_proxy: GradProxy::Constant(0.0),
    };
    let rep = bound_check(&cfg)?;
    let ratio = rep.rows[2].rhs / rep.rows[0].rhs;
    let ok = eta < limit && rep.satisfied && ratio < 0.2;
    let rows: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("t={}: {:.3e}+2*{:.1e} <= {:.3e}", r.t, r.empirical, r.ci, r.rhs))
        .collect();
    Ok((ok, format!("eta={eta} < {limit}; {}; RHS(100)/RHS(1)={ratio:.3}", rows.join(", "))))
}

fn criterion_10() -> Outcome {
    use rand::Rng;
    let mut rng = stream(10, 0, 0, 0, Purpose::Test);
    let mut violations = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=16usize);
        let d = rng.random_range(1..=1000usize);
        let omega = rng.random_range(0.0..20.0);
        let s0 = rng.random_range(0.0..1.0f64).powi(2);
        let s1 = rng.random_range(0.0..1.0f64).powi(2);
        let summary = ClientSummary {
            n,
            sigma0_sq: s0,
            sigma1_sq: s1,
            omega,
            sigma0_sq_omega: s0 * omega,
            sigma1_sq_omega: s1 * omega,
        };
        let c = ProblemConstants::affine(
            rng.random_range(0.1..10.0),
            rng.random_range(0.0..10.0),
            d,
            rng.random_range(0.05..0.95),
            0.1,
            1.0,
            summary,
        );
        let g = rng.random_range(0.0..10.0);
        let t1 = constraint_value(TheoremId::Thm1, &c, g);
        let t2 = constraint_value(TheoremId::Thm2, &c, g)?;
        if !matches!(t1, Ok(v) if t2 < v) {
            violations += 1;
        }
    }
    let noiseless = ProblemConstants::affine(2.0, 0.7, 3, 0.3, 0.1, 1.0, ClientSummary::noiseless(2));
    let rejects = constraint_value(TheoremId::Thm1, &noiseless, 0.0).is_err();
    let thm2 = constraint_value(TheoremId::Thm2, &noiseless, 0.0)?;
    let exact = thm2 == 2.0 * 0.3 / 2.0;
    let ok = violations == 0 && rejects && exact;
    Ok((ok, format!("sweep violations={violations}, thm1 rejects noiseless={rejects}, thm2={thm2}")))
}

fn mlp_divergence() -> Outcome {
    divergence_trend("mlp-dcsgd-diverge", None)
}

fn mlp_scheduled() -> Outcome {
    convergence_trend("mlp-dcsgd-scheduled", Some(2))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, fn() -> Outcome); 12] = [
        ("1", criterion_1),
        ("2", criterion_2),
        ("3", criterion_3),
        ("4", criterion_4),
        ("5", criterion_5),
        ("6", criterion_6),
        ("7", criterion_7),
        ("8", criterion_8),
        ("9", criterion_9),
        ("10", criterion_10),
        ("mlp-divergence", mlp_divergence),
        ("mlp-scheduled", mlp_scheduled),
    ];
    assert_eq!(OMEGAS.len(), 3);
    let mut failed = Vec::new();
    for (label, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| label == f || label.starts_with(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        let name = if label.chars().all(|c| c.is_ascii_digit()) { format!("criterion {label}") } else { label.to_string() };
        println!("{name}: {} [{secs:.1}s] {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
    println!("acceptance: all selected checks passed");
}
