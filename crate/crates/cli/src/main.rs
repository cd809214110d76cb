//! `stabsde` experiment runner.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error or
//! missing file, 3 failed certification or unexpected divergence.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use stabsde::analysis::{
    bound_check, stability_scan, weak_order, BoundCheckConfig, StabilityClass, StabilityTarget, WeakOrderConfig,
};
use stabsde::config::Config;
use stabsde::optimizers::{ensemble, InitPoint};
use stabsde::repro::{figure_protocols, protocol, run_protocol, Scale, PROTOCOL_NAMES};
use stabsde::rng::{stream, Purpose};
use stabsde::sde::{build_sde, integrate, IntegrateOptions};
use stabsde::trajectory::CSV_HEADER;
use stabsde::Error;

#[derive(Parser)]
#[command(name = "stabsde", version, about = "Distributed SGD, compression and SDE stability experiments")]
struct Cli {
    /// Worker threads for Monte Carlo replicates.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Discrete optimizer trajectories.
    Run(CfgArgs),
    /// SDE trajectories.
    Sde(CfgArgs),
    /// Weak error between optimizer and SDE across a stepsize grid.
    WeakOrder(CfgArgs),
    /// Stable/diverged classification over a stepsize and initial-point grid.
    StabilityScan(CfgArgs),
    /// Monte Carlo certification of a convergence bound.
    BoundCheck(CfgArgs),
    /// Named protocol, figure pair, or `list`.
    Repro(ReproArgs),
}

#[derive(Args)]
struct CfgArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `output` key; stdout when neither is set.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReproArgs {
    name: String,
    /// Optional file with `scale`, `seed`, `runs`, `steps`, `output` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Directory for the per-protocol CSV files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Marker for failures that map to exit code 3.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

#[derive(Debug)]
struct MissingFile(PathBuf);

impl std::fmt::Display for MissingFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cannot read config file {}", self.0.display())
    }
}

impl std::error::Error for MissingFile {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Failed>().is_some() {
        return 3;
    }
    if err.downcast_ref::<MissingFile>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Inconclusive(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn load(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|_| MissingFile(path.to_path_buf()))?;
    Ok(Config::parse(&text)?)
}

fn output_target(args: &CfgArgs, cfg: &Config) -> Option<PathBuf> {
    args.output.clone().or_else(|| cfg.get("output").map(PathBuf::from))
}

/// Writes `body` to `path` or stdout, then the summary line.
fn emit(path: Option<&Path>, body: &str, summary: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, body).with_context(|| format!("writing {}", p.display()))?;
            println!("{summary}");
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(body.as_bytes())?;
            writeln!(out, "# {summary}")?;
        }
    }
    Ok(())
}

fn cmd_run(args: &CfgArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    let alg = cfg.algorithm()?;
    let rc = cfg.run_config()?;
    let runs = cfg.runs()?;
    let records = ensemble(&rc, alg, runs)?;
    let mut body = cfg.header();
    body.push_str(CSV_HEADER);
    body.push('\n');
    let mut buf = Vec::new();
    for r in &records {
        r.write_csv_rows(&mut buf)?;
    }
    body.push_str(std::str::from_utf8(&buf)?);
    let diverged = records.iter().filter(|r| r.status.diverged()).count();
    let finals: Vec<f64> = records.iter().filter_map(|r| r.last().map(|p| p.grad_norm_sq)).collect();
    let mean = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
    let summary = format!(
        "run: algorithm={} runs={runs} steps={} diverged={diverged} mean_final_grad_norm_sq={mean:e}",
        alg.name(),
        rc.steps
    );
    emit(output_target(args, &cfg).as_deref(), &body, &summary)
}

fn cmd_sde(args: &CfgArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    let objective = cfg.objective()?;
    let d = objective.dim();
    let clients = cfg.clients(d)?;
    let sched = cfg.scheduler(d, &clients)?;
    let family = cfg.sde_family()?;
    let model = build_sde(family, cfg.sde_algorithm()?, objective.clone(), clients, sched.eta)?;
    let t_end = cfg.f64_or("sde.T", 1.0)?;
    let mut opts = IntegrateOptions::new(cfg.f64_or("sde.dt", sched.eta / 50.0)?, t_end);
    opts.record_stride = cfg.usize_or("record_stride", 1)?;
    opts.divergence_threshold = cfg.f64_or("divergence_threshold", 1e12)?;
    let seed = cfg.u64_or("seed", 0)?;
    let runs = cfg.runs()?;
    let x0 = match cfg.x0(d)? {
        Some(x) => InitPoint::Fixed(x),
        None => InitPoint::Default,
    };
    let records = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let start = match &x0 {
                InitPoint::Fixed(x) => x.clone(),
                InitPoint::Default => objective.default_init(seed, r),
            };
            let mut rng = stream(seed, r, 0, 0, Purpose::Diffusion);
            integrate(&model, &start, &sched, opts, r, &mut rng)
        })
        .collect::<stabsde::Result<Vec<_>>>()?;
    let mut body = cfg.header();
    body.push_str(CSV_HEADER);
    body.push('\n');
    let mut buf = Vec::new();
    for r in &records {
        r.write_csv_rows(&mut buf)?;
    }
    body.push_str(std::str::from_utf8(&buf)?);
    let diverged = records.iter().filter(|r| r.status.diverged()).count();
    let summary = format!("sde: family={family:?} runs={runs} T={t_end} diverged={diverged}");
    emit(output_target(args, &cfg).as_deref(), &body, &summary)
}

fn cmd_weak_order(args: &CfgArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    let objective = cfg.objective()?;
    let d = objective.dim();
    let wc = WeakOrderConfig {
        algorithm: cfg.algorithm()?,
        family: cfg.sde_family()?,
        clients: cfg.clients(d)?,
        eta_grid: cfg.list_or("analysis.eta_grid", &[0.05, 0.1, 0.2, 0.4])?,
        t_end: cfg.f64_or("sde.T", 1.0)?,
        test_fn: cfg.test_function()?,
        samples: cfg.usize_or("analysis.samples", 10_000)?,
        seed: cfg.u64_or("seed", 0)?,
        dt_fraction: cfg.f64_or("analysis.dt_fraction", 0.02)?,
        x0: cfg.x0_or_default(&objective)?,
        objective,
    };
    let rep = weak_order(&wc)?;
    let mut body = cfg.header();
    body.push_str("eta,error,ci,slope\n");
    for r in &rep.rows {
        let _ = writeln!(body, "{},{:e},{:e},{}", r.eta, r.error, r.ci, rep.slope);
    }
    let summary = format!("weak-order: slope={:.4} slope_se={:.4} test_fn={}", rep.slope, rep.slope_se, rep.test_fn.name());
    emit(output_target(args, &cfg).as_deref(), &body, &summary)
}

fn cmd_stability_scan(args: &CfgArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    let template = cfg.run_config()?;
    let target = match cfg.get("analysis.target").unwrap_or("discrete") {
        "discrete" => StabilityTarget::Discrete { algorithm: cfg.algorithm()?, steps: template.steps },
        "sde" => StabilityTarget::Sde {
            family: cfg.sde_family()?,
            algorithm: cfg.sde_algorithm()?,
            t_end: cfg.f64_or("sde.T", 1.0)?,
        },
        other => return Err(Error::Config(format!("unknown analysis.target `{other}`")).into()),
    };
    let cells = stability_scan(&target, &template, &cfg.list("analysis.eta_grid")?, &cfg.list_or("analysis.x0_grid", &[1.0])?)?;
    let mut body = cfg.header();
    body.push_str("eta,x0,status\n");
    for c in &cells {
        let s = match c.class {
            StabilityClass::Stable => "stable",
            StabilityClass::Diverged => "diverged",
        };
        let _ = writeln!(body, "{},{},{s}", c.eta, c.x0);
    }
    let diverged = cells.iter().filter(|c| c.class == StabilityClass::Diverged).count();
    let summary = format!("stability-scan: cells={} diverged={diverged}", cells.len());
    emit(output_target(args, &cfg).as_deref(), &body, &summary)
}

fn cmd_bound_check(args: &CfgArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    let objective = cfg.objective()?;
    let d = objective.dim();
    let clients = cfg.clients(d)?;
    let scheduler = cfg.scheduler(d, &clients)?;
    let smooth = objective.smoothness();
    let l0 = match (cfg.get("analysis.L0"), smooth) {
        (Some(_), _) => cfg.f64_req("analysis.L0")?,
        (None, Some(s)) => s.l0,
        (None, None) => return Err(Error::Config("analysis.L0 is required for this objective".into()).into()),
    };
    let l1 = match (cfg.get("analysis.L1"), smooth) {
        (Some(_), _) => cfg.f64_req("analysis.L1")?,
        (None, Some(s)) => s.l1,
        (None, None) => return Err(Error::Config("analysis.L1 is required for this objective".into()).into()),
    };
    let bc = BoundCheckConfig {
        theorem: cfg.theorem()?,
        x0: cfg.x0_or_default(&objective)?,
        objective,
        clients,
        t_grid: cfg.list_or("analysis.t_grid", &[1.0, 10.0, 100.0])?,
        samples: cfg.usize_or("analysis.samples", 10_000)?,
        dt: cfg.f64_or("sde.dt", scheduler.eta / 50.0)?,
        scheduler,
        seed: cfg.u64_or("seed", 0)?,
        l0,
        l1,
        eps: cfg.f64_or("analysis.eps", 0.5)?,
        g_proxy: cfg.grad_proxy()?,
    };
    let rep = bound_check(&bc)?;
    let mut body = cfg.header();
    let _ = writeln!(body, "# constraint = {:e}", rep.constraint);
    let _ = writeln!(body, "# max_lr = {:e}", rep.max_lr);
    let _ = writeln!(body, "# rhs_floor = {:e}", rep.floor);
    let _ = writeln!(body, "# s0 = {:e} estimated = {}", rep.s0, rep.s0_estimated);
    body.push_str("t,rhs,empirical,ci,satisfied\n");
    for r in &rep.rows {
        let _ = writeln!(body, "{},{:e},{:e},{:e},{}", r.t, r.rhs, r.empirical, r.ci, r.satisfied);
    }
    let summary = format!(
        "bound-check: theorem={} satisfied={} floor={:e}{}",
        rep.theorem.name(),
        rep.satisfied,
        rep.floor,
        if rep.floor > 0.0 { " (non-vanishing term)" } else { "" }
    );
    emit(output_target(args, &cfg).as_deref(), &body, &summary)?;
    if !rep.satisfied {
        return Err(Failed("bound not certified at every grid time".into()).into());
    }
    Ok(())
}

fn cmd_repro(args: &ReproArgs) -> Result<()> {
    if args.name == "list" {
        for n in PROTOCOL_NAMES {
            let p = protocol(n, Scale::Desk)?;
            println!("{n}: {} steps, {} runs, {} variants ({})", p.steps, p.runs, p.variants.len(), p.note);
        }
        return Ok(());
    }
    let cfg = match &args.config {
        Some(p) => load(p)?,
        None => Config::parse("")?,
    };
    let scale = Scale::parse(args.scale.as_deref().or(cfg.get("scale")).unwrap_or("desk"))?;
    let seed = match args.seed {
        Some(s) => s,
        None => cfg.u64_or("seed", 0)?,
    };
    let out_dir = args.out_dir.clone().or_else(|| cfg.get("output").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    let names: Vec<&str> = match figure_protocols(&args.name) {
        Ok(pair) => pair.to_vec(),
        Err(_) => vec![args.name.as_str()],
    };
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut unexpected = Vec::new();
    for name in names {
        let mut p = protocol(name, scale)?;
        if let Some(r) = args.runs.or(cfg.get("runs").map(|_| cfg.runs()).transpose()?) {
            p = p.with_runs(r);
        }
        if let Some(s) = args.steps.or(cfg.get("steps").map(|_| cfg.usize_or("steps", 0)).transpose()?) {
            p = p.with_steps(s);
        }
        let res = run_protocol(&p, seed)?;
        let path = out_dir.join(format!("{name}.csv"));
        let mut f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        res.write_csv(&mut f)?;
        for c in &res.curves {
            println!(
                "repro {name} {}: initial={:e} final={:e} diverged={}/{} -> {}",
                c.label,
                c.mean_grad_norm_sq[0],
                c.mean_grad_norm_sq.last().copied().unwrap_or(f64::NAN),
                c.diverged_runs,
                c.runs,
                path.display()
            );
        }
        if res.unexpected_divergence(&p) {
            unexpected.push(name);
        }
    }
    if !unexpected.is_empty() {
        return Err(Failed(format!("divergence in runs expected to converge: {}", unexpected.join(", "))).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let res = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Sde(a) => cmd_sde(a),
        Cmd::WeakOrder(a) => cmd_weak_order(a),
        Cmd::StabilityScan(a) => cmd_stability_scan(a),
        Cmd::BoundCheck(a) => cmd_bound_check(a),
        Cmd::Repro(a) => cmd_repro(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
