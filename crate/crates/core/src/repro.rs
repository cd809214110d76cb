//! Named experiment protocols for the quartic and MLP figures, with
//! run-averaged gradient-norm curves.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::clients::{homogeneous, ClientSpec, ClientSummary};
use crate::compressors::CompressorSpec;
use crate::config::git_blob_hash;
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::objectives::{MlpProblem, Objective, ObjectiveKind};
use crate::optimizers::{run_observed, Algorithm, InitPoint, RunConfig};
use crate::schedulers::{NormalizedParams, SchedulerKind, SchedulerSpec};

pub const PROTOCOL_NAMES: [&str; 9] = [
    "quartic-dcsgd-diverge",
    "quartic-dcsgd-scheduled",
    "quartic-dsign-const",
    "quartic-dsign-sqrt",
    "mlp-dcsgd-diverge",
    "mlp-dcsgd-scheduled",
    "mlp-normsgd-baseline",
    "mlp-dsign-const",
    "mlp-dsign-sqrt",
];

pub const OMEGAS: [f64; 3] = [4.0, 8.0, 16.0];
pub const SIGMAS: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 8.0, 16.0];

/// Runs in one deterministic accumulation chunk.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Config(format!("unknown scale `{s}` (expected desk or full)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }

    fn pick<T>(&self, desk: T, full: T) -> T {
        match self {
            Scale::Desk => desk,
            Scale::Full => full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub clients: Vec<ClientSpec>,
    pub scheduler: SchedulerSpec,
}

#[derive(Debug, Clone)]
pub struct Protocol {
    pub name: &'static str,
    pub algorithm: Algorithm,
    pub objective: ObjectiveKind,
    pub eta: f64,
    pub steps: usize,
    pub runs: usize,
    pub x0: InitPoint,
    pub variants: Vec<Variant>,
    pub expect_convergence: bool,
    pub scale: Scale,
    pub record_stride: usize,
    pub note: &'static str,
}

/// `p = ω/(ω+1)` so that `ω = p/(1−p)`.
pub fn sparsify_for_omega(omega: f64) -> CompressorSpec {
    CompressorSpec::RandomSparsify { p: omega / (omega + 1.0) }
}

fn omega_variants(d: usize, eta: f64, scheduled: bool) -> Result<Vec<Variant>> {
    OMEGAS
        .iter()
        .map(|&w| {
            let clients = homogeneous(8, NoiseSpec::gaussian(0.0, 0.1), sparsify_for_omega(w));
            let scheduler = if scheduled {
                let summary = ClientSummary::from_clients(&clients)?;
                SchedulerSpec { kind: SchedulerKind::AdaptiveNormalized(NormalizedParams::full_form(0.5, 1.0, 1.0, summary, d)), eta }
            } else {
                SchedulerSpec::constant(eta)
            };
            Ok(Variant { label: format!("omega={w}"), clients, scheduler })
        })
        .collect()
}

fn sigma_variants(d: usize, n: usize, eta: f64, sqrt: bool) -> Vec<Variant> {
    SIGMAS
        .iter()
        .map(|&s| Variant {
            label: format!("sigma={s}"),
            clients: homogeneous(n, NoiseSpec::student_t(1.0, s, d), CompressorSpec::Sign),
            scheduler: if sqrt { SchedulerSpec::inverse_sqrt(eta) } else { SchedulerSpec::constant(eta) },
        })
        .collect()
}

/// Protocol by name at the given scale.
pub fn protocol(name: &str, scale: Scale) -> Result<Protocol> {
    let quartic = ObjectiveKind::QuarticSum { dim: 1000 };
    let mlp = ObjectiveKind::MlpRegression { seed: 0 };
    let dm = MlpProblem::PARAMS;
    let p = match name {
        "quartic-dcsgd-diverge" => Protocol {
            name: "quartic-dcsgd-diverge",
            algorithm: Algorithm::Dcsgd,
            objective: quartic,
            eta: 0.1,
            steps: 10,
            runs: scale.pick(100, 1000),
            x0: InitPoint::Fixed(vec![1.5; 1000]),
            variants: omega_variants(1000, 0.1, false)?,
            expect_convergence: false,
            scale,
            record_stride: 1,
            note: "constant stepsize; x0 = 1.5 in every coordinate",
        },
        "quartic-dcsgd-scheduled" => Protocol {
            name: "quartic-dcsgd-scheduled",
            algorithm: Algorithm::Dcsgd,
            objective: quartic,
            eta: 0.1,
            steps: 50_000,
            runs: scale.pick(5, 1000),
            x0: InitPoint::Fixed(vec![1.5; 1000]),
            variants: omega_variants(1000, 0.1, true)?,
            expect_convergence: true,
            scale,
            record_stride: scale.pick(10, 1),
            note: "normalized stepsize with eps = 0.5, L0 = L1 = 1 and the online norm estimate",
        },
        "quartic-dsign-const" | "quartic-dsign-sqrt" => {
            let sqrt = name.ends_with("sqrt");
            Protocol {
                name: if sqrt { "quartic-dsign-sqrt" } else { "quartic-dsign-const" },
                algorithm: Algorithm::DsignSgd,
                objective: ObjectiveKind::Quartic1D,
                eta: 0.1,
                steps: 10_000,
                runs: 10_000,
                x0: InitPoint::Default,
                variants: sigma_variants(1, 1, 0.1, sqrt),
                expect_convergence: sqrt,
                scale,
                record_stride: scale.pick(10, 1),
                note: "single client; student-t noise with nu = 1",
            }
        }
        "mlp-dcsgd-diverge" => Protocol {
            name: "mlp-dcsgd-diverge",
            algorithm: Algorithm::Dcsgd,
            objective: mlp,
            eta: 0.01,
            steps: 10,
            runs: scale.pick(20, 100),
            x0: InitPoint::Default,
            variants: omega_variants(dm, 0.01, false)?,
            expect_convergence: false,
            scale,
            record_stride: 1,
            note: "constant stepsize; runs reduced from 100 at desk scale",
        },
        "mlp-dcsgd-scheduled" => Protocol {
            name: "mlp-dcsgd-scheduled",
            algorithm: Algorithm::Dcsgd,
            objective: mlp,
            eta: 0.01,
            steps: scale.pick(2000, 50_000),
            runs: 5,
            x0: InitPoint::Default,
            variants: omega_variants(dm, 0.01, true)?,
            expect_convergence: true,
            scale,
            record_stride: scale.pick(1, 10),
            note: "normalized stepsize with sigma0 = 0, L0 = L1 = 1; horizon reduced from 50000 at desk scale",
        },
        "mlp-normsgd-baseline" => Protocol {
            name: "mlp-normsgd-baseline",
            algorithm: Algorithm::NormalizedDcsgd,
            objective: mlp,
            eta: 0.01,
            steps: scale.pick(2000, 50_000),
            runs: 5,
            x0: InitPoint::Default,
            variants: omega_variants(dm, 0.01, false)?,
            expect_convergence: true,
            scale,
            record_stride: scale.pick(1, 10),
            note: "normalized compressed gradient with eps = 1e-8; horizon reduced from 50000 at desk scale",
        },
        "mlp-dsign-const" | "mlp-dsign-sqrt" => {
            let sqrt = name.ends_with("sqrt");
            Protocol {
                name: if sqrt { "mlp-dsign-sqrt" } else { "mlp-dsign-const" },
                algorithm: Algorithm::DsignSgd,
                objective: mlp,
                eta: 0.01,
                steps: scale.pick(2000, 50_000),
                runs: 5,
                x0: InitPoint::Default,
                variants: sigma_variants(dm, 8, 0.01, sqrt),
                expect_convergence: sqrt,
                scale,
                record_stride: scale.pick(1, 10),
                note: "student-t noise with nu = 1; horizon reduced from 50000 at desk scale",
            }
        }
        _ => return Err(Error::Config(format!("unknown protocol `{name}`"))),
    };
    Ok(p)
}

pub fn repro_registry(scale: Scale) -> Vec<Protocol> {
    PROTOCOL_NAMES.iter().map(|n| protocol(n, scale).expect("registry names are valid")).collect()
}

/// The pair of protocols behind a figure panel.
pub fn figure_protocols(fig: &str) -> Result<[&'static str; 2]> {
    match fig {
        "fig1-left" => Ok(["quartic-dcsgd-diverge", "quartic-dcsgd-scheduled"]),
        "fig1-right" => Ok(["quartic-dsign-const", "quartic-dsign-sqrt"]),
        "fig2-left" => Ok(["mlp-dcsgd-diverge", "mlp-dcsgd-scheduled"]),
        "fig2-right" => Ok(["mlp-dsign-const", "mlp-dsign-sqrt"]),
        _ => Err(Error::Config(format!("unknown figure `{fig}`"))),
    }
}

/// Run-averaged curve for one variant. Diverged runs contribute `+∞` from
/// their divergence step on.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub steps: Vec<usize>,
    pub mean_grad_norm_sq: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub diverged_runs: usize,
    pub runs: usize,
}

impl Curve {
    pub fn at_step(&self, step: usize) -> Option<f64> {
        self.steps.binary_search(&step).ok().map(|i| self.mean_grad_norm_sq[i])
    }

    /// Mean of the curve over recorded steps in the last `frac` of the horizon.
    pub fn tail_mean(&self, frac: f64) -> f64 {
        let last = *self.steps.last().unwrap_or(&0) as f64;
        let start = last * (1.0 - frac);
        let tail: Vec<f64> =
            self.steps.iter().zip(&self.mean_grad_norm_sq).filter(|(s, _)| **s as f64 > start).map(|(_, v)| *v).collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// First recorded step whose mean reaches `factor` times the initial mean.
    pub fn first_growth(&self, factor: f64) -> Option<usize> {
        let g0 = *self.mean_grad_norm_sq.first()?;
        self.steps.iter().zip(&self.mean_grad_norm_sq).find(|(_, v)| **v >= factor * g0).map(|(s, _)| *s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproResult {
    pub protocol: String,
    pub curves: Vec<Curve>,
    pub header: String,
}

impl ReproResult {
    pub fn unexpected_divergence(&self, p: &Protocol) -> bool {
        p.expect_convergence && self.curves.iter().any(|c| c.diverged_runs > 0)
    }

    pub fn curve(&self, label: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.label == label)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(self.header.as_bytes())?;
        writeln!(w, "protocol,variant,step,mean_grad_norm_sq,mean_loss,diverged_runs")?;
        for c in &self.curves {
            for (i, s) in c.steps.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{:e},{:e},{}",
                    self.protocol, c.label, s, c.mean_grad_norm_sq[i], c.mean_loss[i], c.diverged_runs
                )?;
            }
        }
        Ok(())
    }
}

impl Protocol {
    /// `#`-prefixed description of the bound constants, ending with their hash.
    pub fn header(&self, seed: u64) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# protocol = {}", self.name);
        let _ = writeln!(s, "# scale = {}", self.scale.name());
        let _ = writeln!(s, "# algorithm = {}", self.algorithm.name());
        let _ = writeln!(s, "# objective = {:?}", self.objective);
        let _ = writeln!(s, "# eta = {}", self.eta);
        let _ = writeln!(s, "# steps = {}", self.steps);
        let _ = writeln!(s, "# runs = {}", self.runs);
        let _ = writeln!(s, "# clients = {}", self.variants.first().map_or(0, |v| v.clients.len()));
        let _ = writeln!(s, "# record_stride = {}", self.record_stride);
        let _ = writeln!(s, "# seed = {seed}");
        let _ = writeln!(s, "# note = {}", self.note);
        for v in &self.variants {
            let _ = writeln!(s, "# variant {} = {:?} / {:?} / {:?}", v.label, v.clients[0].noise, v.clients[0].compressor, v.scheduler.kind);
        }
        let hash = git_blob_hash(s.as_bytes());
        let _ = writeln!(s, "# config_sha1 = {hash}");
        s
    }

    /// Recorded step indices: every `record_stride`-th step and the last.
    pub fn recorded_steps(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=self.steps).step_by(self.record_stride).collect();
        if *v.last().unwrap() != self.steps {
            v.push(self.steps);
        }
        v
    }

    pub fn with_runs(mut self, runs: usize) -> Self {
        self.runs = runs;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

fn slot(step: usize, stride: usize, total: usize, n_slots: usize) -> Option<usize> {
    if step == total {
        Some(n_slots - 1)
    } else if step % stride == 0 {
        Some(step / stride)
    } else {
        None
    }
}

/// Averages `p.runs` runs of one variant.
pub fn run_variant(p: &Protocol, v: &Variant, seed: u64) -> Result<Curve> {
    let objective = Objective::build(&p.objective)?;
    let mut rc = RunConfig::new(objective, v.clients.clone(), v.scheduler, p.steps);
    rc.seed = seed;
    rc.x0 = p.x0.clone();
    rc.validate(p.algorithm)?;
    let steps = p.recorded_steps();
    let n = steps.len();
    let runs: Vec<u64> = (0..p.runs as u64).collect();
    let partial: Vec<(Vec<f64>, Vec<f64>, usize)> = runs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; n];
            let mut l = vec![0.0; n];
            let mut diverged = 0;
            for &r in chunk {
                let (status, _) = run_observed(&rc, p.algorithm, r, |pt| {
                    if let Some(i) = slot(pt.step, p.record_stride, p.steps, n) {
                        g[i] += pt.grad_norm_sq;
                        l[i] += pt.loss;
                    }
                })?;
                if let crate::trajectory::RunStatus::Diverged { step } = status {
                    diverged += 1;
                    for (i, s) in steps.iter().enumerate() {
                        if *s >= step {
                            g[i] = f64::INFINITY;
                            l[i] = f64::INFINITY;
                        }
                    }
                }
            }
            Ok((g, l, diverged))
        })
        .collect::<Result<_>>()?;
    let mut g = vec![0.0; n];
    let mut l = vec![0.0; n];
    let mut diverged = 0;
    for (pg, pl, d) in partial {
        for i in 0..n {
            g[i] += pg[i];
            l[i] += pl[i];
        }
        diverged += d;
    }
    let m = p.runs as f64;
    g.iter_mut().for_each(|v| *v /= m);
    l.iter_mut().for_each(|v| *v /= m);
    Ok(Curve { label: v.label.clone(), steps, mean_grad_norm_sq: g, mean_loss: l, diverged_runs: diverged, runs: p.runs })
}

pub fn run_protocol(p: &Protocol, seed: u64) -> Result<ReproResult> {
    if p.runs == 0 || p.steps == 0 || p.record_stride == 0 {
        return Err(Error::invalid("runs, steps and record stride must be positive"));
    }
    let curves = p.variants.iter().map(|v| run_variant(p, v, seed)).collect::<Result<_>>()?;
    Ok(ReproResult { protocol: p.name.to_string(), curves, header: p.header(seed) })
}
