//! Weak-order measurement, stability scans, and the stepsize constraints and
//! convergence-bound right-hand sides of the DSGD, DCSGD and DSignSGD
//! theorems.

use rayon::prelude::*;

use crate::clients::{ClientSpec, ClientSummary};
use crate::error::{Error, Result};
use crate::noise::{harmonic_mean_scale, NoiseSpec};
use crate::objectives::Objective;
use crate::optimizers::{run_observed, Algorithm, InitPoint, RunConfig};
use crate::rng::{stream, Purpose};
use crate::schedulers::{RandomTimeSampler, RandomTimeWeights, SchedulerKind, SchedulerSpec};
use crate::sde::{build_sde, xi_constants, EulerMaruyama, IntegrateOptions, SdeAlgorithm, SdeFamily, SdeModel};
use crate::trajectory::RunStatus;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Test function `g` for weak-order measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    NormSq,
    Loss,
}

impl TestFunction {
    pub fn eval(&self, obj: &Objective, x: &[f64]) -> f64 {
        match self {
            TestFunction::NormSq => x.iter().map(|v| v * v).sum(),
            TestFunction::Loss => obj.loss(x).unwrap_or(f64::NAN),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::NormSq => "norm_sq",
            TestFunction::Loss => "loss",
        }
    }
}

/// SDE algorithm matching a discrete optimizer.
pub fn sde_algorithm_for(alg: Algorithm) -> Result<SdeAlgorithm> {
    match alg {
        Algorithm::Dsgd => Ok(SdeAlgorithm::Sgd),
        Algorithm::Dcsgd => Ok(SdeAlgorithm::Dcsgd),
        Algorithm::DsignSgd => Ok(SdeAlgorithm::Dsignsgd),
        Algorithm::NormalizedDcsgd => Err(Error::unsupported("no SDE model for normalized DCSGD")),
    }
}

#[derive(Debug, Clone)]
pub struct WeakOrderConfig {
    pub algorithm: Algorithm,
    pub family: SdeFamily,
    pub objective: Objective,
    pub clients: Vec<ClientSpec>,
    pub eta_grid: Vec<f64>,
    pub t_end: f64,
    pub test_fn: TestFunction,
    pub samples: usize,
    pub seed: u64,
    /// SDE step as a fraction of η.
    pub dt_fraction: f64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakOrderRow {
    pub eta: f64,
    /// Number of discrete steps `K = ⌊T/η⌋`.
    pub steps: usize,
    /// Comparison time `Kη`.
    pub horizon: f64,
    pub discrete_mean: f64,
    pub sde_mean: f64,
    pub error: f64,
    /// Half-width of the 95% interval of the error.
    pub ci: f64,
    pub used_in_fit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakOrderReport {
    pub rows: Vec<WeakOrderRow>,
    pub slope: f64,
    pub slope_se: f64,
    pub test_fn: TestFunction,
}

/// Weighted least squares of `y` on `x`: `(slope, intercept, slope_se)`.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let n = x.len() as f64;
    let se = if x.len() > 2 {
        let rss: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (c - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, intercept, se)
}

pub fn weak_order(cfg: &WeakOrderConfig) -> Result<WeakOrderReport> {
    if cfg.eta_grid.len() < 2 || cfg.eta_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("eta grid needs at least two strictly increasing values"));
    }
    if cfg.samples < 2 {
        return Err(Error::invalid("at least two samples are required"));
    }
    let sde_alg = sde_algorithm_for(cfg.algorithm)?;
    let m = cfg.samples as u64;
    let mut rows = Vec::with_capacity(cfg.eta_grid.len());
    for (gi, &eta) in cfg.eta_grid.iter().enumerate() {
        let k = (cfg.t_end / eta + 1e-9).floor() as usize;
        if k == 0 {
            return Err(Error::invalid(format!("eta = {eta} exceeds the horizon")));
        }
        let horizon = k as f64 * eta;
        let mut rc = RunConfig::new(cfg.objective.clone(), cfg.clients.clone(), SchedulerSpec::constant(eta), k);
        rc.seed = cfg.seed;
        rc.x0 = InitPoint::Fixed(cfg.x0.clone());
        rc.validate(cfg.algorithm)?;
        let base = gi as u64 * m;
        let discrete: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|r| {
                let (status, x) = run_observed(&rc, cfg.algorithm, base + r, |_| {})?;
                Ok(if status.diverged() { f64::INFINITY } else { cfg.test_fn.eval(&cfg.objective, &x) })
            })
            .collect::<Result<_>>()?;
        let model = build_sde(cfg.family, sde_alg, cfg.objective.clone(), cfg.clients.clone(), eta)?;
        let sched = SchedulerSpec::constant(eta);
        let opts = IntegrateOptions::new(eta * cfg.dt_fraction, horizon);
        let continuous: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|r| {
                let mut em = EulerMaruyama::new(&model, &sched, opts)?;
                let mut x = cfg.x0.clone();
                let mut rng = stream(cfg.seed, base + r, 0, 0, Purpose::Diffusion);
                let status = em.run(&mut x, &mut rng, |_, _, _, _, _| {})?;
                Ok(if status.diverged() { f64::INFINITY } else { cfg.test_fn.eval(&cfg.objective, &x) })
            })
            .collect::<Result<_>>()?;
        let (dm, dse) = mean_se(&discrete);
        let (sm, sse) = mean_se(&continuous);
        let error = (dm - sm).abs();
        let ci = Z95 * (dse * dse + sse * sse).sqrt();
        rows.push(WeakOrderRow {
            eta,
            steps: k,
            horizon,
            discrete_mean: dm,
            sde_mean: sm,
            error,
            ci,
            used_in_fit: error.is_finite() && error > ci && error > 0.0,
        });
    }
    let used: Vec<&WeakOrderRow> = rows.iter().filter(|r| r.used_in_fit).collect();
    if used.len() < 2 {
        return Err(Error::Inconclusive(format!(
            "only {} of {} grid points have errors distinguishable from zero",
            used.len(),
            rows.len()
        )));
    }
    let lx: Vec<f64> = used.iter().map(|r| r.eta.ln()).collect();
    let ly: Vec<f64> = used.iter().map(|r| r.error.ln()).collect();
    let w: Vec<f64> = if used.iter().any(|r| r.ci == 0.0) {
        vec![1.0; used.len()]
    } else {
        used.iter().map(|r| (r.error / r.ci).powi(2)).collect()
    };
    let (slope, _, slope_se) = weighted_linear_fit(&lx, &ly, &w);
    Ok(WeakOrderReport { rows, slope, slope_se, test_fn: cfg.test_fn })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilityClass {
    Stable,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityCell {
    pub eta: f64,
    pub x0: f64,
    pub class: StabilityClass,
}

/// What a stability scan integrates.
#[derive(Debug, Clone)]
pub enum StabilityTarget {
    Discrete { algorithm: Algorithm, steps: usize },
    Sde { family: SdeFamily, algorithm: SdeAlgorithm, t_end: f64 },
}

/// A cell is `Diverged` when the divergence detector fires or the final
/// loss exceeds the initial loss; `x0` values are broadcast to every
/// coordinate.
pub fn stability_scan(
    target: &StabilityTarget,
    template: &RunConfig,
    eta_grid: &[f64],
    x0_grid: &[f64],
) -> Result<Vec<StabilityCell>> {
    let d = template.objective.dim();
    let cells: Vec<(f64, f64)> = eta_grid.iter().flat_map(|&e| x0_grid.iter().map(move |&x| (e, x))).collect();
    cells
        .par_iter()
        .map(|&(eta, x0)| {
            let start = vec![x0; d];
            let f0 = template.objective.loss(&start)?;
            let (status, x_end) = match target {
                StabilityTarget::Discrete { algorithm, steps } => {
                    let mut rc = template.clone();
                    rc.scheduler.eta = eta;
                    rc.steps = *steps;
                    rc.x0 = InitPoint::Fixed(start);
                    run_observed(&rc, *algorithm, 0, |_| {})?
                }
                StabilityTarget::Sde { family, algorithm, t_end } => {
                    let model = build_sde(*family, *algorithm, template.objective.clone(), template.clients.clone(), eta)?;
                    let mut sched = template.scheduler;
                    sched.eta = eta;
                    let mut opts = IntegrateOptions::default_for(eta, *t_end);
                    opts.divergence_threshold = template.divergence_threshold;
                    let mut em = EulerMaruyama::new(&model, &sched, opts)?;
                    let mut x = start;
                    let mut rng = stream(template.seed, 0, 0, 0, Purpose::Diffusion);
                    let st = em.run(&mut x, &mut rng, |_, _, _, _, _| {})?;
                    (st, x)
                }
            };
            let expanded = match status {
                RunStatus::Diverged { .. } => true,
                RunStatus::Completed => template.objective.loss(&x_end)? > f0,
            };
            let class = if expanded { StabilityClass::Diverged } else { StabilityClass::Stable };
            Ok(StabilityCell { eta, x0, class })
        })
        .collect()
}

/// Largest stable and smallest diverged η among cells with the given `x0`.
pub fn stability_boundary(cells: &[StabilityCell], x0: f64) -> (Option<f64>, Option<f64>) {
    let mut stable: Option<f64> = None;
    let mut diverged: Option<f64> = None;
    for c in cells.iter().filter(|c| c.x0 == x0) {
        match c.class {
            StabilityClass::Stable => stable = Some(stable.map_or(c.eta, |s| s.max(c.eta))),
            StabilityClass::Diverged => diverged = Some(diverged.map_or(c.eta, |s| s.min(c.eta))),
        }
    }
    (stable, diverged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TheoremId {
    /// DCSGD, classic first-order SDE (main text).
    Thm1,
    /// DCSGD, corrected SDE (main text).
    Thm2,
    /// DSignSGD, corrected SDE (main text).
    Thm3,
    /// DSGD, classic SDE.
    D1,
    /// DSGD, corrected SDE.
    D2,
    /// DCSGD, classic SDE.
    D3,
    /// DCSGD, corrected SDE.
    D4,
    /// DSignSGD, classic SDE.
    D5,
    /// DSignSGD, corrected SDE.
    D6,
}

impl TheoremId {
    pub const ALL: [TheoremId; 9] = [
        TheoremId::Thm1,
        TheoremId::Thm2,
        TheoremId::Thm3,
        TheoremId::D1,
        TheoremId::D2,
        TheoremId::D3,
        TheoremId::D4,
        TheoremId::D5,
        TheoremId::D6,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "thm1" => TheoremId::Thm1,
            "thm2" => TheoremId::Thm2,
            "thm3" => TheoremId::Thm3,
            "d1" => TheoremId::D1,
            "d2" => TheoremId::D2,
            "d3" => TheoremId::D3,
            "d4" => TheoremId::D4,
            "d5" => TheoremId::D5,
            "d6" => TheoremId::D6,
            _ => return Err(Error::Config(format!("unknown theorem id `{s}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TheoremId::Thm1 => "thm1",
            TheoremId::Thm2 => "thm2",
            TheoremId::Thm3 => "thm3",
            TheoremId::D1 => "d1",
            TheoremId::D2 => "d2",
            TheoremId::D3 => "d3",
            TheoremId::D4 => "d4",
            TheoremId::D5 => "d5",
            TheoremId::D6 => "d6",
        }
    }

    /// The SDE whose trajectories the bound is about.
    pub fn model(&self) -> (SdeFamily, SdeAlgorithm) {
        use SdeAlgorithm::*;
        use SdeFamily::*;
        match self {
            TheoremId::D1 => (ClassicFirst, Sgd),
            TheoremId::D2 => (CorrectedFirst, Sgd),
            TheoremId::Thm1 | TheoremId::D3 => (ClassicFirst, Dcsgd),
            TheoremId::Thm2 | TheoremId::D4 => (CorrectedFirst, Dcsgd),
            TheoremId::D5 => (ClassicFirst, Dsignsgd),
            TheoremId::Thm3 | TheoremId::D6 => (CorrectedFirst, Dsignsgd),
        }
    }

    pub fn is_sign(&self) -> bool {
        matches!(self, TheoremId::Thm3 | TheoremId::D5 | TheoremId::D6)
    }
}

/// Student-t constants `ℓ_ν`, `M_ν` and the harmonic-mean scale `σ_H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignConstants {
    pub ell: f64,
    pub m: f64,
    pub sigma_h: f64,
}

/// Everything the constraint and bound formulas read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    pub l0: f64,
    pub l1: f64,
    pub d: usize,
    pub n: usize,
    pub eps: f64,
    pub eta: f64,
    /// `f(x0) − f(x*)`.
    pub s0: f64,
    pub summary: ClientSummary,
    pub sign: Option<SignConstants>,
}

impl ProblemConstants {
    /// Affine-variance problem with the given summary.
    pub fn affine(l0: f64, l1: f64, d: usize, eps: f64, eta: f64, s0: f64, summary: ClientSummary) -> Self {
        Self { l0, l1, d, n: summary.n, eps, eta, s0, summary, sign: None }
    }

    /// Student-t problem; `ν` and `σ_H` give `ℓ`, `M`.
    pub fn student(l0: f64, l1: f64, d: usize, n: usize, eta: f64, s0: f64, nu: f64, sigma_h: f64) -> Result<Self> {
        let (ell, m) = xi_constants(nu)?;
        Ok(Self {
            l0,
            l1,
            d,
            n,
            eps: 0.5,
            eta,
            s0,
            summary: ClientSummary::noiseless(n),
            sign: Some(SignConstants { ell, m, sigma_h }),
        })
    }

    /// Constants for a client population: affine summary for Gaussian or
    /// noiseless clients, Student-t constants when every client is
    /// Student-t with a common ν.
    pub fn from_clients(l0: f64, l1: f64, d: usize, eps: f64, eta: f64, s0: f64, clients: &[ClientSpec]) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("at least one client is required"));
        }
        if let NoiseSpec::StudentT { nu, .. } = clients[0].noise {
            let noises: Vec<NoiseSpec> = clients.iter().map(|c| c.noise.clone()).collect();
            if noises.iter().any(|s| !matches!(s, NoiseSpec::StudentT { nu: v, .. } if *v == nu)) {
                return Err(Error::unsupported("student-t clients must share the degrees of freedom"));
            }
            let sigma_h = harmonic_mean_scale(&noises)?;
            let mut c = Self::student(l0, l1, d, clients.len(), eta, s0, nu, sigma_h)?;
            c.eps = eps;
            return Ok(c);
        }
        let summary = ClientSummary::from_clients(clients)?;
        Ok(Self::affine(l0, l1, d, eps, eta, s0, summary))
    }

    fn sign_constants(&self) -> Result<SignConstants> {
        self.sign.ok_or_else(|| Error::invalid("sign theorems need student-t constants"))
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }

    fn df(&self) -> f64 {
        self.d as f64
    }

    /// `K = L1 d σ_H/(2N) + √d (L0+L1) M`.
    pub fn k_main(&self) -> Result<f64> {
        let s = self.sign_constants()?;
        Ok(self.l1 * self.df() * s.sigma_h / (2.0 * self.nf()) + self.df().sqrt() * (self.l0 + self.l1) * s.m)
    }

    /// `K' = L1/(2N) + (L0+L1) M/(σ_H √d)`.
    pub fn k_appendix(&self) -> Result<f64> {
        let s = self.sign_constants()?;
        Ok(self.l1 / (2.0 * self.nf()) + (self.l0 + self.l1) * s.m / (s.sigma_h * self.df().sqrt()))
    }
}

fn positive_ratio(num: f64, den: f64, what: &str) -> Result<f64> {
    if den > 0.0 && den.is_finite() {
        Ok(num / den)
    } else {
        Err(Error::Config(format!(
            "{what}: denominator is {den}; the model imposes no finite restriction on the stepsize"
        )))
    }
}

/// Largest admissible `η η_t`, with `g` standing in for `E‖∇f(X_t)‖`.
pub fn constraint_value(id: TheoremId, c: &ProblemConstants, g: f64) -> Result<f64> {
    let (l0, l1, n, d, eps) = (c.l0, c.l1, c.nf(), c.df(), c.eps);
    let s = &c.summary;
    let a = s.a_term(c.d);
    let b = s.b_term();
    let name = id.name();
    match id {
        TheoremId::Thm1 | TheoremId::D3 => positive_ratio(2.0 * n * eps, (l0 + l1 * g) * a + l1 * d * b, name),
        TheoremId::Thm2 | TheoremId::D4 => {
            positive_ratio(2.0 * eps, (l0 + l1 * g) * (1.0 + a / n) + l1 * d * b / n, name)
        }
        TheoremId::D1 => positive_ratio(
            2.0 * n * eps,
            d * (s.sigma1_sq * l0 + s.sigma0_sq * l1 + l1 * s.sigma1_sq * g),
            name,
        ),
        TheoremId::D2 => positive_ratio(
            2.0 * eps,
            l0 + l1 * g + d / n * (s.sigma1_sq * l0 + s.sigma0_sq * l1 + l1 * s.sigma1_sq * g),
            name,
        ),
        TheoremId::Thm3 => {
            let sc = c.sign_constants()?;
            positive_ratio(sc.ell, c.k_main()?, name)
        }
        TheoremId::D5 => {
            let sc = c.sign_constants()?;
            positive_ratio(2.0 * n * sc.ell, sc.sigma_h * d * l1, name)
        }
        TheoremId::D6 => {
            let sc = c.sign_constants()?;
            positive_ratio(sc.ell, sc.sigma_h * d * c.k_appendix()?, name)
        }
    }
}

/// Right-hand side of the bound at integrals `φ⁽¹⁾ = phi1`, `φ⁽²⁾ = phi2`.
pub fn bound_rhs(id: TheoremId, c: &ProblemConstants, phi1: f64, phi2: f64) -> Result<f64> {
    let (l0, l1, n, d, eps, eta, s0) = (c.l0, c.l1, c.nf(), c.df(), c.eps, c.eta, c.s0);
    let s = &c.summary;
    let name = id.name();
    match id {
        TheoremId::Thm1 | TheoremId::D3 => {
            let noise = l0 * s.a_term(c.d) + l1 * d * s.b_term();
            positive_ratio(s0 + phi2 * noise / (2.0 * n), (1.0 - eps) * phi1, name)
        }
        TheoremId::Thm2 | TheoremId::D4 => positive_ratio(
            s0 + phi2 * eta * (l0 + l1) * d * s.b_term() / (2.0 * n),
            (1.0 - eps) * phi1,
            name,
        ),
        TheoremId::D1 => positive_ratio(
            s0 + phi2 * eta * d * (l0 + l1) * (s.sigma0_sq + s.sigma1_sq) / (2.0 * n),
            phi1 * (1.0 - eps),
            name,
        ),
        TheoremId::D2 => positive_ratio(
            s0 + eta * phi2 * (l0 + l1) * d * s.sigma0_sq / (2.0 * n),
            phi1 * (1.0 - eps),
            name,
        ),
        TheoremId::Thm3 => {
            let sc = c.sign_constants()?;
            let k = c.k_main()?;
            let den = phi1 * sc.ell - phi2 * eta * k;
            let num = s0 + phi2 * eta * (l0 + l1) * (d / (2.0 * n) + sc.m * d.sqrt() / sc.sigma_h);
            Ok(sc.sigma_h * positive_ratio(num, den, name)?)
        }
        TheoremId::D5 => {
            let sc = c.sign_constants()?;
            let den = phi1 * sc.ell / sc.sigma_h - phi2 * eta * l1 * d / (2.0 * n);
            positive_ratio(s0 + eta * (l0 + l1) * d * phi2 / (2.0 * n), den, name)
        }
        TheoremId::D6 => {
            let sc = c.sign_constants()?;
            let den = phi1 * sc.ell / sc.sigma_h - phi2 * c.k_appendix()?;
            let num = s0 + phi2 * eta * (l0 + l1) * d * (1.0 / (2.0 * n) + sc.m / (sc.sigma_h * d.sqrt()));
            positive_ratio(num, den, name)
        }
    }
}

/// Density of the random evaluation time for a theorem.
pub fn random_time_weights(id: TheoremId, c: &ProblemConstants) -> Result<RandomTimeWeights> {
    Ok(match id {
        TheoremId::Thm3 => {
            let sc = c.sign_constants()?;
            RandomTimeWeights::Thm3 { eta: c.eta, k: c.k_main()?, ell: sc.ell }
        }
        TheoremId::D5 => {
            let sc = c.sign_constants()?;
            RandomTimeWeights::Thm3 { eta: c.eta, k: c.l1 * c.df() / (2.0 * c.nf()), ell: sc.ell / sc.sigma_h }
        }
        TheoremId::D6 => {
            let sc = c.sign_constants()?;
            RandomTimeWeights::Thm3 { eta: 1.0, k: c.k_appendix()?, ell: sc.ell / sc.sigma_h }
        }
        _ => RandomTimeWeights::Linear,
    })
}

/// `lim φ⁽²⁾_t / φ⁽¹⁾_t` as `t → ∞`.
pub fn phi_ratio_limit(s: &SchedulerSpec) -> f64 {
    match s.kind {
        SchedulerKind::Constant | SchedulerKind::AdaptiveNormalized(_) => 1.0,
        SchedulerKind::PowerLaw { .. } | SchedulerKind::InverseSqrtStep => 0.0,
    }
}

/// Value the right-hand side approaches as `t → ∞`; zero for
/// Robbins–Monro schedules.
pub fn bound_floor(id: TheoremId, c: &ProblemConstants, s: &SchedulerSpec) -> Result<f64> {
    let r = phi_ratio_limit(s);
    if r == 0.0 {
        return Ok(0.0);
    }
    let big = 1e15;
    let mut c0 = *c;
    c0.s0 = 0.0;
    bound_rhs(id, &c0, big, r * big)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRow {
    pub t: f64,
    pub rhs: f64,
    pub empirical: f64,
    pub ci: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub theorem: TheoremId,
    pub constraint: f64,
    pub max_lr: f64,
    pub rows: Vec<BoundRow>,
    pub satisfied: bool,
    /// Limit of the right-hand side; nonzero flags a non-vanishing term.
    pub floor: f64,
    pub s0: f64,
    /// `f(x*)` was replaced by the best loss observed.
    pub s0_estimated: bool,
}

/// How `E‖∇f(X_t)‖` enters the constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradProxy {
    Constant(f64),
    /// Largest Monte Carlo mean of `‖∇f(X_t)‖` over the integration grid.
    MonteCarlo,
}

/// Right-hand side curve without Monte Carlo, after checking the stepsize
/// constraint against `g`.
pub fn bound_curve(id: TheoremId, c: &ProblemConstants, s: &SchedulerSpec, t_grid: &[f64], g: f64) -> Result<Vec<(f64, f64)>> {
    let limit = constraint_value(id, c, g)?;
    check_schedule(s, t_grid, limit)?;
    t_grid.iter().map(|&t| Ok((t, bound_rhs(id, c, s.phi(1, t), s.phi(2, t))?))).collect()
}

fn max_lr(s: &SchedulerSpec, t_grid: &[f64]) -> f64 {
    let t_max = t_grid.iter().copied().fold(0.0, f64::max);
    let n = 1000;
    (0..=n).map(|j| s.effective_lr(t_max * j as f64 / n as f64, 0.0)).fold(0.0, f64::max)
}

fn check_schedule(s: &SchedulerSpec, t_grid: &[f64], limit: f64) -> Result<f64> {
    if s.is_adaptive() {
        return Err(Error::unsupported("bound certification needs a deterministic schedule"));
    }
    let lr = max_lr(s, t_grid);
    if lr >= limit {
        return Err(Error::ConstraintViolated(format!("max eta*eta_t = {lr} is not below the admissible {limit}")));
    }
    Ok(lr)
}

#[derive(Debug, Clone)]
pub struct BoundCheckConfig {
    pub theorem: TheoremId,
    pub objective: Objective,
    pub clients: Vec<ClientSpec>,
    pub scheduler: SchedulerSpec,
    pub x0: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub samples: usize,
    pub dt: f64,
    pub seed: u64,
    pub l0: f64,
    pub l1: f64,
    pub eps: f64,
    pub g_proxy: GradProxy,
}

/// Certifies `E‖∇f(X_t̂)‖² ≤ RHS(t)` on every grid time: satisfied when the
/// Monte Carlo mean plus twice its 95% half-width stays below the bound.
pub fn bound_check(cfg: &BoundCheckConfig) -> Result<BoundReport> {
    let id = cfg.theorem;
    if cfg.t_grid.is_empty() || cfg.t_grid.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::invalid("time grid must be nonempty and positive"));
    }
    if cfg.samples < 2 {
        return Err(Error::invalid("at least two samples are required"));
    }
    let (family, algorithm) = id.model();
    let model = build_sde(family, algorithm, cfg.objective.clone(), cfg.clients.clone(), cfg.scheduler.eta)?;
    let eta = cfg.scheduler.eta;
    let t_max = cfg.t_grid.iter().copied().fold(0.0, f64::max);
    let d = cfg.objective.dim();

    let f0 = cfg.objective.loss(&cfg.x0)?;
    let mut constants = ProblemConstants::from_clients(cfg.l0, cfg.l1, d, cfg.eps, eta, f0, &cfg.clients)?;

    let mut opts = IntegrateOptions::new(cfg.dt, t_max);
    opts.record_stride = 1;
    let (n_steps, dt) = opts.steps();

    // provisional weights use S0 only through the constraint check below
    let weights = random_time_weights(id, &constants)?;
    let samplers: Vec<RandomTimeSampler> =
        cfg.t_grid.iter().map(|&t| RandomTimeSampler::new(&cfg.scheduler, t, weights)).collect::<Result<_>>()?;

    struct RunOut {
        at: Vec<f64>,
        gnorm: Vec<f64>,
        min_loss: f64,
    }
    let record_gnorm = cfg.g_proxy == GradProxy::MonteCarlo;
    let outs: Vec<RunOut> = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|r| {
            let mut trng = stream(cfg.seed, r, 0, 0, Purpose::RandomTime);
            let targets: Vec<usize> = samplers
                .iter()
                .map(|s| ((s.sample(&mut trng) / dt).round() as usize).min(n_steps))
                .collect();
            let mut at = vec![f64::NAN; targets.len()];
            let mut gnorm = if record_gnorm { vec![0.0; n_steps + 1] } else { Vec::new() };
            let mut min_loss = f64::INFINITY;
            let mut em = EulerMaruyama::new(&model, &cfg.scheduler, opts)?;
            let mut x = cfg.x0.clone();
            let mut rng = stream(cfg.seed, r, 0, 0, Purpose::Diffusion);
            let status = em.run(&mut x, &mut rng, |k, _, loss, grad, _| {
                let gsq: f64 = grad.iter().map(|g| g * g).sum();
                for (slot, &tk) in at.iter_mut().zip(&targets) {
                    if tk == k {
                        *slot = gsq;
                    }
                }
                if record_gnorm {
                    gnorm[k] = gsq.sqrt();
                }
                min_loss = min_loss.min(loss);
            })?;
            if status.diverged() {
                at.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = f64::INFINITY);
                if record_gnorm {
                    if let RunStatus::Diverged { step } = status {
                        gnorm[step..].iter_mut().for_each(|v| *v = f64::INFINITY);
                    }
                }
            }
            Ok(RunOut { at, gnorm, min_loss })
        })
        .collect::<Result<_>>()?;

    let s0_estimated = cfg.objective.known_minimum().is_none();
    let f_star = match cfg.objective.known_minimum() {
        Some(v) => v,
        None => outs.iter().map(|o| o.min_loss).fold(f64::INFINITY, f64::min).min(f0),
    };
    constants.s0 = f0 - f_star;

    let g = match cfg.g_proxy {
        GradProxy::Constant(g) => g,
        GradProxy::MonteCarlo => {
            let m = outs.len() as f64;
            (0..=n_steps).map(|k| outs.iter().map(|o| o.gnorm[k]).sum::<f64>() / m).fold(0.0, f64::max)
        }
    };
    let constraint = constraint_value(id, &constants, g)?;
    let lr = check_schedule(&cfg.scheduler, &cfg.t_grid, constraint)?;

    let mut rows = Vec::with_capacity(cfg.t_grid.len());
    for (j, &t) in cfg.t_grid.iter().enumerate() {
        let vals: Vec<f64> = outs.iter().map(|o| o.at[j]).collect();
        let (mean, se) = mean_se(&vals);
        let ci = Z95 * se;
        let rhs = bound_rhs(id, &constants, cfg.scheduler.phi(1, t), cfg.scheduler.phi(2, t))?;
        let satisfied = mean.is_finite() && mean + 2.0 * ci <= rhs;
        rows.push(BoundRow { t, rhs, empirical: mean, ci, satisfied });
    }
    let satisfied = rows.iter().all(|r| r.satisfied);
    Ok(BoundReport {
        theorem: id,
        constraint,
        max_lr: lr,
        floor: bound_floor(id, &constants, &cfg.scheduler)?,
        rows,
        satisfied,
        s0: constants.s0,
        s0_estimated,
    })
}

/// The model a theorem pairs with, built from a client population.
pub fn theorem_model(id: TheoremId, objective: Objective, clients: Vec<ClientSpec>, eta: f64) -> Result<SdeModel> {
    let (family, algorithm) = id.model();
    build_sde(family, algorithm, objective, clients, eta)
}
