//! SDE surrogates of the distributed optimizers and their Euler–Maruyama
//! integration.
//!
//! A model splits its drift into a first-order part `b(x)` and a curvature
//! part `c(x)` that already carries its factor of `η`. Under a scheduler the
//! integrator advances
//!
//! ```text
//! X += η_t b(X) dt + η_t² c(X) dt + η_t σ(X) ⊙ ξ √dt
//! ```
//!
//! with `σ` the diagonal diffusion factor and `ξ` standard normal.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::{beta::beta_reg, gamma::ln_gamma};

use crate::clients::ClientSpec;
use crate::compressors::{omega_of, CompressorSpec};
use crate::error::{check_dim, Error, Result};
use crate::noise::NoiseSpec;
use crate::objectives::Objective;
use crate::schedulers::SchedulerSpec;
use crate::trajectory::{is_diverged, RunStatus, TrajectoryPoint, TrajectoryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SdeFamily {
    ClassicFirst,
    ClassicSecond,
    CorrectedFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SdeAlgorithm {
    Sgd,
    Dcsgd,
    Dsignsgd,
}

/// `Ξ_ν(x) = F_ν(x) − 1/2` for the Student-t(ν) CDF `F_ν`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XiFunction {
    nu: f64,
    log_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XiMethod {
    CauchyClosedForm,
    NumericCdf,
}

impl XiFunction {
    pub fn new(nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::invalid(format!("degrees of freedom must be positive, got {nu}")));
        }
        let log_norm = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
        Ok(Self { nu, log_norm })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn method(&self) -> XiMethod {
        if self.nu == 1.0 {
            XiMethod::CauchyClosedForm
        } else {
            XiMethod::NumericCdf
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if x.is_infinite() {
            return 0.5f64.copysign(x);
        }
        match self.method() {
            XiMethod::CauchyClosedForm => x.atan() / std::f64::consts::PI,
            XiMethod::NumericCdf => {
                if x == 0.0 {
                    return 0.0;
                }
                let x2 = x * x;
                // P(|T| < |x|), computed from whichever tail is better conditioned
                let central = if x2 < self.nu {
                    beta_reg(0.5, self.nu / 2.0, x2 / (self.nu + x2))
                } else {
                    1.0 - beta_reg(self.nu / 2.0, 0.5, self.nu / (self.nu + x2))
                };
                (0.5 * central).copysign(x)
            }
        }
    }

    /// `Ξ'_ν(x)`, the Student-t(ν) density.
    pub fn derivative(&self, x: f64) -> f64 {
        (self.log_norm - 0.5 * (self.nu + 1.0) * (x * x / self.nu).ln_1p()).exp()
    }
}

/// `(ℓ_ν, M_ν) = (2Ξ'_ν(0), sup Ξ'_ν) = (2Ξ'_ν(0), Ξ'_ν(0))`.
pub fn xi_constants(nu: f64) -> Result<(f64, f64)> {
    let m = XiFunction::new(nu)?.derivative(0.0);
    Ok((2.0 * m, m))
}

/// Drift and diffusion of one surrogate. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SdeModel {
    pub family: SdeFamily,
    pub algorithm: SdeAlgorithm,
    pub objective: Objective,
    pub clients: Vec<ClientSpec>,
    pub eta: f64,
    omegas: Vec<f64>,
    xis: Vec<XiFunction>,
    deterministic: bool,
}

/// Scratch buffers reused across evaluations.
#[derive(Debug, Clone)]
pub struct SdeWorkspace {
    pub grad: Vec<f64>,
    pub base: Vec<f64>,
    pub curv: Vec<f64>,
    pub diff: Vec<f64>,
    tmp: Vec<f64>,
    hv: Vec<f64>,
}

impl SdeWorkspace {
    pub fn new(d: usize) -> Self {
        Self {
            grad: vec![0.0; d],
            base: vec![0.0; d],
            curv: vec![0.0; d],
            diff: vec![0.0; d],
            tmp: vec![0.0; d],
            hv: vec![0.0; d],
        }
    }
}

pub fn build_sde(
    family: SdeFamily,
    algorithm: SdeAlgorithm,
    objective: Objective,
    clients: Vec<ClientSpec>,
    eta: f64,
) -> Result<SdeModel> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    if clients.is_empty() {
        return Err(Error::invalid("at least one client is required"));
    }
    let d = objective.dim();
    for c in &clients {
        c.noise.validate(d)?;
        c.compressor.validate()?;
    }
    if family != SdeFamily::ClassicFirst && !objective.is_analytic() {
        return Err(Error::unsupported("curvature-corrected drifts need an analytic objective"));
    }
    let mut omegas = Vec::new();
    let mut xis = Vec::new();
    match algorithm {
        SdeAlgorithm::Sgd | SdeAlgorithm::Dcsgd => {
            for c in &clients {
                match c.compressor {
                    CompressorSpec::Sign => {
                        return Err(Error::unsupported("the sign compressor belongs to the DSignSGD model"))
                    }
                    CompressorSpec::RandomSparsify { .. } if algorithm == SdeAlgorithm::Sgd => {
                        return Err(Error::unsupported("the SGD model takes identity compressors"))
                    }
                    _ => omegas.push(omega_of(&c.compressor)?),
                }
                if c.noise.coord_variance(0, 0.0).is_none() {
                    return Err(Error::unsupported("diffusion needs finite noise variance (student-t with nu > 2)"));
                }
            }
        }
        SdeAlgorithm::Dsignsgd => {
            if family == SdeFamily::ClassicSecond {
                return Err(Error::unsupported("no second-order model for DSignSGD"));
            }
            for c in &clients {
                if matches!(c.compressor, CompressorSpec::RandomSparsify { .. }) {
                    return Err(Error::unsupported("DSignSGD does not combine with sparsification"));
                }
                match &c.noise {
                    NoiseSpec::StudentT { nu, .. } => xis.push(XiFunction::new(*nu)?),
                    _ => return Err(Error::unsupported("the DSignSGD model needs student-t noise on every client")),
                }
            }
        }
    }
    let deterministic = algorithm != SdeAlgorithm::Dsignsgd
        && clients.iter().all(|c| c.noise == NoiseSpec::None)
        && omegas.iter().all(|&w| w == 0.0);
    Ok(SdeModel { family, algorithm, objective, clients, eta, omegas, xis, deterministic })
}

impl SdeModel {
    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn n(&self) -> usize {
        self.clients.len()
    }

    /// No diffusion term anywhere (noiseless SGD/DCSGD with identity
    /// compressors).
    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    fn scale(&self, i: usize) -> &[f64] {
        match &self.clients[i].noise {
            NoiseSpec::StudentT { scale, .. } => scale,
            _ => unreachable!("checked at build time"),
        }
    }

    /// Fills `ws.grad`, `ws.base`, `ws.curv` and `ws.diff` at `x`; returns `f(x)`.
    pub fn eval(&self, x: &[f64], ws: &mut SdeWorkspace) -> Result<f64> {
        let loss = self.objective.loss_and_gradient_into(x, &mut ws.grad)?;
        let n = self.n() as f64;
        let eta = self.eta;
        match self.algorithm {
            SdeAlgorithm::Sgd | SdeAlgorithm::Dcsgd => {
                for (b, g) in ws.base.iter_mut().zip(&ws.grad) {
                    *b = -g;
                }
                let sign = match self.family {
                    SdeFamily::ClassicFirst => 0.0,
                    SdeFamily::ClassicSecond => -1.0,
                    SdeFamily::CorrectedFirst => 1.0,
                };
                if sign == 0.0 {
                    ws.curv.iter_mut().for_each(|c| *c = 0.0);
                } else {
                    self.objective.hessian_vec_into(x, &ws.grad, &mut ws.hv)?;
                    for (c, h) in ws.curv.iter_mut().zip(&ws.hv) {
                        *c = sign * 0.5 * eta * h;
                    }
                }
                if self.deterministic {
                    ws.diff.iter_mut().for_each(|s| *s = 0.0);
                } else {
                    let gsq: f64 = ws.grad.iter().map(|g| g * g).sum();
                    for (j, s) in ws.diff.iter_mut().enumerate() {
                        let gj2 = ws.grad[j] * ws.grad[j];
                        let mut acc = 0.0;
                        for (c, w) in self.clients.iter().zip(&self.omegas) {
                            let v = c.noise.coord_variance(j, gsq).expect("checked at build time");
                            acc += w * (gj2 + v) + v;
                        }
                        *s = (eta / n * acc / n).sqrt();
                    }
                }
            }
            SdeAlgorithm::Dsignsgd => {
                ws.base.iter_mut().for_each(|b| *b = 0.0);
                ws.curv.iter_mut().for_each(|c| *c = 0.0);
                // ws.diff accumulates Σ Ξ² before the square root
                ws.diff.iter_mut().for_each(|s| *s = 0.0);
                let corrected = self.family == SdeFamily::CorrectedFirst;
                for (i, xi) in self.xis.iter().enumerate() {
                    let scale = self.scale(i);
                    for j in 0..ws.grad.len() {
                        let u = ws.grad[j] / scale[j];
                        let v = xi.value(u);
                        ws.base[j] -= 2.0 / n * v;
                        ws.diff[j] += v * v;
                        if corrected {
                            ws.tmp[j] = xi.derivative(u) * v;
                        }
                    }
                    if corrected {
                        self.objective.hessian_vec_into(x, &ws.tmp, &mut ws.hv)?;
                        for j in 0..ws.grad.len() {
                            ws.curv[j] += eta / n * ws.hv[j] / scale[j];
                        }
                    }
                }
                for s in ws.diff.iter_mut() {
                    let var = 1.0 - 4.0 / n * *s;
                    assert!(var >= -1e-12, "sign-model diffusion must be nonnegative, got {var}");
                    *s = (eta / n * var.max(0.0)).sqrt();
                }
            }
        }
        Ok(loss)
    }

    /// First-order drift `b(x)` and curvature term `c(x)`.
    pub fn drift_terms(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        let mut ws = SdeWorkspace::new(self.dim());
        self.eval(x, &mut ws)?;
        Ok((ws.base, ws.curv))
    }

    /// Full drift `b(x) + c(x)` at unit scheduler rate.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (mut b, c) = self.drift_terms(x)?;
        for (bi, ci) in b.iter_mut().zip(&c) {
            *bi += ci;
        }
        Ok(b)
    }

    pub fn diffusion_diag(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut ws = SdeWorkspace::new(self.dim());
        self.eval(x, &mut ws)?;
        Ok(ws.diff)
    }
}

/// Integration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    pub dt: f64,
    pub t_end: f64,
    pub record_stride: usize,
    pub divergence_threshold: f64,
}

impl IntegrateOptions {
    pub fn new(dt: f64, t_end: f64) -> Self {
        Self { dt, t_end, record_stride: 1, divergence_threshold: 1e12 }
    }

    /// `dt = η/50`.
    pub fn default_for(eta: f64, t_end: f64) -> Self {
        Self::new(eta / 50.0, t_end)
    }

    /// Number of steps and the step that lands exactly on `t_end`.
    pub fn steps(&self) -> (usize, f64) {
        let n = (self.t_end / self.dt).round().max(1.0) as usize;
        (n, self.t_end / n as f64)
    }
}

/// Euler–Maruyama stepper with preallocated buffers.
#[derive(Debug, Clone)]
pub struct EulerMaruyama<'a> {
    model: &'a SdeModel,
    scheduler: &'a SchedulerSpec,
    opts: IntegrateOptions,
    ws: SdeWorkspace,
}

impl<'a> EulerMaruyama<'a> {
    pub fn new(model: &'a SdeModel, scheduler: &'a SchedulerSpec, opts: IntegrateOptions) -> Result<Self> {
        scheduler.validate()?;
        if !(opts.dt > 0.0 && opts.t_end > 0.0) {
            return Err(Error::invalid("dt and T must be positive"));
        }
        if opts.dt > model.eta / 10.0 * (1.0 + 1e-12) {
            return Err(Error::invalid(format!("dt = {} exceeds eta/10 = {}", opts.dt, model.eta / 10.0)));
        }
        if opts.record_stride == 0 {
            return Err(Error::invalid("record stride must be positive"));
        }
        Ok(Self { model, scheduler, opts, ws: SdeWorkspace::new(model.dim()) })
    }

    /// Integrates `x` in place to `T`, calling `observe(step, t, loss, grad, lr_eff)`
    /// at step 0 and after every step.
    pub fn run<R: Rng + ?Sized>(
        &mut self,
        x: &mut [f64],
        rng: &mut R,
        mut observe: impl FnMut(usize, f64, f64, &[f64], f64),
    ) -> Result<RunStatus> {
        check_dim(self.model.dim(), x.len())?;
        let (n, dt) = self.opts.steps();
        let sqdt = dt.sqrt();
        let eta = self.model.eta;
        let noisy = !self.model.is_deterministic();
        let mut loss = self.model.eval(x, &mut self.ws)?;
        let mut t = 0.0;
        for k in 0..=n {
            let gnorm = self.ws.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let rate = self.scheduler.rate(t, gnorm);
            observe(k, t, loss, &self.ws.grad, eta * rate);
            if is_diverged(x, loss, self.opts.divergence_threshold) {
                return Ok(RunStatus::Diverged { step: k });
            }
            if k == n {
                break;
            }
            let r2 = rate * rate;
            for j in 0..x.len() {
                let mut dx = (rate * self.ws.base[j] + r2 * self.ws.curv[j]) * dt;
                if noisy {
                    let z: f64 = rng.sample(StandardNormal);
                    dx += rate * self.ws.diff[j] * z * sqdt;
                }
                x[j] += dx;
            }
            t = (k + 1) as f64 * dt;
            loss = if x.iter().all(|v| v.is_finite()) {
                self.model.eval(x, &mut self.ws)?
            } else {
                f64::NAN
            };
        }
        Ok(RunStatus::Completed)
    }
}

/// Integrates one trajectory from `x0` to `T`, recording every
/// `record_stride` steps and the final state.
pub fn integrate<R: Rng + ?Sized>(
    model: &SdeModel,
    x0: &[f64],
    scheduler: &SchedulerSpec,
    opts: IntegrateOptions,
    run_id: u64,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    let mut em = EulerMaruyama::new(model, scheduler, opts)?;
    let mut x = x0.to_vec();
    let mut points = Vec::new();
    let (n, _) = opts.steps();
    let stride = opts.record_stride;
    let mut last: Option<TrajectoryPoint> = None;
    let status = em.run(&mut x, rng, |k, t, loss, grad, lr| {
        let gsq: f64 = grad.iter().map(|g| g * g).sum();
        let p = TrajectoryPoint { step: k, time: t, loss, grad_norm_sq: gsq, lr_eff: lr, g_hat: gsq.sqrt() };
        if k % stride == 0 || k == n {
            points.push(p);
        }
        last = Some(p);
    })?;
    if let (RunStatus::Diverged { .. }, Some(p)) = (status, last) {
        if points.last().map(|q| q.step) != Some(p.step) {
            points.push(p);
        }
    }
    Ok(TrajectoryRecord { run_id, points, status, final_x: x })
}
