//! Discrete distributed optimizers over `N` simulated clients.
//!
//! At step `k` client `i` forms `∇f(x_k) + Z_i` from its noise stream
//! `(seed, run, i, k, Noise)`, compresses it with the mask stream
//! `(seed, run, i, k, Compression)`, and the server averages the messages
//! in client order.

use rayon::prelude::*;

use crate::clients::ClientSpec;
use crate::compressors::{sign, CompressorSpec};
use crate::error::{check_dim, Error, Result};
use crate::noise::NoiseSpec;
use crate::objectives::Objective;
use crate::rng::{stream, Purpose};
use crate::schedulers::SchedulerSpec;
use crate::trajectory::{is_diverged, RunStatus, TrajectoryPoint, TrajectoryRecord};

/// Added to the norm in the normalized update.
pub const NORMALIZATION_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Dsgd,
    Dcsgd,
    DsignSgd,
    NormalizedDcsgd,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Dsgd => "dsgd",
            Algorithm::Dcsgd => "dcsgd",
            Algorithm::DsignSgd => "dsignsgd",
            Algorithm::NormalizedDcsgd => "normalized-dcsgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitPoint {
    /// All ones for analytic objectives, layer-wise uniform for the MLP.
    Default,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub objective: Objective,
    pub clients: Vec<ClientSpec>,
    pub scheduler: SchedulerSpec,
    pub steps: usize,
    pub seed: u64,
    pub divergence_threshold: f64,
    pub record_stride: usize,
    pub x0: InitPoint,
}

impl RunConfig {
    pub fn new(objective: Objective, clients: Vec<ClientSpec>, scheduler: SchedulerSpec, steps: usize) -> Self {
        Self {
            objective,
            clients,
            scheduler,
            steps,
            seed: 0,
            divergence_threshold: 1e12,
            record_stride: 1,
            x0: InitPoint::Default,
        }
    }

    pub fn n(&self) -> usize {
        self.clients.len()
    }

    pub fn eta(&self) -> f64 {
        self.scheduler.eta
    }

    pub fn initial_point(&self, run: u64) -> Vec<f64> {
        match &self.x0 {
            InitPoint::Default => self.objective.default_init(self.seed, run),
            InitPoint::Fixed(x) => x.clone(),
        }
    }

    pub fn validate(&self, alg: Algorithm) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config("at least one client is required".into()));
        }
        if self.record_stride == 0 {
            return Err(Error::Config("record stride must be positive".into()));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::Config("divergence threshold must be positive".into()));
        }
        self.scheduler.validate()?;
        let d = self.objective.dim();
        if let InitPoint::Fixed(x) = &self.x0 {
            check_dim(d, x.len())?;
        }
        for c in &self.clients {
            c.noise.validate(d)?;
            c.compressor.validate()?;
            let ok = match (alg, c.compressor) {
                (Algorithm::Dsgd, CompressorSpec::Identity) => true,
                (Algorithm::Dsgd, _) => false,
                (Algorithm::Dcsgd | Algorithm::NormalizedDcsgd, CompressorSpec::Sign) => false,
                (Algorithm::DsignSgd, CompressorSpec::RandomSparsify { .. }) => false,
                _ => true,
            };
            if !ok {
                return Err(Error::Config(format!("compressor {:?} is not valid for {}", c.compressor, alg.name())));
            }
        }
        Ok(())
    }
}

/// Server-side scalar: mean of the clients' gradient-estimate norms.
pub fn aggregate_norm_estimate(client_grads: &[Vec<f64>]) -> f64 {
    if client_grads.is_empty() {
        return 0.0;
    }
    let sum: f64 = client_grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
    sum / client_grads.len() as f64
}

/// Side information of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub g_hat: f64,
    pub lr_eff: f64,
}

/// Reusable per-run state for the step functions.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    cfg: &'a RunConfig,
    alg: Algorithm,
    run: u64,
    local: Vec<f64>,
    noise: Vec<f64>,
    agg: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(cfg: &'a RunConfig, alg: Algorithm, run: u64) -> Result<Self> {
        cfg.validate(alg)?;
        let d = cfg.objective.dim();
        Ok(Self { cfg, alg, run, local: vec![0.0; d], noise: vec![0.0; d], agg: vec![0.0; d] })
    }

    /// Collects and aggregates the client messages for step `k` at a point
    /// with exact gradient `grad`; returns the step's side information.
    pub fn prepare(&mut self, grad: &[f64], k: usize) -> StepInfo {
        let cfg = self.cfg;
        let n = cfg.n() as f64;
        self.agg.iter_mut().for_each(|a| *a = 0.0);
        let mut norm_sum = 0.0;
        for (i, c) in cfg.clients.iter().enumerate() {
            self.local.copy_from_slice(grad);
            if c.noise != NoiseSpec::None {
                let mut rng = stream(cfg.seed, self.run, i as u64, k as u64, Purpose::Noise);
                c.noise.sample_into(grad, &mut rng, &mut self.noise);
                for (l, z) in self.local.iter_mut().zip(&self.noise) {
                    *l += z;
                }
            }
            norm_sum += self.local.iter().map(|v| v * v).sum::<f64>().sqrt();
            match (self.alg, c.compressor) {
                (Algorithm::DsignSgd, _) => {
                    for (a, v) in self.agg.iter_mut().zip(&self.local) {
                        *a += sign(*v);
                    }
                }
                (_, CompressorSpec::RandomSparsify { .. }) => {
                    let mut rng = stream(cfg.seed, self.run, i as u64, k as u64, Purpose::Compression);
                    c.compressor.compress_in_place(&mut self.local, &mut rng);
                    for (a, v) in self.agg.iter_mut().zip(&self.local) {
                        *a += v;
                    }
                }
                _ => {
                    for (a, v) in self.agg.iter_mut().zip(&self.local) {
                        *a += v;
                    }
                }
            }
        }
        self.agg.iter_mut().for_each(|a| *a /= n);
        let g_hat = norm_sum / n;
        let lr_eff = cfg.scheduler.effective_lr(k as f64, g_hat);
        StepInfo { g_hat, lr_eff }
    }

    /// Applies the aggregate prepared by the last `prepare` call.
    pub fn apply(&self, x: &mut [f64], info: StepInfo) {
        let lr = info.lr_eff;
        match self.alg {
            Algorithm::NormalizedDcsgd => {
                let norm = self.agg.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = lr / (norm + NORMALIZATION_EPS);
                for (xi, a) in x.iter_mut().zip(&self.agg) {
                    *xi -= s * a;
                }
            }
            _ => {
                for (xi, a) in x.iter_mut().zip(&self.agg) {
                    *xi -= lr * a;
                }
            }
        }
    }

    /// The averaged message of the last `prepare` call.
    pub fn aggregate(&self) -> &[f64] {
        &self.agg
    }
}

/// One step of `alg` from `x` at step index `k` of run `run`.
pub fn step(alg: Algorithm, cfg: &RunConfig, x: &[f64], k: usize, run: u64) -> Result<(Vec<f64>, StepInfo)> {
    check_dim(cfg.objective.dim(), x.len())?;
    let mut st = Stepper::new(cfg, alg, run)?;
    let grad = cfg.objective.gradient(x)?;
    let info = st.prepare(&grad, k);
    let mut out = x.to_vec();
    st.apply(&mut out, info);
    Ok((out, info))
}

pub fn step_dcsgd(x: &[f64], cfg: &RunConfig, k: usize, run: u64) -> Result<Vec<f64>> {
    step(Algorithm::Dcsgd, cfg, x, k, run).map(|r| r.0)
}

pub fn step_dsignsgd(x: &[f64], cfg: &RunConfig, k: usize, run: u64) -> Result<Vec<f64>> {
    step(Algorithm::DsignSgd, cfg, x, k, run).map(|r| r.0)
}

pub fn step_normalized_dcsgd(x: &[f64], cfg: &RunConfig, k: usize, run: u64) -> Result<Vec<f64>> {
    step(Algorithm::NormalizedDcsgd, cfg, x, k, run).map(|r| r.0)
}

/// Runs `cfg.steps` steps, passing every point (recorded or not) to
/// `observe`. Returns the terminal status and the final iterate.
pub fn run_observed(
    cfg: &RunConfig,
    alg: Algorithm,
    run: u64,
    mut observe: impl FnMut(&TrajectoryPoint),
) -> Result<(RunStatus, Vec<f64>)> {
    let mut st = Stepper::new(cfg, alg, run)?;
    let mut x = cfg.initial_point(run);
    let mut grad = vec![0.0; x.len()];
    let eta = cfg.eta();
    for k in 0..=cfg.steps {
        let loss = cfg.objective.loss_and_gradient_into(&x, &mut grad)?;
        let diverged = is_diverged(&x, loss, cfg.divergence_threshold) || grad.iter().any(|g| !g.is_finite());
        let info = if diverged { StepInfo { g_hat: f64::NAN, lr_eff: f64::NAN } } else { st.prepare(&grad, k) };
        let point = TrajectoryPoint {
            step: k,
            time: k as f64 * eta,
            loss,
            grad_norm_sq: grad.iter().map(|g| g * g).sum(),
            lr_eff: info.lr_eff,
            g_hat: info.g_hat,
        };
        observe(&point);
        if diverged {
            return Ok((RunStatus::Diverged { step: k }, x));
        }
        if k < cfg.steps {
            st.apply(&mut x, info);
        }
    }
    Ok((RunStatus::Completed, x))
}

/// Runs one seeded trajectory, recording every `record_stride` steps, the
/// last step, and the divergence step if any.
pub fn run_with_id(cfg: &RunConfig, alg: Algorithm, run: u64) -> Result<TrajectoryRecord> {
    let stride = cfg.record_stride;
    let last = cfg.steps;
    let mut points = Vec::new();
    let mut pending = None;
    let (status, final_x) = run_observed(cfg, alg, run, |p| {
        if p.step % stride == 0 || p.step == last {
            points.push(*p);
            pending = None;
        } else {
            pending = Some(*p);
        }
    })?;
    if let (RunStatus::Diverged { .. }, Some(p)) = (status, pending) {
        points.push(p);
    }
    Ok(TrajectoryRecord { run_id: run, points, status, final_x })
}

pub fn run(cfg: &RunConfig, alg: Algorithm) -> Result<TrajectoryRecord> {
    run_with_id(cfg, alg, 0)
}

/// Independent runs `0..runs` in parallel, returned in run order.
pub fn ensemble(cfg: &RunConfig, alg: Algorithm, runs: usize) -> Result<Vec<TrajectoryRecord>> {
    cfg.validate(alg)?;
    (0..runs as u64).into_par_iter().map(|r| run_with_id(cfg, alg, r)).collect()
}
