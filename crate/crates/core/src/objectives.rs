//! Differentiable test objectives.
//!
//! All objectives are lower bounded by zero. The analytic kinds expose exact
//! gradients and Hessian-vector products; the MLP regression problem uses
//! reverse-mode differentiation of the full-batch mean squared error and a
//! central finite difference of that gradient for Hessian-vector products.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, Purpose};

/// Which objective to build, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveKind {
    /// `f(x) = λ‖x‖²/2` in `dim` dimensions.
    Quadratic { lambda: f64, dim: usize },
    /// `f(x) = x⁴/4`.
    Quartic1D,
    /// `f(x) = Σ x_j⁴/4`.
    QuarticSum { dim: usize },
    /// One-hidden-layer ReLU network on a synthetic teacher dataset.
    MlpRegression { seed: u64 },
}

/// A built objective. Cheap to clone; the MLP dataset is shared.
#[derive(Clone)]
pub enum Objective {
    Quadratic { lambda: f64, dim: usize },
    Quartic1D,
    QuarticSum { dim: usize },
    Mlp(Arc<MlpProblem>),
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Quadratic { lambda, dim } => {
                write!(f, "Quadratic(lambda={lambda}, dim={dim})")
            }
            Objective::Quartic1D => write!(f, "Quartic1D"),
            Objective::QuarticSum { dim } => write!(f, "QuarticSum(dim={dim})"),
            Objective::Mlp(p) => write!(f, "MlpRegression(seed={})", p.seed),
        }
    }
}

/// Analytic `(L0, L1)` smoothness constants, when known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothness {
    pub l0: f64,
    pub l1: f64,
}

impl Objective {
    pub fn build(kind: &ObjectiveKind) -> Result<Self> {
        match *kind {
            ObjectiveKind::Quadratic { lambda, dim } => {
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return Err(Error::invalid(format!("quadratic lambda must be positive, got {lambda}")));
                }
                if dim == 0 {
                    return Err(Error::invalid("objective dimension must be positive"));
                }
                Ok(Objective::Quadratic { lambda, dim })
            }
            ObjectiveKind::Quartic1D => Ok(Objective::Quartic1D),
            ObjectiveKind::QuarticSum { dim } => {
                if dim == 0 {
                    return Err(Error::invalid("objective dimension must be positive"));
                }
                Ok(Objective::QuarticSum { dim })
            }
            ObjectiveKind::MlpRegression { seed } => Ok(Objective::Mlp(Arc::new(MlpProblem::generate(seed)))),
        }
    }

    pub fn quadratic(lambda: f64) -> Self {
        Objective::Quadratic { lambda, dim: 1 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic { dim, .. } => *dim,
            Objective::Quartic1D => 1,
            Objective::QuarticSum { dim } => *dim,
            Objective::Mlp(_) => MlpProblem::PARAMS,
        }
    }

    pub fn is_analytic(&self) -> bool {
        !matches!(self, Objective::Mlp(_))
    }

    /// Known minimum value, used as `f(x*)`.
    pub fn known_minimum(&self) -> Option<f64> {
        if self.is_analytic() {
            Some(0.0)
        } else {
            None
        }
    }

    /// Quadratic stores `(λ, 0)`. The quartics are not globally
    /// `(L0, L1)`-smooth with a useful constant pair and the MLP constants
    /// are unknown, so those report `None`.
    pub fn smoothness(&self) -> Option<Smoothness> {
        match self {
            Objective::Quadratic { lambda, .. } => Some(Smoothness { l0: *lambda, l1: 0.0 }),
            _ => None,
        }
    }

    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(match self {
            Objective::Quadratic { lambda, .. } => 0.5 * lambda * x.iter().map(|v| v * v).sum::<f64>(),
            Objective::Quartic1D | Objective::QuarticSum { .. } => {
                x.iter().map(|v| (v * v) * (v * v)).sum::<f64>() / 4.0
            }
            Objective::Mlp(p) => p.loss(x),
        })
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.gradient_into(x, &mut out)?;
        Ok(out)
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), out.len())?;
        match self {
            Objective::Quadratic { lambda, .. } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = lambda * v;
                }
            }
            Objective::Quartic1D | Objective::QuarticSum { .. } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v * v * v;
                }
            }
            Objective::Mlp(p) => {
                p.loss_and_gradient(x, out);
            }
        }
        Ok(())
    }

    /// Loss and gradient in one pass.
    pub fn loss_and_gradient_into(&self, x: &[f64], out: &mut [f64]) -> Result<f64> {
        match self {
            Objective::Mlp(p) => {
                check_dim(self.dim(), x.len())?;
                check_dim(self.dim(), out.len())?;
                Ok(p.loss_and_gradient(x, out))
            }
            _ => {
                self.gradient_into(x, out)?;
                self.loss(x)
            }
        }
    }

    pub fn hessian_vec(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.hessian_vec_into(x, v, &mut out)?;
        Ok(out)
    }

    pub fn hessian_vec_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), v.len())?;
        check_dim(self.dim(), out.len())?;
        match self {
            Objective::Quadratic { lambda, .. } => {
                for (o, vi) in out.iter_mut().zip(v) {
                    *o = lambda * vi;
                }
            }
            Objective::Quartic1D | Objective::QuarticSum { .. } => {
                for ((o, xi), vi) in out.iter_mut().zip(x).zip(v) {
                    *o = 3.0 * xi * xi * vi;
                }
            }
            Objective::Mlp(p) => {
                // central difference of the exact gradient along v
                let xnorm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                let h = 1e-5 * xnorm.max(1.0);
                let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
                let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
                let mut gp = vec![0.0; x.len()];
                let mut gm = vec![0.0; x.len()];
                p.loss_and_gradient(&plus, &mut gp);
                p.loss_and_gradient(&minus, &mut gm);
                for ((o, a), b) in out.iter_mut().zip(&gp).zip(&gm) {
                    *o = (a - b) / (2.0 * h);
                }
            }
        }
        Ok(())
    }

    /// Default starting point: all ones for analytic objectives, the
    /// layer-wise uniform initialisation for the MLP (keyed by `seed`/`run`).
    pub fn default_init(&self, seed: u64, run: u64) -> Vec<f64> {
        match self {
            Objective::Mlp(p) => p.init_params(seed, run),
            _ => vec![1.0; self.dim()],
        }
    }
}

/// Regression problem for a 20-64-1 ReLU network with a linear teacher.
///
/// Parameter layout (flattened): `W1` (64×20, row-major), `b1` (64),
/// `W2` (64), `b2` (1).
#[derive(Debug, Clone)]
pub struct MlpProblem {
    pub seed: u64,
    /// `SAMPLES × INPUTS`, row-major.
    pub inputs: Vec<f64>,
    pub labels: Vec<f64>,
    pub teacher: Vec<f64>,
}

impl MlpProblem {
    pub const INPUTS: usize = 20;
    pub const HIDDEN: usize = 64;
    pub const SAMPLES: usize = 4096;
    pub const LABEL_NOISE_STD: f64 = 0.1;
    pub const PARAMS: usize = Self::HIDDEN * Self::INPUTS + Self::HIDDEN + Self::HIDDEN + 1;

    const W1: usize = 0;
    const B1: usize = Self::HIDDEN * Self::INPUTS;
    const W2: usize = Self::B1 + Self::HIDDEN;
    const B2: usize = Self::W2 + Self::HIDDEN;

    /// Draws the teacher, inputs and labels from the dataset stream of `seed`.
    pub fn generate(seed: u64) -> Self {
        let mut rng = stream(seed, 0, 0, 0, Purpose::Dataset);
        let teacher: Vec<f64> = (0..Self::INPUTS).map(|_| rng.sample(StandardNormal)).collect();
        let inputs: Vec<f64> = (0..Self::SAMPLES * Self::INPUTS).map(|_| rng.sample(StandardNormal)).collect();
        let labels = inputs
            .chunks_exact(Self::INPUTS)
            .map(|row| {
                let clean: f64 = row.iter().zip(&teacher).map(|(a, b)| a * b).sum();
                let eps: f64 = rng.sample(StandardNormal);
                clean + Self::LABEL_NOISE_STD * eps
            })
            .collect();
        Self { seed, inputs, labels, teacher }
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` per layer.
    pub fn init_params(&self, seed: u64, run: u64) -> Vec<f64> {
        let mut rng = stream(seed, run, 0, 0, Purpose::Init);
        let b_in = 1.0 / (Self::INPUTS as f64).sqrt();
        let b_hid = 1.0 / (Self::HIDDEN as f64).sqrt();
        (0..Self::PARAMS)
            .map(|i| {
                let bound = if i < Self::W2 { b_in } else { b_hid };
                rng.random_range(-bound..bound)
            })
            .collect()
    }

    fn hidden_pre(&self, w: &[f64], row: &[f64], out: &mut [f64; Self::HIDDEN]) {
        let w1 = &w[Self::W1..Self::B1];
        let b1 = &w[Self::B1..Self::W2];
        for (h, o) in out.iter_mut().enumerate() {
            let wr = &w1[h * Self::INPUTS..(h + 1) * Self::INPUTS];
            *o = b1[h] + wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        let w2 = &w[Self::W2..Self::B2];
        let b2 = w[Self::B2];
        let mut z = [0.0; Self::HIDDEN];
        let mut total = 0.0;
        for (row, y) in self.inputs.chunks_exact(Self::INPUTS).zip(&self.labels) {
            self.hidden_pre(w, row, &mut z);
            let out = b2 + z.iter().zip(w2).map(|(zi, a)| zi.max(0.0) * a).sum::<f64>();
            let r = out - y;
            total += r * r;
        }
        total / Self::SAMPLES as f64
    }

    /// Full-batch loss and exact gradient (ReLU derivative at 0 taken as 0).
    pub fn loss_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = Self::SAMPLES as f64;
        let w2: [f64; Self::HIDDEN] = w[Self::W2..Self::B2].try_into().expect("layout");
        let b2 = w[Self::B2];
        let mut z = [0.0; Self::HIDDEN];
        let mut gw2 = [0.0; Self::HIDDEN];
        let mut gb1 = [0.0; Self::HIDDEN];
        let mut gb2 = 0.0;
        let mut total = 0.0;
        let (gw1, _) = grad.split_at_mut(Self::B1);
        for (row, y) in self.inputs.chunks_exact(Self::INPUTS).zip(&self.labels) {
            self.hidden_pre(w, row, &mut z);
            let out = b2 + z.iter().zip(&w2).map(|(zi, a)| zi.max(0.0) * a).sum::<f64>();
            let r = out - y;
            total += r * r;
            let dout = 2.0 * r / n;
            gb2 += dout;
            for h in 0..Self::HIDDEN {
                if z[h] > 0.0 {
                    gw2[h] += dout * z[h];
                    let dz = dout * w2[h];
                    gb1[h] += dz;
                    let g = &mut gw1[h * Self::INPUTS..(h + 1) * Self::INPUTS];
                    for (gi, xi) in g.iter_mut().zip(row) {
                        *gi += dz * xi;
                    }
                }
            }
        }
        grad[Self::B1..Self::W2].copy_from_slice(&gb1);
        grad[Self::W2..Self::B2].copy_from_slice(&gw2);
        grad[Self::B2] = gb2;
        total / n
    }
}
