//! Per-client gradient noise laws.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    None,
    /// Diagonal Gaussian with per-coordinate variance `σ0² + σ1²‖g‖²`.
    GaussianAffine { sigma0: f64, sigma1: f64 },
    /// `diag(scale) · Z`, `Z` i.i.d. Student-t(ν) per coordinate.
    StudentT { nu: f64, scale: Vec<f64> },
}

impl NoiseSpec {
    pub fn gaussian(sigma0: f64, sigma1: f64) -> Self {
        NoiseSpec::GaussianAffine { sigma0, sigma1 }
    }

    /// Student-t with the same scale on every one of `d` coordinates.
    pub fn student_t(nu: f64, scale: f64, d: usize) -> Self {
        NoiseSpec::StudentT { nu, scale: vec![scale; d] }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::GaussianAffine { sigma0, sigma1 } => {
                if !(*sigma0 >= 0.0 && sigma0.is_finite() && *sigma1 >= 0.0 && sigma1.is_finite()) {
                    return Err(Error::invalid(format!("noise sigmas must be nonnegative, got ({sigma0}, {sigma1})")));
                }
                Ok(())
            }
            NoiseSpec::StudentT { nu, scale } => {
                if !(*nu > 0.0 && nu.is_finite()) {
                    return Err(Error::invalid(format!("degrees of freedom must be positive, got {nu}")));
                }
                check_dim(d, scale.len())?;
                if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return Err(Error::invalid("student-t scale entries must be positive"));
                }
                Ok(())
            }
        }
    }

    /// Per-coordinate variance of the noise at a point with gradient norm
    /// squared `grad_norm_sq`. `None` when the variance does not exist
    /// (Student-t with ν ≤ 2).
    pub fn coord_variance(&self, j: usize, grad_norm_sq: f64) -> Option<f64> {
        match self {
            NoiseSpec::None => Some(0.0),
            NoiseSpec::GaussianAffine { sigma0, sigma1 } => Some(sigma0 * sigma0 + sigma1 * sigma1 * grad_norm_sq),
            NoiseSpec::StudentT { nu, scale } => {
                if *nu > 2.0 {
                    Some(scale[j] * scale[j] * nu / (nu - 2.0))
                } else {
                    None
                }
            }
        }
    }

    /// Largest coordinate scale of a Student-t law.
    pub fn sigma_max(&self) -> Option<f64> {
        match self {
            NoiseSpec::StudentT { scale, .. } => Some(scale.iter().copied().fold(0.0, f64::max)),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, g: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mut out = vec![0.0; g.len()];
        self.validate(g.len())?;
        self.sample_into(g, rng, &mut out);
        Ok(out)
    }

    /// Writes one draw into `out`. Assumes the spec was validated for
    /// `g.len()` dimensions.
    pub fn sample_into<R: Rng + ?Sized>(&self, g: &[f64], rng: &mut R, out: &mut [f64]) {
        match self {
            NoiseSpec::None => out.iter_mut().for_each(|o| *o = 0.0),
            NoiseSpec::GaussianAffine { sigma0, sigma1 } => {
                let gsq: f64 = if *sigma1 == 0.0 { 0.0 } else { g.iter().map(|v| v * v).sum() };
                let std = (sigma0 * sigma0 + sigma1 * sigma1 * gsq).sqrt();
                for o in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = std * z;
                }
            }
            NoiseSpec::StudentT { nu, scale } => {
                let sampler = StudentTSampler::new(*nu);
                for (o, s) in out.iter_mut().zip(scale) {
                    *o = s * sampler.sample(rng);
                }
            }
        }
    }
}

/// Student-t(ν) by the ratio `z / √(χ²_ν / ν)`.
#[derive(Debug, Clone)]
pub struct StudentTSampler {
    nu: f64,
    chi: ChiSource,
}

#[derive(Debug, Clone)]
enum ChiSource {
    SumOfSquares(u32),
    Gamma(ChiSquared<f64>),
}

impl StudentTSampler {
    pub fn new(nu: f64) -> Self {
        let chi = if nu.fract() == 0.0 && (1.0..=4.0).contains(&nu) {
            ChiSource::SumOfSquares(nu as u32)
        } else {
            ChiSource::Gamma(ChiSquared::new(nu).expect("positive degrees of freedom"))
        };
        Self { nu, chi }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        let chi2 = match &self.chi {
            ChiSource::SumOfSquares(k) => (0..*k)
                .map(|_| {
                    let w: f64 = rng.sample(StandardNormal);
                    w * w
                })
                .sum(),
            ChiSource::Gamma(c) => c.sample(rng),
        };
        student_t_from(z, chi2, self.nu)
    }
}

#[inline]
pub fn student_t_from(z: f64, chi2: f64, nu: f64) -> f64 {
    z / (chi2 / nu).sqrt()
}

/// Client averages `(σ0²bar, σ1²bar)`.
pub fn affine_variance_params(specs: &[NoiseSpec]) -> Result<(f64, f64)> {
    if specs.is_empty() {
        return Err(Error::invalid("at least one client is required"));
    }
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    for s in specs {
        match s {
            NoiseSpec::None => {}
            NoiseSpec::GaussianAffine { sigma0, sigma1 } => {
                s0 += sigma0 * sigma0;
                s1 += sigma1 * sigma1;
            }
            NoiseSpec::StudentT { .. } => {
                return Err(Error::unsupported("affine variance parameters are undefined for student-t noise"))
            }
        }
    }
    let n = specs.len() as f64;
    Ok((s0 / n, s1 / n))
}

/// Harmonic mean `N / Σ 1/σ_max,i` of the clients' largest scales.
pub fn harmonic_mean_scale(specs: &[NoiseSpec]) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::invalid("at least one client is required"));
    }
    let mut acc = 0.0;
    for s in specs {
        let m = s
            .sigma_max()
            .ok_or_else(|| Error::unsupported("harmonic mean scale needs student-t noise on every client"))?;
        if m <= 0.0 {
            return Err(Error::invalid("student-t scale must be positive"));
        }
        acc += 1.0 / m;
    }
    Ok(specs.len() as f64 / acc)
}
