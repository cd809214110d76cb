//! Gradient compressors.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompressorSpec {
    Identity,
    /// Drop each coordinate with probability `p`, rescale survivors by `1/(1−p)`.
    RandomSparsify { p: f64 },
    Sign,
}

impl CompressorSpec {
    /// Random sparsifier with compression rate `omega`, i.e. `p = ω/(1+ω)`.
    pub fn sparsify_with_omega(omega: f64) -> Self {
        CompressorSpec::RandomSparsify { p: omega / (1.0 + omega) }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CompressorSpec::RandomSparsify { p } if !(0.0..1.0).contains(&p) => {
                Err(Error::invalid(format!("sparsification probability must lie in [0, 1), got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn compress<R: Rng + ?Sized>(&self, v: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.validate()?;
        let mut out = v.to_vec();
        self.compress_in_place(&mut out, rng);
        Ok(out)
    }

    /// Assumes the spec was validated.
    pub fn compress_in_place<R: Rng + ?Sized>(&self, v: &mut [f64], rng: &mut R) {
        match *self {
            CompressorSpec::Identity => {}
            CompressorSpec::RandomSparsify { p } => {
                let keep = 1.0 - p;
                let scale = 1.0 / keep;
                for x in v.iter_mut() {
                    if rng.random::<f64>() < keep {
                        *x *= scale;
                    } else {
                        *x = 0.0;
                    }
                }
            }
            CompressorSpec::Sign => {
                for x in v.iter_mut() {
                    *x = sign(*x);
                }
            }
        }
    }
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn omega_of(spec: &CompressorSpec) -> Result<f64> {
    spec.validate()?;
    match *spec {
        CompressorSpec::Identity => Ok(0.0),
        CompressorSpec::RandomSparsify { p } => Ok(p / (1.0 - p)),
        CompressorSpec::Sign => Err(Error::unsupported("the sign map is biased and has no compression rate")),
    }
}
