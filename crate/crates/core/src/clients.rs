//! Client descriptions and the client-averaged constants used by the
//! stepsize constraints and bounds.

use crate::compressors::{omega_of, CompressorSpec};
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpec {
    pub noise: NoiseSpec,
    pub compressor: CompressorSpec,
}

impl ClientSpec {
    pub fn new(noise: NoiseSpec, compressor: CompressorSpec) -> Self {
        Self { noise, compressor }
    }
}

/// `n` identical clients.
pub fn homogeneous(n: usize, noise: NoiseSpec, compressor: CompressorSpec) -> Vec<ClientSpec> {
    vec![ClientSpec::new(noise, compressor); n]
}

/// Client averages: `σ0²bar`, `σ1²bar`, `ω̄`, `(σ0²ω)bar`, `(σ1²ω)bar`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClientSummary {
    pub n: usize,
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
    pub omega: f64,
    pub sigma0_sq_omega: f64,
    pub sigma1_sq_omega: f64,
}

impl ClientSummary {
    pub fn noiseless(n: usize) -> Self {
        Self { n, ..Default::default() }
    }

    pub fn from_clients(clients: &[ClientSpec]) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("at least one client is required"));
        }
        let mut s = Self::noiseless(clients.len());
        for c in clients {
            let (s0, s1) = match c.noise {
                NoiseSpec::None => (0.0, 0.0),
                NoiseSpec::GaussianAffine { sigma0, sigma1 } => (sigma0 * sigma0, sigma1 * sigma1),
                NoiseSpec::StudentT { .. } => {
                    return Err(Error::unsupported("affine summary requires gaussian or no noise"));
                }
            };
            let w = omega_of(&c.compressor)?;
            s.sigma0_sq += s0;
            s.sigma1_sq += s1;
            s.omega += w;
            s.sigma0_sq_omega += s0 * w;
            s.sigma1_sq_omega += s1 * w;
        }
        let n = clients.len() as f64;
        s.sigma0_sq /= n;
        s.sigma1_sq /= n;
        s.omega /= n;
        s.sigma0_sq_omega /= n;
        s.sigma1_sq_omega /= n;
        Ok(s)
    }

    /// `ω̄ + d(σ1²ω̄ + σ1²bar)`.
    pub fn a_term(&self, d: usize) -> f64 {
        self.omega + d as f64 * (self.sigma1_sq_omega + self.sigma1_sq)
    }

    /// `σ0²bar + σ0²ω̄`.
    pub fn b_term(&self) -> f64 {
        self.sigma0_sq + self.sigma0_sq_omega
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn summary_averages() {
        let clients = vec![
            ClientSpec::new(NoiseSpec::gaussian(1.0, 0.0), CompressorSpec::Identity),
            ClientSpec::new(NoiseSpec::gaussian(3.0, 0.5), CompressorSpec::RandomSparsify { p: 0.5 }),
        ];
        let s = ClientSummary::from_clients(&clients).unwrap();
        assert_eq!(s.n, 2);
        assert_eq!(s.sigma0_sq, 5.0);
        assert_eq!(s.sigma1_sq, 0.125);
        assert_eq!(s.omega, 0.5);
        assert_eq!(s.sigma0_sq_omega, 4.5);
        assert_eq!(s.sigma1_sq_omega, 0.125);
        assert_relative_eq!(s.a_term(10), 0.5 + 10.0 * 0.25);
        assert_eq!(s.b_term(), 9.5);
    }

    #[test]
    fn sign_and_student_t_are_rejected() {
        let sign = homogeneous(2, NoiseSpec::None, CompressorSpec::Sign);
        assert!(ClientSummary::from_clients(&sign).is_err());
        let t = homogeneous(1, NoiseSpec::student_t(1.0, 1.0, 1), CompressorSpec::Identity);
        assert!(ClientSummary::from_clients(&t).is_err());
        assert!(ClientSummary::from_clients(&[]).is_err());
    }
}
