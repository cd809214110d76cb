//! Stepsize schedules `η_t`, their integrals `φ⁽ⁱ⁾_t = ∫₀ᵗ η_sⁱ ds`, the
//! adaptive normalized stepsize, and the random-time sampler used by the
//! bound estimators.

use rand::Rng;

use crate::clients::ClientSummary;
use crate::error::{Error, Result};
use crate::quad;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizedForm {
    /// Full constraint-derived form.
    Eq12,
    /// `η0 / (1 + Ĝ)`.
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedParams {
    pub eps: f64,
    pub l0: f64,
    pub l1: f64,
    pub summary: ClientSummary,
    pub d: usize,
    pub form: NormalizedForm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchedulerKind {
    Constant,
    PowerLaw { a: f64 },
    InverseSqrtStep,
    AdaptiveNormalized(NormalizedParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerSpec {
    pub kind: SchedulerKind,
    /// Base stepsize η.
    pub eta: f64,
}

impl SchedulerSpec {
    pub fn constant(eta: f64) -> Self {
        Self { kind: SchedulerKind::Constant, eta }
    }

    pub fn power_law(eta: f64, a: f64) -> Self {
        Self { kind: SchedulerKind::PowerLaw { a }, eta }
    }

    pub fn inverse_sqrt(eta: f64) -> Self {
        Self { kind: SchedulerKind::InverseSqrtStep, eta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("base stepsize must be positive, got {}", self.eta)));
        }
        match self.kind {
            SchedulerKind::PowerLaw { a } if !(a > 0.0 && a <= 1.0) => {
                Err(Error::invalid(format!("power-law exponent must lie in (0, 1], got {a}")))
            }
            SchedulerKind::AdaptiveNormalized(p) => p.validate(),
            _ => Ok(()),
        }
    }

    /// `η_t`. Discrete callers pass `t = k`. The adaptive scheduler has no
    /// deterministic profile and reports 1.
    pub fn eta_at(&self, t: f64) -> f64 {
        match self.kind {
            SchedulerKind::Constant | SchedulerKind::AdaptiveNormalized(_) => 1.0,
            SchedulerKind::PowerLaw { a } => (1.0 + t).powf(-a),
            SchedulerKind::InverseSqrtStep => 1.0 / (t.floor() + 1.0).sqrt(),
        }
    }

    /// Effective stepsize `η·η_t` given the current server estimate `Ĝ`.
    pub fn effective_lr(&self, t: f64, g_hat: f64) -> f64 {
        match self.kind {
            SchedulerKind::AdaptiveNormalized(p) => {
                normalized_lr(self.eta, g_hat, &p).unwrap_or(self.eta)
            }
            _ => self.eta * self.eta_at(t),
        }
    }

    /// Multiplier of the base stepsize, `effective_lr / η`.
    pub fn rate(&self, t: f64, g_hat: f64) -> f64 {
        self.effective_lr(t, g_hat) / self.eta
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.kind, SchedulerKind::AdaptiveNormalized(_))
    }

    /// `φ⁽ⁱ⁾_t` in closed form.
    pub fn phi(&self, i: u32, t: f64) -> f64 {
        assert!(i == 1 || i == 2, "phi order must be 1 or 2");
        match self.kind {
            SchedulerKind::Constant | SchedulerKind::AdaptiveNormalized(_) => t,
            SchedulerKind::PowerLaw { a } => {
                let e = 1.0 - i as f64 * a;
                let l = t.ln_1p();
                if e.abs() < 1e-12 {
                    l
                } else {
                    (e * l).exp_m1() / e
                }
            }
            SchedulerKind::InverseSqrtStep => {
                let p = i as f64 / 2.0;
                let whole = t.floor();
                let mut acc = 0.0;
                let mut k = 0.0;
                while k < whole {
                    acc += (k + 1.0).powf(-p);
                    k += 1.0;
                }
                acc + (t - whole) * (whole + 1.0).powf(-p)
            }
        }
    }

    /// `φ⁽ⁱ⁾_t` by adaptive quadrature, split at the jumps of piecewise
    /// schedules.
    pub fn phi_quadrature(&self, i: u32, t: f64, tol: f64) -> f64 {
        self.segment_quadrature(i, 0.0, t, tol)
    }

    fn segment_quadrature(&self, i: u32, a: f64, b: f64, tol: f64) -> f64 {
        let f = |s: f64| self.eta_at(s).powi(i as i32);
        match self.kind {
            SchedulerKind::InverseSqrtStep => {
                let mut acc = 0.0;
                let mut lo = a;
                while lo < b {
                    let hi = (lo.floor() + 1.0).min(b);
                    // integrand is constant on [lo, hi)
                    let mid = 0.5 * (lo + hi);
                    acc += quad::integrate(|_| f(mid), lo, hi, tol);
                    lo = hi;
                }
                acc
            }
            _ => quad::integrate(f, a, b, tol),
        }
    }

    /// `∫_a^b η_sⁱ ds`, exact for every kind.
    fn segment_integral(&self, i: u32, a: f64, b: f64) -> f64 {
        match self.kind {
            SchedulerKind::InverseSqrtStep => {
                let p = i as f64 / 2.0;
                let mut acc = 0.0;
                let mut lo = a;
                while lo < b {
                    let k = lo.floor();
                    let hi = (k + 1.0).min(b);
                    acc += (hi - lo) * (k + 1.0).powf(-p);
                    lo = hi;
                }
                acc
            }
            _ => self.phi(i, b) - self.phi(i, a),
        }
    }
}

impl NormalizedParams {
    pub fn full_form(eps: f64, l0: f64, l1: f64, summary: ClientSummary, d: usize) -> Self {
        Self { eps, l0, l1, summary, d, form: NormalizedForm::Eq12 }
    }

    pub fn simple() -> Self {
        Self {
            eps: 0.5,
            l0: 1.0,
            l1: 1.0,
            summary: ClientSummary::noiseless(1),
            d: 1,
            form: NormalizedForm::Simple,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.form == NormalizedForm::Simple {
            return Ok(());
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::invalid(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        if self.l0 < 0.0 || self.l1 < 0.0 {
            return Err(Error::invalid("smoothness constants must be nonnegative"));
        }
        if self.l0 == 0.0 && self.l1 == 0.0 {
            return Err(Error::Config("L0 = L1 = 0 leaves the normalized stepsize undefined".into()));
        }
        if self.summary.n == 0 || self.d == 0 {
            return Err(Error::invalid("client count and dimension must be positive"));
        }
        Ok(())
    }
}

/// Normalized effective stepsize for the current gradient-norm estimate.
pub fn normalized_lr(eta0: f64, g_hat: f64, p: &NormalizedParams) -> Result<f64> {
    if !(g_hat >= 0.0) {
        return Err(Error::invalid(format!("gradient norm estimate must be nonnegative, got {g_hat}")));
    }
    match p.form {
        NormalizedForm::Simple => Ok(eta0 / (1.0 + g_hat)),
        NormalizedForm::Eq12 => {
            p.validate()?;
            let n = p.summary.n as f64;
            let d = p.d as f64;
            let denom = (p.l0 + p.l1 * g_hat) * (1.0 + p.summary.a_term(p.d) / n) + p.l1 * d * p.summary.b_term() / n;
            if denom > 0.0 {
                Ok(2.0 * p.eps / denom)
            } else {
                Ok(eta0)
            }
        }
    }
}

/// Density of the random evaluation time, up to normalisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RandomTimeWeights {
    /// `∝ η_t`.
    Linear,
    /// `∝ η_t ℓ − η_t² η K`.
    Thm3 { eta: f64, k: f64, ell: f64 },
}

/// Inverse-CDF sampler on a fixed grid with linear interpolation.
#[derive(Debug, Clone)]
pub struct RandomTimeSampler {
    nodes: Vec<f64>,
    cdf: Vec<f64>,
}

impl RandomTimeSampler {
    pub const GRID: usize = 10_000;

    pub fn new(s: &SchedulerSpec, t: f64, weights: RandomTimeWeights) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {t}")));
        }
        let n = Self::GRID;
        let nodes: Vec<f64> = (0..=n).map(|j| t * j as f64 / n as f64).collect();
        if let RandomTimeWeights::Thm3 { eta, k, ell } = weights {
            for &x in &nodes {
                let e = s.eta_at(x);
                if !(e * ell - e * e * eta * k > 0.0) {
                    return Err(Error::ConstraintViolated(format!("random-time density is not positive at t = {x}")));
                }
            }
        }
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for w in nodes.windows(2) {
            acc += match weights {
                RandomTimeWeights::Linear => s.segment_integral(1, w[0], w[1]),
                RandomTimeWeights::Thm3 { eta, k, ell } => {
                    ell * s.segment_integral(1, w[0], w[1]) - eta * k * s.segment_integral(2, w[0], w[1])
                }
            };
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::invalid("random-time density integrates to zero"));
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        Ok(Self { nodes, cdf })
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().expect("nonempty grid")
    }

    /// Piecewise-linear CDF through the grid.
    pub fn cdf(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= self.horizon() {
            return 1.0;
        }
        let h = self.horizon() / Self::GRID as f64;
        let j = ((s / h) as usize).min(Self::GRID - 1);
        let frac = (s - self.nodes[j]) / h;
        self.cdf[j] + frac * (self.cdf[j + 1] - self.cdf[j])
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let j = self.cdf.partition_point(|&c| c < u).clamp(1, Self::GRID);
        let (c0, c1) = (self.cdf[j - 1], self.cdf[j]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.nodes[j - 1] + frac.clamp(0.0, 1.0) * (self.nodes[j] - self.nodes[j - 1])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }
}

/// One-shot draw; builds the grid on every call.
pub fn sample_random_time<R: Rng + ?Sized>(
    s: &SchedulerSpec,
    t: f64,
    weights: RandomTimeWeights,
    rng: &mut R,
) -> Result<f64> {
    Ok(RandomTimeSampler::new(s, t, weights)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_relative_eq;

    fn ks(draws: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn eta_examples() {
        assert_eq!(SchedulerSpec::constant(0.1).eta_at(17.0), 1.0);
        assert_eq!(SchedulerSpec::power_law(0.1, 0.5).eta_at(3.0), 0.5);
        assert_eq!(SchedulerSpec::inverse_sqrt(0.1).eta_at(0.0), 1.0);
        assert_eq!(SchedulerSpec::inverse_sqrt(0.1).eta_at(3.0), 0.5);
        assert_eq!(SchedulerSpec::inverse_sqrt(0.1).eta_at(3.9), 0.5);
    }

    #[test]
    fn phi_examples() {
        let p = SchedulerSpec::power_law(1.0, 0.5);
        assert_relative_eq!(p.phi(1, 3.0), 2.0, max_relative = 1e-14);
        assert_relative_eq!(p.phi(1, 3.0), p.phi_quadrature(1, 3.0, 1e-9), max_relative = 1e-8);
        assert_eq!(SchedulerSpec::constant(1.0).phi(2, 5.0), 5.0);
        assert_relative_eq!(p.phi(2, std::f64::consts::E - 1.0), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn phi_closed_forms_match_quadrature() {
        let specs = [
            SchedulerSpec::constant(1.0),
            SchedulerSpec::power_law(1.0, 0.3),
            SchedulerSpec::power_law(1.0, 0.5),
            SchedulerSpec::power_law(1.0, 1.0),
            SchedulerSpec::inverse_sqrt(1.0),
        ];
        for s in specs {
            for t in [0.0, 0.5, 3.0, 17.25, 100.0] {
                for i in [1, 2] {
                    let c = s.phi(i, t);
                    let q = s.phi_quadrature(i, t, 1e-11);
                    assert!((c - q).abs() <= 1e-8 * c.abs().max(1e-300) + 1e-12, "{s:?} i={i} t={t}: {c} vs {q}");
                }
            }
        }
    }

    #[test]
    fn phi_is_monotone() {
        for s in [SchedulerSpec::power_law(1.0, 0.7), SchedulerSpec::inverse_sqrt(1.0)] {
            let mut prev = 0.0;
            for j in 0..200 {
                let v = s.phi(1, j as f64 * 0.37);
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn robbins_monro_power_law() {
        let s = SchedulerSpec::power_law(1.0, 0.5);
        let ts = [1e2, 1e4, 1e6];
        let ratios: Vec<f64> = ts.iter().map(|&t| s.phi(2, t) / s.phi(1, t)).collect();
        for w in ratios.windows(2) {
            assert!(w[1] < w[0] / 4.0, "{ratios:?}");
        }
        assert!(s.phi(1, 1e6) > 1e3);
        let s = SchedulerSpec::power_law(1.0, 0.8);
        assert!(s.phi(2, 1e6) / s.phi(1, 1e6) < s.phi(2, 1e2) / s.phi(1, 1e2));
    }

    fn full(eps: f64, l0: f64, l1: f64) -> NormalizedParams {
        NormalizedParams::full_form(eps, l0, l1, ClientSummary::noiseless(1), 1)
    }

    #[test]
    fn normalized_examples() {
        assert_eq!(normalized_lr(0.1, 7.0, &full(0.5, 1.0, 0.0)).unwrap(), 1.0);
        assert_eq!(normalized_lr(0.1, 4.0, &full(0.5, 0.0, 1.0)).unwrap(), 0.25);
        let p = NormalizedParams::simple();
        assert_eq!(normalized_lr(2.0, 3.0, &p).unwrap(), 0.5);
        assert!(normalized_lr(0.1, 1.0, &full(0.5, 0.0, 0.0)).is_err());
        assert!(normalized_lr(0.1, -1.0, &full(0.5, 1.0, 1.0)).is_err());
    }

    #[test]
    fn normalized_is_decreasing() {
        let mut summary = ClientSummary::noiseless(8);
        summary.sigma1_sq = 0.01;
        summary.omega = 4.0;
        summary.sigma1_sq_omega = 0.04;
        let p = NormalizedParams::full_form(0.5, 1.0, 1.0, summary, 1000);
        let a = normalized_lr(0.1, 1.0, &p).unwrap();
        let b = normalized_lr(0.1, 10.0, &p).unwrap();
        assert!(b < a);
    }

    #[test]
    fn adaptive_effective_lr() {
        let s = SchedulerSpec { kind: SchedulerKind::AdaptiveNormalized(full(0.5, 0.0, 1.0)), eta: 0.1 };
        assert_eq!(s.eta_at(5.0), 1.0);
        assert_eq!(s.effective_lr(5.0, 4.0), 0.25);
        // zero estimate with L0 = 0 has no finite bound
        assert_eq!(s.effective_lr(5.0, 0.0), 0.1);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn validation() {
        assert!(SchedulerSpec::power_law(1.0, 0.0).validate().is_err());
        assert!(SchedulerSpec::power_law(1.0, 1.5).validate().is_err());
        assert!(SchedulerSpec::constant(0.0).validate().is_err());
        assert!(SchedulerSpec::power_law(0.1, 1.0).validate().is_ok());
    }

    #[test]
    fn random_time_uniform_for_constant() {
        let s = SchedulerSpec::constant(1.0);
        let r = RandomTimeSampler::new(&s, 10.0, RandomTimeWeights::Linear).unwrap();
        let mut rng = stream(1, 0, 0, 0, Purpose::RandomTime);
        let mut d: Vec<f64> = (0..10_000).map(|_| r.sample(&mut rng)).collect();
        assert!(d.iter().all(|&x| (0.0..=10.0).contains(&x)));
        assert!(ks(&mut d, |x| x / 10.0) < 0.02);
    }

    #[test]
    fn random_time_power_law() {
        let s = SchedulerSpec::power_law(1.0, 0.5);
        let r = RandomTimeSampler::new(&s, 3.0, RandomTimeWeights::Linear).unwrap();
        let mut rng = stream(2, 0, 0, 0, Purpose::RandomTime);
        let mut d: Vec<f64> = (0..10_000).map(|_| r.sample(&mut rng)).collect();
        assert!(ks(&mut d, |x| (2.0 * (1.0 + x).sqrt() - 2.0) / 2.0) < 0.02);
    }

    #[test]
    fn random_time_inverse_sqrt_matches_phi() {
        let s = SchedulerSpec::inverse_sqrt(1.0);
        let r = RandomTimeSampler::new(&s, 20.0, RandomTimeWeights::Linear).unwrap();
        for x in [0.5, 1.0, 7.3, 19.9] {
            assert_relative_eq!(r.cdf(x), s.phi(1, x) / s.phi(1, 20.0), max_relative = 1e-9);
        }
    }

    #[test]
    fn thm3_with_zero_k_reduces_to_linear() {
        let s = SchedulerSpec::power_law(1.0, 0.5);
        let a = RandomTimeSampler::new(&s, 5.0, RandomTimeWeights::Linear).unwrap();
        let b = RandomTimeSampler::new(&s, 5.0, RandomTimeWeights::Thm3 { eta: 0.1, k: 0.0, ell: 0.7 }).unwrap();
        for (x, y) in a.cdf.iter().zip(&b.cdf) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn thm3_density_matches_closed_form() {
        let s = SchedulerSpec::power_law(1.0, 0.5);
        let (eta, k, ell) = (0.2, 1.0, 0.6);
        let r = RandomTimeSampler::new(&s, 4.0, RandomTimeWeights::Thm3 { eta, k, ell }).unwrap();
        let f = |x: f64| ell * s.phi(1, x) - eta * k * s.phi(2, x);
        assert_relative_eq!(r.cdf(2.0), f(2.0) / f(4.0), max_relative = 1e-10);
    }

    #[test]
    fn thm3_rejects_nonpositive_density() {
        let s = SchedulerSpec::constant(1.0);
        let e = RandomTimeSampler::new(&s, 1.0, RandomTimeWeights::Thm3 { eta: 1.0, k: 2.0, ell: 1.0 });
        assert!(matches!(e, Err(Error::ConstraintViolated(_))));
    }
}
