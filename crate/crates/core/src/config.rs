//! Flat `key = value` experiment configuration.
//!
//! One entry per line, `#` starts a comment, dotted section prefixes
//! (`noise.sigma0 = 0.1`). Unknown and repeated keys are rejected.

use std::collections::BTreeMap;

use sha1::{Digest, Sha1};

use crate::analysis::{GradProxy, TestFunction, TheoremId};
use crate::clients::{homogeneous, ClientSpec, ClientSummary};
use crate::compressors::CompressorSpec;
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::objectives::{Objective, ObjectiveKind};
use crate::optimizers::{Algorithm, InitPoint, RunConfig};
use crate::schedulers::{NormalizedParams, SchedulerKind, SchedulerSpec};
use crate::sde::{SdeAlgorithm, SdeFamily};

pub const KNOWN_KEYS: &[&str] = &[
    "objective.kind",
    "objective.dim",
    "objective.lambda",
    "objective.seed",
    "noise.kind",
    "noise.sigma0",
    "noise.sigma1",
    "noise.nu",
    "noise.scale",
    "compressor.kind",
    "compressor.p",
    "scheduler.kind",
    "scheduler.a",
    "scheduler.eps",
    "scheduler.L0",
    "scheduler.L1",
    "scheduler.form",
    "sde.family",
    "sde.algorithm",
    "sde.dt",
    "sde.T",
    "analysis.eta_grid",
    "analysis.x0_grid",
    "analysis.t_grid",
    "analysis.samples",
    "analysis.test_fn",
    "analysis.theorem",
    "analysis.g_proxy",
    "analysis.target",
    "analysis.dt_fraction",
    "analysis.eps",
    "analysis.L0",
    "analysis.L1",
    "algorithm",
    "clients",
    "eta",
    "steps",
    "runs",
    "seed",
    "output",
    "record_stride",
    "divergence_threshold",
    "x0",
    "scale",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
    hash: String,
}

/// Git blob id of `bytes`: sha1 over `blob <len>\0<bytes>`.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim().parse::<f64>().map_err(|_| Error::Config(format!("`{key}`: expected a number, got `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_f64(key, s)).collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(Self { entries, hash: git_blob_hash(text.as_bytes()) })
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Result<Self> {
        let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Self::parse(&text)
    }

    /// Content hash of the source text.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// `#`-prefixed provenance block: every key in sorted order, then the hash.
    pub fn header(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        s.push_str(&format!("# config_sha1 = {}\n", self.hash));
        s
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key).map_or(Ok(default), |v| parse_f64(key, v))
    }

    pub fn f64_req(&self, key: &str) -> Result<f64> {
        parse_f64(key, self.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.get(key).map_or(Ok(default), |v| {
            v.parse::<usize>().map_err(|_| Error::Config(format!("`{key}`: expected a nonnegative integer, got `{v}`")))
        })
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.get(key).map_or(Ok(default), |v| {
            v.parse::<u64>().map_err(|_| Error::Config(format!("`{key}`: expected a nonnegative integer, got `{v}`")))
        })
    }

    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        parse_list(key, self.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?)
    }

    pub fn list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        self.get(key).map_or(Ok(default.to_vec()), |v| parse_list(key, v))
    }

    fn str_or<'a>(&'a self, key: &str, default: &'a str) -> String {
        self.get(key).unwrap_or(default).to_ascii_lowercase()
    }

    pub fn objective_kind(&self) -> Result<ObjectiveKind> {
        let kind = self.str_or("objective.kind", "quadratic");
        Ok(match kind.as_str() {
            "quadratic" => ObjectiveKind::Quadratic {
                lambda: self.f64_or("objective.lambda", 1.0)?,
                dim: self.usize_or("objective.dim", 1)?,
            },
            "quartic" | "quartic1d" => ObjectiveKind::Quartic1D,
            "quartic_sum" | "quarticsum" => ObjectiveKind::QuarticSum { dim: self.usize_or("objective.dim", 1000)? },
            "mlp" | "mlp_regression" => ObjectiveKind::MlpRegression { seed: self.u64_or("objective.seed", 0)? },
            _ => return Err(Error::Config(format!("unknown objective.kind `{kind}`"))),
        })
    }

    pub fn objective(&self) -> Result<Objective> {
        Objective::build(&self.objective_kind()?)
    }

    pub fn noise(&self, d: usize) -> Result<NoiseSpec> {
        let kind = self.str_or("noise.kind", "none");
        let spec = match kind.as_str() {
            "none" => NoiseSpec::None,
            "gaussian" | "gaussian_affine" | "affine" => {
                NoiseSpec::gaussian(self.f64_or("noise.sigma0", 0.0)?, self.f64_or("noise.sigma1", 0.0)?)
            }
            "student_t" | "studentt" | "student" => {
                let nu = self.f64_req("noise.nu")?;
                let scale = self.list_or("noise.scale", &[1.0])?;
                match scale.len() {
                    1 => NoiseSpec::student_t(nu, scale[0], d),
                    n if n == d => NoiseSpec::StudentT { nu, scale },
                    n => return Err(Error::Config(format!("noise.scale has {n} entries, expected 1 or {d}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown noise.kind `{kind}`"))),
        };
        spec.validate(d)?;
        Ok(spec)
    }

    pub fn compressor(&self) -> Result<CompressorSpec> {
        let kind = self.str_or("compressor.kind", "identity");
        let c = match kind.as_str() {
            "identity" | "none" => CompressorSpec::Identity,
            "sign" => CompressorSpec::Sign,
            "random_sparsify" | "sparsify" | "randomsparsify" => {
                CompressorSpec::RandomSparsify { p: self.f64_req("compressor.p")? }
            }
            _ => return Err(Error::Config(format!("unknown compressor.kind `{kind}`"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn clients(&self, d: usize) -> Result<Vec<ClientSpec>> {
        let n = self.usize_or("clients", 1)?;
        if n == 0 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        Ok(homogeneous(n, self.noise(d)?, self.compressor()?))
    }

    pub fn scheduler(&self, d: usize, clients: &[ClientSpec]) -> Result<SchedulerSpec> {
        let eta = self.f64_or("eta", 0.1)?;
        let kind = self.str_or("scheduler.kind", "constant");
        let kind = match kind.as_str() {
            "constant" => SchedulerKind::Constant,
            "power_law" | "powerlaw" => SchedulerKind::PowerLaw { a: self.f64_or("scheduler.a", 0.5)? },
            "inverse_sqrt" | "inversesqrt" | "inverse_sqrt_step" => SchedulerKind::InverseSqrtStep,
            "adaptive" | "adaptive_normalized" | "normalized" => {
                let form = self.str_or("scheduler.form", "eq12");
                let p = match form.as_str() {
                    "eq12" => {
                        let summary = ClientSummary::from_clients(clients)?;
                        NormalizedParams::full_form(
                            self.f64_or("scheduler.eps", 0.5)?,
                            self.f64_or("scheduler.L0", 1.0)?,
                            self.f64_or("scheduler.L1", 1.0)?,
                            summary,
                            d,
                        )
                    }
                    "simple" => NormalizedParams::simple(),
                    _ => return Err(Error::Config(format!("unknown scheduler.form `{form}`"))),
                };
                SchedulerKind::AdaptiveNormalized(p)
            }
            _ => return Err(Error::Config(format!("unknown scheduler.kind `{kind}`"))),
        };
        let s = SchedulerSpec { kind, eta };
        s.validate()?;
        Ok(s)
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        let a = self.str_or("algorithm", "dcsgd");
        Ok(match a.as_str() {
            "dsgd" | "sgd" | "gd" => Algorithm::Dsgd,
            "dcsgd" => Algorithm::Dcsgd,
            "dsignsgd" | "dsign" => Algorithm::DsignSgd,
            "normalized_dcsgd" | "normalized" | "normsgd" => Algorithm::NormalizedDcsgd,
            _ => return Err(Error::Config(format!("unknown algorithm `{a}`"))),
        })
    }

    pub fn sde_family(&self) -> Result<SdeFamily> {
        let f = self.str_or("sde.family", "corrected_first");
        Ok(match f.as_str() {
            "classic_first" | "classicfirst" | "classic" => SdeFamily::ClassicFirst,
            "classic_second" | "classicsecond" => SdeFamily::ClassicSecond,
            "corrected_first" | "correctedfirst" | "corrected" => SdeFamily::CorrectedFirst,
            _ => return Err(Error::Config(format!("unknown sde.family `{f}`"))),
        })
    }

    pub fn sde_algorithm(&self) -> Result<SdeAlgorithm> {
        let a = self.str_or("sde.algorithm", "dcsgd");
        Ok(match a.as_str() {
            "sgd" | "dsgd" => SdeAlgorithm::Sgd,
            "dcsgd" => SdeAlgorithm::Dcsgd,
            "dsignsgd" | "dsign" => SdeAlgorithm::Dsignsgd,
            _ => return Err(Error::Config(format!("unknown sde.algorithm `{a}`"))),
        })
    }

    /// `x0` as one broadcast value or a full vector; `None` when unset.
    pub fn x0(&self, d: usize) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.get("x0") else { return Ok(None) };
        let xs = parse_list("x0", v)?;
        match xs.len() {
            1 => Ok(Some(vec![xs[0]; d])),
            n if n == d => Ok(Some(xs)),
            n => Err(Error::Config(format!("x0 has {n} entries, expected 1 or {d}"))),
        }
    }

    /// Starting point for SDE and analysis commands.
    pub fn x0_or_default(&self, objective: &Objective) -> Result<Vec<f64>> {
        match self.x0(objective.dim())? {
            Some(x) => Ok(x),
            None => Ok(objective.default_init(self.u64_or("seed", 0)?, 0)),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let objective = self.objective()?;
        let d = objective.dim();
        let clients = self.clients(d)?;
        let scheduler = self.scheduler(d, &clients)?;
        let mut rc = RunConfig::new(objective, clients, scheduler, self.usize_or("steps", 100)?);
        rc.seed = self.u64_or("seed", 0)?;
        rc.record_stride = self.usize_or("record_stride", 1)?;
        rc.divergence_threshold = self.f64_or("divergence_threshold", 1e12)?;
        if let Some(x) = self.x0(d)? {
            rc.x0 = InitPoint::Fixed(x);
        }
        if rc.record_stride == 0 {
            return Err(Error::Config("record_stride must be positive".into()));
        }
        Ok(rc)
    }

    pub fn runs(&self) -> Result<usize> {
        self.usize_or("runs", 1)
    }

    pub fn test_function(&self) -> Result<TestFunction> {
        let t = self.str_or("analysis.test_fn", "norm_sq");
        Ok(match t.as_str() {
            "norm_sq" | "normsq" => TestFunction::NormSq,
            "loss" => TestFunction::Loss,
            _ => return Err(Error::Config(format!("unknown analysis.test_fn `{t}`"))),
        })
    }

    pub fn theorem(&self) -> Result<TheoremId> {
        TheoremId::parse(self.get("analysis.theorem").unwrap_or("thm2"))
    }

    pub fn grad_proxy(&self) -> Result<GradProxy> {
        let g = self.str_or("analysis.g_proxy", "monte_carlo");
        match g.as_str() {
            "monte_carlo" | "mc" => Ok(GradProxy::MonteCarlo),
            other => other
                .parse::<f64>()
                .map(GradProxy::Constant)
                .map_err(|_| Error::Config(format!("analysis.g_proxy: expected `monte_carlo` or a number, got `{other}`"))),
        }
    }
}
