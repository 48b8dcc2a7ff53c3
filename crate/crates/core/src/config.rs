//! TOML experiment files.
//!
//! ```toml
//! schema_version = 1
//!
//! [channel]
//! family = "md_bsc"          # md_bsc | noiseless | tabulated
//! nu = 0.5
//! f = { a = 0.1, b = 0.3 }   # f(q) = a + b q
//!
//! [procedure]
//! kind = "alg1"              # alg1 | alg2 | sorted_pm | sorted_pm_terminated
//! m = 16
//! target_eps = 0.1           # lambda = log((M^d - 1) / target_eps) unless lambda is set
//!
//! [experiment]
//! n_trials = 10000
//! master_seed = 1
//! ```
//!
//! Unknown keys are rejected. See the README for every key.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::analysis::{capacity_general, DEFAULT_TOL};
use crate::channel::{Anchor, LipschitzFn, MdChannel};
use crate::engine::{choose_lambda, Backend, DecoderRule, ProcedureConfig};
use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, Procedure, TruthMode};
use crate::sortedpm::{PmBackend, PmConfig, StopRule};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub channel: ChannelSection,
    pub procedure: Option<ProcedureSection>,
    pub experiment: Option<ExperimentSection>,
    pub sweep: Option<SweepSection>,
    pub rate_curves: Option<RateCurvesSection>,
    pub continuity: Option<ContinuitySection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MdBsc,
    Noiseless,
    Tabulated,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSection {
    pub a: f64,
    #[serde(default)]
    pub b: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSection {
    pub state: f64,
    pub rows: [Vec<f64>; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub family: Family,
    pub nu: Option<f64>,
    pub f: Option<AffineSection>,
    pub anchors: Option<Vec<AnchorSection>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Alg1,
    Alg2,
    SortedPm,
    SortedPmTerminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderName {
    MaxQualifying,
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendName {
    Auto,
    Dense,
    Lumped,
    Grouped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRuleName {
    FixedN,
    MassThreshold,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcedureSection {
    pub kind: Kind,
    pub m: Option<u64>,
    pub d: Option<u32>,
    pub q: Option<f64>,
    pub lambda: Option<f64>,
    pub target_eps: Option<f64>,
    pub epsilon_term: Option<f64>,
    pub max_steps: Option<u64>,
    pub decoder: Option<DecoderName>,
    pub backend: Option<BackendName>,
    pub m_pm: Option<u64>,
    pub n_queries: Option<u64>,
    pub stop_rule: Option<StopRuleName>,
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub n_trials: u64,
    #[serde(default)]
    pub master_seed: u64,
    /// Fixed target; a uniform target is drawn per trial when absent.
    pub truth: Option<Vec<f64>>,
    pub delta_eval: Option<f64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// `M` values for the query procedure, query budgets for sorted posterior matching.
    pub values: Vec<u64>,
    #[serde(default = "default_level")]
    pub quantile: f64,
}

fn default_level() -> f64 {
    0.9
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateCurvesSection {
    pub nu: Vec<f64>,
    #[serde(default = "default_eps_max")]
    pub eps_max: f64,
    #[serde(default = "default_eps_steps")]
    pub eps_steps: u32,
    #[serde(default = "default_d")]
    pub d: u32,
    pub mi_alpha: Option<f64>,
}

fn default_eps_max() -> f64 {
    0.95
}

fn default_eps_steps() -> u32 {
    19
}

fn default_d() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuitySection {
    pub q: f64,
    pub xi: f64,
    pub c: f64,
}

/// Command-line values that replace their config counterparts.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<u64>,
    pub out: Option<PathBuf>,
    pub procedure: Option<Kind>,
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

pub fn load(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ConfigFile::parse(&text)
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(cfg_err)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn state_map(&self) -> Result<LipschitzFn> {
        let f = self
            .channel
            .f
            .ok_or_else(|| Error::Config("channel.f is required".into()))?;
        LipschitzFn::affine(f.a, f.b).map_err(cfg_err)
    }

    pub fn nu(&self) -> Result<f64> {
        self.channel.nu.ok_or_else(|| Error::Config("channel.nu is required".into()))
    }

    pub fn channel(&self) -> Result<MdChannel> {
        let c = &self.channel;
        let built = match c.family {
            Family::Noiseless => {
                if c.nu.is_some() || c.f.is_some() || c.anchors.is_some() {
                    return Err(Error::Config("a noiseless channel takes no parameters".into()));
                }
                Ok(MdChannel::noiseless())
            }
            Family::MdBsc => {
                if c.anchors.is_some() {
                    return Err(Error::Config("channel.anchors only applies to tabulated channels".into()));
                }
                MdChannel::md_bsc(self.nu()?, self.state_map()?)
            }
            Family::Tabulated => {
                if c.nu.is_some() {
                    return Err(Error::Config("channel.nu only applies to md_bsc channels".into()));
                }
                let anchors = c
                    .anchors
                    .as_ref()
                    .ok_or_else(|| Error::Config("channel.anchors is required".into()))?
                    .iter()
                    .map(|a| Anchor { state: a.state, rows: a.rows.clone() })
                    .collect();
                MdChannel::tabulated(self.state_map()?, anchors)
            }
        };
        built.map_err(cfg_err)
    }

    fn procedure_section(&self) -> Result<&ProcedureSection> {
        self.procedure
            .as_ref()
            .ok_or_else(|| Error::Config("a [procedure] table is required".into()))
    }

    /// Query procedure with `m` bins per dimension.
    fn query_config(&self, p: &ProcedureSection, ch: &MdChannel, m: u64, kind: Kind) -> Result<ProcedureConfig> {
        if p.m_pm.is_some() || p.n_queries.is_some() || p.stop_rule.is_some() || p.theta.is_some() {
            return Err(Error::Config("m_pm, n_queries, stop_rule and theta apply to sorted posterior matching only".into()));
        }
        let d = p.d.unwrap_or(1);
        let q = match p.q {
            Some(q) => q,
            None => capacity_general(ch, DEFAULT_TOL)?.argmax_q,
        };
        let lambda = match (p.lambda, p.target_eps) {
            (Some(_), Some(_)) => return Err(Error::Config("set lambda or target_eps, not both".into())),
            (Some(l), None) => l,
            (None, t) => choose_lambda(m, d, t.unwrap_or(0.1))?,
        };
        let mut cfg = ProcedureConfig::new(m, d, q, lambda)?;
        if let Some(s) = p.max_steps {
            cfg = cfg.with_max_steps(s)?;
        }
        let eps = p.epsilon_term.unwrap_or(0.0);
        match kind {
            Kind::Alg1 if eps != 0.0 => return Err(Error::Config("alg1 takes no epsilon_term".into())),
            Kind::Alg2 if p.epsilon_term.is_none() => return Err(Error::Config("alg2 needs epsilon_term".into())),
            _ => cfg = cfg.with_termination(eps)?,
        }
        cfg = cfg.with_decoder(match p.decoder.unwrap_or(DecoderName::MaxQualifying) {
            DecoderName::MaxQualifying => DecoderRule::MaxQualifying,
            DecoderName::Argmax => DecoderRule::Argmax,
        });
        let backend = match p.backend.unwrap_or(BackendName::Auto) {
            BackendName::Auto => Backend::Auto,
            BackendName::Dense => Backend::Dense,
            BackendName::Lumped => Backend::Lumped,
            BackendName::Grouped => return Err(Error::Config("backend 'grouped' is for sorted posterior matching".into())),
        };
        let cfg = cfg.with_backend(backend);
        cfg.validate(ch)?;
        Ok(cfg)
    }

    fn pm_config(&self, p: &ProcedureSection, n_queries: u64, kind: Kind) -> Result<PmConfig> {
        let unused = [
            ("m", p.m.is_some()),
            ("q", p.q.is_some()),
            ("lambda", p.lambda.is_some()),
            ("target_eps", p.target_eps.is_some()),
            ("max_steps", p.max_steps.is_some()),
            ("decoder", p.decoder.is_some()),
        ];
        if let Some((key, _)) = unused.iter().find(|(_, set)| *set) {
            return Err(Error::Config(format!("{key} does not apply to sorted posterior matching")));
        }
        if p.d.is_some_and(|d| d != 1) {
            return Err(Error::Config("sorted posterior matching is one-dimensional".into()));
        }
        let m_pm = p.m_pm.ok_or_else(|| Error::Config("m_pm is required for sorted posterior matching".into()))?;
        let mut cfg = PmConfig::new(m_pm, n_queries)?;
        let stop = match (p.stop_rule.unwrap_or(StopRuleName::FixedN), p.theta) {
            (StopRuleName::FixedN, None) => StopRule::FixedN,
            (StopRuleName::FixedN, Some(_)) => return Err(Error::Config("theta needs stop_rule = \"mass_threshold\"".into())),
            (StopRuleName::MassThreshold, Some(t)) => StopRule::MassThreshold(t),
            (StopRuleName::MassThreshold, None) => return Err(Error::Config("mass_threshold needs theta".into())),
        };
        cfg = cfg.with_stop_rule(stop)?;
        let eps = p.epsilon_term.unwrap_or(0.0);
        match kind {
            Kind::SortedPm if eps != 0.0 => return Err(Error::Config("sorted_pm takes no epsilon_term".into())),
            Kind::SortedPmTerminated if p.epsilon_term.is_none() => {
                return Err(Error::Config("sorted_pm_terminated needs epsilon_term".into()))
            }
            _ => cfg = cfg.with_termination(eps)?,
        }
        let backend = match p.backend.unwrap_or(BackendName::Grouped) {
            BackendName::Grouped | BackendName::Auto => PmBackend::Grouped,
            BackendName::Dense => PmBackend::Dense,
            BackendName::Lumped => return Err(Error::Config("backend 'lumped' is for the query procedure".into())),
        };
        cfg.with_backend(backend)
    }

    /// Experiment at budget parameter `value` (`M` or the query count); the
    /// section's own value when `None`.
    fn build(&self, ov: &Overrides, value: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
        let p = self.procedure_section()?;
        let e = self
            .experiment
            .as_ref()
            .ok_or_else(|| Error::Config("an [experiment] table is required".into()))?;
        let ch = self.channel()?;
        let kind = ov.procedure.unwrap_or(p.kind);
        let (procedure, bins) = match kind {
            Kind::Alg1 | Kind::Alg2 => {
                let m = value
                    .or(p.m)
                    .ok_or_else(|| Error::Config("m is required for the query procedure".into()))?;
                let c = self.query_config(p, &ch, m, kind)?;
                let bins = m;
                (if kind == Kind::Alg1 { Procedure::Alg1(c) } else { Procedure::Alg2(c) }, bins)
            }
            Kind::SortedPm | Kind::SortedPmTerminated => {
                let n = value
                    .or(p.n_queries)
                    .ok_or_else(|| Error::Config("n_queries is required for sorted posterior matching".into()))?;
                let c = self.pm_config(p, n, kind)?;
                let bins = c.m_pm;
                (if kind == Kind::SortedPm { Procedure::SortedPm(c) } else { Procedure::SortedPmTerminated(c) }, bins)
            }
        };
        let cfg = ExperimentConfig {
            procedure,
            channel: ch,
            n_trials: ov.trials.unwrap_or(e.n_trials),
            master_seed: ov.seed.unwrap_or(e.master_seed),
            truth_mode: e.truth.clone().map_or(TruthMode::Uniform, TruthMode::Fixed),
            delta_eval: e.delta_eval.unwrap_or(1.0 / bins as f64),
            output_path: out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn experiment(&self, ov: &Overrides) -> Result<ExperimentConfig> {
        let out = ov.out.clone().or_else(|| self.experiment.as_ref().and_then(|e| e.output.clone()));
        self.build(ov, None, out)
    }

    /// One experiment per sweep value, paired with the value, and the quantile level.
    pub fn sweep(&self, ov: &Overrides) -> Result<(Vec<(u64, ExperimentConfig)>, f64)> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("a [sweep] table is required".into()))?;
        if s.values.is_empty() {
            return Err(Error::Config("sweep.values is empty".into()));
        }
        if !(s.quantile > 0.0 && s.quantile <= 1.0) {
            return Err(Error::Config(format!("sweep.quantile = {} not in (0, 1]", s.quantile)));
        }
        let cfgs = s
            .values
            .iter()
            .map(|&v| Ok((v, self.build(ov, Some(v), None)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok((cfgs, s.quantile))
    }

    pub fn rate_curves_section(&self) -> Result<&RateCurvesSection> {
        let r = self
            .rate_curves
            .as_ref()
            .ok_or_else(|| Error::Config("a [rate_curves] table is required".into()))?;
        if r.nu.is_empty() {
            return Err(Error::Config("rate_curves.nu is empty".into()));
        }
        if !(r.eps_max >= 0.0 && r.eps_max < 1.0) || r.eps_steps == 0 {
            return Err(Error::Config("rate_curves needs 0 <= eps_max < 1 and eps_steps >= 1".into()));
        }
        Ok(r)
    }

    pub fn continuity_section(&self) -> Result<ContinuitySection> {
        self.continuity
            .ok_or_else(|| Error::Config("a [continuity] table is required".into()))
    }
}

impl RateCurvesSection {
    /// `eps_steps + 1` evenly spaced values from 0 to `eps_max`.
    pub fn eps_grid(&self) -> Vec<f64> {
        (0..=self.eps_steps)
            .map(|i| self.eps_max * i as f64 / self.eps_steps as f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
schema_version = 1

[channel]
family = "md_bsc"
nu = 0.5
f = { a = 0.1, b = 0.3 }

[procedure]
kind = "alg1"
m = 16
target_eps = 0.1

[experiment]
n_trials = 10
master_seed = 4
"#;

    #[test]
    fn parses_base() {
        let cfg = ConfigFile::parse(BASE).unwrap();
        let e = cfg.experiment(&Overrides::default()).unwrap();
        let Procedure::Alg1(p) = &e.procedure else { panic!("alg1 expected") };
        assert!((p.lambda - (150f64).ln()).abs() < 1e-12);
        assert!((p.q - 0.3784).abs() < 1e-3);
        assert_eq!(e.delta_eval, 1.0 / 16.0);
        assert_eq!(e.master_seed, 4);
        let e = cfg
            .experiment(&Overrides { seed: Some(7), trials: Some(3), ..Default::default() })
            .unwrap();
        assert_eq!((e.master_seed, e.n_trials), (7, 3));
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(ConfigFile::parse(&BASE.replace("m = 16", "m = 16\nbogus = 1")).is_err());
        assert!(ConfigFile::parse(&BASE.replace("schema_version = 1", "schema_version = 2")).is_err());
        assert!(ConfigFile::parse(&BASE.replace("schema_version = 1", "")).is_err());
    }

    #[test]
    fn rejects_inconsistent_procedures() {
        let cfg = ConfigFile::parse(&BASE.replace("target_eps = 0.1", "target_eps = 0.1\nepsilon_term = 0.3")).unwrap();
        assert!(cfg.experiment(&Overrides::default()).is_err());
        let alg2 = Overrides { procedure: Some(Kind::Alg2), ..Default::default() };
        assert!(cfg.experiment(&alg2).is_ok());
        let pm = Overrides { procedure: Some(Kind::SortedPm), ..Default::default() };
        assert!(ConfigFile::parse(BASE).unwrap().experiment(&pm).is_err());
    }

    #[test]
    fn sorted_pm_section() {
        let text = BASE.replace("kind = \"alg1\"\nm = 16\ntarget_eps = 0.1", "kind = \"sorted_pm\"\nm_pm = 1024\nn_queries = 20");
        let cfg = ConfigFile::parse(&text).unwrap();
        let e = cfg.experiment(&Overrides::default()).unwrap();
        assert_eq!(e.procedure, Procedure::SortedPm(PmConfig::new(1024, 20).unwrap()));
        assert_eq!(e.delta_eval, 1.0 / 1024.0);
    }

    #[test]
    fn sweep_and_curves() {
        let text = format!("{BASE}\n[sweep]\nvalues = [4, 8]\n\n[rate_curves]\nnu = [0.5]\neps_max = 0.9\neps_steps = 9\n");
        let cfg = ConfigFile::parse(&text).unwrap();
        let (cfgs, level) = cfg.sweep(&Overrides::default()).unwrap();
        assert_eq!(level, 0.9);
        assert_eq!(cfgs.len(), 2);
        assert_eq!(cfgs[1].1.delta_eval, 0.125);
        let grid = cfg.rate_curves_section().unwrap().eps_grid();
        assert_eq!(grid.len(), 10);
        assert!((grid[9] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn channel_families() {
        let noiseless = "schema_version = 1\n[channel]\nfamily = \"noiseless\"\n";
        assert!(ConfigFile::parse(noiseless).unwrap().channel().is_ok());
        let tab = r#"
schema_version = 1
[channel]
family = "tabulated"
f = { a = 0.0, b = 1.0 }
[[channel.anchors]]
state = 0.0
rows = [[0.9, 0.1], [0.1, 0.9]]
[[channel.anchors]]
state = 1.0
rows = [[0.7, 0.3], [0.3, 0.7]]
"#;
        let ch = ConfigFile::parse(tab).unwrap().channel().unwrap();
        assert!((ch.transition_prob(0.5, false, 1).unwrap() - 0.2).abs() < 1e-12);
        let bad = BASE.replace("nu = 0.5", "nu = 2.0");
        assert!(ConfigFile::parse(&bad).unwrap().channel().is_err());
    }
}
