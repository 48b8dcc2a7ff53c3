//! Seeded Monte Carlo experiments over independent trials.
//!
//! Trial `i` draws everything from `ChaCha8Rng::seed_from_u64(master_seed + i)`,
//! first the target (when uniform) and then the procedure's own draws, so the
//! output does not depend on how trials are spread over threads.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::MdChannel;
use crate::engine::{run_trial, stopping_time_pair, DecoderRule, ProcedureConfig, TrialRecord};
use crate::error::{Error, Result};
use crate::indexing::UnitPoint;
use crate::sortedpm::{pm_run, PmConfig, StopRule};
use crate::stats::{fit_line, quantile, LineFit, MeanSe};

/// Quantile levels reported for the achieved resolution.
pub const QUANTILE_LEVELS: [f64; 5] = [0.5, 0.75, 0.9, 0.95, 0.99];

/// Capped-trial fraction above which a bound check is rejected.
pub const CAP_CONTAMINATION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum Procedure {
    /// Query procedure without termination; `epsilon_term` must be 0.
    Alg1(ProcedureConfig),
    /// Query procedure with termination probability `epsilon_term`.
    Alg2(ProcedureConfig),
    SortedPm(PmConfig),
    SortedPmTerminated(PmConfig),
}

impl Procedure {
    pub fn name(&self) -> &'static str {
        match self {
            Procedure::Alg1(_) => "alg1",
            Procedure::Alg2(_) => "alg2",
            Procedure::SortedPm(_) => "sorted_pm",
            Procedure::SortedPmTerminated(_) => "sorted_pm_terminated",
        }
    }

    fn dim(&self) -> u32 {
        match self {
            Procedure::Alg1(c) | Procedure::Alg2(c) => c.partition.dim(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TruthMode {
    Uniform,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub procedure: Procedure,
    pub channel: MdChannel,
    pub n_trials: u64,
    pub master_seed: u64,
    pub truth_mode: TruthMode,
    pub delta_eval: f64,
    pub output_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Config("n_trials must be at least 1".into()));
        }
        if !(self.delta_eval > 0.0 && self.delta_eval < 1.0) {
            return Err(Error::Config(format!("delta_eval = {} not in (0, 1)", self.delta_eval)));
        }
        match &self.procedure {
            Procedure::Alg1(c) if c.epsilon_term != 0.0 => {
                return Err(Error::Config("alg1 runs without termination; use alg2".into()));
            }
            Procedure::Alg1(c) | Procedure::Alg2(c) => c.validate(&self.channel)?,
            Procedure::SortedPm(c) if c.epsilon_term != 0.0 => {
                return Err(Error::Config("sorted_pm runs without termination; use sorted_pm_terminated".into()));
            }
            Procedure::SortedPm(_) | Procedure::SortedPmTerminated(_) => {
                if !self.channel.is_binary_output() {
                    return Err(Error::Config("sorted posterior matching needs a binary-output channel".into()));
                }
            }
        }
        if let TruthMode::Fixed(s) = &self.truth_mode {
            if s.len() != self.procedure.dim() as usize {
                return Err(Error::Config(format!(
                    "fixed target has {} coordinates, procedure has dimension {}",
                    s.len(),
                    self.procedure.dim()
                )));
            }
            UnitPoint::from_f64(s).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn trial_seed(&self, i: u64) -> u64 {
        self.master_seed.wrapping_add(i)
    }

    /// Runs trial `i` on its own seed.
    pub fn run_one(&self, i: u64) -> Result<TrialRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.trial_seed(i));
        let truth = match &self.truth_mode {
            TruthMode::Uniform => UnitPoint::uniform(self.procedure.dim() as usize, &mut rng),
            TruthMode::Fixed(s) => UnitPoint::from_f64(s)?,
        };
        match &self.procedure {
            Procedure::Alg1(c) | Procedure::Alg2(c) => run_trial(c, &self.channel, &truth, self.delta_eval, &mut rng),
            Procedure::SortedPm(c) | Procedure::SortedPmTerminated(c) => {
                pm_run(c, &self.channel, &truth, self.delta_eval, &mut rng)
            }
        }
    }

    /// All trials, in trial order.
    pub fn run_trials(&self) -> Result<Vec<TrialRecord>> {
        self.validate()?;
        (0..self.n_trials).into_par_iter().map(|i| self.run_one(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub procedure: &'static str,
    pub n_trials: u64,
    pub mean_tau: MeanSe,
    pub excess_prob: MeanSe,
    /// `(level, resolution)` pairs.
    pub resolution_quantiles: Vec<(f64, f64)>,
    pub capped_fraction: f64,
    pub terminated_fraction: f64,
    pub trials_path: Option<PathBuf>,
}

impl ExperimentSummary {
    pub fn from_records(procedure: &'static str, records: &[TrialRecord]) -> Self {
        let mut res: Vec<f64> = records.iter().map(|r| r.resolution).collect();
        res.sort_by(f64::total_cmp);
        let n = records.len() as f64;
        Self {
            procedure,
            n_trials: records.len() as u64,
            mean_tau: MeanSe::of(records.iter().map(|r| r.tau as f64)),
            excess_prob: MeanSe::of_bools(records.iter().map(|r| r.excess)),
            resolution_quantiles: QUANTILE_LEVELS.iter().map(|&p| (p, quantile(&res, p))).collect(),
            capped_fraction: records.iter().filter(|r| r.capped).count() as f64 / n,
            terminated_fraction: records.iter().filter(|r| r.terminated).count() as f64 / n,
            trials_path: None,
        }
    }

    pub fn resolution_quantile(&self, level: f64) -> Option<f64> {
        self.resolution_quantiles.iter().find(|(p, _)| *p == level).map(|&(_, r)| r)
    }
}

/// Runs the experiment and, when `output_path` is set, writes the per-trial CSV
/// there and the summary next to it as `<stem>.summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let records = cfg.run_trials()?;
    let mut summary = ExperimentSummary::from_records(cfg.procedure.name(), &records);
    if let Some(path) = &cfg.output_path {
        fs::write(path, trials_csv(cfg, &records))?;
        fs::write(summary_path(path), summary_csv(cfg, &summary))?;
        summary.trials_path = Some(path.clone());
    }
    Ok(summary)
}

pub fn summary_path(trials: &Path) -> PathBuf {
    let stem = trials.file_stem().map_or_else(|| "trials".into(), |s| s.to_string_lossy().into_owned());
    trials.with_file_name(format!("{stem}.summary.csv"))
}

pub fn trials_csv(cfg: &ExperimentConfig, records: &[TrialRecord]) -> String {
    let d = cfg.procedure.dim() as usize;
    let mut out = String::from("trial,seed,tau,terminated,capped,excess,resolution,decoded_flat,true_flat,mean_query_size");
    for j in 1..=d {
        write!(out, ",truth_{j}").unwrap();
    }
    for j in 1..=d {
        write!(out, ",estimate_{j}").unwrap();
    }
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        write!(
            out,
            "{i},{},{},{},{},{},{},{},{},{}",
            cfg.trial_seed(i as u64),
            r.tau,
            r.terminated,
            r.capped,
            r.excess,
            r.resolution,
            r.decoded_flat.map_or(String::new(), |f| f.to_string()),
            r.true_flat,
            r.query_sizes.mean
        )
        .unwrap();
        for x in r.truth.iter().chain(&r.estimate) {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Key/value rows describing the run and its estimates.
pub fn summary_rows(cfg: &ExperimentConfig, s: &ExperimentSummary) -> Vec<(String, String)> {
    let mut rows: Vec<(String, String)> = vec![
        ("procedure".into(), s.procedure.into()),
        ("channel".into(), cfg.channel.to_string()),
        ("n_trials".into(), s.n_trials.to_string()),
        ("master_seed".into(), cfg.master_seed.to_string()),
        ("delta_eval".into(), cfg.delta_eval.to_string()),
    ];
    match &cfg.procedure {
        Procedure::Alg1(c) | Procedure::Alg2(c) => {
            rows.extend([
                ("m".into(), c.partition.bins_per_dim().to_string()),
                ("d".into(), c.partition.dim().to_string()),
                ("q".into(), c.q.to_string()),
                ("lambda".into(), c.lambda.to_string()),
                ("epsilon_term".into(), c.epsilon_term.to_string()),
                ("max_steps".into(), c.max_steps.to_string()),
                ("decoder".into(), format!("{:?}", c.decoder)),
            ]);
        }
        Procedure::SortedPm(c) | Procedure::SortedPmTerminated(c) => {
            rows.extend([
                ("m_pm".into(), c.m_pm.to_string()),
                ("n_queries".into(), c.n_queries.to_string()),
                ("epsilon_term".into(), c.epsilon_term.to_string()),
                (
                    "stop_rule".into(),
                    match c.stop_rule {
                        StopRule::FixedN => "fixed_n".into(),
                        StopRule::MassThreshold(t) => format!("mass_threshold({t})"),
                    },
                ),
                ("pm_order".into(), "weight descending, ties by ascending index".into()),
                ("pm_query".into(), "shortest prefix with mass closest to 1/2".into()),
                ("pm_state".into(), "crossover at the realized query length".into()),
                ("pm_estimate".into(), "centre of the heaviest bin".into()),
            ]);
        }
    }
    rows.extend([
        ("mean_tau".into(), s.mean_tau.mean.to_string()),
        ("mean_tau_se".into(), s.mean_tau.se.to_string()),
        ("mean_tau_error_bar".into(), s.mean_tau.error_bar().to_string()),
        ("excess_prob".into(), s.excess_prob.mean.to_string()),
        ("excess_prob_se".into(), s.excess_prob.se.to_string()),
        ("excess_prob_error_bar".into(), s.excess_prob.error_bar().to_string()),
        ("capped_fraction".into(), s.capped_fraction.to_string()),
        ("terminated_fraction".into(), s.terminated_fraction.to_string()),
    ]);
    for (p, r) in &s.resolution_quantiles {
        rows.push((format!("resolution_q{p}"), r.to_string()));
    }
    rows
}

pub fn summary_csv(cfg: &ExperimentConfig, s: &ExperimentSummary) -> String {
    rows_csv(&summary_rows(cfg, s))
}

pub fn rows_csv(rows: &[(String, String)]) -> String {
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        writeln!(out, "{k},{}", csv_field(v)).unwrap();
    }
    out
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

/// One experiment of a budget sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// `M` for the query procedure, the query count for sorted posterior matching.
    pub parameter: u64,
    pub summary: ExperimentSummary,
    pub resolution_quantile: f64,
    pub neg_log_quantile: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub level: f64,
    pub points: Vec<SweepPoint>,
    /// Fit of `-log(resolution quantile)` against the mean number of queries.
    pub fit: Option<LineFit>,
}

/// Runs each configuration and fits the decay of the `level` resolution
/// quantile against the mean number of queries.
pub fn run_sweep(cfgs: &[(u64, ExperimentConfig)], level: f64) -> Result<SweepResult> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::Config(format!("quantile level {level} not in (0, 1]")));
    }
    for (_, c) in cfgs {
        c.validate()?;
    }
    let mut points = Vec::with_capacity(cfgs.len());
    for (parameter, cfg) in cfgs {
        let records = cfg.run_trials()?;
        let summary = ExperimentSummary::from_records(cfg.procedure.name(), &records);
        let mut res: Vec<f64> = records.iter().map(|r| r.resolution).collect();
        res.sort_by(f64::total_cmp);
        let rq = quantile(&res, level);
        points.push(SweepPoint {
            parameter: *parameter,
            summary,
            resolution_quantile: rq,
            neg_log_quantile: -rq.ln(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.summary.mean_tau.mean).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.neg_log_quantile).collect();
    Ok(SweepResult { level, fit: fit_line(&xs, &ys), points })
}

pub fn sweep_csv(s: &SweepResult) -> String {
    let mut out = String::from(
        "parameter,mean_tau,mean_tau_se,excess_prob,excess_prob_se,capped_fraction,quantile_level,resolution_quantile,neg_log_quantile\n",
    );
    for p in &s.points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.parameter,
            p.summary.mean_tau.mean,
            p.summary.mean_tau.se,
            p.summary.excess_prob.mean,
            p.summary.excess_prob.se,
            p.summary.capped_fraction,
            s.level,
            p.resolution_quantile,
            p.neg_log_quantile
        )
        .unwrap();
    }
    out
}

/// Empirical check of the non-asymptotic guarantee of the query procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// `E[tau_1]` estimated from stopping-time pairs.
    pub expected_tau1: MeanSe,
    /// `Pr{tau_1 >= tau_2}`.
    pub order_prob: MeanSe,
    /// `(M^d - 1) Pr{tau_1 >= tau_2}` and its standard error.
    pub excess_bound: f64,
    pub excess_bound_se: f64,
    pub mean_tau: MeanSe,
    pub excess_prob: MeanSe,
    pub pair_capped_fraction: f64,
    pub trial_capped_fraction: f64,
    /// False when the decoder or termination setting is outside the guarantee.
    pub applicable: bool,
    pub contaminated: bool,
    pub tau_ok: bool,
    pub excess_ok: bool,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.applicable && !self.contaminated && self.tau_ok && self.excess_ok
    }

    pub fn rows(&self) -> Vec<(String, String)> {
        vec![
            ("expected_tau1".into(), self.expected_tau1.mean.to_string()),
            ("expected_tau1_se".into(), self.expected_tau1.se.to_string()),
            ("order_prob".into(), self.order_prob.mean.to_string()),
            ("order_prob_se".into(), self.order_prob.se.to_string()),
            ("excess_bound".into(), self.excess_bound.to_string()),
            ("excess_bound_se".into(), self.excess_bound_se.to_string()),
            ("mean_tau".into(), self.mean_tau.mean.to_string()),
            ("mean_tau_se".into(), self.mean_tau.se.to_string()),
            ("excess_prob".into(), self.excess_prob.mean.to_string()),
            ("excess_prob_se".into(), self.excess_prob.se.to_string()),
            ("pair_capped_fraction".into(), self.pair_capped_fraction.to_string()),
            ("trial_capped_fraction".into(), self.trial_capped_fraction.to_string()),
            ("applicable".into(), self.applicable.to_string()),
            ("contaminated".into(), self.contaminated.to_string()),
            ("tau_ok".into(), self.tau_ok.to_string()),
            ("excess_ok".into(), self.excess_ok.to_string()),
            ("holds".into(), self.holds().to_string()),
        ]
    }
}

/// Estimates both sides of the mean-stopping-time and excess-probability
/// bounds for a query-procedure experiment. Each bound passes if the realized
/// value is at most the estimate plus three combined standard errors.
pub fn validate_bounds(cfg: &ExperimentConfig) -> Result<BoundReport> {
    cfg.validate()?;
    let pc = match &cfg.procedure {
        Procedure::Alg1(c) | Procedure::Alg2(c) => c,
        _ => return Err(Error::Config("validate-t1 needs alg1 or alg2".into())),
    };
    let pairs = (0..cfg.n_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.trial_seed(i));
            rng.set_stream(1);
            stopping_time_pair(pc, &cfg.channel, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let records = cfg.run_trials()?;

    let expected_tau1 = MeanSe::of(pairs.iter().map(|p| p.tau1 as f64));
    let order_prob = MeanSe::of_bools(pairs.iter().map(|p| p.ordered()));
    let wrong = (pc.partition.total() - 1) as f64;
    let mean_tau = MeanSe::of(records.iter().map(|r| r.tau as f64));
    let excess_prob = MeanSe::of_bools(records.iter().map(|r| r.excess));
    let n = cfg.n_trials as f64;
    let pair_capped_fraction = pairs.iter().filter(|p| p.capped).count() as f64 / n;
    let trial_capped_fraction = records.iter().filter(|r| r.capped).count() as f64 / n;

    let excess_bound = wrong * order_prob.mean;
    let excess_bound_se = wrong * order_prob.se;
    Ok(BoundReport {
        tau_ok: mean_tau.mean <= expected_tau1.mean + 3.0 * mean_tau.se.hypot(expected_tau1.se),
        excess_ok: excess_prob.mean <= excess_bound + 3.0 * excess_prob.se.hypot(excess_bound_se),
        applicable: pc.decoder == DecoderRule::MaxQualifying && pc.epsilon_term == 0.0,
        contaminated: pair_capped_fraction.max(trial_capped_fraction) > CAP_CONTAMINATION,
        expected_tau1,
        order_prob,
        excess_bound,
        excess_bound_se,
        mean_tau,
        excess_prob,
        pair_capped_fraction,
        trial_capped_fraction,
    })
}
