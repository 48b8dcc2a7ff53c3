//! The information-density query procedure and its termination variant.
//!
//! Every step draws one `Bern(q)` bit per bin, asks whether the target lies in
//! the union of the bins whose bit is 1, and passes the true answer through the
//! channel at the *realized* query size. Each bin accumulates the density of its
//! own bit against the response, always evaluated at the *nominal* size `q`.
//! The procedure stops the first time some bin reaches `lambda`.
//!
//! Two interchangeable backends produce trials with the same law:
//! [`Backend::Dense`] materialises all `M^d` bits every step, while
//! [`Backend::Lumped`] exploits the exchangeability of the wrong bins and only
//! tracks how many of them sit in each agreement-count class, which makes
//! partitions with up to `2^62` bins tractable.

mod dense;
mod lumped;

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::channel::MdChannel;
use crate::error::{Error, Result};
use crate::indexing::{BinIndex, Partition, UnitPoint};
use crate::infodensity::{DensityAccumulator, DensityParams};

/// How the decoder picks a bin once the threshold is crossed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderRule {
    /// Largest flat index whose density reaches `lambda`.
    #[default]
    MaxQualifying,
    /// Largest density; ties go to the largest flat index.
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Dense for small partitions and non-binary outputs, lumped otherwise.
    #[default]
    Auto,
    Dense,
    Lumped,
}

/// Partitions up to this many bins run densely under [`Backend::Auto`].
pub const AUTO_DENSE_LIMIT: u64 = 4096;

/// Largest partition the dense backend accepts.
pub const DENSE_LIMIT: u64 = 1 << 26;

/// Parameters `(M, d, q, lambda, epsilon)` of one query procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcedureConfig {
    pub partition: Partition,
    pub q: f64,
    pub lambda: f64,
    /// Probability of giving up before the first query; 0 is the plain procedure
    /// and 1 the degenerate always-terminate case.
    pub epsilon_term: f64,
    pub max_steps: u64,
    pub decoder: DecoderRule,
    pub backend: Backend,
}

impl ProcedureConfig {
    pub fn new(m: u64, d: u32, q: f64, lambda: f64) -> Result<Self> {
        let cfg = Self {
            partition: Partition::new(m, d)?,
            q,
            lambda,
            epsilon_term: 0.0,
            max_steps: default_max_steps(lambda),
            decoder: DecoderRule::default(),
            backend: Backend::default(),
        };
        cfg.check_ranges()?;
        Ok(cfg)
    }

    pub fn with_termination(mut self, epsilon_term: f64) -> Result<Self> {
        self.epsilon_term = epsilon_term;
        self.check_ranges()?;
        Ok(self)
    }

    pub fn with_max_steps(mut self, max_steps: u64) -> Result<Self> {
        self.max_steps = max_steps;
        self.check_ranges()?;
        Ok(self)
    }

    pub fn with_decoder(mut self, decoder: DecoderRule) -> Self {
        self.decoder = decoder;
        self
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    fn check_ranges(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::Domain { what: "q", value: self.q });
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain { what: "lambda", value: self.lambda });
        }
        if !(0.0..=1.0).contains(&self.epsilon_term) {
            return Err(Error::Domain { what: "epsilon_term", value: self.epsilon_term });
        }
        if self.max_steps == 0 || self.max_steps >= u32::MAX as u64 {
            return Err(Error::Precondition(format!("max_steps = {} out of range", self.max_steps)));
        }
        Ok(())
    }

    /// Checks the ranges and that the channel supports this procedure.
    pub fn validate(&self, ch: &MdChannel) -> Result<()> {
        self.check_ranges()?;
        DensityParams::nominal(ch, self.q)?;
        match self.resolved_backend(ch) {
            Backend::Dense if self.partition.total() > DENSE_LIMIT => Err(Error::Precondition(format!(
                "dense backend limited to {DENSE_LIMIT} bins, partition has {}",
                self.partition.total()
            ))),
            Backend::Lumped if !ch.is_binary_output() => Err(Error::Precondition(
                "lumped backend needs a binary-output channel".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn resolved_backend(&self, ch: &MdChannel) -> Backend {
        match self.backend {
            Backend::Auto if self.partition.total() <= AUTO_DENSE_LIMIT || !ch.is_binary_output() => {
                Backend::Dense
            }
            Backend::Auto => Backend::Lumped,
            other => other,
        }
    }
}

/// `50 * ceil(lambda / 0.01)`.
pub fn default_max_steps(lambda: f64) -> u64 {
    let steps = 50.0 * (lambda / 0.01).ceil();
    if steps.is_finite() && steps >= 1.0 {
        (steps as u64).min(u32::MAX as u64 - 1)
    } else {
        1
    }
}

/// `lambda = ln((M^d - 1) / target_eps)`.
pub fn choose_lambda(m: u64, d: u32, target_eps: f64) -> Result<f64> {
    if !(target_eps > 0.0 && target_eps < 1.0) {
        return Err(Error::Domain { what: "target_eps", value: target_eps });
    }
    let total = Partition::new(m, d)?.total();
    if total < 2 {
        return Err(Error::Precondition("choose_lambda needs at least two bins".into()));
    }
    Ok(((total - 1) as f64 / target_eps).ln())
}

/// Summary of the realized query sizes `|A_t|` of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuerySizeStats {
    pub count: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl QuerySizeStats {
    pub(crate) fn push(&mut self, size: f64) {
        if self.count == 0 {
            self.min = size;
            self.max = size;
        } else {
            self.min = self.min.min(size);
            self.max = self.max.max(size);
        }
        self.count += 1;
        self.mean += (size - self.mean) / self.count as f64;
    }
}

/// One simulated search.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    /// Number of queries asked; 0 when terminated up front.
    pub tau: u64,
    pub terminated: bool,
    /// The step cap was hit before any bin crossed the threshold.
    pub capped: bool,
    pub estimate: Vec<f64>,
    pub truth: Vec<f64>,
    /// `||estimate - truth||_inf`, computed on the exact target.
    pub resolution: f64,
    pub delta_eval: f64,
    /// Some coordinate missed by more than `delta_eval`; capped trials always count.
    pub excess: bool,
    pub decoded_flat: Option<u64>,
    pub true_flat: u64,
    pub query_sizes: QuerySizeStats,
}

/// One query of a traced trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    /// Realized query size `|A_t|`.
    pub size: f64,
    /// Noiseless answer `1(S in A_t)`.
    pub answer: bool,
    pub response: usize,
}

/// Raw backend result: stopping step, decoded bin, size statistics.
#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub tau: u64,
    pub capped: bool,
    pub decoded: u64,
    pub sizes: QuerySizeStats,
}

/// Runs one trial of the procedure against the target `truth`.
///
/// The termination coin is always the first draw from `rng` (also when
/// `epsilon_term = 0`), so the same seed gives the same non-terminated
/// trajectory with and without termination.
pub fn run_trial<R: Rng + ?Sized>(
    cfg: &ProcedureConfig,
    ch: &MdChannel,
    truth: &UnitPoint,
    delta_eval: f64,
    rng: &mut R,
) -> Result<TrialRecord> {
    run_trial_inner(cfg, ch, truth, delta_eval, rng, None)
}

/// [`run_trial`] that also records every query's size, answer and response.
pub fn run_trial_traced<R: Rng + ?Sized>(
    cfg: &ProcedureConfig,
    ch: &MdChannel,
    truth: &UnitPoint,
    delta_eval: f64,
    rng: &mut R,
    trace: &mut Vec<StepTrace>,
) -> Result<TrialRecord> {
    run_trial_inner(cfg, ch, truth, delta_eval, rng, Some(trace))
}

fn run_trial_inner<R: Rng + ?Sized>(
    cfg: &ProcedureConfig,
    ch: &MdChannel,
    truth: &UnitPoint,
    delta_eval: f64,
    rng: &mut R,
    trace: Option<&mut Vec<StepTrace>>,
) -> Result<TrialRecord> {
    cfg.validate(ch)?;
    let p = &cfg.partition;
    if truth.dim() != p.dim() as usize {
        return Err(Error::Precondition(format!(
            "target has dimension {}, partition has {}",
            truth.dim(),
            p.dim()
        )));
    }
    let true_flat = p.gamma(&p.bin_of_point(truth))?;
    let z: f64 = rng.gen();
    if z < cfg.epsilon_term {
        return Ok(terminated_record(truth, true_flat, delta_eval));
    }
    let params = DensityParams::nominal(ch, cfg.q)?;
    let out = match cfg.resolved_backend(ch) {
        Backend::Lumped => lumped::run(cfg, ch, &params, true_flat, rng, trace)?,
        _ => dense::run(cfg, ch, &params, true_flat, rng, trace)?,
    };
    let idx = p.gamma_inv(out.decoded)?;
    let resolution = p.center_error(&idx, truth);
    Ok(TrialRecord {
        tau: out.tau,
        terminated: false,
        capped: out.capped,
        estimate: p.bin_center(&idx)?,
        truth: truth.to_f64(),
        resolution,
        delta_eval,
        excess: out.capped || resolution > delta_eval,
        decoded_flat: Some(out.decoded),
        true_flat,
        query_sizes: out.sizes,
    })
}

/// Record of a trial that gave up before querying and answered the cube centre.
pub(crate) fn terminated_record(truth: &UnitPoint, true_flat: u64, delta_eval: f64) -> TrialRecord {
    let d = truth.dim();
    let centre = Partition::new(1, d as u32).expect("unit partition");
    let resolution = centre.center_error(&BinIndex(vec![1; d]), truth);
    TrialRecord {
        tau: 0,
        terminated: true,
        capped: false,
        estimate: vec![0.5; d],
        truth: truth.to_f64(),
        resolution,
        delta_eval,
        excess: resolution > delta_eval,
        decoded_flat: None,
        true_flat,
        query_sizes: QuerySizeStats::default(),
    }
}

/// First crossing times of bin 1 (the transmitted bin) and bin 2 on a common
/// response stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoppingPair {
    /// First step at which bin 1 reaches `lambda`, or `max_steps` if capped.
    pub tau1: u64,
    /// First step at which bin 2 reaches `lambda`, if that happens no later
    /// than `tau1`. `None` means `tau2 > tau1`.
    pub tau2: Option<u64>,
    pub capped: bool,
}

impl StoppingPair {
    /// The event `tau1 >= tau2`; a capped run counts as the event.
    pub fn ordered(&self) -> bool {
        self.tau2.is_some() || self.capped
    }
}

/// Samples `(tau_1, tau_2)` with bin 1 transmitted and queries drawn as in the
/// procedure. Only the count of the other `M^d - 2` bits is needed for the
/// realized query size, so the cost per step does not depend on `M^d`.
///
/// The walk stops at `tau_1`: the ordering of the two times is then known.
pub fn stopping_time_pair<R: Rng + ?Sized>(
    cfg: &ProcedureConfig,
    ch: &MdChannel,
    rng: &mut R,
) -> Result<StoppingPair> {
    cfg.validate(ch)?;
    let total = cfg.partition.total();
    if total < 2 {
        return Err(Error::Precondition("stopping_time_pair needs at least two bins".into()));
    }
    let params = DensityParams::nominal(ch, cfg.q)?;
    let others = Binomial::new(total - 2, cfg.q).map_err(|e| Error::Precondition(e.to_string()))?;
    let mut acc = DensityAccumulator::new(&params, 2);
    let mut tau2 = None;
    for t in 1..=cfg.max_steps {
        let x1 = rng.gen_bool(cfg.q);
        let x2 = rng.gen_bool(cfg.q);
        let ones = others.sample(rng) + x1 as u64 + x2 as u64;
        let size = ones as f64 / total as f64;
        let y = ch.law(size)?.sample(x1, rng);
        acc.accumulate(&[x1, x2], y)?;
        let (d1, d2) = (acc.density(0), acc.density(1));
        if tau2.is_none() && d2 >= cfg.lambda {
            tau2 = Some(t);
        }
        if d1 >= cfg.lambda {
            return Ok(StoppingPair { tau1: t, tau2, capped: false });
        }
    }
    Ok(StoppingPair {
        tau1: cfg.max_steps,
        tau2,
        capped: true,
    })
}
