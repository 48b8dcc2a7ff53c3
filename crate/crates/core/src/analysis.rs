//! Capacities and asymptotic resolution-decay rates. All values are in nats.

use crate::channel::{LipschitzFn, MdChannel};
use crate::error::{Error, Result};
use crate::infodensity::mutual_information;

/// Default tolerance on the maximising `q`.
pub const DEFAULT_TOL: f64 = 1e-10;

const GRID_STEPS: u32 = 1000;
const PROBES: [f64; 3] = [0.25, 0.5, 0.75];

pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain { what: "binary entropy argument", value: p });
    }
    Ok(h(p) + h(1.0 - p))
}

fn h(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Same constraints as [`MdChannel::md_bsc`], except that `nu = 0` is allowed.
fn validate_bsc(nu: f64, f: &LipschitzFn) -> Result<()> {
    if nu == 0.0 {
        return Ok(());
    }
    MdChannel::md_bsc(nu, *f).map(|_| ())
}

/// `P(Y = 1)` when the query has size `q` and the answer is `Bern(q)`.
pub fn beta(nu: f64, q: f64, f: &LipschitzFn) -> Result<f64> {
    validate_bsc(nu, f)?;
    crate::channel::check_unit("q", q)?;
    let p = nu * f.eval(q)?;
    Ok(q * (1.0 - p) + (1.0 - q) * p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Grid,
    GoldenSection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityResult {
    pub value: f64,
    pub argmax_q: f64,
    pub method: Method,
    pub tolerance: f64,
}

/// Maximises `obj` on `[0,1]`: a grid of step `1e-3` picks the bracket, golden
/// section refines inside it.
fn maximise(obj: impl Fn(f64) -> f64, tol: f64) -> Result<CapacityResult> {
    if !(tol > 0.0) {
        return Err(Error::Domain { what: "tolerance", value: tol });
    }
    let (mut best_i, mut best) = (0u32, f64::NEG_INFINITY);
    for i in 0..=GRID_STEPS {
        let v = obj(i as f64 / GRID_STEPS as f64);
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let mut result = CapacityResult {
        value: best,
        argmax_q: best_i as f64 / GRID_STEPS as f64,
        method: Method::Grid,
        tolerance: tol,
    };

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = best_i.saturating_sub(1) as f64 / GRID_STEPS as f64;
    let mut b = (best_i + 1).min(GRID_STEPS) as f64 / GRID_STEPS as f64;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (obj(c), obj(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = obj(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = obj(d);
        }
    }
    for (q, v) in [(c, fc), (d, fd)] {
        if v > result.value {
            result = CapacityResult { value: v, argmax_q: q, method: Method::GoldenSection, tolerance: tol };
        }
    }
    debug_assert!(PROBES.iter().all(|&q| obj(q) <= result.value));
    Ok(result)
}

fn bsc_objective(nu: f64, f: &LipschitzFn, q: f64) -> f64 {
    let p = nu * f.eval(q).expect("q in [0,1]");
    let b = q * (1.0 - p) + (1.0 - q) * p;
    h(b) + h(1.0 - b) - h(p) - h(1.0 - p)
}

/// `max_q h_b(beta(nu, q)) - h_b(nu f(q))`.
pub fn capacity_bsc(nu: f64, f: &LipschitzFn, tol: f64) -> Result<CapacityResult> {
    validate_bsc(nu, f)?;
    maximise(|q| bsc_objective(nu, f, q), tol)
}

/// `max_q E[i(X;Y)]` under `Bern(q)` inputs and the channel at state `f(q)`,
/// by enumeration of the joint law.
pub fn capacity_general(ch: &MdChannel, tol: f64) -> Result<CapacityResult> {
    let objective = |q: f64| mutual_information(&ch.law(q).expect("validated channel"), q);
    maximise(objective, tol)
}

/// Capacity of the measurement-independent BSC with crossover `nu * alpha`.
pub fn capacity_measurement_independent(nu: f64, alpha: f64, tol: f64) -> Result<CapacityResult> {
    capacity_bsc(nu, &LipschitzFn::constant(alpha)?, tol)
}

/// `log 2 - h_b(nu f(0))`.
pub fn sorted_pm_rate(nu: f64, f: &LipschitzFn) -> Result<f64> {
    validate_bsc(nu, f)?;
    Ok(std::f64::consts::LN_2 - binary_entropy(nu * f.eval(0.0)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateProcedure {
    Alg2,
    SortedPm,
    SortedPmTerminated,
    MeasurementIndependent,
}

impl RateProcedure {
    pub const ALL: [RateProcedure; 4] = [
        RateProcedure::Alg2,
        RateProcedure::SortedPm,
        RateProcedure::SortedPmTerminated,
        RateProcedure::MeasurementIndependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RateProcedure::Alg2 => "alg2",
            RateProcedure::SortedPm => "sorted_pm",
            RateProcedure::SortedPmTerminated => "sorted_pm_terminated",
            RateProcedure::MeasurementIndependent => "measurement_independent",
        }
    }
}

/// Rate per query per dimension against the excess-resolution probability.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCurve {
    pub procedure: RateProcedure,
    pub nu: f64,
    pub f: LipschitzFn,
    pub d: u32,
    /// Maximising `q` of the capacity behind the curve, where one is involved.
    pub argmax_q: Option<f64>,
    /// `(epsilon, rate)` pairs.
    pub points: Vec<(f64, f64)>,
}

/// Asymptotic decay-rate curves over `eps_grid`, dropping the `O(log l)` term.
///
/// The measurement-independent curve uses the constant state `mi_alpha`,
/// defaulting to `f(1/2)`.
pub fn rate_curves(
    nu: f64,
    f: &LipschitzFn,
    eps_grid: &[f64],
    d: u32,
    procedures: &[RateProcedure],
    mi_alpha: Option<f64>,
) -> Result<Vec<RateCurve>> {
    validate_bsc(nu, f)?;
    if d == 0 {
        return Err(Error::Precondition("dimension must be at least 1".into()));
    }
    if let Some(&e) = eps_grid.iter().find(|e| !(0.0..1.0).contains(*e)) {
        return Err(Error::Domain { what: "epsilon", value: e });
    }
    let sorted = procedures
        .iter()
        .any(|p| matches!(p, RateProcedure::SortedPm | RateProcedure::SortedPmTerminated));
    if sorted && d != 1 {
        return Err(Error::Precondition(format!("sorted posterior matching curves need d = 1 (d = {d})")));
    }
    let dd = d as f64;
    procedures
        .iter()
        .map(|&procedure| {
            let (base, argmax_q, scaled) = match procedure {
                RateProcedure::Alg2 => {
                    let c = capacity_bsc(nu, f, DEFAULT_TOL)?;
                    (c.value / dd, Some(c.argmax_q), true)
                }
                RateProcedure::SortedPm => (sorted_pm_rate(nu, f)?, None, false),
                RateProcedure::SortedPmTerminated => (sorted_pm_rate(nu, f)?, None, true),
                RateProcedure::MeasurementIndependent => {
                    let alpha = mi_alpha.unwrap_or(f.eval(0.5)?);
                    let c = capacity_measurement_independent(nu, alpha, DEFAULT_TOL)?;
                    (c.value / dd, Some(c.argmax_q), true)
                }
            };
            let points = eps_grid
                .iter()
                .map(|&e| (e, if scaled { base / (1.0 - e) } else { base }))
                .collect();
            Ok(RateCurve { procedure, nu, f: *f, d, argmax_q, points })
        })
        .collect()
}

/// Smallest `epsilon` at which the terminated procedure's rate `C_f / (d (1 - epsilon))`
/// reaches the sorted posterior matching rate, found by bisection. `None` when
/// it already does at `epsilon = 0`.
pub fn crossover_epsilon(nu: f64, f: &LipschitzFn, d: u32) -> Result<Option<f64>> {
    let c = capacity_bsc(nu, f, DEFAULT_TOL)?.value / d as f64;
    let pm = sorted_pm_rate(nu, f)?;
    let gap = |e: f64| c / (1.0 - e) - pm;
    if gap(0.0) >= 0.0 {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0, 1.0 - 1e-15);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(Some(hi))
}
