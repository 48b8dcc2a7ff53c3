//! Measurement-dependent channels.
//!
//! The oracle's binary answer is passed through a discrete memoryless channel
//! whose law depends on the query only through its Lebesgue size `|A|`: the
//! channel state is `f(|A|)` for a bounded Lipschitz map `f`. Every method that
//! takes a `size` argument expects the query size and applies `f` itself.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Affine state map `f(q) = a + b q` on `[0, 1]`; a constant map has `b = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzFn {
    a: f64,
    b: f64,
}

impl LipschitzFn {
    /// Builds `f(q) = a + b q`, rejecting maps that go negative on `[0, 1]`.
    pub fn affine(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidChannel(format!(
                "state map coefficients must be finite (a = {a}, b = {b})"
            )));
        }
        if a < 0.0 || a + b < 0.0 {
            return Err(Error::InvalidChannel(format!(
                "state map f(q) = {a} + {b} q is negative on [0, 1]"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn constant(alpha: f64) -> Result<Self> {
        Self::affine(alpha, 0.0)
    }

    pub fn intercept(&self) -> f64 {
        self.a
    }

    pub fn slope(&self) -> f64 {
        self.b
    }

    /// Lipschitz constant `K = |b|`.
    pub fn lipschitz_constant(&self) -> f64 {
        self.b.abs()
    }

    pub fn is_constant(&self) -> bool {
        self.b == 0.0
    }

    pub fn max_on_unit(&self) -> f64 {
        self.a.max(self.a + self.b)
    }

    pub fn min_on_unit(&self) -> f64 {
        self.a.min(self.a + self.b)
    }

    /// Evaluates `f(size)`; `size` must lie in `[0, 1]`.
    pub fn eval(&self, size: f64) -> Result<f64> {
        check_unit("query size", size)?;
        Ok(self.at(size))
    }

    #[inline]
    pub(crate) fn at(&self, size: f64) -> f64 {
        self.a + self.b * size
    }
}

impl fmt::Display for LipschitzFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f(q)={}{:+}q", self.a, self.b)
    }
}

/// See [`LipschitzFn::eval`].
pub fn eval_state(f: &LipschitzFn, size: f64) -> Result<f64> {
    f.eval(size)
}

pub(crate) fn check_unit(what: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Domain { what, value })
    }
}

/// A channel row table at one anchor state of a tabulated channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub state: f64,
    /// `rows[x][y] = P(y | x)`.
    pub rows: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelFamily {
    /// Binary symmetric channel with crossover `nu * f(|A|)`.
    MdBsc { nu: f64 },
    /// Rows given at anchor states and interpolated linearly in between.
    Tabulated { anchors: Vec<Anchor> },
}

/// Conditional law `P(y | x)` of the channel for one particular query size.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLaw {
    rows: [Vec<f64>; 2],
}

impl ChannelLaw {
    pub fn new(rows: [Vec<f64>; 2]) -> Result<Self> {
        validate_rows(&rows)?;
        Ok(Self { rows })
    }

    fn bsc(crossover: f64) -> Self {
        Self {
            rows: [vec![1.0 - crossover, crossover], vec![crossover, 1.0 - crossover]],
        }
    }

    pub fn outputs(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, x: bool) -> &[f64] {
        &self.rows[x as usize]
    }

    pub fn prob(&self, x: bool, y: usize) -> Result<f64> {
        self.rows[x as usize]
            .get(y)
            .copied()
            .ok_or(Error::UnknownSymbol {
                symbol: y,
                alphabet: self.outputs(),
            })
    }

    /// Draws `y ~ P(. | x)` by inverse-CDF on a single uniform.
    pub fn sample<R: Rng + ?Sized>(&self, x: bool, rng: &mut R) -> usize {
        let row = &self.rows[x as usize];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (y, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return y;
            }
        }
        // rounding left u in the last sliver; pick the last symbol with mass
        row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
    }
}

fn validate_rows(rows: &[Vec<f64>; 2]) -> Result<()> {
    let n = rows[0].len();
    if n < 2 || rows[1].len() != n {
        return Err(Error::InvalidChannel(format!(
            "rows must share an output alphabet of size >= 2 (got {} and {})",
            rows[0].len(),
            rows[1].len()
        )));
    }
    for (x, row) in rows.iter().enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidChannel(format!("row {x} has a negative or non-finite entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidChannel(format!("row {x} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// A measurement-dependent discrete memoryless channel `P^{f(|A|)}_{Y|X}`.
///
/// Immutable once built; validity over every query size in `[0, 1]` is
/// established by the constructors.
#[derive(Debug, Clone, PartialEq)]
pub struct MdChannel {
    family: ChannelFamily,
    f: LipschitzFn,
    outputs: usize,
}

impl MdChannel {
    /// Measurement-dependent BSC with parameter `nu`.
    ///
    /// Rejects `nu` outside `(0, 1]` and any `f` with `nu * max f > 1/2`.
    pub fn md_bsc(nu: f64, f: LipschitzFn) -> Result<Self> {
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(Error::Domain { what: "nu", value: nu });
        }
        let worst = nu * f.max_on_unit();
        if worst > 0.5 {
            return Err(Error::InvalidChannel(format!(
                "nu * max f = {worst} exceeds 1/2 for nu = {nu}, {f}"
            )));
        }
        Ok(Self {
            family: ChannelFamily::MdBsc { nu },
            f,
            outputs: 2,
        })
    }

    /// Channel whose answers are never flipped.
    pub fn noiseless() -> Self {
        Self {
            family: ChannelFamily::MdBsc { nu: 1.0 },
            f: LipschitzFn { a: 0.0, b: 0.0 },
            outputs: 2,
        }
    }

    /// Tabulated channel: state `f(|A|)` selects rows by linear interpolation
    /// between anchors. The anchors must cover `f([0, 1])`.
    pub fn tabulated(f: LipschitzFn, mut anchors: Vec<Anchor>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InvalidChannel("tabulated channel needs at least one anchor".into()));
        }
        anchors.sort_by(|l, r| l.state.total_cmp(&r.state));
        for w in anchors.windows(2) {
            if w[0].state == w[1].state {
                return Err(Error::InvalidChannel(format!("duplicate anchor state {}", w[0].state)));
            }
        }
        let outputs = anchors[0].rows[0].len();
        for anchor in &anchors {
            if !anchor.state.is_finite() {
                return Err(Error::InvalidChannel("anchor state must be finite".into()));
            }
            validate_rows(&anchor.rows)?;
            if anchor.rows[0].len() != outputs {
                return Err(Error::InvalidChannel("anchors disagree on the output alphabet".into()));
            }
        }
        let (lo, hi) = (anchors[0].state, anchors[anchors.len() - 1].state);
        if f.min_on_unit() < lo || f.max_on_unit() > hi {
            return Err(Error::InvalidChannel(format!(
                "{f} leaves the anchor range [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            family: ChannelFamily::Tabulated { anchors },
            f,
            outputs,
        })
    }

    pub fn family(&self) -> &ChannelFamily {
        &self.family
    }

    pub fn state_map(&self) -> &LipschitzFn {
        &self.f
    }

    pub fn output_alphabet_size(&self) -> usize {
        self.outputs
    }

    pub fn is_binary_output(&self) -> bool {
        self.outputs == 2
    }

    /// `nu` of an mdBSC, `None` for tabulated channels.
    pub fn nu(&self) -> Option<f64> {
        match self.family {
            ChannelFamily::MdBsc { nu } => Some(nu),
            ChannelFamily::Tabulated { .. } => None,
        }
    }

    /// Crossover `nu * f(size)` of an mdBSC.
    pub fn crossover(&self, size: f64) -> Result<Option<f64>> {
        check_unit("query size", size)?;
        Ok(self.nu().map(|nu| nu * self.f.at(size)))
    }

    /// The full conditional law for a query of the given size.
    pub fn law(&self, size: f64) -> Result<ChannelLaw> {
        check_unit("query size", size)?;
        let state = self.f.at(size);
        match &self.family {
            ChannelFamily::MdBsc { nu } => {
                let crossover = nu * state;
                if !(0.0..=0.5).contains(&crossover) {
                    return Err(Error::InvalidState { size, crossover });
                }
                Ok(ChannelLaw::bsc(crossover))
            }
            ChannelFamily::Tabulated { anchors } => Ok(interpolate(anchors, state)),
        }
    }

    /// `P^{f(size)}_{Y|X}(y | x)`.
    pub fn transition_prob(&self, size: f64, x: bool, y: usize) -> Result<f64> {
        self.law(size)?.prob(x, y)
    }

    /// Noisy response to a query of the given size whose true answer is `x`.
    pub fn sample_response<R: Rng + ?Sized>(&self, size: f64, x: bool, rng: &mut R) -> Result<usize> {
        Ok(self.law(size)?.sample(x, rng))
    }

    /// Measures the continuity condition at query size `q` with perturbation `xi`.
    ///
    /// The left-hand side is the larger of the two entrywise sup-norms of
    /// `log(P^q / P^{q +- xi})`. Entries that vanish in both laws are skipped;
    /// an entry vanishing in only one of them makes the left-hand side infinite.
    pub fn check_continuity(&self, q: f64, xi: f64, c: f64) -> Result<ContinuityReport> {
        if !(xi > 0.0 && xi < q.min(1.0 - q)) {
            return Err(Error::Precondition(format!(
                "need 0 < xi < min(q, 1 - q); got q = {q}, xi = {xi}"
            )));
        }
        if !(c >= 0.0) {
            return Err(Error::Domain { what: "c", value: c });
        }
        let centre = self.law(q)?;
        let mut lhs: f64 = 0.0;
        for other in [self.law(q + xi)?, self.law(q - xi)?] {
            for x in [false, true] {
                for (&p, &r) in centre.row(x).iter().zip(other.row(x)) {
                    let term = match (p > 0.0, r > 0.0) {
                        (false, false) => 0.0,
                        (true, true) => (p / r).ln().abs(),
                        _ => f64::INFINITY,
                    };
                    lhs = lhs.max(term);
                }
            }
        }
        Ok(ContinuityReport {
            q,
            xi,
            lhs,
            bound_c: c,
            satisfied: lhs <= c * xi,
        })
    }
}

fn interpolate(anchors: &[Anchor], state: f64) -> ChannelLaw {
    let hi = anchors.partition_point(|a| a.state < state);
    let rows = if hi == 0 {
        anchors[0].rows.clone()
    } else if hi == anchors.len() {
        anchors[hi - 1].rows.clone()
    } else {
        let (l, r) = (&anchors[hi - 1], &anchors[hi]);
        let t = (state - l.state) / (r.state - l.state);
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(p, q)| (1.0 - t) * p + t * q).collect()
        };
        [mix(&l.rows[0], &r.rows[0]), mix(&l.rows[1], &r.rows[1])]
    };
    ChannelLaw { rows }
}

impl fmt::Display for MdChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            ChannelFamily::MdBsc { nu } => write!(f, "md-bsc nu={nu} {}", self.f),
            ChannelFamily::Tabulated { anchors } => write!(
                f,
                "tabulated |Y|={} anchors={} {}",
                self.outputs,
                anchors.len(),
                self.f
            ),
        }
    }
}

/// Outcome of [`MdChannel::check_continuity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityReport {
    pub q: f64,
    pub xi: f64,
    pub lhs: f64,
    pub bound_c: f64,
    pub satisfied: bool,
}
