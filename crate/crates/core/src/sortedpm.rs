//! Sorted posterior matching on a fixed grid of `M_pm` bins over `[0,1]`.
//!
//! Each step sorts the bins by posterior weight (descending, ties by ascending
//! index), queries the shortest sorted prefix whose mass is closest to `1/2`,
//! passes the answer through the channel at the prefix's total length, and
//! applies Bayes' rule. The estimate is the centre of the heaviest bin.
//!
//! [`PosteriorState`] keeps one weight per bin. [`GroupedPosterior`] keeps bins
//! of equal weight together as sorted index runs; at most one group is split per
//! step, so its cost depends on the number of steps and not on `M_pm`.
//! Weights within a relative `1e-12` of each other are treated as tied in both.

use rand::Rng;

use crate::channel::MdChannel;
use crate::engine::{terminated_record, QuerySizeStats, StepTrace, TrialRecord, DENSE_LIMIT};
use crate::error::{Error, Result};
use crate::indexing::{BinIndex, Partition, UnitPoint, MAX_BINS};

const TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Always issue the full query budget.
    FixedN,
    /// Stop early once the heaviest bin holds at least this mass.
    MassThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PmBackend {
    #[default]
    Grouped,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmConfig {
    pub m_pm: u64,
    pub n_queries: u64,
    pub stop_rule: StopRule,
    pub epsilon_term: f64,
    pub backend: PmBackend,
}

impl PmConfig {
    pub fn new(m_pm: u64, n_queries: u64) -> Result<Self> {
        let cfg = Self {
            m_pm,
            n_queries,
            stop_rule: StopRule::FixedN,
            epsilon_term: 0.0,
            backend: PmBackend::Grouped,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn with_stop_rule(mut self, stop_rule: StopRule) -> Result<Self> {
        self.stop_rule = stop_rule;
        self.check()?;
        Ok(self)
    }

    pub fn with_termination(mut self, epsilon_term: f64) -> Result<Self> {
        self.epsilon_term = epsilon_term;
        self.check()?;
        Ok(self)
    }

    pub fn with_backend(mut self, backend: PmBackend) -> Result<Self> {
        self.backend = backend;
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if self.m_pm == 0 || self.m_pm > MAX_BINS {
            return Err(Error::Domain { what: "M_pm", value: self.m_pm as f64 });
        }
        if self.backend == PmBackend::Dense && self.m_pm > DENSE_LIMIT {
            return Err(Error::Precondition(format!(
                "dense posterior limited to {DENSE_LIMIT} bins (M_pm = {})",
                self.m_pm
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon_term) {
            return Err(Error::Domain { what: "epsilon_term", value: self.epsilon_term });
        }
        if let StopRule::MassThreshold(theta) = self.stop_rule {
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(Error::Domain { what: "mass threshold", value: theta });
            }
        }
        Ok(())
    }
}

/// Where the sorted prefix ends: all blocks before `block`, plus the first
/// `take` bins of `block`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cut {
    block: usize,
    take: u64,
    len: u64,
}

/// Shortest prefix of the sorted blocks `(weight per bin, bins)` whose mass is
/// closest to `1/2`.
fn choose_prefix(blocks: impl Iterator<Item = (f64, u64)>) -> Cut {
    let mut mass = 0.0;
    let mut len = 0u64;
    let mut last = Cut { block: 0, take: 0, len: 0 };
    for (b, (w, c)) in blocks.enumerate() {
        let full = mass + c as f64 * w;
        if full < 0.5 {
            mass = full;
            len += c;
            last = Cut { block: b, take: c, len };
            continue;
        }
        let lo = (((0.5 - mass) / w).floor().max(0.0) as u64).min(c);
        let hi = (lo + 1).min(c);
        let dist = |j: u64| (mass + j as f64 * w - 0.5).abs();
        let take = if len + lo == 0 || dist(hi) < dist(lo) - TIE { hi } else { lo };
        return Cut { block: b, take, len: len + take };
    }
    last
}

fn check_binary(ch: &MdChannel) -> Result<()> {
    if !ch.is_binary_output() {
        return Err(Error::Precondition("sorted posterior matching needs a binary-output channel".into()));
    }
    Ok(())
}

/// Answers the query of length `len`, returning the step and the two likelihoods
/// `(P(y | in query), P(y | outside))`.
fn respond<R: Rng + ?Sized>(
    ch: &MdChannel,
    m_pm: u64,
    len: u64,
    answer: bool,
    rng: &mut R,
) -> Result<(StepTrace, f64, f64)> {
    let size = len as f64 / m_pm as f64;
    let law = ch.law(size)?;
    let y = law.sample(answer, rng);
    let step = StepTrace { size, answer, response: y };
    Ok((step, law.prob(true, y)?, law.prob(false, y)?))
}

fn tied(head: f64, w: f64) -> bool {
    head - w <= TIE * head
}

/// Posterior over `M_pm` bins with one stored weight per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    weights: Vec<f64>,
    step: u64,
}

impl PosteriorState {
    pub fn uniform(m_pm: u64) -> Result<Self> {
        if m_pm == 0 || m_pm > DENSE_LIMIT {
            return Err(Error::Domain { what: "M_pm", value: m_pm as f64 });
        }
        Ok(Self {
            weights: vec![1.0 / m_pm as f64; m_pm as usize],
            step: 0,
        })
    }

    /// Arbitrary prior; normalised on construction.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Precondition("prior weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Precondition("prior has no mass".into()));
        }
        let mut st = Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
            step: 0,
        };
        st.canonicalise();
        Ok(st)
    }

    pub fn m_pm(&self) -> u64 {
        self.weights.len() as u64
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Heaviest bin (1-based); the smallest index among ties.
    pub fn argmax_bin(&self) -> u64 {
        self.order()[0] as u64 + 1
    }

    pub fn is_degenerate(&self) -> bool {
        self.weights.iter().filter(|&&w| w > 0.0).count() == 1
    }

    fn order(&self) -> Vec<usize> {
        let w = &self.weights;
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        order
    }

    /// Bins (1-based, in sorted order) that the next step would query.
    pub fn query(&self) -> Vec<u64> {
        let order = self.order();
        let cut = choose_prefix(order.iter().map(|&i| (self.weights[i], 1)));
        order[..cut.len as usize].iter().map(|&i| i as u64 + 1).collect()
    }

    /// One query against the target in bin `truth_bin`. Returns `None` without
    /// touching the state when the posterior is a point mass.
    pub fn advance<R: Rng + ?Sized>(&mut self, ch: &MdChannel, truth_bin: u64, rng: &mut R) -> Result<Option<StepTrace>> {
        check_binary(ch)?;
        if self.is_degenerate() {
            return Ok(None);
        }
        let order = self.order();
        let cut = choose_prefix(order.iter().map(|&i| (self.weights[i], 1)));
        let mut selected = vec![false; self.weights.len()];
        for &i in &order[..cut.len as usize] {
            selected[i] = true;
        }
        let answer = selected[(truth_bin - 1) as usize];
        let (trace, l_in, l_out) = respond(ch, self.m_pm(), cut.len, answer, rng)?;
        for (w, &s) in self.weights.iter_mut().zip(&selected) {
            *w *= if s { l_in } else { l_out };
        }
        self.canonicalise();
        self.step += 1;
        Ok(Some(trace))
    }

    fn canonicalise(&mut self) {
        let order = self.order();
        let mut head = f64::NAN;
        for &i in &order {
            let w = self.weights[i];
            if !head.is_nan() && tied(head, w) {
                self.weights[i] = head;
            } else {
                head = w;
            }
        }
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
    }
}

/// Bins sharing one weight, held as sorted disjoint inclusive runs.
#[derive(Debug, Clone, PartialEq)]
struct Group {
    weight: f64,
    count: u64,
    runs: Vec<(u64, u64)>,
}

impl Group {
    fn first(&self) -> u64 {
        self.runs[0].0
    }

    /// Rank of `bin` among the group's bins, if present.
    fn rank(&self, bin: u64) -> Option<u64> {
        let mut before = 0;
        for &(a, b) in &self.runs {
            if bin < a {
                return None;
            }
            if bin <= b {
                return Some(before + bin - a);
            }
            before += b - a + 1;
        }
        None
    }

    /// Splits off the `k` smallest indices.
    fn split(self, k: u64) -> (Group, Group) {
        let mut head = Vec::new();
        let mut tail = Vec::new();
        let mut need = k;
        for (a, b) in self.runs {
            let len = b - a + 1;
            if need >= len {
                head.push((a, b));
                need -= len;
            } else if need > 0 {
                head.push((a, a + need - 1));
                tail.push((a + need, b));
                need = 0;
            } else {
                tail.push((a, b));
            }
        }
        let w = self.weight;
        (
            Group { weight: w, count: k, runs: head },
            Group { weight: w, count: self.count - k, runs: tail },
        )
    }

    fn absorb(&mut self, other: Group) {
        self.count += other.count;
        self.runs.extend(other.runs);
        self.runs.sort_unstable();
        let mut merged: Vec<(u64, u64)> = Vec::with_capacity(self.runs.len());
        for (a, b) in self.runs.drain(..) {
            match merged.last_mut() {
                Some(last) if last.1 + 1 == a => last.1 = b,
                _ => merged.push((a, b)),
            }
        }
        self.runs = merged;
    }
}

/// Posterior over up to `2^62` bins, stored as groups of equal weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPosterior {
    m_pm: u64,
    groups: Vec<Group>,
    step: u64,
}

impl GroupedPosterior {
    pub fn uniform(m_pm: u64) -> Result<Self> {
        if m_pm == 0 || m_pm > MAX_BINS {
            return Err(Error::Domain { what: "M_pm", value: m_pm as f64 });
        }
        Ok(Self {
            m_pm,
            groups: vec![Group { weight: 1.0 / m_pm as f64, count: m_pm, runs: vec![(1, m_pm)] }],
            step: 0,
        })
    }

    pub fn m_pm(&self) -> u64 {
        self.m_pm
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn groups(&self) -> usize {
        self.groups.len()
    }

    pub fn max_weight(&self) -> f64 {
        self.groups[0].weight
    }

    pub fn argmax_bin(&self) -> u64 {
        self.groups[0].first()
    }

    /// Sum of all weights.
    pub fn total_mass(&self) -> f64 {
        self.groups.iter().map(|g| g.count as f64 * g.weight).sum()
    }

    pub fn weight_of(&self, bin: u64) -> f64 {
        self.groups
            .iter()
            .find(|g| g.rank(bin).is_some())
            .map_or(0.0, |g| g.weight)
    }

    pub fn is_degenerate(&self) -> bool {
        self.groups.iter().filter(|g| g.weight > 0.0).map(|g| g.count).sum::<u64>() == 1
    }

    fn cut(&self) -> Cut {
        choose_prefix(self.groups.iter().map(|g| (g.weight, g.count)))
    }

    /// Number of bins the next step would query.
    pub fn query_len(&self) -> u64 {
        self.cut().len
    }

    /// See [`PosteriorState::advance`].
    pub fn advance<R: Rng + ?Sized>(&mut self, ch: &MdChannel, truth_bin: u64, rng: &mut R) -> Result<Option<StepTrace>> {
        check_binary(ch)?;
        if self.is_degenerate() {
            return Ok(None);
        }
        let cut = self.cut();
        let answer = self
            .groups
            .iter()
            .enumerate()
            .find_map(|(i, g)| g.rank(truth_bin).map(|r| i < cut.block || (i == cut.block && r < cut.take)))
            .ok_or_else(|| Error::IndexOutOfRange(format!("bin {truth_bin} not in [1, {}]", self.m_pm)))?;
        let (trace, l_in, l_out) = respond(ch, self.m_pm, cut.len, answer, rng)?;

        let mut next = Vec::with_capacity(self.groups.len() + 1);
        for (i, g) in std::mem::take(&mut self.groups).into_iter().enumerate() {
            if i < cut.block {
                next.push(Group { weight: g.weight * l_in, ..g });
            } else if i > cut.block {
                next.push(Group { weight: g.weight * l_out, ..g });
            } else {
                let take = cut.take;
                let (head, tail) = g.split(take);
                if head.count > 0 {
                    next.push(Group { weight: head.weight * l_in, ..head });
                }
                if tail.count > 0 {
                    next.push(Group { weight: tail.weight * l_out, ..tail });
                }
            }
        }
        next.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.first().cmp(&b.first())));
        let mut merged: Vec<Group> = Vec::with_capacity(next.len());
        for g in next {
            match merged.last_mut() {
                Some(head) if tied(head.weight, g.weight) => head.absorb(g),
                _ => merged.push(g),
            }
        }
        let total: f64 = merged.iter().map(|g| g.count as f64 * g.weight).sum();
        for g in &mut merged {
            g.weight /= total;
        }
        self.groups = merged;
        self.step += 1;
        Ok(Some(trace))
    }
}

trait Belief {
    fn advance_dyn(&mut self, ch: &MdChannel, truth_bin: u64, rng: &mut dyn rand::RngCore) -> Result<Option<StepTrace>>;
    fn max_weight(&self) -> f64;
    fn argmax_bin(&self) -> u64;
}

impl Belief for PosteriorState {
    fn advance_dyn(&mut self, ch: &MdChannel, truth_bin: u64, rng: &mut dyn rand::RngCore) -> Result<Option<StepTrace>> {
        self.advance(ch, truth_bin, rng)
    }
    fn max_weight(&self) -> f64 {
        PosteriorState::max_weight(self)
    }
    fn argmax_bin(&self) -> u64 {
        PosteriorState::argmax_bin(self)
    }
}

impl Belief for GroupedPosterior {
    fn advance_dyn(&mut self, ch: &MdChannel, truth_bin: u64, rng: &mut dyn rand::RngCore) -> Result<Option<StepTrace>> {
        self.advance(ch, truth_bin, rng)
    }
    fn max_weight(&self) -> f64 {
        GroupedPosterior::max_weight(self)
    }
    fn argmax_bin(&self) -> u64 {
        GroupedPosterior::argmax_bin(self)
    }
}

/// Runs one sorted posterior matching trial against the target `truth`.
///
/// The termination coin is the first draw from `rng`, as in
/// [`crate::engine::run_trial`].
pub fn pm_run<R: Rng>(
    cfg: &PmConfig,
    ch: &MdChannel,
    truth: &UnitPoint,
    delta_eval: f64,
    rng: &mut R,
) -> Result<TrialRecord> {
    pm_run_inner(cfg, ch, truth, delta_eval, rng, None)
}

/// [`pm_run`] that also records each query.
pub fn pm_run_traced<R: Rng>(
    cfg: &PmConfig,
    ch: &MdChannel,
    truth: &UnitPoint,
    delta_eval: f64,
    rng: &mut R,
    trace: &mut Vec<StepTrace>,
) -> Result<TrialRecord> {
    pm_run_inner(cfg, ch, truth, delta_eval, rng, Some(trace))
}

fn pm_run_inner<R: Rng>(
    cfg: &PmConfig,
    ch: &MdChannel,
    truth: &UnitPoint,
    delta_eval: f64,
    rng: &mut R,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<TrialRecord> {
    cfg.check()?;
    check_binary(ch)?;
    if truth.dim() != 1 {
        return Err(Error::Precondition("sorted posterior matching is one-dimensional".into()));
    }
    let part = Partition::new(cfg.m_pm, 1)?;
    let true_flat = part.bin_of_point(truth).0[0];
    let z: f64 = rng.gen();
    if z < cfg.epsilon_term {
        return Ok(terminated_record(truth, true_flat, delta_eval));
    }
    let mut belief: Box<dyn Belief> = match cfg.backend {
        PmBackend::Grouped => Box::new(GroupedPosterior::uniform(cfg.m_pm)?),
        PmBackend::Dense => Box::new(PosteriorState::uniform(cfg.m_pm)?),
    };
    let reached = |b: &dyn Belief| matches!(cfg.stop_rule, StopRule::MassThreshold(t) if b.max_weight() >= t);
    let mut sizes = QuerySizeStats::default();
    for _ in 0..cfg.n_queries {
        if reached(belief.as_ref()) {
            break;
        }
        match belief.advance_dyn(ch, true_flat, rng)? {
            Some(step) => {
                sizes.push(step.size);
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(step);
                }
            }
            None => break,
        }
    }
    let capped = matches!(cfg.stop_rule, StopRule::MassThreshold(_)) && !reached(belief.as_ref());
    let decoded = belief.argmax_bin();
    let idx = BinIndex(vec![decoded]);
    let resolution = part.center_error(&idx, truth);
    Ok(TrialRecord {
        tau: sizes.count,
        terminated: false,
        capped,
        estimate: part.bin_center(&idx)?,
        truth: truth.to_f64(),
        resolution,
        delta_eval,
        excess: capped || resolution > delta_eval,
        decoded_flat: Some(decoded),
        true_flat,
        query_sizes: sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::LipschitzFn;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bsc(nu: f64, a: f64, b: f64) -> MdChannel {
        MdChannel::md_bsc(nu, LipschitzFn::affine(a, b).unwrap()).unwrap()
    }

    /// Bisection on `2^k` bins: the candidate interval halves each step and the
    /// lower half is asked.
    fn bisection(k: u32, truth_bin: u64) -> Vec<StepTrace> {
        let m = 1u64 << k;
        let (mut lo, mut hi) = (1u64, m);
        let mut out = Vec::new();
        while lo < hi {
            let half = (hi - lo + 1) / 2;
            let answer = truth_bin < lo + half;
            out.push(StepTrace { size: half as f64 / m as f64, answer, response: answer as usize });
            if answer {
                hi = lo + half - 1;
            } else {
                lo += half;
            }
        }
        out
    }

    #[test]
    fn noiseless_is_bisection() {
        let ch = MdChannel::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1u32, 3, 6] {
            let m = 1u64 << k;
            for backend in [PmBackend::Dense, PmBackend::Grouped] {
                for _ in 0..20 {
                    let s = UnitPoint::uniform(1, &mut rng);
                    let bin = Partition::new(m, 1).unwrap().bin_of_point(&s).0[0];
                    let cfg = PmConfig::new(m, k as u64 + 4).unwrap().with_backend(backend).unwrap();
                    let mut tr = Vec::new();
                    let rec = pm_run_traced(&cfg, &ch, &s, 1.0 / m as f64, &mut rng, &mut tr).unwrap();
                    assert_eq!(tr, bisection(k, bin));
                    assert_eq!(rec.decoded_flat, Some(bin));
                    assert_eq!(rec.tau, k as u64);
                    assert!(!rec.excess);
                    assert!(rec.resolution <= 0.5 / m as f64);
                }
            }
        }
    }

    #[test]
    fn bayes_update_uniform_four_bins() {
        let ch = bsc(0.5, 0.1, 0.3);
        let p = 0.5 * (0.1 + 0.3 * 0.5);
        for seed in 0..20 {
            let mut st = PosteriorState::uniform(4).unwrap();
            assert_eq!(st.query(), vec![1, 2]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let step = st.advance(&ch, 2, &mut rng).unwrap().unwrap();
            assert_eq!(step.size, 0.5);
            assert!(step.answer);
            let (a, b) = if step.response == 1 { (1.0 - p, p) } else { (p, 1.0 - p) };
            let z = 2.0 * (a + b) * 0.25;
            let expect = [0.25 * a / z, 0.25 * a / z, 0.25 * b / z, 0.25 * b / z];
            for (w, e) in st.weights().iter().zip(expect) {
                assert!((w - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bayes_update_skewed_prior() {
        // sorted: bin 2 (0.4), 3 (0.3), 4 (0.2), 1 (0.1); prefix {2} has mass 0.4
        let ch = bsc(0.5, 0.1, 0.3);
        let prior = [0.1, 0.4, 0.3, 0.2];
        let mut st = PosteriorState::from_weights(prior.to_vec()).unwrap();
        assert_eq!(st.query(), vec![2]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let step = st.advance(&ch, 3, &mut rng).unwrap().unwrap();
        assert_eq!(step.size, 0.25);
        assert!(!step.answer);
        let p = 0.5 * (0.1 + 0.3 * 0.25);
        let like = |inside: bool| if (step.response == 1) == inside { 1.0 - p } else { p };
        let raw: Vec<f64> = prior.iter().enumerate().map(|(i, w)| w * like(i == 1)).collect();
        let z: f64 = raw.iter().sum();
        for (w, r) in st.weights().iter().zip(&raw) {
            assert!((w - r / z).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_stability_two_bins() {
        let ch = bsc(0.5, 0.1, 0.3);
        let p = 0.5 * (0.1 + 0.3 * 0.5);
        for (w1, seed) in [(0.9, 0u64), (0.9, 1), (0.6, 2), (0.6, 5), (0.55, 7)] {
            let mut st = PosteriorState::from_weights(vec![w1, 1.0 - w1]).unwrap();
            assert_eq!(st.query(), vec![1]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let step = st.advance(&ch, 2, &mut rng).unwrap().unwrap();
            // bin 1 stays on top iff its likelihood-weighted mass still dominates
            let stays = if step.response == 1 {
                w1 * (1.0 - p) >= (1.0 - w1) * p
            } else {
                w1 * p >= (1.0 - w1) * (1.0 - p)
            };
            assert_eq!(st.argmax_bin() == 1, stays, "w1 = {w1}, y = {}", step.response);
        }
    }

    #[test]
    fn point_mass_is_absorbing() {
        let ch = bsc(0.5, 0.1, 0.3);
        let mut st = PosteriorState::from_weights(vec![0.0, 1.0, 0.0]).unwrap();
        let before = st.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(st.advance(&ch, 1, &mut rng).unwrap().is_none());
        assert_eq!(st, before);
    }

    #[test]
    fn grouped_matches_dense() {
        for (seed, (a, b), m) in [(1u64, (0.1, 0.3), 64u64), (2, (0.4, -0.3), 50), (3, (0.2, 0.0), 37), (4, (0.1, 0.3), 1000)] {
            let ch = bsc(0.5, a, b);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..10 {
                let truth = rand::Rng::gen_range(&mut rng, 1..=m);
                let mut dense = PosteriorState::uniform(m).unwrap();
                let mut grouped = GroupedPosterior::uniform(m).unwrap();
                let mut r1 = ChaCha8Rng::seed_from_u64(rand::Rng::gen(&mut rng));
                let mut r2 = r1.clone();
                for _ in 0..40 {
                    assert_eq!(grouped.query_len(), dense.query().len() as u64);
                    let s1 = dense.advance(&ch, truth, &mut r1).unwrap();
                    let s2 = grouped.advance(&ch, truth, &mut r2).unwrap();
                    assert_eq!(s1, s2);
                    assert_eq!(dense.argmax_bin(), grouped.argmax_bin());
                    for bin in 1..=m {
                        let (x, y) = (dense.weights()[bin as usize - 1], grouped.weight_of(bin));
                        assert!((x - y).abs() <= 1e-9 * x.max(1e-300), "bin {bin}: {x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn grouped_handles_huge_grid() {
        let ch = bsc(0.5, 0.4, -0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = PmConfig::new(MAX_BINS, 150).unwrap();
        let s = UnitPoint::uniform(1, &mut rng);
        let rec = pm_run(&cfg, &ch, &s, 1e-6, &mut rng).unwrap();
        assert_eq!(rec.tau, 150);
        let mut g = GroupedPosterior::uniform(MAX_BINS).unwrap();
        for _ in 0..150 {
            g.advance(&ch, 12345, &mut rng).unwrap();
        }
        assert!(g.groups() <= 151);
        assert!((g.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn termination_keeps_trajectory() {
        let ch = bsc(0.5, 0.1, 0.3);
        let base = PmConfig::new(1 << 20, 30).unwrap();
        let term = base.clone().with_termination(0.3).unwrap();
        let mut terminated = 0;
        for seed in 0..200 {
            let s = UnitPoint::from_f64(&[0.3]).unwrap();
            let a = pm_run(&base, &ch, &s, 1e-3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = pm_run(&term, &ch, &s, 1e-3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            if b.terminated {
                terminated += 1;
                assert_eq!(b.estimate, vec![0.5]);
                assert_eq!(b.tau, 0);
            } else {
                assert_eq!(a, b);
            }
        }
        assert!((30..90).contains(&terminated));
    }

    #[test]
    fn mass_threshold_stops_early() {
        let ch = MdChannel::noiseless();
        let cfg = PmConfig::new(1 << 10, 50)
            .unwrap()
            .with_stop_rule(StopRule::MassThreshold(0.99))
            .unwrap();
        let s = UnitPoint::from_f64(&[0.7]).unwrap();
        let rec = pm_run(&cfg, &ch, &s, 1e-3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rec.tau, 10);
        assert!(!rec.capped);
        let noisy = bsc(0.5, 0.4, -0.3);
        let cfg = PmConfig::new(1 << 10, 3)
            .unwrap()
            .with_stop_rule(StopRule::MassThreshold(0.99))
            .unwrap();
        let rec = pm_run(&cfg, &noisy, &s, 1e-3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(rec.capped && rec.excess);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PmConfig::new(0, 5).is_err());
        assert!(PmConfig::new(1 << 30, 5).unwrap().with_backend(PmBackend::Dense).is_err());
        assert!(PmConfig::new(4, 5).unwrap().with_stop_rule(StopRule::MassThreshold(0.0)).is_err());
        assert!(PosteriorState::from_weights(vec![0.0, 0.0]).is_err());
        assert!(PosteriorState::from_weights(vec![-1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn normalisation_and_query_balance(
            nu in 0.05f64..1.0,
            a in 0.0f64..0.5,
            b in -0.5f64..0.5,
            m in 2u64..300,
            seed: u64,
        ) {
            prop_assume!(a + b >= 0.0 && nu * (a.max(a + b)) <= 0.5);
            let ch = bsc(nu, a, b);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = rand::Rng::gen_range(&mut rng, 1..=m);
            let mut st = PosteriorState::uniform(m).unwrap();
            for _ in 0..60 {
                let w_max = st.max_weight();
                let q = st.query();
                let mass: f64 = q.iter().map(|&i| st.weights()[i as usize - 1]).sum();
                prop_assert!((mass - 0.5).abs() <= w_max + 1e-12);
                if st.advance(&ch, truth, &mut rng).unwrap().is_none() {
                    break;
                }
                let total: f64 = st.weights().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(st.weights().iter().all(|&w| w >= 0.0));
            }
        }
    }
}
