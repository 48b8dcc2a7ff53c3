//! Information densities and their per-bin running sums.
//!
//! `i_{p,s}(x; y) = ln P^s(y|x) / P_Y^{p,s}(y)` where `P_Y^{p,s}` is the output
//! marginal under a `Bern(p)` input. The query procedure always evaluates the
//! densities at the nominal query size `p` (state `f(p)`), whatever the size of
//! the query actually asked.

use crate::channel::{ChannelLaw, MdChannel};
use crate::error::{Error, Result};

/// Input parameter `p`, the channel law the density is computed under, and the
/// resulting per-symbol density table.
#[derive(Debug, Clone)]
pub struct DensityParams {
    p: f64,
    law: ChannelLaw,
    marginal: Vec<f64>,
    // table[x][y]; NaN marks an output with zero marginal
    table: [Vec<f64>; 2],
}

impl DensityParams {
    /// Densities for input `Bern(p)` through the channel at query size `size`.
    pub fn new(ch: &MdChannel, p: f64, size: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain { what: "p", value: p });
        }
        Ok(Self::from_law(ch.law(size)?, p))
    }

    /// The decoder statistic of the query procedure: `p = q`, state `f(q)`.
    pub fn nominal(ch: &MdChannel, q: f64) -> Result<Self> {
        Self::new(ch, q, q)
    }

    pub(crate) fn from_law(law: ChannelLaw, p: f64) -> Self {
        let marginal = output_marginal(&law, p);
        let entry = |x: bool, y: usize| {
            let py = marginal[y];
            if py <= 0.0 {
                f64::NAN
            } else {
                let c = law.row(x)[y];
                if c == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (c / py).ln()
                }
            }
        };
        let n = law.outputs();
        let table = [
            (0..n).map(|y| entry(false, y)).collect(),
            (0..n).map(|y| entry(true, y)).collect(),
        ];
        Self { p, law, marginal, table }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn law(&self) -> &ChannelLaw {
        &self.law
    }

    pub fn outputs(&self) -> usize {
        self.marginal.len()
    }

    /// `P_Y^{p,s}`.
    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    /// Single-letter density; `-inf` when `P(y|x) = 0`.
    pub fn info_density(&self, x: bool, y: usize) -> Result<f64> {
        let v = *self.table[x as usize].get(y).ok_or(Error::UnknownSymbol {
            symbol: y,
            alphabet: self.outputs(),
        })?;
        if v.is_nan() {
            Err(Error::ImpossibleOutput(y))
        } else {
            Ok(v)
        }
    }

    /// `E[i(X;Y)]` under `Bern(p) x P^s`, by enumeration: the mutual information.
    pub fn expected_density(&self) -> f64 {
        mutual_information(&self.law, self.p)
    }

    pub(crate) fn binary_table(&self) -> Option<BinaryTable> {
        (self.outputs() == 2).then(|| BinaryTable {
            v: [
                [self.table[0][0], self.table[0][1]],
                [self.table[1][0], self.table[1][1]],
            ],
        })
    }
}

/// See [`DensityParams::info_density`].
pub fn info_density(params: &DensityParams, x: bool, y: usize) -> Result<f64> {
    params.info_density(x, y)
}

pub(crate) fn output_marginal(law: &ChannelLaw, p: f64) -> Vec<f64> {
    law.row(false)
        .iter()
        .zip(law.row(true))
        .map(|(r0, r1)| (1.0 - p) * r0 + p * r1)
        .collect()
}

/// Mutual information (nats) of `Bern(p)` through `law`, with `0 ln 0 = 0`.
pub fn mutual_information(law: &ChannelLaw, p: f64) -> f64 {
    let marginal = output_marginal(law, p);
    let mut total = 0.0;
    for (x, px) in [(false, 1.0 - p), (true, p)] {
        if px == 0.0 {
            continue;
        }
        for (y, &c) in law.row(x).iter().enumerate() {
            if c > 0.0 {
                total += px * c * (c / marginal[y]).ln();
            }
        }
    }
    total
}

/// Density table of a binary-output channel, `v[x][y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BinaryTable {
    pub v: [[f64; 2]; 2],
}

impl BinaryTable {
    /// Accumulated density of a bin given the global response counts
    /// `n = [#y=0, #y=1]` and the bin's agreement counts `agree = [#(x=0,y=0), #(x=1,y=1)]`.
    ///
    /// Terms with equal single-letter values are merged before multiplying so
    /// that e.g. `k` steps worth `ln 2` always sum to exactly `k * ln 2`.
    #[inline]
    pub fn total(&self, n: [u64; 2], agree: [u64; 2]) -> f64 {
        let terms = [
            (agree[0], self.v[0][0]),
            (n[0] - agree[0], self.v[1][0]),
            (agree[1], self.v[1][1]),
            (n[1] - agree[1], self.v[0][1]),
        ];
        let mut merged: [(u64, f64); 4] = [(0, 0.0); 4];
        let mut len = 0;
        for (count, value) in terms {
            if count == 0 {
                continue;
            }
            match merged[..len].iter_mut().find(|(_, v)| *v == value) {
                Some(slot) => slot.0 += count,
                None => {
                    merged[len] = (count, value);
                    len += 1;
                }
            }
        }
        merged[..len].iter().map(|&(c, v)| c as f64 * v).sum()
    }
}

#[derive(Debug, Clone)]
enum Sums {
    /// Binary outputs: per-bin agreement counters `[#(x=0,y=0), #(x=1,y=1)]`.
    Counters { table: BinaryTable, agree: Vec<[u32; 2]>, n: [u64; 2] },
    /// General alphabets: plain running sums.
    Float { params: DensityParams, sums: Vec<f64> },
}

/// Running accumulated densities for every bin of the partition.
///
/// Bins are addressed 0-based internally; [`max_bin`](Self::max_bin) and
/// [`largest_qualifying`](Self::largest_qualifying) report 1-based flat indices.
#[derive(Debug, Clone)]
pub struct DensityAccumulator {
    sums: Sums,
    steps: u64,
}

impl DensityAccumulator {
    pub fn new(params: &DensityParams, bins: usize) -> Self {
        let sums = match params.binary_table() {
            Some(table) => Sums::Counters {
                table,
                agree: vec![[0, 0]; bins],
                n: [0, 0],
            },
            None => Sums::Float {
                params: params.clone(),
                sums: vec![0.0; bins],
            },
        };
        Self { sums, steps: 0 }
    }

    pub fn bins(&self) -> usize {
        match &self.sums {
            Sums::Counters { agree, .. } => agree.len(),
            Sums::Float { sums, .. } => sums.len(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Adds `i(x_t(bin); y)` to every bin, where `column[bin]` is the bin's bit.
    pub fn accumulate(&mut self, column: &[bool], y: usize) -> Result<()> {
        if column.len() != self.bins() {
            return Err(Error::Precondition(format!(
                "design column has {} entries, expected {}",
                column.len(),
                self.bins()
            )));
        }
        match &mut self.sums {
            Sums::Counters { table, agree, n } => {
                if y > 1 {
                    return Err(Error::UnknownSymbol { symbol: y, alphabet: 2 });
                }
                if table.v[0][y].is_nan() {
                    return Err(Error::ImpossibleOutput(y));
                }
                if n[y] >= u32::MAX as u64 {
                    return Err(Error::Precondition("density counter overflow".into()));
                }
                n[y] += 1;
                let want = y == 1;
                for (slot, &bit) in agree.iter_mut().zip(column) {
                    slot[y] += (bit == want) as u32;
                }
            }
            Sums::Float { params, sums } => {
                let d = [params.info_density(false, y)?, params.info_density(true, y)?];
                for (s, &bit) in sums.iter_mut().zip(column) {
                    *s += d[bit as usize];
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Accumulated density of the 0-based bin.
    pub fn density(&self, bin: usize) -> f64 {
        match &self.sums {
            Sums::Counters { table, agree, n } => {
                let a = agree[bin];
                table.total(*n, [a[0] as u64, a[1] as u64])
            }
            Sums::Float { sums, .. } => sums[bin],
        }
    }

    pub fn densities(&self) -> Vec<f64> {
        (0..self.bins()).map(|b| self.density(b)).collect()
    }

    /// Largest accumulated density and its 1-based flat index; ties go to the
    /// largest index. `None` before the first step.
    pub fn max_bin(&self) -> Option<(u64, f64)> {
        if self.steps == 0 || self.bins() == 0 {
            return None;
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for b in 0..self.bins() {
            let v = self.density(b);
            if v >= best.1 {
                best = (b, v);
            }
        }
        Some((best.0 as u64 + 1, best.1))
    }

    /// `max { m : density_m >= lambda }` as a 1-based flat index.
    pub fn largest_qualifying(&self, lambda: f64) -> Option<u64> {
        (0..self.bins())
            .rev()
            .find(|&b| self.density(b) >= lambda)
            .map(|b| b as u64 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{Anchor, LipschitzFn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bsc(alpha: f64) -> MdChannel {
        MdChannel::md_bsc(1.0, LipschitzFn::constant(alpha).unwrap()).unwrap()
    }

    #[test]
    fn noiseless_densities() {
        let p = DensityParams::nominal(&MdChannel::noiseless(), 0.5).unwrap();
        assert_eq!(info_density(&p, true, 1).unwrap(), 2f64.ln());
        assert_eq!(info_density(&p, false, 0).unwrap(), 2f64.ln());
        assert_eq!(info_density(&p, false, 1).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn bsc_density_matches_hand_marginalization() {
        let p = DensityParams::nominal(&bsc(0.125), 0.5).unwrap();
        // P_Y(0) = 0.5 * 0.875 + 0.5 * 0.125
        let py0 = 0.5 * 0.875 + 0.5 * 0.125;
        assert!((p.marginal()[0] - py0).abs() < 1e-15);
        let v = p.info_density(false, 0).unwrap();
        assert!((v - 1.75f64.ln()).abs() < 1e-15);
        assert!((v - 0.5596157879354227).abs() < 1e-12);
    }

    #[test]
    fn impossible_output_is_an_error() {
        let f = LipschitzFn::constant(0.5).unwrap();
        let rows = [vec![0.5, 0.5, 0.0], vec![0.2, 0.8, 0.0]];
        let ch = MdChannel::tabulated(
            f,
            vec![
                Anchor { state: 0.0, rows: rows.clone() },
                Anchor { state: 1.0, rows },
            ],
        )
        .unwrap();
        let p = DensityParams::nominal(&ch, 0.5).unwrap();
        assert!(matches!(p.info_density(true, 2), Err(Error::ImpossibleOutput(2))));
        assert!(p.info_density(true, 3).is_err());
    }

    #[test]
    fn expected_density_is_nonnegative_by_enumeration() {
        for alpha in [0.0, 0.01, 0.1, 0.3, 0.5] {
            for p in [0.05, 0.3, 0.5, 0.9] {
                let params = DensityParams::nominal(&bsc(alpha), p).unwrap();
                let direct: f64 = [false, true]
                    .iter()
                    .flat_map(|&x| (0..2).map(move |y| (x, y)))
                    .map(|(x, y)| {
                        let px = if x { p } else { 1.0 - p };
                        let c = params.law().prob(x, y).unwrap();
                        if c == 0.0 { 0.0 } else { px * c * params.info_density(x, y).unwrap() }
                    })
                    .sum();
                assert!(direct >= -1e-15);
                assert!((direct - params.expected_density()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn same_bits_give_equal_densities() {
        let params = DensityParams::nominal(&bsc(0.1), 0.3).unwrap();
        let mut acc = DensityAccumulator::new(&params, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let b: bool = rng.gen();
            acc.accumulate(&[b; 5], rng.gen_range(0..2)).unwrap();
        }
        let d = acc.densities();
        assert!(d.iter().all(|v| *v == d[0]));
    }

    #[test]
    fn one_step_equals_single_density() {
        let params = DensityParams::nominal(&bsc(0.1), 0.3).unwrap();
        let mut acc = DensityAccumulator::new(&params, 2);
        acc.accumulate(&[false, true], 1).unwrap();
        assert_eq!(acc.density(0), params.info_density(false, 1).unwrap());
        assert_eq!(acc.density(1), params.info_density(true, 1).unwrap());
        assert!(acc.accumulate(&[true], 0).is_err());
    }

    #[test]
    fn max_bin_ties_and_scan() {
        let params = DensityParams::nominal(&bsc(0.1), 0.5).unwrap();
        let mut single = DensityAccumulator::new(&params, 1);
        assert!(single.max_bin().is_none());
        single.accumulate(&[true], 0).unwrap();
        assert_eq!(single.max_bin().unwrap().0, 1);

        let mut two = DensityAccumulator::new(&params, 2);
        two.accumulate(&[true, true], 1).unwrap();
        assert_eq!(two.max_bin().unwrap().0, 2);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut acc = DensityAccumulator::new(&params, 8);
        for _ in 0..40 {
            let col: Vec<bool> = (0..8).map(|_| rng.gen()).collect();
            acc.accumulate(&col, rng.gen_range(0..2)).unwrap();
        }
        let d = acc.densities();
        let mut oracle = (0, f64::NEG_INFINITY);
        for (i, v) in d.iter().enumerate() {
            if *v >= oracle.1 {
                oracle = (i as u64 + 1, *v);
            }
        }
        assert_eq!(acc.max_bin().unwrap(), oracle);
    }

    #[test]
    fn noiseless_merging_is_exact() {
        let params = DensityParams::nominal(&MdChannel::noiseless(), 0.5).unwrap();
        let mut acc = DensityAccumulator::new(&params, 1);
        for k in 1..=60u64 {
            acc.accumulate(&[k % 3 == 0], (k % 3 == 0) as usize).unwrap();
            assert_eq!(acc.density(0), k as f64 * 2f64.ln());
        }
    }

    fn naive_sum_matches(alpha: f64, q: f64, steps: usize, bins: usize, seed: u64) -> f64 {
        let params = DensityParams::nominal(&bsc(alpha), q).unwrap();
        let mut acc = DensityAccumulator::new(&params, bins);
        let mut naive = vec![0.0; bins];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..steps {
            let col: Vec<bool> = (0..bins).map(|_| rng.gen_bool(q)).collect();
            let y = rng.gen_range(0..2);
            acc.accumulate(&col, y).unwrap();
            for (s, &b) in naive.iter_mut().zip(&col) {
                *s += params.info_density(b, y).unwrap();
            }
        }
        naive
            .iter()
            .zip(acc.densities())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn counters_match_naive_summation() {
        assert!(naive_sum_matches(0.125, 0.5, 50, 8, 1) < 1e-9);
        assert!(naive_sum_matches(0.2, 0.37, 50, 8, 2) < 1e-9);
    }

    #[test]
    fn float_path_for_ternary_outputs() {
        let f = LipschitzFn::affine(0.0, 1.0).unwrap();
        let ch = MdChannel::tabulated(
            f,
            vec![
                Anchor { state: 0.0, rows: [vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]] },
                Anchor { state: 1.0, rows: [vec![0.4, 0.4, 0.2], vec![0.2, 0.2, 0.6]] },
            ],
        )
        .unwrap();
        let params = DensityParams::nominal(&ch, 0.4).unwrap();
        let mut acc = DensityAccumulator::new(&params, 3);
        let mut naive = [0.0; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let col: Vec<bool> = (0..3).map(|_| rng.gen()).collect();
            let y = rng.gen_range(0..3);
            acc.accumulate(&col, y).unwrap();
            for b in 0..3 {
                naive[b] += params.info_density(col[b], y).unwrap();
            }
        }
        for b in 0..3 {
            assert!((acc.density(b) - naive[b]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn additivity(alpha in 0.0f64..0.5, q in 0.05f64..0.95, seed: u64) {
            prop_assert!(naive_sum_matches(alpha, q, 60, 6, seed) < 1e-9);
        }

        #[test]
        fn marginal_is_normalized(alpha in 0.0f64..0.5, q in 0.001f64..0.999) {
            let params = DensityParams::nominal(&bsc(alpha), q).unwrap();
            let s: f64 = params.marginal().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
