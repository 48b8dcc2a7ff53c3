//! Uniform partition of `[0,1]^d` into `M^d` cubes, the mixed-radix flattening
//! `Gamma: [M]^d -> [M^d]`, and exact target-to-estimate distances.
//!
//! Bins are half-open `[(i-1)/M, i/M)` with the last bin closed. Bin and flat
//! indices are 1-based throughout the public interface.

use rand::Rng;

use crate::error::{Error, Result};

/// Largest supported `M` and `M^d`. Keeps the fixed-point distance arithmetic
/// of [`Partition::center_error`] inside `u128`.
pub const MAX_BINS: u64 = 1 << 62;

/// `M` bins per dimension in `d` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partition {
    m: u64,
    d: u32,
    total: u64,
}

/// A multi-index `(i_1, ..., i_d)` with `1 <= i_j <= M`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinIndex(pub Vec<u64>);

impl Partition {
    pub fn new(m: u64, d: u32) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::Precondition(format!("partition needs M >= 1 and d >= 1 (M = {m}, d = {d})")));
        }
        let total = m
            .checked_pow(d)
            .filter(|&t| t <= MAX_BINS)
            .ok_or(Error::PartitionOverflow { m, d })?;
        Ok(Self { m, d, total })
    }

    pub fn bins_per_dim(&self) -> u64 {
        self.m
    }

    pub fn dim(&self) -> u32 {
        self.d
    }

    /// `M^d`.
    pub fn total(&self) -> u64 {
        self.total
    }

    fn check(&self, idx: &BinIndex) -> Result<()> {
        if idx.0.len() != self.d as usize || idx.0.iter().any(|&i| i == 0 || i > self.m) {
            return Err(Error::IndexOutOfRange(format!("{:?} for M = {}, d = {}", idx.0, self.m, self.d)));
        }
        Ok(())
    }

    /// `Gamma(i_1, ..., i_d) = 1 + sum_j (i_j - 1) M^{d-j}`.
    pub fn gamma(&self, idx: &BinIndex) -> Result<u64> {
        self.check(idx)?;
        Ok(idx.0.iter().fold(0u64, |acc, &i| acc * self.m + (i - 1)) + 1)
    }

    pub fn gamma_inv(&self, flat: u64) -> Result<BinIndex> {
        if flat == 0 || flat > self.total {
            return Err(Error::IndexOutOfRange(format!("flat index {flat} not in [1, {}]", self.total)));
        }
        let mut rest = flat - 1;
        let mut coords = vec![0; self.d as usize];
        for c in coords.iter_mut().rev() {
            *c = rest % self.m + 1;
            rest /= self.m;
        }
        Ok(BinIndex(coords))
    }

    /// Bin containing the point `s`, `i_j = min(floor(s_j M) + 1, M)`.
    pub fn bin_of(&self, s: &[f64]) -> Result<BinIndex> {
        if s.len() != self.d as usize {
            return Err(Error::Precondition(format!("point has {} coordinates, expected {}", s.len(), self.d)));
        }
        s.iter()
            .map(|&x| {
                crate::channel::check_unit("target coordinate", x)?;
                Ok(((x * self.m as f64).floor() as u64 + 1).min(self.m))
            })
            .collect::<Result<Vec<_>>>()
            .map(BinIndex)
    }

    /// Centre `(2 i_j - 1) / (2M)` of the bin.
    pub fn bin_center(&self, idx: &BinIndex) -> Result<Vec<f64>> {
        self.check(idx)?;
        let two_m = 2.0 * self.m as f64;
        Ok(idx.0.iter().map(|&i| (2 * i - 1) as f64 / two_m).collect())
    }

    /// Bin of an exactly represented point.
    pub fn bin_of_point(&self, s: &UnitPoint) -> BinIndex {
        debug_assert_eq!(s.dim(), self.d as usize);
        BinIndex(
            s.coords
                .iter()
                .map(|&n| (((n * self.m as u128) >> 64) as u64).min(self.m - 1) + 1)
                .collect(),
        )
    }

    /// `max_j |centre_j - s_j|`, computed exactly and rounded once.
    pub fn center_error(&self, idx: &BinIndex, s: &UnitPoint) -> f64 {
        let two_m = 2 * self.m as u128;
        idx.0
            .iter()
            .zip(&s.coords)
            .map(|(&i, &n)| {
                let centre = ((2 * i - 1) as u128) << 64;
                let point = two_m * n;
                centre.abs_diff(point) as f64 / two_m as f64 / SCALE
            })
            .fold(0.0, f64::max)
    }
}

const SCALE: f64 = 18446744073709551616.0; // 2^64

/// A point of `[0,1]^d` held in 64-bit fixed point (`coord / 2^64`).
///
/// Estimation errors near `2^-60` are far below the spacing of `f64` values
/// around `1/2`, so distances are computed on this representation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitPoint {
    coords: Vec<u128>,
}

impl UnitPoint {
    pub fn from_f64(s: &[f64]) -> Result<Self> {
        let coords = s
            .iter()
            .map(|&x| {
                crate::channel::check_unit("target coordinate", x)?;
                Ok((x * SCALE).round() as u128)
            })
            .collect::<Result<Vec<_>>>()?;
        if coords.is_empty() {
            return Err(Error::Precondition("point needs at least one coordinate".into()));
        }
        Ok(Self { coords })
    }

    /// Uniform point on `[0,1)^d` at `2^-64` granularity.
    pub fn uniform<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            coords: (0..d).map(|_| rng.gen::<u64>() as u128).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.coords.iter().map(|&n| n as f64 / SCALE).collect()
    }
}

/// See [`Partition::gamma`].
pub fn gamma(p: &Partition, idx: &BinIndex) -> Result<u64> {
    p.gamma(idx)
}

/// See [`Partition::gamma_inv`].
pub fn gamma_inv(p: &Partition, flat: u64) -> Result<BinIndex> {
    p.gamma_inv(flat)
}

/// See [`Partition::bin_of`].
pub fn bin_of(p: &Partition, s: &[f64]) -> Result<BinIndex> {
    p.bin_of(s)
}

/// See [`Partition::bin_center`].
pub fn bin_center(p: &Partition, idx: &BinIndex) -> Result<Vec<f64>> {
    p.bin_center(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_examples() {
        let p = Partition::new(3, 2).unwrap();
        assert_eq!(gamma(&p, &BinIndex(vec![2, 3])).unwrap(), 6);
        assert_eq!(gamma(&p, &BinIndex(vec![1, 1])).unwrap(), 1);
        assert_eq!(gamma(&p, &BinIndex(vec![3, 3])).unwrap(), 9);
        assert_eq!(gamma_inv(&p, 6).unwrap(), BinIndex(vec![2, 3]));
        assert_eq!(gamma_inv(&p, 1).unwrap(), BinIndex(vec![1, 1]));
        assert!(gamma(&p, &BinIndex(vec![0, 1])).is_err());
        assert!(gamma(&p, &BinIndex(vec![4, 1])).is_err());
        assert!(gamma(&p, &BinIndex(vec![1])).is_err());
        assert!(gamma_inv(&p, 0).is_err());
        assert!(gamma_inv(&p, 10).is_err());
    }

    #[test]
    fn overflow_rejected() {
        assert!(Partition::new(1 << 31, 2).is_ok());
        assert!(Partition::new(1 << 32, 2).is_err());
        assert!(Partition::new(10, 30).is_err());
        assert!(Partition::new(0, 1).is_err());
    }

    #[test]
    fn bin_of_examples() {
        let p = Partition::new(4, 1).unwrap();
        assert_eq!(bin_of(&p, &[0.0]).unwrap(), BinIndex(vec![1]));
        assert_eq!(bin_of(&p, &[1.0]).unwrap(), BinIndex(vec![4]));
        assert_eq!(bin_of(&p, &[0.5]).unwrap(), BinIndex(vec![3]));
        assert!(bin_of(&p, &[1.5]).is_err());
        // interval-membership oracle: [(i-1)/M, i/M), last closed
        for k in 0..=400 {
            let s = k as f64 / 400.0;
            let i = bin_of(&p, &[s]).unwrap().0[0];
            let lo = (i - 1) as f64 / 4.0;
            let hi = i as f64 / 4.0;
            assert!(s >= lo && (s < hi || (i == 4 && s <= hi)));
        }
    }

    #[test]
    fn centers() {
        let p = Partition::new(1, 1).unwrap();
        assert_eq!(bin_center(&p, &BinIndex(vec![1])).unwrap(), vec![0.5]);
        let p = Partition::new(4, 1).unwrap();
        assert_eq!(bin_center(&p, &BinIndex(vec![3])).unwrap(), vec![0.625]);
    }

    #[test]
    fn exact_point_matches_f64_path() {
        let p = Partition::new(4, 2).unwrap();
        for s in [[0.0, 1.0], [0.5, 0.25], [0.999, 0.7499]] {
            let u = UnitPoint::from_f64(&s).unwrap();
            assert_eq!(p.bin_of_point(&u), p.bin_of(&s).unwrap());
        }
    }

    #[test]
    fn center_error_fine_grid() {
        let p = Partition::new(1 << 62, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = UnitPoint::uniform(1, &mut rng);
            let idx = p.bin_of_point(&s);
            let err = p.center_error(&idx, &s);
            assert!(err <= 0.5 / (1u64 << 62) as f64 * (1.0 + 1e-12));
        }
        // neighbouring bin is more than half a bin away
        let s = UnitPoint::from_f64(&[0.5]).unwrap();
        let idx = p.bin_of_point(&s);
        let next = BinIndex(vec![idx.0[0] + 1]);
        assert!((p.center_error(&next, &s) - 1.5 / (1u64 << 62) as f64).abs() < 1e-30);
        assert!((p.center_error(&idx, &s) - 0.5 / (1u64 << 62) as f64).abs() < 1e-30);
    }

    #[test]
    fn exhaustive_bijection_small() {
        let p = Partition::new(7, 3).unwrap();
        for m in 1..=p.total() {
            assert_eq!(p.gamma(&p.gamma_inv(m).unwrap()).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn center_round_trip(m in 1u64..200, d in 1u32..4, seed: u64) {
            let p = Partition::new(m, d).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flat = rng.gen_range(1..=p.total());
            let idx = p.gamma_inv(flat).unwrap();
            let c = p.bin_center(&idx).unwrap();
            prop_assert_eq!(p.bin_of(&c).unwrap(), idx.clone());
            let s = UnitPoint::uniform(d as usize, &mut rng);
            let own = p.bin_of_point(&s);
            prop_assert!(p.center_error(&own, &s) <= 0.5 / m as f64 * (1.0 + 1e-12));
        }

        #[test]
        fn gamma_round_trip_large(m in 2u64..100_000, d in 1u32..4, seed: u64) {
            prop_assume!(Partition::new(m, d).is_ok());
            let p = Partition::new(m, d).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flat = rng.gen_range(1..=p.total());
            prop_assert_eq!(p.gamma(&p.gamma_inv(flat).unwrap()).unwrap(), flat);
        }
    }
}
