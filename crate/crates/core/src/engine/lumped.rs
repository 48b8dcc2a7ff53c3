//! Exchangeable-bin simulation of the query procedure.
//!
//! The wrong bins' bit sequences are i.i.d. and the response depends on them
//! only through how many of them are set, so the wrong bins are interchangeable.
//! A bin's accumulated density is a function of its agreement counts
//! `(a0, a1) = (#(x=0,y=0), #(x=1,y=1))`; we track how many wrong bins share
//! each pair. Per step each class splits binomially by its fresh bits, which is
//! the exact joint law of the dense procedure. Which flat indices the crossing
//! wrong bins carry is uniform over the wrong indices, and is sampled only when
//! the decoder needs it.

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use super::{DecoderRule, Outcome, ProcedureConfig, QuerySizeStats, StepTrace};
use crate::channel::MdChannel;
use crate::error::{Error, Result};
use crate::infodensity::{BinaryTable, DensityParams};

type Key = (u32, u32);

pub(crate) fn run<R: Rng + ?Sized>(
    cfg: &ProcedureConfig,
    ch: &MdChannel,
    params: &DensityParams,
    true_flat: u64,
    rng: &mut R,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<Outcome> {
    let table = params
        .binary_table()
        .ok_or_else(|| Error::Precondition("lumped backend needs a binary-output channel".into()))?;
    let total = cfg.partition.total();
    let q = cfg.q;

    // populated classes of wrong bins, sorted by key
    let mut classes: Vec<(Key, u64)> = if total > 1 { vec![((0, 0), total - 1)] } else { Vec::new() };
    let mut ones: Vec<u64> = Vec::new();
    let mut stay: Vec<(Key, u64)> = Vec::new();
    let mut moved: Vec<(Key, u64)> = Vec::new();
    let mut n = [0u64; 2];
    let mut truth_agree = [0u64; 2];
    let mut sizes = QuerySizeStats::default();

    for t in 1..=cfg.max_steps {
        ones.clear();
        let mut set = 0u64;
        for &(_, pop) in &classes {
            let o = draw_ones(pop, q, rng)?;
            ones.push(o);
            set += o;
        }
        let x = rng.gen_bool(q);
        let size = (set + x as u64) as f64 / total as f64;
        sizes.push(size);
        let y = ch.law(size)?.sample(x, rng);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(StepTrace { size, answer: x, response: y });
        }

        // bins whose bit equals y agree; they move one step along axis y
        stay.clear();
        moved.clear();
        for (&(key, pop), &o) in classes.iter().zip(&ones) {
            let (agreeing, other) = if y == 1 { (o, pop - o) } else { (pop - o, o) };
            if other > 0 {
                stay.push((key, other));
            }
            if agreeing > 0 {
                let next = if y == 1 { (key.0, key.1 + 1) } else { (key.0 + 1, key.1) };
                moved.push((next, agreeing));
            }
        }
        merge_sorted(&stay, &moved, &mut classes);

        n[y] += 1;
        if x == (y == 1) {
            truth_agree[y] += 1;
        }
        let d_truth = table.total(n, truth_agree);
        let best = classes
            .iter()
            .map(|&(k, _)| density(&table, n, k))
            .fold(d_truth, f64::max);
        if best >= cfg.lambda {
            let decoded = decode(cfg.decoder, cfg.lambda, &table, n, d_truth, &classes, true_flat, total, rng);
            return Ok(Outcome { tau: t, capped: false, decoded, sizes });
        }
    }
    let d_truth = table.total(n, truth_agree);
    let decoded = decode(
        DecoderRule::Argmax,
        f64::NEG_INFINITY,
        &table,
        n,
        d_truth,
        &classes,
        true_flat,
        total,
        rng,
    );
    Ok(Outcome {
        tau: cfg.max_steps,
        capped: true,
        decoded,
        sizes,
    })
}

#[inline]
fn density(table: &BinaryTable, n: [u64; 2], key: Key) -> f64 {
    table.total(n, [key.0 as u64, key.1 as u64])
}

fn draw_ones<R: Rng + ?Sized>(pop: u64, q: f64, rng: &mut R) -> Result<u64> {
    Ok(match pop {
        0 => 0,
        1 => rng.gen_bool(q) as u64,
        _ => Binomial::new(pop, q)
            .map_err(|e| Error::Precondition(e.to_string()))?
            .sample(rng),
    })
}

fn merge_sorted(a: &[(Key, u64)], b: &[(Key, u64)], out: &mut Vec<(Key, u64)>) {
    out.clear();
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(l), Some(r)) if l.0 == r.0 => {
                i += 1;
                j += 1;
                (l.0, l.1 + r.1)
            }
            (Some(l), Some(r)) if l.0 < r.0 => {
                i += 1;
                *l
            }
            (Some(l), None) => {
                i += 1;
                *l
            }
            (_, Some(r)) => {
                j += 1;
                *r
            }
            (None, None) => unreachable!(),
        };
        out.push(next);
    }
}

/// Picks the decoded flat index among the bins selected by `rule`.
#[allow(clippy::too_many_arguments)]
fn decode<R: Rng + ?Sized>(
    rule: DecoderRule,
    lambda: f64,
    table: &BinaryTable,
    n: [u64; 2],
    d_truth: f64,
    classes: &[(Key, u64)],
    true_flat: u64,
    total: u64,
    rng: &mut R,
) -> u64 {
    // candidates: bins at or above the cut; for argmax the cut is the top density
    let cut = match rule {
        DecoderRule::MaxQualifying => lambda,
        DecoderRule::Argmax => classes
            .iter()
            .map(|&(k, _)| density(table, n, k))
            .fold(d_truth, f64::max),
    };
    let truth_in = d_truth >= cut;
    let wrong: u64 = classes
        .iter()
        .filter(|&&(k, _)| density(table, n, k) >= cut)
        .map(|&(_, pop)| pop)
        .sum();
    if wrong == 0 {
        return true_flat;
    }
    let r = sample_subset_max(total - 1, wrong, rng);
    let top_wrong = if r < true_flat { r } else { r + 1 };
    if truth_in {
        top_wrong.max(true_flat)
    } else {
        top_wrong
    }
}

/// Largest element of a uniformly random `c`-subset of `{1, ..., n}`.
pub(crate) fn sample_subset_max<R: Rng + ?Sized>(n: u64, c: u64, rng: &mut R) -> u64 {
    debug_assert!(c >= 1 && c <= n);
    if c == n {
        return n;
    }
    if c <= 64 {
        // Floyd's subset sampling
        let mut chosen: Vec<u64> = Vec::with_capacity(c as usize);
        for j in (n - c + 1)..=n {
            let t = rng.gen_range(1..=j);
            chosen.push(if chosen.contains(&t) { j } else { t });
        }
        return chosen.into_iter().max().expect("non-empty");
    }
    // inverse CDF: P(max <= k) = prod_{i<c} (k - i) / (n - i)
    let u: f64 = rng.gen();
    let ln_u = u.ln();
    let ln_cdf = |k: u64| -> f64 {
        let gap = (n - k) as f64;
        (0..c).map(|i| (-gap / (n - i) as f64).ln_1p()).sum()
    };
    let (mut lo, mut hi) = (c, n);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if ln_cdf(mid) >= ln_u {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}
