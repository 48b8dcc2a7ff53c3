//! Literal procedure: every bin's bit is drawn and accumulated.

use rand::distributions::{Bernoulli, Distribution};
use rand::Rng;

use super::{DecoderRule, Outcome, ProcedureConfig, QuerySizeStats, StepTrace};
use crate::channel::MdChannel;
use crate::error::{Error, Result};
use crate::infodensity::{DensityAccumulator, DensityParams};

pub(crate) fn run<R: Rng + ?Sized>(
    cfg: &ProcedureConfig,
    ch: &MdChannel,
    params: &DensityParams,
    true_flat: u64,
    rng: &mut R,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<Outcome> {
    let n = cfg.partition.total() as usize;
    let truth = (true_flat - 1) as usize;
    let bern = Bernoulli::new(cfg.q).map_err(|e| Error::Precondition(e.to_string()))?;
    let mut bits = vec![false; n];
    let mut acc = DensityAccumulator::new(params, n);
    let mut sizes = QuerySizeStats::default();

    for t in 1..=cfg.max_steps {
        let mut ones = 0u64;
        for b in bits.iter_mut() {
            *b = bern.sample(rng);
            ones += *b as u64;
        }
        let size = ones as f64 / n as f64;
        sizes.push(size);
        // the channel sees the query actually asked
        let answer = bits[truth];
        let y = ch.law(size)?.sample(answer, rng);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(StepTrace { size, answer, response: y });
        }
        acc.accumulate(&bits, y)?;

        let (argmax, best) = acc.max_bin().expect("at least one step");
        if best >= cfg.lambda {
            let decoded = match cfg.decoder {
                DecoderRule::MaxQualifying => acc.largest_qualifying(cfg.lambda).expect("max qualifies"),
                DecoderRule::Argmax => argmax,
            };
            return Ok(Outcome { tau: t, capped: false, decoded, sizes });
        }
    }
    let (argmax, _) = acc.max_bin().expect("at least one step");
    Ok(Outcome {
        tau: cfg.max_steps,
        capped: true,
        decoded: argmax,
        sizes,
    })
}
