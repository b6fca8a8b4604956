//! Certified prediction over a test set, optionally under attack.

use rayon::prelude::*;

use crate::defense::{certified_predict, Outcome, SmoothingParams};
use crate::rng::substream;
use crate::Result;

use super::sweep::{observe, AttackKind, EvalContext};

const PURPOSE_SMOOTH: u64 = 0x61;

#[derive(Debug, Clone, PartialEq)]
pub struct CertRow {
    pub frame_id: usize,
    pub true_label: usize,
    pub outcome: Outcome,
    pub n_a: usize,
    pub n_b: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CertSummary {
    pub n_frames: usize,
    pub correct: usize,
    pub wrong: usize,
    pub abstain: usize,
}

impl CertSummary {
    pub fn from_rows(rows: &[CertRow]) -> Self {
        let mut s = CertSummary {
            n_frames: rows.len(),
            ..Default::default()
        };
        for r in rows {
            match r.outcome {
                Outcome::Class(c) if c == r.true_label => s.correct += 1,
                Outcome::Class(_) => s.wrong += 1,
                Outcome::Abstain => s.abstain += 1,
            }
        }
        s
    }

    pub fn abstain_rate(&self) -> f64 {
        self.abstain as f64 / self.n_frames.max(1) as f64
    }

    /// Correct certified predictions over all frames.
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n_frames.max(1) as f64
    }
}

/// Crafts `attack` against `ctx.model` at `pnr_db`, then certifies each
/// observed frame with the smoothed version of the same model.
pub fn certify_frames(
    ctx: &EvalContext,
    attack: AttackKind,
    pnr_db: f64,
    params: &SmoothingParams,
) -> Result<Vec<CertRow>> {
    params.validate()?;
    let obs = observe(ctx, attack, pnr_db)?;
    obs.par_iter()
        .enumerate()
        .map(|(i, o)| {
            let mut rng = substream(ctx.seed, PURPOSE_SMOOTH, i as u64);
            let c = certified_predict(ctx.model, &o.samples, params, &mut rng)?;
            Ok(CertRow {
                frame_id: i,
                true_label: ctx.frames[i].label,
                outcome: c.outcome,
                n_a: c.n_a,
                n_b: c.n_b,
                p_value: c.p_value,
            })
        })
        .collect()
}
