//! Accuracy under attack, one PNR point at a time.
//!
//! Each test frame `i` gets its own adversary channel drawn from the stream
//! `(seed, i)`, shared by every attack and PNR so that curves are compared on
//! the same channel realizations. Test frames already carry the receiver
//! noise, so the observation is `r_tr + H delta`.

use rayon::prelude::*;

use crate::attack_limited::{
    attack_limited_channel, nochannel_perturbations, train_vae, uap_blackbox, uap_pca_channel_independent,
    uap_pca_input_independent, uap_vae_channel_independent, vae_average, channel_rows, VaeConfig,
};
use crate::attack_wb::{
    channel_inversion, fgm_targeted_nochannel, mmse_nontargeted, mmse_targeted, mrpp_nontargeted, mrpp_targeted,
    naive_nontargeted, AttackContext, AttackOptions, Perturbation,
};
use crate::channel::{sample_taps, ChannelParams, ChannelTaps, PnrConvention};
use crate::classifier::Classifier;
use crate::iqcore::{noise_power_for_snr, to_planar, DatasetRecord};
use crate::rng::{substream, SimRng};
use crate::{Complex64, Error, Result};

use super::config::UapKind;

const PURPOSE_CHANNEL: u64 = 0x41;
const PURPOSE_ATTACK: u64 = 0x42;
const PURPOSE_UAP: u64 = 0x43;

/// Attack names accepted by the sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackKind {
    /// `none`
    None,
    /// `fgm_nochannel`: channel-unaware targeted perturbation.
    FgmNoChannel,
    /// `inversion`
    Inversion,
    /// `mrpp`
    Mrpp,
    /// `mmse`, or `mmse@g` for a fixed scaling `g`.
    Mmse(Option<f64>),
    /// `naive_nt`
    NaiveNontargeted,
    /// `mrpp_nt`
    MrppNontargeted,
    /// `mmse_nt`, or `mmse_nt@g`.
    MmseNontargeted(Option<f64>),
    /// `limited`: PCA over channel realizations drawn from the distribution.
    Limited,
    /// `uap`: input-independent universal perturbation, true channel known.
    UapInput,
    /// `uap_channel`: neither input nor channel known.
    UapChannel,
    /// `uap_blackbox`: input-independent PCA perturbation of a surrogate.
    UapBlackbox,
}

impl AttackKind {
    pub fn parse(name: &str) -> Result<Self> {
        let (base, gamma) = match name.split_once('@') {
            Some((b, g)) => {
                let v: f64 = g
                    .parse()
                    .map_err(|_| Error::InvalidValue(format!("bad scaling `{g}` in attack `{name}`")))?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidValue(format!("scaling in `{name}` must be > 0")));
                }
                (b, Some(v))
            }
            None => (name, None),
        };
        let kind = match base {
            "none" => AttackKind::None,
            "fgm_nochannel" => AttackKind::FgmNoChannel,
            "inversion" => AttackKind::Inversion,
            "mrpp" => AttackKind::Mrpp,
            "mmse" => AttackKind::Mmse(gamma),
            "naive_nt" => AttackKind::NaiveNontargeted,
            "mrpp_nt" => AttackKind::MrppNontargeted,
            "mmse_nt" => AttackKind::MmseNontargeted(gamma),
            "limited" => AttackKind::Limited,
            "uap" => AttackKind::UapInput,
            "uap_channel" => AttackKind::UapChannel,
            "uap_blackbox" => AttackKind::UapBlackbox,
            _ => return Err(Error::InvalidValue(format!("unknown attack `{name}`"))),
        };
        if gamma.is_some() && !matches!(kind, AttackKind::Mmse(_) | AttackKind::MmseNontargeted(_)) {
            return Err(Error::InvalidValue(format!("only MMSE attacks take a scaling, got `{name}`")));
        }
        Ok(kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UapSettings {
    pub kind: UapKind,
    pub n: usize,
    pub k: usize,
    pub vae: VaeConfig,
    pub vae_train: usize,
}

impl Default for UapSettings {
    fn default() -> Self {
        UapSettings {
            kind: UapKind::Pca,
            n: crate::attack_limited::DEFAULT_PCA_INPUTS,
            k: crate::attack_limited::DEFAULT_VAE_K,
            vae: VaeConfig::default(),
            vae_train: crate::attack_limited::DEFAULT_VAE_TRAIN,
        }
    }
}

/// Everything needed to evaluate attacks on one test set.
#[derive(Clone)]
pub struct EvalContext<'a> {
    pub model: &'a dyn Classifier,
    pub surrogate: Option<&'a dyn Classifier>,
    pub frames: &'a [DatasetRecord],
    /// The adversary's own labelled frames for universal perturbations.
    pub attacker_records: &'a [DatasetRecord],
    pub channel: ChannelParams,
    pub convention: PnrConvention,
    /// Receiver noise power per sample.
    pub noise_power: f64,
    pub options: AttackOptions,
    pub gamma_grid: Vec<f64>,
    pub limited_n: usize,
    pub uap: UapSettings,
    pub seed: u64,
}

impl<'a> EvalContext<'a> {
    /// Defaults for everything but the model, the frames, the channel and
    /// the SNR that sets the noise power.
    pub fn new(
        model: &'a dyn Classifier,
        frames: &'a [DatasetRecord],
        channel: ChannelParams,
        convention: PnrConvention,
        snr_db: f64,
        seed: u64,
    ) -> Self {
        let options = AttackOptions {
            reference_gain: convention.reference_gain(&channel),
            ..AttackOptions::default()
        };
        EvalContext {
            model,
            surrogate: None,
            frames,
            attacker_records: &[],
            channel,
            convention,
            noise_power: noise_power_for_snr(snr_db),
            options,
            gamma_grid: crate::attack_wb::DEFAULT_GAMMA_GRID.to_vec(),
            limited_n: 10,
            uap: UapSettings::default(),
            seed,
        }
    }

    pub fn with_model(&self, model: &'a dyn Classifier) -> Self {
        EvalContext { model, ..self.clone() }
    }

    /// Transmit budget at `pnr_db`, relative to the noise energy of a frame.
    pub fn pmax(&self, pnr_db: f64) -> f64 {
        let p = self.frames.first().map_or(crate::FRAME_LEN, |r| r.frame.samples().len());
        self.convention.pmax(pnr_db, p as f64 * self.noise_power, &self.channel)
    }

    /// The adversary channel of test frame `i`.
    pub fn taps(&self, i: usize) -> Result<ChannelTaps> {
        let p = self.frames[i].frame.samples().len();
        sample_taps(&self.channel, p, &mut substream(self.seed, PURPOSE_CHANNEL, i as u64))
    }

    fn attacker(&self, n: usize) -> Result<&'a [DatasetRecord]> {
        if self.attacker_records.len() < n {
            return Err(Error::InputLength(format!(
                "universal perturbations need {n} attacker records, have {}",
                self.attacker_records.len()
            )));
        }
        Ok(&self.attacker_records[..n])
    }
}

/// Accuracy tally of one (attack, PNR) point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalStats {
    pub correct: usize,
    pub n_frames: usize,
    /// Targeted searches that did not flip even at full budget.
    pub not_flipping: usize,
    /// Frames left unperturbed because the attack degenerated.
    pub degenerate: usize,
}

impl EvalStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n_frames.max(1) as f64
    }
}

/// Per-PNR state shared by all frames.
enum Prepared {
    PerFrame,
    /// Same transmitted perturbation for every frame.
    Fixed(Vec<Complex64>),
    /// Direction to be matched to each frame's channel by its conjugate.
    ConjMatch(Vec<Complex64>),
}

fn conj_match(taps: &ChannelTaps, d: &[Complex64], pmax: f64) -> Result<Perturbation> {
    let v: Vec<Complex64> = taps.taps().iter().zip(d).map(|(h, x)| h.conj() * x).collect();
    let n = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::Degenerate("matched perturbation vanishes".into()));
    }
    let s = pmax.sqrt() / n;
    Ok(Perturbation::new(v.iter().map(|x| x * s).collect(), pmax))
}

fn perturbation_vae(ctx: &EvalContext, pmax: f64) -> Result<(crate::attack_limited::VaeModel, Vec<Vec<Complex64>>)> {
    let recs = ctx.attacker(ctx.uap.vae_train.max(ctx.uap.k))?;
    let perts = nochannel_perturbations(ctx.model, recs, pmax, &ctx.options)?;
    let rows: Vec<Vec<f64>> = perts.iter().map(|p| to_planar(p)).collect();
    let (vae, _) = train_vae(&rows[..ctx.uap.vae_train], &ctx.uap.vae)?;
    Ok((vae, perts))
}

fn prepare(ctx: &EvalContext, attack: AttackKind, pmax: f64) -> Result<Prepared> {
    let p = ctx.frames.first().map_or(crate::FRAME_LEN, |r| r.frame.samples().len());
    match (attack, ctx.uap.kind) {
        (AttackKind::UapInput, UapKind::Vae) => {
            let (vae, perts) = perturbation_vae(ctx, pmax)?;
            Ok(Prepared::ConjMatch(vae_average(&vae, &perts[..ctx.uap.k])?))
        }
        (AttackKind::UapChannel, kind) => {
            let mut rng = substream(ctx.seed, PURPOSE_UAP, 0);
            match kind {
                UapKind::Pca => {
                    let recs = ctx.attacker(ctx.uap.n)?;
                    let channels = (0..recs.len())
                        .map(|_| sample_taps(&ctx.channel, p, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    let d = uap_pca_channel_independent(ctx.model, recs, &channels, pmax, &ctx.options)?;
                    Ok(Prepared::Fixed(d.delta))
                }
                UapKind::Vae => {
                    let (vae, perts) = perturbation_vae(ctx, pmax)?;
                    let channels = (0..ctx.uap.vae_train)
                        .map(|_| sample_taps(&ctx.channel, p, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    let (ch_vae, _) = train_vae(&channel_rows(&channels), &ctx.uap.vae)?;
                    let d = uap_vae_channel_independent(&vae, &ch_vae, &perts[..ctx.uap.k], &channels[..ctx.uap.k], pmax)?;
                    Ok(Prepared::Fixed(d.delta))
                }
            }
        }
        (AttackKind::UapBlackbox, _) if ctx.surrogate.is_none() => {
            Err(Error::InvalidValue("the black-box attack needs a surrogate model".into()))
        }
        _ => Ok(Prepared::PerFrame),
    }
}

fn craft(
    ctx: &EvalContext,
    attack: AttackKind,
    prepared: &Prepared,
    i: usize,
    taps: &ChannelTaps,
    pmax: f64,
) -> Result<Perturbation> {
    let rec = &ctx.frames[i];
    let r = rec.frame.samples();
    let actx = AttackContext::new(ctx.model, r, taps, rec.label, pmax)?.with_options(&ctx.options);
    match prepared {
        Prepared::Fixed(d) => return Ok(Perturbation::new(d.clone(), pmax)),
        Prepared::ConjMatch(d) => return conj_match(taps, d, pmax),
        Prepared::PerFrame => {}
    }
    match attack {
        AttackKind::None => Ok(Perturbation::zero(r.len(), pmax)),
        AttackKind::FgmNoChannel => fgm_targeted_nochannel(&actx),
        AttackKind::Inversion => channel_inversion(&actx),
        AttackKind::Mrpp => mrpp_targeted(&actx),
        AttackKind::Mmse(g) => mmse_targeted(&actx, &gamma_grid(ctx, g)),
        AttackKind::NaiveNontargeted => naive_nontargeted(&actx),
        AttackKind::MrppNontargeted => mrpp_nontargeted(&actx),
        AttackKind::MmseNontargeted(g) => mmse_nontargeted(&actx, &gamma_grid(ctx, g)),
        AttackKind::Limited => {
            let mut rng: SimRng = substream(ctx.seed, PURPOSE_ATTACK, i as u64);
            attack_limited_channel(ctx.model, r, rec.label, &ctx.channel, ctx.limited_n, pmax, &mut rng, &ctx.options)
        }
        AttackKind::UapInput => uap_pca_input_independent(ctx.model, ctx.attacker(ctx.uap.n)?, taps, pmax, &ctx.options),
        AttackKind::UapBlackbox => {
            let s = ctx.surrogate.expect("checked in prepare");
            uap_blackbox(s, ctx.attacker(ctx.uap.n)?, taps, pmax, &ctx.options)
        }
        AttackKind::UapChannel => unreachable!("prepared"),
    }
}

fn gamma_grid(ctx: &EvalContext, fixed: Option<f64>) -> Vec<f64> {
    fixed.map_or_else(|| ctx.gamma_grid.clone(), |g| vec![g])
}

/// One observed frame and how its perturbation was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub samples: Vec<Complex64>,
    pub not_flipping: bool,
    pub degenerate: bool,
}

/// `r_tr + H delta` for every test frame. Frames whose attack degenerates
/// (e.g. every gradient vanishes) are left unperturbed and flagged.
pub fn observe(ctx: &EvalContext, attack: AttackKind, pnr_db: f64) -> Result<Vec<Observation>> {
    let pmax = ctx.pmax(pnr_db);
    if attack == AttackKind::None || pmax == 0.0 {
        return Ok(ctx
            .frames
            .iter()
            .map(|r| Observation {
                samples: r.frame.samples().to_vec(),
                not_flipping: false,
                degenerate: false,
            })
            .collect());
    }
    let prepared = prepare(ctx, attack, pmax)?;
    (0..ctx.frames.len())
        .into_par_iter()
        .map(|i| {
            let taps = ctx.taps(i)?;
            let r = ctx.frames[i].frame.samples();
            let (delta, not_flipping, degenerate) = match craft(ctx, attack, &prepared, i, &taps, pmax) {
                Ok(d) => (d.delta, d.not_flipping, false),
                Err(Error::Degenerate(_)) => (vec![Complex64::new(0.0, 0.0); r.len()], false, true),
                Err(e) => return Err(e),
            };
            let rx = taps.apply(&delta)?;
            Ok(Observation {
                samples: r.iter().zip(rx).map(|(x, d)| x + d).collect(),
                not_flipping,
                degenerate,
            })
        })
        .collect()
}

/// Accuracy of `ctx.model` on the frames under `attack` at `pnr_db`.
pub fn evaluate(ctx: &EvalContext, attack: AttackKind, pnr_db: f64) -> Result<EvalStats> {
    let obs = observe(ctx, attack, pnr_db)?;
    let refs: Vec<&[Complex64]> = obs.iter().map(|o| o.samples.as_slice()).collect();
    let pred = ctx.model.predict_batch(&refs)?;
    Ok(EvalStats {
        correct: pred.iter().zip(ctx.frames).filter(|(p, r)| **p == r.label).count(),
        n_frames: obs.len(),
        not_flipping: obs.iter().filter(|o| o.not_flipping).count(),
        degenerate: obs.iter().filter(|o| o.degenerate).count(),
    })
}
