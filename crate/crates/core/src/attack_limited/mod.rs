//! Attacks with partial knowledge: an unknown channel realization, unknown
//! inputs (universal perturbations), or an unknown classifier (surrogate).
//!
//! Every output spends the full budget: `||delta||^2 = pmax`.

mod pca;
mod vae;

pub use pca::{
    canonical_sign, first_principal_component, oriented_component, PerturbationBank, PCA_MAX_ITERS, PCA_TOL,
};
pub use vae::{full_size, normalized, train_vae, VaeConfig, VaeEpoch, VaeModel, FULL_FILTERS};

use rand::Rng;
use rayon::prelude::*;

use crate::attack_wb::{fgm_targeted_nochannel, mrpp_targeted, AttackContext, AttackOptions, Perturbation};
use crate::channel::{sample_taps, ChannelParams, ChannelTaps};
use crate::classifier::Classifier;
use crate::iqcore::{from_planar, to_planar, DatasetRecord};
use crate::{Complex64, Error, Result};

/// Default number of pre-collected inputs for the PCA constructions.
pub const DEFAULT_PCA_INPUTS: usize = 100;
/// Default VAE training set size and number of perturbations averaged per UAP.
pub const DEFAULT_VAE_TRAIN: usize = 2000;
pub const DEFAULT_VAE_K: usize = 40;

fn scaled_to_budget(dir: &[Complex64], pmax: f64) -> Result<Perturbation> {
    let n = dir.iter().map(|d| d.norm_sqr()).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Degenerate("perturbation direction has no usable norm".into()));
    }
    let s = pmax.sqrt() / n;
    Ok(Perturbation::new(dir.iter().map(|d| d * s).collect(), pmax))
}

fn check_pmax(pmax: f64) -> Result<()> {
    if !(pmax > 0.0 && pmax.is_finite()) {
        return Err(Error::InvalidValue(format!("pmax must be finite and > 0, got {pmax}")));
    }
    Ok(())
}

fn pca_output(rows: &[Vec<Complex64>], pmax: f64) -> Result<Perturbation> {
    let bank = PerturbationBank::from_complex(rows)?;
    let v = oriented_component(&bank)?;
    scaled_to_budget(&from_planar(&v)?, pmax)
}

/// MRPP perturbations for each `(frame, label, channel)` triple.
fn mrpp_bank(
    model: &dyn Classifier,
    items: &[(&[Complex64], usize, &ChannelTaps)],
    pmax: f64,
    opts: &AttackOptions,
) -> Result<Vec<Vec<Complex64>>> {
    items
        .par_iter()
        .map(|(r, label, taps)| {
            let ctx = AttackContext::new(model, r, taps, *label, pmax)?.with_options(opts);
            Ok(mrpp_targeted(&ctx)?.delta)
        })
        .collect()
}

/// PCA over MRPP perturbations crafted for the given channel realizations
/// of one input. Used when only the channel distribution is known.
pub fn attack_limited_with_channels(
    model: &dyn Classifier,
    r_tr: &[Complex64],
    true_label: usize,
    channels: &[ChannelTaps],
    pmax: f64,
    opts: &AttackOptions,
) -> Result<Perturbation> {
    check_pmax(pmax)?;
    if channels.is_empty() {
        return Err(Error::InputLength("need at least one channel realization".into()));
    }
    let items: Vec<_> = channels.iter().map(|h| (r_tr, true_label, h)).collect();
    pca_output(&mrpp_bank(model, &items, pmax, opts)?, pmax)
}

/// Draws `n` channel realizations from `params` and runs
/// [`attack_limited_with_channels`].
#[allow(clippy::too_many_arguments)]
pub fn attack_limited_channel<R: Rng + ?Sized>(
    model: &dyn Classifier,
    r_tr: &[Complex64],
    true_label: usize,
    params: &ChannelParams,
    n: usize,
    pmax: f64,
    rng: &mut R,
    opts: &AttackOptions,
) -> Result<Perturbation> {
    if n == 0 {
        return Err(Error::InvalidValue("N must be >= 1".into()));
    }
    let channels = (0..n).map(|_| sample_taps(params, r_tr.len(), rng)).collect::<Result<Vec<_>>>()?;
    attack_limited_with_channels(model, r_tr, true_label, &channels, pmax, opts)
}

/// Universal perturbation from MRPP perturbations of pre-collected inputs,
/// all crafted with the true channel.
pub fn uap_pca_input_independent(
    model: &dyn Classifier,
    inputs: &[DatasetRecord],
    taps: &ChannelTaps,
    pmax: f64,
    opts: &AttackOptions,
) -> Result<Perturbation> {
    check_pmax(pmax)?;
    if inputs.is_empty() {
        return Err(Error::InputLength("need at least one pre-collected input".into()));
    }
    let items: Vec<_> = inputs.iter().map(|r| (r.frame.samples(), r.label, taps)).collect();
    pca_output(&mrpp_bank(model, &items, pmax, opts)?, pmax)
}

/// Universal perturbation with neither the input nor the channel known:
/// input `n` is paired with channel realization `n`.
pub fn uap_pca_channel_independent(
    model: &dyn Classifier,
    inputs: &[DatasetRecord],
    channels: &[ChannelTaps],
    pmax: f64,
    opts: &AttackOptions,
) -> Result<Perturbation> {
    check_pmax(pmax)?;
    if inputs.is_empty() || inputs.len() != channels.len() {
        return Err(Error::InputLength(format!(
            "{} inputs but {} channel realizations",
            inputs.len(),
            channels.len()
        )));
    }
    let items: Vec<_> = inputs.iter().zip(channels).map(|(r, h)| (r.frame.samples(), r.label, h)).collect();
    pca_output(&mrpp_bank(model, &items, pmax, opts)?, pmax)
}

/// Channel-free targeted perturbations of each input at budget `pmax`, the
/// rows a perturbation VAE is trained on and averaged over.
pub fn nochannel_perturbations(
    model: &dyn Classifier,
    inputs: &[DatasetRecord],
    pmax: f64,
    opts: &AttackOptions,
) -> Result<Vec<Vec<Complex64>>> {
    check_pmax(pmax)?;
    inputs
        .par_iter()
        .map(|r| {
            let id = ChannelTaps::identity(r.frame.samples().len());
            let ctx = AttackContext::new(model, r.frame.samples(), &id, r.label, pmax)?.with_options(opts);
            Ok(fgm_targeted_nochannel(&ctx)?.delta)
        })
        .collect()
}

fn planar_rows(rows: &[Vec<Complex64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| to_planar(r)).collect()
}

/// Decoded average of the perturbations' latent means, as a complex vector.
pub fn vae_average(vae: &VaeModel, perturbations: &[Vec<Complex64>]) -> Result<Vec<Complex64>> {
    if perturbations.is_empty() {
        return Err(Error::InputLength("need at least one perturbation (k >= 1)".into()));
    }
    let rows = planar_rows(perturbations);
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    from_planar(&vae.decode_average(&refs)?)
}

/// `sqrt(pmax) * conj(h) . d / ||conj(h) . d||`.
fn conj_matched(h: &[Complex64], d: &[Complex64], pmax: f64) -> Result<Perturbation> {
    if h.len() != d.len() {
        return Err(Error::InputLength(format!("{} taps for a {}-sample perturbation", h.len(), d.len())));
    }
    let v: Vec<Complex64> = h.iter().zip(d).map(|(a, b)| a.conj() * b).collect();
    scaled_to_budget(&v, pmax)
}

/// Universal perturbation from the VAE average of `k` channel-free
/// perturbations, matched to the true channel by its conjugate.
pub fn uap_vae_input_independent(
    vae: &VaeModel,
    perturbations: &[Vec<Complex64>],
    taps: &ChannelTaps,
    pmax: f64,
) -> Result<Perturbation> {
    check_pmax(pmax)?;
    let avg = vae_average(vae, perturbations)?;
    conj_matched(taps.taps(), &avg, pmax)
}

/// Channel VAE rows: planar channel taps.
pub fn channel_rows(channels: &[ChannelTaps]) -> Vec<Vec<f64>> {
    channels.iter().map(|h| to_planar(h.taps())).collect()
}

/// As [`uap_vae_input_independent`], with the true channel replaced by the
/// channel VAE's decoded average of `channels`.
pub fn uap_vae_channel_independent(
    perturbation_vae: &VaeModel,
    channel_vae: &VaeModel,
    perturbations: &[Vec<Complex64>],
    channels: &[ChannelTaps],
    pmax: f64,
) -> Result<Perturbation> {
    check_pmax(pmax)?;
    if channels.is_empty() {
        return Err(Error::InputLength("need at least one channel realization".into()));
    }
    let avg = vae_average(perturbation_vae, perturbations)?;
    let rows = channel_rows(channels);
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let h_avg = from_planar(&channel_vae.decode_average(&refs)?)?;
    conj_matched(&h_avg, &avg, pmax)
}

/// Black-box variant: the PCA universal perturbation crafted against a
/// surrogate classifier, to be applied to the unknown one.
pub fn uap_blackbox(
    surrogate: &dyn Classifier,
    inputs: &[DatasetRecord],
    taps: &ChannelTaps,
    pmax: f64,
    opts: &AttackOptions,
) -> Result<Perturbation> {
    uap_pca_input_independent(surrogate, inputs, taps, pmax, opts)
}
