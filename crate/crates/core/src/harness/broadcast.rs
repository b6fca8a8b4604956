//! Broadcast sweeps: one transmitted frame, several receivers, one
//! perturbation.

use rayon::prelude::*;

use crate::attack_wb::AttackOptions;
use crate::broadcast::{idba, jdba, weight_line_search, Receiver, ReceiverEnsemble};
use crate::channel::{add_awgn, sample_taps, ChannelParams, ChannelTaps};
use crate::classifier::Classifier;
use crate::iqcore::{noise_power_for_snr, synth_clean, ModulatorConfig, ModulationScheme};
use crate::rng::substream;
use crate::{Complex64, Error, Result};

const PURPOSE_FRAME: u64 = 0x51;

/// One transmission as seen by every receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastFrame {
    pub label: usize,
    /// Noisy received frame per receiver.
    pub r: Vec<Vec<Complex64>>,
    /// Adversary channel per receiver.
    pub taps: Vec<ChannelTaps>,
}

/// Frame `i` carries scheme `i mod C`; each receiver adds its own noise
/// and gets its own adversary channel with the given Rayleigh scale.
pub fn broadcast_frames(
    schemes: &[ModulationScheme],
    modulator: &ModulatorConfig,
    n: usize,
    snr_db: f64,
    channel: &ChannelParams,
    rayleigh_scales: &[f64],
    seed: u64,
) -> Result<Vec<BroadcastFrame>> {
    if schemes.is_empty() || rayleigh_scales.is_empty() {
        return Err(Error::InvalidValue("need at least one scheme and one receiver".into()));
    }
    let noise = noise_power_for_snr(snr_db);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, PURPOSE_FRAME, i as u64);
            let label = i % schemes.len();
            let x = synth_clean(schemes[label], modulator, &mut rng)?;
            let mut r = Vec::with_capacity(rayleigh_scales.len());
            let mut taps = Vec::with_capacity(rayleigh_scales.len());
            for &s in rayleigh_scales {
                r.push(add_awgn(x.samples(), noise, &mut rng)?);
                let params = ChannelParams {
                    rayleigh_scale: s,
                    ..channel.clone()
                };
                taps.push(sample_taps(&params, x.samples().len(), &mut rng)?);
            }
            Ok(BroadcastFrame { label, r, taps })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BroadcastMethod {
    Idba,
    Jdba,
}

impl BroadcastMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "idba" => Ok(BroadcastMethod::Idba),
            "jdba" => Ok(BroadcastMethod::Jdba),
            _ => Err(Error::InvalidValue(format!("unknown broadcast attack `{name}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BroadcastMethod::Idba => "idba",
            BroadcastMethod::Jdba => "jdba",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BroadcastStats {
    pub n_frames: usize,
    /// Frames on which at least one receiver stayed correct.
    pub joint_correct: usize,
    pub receiver_correct: Vec<usize>,
}

impl BroadcastStats {
    /// One minus the rate at which every receiver is fooled.
    pub fn joint_accuracy(&self) -> f64 {
        self.joint_correct as f64 / self.n_frames.max(1) as f64
    }

    pub fn receiver_accuracy(&self, i: usize) -> f64 {
        self.receiver_correct[i] as f64 / self.n_frames.max(1) as f64
    }
}

/// Crafts one broadcast perturbation per frame and tallies each receiver's
/// decision. `pmax == 0` evaluates the clean frames.
pub fn broadcast_eval(
    models: &[&dyn Classifier],
    frames: &[BroadcastFrame],
    method: BroadcastMethod,
    weights: &[f64],
    pmax: f64,
    opts: &AttackOptions,
) -> Result<BroadcastStats> {
    let m = models.len();
    let per_frame: Vec<Vec<bool>> = frames
        .par_iter()
        .map(|f| {
            if f.r.len() != m || f.taps.len() != m {
                return Err(Error::InputLength(format!("frame has {} receivers, expected {m}", f.r.len())));
            }
            let receivers: Vec<Receiver> = (0..m)
                .map(|i| Receiver {
                    model: models[i],
                    taps: &f.taps[i],
                    r_tr: &f.r[i],
                    true_label: f.label,
                })
                .collect();
            let ens = ReceiverEnsemble::new(receivers, weights.to_vec())?;
            if pmax == 0.0 {
                return ens.correct_under(&vec![Complex64::new(0.0, 0.0); f.r[0].len()]);
            }
            let d = match method {
                BroadcastMethod::Idba => idba(&ens, pmax, opts),
                BroadcastMethod::Jdba => jdba(&ens, pmax, opts.eps_acc),
            };
            match d {
                Ok(d) => ens.correct_under(&d.delta),
                Err(Error::Degenerate(_)) => ens.correct_under(&vec![Complex64::new(0.0, 0.0); f.r[0].len()]),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut stats = BroadcastStats {
        n_frames: frames.len(),
        joint_correct: 0,
        receiver_correct: vec![0; m],
    };
    for c in per_frame {
        stats.joint_correct += usize::from(c.iter().any(|x| *x));
        for (t, x) in stats.receiver_correct.iter_mut().zip(c) {
            *t += usize::from(x);
        }
    }
    Ok(stats)
}

/// Grid search of the weights minimizing joint accuracy on `frames`.
pub fn line_search_weights(
    models: &[&dyn Classifier],
    frames: &[BroadcastFrame],
    method: BroadcastMethod,
    pmax: f64,
    step: f64,
    opts: &AttackOptions,
) -> Result<Vec<f64>> {
    weight_line_search(models.len(), step, |w| {
        Ok(broadcast_eval(models, frames, method, w, pmax, opts)?.joint_accuracy())
    })
}
