//! One transmission against several receivers.
//!
//! Receiver `i` sees `r_i + H_i delta`. IDBA mixes the receivers' individual
//! channel-aware perturbations; JDBA searches a target class along the
//! weighted sum of the conjugate-channel gradients.

use crate::attack_wb::{mrpp_targeted, AttackContext, AttackOptions, Perturbation};
use crate::channel::ChannelTaps;
use crate::classifier::Classifier;
use crate::iqcore::norm;
use crate::{Complex64, Error, Result};

/// Below this norm a weighted combination counts as cancelled.
pub const CANCEL_FLOOR: f64 = 1e-12;

/// What the adversary knows about one receiver.
#[derive(Clone, Copy)]
pub struct Receiver<'a> {
    pub model: &'a dyn Classifier,
    pub taps: &'a ChannelTaps,
    pub r_tr: &'a [Complex64],
    pub true_label: usize,
}

#[derive(Clone)]
pub struct ReceiverEnsemble<'a> {
    receivers: Vec<Receiver<'a>>,
    weights: Vec<f64>,
}

impl<'a> ReceiverEnsemble<'a> {
    pub fn new(receivers: Vec<Receiver<'a>>, weights: Vec<f64>) -> Result<Self> {
        if receivers.is_empty() {
            return Err(Error::InputLength("ensemble needs at least one receiver".into()));
        }
        if weights.len() != receivers.len() {
            return Err(Error::InputLength(format!(
                "{} weights for {} receivers",
                weights.len(),
                receivers.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidValue(format!("weights must be nonnegative and sum to 1, got {weights:?}")));
        }
        let p = receivers[0].r_tr.len();
        for (i, r) in receivers.iter().enumerate() {
            if r.r_tr.len() != p || r.taps.len() != p {
                return Err(Error::InputLength(format!("receiver {i} does not match frame length {p}")));
            }
            if r.true_label >= r.model.num_classes() || r.model.num_classes() != receivers[0].model.num_classes() {
                return Err(Error::InvalidValue(format!("receiver {i} has an inconsistent label space")));
            }
        }
        Ok(ReceiverEnsemble { receivers, weights })
    }

    pub fn receivers(&self) -> &[Receiver<'a>] {
        &self.receivers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.receivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.receivers.is_empty()
    }

    /// Whether each receiver still classifies correctly under `delta`.
    pub fn correct_under(&self, delta: &[Complex64]) -> Result<Vec<bool>> {
        self.receivers
            .iter()
            .map(|r| {
                let x = observed(r, delta, 1.0)?;
                Ok(r.model.predict(&x)? == r.true_label)
            })
            .collect()
    }

    /// Joint success: every receiver misclassifies.
    pub fn all_fooled(&self, delta: &[Complex64]) -> Result<bool> {
        Ok(self.correct_under(delta)?.iter().all(|c| !c))
    }
}

/// `r_tr + s * H delta`.
fn observed(r: &Receiver, delta: &[Complex64], s: f64) -> Result<Vec<Complex64>> {
    let rx = r.taps.apply(delta)?;
    Ok(r.r_tr.iter().zip(rx).map(|(x, d)| x + d * s).collect())
}

/// Individually designed broadcast attack: the weighted sum of each
/// receiver's own MRPP perturbation, rescaled to the budget.
pub fn idba(ens: &ReceiverEnsemble, pmax: f64, opts: &AttackOptions) -> Result<Perturbation> {
    let p = ens.receivers[0].r_tr.len();
    let mut sum = vec![Complex64::new(0.0, 0.0); p];
    for (r, &w) in ens.receivers.iter().zip(&ens.weights) {
        if w == 0.0 {
            continue;
        }
        let ctx = AttackContext::new(r.model, r.r_tr, r.taps, r.true_label, pmax)?.with_options(opts);
        let d = mrpp_targeted(&ctx)?;
        for (s, x) in sum.iter_mut().zip(&d.delta) {
            *s += x * w;
        }
    }
    if pmax == 0.0 {
        return Ok(Perturbation::zero(p, 0.0));
    }
    let n = norm(&sum);
    if !(n >= CANCEL_FLOOR) {
        return Err(Error::Degenerate(format!("weighted perturbations cancel (norm {n:e})")));
    }
    let s = pmax.sqrt() / n;
    Ok(Perturbation::new(sum.iter().map(|x| x * s).collect(), pmax))
}

/// Per-class outcome of the joint search.
#[derive(Debug, Clone, PartialEq)]
pub struct JointClass {
    pub class: usize,
    /// Receivers misclassifying under the full-budget perturbation.
    pub fooled: usize,
    /// Largest flipping step over the fooled receivers (over all receivers
    /// when none is fooled).
    pub eps: f64,
}

/// Result of [`jdba_search`]: the winning class first, then the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSearch {
    pub ranking: Vec<JointClass>,
    pub direction: Vec<Complex64>,
}

/// The joint search behind [`jdba`]. For each class `c` other than the
/// (common) true label, the unit direction
/// `sum_i w_i conj(H_i) grad L_i(r_i, c)` is binary-searched per receiver
/// for the smallest step that flips it, and each receiver's decision at
/// the full step `eps_max` is simulated. The class fooling the most
/// receivers at full step wins; ties go to the smaller aggregate step, then
/// the lower class index.
pub fn jdba_search(ens: &ReceiverEnsemble, eps_max: f64, eps_acc: f64) -> Result<JointSearch> {
    if !(eps_acc > 0.0) {
        return Err(Error::InvalidValue(format!("eps_acc must be > 0, got {eps_acc}")));
    }
    let recv = &ens.receivers;
    let c = recv[0].model.num_classes();
    let p = recv[0].r_tr.len();
    let excluded = |k: usize| recv.iter().any(|r| r.true_label == k);
    let classes: Vec<usize> = (0..c).filter(|&k| !excluded(k)).collect();
    if classes.is_empty() {
        return Err(Error::InvalidValue("no candidate target class".into()));
    }

    let mut joint = vec![vec![Complex64::new(0.0, 0.0); p]; classes.len()];
    for (r, &w) in recv.iter().zip(&ens.weights) {
        if w == 0.0 {
            continue;
        }
        let inputs: Vec<&[Complex64]> = vec![r.r_tr; classes.len()];
        let grads = r.model.loss_grads(&inputs, &classes)?;
        for (j, g) in joint.iter_mut().zip(grads) {
            let hg = r.taps.apply_conj(&g)?;
            for (a, b) in j.iter_mut().zip(hg) {
                *a += b * w;
            }
        }
    }
    let dirs: Vec<Option<Vec<Complex64>>> = joint
        .into_iter()
        .map(|v| {
            let n = norm(&v);
            (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x * (1.0 / n)).collect())
        })
        .collect();
    let live: Vec<usize> = (0..classes.len()).filter(|&i| dirs[i].is_some()).collect();
    if live.is_empty() {
        return Err(Error::Degenerate("all joint class directions vanish".into()));
    }

    let m = recv.len();
    // hi[ri][k]: flipping step of receiver ri along live class k.
    let mut hi = vec![vec![eps_max; live.len()]; m];
    for (ri, r) in recv.iter().enumerate() {
        let received: Vec<Vec<Complex64>> = live
            .iter()
            .map(|&i| r.taps.apply(dirs[i].as_ref().expect("live")))
            .collect::<Result<_>>()?;
        let mut lo = vec![0.0; live.len()];
        let mut width = eps_max;
        while width > eps_acc {
            let mid = width / 2.0;
            let probes: Vec<Vec<Complex64>> = (0..live.len())
                .map(|k| {
                    let s = lo[k] + mid;
                    r.r_tr.iter().zip(&received[k]).map(|(x, d)| x - d * s).collect()
                })
                .collect();
            let refs: Vec<&[Complex64]> = probes.iter().map(Vec::as_slice).collect();
            let pred = r.model.predict_batch(&refs)?;
            for (k, q) in pred.into_iter().enumerate() {
                let s = lo[k] + mid;
                if q == r.true_label {
                    lo[k] = s;
                } else {
                    hi[ri][k] = s;
                }
            }
            width = mid;
        }
    }

    // Fool count at the full budget, where the perturbation is actually sent.
    let mut full = vec![vec![false; live.len()]; m];
    for (ri, r) in recv.iter().enumerate() {
        let probes: Vec<Vec<Complex64>> = live
            .iter()
            .map(|&i| {
                let d = r.taps.apply(dirs[i].as_ref().expect("live"))?;
                Ok(r.r_tr.iter().zip(&d).map(|(x, d)| x - d * eps_max).collect())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[Complex64]> = probes.iter().map(Vec::as_slice).collect();
        for (k, q) in r.model.predict_batch(&refs)?.into_iter().enumerate() {
            full[ri][k] = q != r.true_label;
        }
    }

    let mut ranking: Vec<(JointClass, usize)> = live
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let fooled: Vec<f64> = (0..m).filter(|&ri| full[ri][k]).map(|ri| hi[ri][k]).collect();
            let eps = if fooled.is_empty() {
                (0..m).map(|ri| hi[ri][k]).fold(0.0, f64::max)
            } else {
                fooled.iter().copied().fold(0.0, f64::max)
            };
            (
                JointClass {
                    class: classes[i],
                    fooled: fooled.len(),
                    eps,
                },
                i,
            )
        })
        .collect();
    ranking.sort_by(|(a, _), (b, _)| {
        b.fooled
            .cmp(&a.fooled)
            .then(a.eps.total_cmp(&b.eps))
            .then(a.class.cmp(&b.class))
    });
    let best = ranking[0].1;
    let direction = dirs[best].clone().expect("live");
    Ok(JointSearch {
        ranking: ranking.into_iter().map(|(j, _)| j).collect(),
        direction,
    })
}

/// Jointly designed broadcast attack: `-sqrt(pmax)` times the winning
/// class's joint direction. `eps_acc` defaults to `sqrt(pmax) / 100`.
pub fn jdba(ens: &ReceiverEnsemble, pmax: f64, eps_acc: Option<f64>) -> Result<Perturbation> {
    let p = ens.receivers[0].r_tr.len();
    if !(pmax >= 0.0 && pmax.is_finite()) {
        return Err(Error::InvalidValue(format!("pmax must be finite and >= 0, got {pmax}")));
    }
    if pmax == 0.0 {
        return Ok(Perturbation::zero(p, 0.0));
    }
    let eps_max = pmax.sqrt();
    let s = jdba_search(ens, eps_max, eps_acc.unwrap_or(eps_max / 100.0))?;
    let delta: Vec<Complex64> = s.direction.iter().map(|x| x * -eps_max).collect();
    let mut out = Perturbation::new(delta, pmax);
    let win = &s.ranking[0];
    out.target = Some(win.class);
    out.eps = Some(win.eps);
    out.not_flipping = ens.correct_under(&out.delta)?.iter().all(|c| *c);
    Ok(out)
}

/// Weights inversely proportional to each receiver's Rayleigh scale.
pub fn heuristic_weights(rayleigh_scales: &[f64]) -> Result<Vec<f64>> {
    if rayleigh_scales.is_empty() || rayleigh_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidValue(format!("Rayleigh scales must be positive, got {rayleigh_scales:?}")));
    }
    let inv: Vec<f64> = rayleigh_scales.iter().map(|s| 1.0 / s).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / total).collect())
}

/// All weight vectors on the `m`-simplex with coordinates on a `step` grid.
pub fn simplex_grid(m: usize, step: f64) -> Result<Vec<Vec<f64>>> {
    if m == 0 {
        return Err(Error::InvalidValue("need at least one receiver".into()));
    }
    let n = (1.0 / step).round();
    if !(step > 0.0) || (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidValue(format!("grid step {step} must divide 1")));
    }
    let n = n as usize;
    let mut out = Vec::new();
    let mut cur = vec![0usize; m];
    compositions(n, 0, &mut cur, &mut out);
    Ok(out
        .into_iter()
        .map(|c| c.iter().map(|&k| k as f64 / n as f64).collect())
        .collect())
}

fn compositions(left: usize, i: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if i + 1 == cur.len() {
        cur[i] = left;
        out.push(cur.clone());
        return;
    }
    for k in (0..=left).rev() {
        cur[i] = k;
        compositions(left - k, i + 1, cur, out);
    }
}

/// Grid search for the weights with the lowest joint accuracy as reported
/// by `joint_accuracy`. Ties go to the candidate closest to uniform weights.
pub fn weight_line_search<F>(m: usize, step: f64, mut joint_accuracy: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let uniform = 1.0 / m as f64;
    let dist = |w: &[f64]| w.iter().map(|x| (x - uniform) * (x - uniform)).sum::<f64>();
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for w in simplex_grid(m, step)? {
        let acc = joint_accuracy(&w)?;
        let d = dist(&w);
        let better = match &best {
            None => true,
            Some((ba, bd, _)) => acc < *ba || (acc == *ba && d < *bd - 1e-12),
        };
        if better {
            best = Some((acc, d, w));
        }
    }
    Ok(best.expect("grid is nonempty").2)
}
