//! White-box attacks that know the adversary-to-receiver channel.
//!
//! Gradients are complex (`g_I + i g_Q`), so a perturbation `d` arriving at
//! the receiver changes the loss by `Re(sum conj(g_j) d_j)` to first order.
//!
//! Targeted attacks descend the loss of a chosen wrong class; the target is
//! the class that needs the smallest step along its own gradient direction to
//! flip the prediction away from the true label. Non-targeted attacks ascend
//! the loss of the true label.

use crate::channel::{ChannelTaps, TAP_FLOOR};
use crate::classifier::Classifier;
use crate::iqcore::norm;
use crate::nnad::softmax_rows;
use crate::{Complex64, Error, Result};

/// Default line-search grid for the MMSE scaling `gamma`.
pub const DEFAULT_GAMMA_GRID: [f64; 6] = [0.6, 0.8, 1.0, 1.2, 1.4, 1.6];

/// Default number of steps of the iterative non-targeted attacks.
pub const DEFAULT_ITERATIONS: usize = 10;

/// A crafted perturbation and what the attack learned while crafting it.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Vec<Complex64>,
    pub pmax: f64,
    /// Selected target class (targeted attacks).
    pub target: Option<usize>,
    /// Smallest flipping step found for the target.
    pub eps: Option<f64>,
    /// Set when even the full budget did not move the prediction.
    pub not_flipping: bool,
    /// MMSE scaling and multiplier chosen by the line search.
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    /// Iterations skipped because the gradient vanished.
    pub skipped_steps: usize,
}

impl Perturbation {
    pub fn new(delta: Vec<Complex64>, pmax: f64) -> Self {
        Perturbation {
            delta,
            pmax,
            target: None,
            eps: None,
            not_flipping: false,
            gamma: None,
            lambda: None,
            skipped_steps: 0,
        }
    }

    pub fn zero(len: usize, pmax: f64) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); len], pmax)
    }

    pub fn power(&self) -> f64 {
        self.delta.iter().map(|d| d.norm_sqr()).sum()
    }

    /// Whether `||delta||^2 <= pmax (1 + 1e-9)`.
    pub fn within_budget(&self) -> bool {
        self.power() <= self.pmax * (1.0 + 1e-9)
    }

    /// `H delta`, the perturbation as seen by the receiver.
    pub fn received(&self, taps: &ChannelTaps) -> Result<Vec<Complex64>> {
        taps.apply(&self.delta)
    }
}

/// Tunables shared by the attacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackOptions {
    /// Binary-search resolution; `None` means `sqrt(pmax) / 100`.
    pub eps_acc: Option<f64>,
    pub iterations: usize,
    pub reference_gain: f64,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            eps_acc: None,
            iterations: DEFAULT_ITERATIONS,
            reference_gain: 1.0,
        }
    }
}

/// Everything a white-box adversary knows about one receiver.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    pub model: &'a dyn Classifier,
    /// Receiver input without the perturbation.
    pub r_tr: &'a [Complex64],
    /// Adversary-to-receiver channel.
    pub taps: &'a ChannelTaps,
    pub true_label: usize,
    pub pmax: f64,
    /// Binary-search resolution; `None` means `sqrt(pmax) / 100`.
    pub eps_acc: Option<f64>,
    /// Iterations of the non-targeted attacks.
    pub iterations: usize,
    /// Power gain assumed when sizing channel-free reference perturbations:
    /// the reference budget is `pmax * reference_gain`.
    pub reference_gain: f64,
}

impl<'a> AttackContext<'a> {
    pub fn new(
        model: &'a dyn Classifier,
        r_tr: &'a [Complex64],
        taps: &'a ChannelTaps,
        true_label: usize,
        pmax: f64,
    ) -> Result<Self> {
        if taps.len() != r_tr.len() {
            return Err(Error::InputLength(format!(
                "{} taps for a {}-sample input",
                taps.len(),
                r_tr.len()
            )));
        }
        if true_label >= model.num_classes() {
            return Err(Error::InvalidValue(format!("true label {true_label} out of range")));
        }
        if !(pmax >= 0.0 && pmax.is_finite()) {
            return Err(Error::InvalidValue(format!("pmax must be finite and >= 0, got {pmax}")));
        }
        Ok(AttackContext {
            model,
            r_tr,
            taps,
            true_label,
            pmax,
            eps_acc: None,
            iterations: DEFAULT_ITERATIONS,
            reference_gain: 1.0,
        })
    }

    pub fn with_options(mut self, o: &AttackOptions) -> Self {
        self.eps_acc = o.eps_acc;
        self.iterations = o.iterations;
        self.reference_gain = o.reference_gain;
        self
    }

    pub fn with_eps_acc(mut self, eps_acc: f64) -> Self {
        self.eps_acc = Some(eps_acc);
        self
    }

    pub fn with_iterations(mut self, e: usize) -> Self {
        self.iterations = e;
        self
    }

    pub fn with_reference_gain(mut self, gain: f64) -> Self {
        self.reference_gain = gain;
        self
    }

    pub fn with_taps(mut self, taps: &'a ChannelTaps) -> Self {
        self.taps = taps;
        self
    }

    fn len(&self) -> usize {
        self.r_tr.len()
    }

    fn validate(&self) -> Result<()> {
        if let Some(e) = self.eps_acc {
            if !(e > 0.0) {
                return Err(Error::InvalidValue(format!("eps_acc must be > 0, got {e}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::InvalidValue("iteration count E must be >= 1".into()));
        }
        if !(self.reference_gain > 0.0 && self.reference_gain.is_finite()) {
            return Err(Error::InvalidValue("reference gain must be finite and > 0".into()));
        }
        Ok(())
    }

    fn reference_pmax(&self) -> f64 {
        self.pmax * self.reference_gain
    }

    /// Search resolution for a step range `[0, eps_max]` at the reference
    /// budget; a configured `eps_acc` is scaled along with the range.
    fn resolution(&self, eps_max: f64) -> f64 {
        match self.eps_acc {
            Some(e) => e * self.reference_gain.sqrt(),
            None => eps_max / 100.0,
        }
    }
}

fn scale(v: &[Complex64], s: f64) -> Vec<Complex64> {
    v.iter().map(|x| x * s).collect()
}

fn unit(v: Vec<Complex64>) -> Option<Vec<Complex64>> {
    let n = norm(&v);
    (n > 0.0 && n.is_finite()).then(|| scale(&v, 1.0 / n))
}

/// Outcome of the per-class binary search.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSearch {
    pub target: usize,
    /// Unit transmit direction for the target (the perturbation is
    /// `-eps * direction`).
    pub direction: Vec<Complex64>,
    /// Flipping step per class; `eps_max` where no flip was found, `NaN` for
    /// the true class.
    pub eps: Vec<f64>,
    pub not_flipping: bool,
}

/// The targeted search: per class `c != true`, the direction
/// `H* grad L(r_tr, c) / ||.||`, a binary search of the smallest step
/// `eps in [0, eps_max]` with `r_tr - eps H dir` classified away from the
/// true label, and the class with the smallest step wins (ties: lowest index).
/// With `taps == None` the channel is the identity.
pub fn targeted_search(
    model: &dyn Classifier,
    r_tr: &[Complex64],
    taps: Option<&ChannelTaps>,
    true_label: usize,
    eps_max: f64,
    eps_acc: f64,
) -> Result<TargetSearch> {
    let c = model.num_classes();
    if !(eps_acc > 0.0) {
        return Err(Error::InvalidValue(format!("eps_acc must be > 0, got {eps_acc}")));
    }
    let classes: Vec<usize> = (0..c).filter(|&k| k != true_label).collect();
    let inputs: Vec<&[Complex64]> = vec![r_tr; classes.len()];
    let grads = model.loss_grads(&inputs, &classes)?;

    let mut dirs: Vec<Option<Vec<Complex64>>> = Vec::with_capacity(classes.len());
    let mut received: Vec<Vec<Complex64>> = Vec::with_capacity(classes.len());
    for g in grads {
        let d = match taps {
            Some(h) => unit(h.apply_conj(&g)?),
            None => unit(g),
        };
        let rx = match (&d, taps) {
            (Some(d), Some(h)) => h.apply(d)?,
            (Some(d), None) => d.clone(),
            (None, _) => vec![Complex64::new(0.0, 0.0); r_tr.len()],
        };
        dirs.push(d);
        received.push(rx);
    }
    if dirs.iter().all(Option::is_none) {
        return Err(Error::Degenerate("all class gradients vanish".into()));
    }
    let live: Vec<usize> = (0..classes.len()).filter(|&i| dirs[i].is_some()).collect();

    let mut lo = vec![0.0; classes.len()];
    let mut hi = vec![eps_max; classes.len()];
    let mut width = eps_max;
    while width > eps_acc {
        let mid = width / 2.0;
        let probes: Vec<Vec<Complex64>> = live
            .iter()
            .map(|&i| {
                let m = lo[i] + mid;
                r_tr.iter().zip(&received[i]).map(|(x, d)| x - d * m).collect()
            })
            .collect();
        let refs: Vec<&[Complex64]> = probes.iter().map(Vec::as_slice).collect();
        let pred = model.predict_batch(&refs)?;
        for (&i, p) in live.iter().zip(pred) {
            let m = lo[i] + mid;
            if p == true_label {
                lo[i] = m;
            } else {
                hi[i] = m;
            }
        }
        width = mid;
    }

    let mut eps = vec![f64::NAN; c];
    let mut best: Option<usize> = None;
    for &i in &live {
        eps[classes[i]] = hi[i];
        if best.is_none_or(|b| hi[i] < hi[b]) {
            best = Some(i);
        }
    }
    for (i, &k) in classes.iter().enumerate() {
        if dirs[i].is_none() {
            eps[k] = eps_max;
        }
    }
    let b = best.expect("at least one live class");
    let full: Vec<Complex64> = r_tr.iter().zip(&received[b]).map(|(x, d)| x - d * eps_max).collect();
    let not_flipping = model.predict(&full)? == true_label;
    Ok(TargetSearch {
        target: classes[b],
        direction: dirs[b].take().expect("live direction"),
        eps,
        not_flipping,
    })
}

fn targeted_output(search: TargetSearch, len: usize, pmax: f64) -> Perturbation {
    let eps = search.eps[search.target];
    let mut p = Perturbation::new(scale(&search.direction, -pmax.sqrt()), pmax);
    debug_assert_eq!(p.delta.len(), len);
    p.target = Some(search.target);
    p.eps = Some(eps);
    p.not_flipping = search.not_flipping;
    p
}

/// Channel-free targeted search, at the reference budget.
fn nochannel_search(ctx: &AttackContext) -> Result<TargetSearch> {
    ctx.validate()?;
    let eps_max = ctx.reference_pmax().sqrt();
    targeted_search(ctx.model, ctx.r_tr, None, ctx.true_label, eps_max, ctx.resolution(eps_max))
}

/// The channel-unaware targeted perturbation: the target search with the
/// identity channel, scaled to the full transmit budget.
pub fn fgm_targeted_nochannel(ctx: &AttackContext) -> Result<Perturbation> {
    if ctx.pmax == 0.0 {
        return Ok(Perturbation::zero(ctx.len(), 0.0));
    }
    let s = nochannel_search(ctx)?;
    Ok(targeted_output(s, ctx.len(), ctx.pmax))
}

/// Targeted attack through the channel with conjugate-tap precoding.
pub fn mrpp_targeted(ctx: &AttackContext) -> Result<Perturbation> {
    ctx.validate()?;
    if ctx.pmax == 0.0 {
        return Ok(Perturbation::zero(ctx.len(), 0.0));
    }
    let eps_max = ctx.pmax.sqrt();
    let eps_acc = ctx.eps_acc.unwrap_or(eps_max / 100.0);
    let s = targeted_search(ctx.model, ctx.r_tr, Some(ctx.taps), ctx.true_label, eps_max, eps_acc)?;
    Ok(targeted_output(s, ctx.len(), ctx.pmax))
}

/// Divides the channel-free direction by the taps so that the received
/// perturbation is a negative multiple of it, then rescales to the budget.
pub fn channel_inversion(ctx: &AttackContext) -> Result<Perturbation> {
    if ctx.pmax == 0.0 {
        return Ok(Perturbation::zero(ctx.len(), 0.0));
    }
    let s = nochannel_search(ctx)?;
    let mut p = invert_direction(ctx.taps, &s.direction, ctx.pmax)?;
    p.target = Some(s.target);
    p.eps = Some(s.eps[s.target]);
    p.not_flipping = s.not_flipping;
    Ok(p)
}

/// `delta_j = n_j / h_j`, `delta_div = -alpha delta` with
/// `alpha = sqrt(pmax) / ||delta||`.
pub fn invert_direction(taps: &ChannelTaps, nochannel: &[Complex64], pmax: f64) -> Result<Perturbation> {
    if nochannel.len() != taps.len() {
        return Err(Error::InputLength(format!(
            "{} taps for a {}-sample reference",
            taps.len(),
            nochannel.len()
        )));
    }
    let mut delta = Vec::with_capacity(taps.len());
    for (j, (n, h)) in nochannel.iter().zip(taps.taps()).enumerate() {
        if h.norm() < TAP_FLOOR {
            return Err(Error::Degenerate(format!("tap {j} below {TAP_FLOOR:e}")));
        }
        delta.push(n / h);
    }
    let d = norm(&delta);
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Degenerate("inverted perturbation has no usable norm".into()));
    }
    let alpha = pmax.sqrt() / d;
    Ok(Perturbation::new(scale(&delta, -alpha), pmax))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmseSolution {
    pub delta: Vec<Complex64>,
    pub lambda: f64,
}

const BISECTION_LIMIT: usize = 200;

/// Minimizes `||H delta - gamma * reference||^2` subject to
/// `||delta||^2 <= pmax`. The KKT conditions give
/// `delta_j = gamma conj(h_j) reference_j / (|h_j|^2 + lambda)` with `lambda`
/// found by bisection so the power constraint holds with equality when active.
pub fn mmse_solve(taps: &ChannelTaps, reference: &[Complex64], gamma: f64, pmax: f64) -> Result<MmseSolution> {
    if reference.len() != taps.len() {
        return Err(Error::InputLength(format!(
            "{} taps for a {}-sample reference",
            taps.len(),
            reference.len()
        )));
    }
    if !(pmax >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidValue(format!("bad MMSE inputs: gamma {gamma}, pmax {pmax}")));
    }
    let h = taps.taps();
    let build = |lambda: f64| -> Vec<Complex64> {
        h.iter()
            .zip(reference)
            .map(|(h, r)| h.conj() * r * gamma / (h.norm_sqr() + lambda))
            .collect()
    };
    let power = |lambda: f64| -> f64 {
        h.iter()
            .zip(reference)
            .map(|(h, r)| {
                let a = h.norm_sqr();
                gamma * gamma * a * r.norm_sqr() / ((a + lambda) * (a + lambda))
            })
            .sum()
    };
    if power(0.0) <= pmax {
        return Ok(MmseSolution {
            delta: build(0.0),
            lambda: 0.0,
        });
    }
    if pmax == 0.0 {
        return Ok(MmseSolution {
            delta: vec![Complex64::new(0.0, 0.0); h.len()],
            lambda: f64::INFINITY,
        });
    }
    // power(lambda) <= sum gamma^2 |h|^2 |r|^2 / lambda^2, so this bracket is feasible.
    let weighted: f64 = h.iter().zip(reference).map(|(h, r)| h.norm_sqr() * r.norm_sqr()).sum();
    let mut hi = gamma.abs() * (weighted / pmax).sqrt();
    let mut lo = 0.0;
    let mut converged = false;
    for _ in 0..BISECTION_LIMIT {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            converged = true;
            break;
        }
        if power(mid) > pmax {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            converged = true;
            break;
        }
    }
    let p_hi = power(hi);
    if !converged || (pmax - p_hi) > 1e-9 * pmax {
        return Err(Error::Numeric(format!(
            "MMSE multiplier bisection did not converge (power {p_hi} vs budget {pmax})"
        )));
    }
    Ok(MmseSolution {
        delta: build(hi),
        lambda: hi,
    })
}

/// The MMSE solution written with an unsigned channel-free direction `n`:
/// `delta_j = -gamma conj(h_j) n_j / (|h_j|^2 + lambda)`. The channel-free
/// targeted perturbation is `-n`, so this is [`mmse_solve`] with reference `-n`.
pub fn mmse_from_direction(taps: &ChannelTaps, n: &[Complex64], gamma: f64, pmax: f64) -> Result<MmseSolution> {
    let neg: Vec<Complex64> = n.iter().map(|v| -v).collect();
    mmse_solve(taps, &neg, gamma, pmax)
}

/// Runs [`mmse_solve`] for each `gamma` and keeps the perturbation that gives
/// the true class the lowest probability at the receiver (ties: first gamma).
fn mmse_line_search(ctx: &AttackContext, reference: &[Complex64], gamma_grid: &[f64]) -> Result<Perturbation> {
    if gamma_grid.is_empty() {
        return Err(Error::InvalidValue("gamma grid is empty".into()));
    }
    let sols: Vec<(f64, MmseSolution)> = gamma_grid
        .iter()
        .map(|&g| mmse_solve(ctx.taps, reference, g, ctx.pmax).map(|s| (g, s)))
        .collect::<Result<_>>()?;
    let observed: Vec<Vec<Complex64>> = sols
        .iter()
        .map(|(_, s)| {
            let rx = ctx.taps.apply(&s.delta)?;
            Ok(ctx.r_tr.iter().zip(&rx).map(|(x, d)| x + d).collect())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[Complex64]> = observed.iter().map(Vec::as_slice).collect();
    let logits = ctx.model.logits(&refs)?;
    let mut best = 0;
    let mut best_p = f64::INFINITY;
    for (i, z) in logits.iter().enumerate() {
        let p = softmax_rows(z, z.len())[ctx.true_label];
        if p < best_p {
            best_p = p;
            best = i;
        }
    }
    let (gamma, sol) = sols.into_iter().nth(best).expect("nonempty grid");
    let mut p = Perturbation::new(sol.delta, ctx.pmax);
    p.gamma = Some(gamma);
    p.lambda = Some(sol.lambda);
    Ok(p)
}

/// Targeted MMSE attack: approximates a scaled channel-free perturbation at the
/// receiver under the transmit budget.
pub fn mmse_targeted(ctx: &AttackContext, gamma_grid: &[f64]) -> Result<Perturbation> {
    if ctx.pmax == 0.0 {
        return Ok(Perturbation::zero(ctx.len(), 0.0));
    }
    let s = nochannel_search(ctx)?;
    let reference = scale(&s.direction, -ctx.reference_pmax().sqrt());
    let mut p = mmse_line_search(ctx, &reference, gamma_grid)?;
    p.target = Some(s.target);
    p.eps = Some(s.eps[s.target]);
    p.not_flipping = s.not_flipping;
    Ok(p)
}

/// The iterative non-targeted attack. Each step spends `pmax / E` along the
/// normalized true-label gradient (conjugate-precoded when `conjugate` is set),
/// advances the running input through the channel and accumulates the
/// transmitted steps; the sum is rescaled to the budget.
fn iterative_nontargeted(ctx: &AttackContext, taps: Option<&ChannelTaps>, pmax: f64, conjugate: bool) -> Result<Perturbation> {
    ctx.validate()?;
    let e = ctx.iterations;
    let step = (pmax / e as f64).sqrt();
    let mut x = ctx.r_tr.to_vec();
    let mut acc = vec![Complex64::new(0.0, 0.0); x.len()];
    let mut skipped = 0;
    for _ in 0..e {
        let g = ctx.model.loss_grad(&x, ctx.true_label)?;
        let dir = match (taps, conjugate) {
            (Some(h), true) => unit(h.apply_conj(&g)?),
            _ => unit(g),
        };
        let Some(dir) = dir else {
            skipped += 1;
            continue;
        };
        let rx = match taps {
            Some(h) => h.apply(&dir)?,
            None => dir.clone(),
        };
        for j in 0..x.len() {
            x[j] += rx[j] * step;
            acc[j] += dir[j] * step;
        }
    }
    let n = norm(&acc);
    if !(n > 0.0) {
        return Err(Error::Degenerate(format!("gradient vanished in all {e} iterations")));
    }
    let mut p = Perturbation::new(scale(&acc, pmax.sqrt() / n), pmax);
    p.skipped_steps = skipped;
    Ok(p)
}

/// Non-targeted attack that ignores the channel in its direction choice.
pub fn naive_nontargeted(ctx: &AttackContext) -> Result<Perturbation> {
    if ctx.pmax == 0.0 {
        return Ok(Perturbation::zero(ctx.len(), 0.0));
    }
    iterative_nontargeted(ctx, Some(ctx.taps), ctx.pmax, false)
}

/// Non-targeted attack with conjugate-tap precoding at every step.
pub fn mrpp_nontargeted(ctx: &AttackContext) -> Result<Perturbation> {
    if ctx.pmax == 0.0 {
        return Ok(Perturbation::zero(ctx.len(), 0.0));
    }
    iterative_nontargeted(ctx, Some(ctx.taps), ctx.pmax, true)
}

/// Non-targeted MMSE attack: the reference is the naive attack computed with
/// the identity channel at the reference budget.
pub fn mmse_nontargeted(ctx: &AttackContext, gamma_grid: &[f64]) -> Result<Perturbation> {
    if ctx.pmax == 0.0 {
        return Ok(Perturbation::zero(ctx.len(), 0.0));
    }
    let reference = iterative_nontargeted(ctx, None, ctx.reference_pmax(), false)?;
    let mut p = mmse_line_search(ctx, &reference.delta, gamma_grid)?;
    p.skipped_steps = reference.skipped_steps;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Two-class linear model: logit_0 = 0, logit_1 = Re<w, x> + b.
    struct Linear {
        w: Vec<Complex64>,
        b: f64,
    }

    impl Classifier for Linear {
        fn num_classes(&self) -> usize {
            2
        }
        fn logits(&self, frames: &[&[Complex64]]) -> Result<Vec<Vec<f64>>> {
            Ok(frames
                .iter()
                .map(|f| {
                    let s: f64 = self.w.iter().zip(f.iter()).map(|(w, x)| (w.conj() * x).re).sum();
                    vec![0.0, s + self.b]
                })
                .collect())
        }
        fn loss_grads(&self, frames: &[&[Complex64]], labels: &[usize]) -> Result<Vec<Vec<Complex64>>> {
            let z = self.logits(frames)?;
            Ok(z.iter()
                .zip(labels)
                .map(|(z, &l)| {
                    let p1 = softmax_rows(z, 2)[1];
                    let d1 = p1 - if l == 1 { 1.0 } else { 0.0 };
                    self.w.iter().map(|w| w * d1).collect()
                })
                .collect())
        }
    }

    #[test]
    fn scalar_mmse_hand_case() {
        let taps = ChannelTaps::new(vec![c(2.0, 0.0)]).unwrap();
        let s = mmse_from_direction(&taps, &[c(1.0, 0.0)], 1.0, 0.04).unwrap();
        assert!((s.lambda - 6.0).abs() < 1e-6, "{}", s.lambda);
        assert!((s.delta[0] - c(-0.2, 0.0)).norm() < 1e-8);
        let m = mmse_solve(&taps, &[c(1.0, 0.0)], 1.0, 0.04).unwrap();
        assert!((m.delta[0] - c(0.2, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn mmse_unconstrained_branch() {
        let taps = ChannelTaps::new(vec![c(1.0, 0.0); 3]).unwrap();
        let n = [c(0.01, 0.0), c(0.0, -0.02), c(0.01, 0.01)];
        let s = mmse_from_direction(&taps, &n, 1.3, 1.0).unwrap();
        assert_eq!(s.lambda, 0.0);
        for (d, v) in s.delta.iter().zip(&n) {
            assert!((d + v * 1.3).norm() < 1e-15);
        }
    }

    #[test]
    fn mmse_received_is_nonnegative_scaling() {
        let taps = ChannelTaps::new(vec![c(0.3, 0.4), c(-1.0, 0.2), c(0.05, -0.01)]).unwrap();
        let n = [c(1.0, 0.5), c(-0.2, 0.3), c(0.7, -0.7)];
        let s = mmse_from_direction(&taps, &n, 1.2, 0.1).unwrap();
        let rx = taps.apply(&s.delta).unwrap();
        for ((r, v), h) in rx.iter().zip(&n).zip(taps.taps()) {
            let alpha = 1.2 * h.norm_sqr() / (h.norm_sqr() + s.lambda);
            assert!((r + v * alpha).norm() < 1e-12);
        }
        let p: f64 = s.delta.iter().map(|d| d.norm_sqr()).sum();
        assert!((p - 0.1).abs() <= 1e-9 * 0.1);
    }

    #[test]
    fn inversion_examples() {
        let n = vec![c(0.6, 0.0), c(0.0, 0.8)];
        let id = ChannelTaps::identity(2);
        let p = invert_direction(&id, &n, 4.0).unwrap();
        assert!((p.delta[0] - c(-1.2, 0.0)).norm() < 1e-15 && (p.delta[1] - c(0.0, -1.6)).norm() < 1e-15);

        // Uniform taps of 2: transmit still at full budget, received collinear.
        let two = ChannelTaps::new(vec![c(2.0, 0.0); 2]).unwrap();
        let p = invert_direction(&two, &n, 1.0).unwrap();
        assert!((p.power() - 1.0).abs() < 1e-12);
        let rx = p.received(&two).unwrap();
        let alpha = 1.0 / norm(&[n[0] / 2.0, n[1] / 2.0]);
        for (r, v) in rx.iter().zip(&n) {
            assert!((r + v * alpha).norm() < 1e-12);
        }

        // One weak tap soaks up the budget.
        let weak = ChannelTaps::new(vec![c(1.0, 0.0), c(1e-3, 0.0)]).unwrap();
        let n = vec![c(1.0, 0.0), c(1.0, 0.0)];
        let p = invert_direction(&weak, &n, 1.0).unwrap();
        let rx = p.received(&weak).unwrap();
        // delta = -(1, 1000)/sqrt(1 + 1e6); received = -(1, 1)/sqrt(1 + 1e6).
        let expect = 1.0 / (1.0f64 + 1e6).sqrt();
        assert!((rx[0].re + expect).abs() < 1e-15 && (rx[1].re + expect).abs() < 1e-12);
        let ratio = rx.iter().map(|r| r.norm_sqr()).sum::<f64>() / p.power();
        assert!((ratio - 2.0 / (1.0 + 1e6)).abs() < 1e-15);
    }

    #[test]
    fn linear_stub_target_and_boundary() {
        // logit_1 - logit_0 = Re<w, x> + b; at x = 0 the model says class 1
        // when b > 0. Distance to the boundary along -grad is b / ||w||.
        let w = vec![c(3.0, 0.0), c(0.0, 4.0)];
        let model = Linear { w, b: 1.5 };
        let x = vec![c(0.0, 0.0); 2];
        let id = ChannelTaps::identity(2);
        let ctx = AttackContext::new(&model, &x, &id, 1, 1.0).unwrap().with_eps_acc(1e-3);
        let p = fgm_targeted_nochannel(&ctx).unwrap();
        assert_eq!(p.target, Some(0));
        let exact = 1.5 / 5.0;
        assert!((p.eps.unwrap() - exact).abs() <= 1e-3 && p.eps.unwrap() >= exact);
        assert!((p.power() - 1.0).abs() < 1e-12);
        assert!(!p.not_flipping);
    }

    /// Predicts class 1 while the received energy shift is small, then 0.
    struct Threshold {
        center: Vec<Complex64>,
        eps_star: f64,
    }

    impl Classifier for Threshold {
        fn num_classes(&self) -> usize {
            3
        }
        fn logits(&self, frames: &[&[Complex64]]) -> Result<Vec<Vec<f64>>> {
            Ok(frames
                .iter()
                .map(|f| {
                    let d = f.iter().zip(&self.center).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
                    if d < self.eps_star {
                        vec![0.0, 1.0, 0.0]
                    } else {
                        vec![1.0, 0.0, 0.0]
                    }
                })
                .collect())
        }
        fn loss_grads(&self, frames: &[&[Complex64]], labels: &[usize]) -> Result<Vec<Vec<Complex64>>> {
            Ok(frames
                .iter()
                .zip(labels)
                .map(|(f, &l)| f.iter().enumerate().map(|(j, _)| c(1.0 + j as f64 + l as f64, 0.5)).collect())
                .collect())
        }
    }

    #[test]
    fn threshold_stub_binary_search() {
        let x = vec![c(0.0, 0.0); 4];
        let model = Threshold {
            center: x.clone(),
            eps_star: 0.3,
        };
        let id = ChannelTaps::identity(4);
        let ctx = AttackContext::new(&model, &x, &id, 1, 1.0).unwrap().with_eps_acc(0.01);
        let p = mrpp_targeted(&ctx).unwrap();
        let e = p.eps.unwrap();
        assert!((0.29..=0.31).contains(&e), "{e}");
    }

    #[test]
    fn mrpp_phase_is_opposite_gradient() {
        let w: Vec<Complex64> = (0..16).map(|j| c((j as f64 * 0.7).sin(), (j as f64 * 1.3).cos())).collect();
        let model = Linear { w, b: 0.5 };
        let x: Vec<Complex64> = (0..16).map(|j| c(0.1 * j as f64, -0.05)).collect();
        let taps = ChannelTaps::new((0..16).map(|j| Complex64::from_polar(0.2 + j as f64 * 0.1, j as f64)).collect()).unwrap();
        let ctx = AttackContext::new(&model, &x, &taps, 1, 2.0).unwrap();
        let p = mrpp_targeted(&ctx).unwrap();
        let g = model.loss_grad(&x, p.target.unwrap()).unwrap();
        let rx = p.received(&taps).unwrap();
        for (r, gj) in rx.iter().zip(&g) {
            let diff = (r.arg() - (-gj).arg() + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
            assert!(diff.abs() < 1e-8);
        }
        assert!((p.power() - 2.0).abs() < 1e-9 * 2.0);
    }

    #[test]
    fn identity_channel_mrpp_equals_nochannel() {
        let w: Vec<Complex64> = (0..8).map(|j| c(1.0 - j as f64 * 0.2, 0.3)).collect();
        let model = Linear { w, b: 0.2 };
        let x = vec![c(0.1, 0.2); 8];
        let id = ChannelTaps::identity(8);
        let ctx = AttackContext::new(&model, &x, &id, 1, 0.7).unwrap();
        assert_eq!(mrpp_targeted(&ctx).unwrap(), fgm_targeted_nochannel(&ctx).unwrap());
        assert_eq!(mrpp_nontargeted(&ctx).unwrap(), naive_nontargeted(&ctx).unwrap());
    }

    /// L = ||x - a||^2 for every label; gradient 2 (x - a).
    struct Quadratic {
        a: Vec<Complex64>,
    }

    impl Classifier for Quadratic {
        fn num_classes(&self) -> usize {
            2
        }
        fn logits(&self, frames: &[&[Complex64]]) -> Result<Vec<Vec<f64>>> {
            Ok(frames.iter().map(|_| vec![0.0, 0.0]).collect())
        }
        fn loss_grads(&self, frames: &[&[Complex64]], _labels: &[usize]) -> Result<Vec<Vec<Complex64>>> {
            Ok(frames
                .iter()
                .map(|f| f.iter().zip(&self.a).map(|(x, a)| (x - a) * 2.0).collect())
                .collect())
        }
    }

    fn hand_recursion(a: &[Complex64], x0: &[Complex64], h: &[Complex64], pmax: f64, e: usize, conj: bool) -> Vec<Complex64> {
        let step = (pmax / e as f64).sqrt();
        let mut x = x0.to_vec();
        let mut acc = vec![c(0.0, 0.0); x.len()];
        for _ in 0..e {
            let g: Vec<Complex64> = x.iter().zip(a).map(|(x, a)| (x - a) * 2.0).collect();
            let d: Vec<Complex64> = if conj { g.iter().zip(h).map(|(g, h)| h.conj() * g).collect() } else { g };
            let n = norm(&d);
            for j in 0..x.len() {
                x[j] += h[j] * d[j] / n * step;
                acc[j] += d[j] / n * step;
            }
        }
        let n = norm(&acc);
        acc.iter().map(|v| v * pmax.sqrt() / n).collect()
    }

    #[test]
    fn quadratic_stub_recursions() {
        let a = vec![c(1.0, -1.0), c(0.5, 2.0)];
        let x = vec![c(0.2, 0.1), c(-0.3, 0.4)];
        let h = vec![c(0.5, 0.5), c(-1.5, 0.25)];
        let model = Quadratic { a: a.clone() };
        let taps = ChannelTaps::new(h.clone()).unwrap();
        let ctx = AttackContext::new(&model, &x, &taps, 0, 0.8).unwrap().with_iterations(3);
        let naive = naive_nontargeted(&ctx).unwrap();
        for (u, v) in naive.delta.iter().zip(hand_recursion(&a, &x, &h, 0.8, 3, false)) {
            assert!((u - v).norm() < 1e-12);
        }
        let ctx4 = ctx.with_iterations(4);
        let mrpp = mrpp_nontargeted(&ctx4).unwrap();
        for (u, v) in mrpp.delta.iter().zip(hand_recursion(&a, &x, &h, 0.8, 4, true)) {
            assert!((u - v).norm() < 1e-12);
        }
        assert!((naive.power() - 0.8).abs() < 1e-12 && (mrpp.power() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_step_naive_is_fgm() {
        let a = vec![c(1.0, -1.0), c(0.5, 2.0)];
        let x = vec![c(0.2, 0.1), c(-0.3, 0.4)];
        let model = Quadratic { a };
        let id = ChannelTaps::identity(2);
        let ctx = AttackContext::new(&model, &x, &id, 0, 0.5).unwrap().with_iterations(1);
        let p = naive_nontargeted(&ctx).unwrap();
        let g = model.loss_grad(&x, 0).unwrap();
        let n = norm(&g);
        for (d, gj) in p.delta.iter().zip(&g) {
            assert!((d - gj * (0.5f64.sqrt() / n)).norm() < 1e-15);
        }
    }

    #[test]
    fn vanishing_gradient_is_degenerate() {
        let x = vec![c(1.0, 1.0); 3];
        let model = Quadratic { a: x.clone() };
        let id = ChannelTaps::identity(3);
        let ctx = AttackContext::new(&model, &x, &id, 0, 1.0).unwrap();
        assert!(matches!(naive_nontargeted(&ctx), Err(Error::Degenerate(_))));
    }

    #[test]
    fn two_classes_target_the_other() {
        let model = Linear {
            w: vec![c(1.0, 0.0)],
            b: -5.0,
        };
        let x = vec![c(0.0, 0.0)];
        let id = ChannelTaps::identity(1);
        let ctx = AttackContext::new(&model, &x, &id, 0, 1.0).unwrap();
        let p = fgm_targeted_nochannel(&ctx).unwrap();
        assert_eq!(p.target, Some(1));
        // Needs a step of 5 but only 1 is available.
        assert!(p.not_flipping);
        assert!((p.power() - 1.0).abs() < 1e-12);
    }

    fn cvec(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
        prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64).prop_map(|(a, b)| c(a, b)), n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mmse_kkt_holds(h in cvec(16), r in cvec(16), gamma in 0.5..2.0f64, pmax in 0.01..1.0f64) {
            prop_assume!(h.iter().all(|v| v.norm() > 1e-3));
            let taps = ChannelTaps::new(h.clone()).unwrap();
            let s = mmse_solve(&taps, &r, gamma, pmax).unwrap();
            let scale = norm(&r);
            for j in 0..16 {
                let res = h[j].conj() * (h[j] * s.delta[j] - r[j] * gamma) + s.delta[j] * s.lambda;
                prop_assert!(res.norm() <= 1e-6 * scale);
            }
            let p: f64 = s.delta.iter().map(|d| d.norm_sqr()).sum();
            if s.lambda > 0.0 {
                prop_assert!((p - pmax).abs() <= 1e-6 * pmax);
            }
            prop_assert!(p <= pmax * (1.0 + 1e-9));
        }

        /// Among feasible perturbations, the conjugate-precoded one gives the
        /// steepest first-order decrease of the target loss at the receiver.
        #[test]
        fn mrpp_is_the_steepest_feasible_direction(h in cvec(8), g in cvec(8), seed in 0u64..1000) {
            use rand::Rng;
            prop_assume!(h.iter().all(|v| v.norm() > 1e-3) && norm(&g) > 1e-3);
            let taps = ChannelTaps::new(h).unwrap();
            let pmax: f64 = 0.3;
            let d = unit(taps.apply_conj(&g).unwrap()).unwrap();
            let mrpp = scale(&d, -pmax.sqrt());
            let change = |delta: &[Complex64]| -> f64 {
                let rx = taps.apply(delta).unwrap();
                g.iter().zip(&rx).map(|(a, b)| (a.conj() * b).re).sum()
            };
            let best = change(&mrpp);
            let mut rng = crate::rng::seeded(seed);
            for _ in 0..10_000 {
                let v: Vec<Complex64> = (0..8).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
                let s = pmax.sqrt() * rng.random::<f64>() / norm(&v);
                let cand = scale(&v, s);
                prop_assert!(change(&cand) >= best - 1e-12);
            }
        }
    }
}
