//! Adversary-to-receiver fading channel, AWGN and power bookkeeping.
//!
//! A tap is `K (d0/d)^gamma * psi * h_ray`: a deterministic path-loss factor, a
//! per-frame lognormal shadowing gain `psi` and per-symbol Rayleigh fading
//! `h_ray` with uniform phase. The channel acts on a frame as the diagonal
//! matrix `diag(taps)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Complex64, Error, Result};

/// Taps whose magnitude falls below this are redrawn.
pub const TAP_FLOOR: f64 = 1e-12;

/// How the shadowing standard deviation is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShadowingUnits {
    /// `psi = 10^(X/20)`, `X ~ N(0, sigma)` in dB.
    #[default]
    Decibel,
    /// `psi = exp(X)`, `X ~ N(0, sigma)`.
    Natural,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub k: f64,
    pub d0: f64,
    pub d: f64,
    pub gamma_pl: f64,
    pub shadow_sigma: f64,
    pub shadow_units: ShadowingUnits,
    pub rayleigh_scale: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            k: 1.0,
            d0: 1.0,
            d: 10.0,
            gamma_pl: 2.7,
            shadow_sigma: 8.0,
            shadow_units: ShadowingUnits::Decibel,
            rayleigh_scale: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidValue(format!("channel: {what}")));
        if !(self.d > 0.0) {
            return bad("d must be > 0");
        }
        if !(self.d0 > 0.0) {
            return bad("d0 must be > 0");
        }
        if !(self.gamma_pl >= 0.0) {
            return bad("path-loss exponent must be >= 0");
        }
        if !(self.rayleigh_scale > 0.0) {
            return bad("rayleigh_scale must be > 0");
        }
        if !(self.shadow_sigma >= 0.0) || !self.k.is_finite() || self.k == 0.0 {
            return bad("shadowing sigma must be >= 0 and K finite and nonzero");
        }
        Ok(())
    }

    /// `K (d0/d)^gamma`, the deterministic amplitude factor.
    pub fn path_loss_factor(&self) -> f64 {
        self.k * (self.d0 / self.d).powf(self.gamma_pl)
    }

    /// Identity-like parameters: no path loss, no shadowing.
    pub fn unit(rayleigh_scale: f64) -> Self {
        ChannelParams {
            d: 1.0,
            gamma_pl: 0.0,
            shadow_sigma: 0.0,
            rayleigh_scale,
            ..Default::default()
        }
    }

    fn draw_shadowing<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x: f64 = rng.sample::<f64, _>(StandardNormal) * self.shadow_sigma;
        match self.shadow_units {
            ShadowingUnits::Decibel => 10f64.powf(x / 20.0),
            ShadowingUnits::Natural => x.exp(),
        }
    }
}

/// Diagonal of the channel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTaps(Vec<Complex64>);

impl ChannelTaps {
    pub fn new(taps: Vec<Complex64>) -> Result<Self> {
        if let Some(j) = taps.iter().position(|h| !h.re.is_finite() || !h.im.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite tap at index {j}")));
        }
        if let Some(j) = taps.iter().position(|h| h.norm() < TAP_FLOOR) {
            return Err(Error::Degenerate(format!("tap {j} below {TAP_FLOOR:e}")));
        }
        Ok(ChannelTaps(taps))
    }

    pub fn identity(len: usize) -> Self {
        ChannelTaps(vec![Complex64::new(1.0, 0.0); len])
    }

    /// Composes `K (d0/d)^gamma * psi * h_ray` from explicit components.
    pub fn from_components(params: &ChannelParams, psi: f64, h_ray: &[Complex64]) -> Result<Self> {
        let a = params.path_loss_factor() * psi;
        ChannelTaps::new(h_ray.iter().map(|&h| h * a).collect())
    }

    pub fn taps(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(H x)_j = h_j x_j`.
    pub fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        if x.len() != self.0.len() {
            return Err(Error::InputLength(format!(
                "channel has {} taps, signal has {} samples",
                self.0.len(),
                x.len()
            )));
        }
        Ok(self.0.iter().zip(x).map(|(h, s)| h * s).collect())
    }

    /// `(H* x)_j = conj(h_j) x_j`.
    pub fn apply_conj(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        if x.len() != self.0.len() {
            return Err(Error::InputLength(format!(
                "channel has {} taps, signal has {} samples",
                self.0.len(),
                x.len()
            )));
        }
        Ok(self.0.iter().zip(x).map(|(h, s)| h.conj() * s).collect())
    }

    pub fn max_gain(&self) -> f64 {
        self.0.iter().map(|h| h.norm_sqr()).fold(0.0, f64::max)
    }
}

/// Draws one frame of taps: shadowing once, Rayleigh fading per symbol.
pub fn sample_taps<R: Rng + ?Sized>(params: &ChannelParams, len: usize, rng: &mut R) -> Result<ChannelTaps> {
    params.validate()?;
    let psi = params.draw_shadowing(rng);
    let a = params.path_loss_factor() * psi;
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::Degenerate(format!("channel amplitude factor {a}")));
    }
    let mut taps = Vec::with_capacity(len);
    for _ in 0..len {
        loop {
            let h = rayleigh(params.rayleigh_scale, rng) * a;
            if h.norm() >= TAP_FLOOR {
                taps.push(h);
                break;
            }
        }
    }
    ChannelTaps::new(taps)
}

/// Complex gain with Rayleigh(scale) magnitude and uniform phase.
fn rayleigh<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Complex64 {
    Complex64::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * scale
}

pub fn apply_channel(taps: &ChannelTaps, x: &[Complex64]) -> Result<Vec<Complex64>> {
    taps.apply(x)
}

/// Adds circularly-symmetric complex Gaussian noise with `noise_power` per
/// sample (half in I, half in Q).
pub fn add_awgn<R: Rng + ?Sized>(x: &[Complex64], noise_power: f64, rng: &mut R) -> Result<Vec<Complex64>> {
    if !(noise_power >= 0.0) || !noise_power.is_finite() {
        return Err(Error::InvalidValue(format!("noise power must be finite and >= 0, got {noise_power}")));
    }
    if noise_power == 0.0 {
        return Ok(x.to_vec());
    }
    let sd = (noise_power / 2.0).sqrt();
    Ok(x.iter()
        .map(|&s| {
            s + Complex64::new(
                rng.sample::<f64, _>(StandardNormal) * sd,
                rng.sample::<f64, _>(StandardNormal) * sd,
            )
        })
        .collect())
}

/// Transmit power budget for a perturbation-to-noise ratio.
pub fn pnr_to_pmax(pnr_db: f64, noise_power: f64) -> f64 {
    noise_power * 10f64.powf(pnr_db / 10.0)
}

/// Which end of the link the PNR axis refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PnrConvention {
    /// Adversary transmit power over receiver noise power.
    #[default]
    Transmit,
    /// Same ratio after the deterministic path-loss gain: the transmit budget
    /// is raised by `1 / (K (d0/d)^gamma)^2`.
    Receiver,
}

impl PnrConvention {
    /// Power gain a perturbation is assumed to see before reaching the
    /// receiver, as used to size channel-free reference attacks.
    pub fn reference_gain(self, params: &ChannelParams) -> f64 {
        match self {
            PnrConvention::Transmit => 1.0,
            PnrConvention::Receiver => params.path_loss_factor().powi(2),
        }
    }

    pub fn pmax(self, pnr_db: f64, noise_power: f64, params: &ChannelParams) -> f64 {
        pnr_to_pmax(pnr_db, noise_power) / self.reference_gain(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    type SimRngT = crate::rng::SimRng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn formula_collapses_to_k() {
        let p = ChannelParams {
            d: 1.0,
            ..Default::default()
        };
        let taps = ChannelTaps::from_components(&p, 1.0, &[c(1.0, 0.0)]).unwrap();
        assert!((taps.taps()[0].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn default_path_loss_factor() {
        let p = ChannelParams::default();
        assert!((p.path_loss_factor() - 10f64.powf(-2.7)).abs() < 1e-18);
        assert!((p.path_loss_factor() - 1.995e-3).abs() < 1e-6);
    }

    #[test]
    fn rayleigh_second_moment_is_two() {
        let p = ChannelParams::unit(1.0);
        let mut rng = seeded(1);
        let mut acc = 0.0;
        let n = 1_000_000 / 128 * 128;
        for _ in 0..n / 128 {
            acc += sample_taps(&p, 128, &mut rng).unwrap().taps().iter().map(|h| h.norm_sqr()).sum::<f64>();
        }
        let m = acc / n as f64;
        assert!((m - 2.0).abs() < 0.02, "{m}");
    }

    #[test]
    fn shadowing_is_per_frame_in_db() {
        // Without Rayleigh variation the only randomness is psi, shared by all taps.
        let p = ChannelParams {
            d: 1.0,
            ..Default::default()
        };
        let mut rng = seeded(9);
        let taps = sample_taps(&p, 16, &mut rng).unwrap();
        let mut rng2 = seeded(9);
        let x: f64 = <SimRngT as rand::Rng>::sample::<f64, _>(&mut rng2, StandardNormal) * 8.0;
        let psi = 10f64.powf(x / 20.0);
        let h0 = rayleigh(1.0, &mut rng2);
        assert!((taps.taps()[0] - h0 * psi).norm() < 1e-12);
    }

    #[test]
    fn natural_units_use_exp() {
        let p = ChannelParams {
            shadow_units: ShadowingUnits::Natural,
            shadow_sigma: 0.5,
            ..ChannelParams::unit(1.0)
        };
        let mut a = seeded(3);
        let x: f64 = <SimRngT as rand::Rng>::sample::<f64, _>(&mut a, StandardNormal) * 0.5;
        let mut b = seeded(3);
        assert!((p.draw_shadowing(&mut b) - x.exp()).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = ChannelParams::default();
        let a = sample_taps(&p, 128, &mut seeded(5)).unwrap();
        let b = sample_taps(&p, 128, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn apply_examples() {
        let x: Vec<_> = (0..8).map(|j| c(j as f64, 1.0)).collect();
        assert_eq!(ChannelTaps::identity(8).apply(&x).unwrap(), x);
        let h = ChannelTaps::new(vec![c(0.0, 2.0); 4]).unwrap();
        assert!(h.apply(&[c(1.0, 0.0); 4]).unwrap().iter().all(|&y| y == c(0.0, 2.0)));
        assert!(matches!(h.apply(&x), Err(Error::InputLength(_))));
    }

    #[test]
    fn zero_tap_rejected() {
        assert!(matches!(
            ChannelTaps::new(vec![c(1.0, 0.0), c(0.0, 0.0)]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn awgn_examples() {
        let x = vec![c(1.0, -1.0); 64];
        assert_eq!(add_awgn(&x, 0.0, &mut seeded(0)).unwrap(), x);
        assert!(add_awgn(&x, -1.0, &mut seeded(0)).is_err());

        let zeros = vec![c(0.0, 0.0); 1_000_000];
        let y = add_awgn(&zeros, 0.1, &mut seeded(7)).unwrap();
        let n = y.len() as f64;
        let p = y.iter().map(|s| s.norm_sqr()).sum::<f64>() / n;
        let vi = y.iter().map(|s| s.re * s.re).sum::<f64>() / n;
        let vq = y.iter().map(|s| s.im * s.im).sum::<f64>() / n;
        assert!((p - 0.1).abs() < 0.001, "{p}");
        assert!((vi - 0.05).abs() < 0.001 && (vq - 0.05).abs() < 0.001);
    }

    #[test]
    fn pnr_examples() {
        assert!((pnr_to_pmax(0.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((pnr_to_pmax(10.0, 0.1) - 1.0).abs() < 1e-12);
        assert!(pnr_to_pmax(-400.0, 0.1) < 1e-40);
        let p = ChannelParams::default();
        let rx = PnrConvention::Receiver.pmax(0.0, 1.0, &p);
        assert!((rx * p.path_loss_factor().powi(2) - 1.0).abs() < 1e-12);
        assert_eq!(PnrConvention::Transmit.pmax(0.0, 1.0, &p), 1.0);
    }

    fn cvec(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
        prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b)| c(a, b)), n)
    }

    proptest! {
        #[test]
        fn apply_is_linear(h in cvec(16), x in cvec(16), y in cvec(16), a in (-2.0..2.0f64, -2.0..2.0f64), b in (-2.0..2.0f64, -2.0..2.0f64)) {
            prop_assume!(h.iter().all(|t| t.norm() > 1e-6));
            let taps = ChannelTaps::new(h).unwrap();
            let (a, b) = (c(a.0, a.1), c(b.0, b.1));
            let mix: Vec<_> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = taps.apply(&mix).unwrap();
            let hx = taps.apply(&x).unwrap();
            let hy = taps.apply(&y).unwrap();
            for j in 0..16 {
                let rhs = a * hx[j] + b * hy[j];
                prop_assert!((lhs[j] - rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
            }
        }

        #[test]
        fn energy_sum_and_operator_bound(h in cvec(32), x in cvec(32)) {
            prop_assume!(h.iter().all(|t| t.norm() > 1e-6));
            let taps = ChannelTaps::new(h.clone()).unwrap();
            let y = taps.apply(&x).unwrap();
            let e: f64 = y.iter().map(|s| s.norm_sqr()).sum();
            let direct: f64 = h.iter().zip(&x).map(|(a, b)| a.norm_sqr() * b.norm_sqr()).sum();
            prop_assert!((e - direct).abs() <= 1e-12 * (1.0 + direct));
            let ex: f64 = x.iter().map(|s| s.norm_sqr()).sum();
            prop_assert!(e <= taps.max_gain() * ex * (1.0 + 1e-12));
        }
    }
}
