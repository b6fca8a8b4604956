use proptest::prelude::*;
use rfadvsim::channel::{add_awgn, pnr_to_pmax, sample_taps, ChannelParams, ChannelTaps, PnrConvention};
use rfadvsim::rng::seeded;
use rfadvsim::Complex64;

fn cvec(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b)| Complex64::new(a, b)), n)
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

proptest! {
    #[test]
    fn conjugate_taps_are_the_adjoint(h in cvec(12), a in cvec(12), b in cvec(12)) {
        prop_assume!(h.iter().all(|v| v.norm() > 1e-6));
        let taps = ChannelTaps::new(h).unwrap();
        let lhs = inner(&taps.apply(&a).unwrap(), &b);
        let rhs = inner(&a, &taps.apply_conj(&b).unwrap());
        prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + lhs.norm()));
    }

    #[test]
    fn receiver_budget_undoes_path_loss(pnr in -20.0..20.0f64, d in 2.0..50.0f64) {
        let params = ChannelParams { d, ..ChannelParams::default() };
        let noise = 1.7;
        let tx = PnrConvention::Transmit.pmax(pnr, noise, &params);
        let rx = PnrConvention::Receiver.pmax(pnr, noise, &params);
        prop_assert!((tx - pnr_to_pmax(pnr, noise)).abs() <= 1e-12 * tx);
        prop_assert!((rx * params.path_loss_factor().powi(2) - tx).abs() <= 1e-9 * tx);
    }
}

#[test]
fn default_path_loss() {
    let pl = ChannelParams::default().path_loss_factor();
    assert!((pl - 10f64.powf(-2.7)).abs() < 1e-15);
}

#[test]
fn rayleigh_taps_have_expected_power() {
    let params = ChannelParams {
        shadow_sigma: 0.0,
        ..ChannelParams::unit(1.5)
    };
    let mut rng = seeded(4);
    let mut sum = 0.0;
    let mut n = 0.0;
    for _ in 0..400 {
        let t = sample_taps(&params, 128, &mut rng).unwrap();
        sum += t.taps().iter().map(|h| h.norm_sqr()).sum::<f64>();
        n += 128.0;
    }
    // Each quadrature is N(0, scale^2).
    let expect = 2.0 * 1.5 * 1.5;
    assert!((sum / n / expect - 1.0).abs() < 0.02, "{}", sum / n);
}

#[test]
fn awgn_power_matches() {
    let mut rng = seeded(8);
    let x = vec![Complex64::new(0.0, 0.0); 200_000];
    let y = add_awgn(&x, 0.3, &mut rng).unwrap();
    let p = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / y.len() as f64;
    let pi = y.iter().map(|v| v.re * v.re).sum::<f64>() / y.len() as f64;
    assert!((p / 0.3 - 1.0).abs() < 0.01);
    assert!((pi / 0.15 - 1.0).abs() < 0.02);
    assert!(add_awgn(&x[..3], -1.0, &mut rng).is_err());
}
