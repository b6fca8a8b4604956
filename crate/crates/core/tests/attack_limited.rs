mod common;

use proptest::prelude::*;
use rfadvsim::attack_limited::{
    attack_limited_with_channels, first_principal_component, nochannel_perturbations, oriented_component, train_vae,
    uap_pca_input_independent, uap_vae_input_independent, PerturbationBank, VaeConfig,
};
use rfadvsim::attack_wb::{mrpp_targeted, AttackContext, AttackOptions};
use rfadvsim::channel::{sample_taps, ChannelParams};
use rfadvsim::classifier::build_vtcnn2;
use rfadvsim::iqcore::{generate_dataset, to_planar, SynthConfig};
use rfadvsim::rng::seeded;
use rfadvsim::FRAME_LEN;

use common::{cosine, dominant_right_singular};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn power_iteration_matches_jacobi(
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 12), 1..20),
    ) {
        let v = first_principal_component(&PerturbationBank::from_rows(rows.clone()).unwrap()).unwrap();
        let oracle = dominant_right_singular(&rows);
        prop_assert!(cosine(&v, &oracle).abs() >= 1.0 - 1e-8);
        prop_assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oriented_component_agrees_with_rows(
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 6), 1..10),
    ) {
        let bank = PerturbationBank::from_rows(rows.clone()).unwrap();
        let v = oriented_component(&bank).unwrap();
        let along: f64 = rows.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()).sum();
        prop_assert!(along >= 0.0);
    }
}

#[test]
fn ragged_or_empty_banks_are_rejected() {
    assert!(PerturbationBank::from_rows(vec![]).is_err());
    assert!(PerturbationBank::from_rows(vec![vec![1.0, 2.0], vec![1.0]]).is_err());
}

#[test]
fn one_channel_realization_is_mrpp() {
    let model = build_vtcnn2(8, 5).unwrap();
    let ds = generate_dataset(&SynthConfig {
        records: 16,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut rng = seeded(9);
    for r in ds.records().iter().take(4) {
        let taps = sample_taps(&ChannelParams::unit(1.0), FRAME_LEN, &mut rng).unwrap();
        let x = r.frame.samples();
        let opts = AttackOptions::default();
        let lim = attack_limited_with_channels(&model, x, r.label, std::slice::from_ref(&taps), 2.0, &opts).unwrap();
        let m = mrpp_targeted(&AttackContext::new(&model, x, &taps, r.label, 2.0).unwrap()).unwrap();
        for (a, b) in lim.delta.iter().zip(&m.delta) {
            assert!((a - b).norm() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn uap_is_shared_and_on_budget() {
    let model = build_vtcnn2(8, 6).unwrap();
    let ds = generate_dataset(&SynthConfig {
        records: 24,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let taps = sample_taps(&ChannelParams::unit(1.0), FRAME_LEN, &mut seeded(2)).unwrap();
    let opts = AttackOptions::default();
    let u = uap_pca_input_independent(&model, &ds.records()[..12], &taps, 0.5, &opts).unwrap();
    assert!((u.power() - 0.5).abs() <= 1e-9 * 0.5);
    // Row order does not matter to the principal direction.
    let mut rev = ds.records()[..12].to_vec();
    rev.reverse();
    let v = uap_pca_input_independent(&model, &rev, &taps, 0.5, &opts).unwrap();
    let a = to_planar(&u.delta);
    let b = to_planar(&v.delta);
    assert!(cosine(&a, &b) > 1.0 - 1e-8);
}

#[test]
fn vae_reconstruction_improves_and_uap_is_on_budget() {
    let model = build_vtcnn2(8, 7).unwrap();
    let ds = generate_dataset(&SynthConfig {
        records: 96,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let perts = nochannel_perturbations(&model, ds.records(), 1.0, &AttackOptions::default()).unwrap();
    let rows: Vec<Vec<f64>> = perts.iter().map(|p| to_planar(p)).collect();
    let cfg = VaeConfig {
        epochs: 3,
        scale_divisor: 8,
        ..VaeConfig::default()
    };
    let (vae, hist) = train_vae(&rows, &cfg).unwrap();
    assert_eq!(hist.len(), 3);
    assert!(hist[2].recon < hist[0].recon, "{hist:?}");
    let taps = sample_taps(&ChannelParams::unit(1.0), FRAME_LEN, &mut seeded(1)).unwrap();
    let u = uap_vae_input_independent(&vae, &perts[..10], &taps, 0.3).unwrap();
    assert!((u.power() - 0.3).abs() <= 1e-9 * 0.3);
}
