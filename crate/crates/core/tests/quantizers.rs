//! Quantizer and distribution-model checks. Reference constants come from
//! `tests/oracles/stats_oracle.py` (bisection on the numerically integrated
//! normal density, independent of the library's own inverse CDF).

use proptest::prelude::*;
use uniq_core::dist::{normality_stat, DistModel};
use uniq_core::quant::{self, Domain, LloydMaxOptions, QuantizerSpec};
use uniq_core::rng;

const PHI_INV_0125: f64 = 1.150349380376;
const PHI_INV_0375: f64 = 0.318639363964;
const PHI_INV_075: f64 = 0.674489750196;
const PHI_INV_0975: f64 = 1.959963984540;
const CDF_AT_06745: f64 = 0.750003257136;
const SQRT_2_OVER_PI: f64 = 0.797884560803;

fn std_normal() -> DistModel {
    DistModel::gaussian(0.0, 1.0).unwrap()
}

#[test]
fn gaussian_cdf_and_quantile_match_oracle() {
    let d = std_normal();
    assert!((d.cdf(0.6745) - CDF_AT_06745).abs() < 1e-9);
    assert!((d.quantile(0.975).unwrap() - PHI_INV_0975).abs() < 1e-9);
    assert_eq!(d.quantile(0.5).unwrap(), 0.0);
    assert_eq!(
        DistModel::gaussian(3.0, 2.0)
            .unwrap()
            .quantile(0.5)
            .unwrap(),
        3.0
    );
    assert_eq!(d.cdf(100.0), 1.0 - d.clamp());
    assert!(d.quantile(0.0).is_err() && d.quantile(1.0).is_err());
}

#[test]
fn empirical_quantile_of_normal_draws() {
    let mut r = rng::seeded(11);
    let xs = rng::standard_normals(&mut r, 100_000);
    let d = DistModel::fit_empirical(&xs, 1024).unwrap();
    assert!((d.quantile(0.75).unwrap() - PHI_INV_075).abs() < 0.02);
}

#[test]
fn kquantile_examples() {
    let d = std_normal();
    let s2 = quant::build_kquantile(&d, 2).unwrap();
    assert!(s2.thresholds()[0].abs() < 1e-12);
    assert!(
        (s2.levels()[1] - PHI_INV_075).abs() < 1e-9 && (s2.levels()[0] + PHI_INV_075).abs() < 1e-9
    );
    let s4 = quant::build_kquantile(&d, 4).unwrap();
    let want_t = [-PHI_INV_075, 0.0, PHI_INV_075];
    let want_q = [-PHI_INV_0125, -PHI_INV_0375, PHI_INV_0375, PHI_INV_0125];
    for (a, b) in s4
        .thresholds()
        .iter()
        .zip(want_t)
        .chain(s4.levels().iter().zip(want_q))
    {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    assert!((s2.apply(-0.3).unwrap() + PHI_INV_075).abs() < 1e-9);
}

#[test]
fn kquantile_of_uniform_samples_is_the_uniform_quantizer() {
    let xs: Vec<f64> = (0..=100_000).map(|i| i as f64 / 100_000.0).collect();
    let d = DistModel::fit_empirical(&xs, 1024).unwrap();
    let s = quant::build_kquantile(&d, 4).unwrap();
    for (a, b) in s.thresholds().iter().zip([0.25, 0.5, 0.75]) {
        assert!((a - b).abs() < 1e-3);
    }
    for (a, b) in s.levels().iter().zip([0.125, 0.375, 0.625, 0.875]) {
        assert!((a - b).abs() < 1e-3);
    }
    // 0.31 sits in the third of eight bins, centred at 5/16.
    assert!((quant::quantize_via_uniformization(&d, 8, 0.31).unwrap() - 0.3125).abs() < 1e-3);
}

#[test]
fn uniformization_examples() {
    let d = std_normal();
    assert!((quant::quantize_via_uniformization(&d, 2, 1.7).unwrap() - PHI_INV_075).abs() < 1e-9);
    // Zero is a threshold of the k=4 quantizer and goes to the higher bin.
    assert!((quant::quantize_via_uniformization(&d, 4, 0.0).unwrap() - PHI_INV_0375).abs() < 1e-9);
}

#[test]
fn uniform_quantizer_mse_on_uniform_samples() {
    let mut r = rng::seeded(3);
    let xs: Vec<f64> = (0..1_000_000)
        .map(|_| -3.0 + 6.0 * rand::Rng::random::<f64>(&mut r))
        .collect();
    let s = quant::build_uniform(1.0, 3.0, 8).unwrap();
    let m = quant::mse(&s, &xs).unwrap();
    let want = 0.75f64.powi(2) / 12.0;
    assert!((m - want).abs() < 0.05 * want, "{m}");
}

#[test]
fn lloyd_max_examples() {
    let mut r = rng::seeded(5);
    let xs = rng::standard_normals(&mut r, 1_000_000);
    let fit = quant::lloyd_max(&xs, 2, LloydMaxOptions::default()).unwrap();
    assert!((fit.spec.levels()[1] - SQRT_2_OVER_PI).abs() < 0.01);
    assert!((fit.spec.levels()[0] + SQRT_2_OVER_PI).abs() < 0.01);
    assert!(fit.spec.thresholds()[0].abs() < 0.01);
    assert!(fit.mse_history.windows(2).all(|w| w[1] <= w[0]));

    let s = quant::build_kmeans(&[0.0, 0.0, 10.0, 10.0], 2, 200, 1e-9).unwrap();
    assert_eq!((s.levels(), s.thresholds()), (&[0.0, 10.0][..], &[5.0][..]));
    assert_eq!(quant::mse(&s, &[0.0, 0.0, 10.0, 10.0]).unwrap(), 0.0);
}

#[test]
fn lloyd_max_beats_kquantile_at_k4() {
    let mut r = rng::seeded(6);
    let xs = rng::standard_normals(&mut r, 100_000);
    let km = quant::lloyd_max(&xs, 4, LloydMaxOptions::default())
        .unwrap()
        .spec;
    let kq = quant::build_kquantile(&DistModel::fit_gaussian(&xs).unwrap(), 4).unwrap();
    assert!(quant::mse(&km, &xs).unwrap() < quant::mse(&kq, &xs).unwrap());
    let mid: Vec<f64> = km
        .levels()
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]))
        .collect();
    assert_eq!(km.thresholds(), &mid[..]);
}

#[test]
fn equiprobable_bins() {
    let mut r = rng::seeded(8);
    let xs = rng::standard_normals(&mut r, 1_000_000);
    let d = DistModel::fit_gaussian(&xs).unwrap();
    for k in [2, 4, 16, 256] {
        let s = quant::build_kquantile(&d, k).unwrap();
        let mut counts = vec![0usize; k];
        for &x in &xs {
            counts[s.index_of(x)] += 1;
        }
        let n = xs.len() as f64;
        let p = 1.0 / k as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() < 4.0 * sd, "k={k}: {c}");
        }
    }
}

#[test]
fn uniformization_equivalence_on_many_points() {
    let mut r = rng::seeded(9);
    for (mu, sigma) in [(0.0, 1.0), (0.3, 0.05)] {
        let d = DistModel::gaussian(mu, sigma).unwrap();
        for k in [2, 5, 16] {
            let s = quant::build_kquantile(&d, k).unwrap();
            let xs = rng::standard_normals(&mut r, 20_000);
            for x in xs
                .iter()
                .map(|z| mu + 1.5 * sigma * z)
                .chain(s.thresholds().iter().copied())
            {
                assert_eq!(
                    s.apply(x).unwrap(),
                    quant::quantize_via_uniformization(&d, k, x).unwrap(),
                    "x={x}"
                );
            }
        }
    }
}

#[test]
fn normality_matches_reference_implementation() {
    // Expected normal order statistics for n = 50.
    let m = [
        -2.249073629390,
        -1.854872013858,
        -1.628634208474,
        -1.463736269537,
        -1.331090470885,
        -1.218454921003,
        -1.119477057456,
        -1.030416020365,
        -0.948872243268,
        -0.873207871551,
        -0.802250572824,
        -0.735128890496,
        -0.671174559521,
        -0.609861448430,
        -0.550765721630,
        -0.493538889353,
        -0.437888997207,
        -0.383567127987,
        -0.330357467055,
        -0.278069812999,
        -0.226533796449,
        -0.175594307164,
        -0.125107780587,
        -0.074939093020,
        -0.024958878453,
    ];
    let full: Vec<f64> = m
        .iter()
        .copied()
        .chain(m.iter().rev().map(|v| -v))
        .collect();
    let w = normality_stat(&full).unwrap();
    assert!(w >= 0.99 && (w - 0.998489691353).abs() < 2e-4, "{w}");

    let sets: [(Vec<f64>, f64); 4] = [
        ((1..=20).map(|i| (i * i) as f64).collect(), 0.906130628605),
        ((0..11).map(|i| i as f64).collect(), 0.968391280463),
        (
            vec![2.1, -0.3, 1.7, 0.4, 5.9, -1.2, 0.0, 0.8, 3.3],
            0.926344865138,
        ),
        (
            (0..30).map(|i| (i as f64 / 10.0).exp()).collect(),
            0.868202701120,
        ),
    ];
    for (xs, want) in sets {
        let w = normality_stat(&xs).unwrap();
        assert!((w - want).abs() < 2e-3, "{w} vs {want}");
    }
    assert!(normality_stat(&[1.0, 1.0, 1.0]).is_err());
}

#[test]
fn outliers_lower_normality() {
    let mut r = rng::seeded(12);
    let clean = rng::standard_normals(&mut r, 500);
    let mut dirty = clean.clone();
    dirty.extend([9.0, -9.0, 12.0, -11.0]);
    assert!(normality_stat(&dirty).unwrap() < normality_stat(&clean).unwrap());
}

fn spec_strategy() -> impl Strategy<Value = QuantizerSpec> {
    (2usize..40, -5.0f64..5.0, 0.01f64..3.0, any::<bool>()).prop_map(|(k, mu, sigma, uniform)| {
        if uniform {
            quant::build_uniform(sigma, 3.0, k).unwrap()
        } else {
            quant::build_kquantile(&DistModel::gaussian(mu, sigma).unwrap(), k).unwrap()
        }
    })
}

proptest! {
    #[test]
    fn apply_is_monotone_and_idempotent(spec in spec_strategy(), a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(spec.apply(lo).unwrap() <= spec.apply(hi).unwrap());
        let q = spec.apply(a).unwrap();
        prop_assert_eq!(spec.apply(q).unwrap(), q);
        for &l in spec.levels() {
            prop_assert_eq!(spec.apply(l).unwrap(), l);
        }
    }

    #[test]
    fn gaussian_round_trip(mu in -10.0f64..10.0, sigma in 0.001f64..100.0, p in 0.001f64..0.999) {
        let d = DistModel::gaussian(mu, sigma).unwrap();
        let x = d.quantile(p).unwrap();
        prop_assert!((d.quantile(d.cdf(x)).unwrap() - x).abs() <= 1e-9 * x.abs().max(1.0));
    }

    #[test]
    fn cdf_and_quantile_are_monotone(mu in -3.0f64..3.0, sigma in 0.01f64..5.0, a in -50.0f64..50.0, b in -50.0f64..50.0, p in 0.0001f64..0.9999, q in 0.0001f64..0.9999) {
        let d = DistModel::gaussian(mu, sigma).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(d.cdf(lo) <= d.cdf(hi));
        let (plo, phi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(d.quantile(plo).unwrap() <= d.quantile(phi).unwrap());
    }

    #[test]
    fn empirical_cdf_is_monotone(seed in 0u64..1000, a in -4.0f64..4.0, b in -4.0f64..4.0) {
        let xs = rng::standard_normals(&mut rng::seeded(seed), 2000);
        let d = DistModel::fit_empirical(&xs, 256).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(d.cdf(lo) <= d.cdf(hi));
    }

    #[test]
    fn spec_bytes_round_trip(spec in spec_strategy()) {
        let mut buf = Vec::new();
        spec.write_to(&mut buf);
        let mut view = &buf[..];
        prop_assert_eq!(QuantizerSpec::read_from(&mut view, Domain::Weight).unwrap(), spec);
        prop_assert!(view.is_empty());
    }
}
