use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use semedit_core::directions::{random_direction_set, DirectionSet};
use semedit_core::generator::{GeneratorConfig, ToyGenerator};
use semedit_core::image::Image;
use semedit_core::metrics::*;
use semedit_core::rng::{rng_for, standard_normal_vec};
use semedit_core::scene::{ClassMask, EditVector, LabelMap};
use semedit_core::Error;

mod oracles;
use oracles::{paste_outside, textured, Bench};

fn backends() -> Vec<Distance> {
    vec![Distance::seeded(), Distance::msssim()]
}

#[test]
fn all_ones_mask_matches_maskless() {
    let (a, b) = (textured(32, 32, 1), textured(32, 32, 2));
    let ones = ClassMask::all_ones(32, 32, 0);
    for d in backends() {
        let plain = masked_distance(&d, &a, &b, None).unwrap();
        let masked = masked_distance(&d, &a, &b, Some(&ones)).unwrap();
        assert!(plain > 0.0);
        assert!((plain - masked).abs() < 1e-6, "{d:?}: {plain} vs {masked}");
    }
}

#[test]
fn outside_only_differences_vanish_under_the_mask() {
    let a = textured(32, 32, 3);
    let b = textured(32, 32, 4);
    let kept = ClassMask::from_fn(32, 32, 1, |r, c| (4..28).contains(&r) && (4..28).contains(&c));
    let pasted = paste_outside(&a, &b, &kept);
    let seeded = Distance::seeded();
    assert!(masked_distance(&seeded, &a, &pasted, None).unwrap() > 0.0);
    assert!(masked_distance(&seeded, &a, &pasted, Some(&kept.complement())).unwrap() > 0.0);
    // the deepest layer sees 7 input pixels past its 4x4 cell, so a mask
    // that far inside the unchanged square reads identical features
    let core = ClassMask::from_fn(32, 32, 1, |r, c| (14..18).contains(&r) && (14..18).contains(&c));
    assert_eq!(masked_distance(&seeded, &a, &pasted, Some(&core)).unwrap(), 0.0);
}

#[test]
fn pixelwise_backend_shows_exact_zero_outside_differences() {
    // a 1x1-conv plug-in backbone has no spatial mixing, so pasted pixels
    // never leak into the masked region
    struct Pointwise;
    impl FeatureExtractor for Pointwise {
        fn id(&self) -> String {
            "pointwise".into()
        }
        fn features(&self, image: &Image) -> semedit_core::Result<Vec<FeatureLayer>> {
            let (h, w) = (image.height(), image.width());
            let mut values = image.data().to_vec();
            values.extend(image.data().iter().map(|v| v * v + 0.1));
            Ok(vec![FeatureLayer { channels: 6, height: h, width: w, values }])
        }
    }
    let d = Distance::Features(std::sync::Arc::new(Pointwise));
    let a = textured(16, 16, 5);
    let b = textured(16, 16, 6);
    let mask = ClassMask::from_fn(16, 16, 0, |_, c| c < 7);
    let pasted = paste_outside(&a, &b, &mask);
    assert_eq!(masked_distance(&d, &a, &pasted, Some(&mask)).unwrap(), 0.0);
    assert!(masked_distance(&d, &a, &pasted, None).unwrap() > 0.0);
    assert!(masked_distance(&d, &a, &pasted, Some(&mask.complement())).unwrap() > 0.0);
}

#[test]
fn msssim_grows_with_noise() {
    let a = textured(32, 32, 7);
    let noise = textured(32, 32, 8);
    let blend = |t: f64| {
        Image::new(32, 32, a.data().iter().zip(noise.data()).map(|(x, n)| (1.0 - t) * x + t * n).collect()).unwrap()
    };
    let d = Distance::msssim();
    let mut last = 0.0;
    for t in [0.05, 0.2, 0.5, 1.0] {
        let v = masked_distance(&d, &a, &blend(t), None).unwrap();
        assert!(v > last, "t={t}: {v} <= {last}");
        last = v;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn distance_is_symmetric_and_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000, cut in 1usize..15) {
        let (a, b) = (textured(16, 16, s1), textured(16, 16, s2));
        let m = ClassMask::from_fn(16, 16, 0, |r, _| r < cut);
        for d in backends() {
            let ab = masked_distance(&d, &a, &b, Some(&m)).unwrap();
            let ba = masked_distance(&d, &b, &a, Some(&m)).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert_eq!(masked_distance(&d, &a, &a, Some(&m)).unwrap(), 0.0);
        }
    }
}

fn tiny_generator() -> ToyGenerator {
    ToyGenerator::init(
        GeneratorConfig { class_count: 3, latent_channels: 4, blocks: 2, width: 8, hidden: 8, image_size: 16 },
        11,
    )
    .unwrap()
}

fn maps() -> Vec<LabelMap> {
    vec![
        LabelMap::from_fn(16, 16, 3, |r, c| if r < 8 { 0 } else if c < 8 { 1 } else { 2 }).unwrap(),
        LabelMap::from_fn(16, 16, 3, |_, c| (c / 6).min(2) as u16).unwrap(),
        LabelMap::from_fn(16, 16, 3, |r, c| if (4..12).contains(&r) && (4..12).contains(&c) { 1 } else { 0 }).unwrap(),
    ]
}

fn sets(k: usize, d: usize) -> Vec<DirectionSet> {
    (0..3).map(|c| random_direction_set(c, k, d, 100 + c as u64).unwrap()).collect()
}

fn protocol() -> EvalProtocol {
    EvalProtocol { latent_codes: 2, global_edits: 3, alpha_bound: 2.0, classes: None, seed: 21 }
}

#[test]
fn pipeline_matches_brute_force() {
    let gen = tiny_generator();
    let p = protocol();
    let s = sets(3, 4);
    let layouts = maps();
    let bench = Bench { gen: &gen, maps: &layouts, sets: &s, protocol: &p };
    for d in backends() {
        let local = local_scores(&gen, &s, &maps(), &p, &d).unwrap();
        for (which, got) in [(0, local.mcd_l), (1, local.mod_score), (2, local.mcc_l)] {
            let (pm, lit) = bench.local(which, &d);
            assert!((got.pair_mean - pm).abs() < 1e-9, "{d:?} local {which}: {} vs {pm}", got.pair_mean);
            assert!((got.literal - lit).abs() < 1e-9, "{d:?} local {which} literal: {} vs {lit}", got.literal);
        }
        // the literal prefactor is (K-1) times the pair mean for direction pairs
        assert!((local.mcd_l.literal - 2.0 * local.mcd_l.pair_mean).abs() < 1e-12);
        assert!((local.mcc_l.literal - local.mcc_l.pair_mean).abs() < 1e-12);
        let global = global_scores(&gen, &s, &maps(), &p, &d).unwrap();
        let (cd, cc) = bench.global(&d);
        assert!((global.mcd.pair_mean - cd).abs() < 1e-9);
        assert!((global.mcc.pair_mean - cc).abs() < 1e-9);
        assert_eq!(global.mcd.literal, global.mcd.pair_mean);
    }
}

#[test]
fn copies_of_one_direction_have_no_diversity() {
    let gen = tiny_generator();
    let v = EditVector::unit(vec![0.5, -0.5, 0.5, 0.5]).unwrap();
    let copies: Vec<DirectionSet> = (0..3)
        .map(|c| {
            let mut s = random_direction_set(c, 3, 4, 1).unwrap();
            s.directions = vec![v.clone(); 3];
            s
        })
        .collect();
    let l = local_scores(&gen, &copies, &maps(), &protocol(), &Distance::seeded()).unwrap();
    assert_eq!(l.mcd_l.pair_mean, 0.0);
    assert_eq!(l.mod_score.pair_mean, 0.0);
    assert!(l.mcc_l.pair_mean > 0.0);
}

#[test]
fn protocol_preconditions() {
    let gen = tiny_generator();
    let mut p = protocol();
    p.global_edits = 1;
    assert!(matches!(global_scores(&gen, &sets(3, 4), &maps(), &p, &Distance::seeded()), Err(Error::Protocol(_))));
    let mut p = protocol();
    p.latent_codes = 1;
    assert!(matches!(local_scores(&gen, &sets(3, 4), &maps(), &p, &Distance::seeded()), Err(Error::Protocol(_))));
    let single: Vec<DirectionSet> = (0..3).map(|c| random_direction_set(c, 1, 4, 2).unwrap()).collect();
    assert!(matches!(local_scores(&gen, &single, &maps(), &protocol(), &Distance::seeded()), Err(Error::Protocol(_))));
    // a class present in no map is excluded, not an error
    let mut p = protocol();
    p.classes = Some(vec![2]);
    let only_first = vec![maps()[0].clone()];
    assert!(local_scores(&gen, &sets(3, 4), &only_first, &p, &Distance::seeded()).is_ok());
}

#[test]
fn scores_are_deterministic() {
    let gen = tiny_generator();
    let run = || {
        let rows = evaluate_directions(&gen, &sets(3, 4), &maps(), &protocol(), &Distance::seeded(), &Metric::ALL).unwrap();
        serde_json::to_string(&rows).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn fid_identical_sets_is_zero() {
    let imgs: Vec<Image> = (0..12).map(|s| textured(16, 16, s)).collect();
    let b = SeededFeatureBackbone::default();
    assert!(fid_lite(&imgs, &imgs, &b).unwrap() < 1e-6);
    let black = vec![Image::filled(16, 16, [-1.0; 3]); 4];
    let white = vec![Image::filled(16, 16, [1.0; 3]); 4];
    assert!(fid_lite(&black, &white, &b).unwrap() > fid_lite(&black, &black, &b).unwrap());
    assert!(matches!(fid_lite(&imgs[..1], &imgs, &b), Err(Error::Protocol(_))));
}

#[test]
fn frechet_matches_closed_form_for_gaussians() {
    // diagonal covariances commute, so the distance is
    // ‖μ₁−μ₂‖² + Σᵢ (σ₁ᵢ − σ₂ᵢ)²
    let mu1: [f64; 4] = [0.0, 1.0, -0.5, 2.0];
    let mu2 = [0.5, 0.0, -0.5, 1.0];
    let sd1: [f64; 4] = [1.0, 2.0, 0.5, 1.5];
    let sd2 = [2.0, 1.0, 1.0, 0.5];
    let draw = |mu: &[f64; 4], sd: &[f64; 4], seed: u64| -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, &[]);
        (0..5000).map(|_| standard_normal_vec(&mut rng, 4).iter().enumerate().map(|(i, e)| mu[i] + sd[i] * e).collect()).collect()
    };
    let expected: f64 = (0..4).map(|i| (mu1[i] - mu2[i]).powi(2) + (sd1[i] - sd2[i]).powi(2)).sum();
    let got = frechet_from_samples(&draw(&mu1, &sd1, 1), &draw(&mu2, &sd2, 2)).unwrap();
    assert!((got - expected).abs() / expected < 0.05, "{got} vs {expected}");
    // exact parameters through the general formula, with a non-diagonal pair
    let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let m = DVector::from_vec(vec![0.0, 0.0]);
    assert!(frechet_distance(&m, &c, &m, &c).abs() < 1e-9);
}

#[test]
fn report_serializes_both_forms() {
    let gen = tiny_generator();
    let scores = evaluate_directions(&gen, &sets(3, 4), &maps(), &protocol(), &Distance::msssim(), &[Metric::Mod]).unwrap();
    assert_eq!(scores.len(), 1);
    let report = MetricReport {
        distance: Distance::msssim().id(),
        protocol: protocol(),
        label_maps: 3,
        metrics: vec![Metric::Mod],
        rows: vec![MethodRow { method: "random".into(), scores }],
        provenance: Default::default(),
    };
    let text = report.to_text();
    let header = text.lines().nth(2).unwrap();
    assert!(header.contains("mOD (MS-SSIM)"), "{text}");
    assert!(!header.contains("mCD"));
    assert_eq!(MetricReport::from_json(&report.to_json().unwrap()).unwrap(), report);
}
