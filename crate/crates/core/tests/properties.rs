use std::f64::consts::PI;
use std::rc::Rc;

use proptest::prelude::*;

use frs_core::autodiff::Tensor;
use frs_core::bank::{BankPlan, GroupSpec, LiftingBank};
use frs_core::basis::{make_enhanced_basis, make_fourier_basis, round_trip_error, Kernel};
use frs_core::data::{apply_affine, disc_fov, extract_patches, stitch_patches, Affine, PatchSpec, Sample};
use frs_core::equivariance::{transform_feature, warp_image, Boundary, Interpolation, WarpSpec};
use frs_core::metrics::{auc_of, confusion};
use frs_core::nn::GroupFeatureMap;

fn brute_auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| !p.1).map(|p| p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for &p in &pos {
        for &n in &neg {
            s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Some(s / (pos.len() * neg.len()) as f64)
}

fn scored() -> impl Strategy<Value = Vec<(f64, bool)>> {
    // coarse scores so that ties occur
    prop::collection::vec(((0u8..20).prop_map(|v| v as f64 / 19.0), any::<bool>()), 2..60)
}

fn tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_matches_pairwise_count(pairs in scored()) {
        match (auc_of(pairs.clone()), brute_auc(&pairs)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_rescoring(pairs in scored()) {
        let moved: Vec<(f64, bool)> = pairs.iter().map(|&(s, y)| ((3.0 * s).exp() - 7.0, y)).collect();
        match (auc_of(pairs), auc_of(moved)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn f1_equals_dice(
        px in prop::collection::vec((0.0f64..1.0, any::<bool>(), any::<bool>()), 1..80),
    ) {
        let prob: Vec<f64> = px.iter().map(|p| p.0).collect();
        let label: Vec<f64> = px.iter().map(|p| p.1 as u8 as f64).collect();
        let fov: Vec<f64> = px.iter().map(|p| p.2 as u8 as f64).collect();
        prop_assume!(fov.iter().any(|&f| f > 0.5));
        let c = confusion(&tensor(&prob), &tensor(&label), &tensor(&fov), 0.5).unwrap();
        let (mut inter, mut pred, mut truth) = (0.0, 0.0, 0.0);
        for i in 0..px.len() {
            if fov[i] < 0.5 {
                continue;
            }
            let p = (prob[i] >= 0.5) as u8 as f64;
            inter += p * label[i];
            pred += p;
            truth += label[i];
        }
        let dice = if pred + truth == 0.0 { 0.0 } else { 2.0 * inter / (pred + truth) };
        prop_assert!((c.f1() - dice).abs() < 1e-12);
    }

    #[test]
    fn pixels_outside_the_fov_are_ignored(
        px in prop::collection::vec((0.0f64..1.0, any::<bool>(), any::<bool>(), 0.0f64..1.0, any::<bool>()), 1..80),
    ) {
        let fov: Vec<f64> = px.iter().map(|p| p.2 as u8 as f64).collect();
        prop_assume!(fov.iter().any(|&f| f > 0.5));
        let prob: Vec<f64> = px.iter().map(|p| p.0).collect();
        let label: Vec<f64> = px.iter().map(|p| p.1 as u8 as f64).collect();
        // scramble everything outside the field of view
        let prob2: Vec<f64> = px.iter().map(|p| if p.2 { p.0 } else { p.3 }).collect();
        let label2: Vec<f64> = px.iter().map(|p| if p.2 { p.1 as u8 as f64 } else { p.4 as u8 as f64 }).collect();
        let a = confusion(&tensor(&prob), &tensor(&label), &tensor(&fov), 0.5).unwrap();
        let b = confusion(&tensor(&prob2), &tensor(&label2), &tensor(&fov), 0.5).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn stitching_extracted_patches_restores_the_image(
        h in 8usize..40, w in 8usize..40, size in 4usize..16, frac in 0.25f64..1.0, seed in any::<u64>(),
    ) {
        let stride = ((size as f64 * frac) as usize).max(1);
        let t = Tensor::from_fn(&[2, h, w], |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 1000.0);
        let p = PatchSpec { size, stride, batch: 1 };
        let patches = extract_patches(&t, &p).unwrap();
        let back = stitch_patches(&patches, h, w).unwrap();
        prop_assert!(back.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn quarter_turns_are_lossless(n in 1usize..12, seed in any::<u64>(), k in 0usize..4) {
        let x = Tensor::from_fn(&[n, n], |i| ((i as u64 + 1).wrapping_mul(seed | 1) % 997) as f64);
        let w = WarpSpec::rotation(k as f64 * PI / 2.0, Interpolation::Exact90);
        let once = warp_image(&x, &w).unwrap();
        let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        prop_assert_eq!(norm(&once), norm(&x));
        let back = warp_image(&once, &WarpSpec::rotation((4 - k) as f64 * PI / 2.0, Interpolation::Exact90)).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn quarter_turn_augmentation_keeps_label_mass(turns in 0usize..4, seed in any::<u64>()) {
        let n = 16;
        let image = Tensor::from_fn(&[3, n, n], |i| ((i as u64).wrapping_mul(seed | 1) % 100) as f64 / 100.0);
        let label = Tensor::from_fn(&[1, n, n], |i| ((i as u64 ^ seed) % 3 == 0) as u8 as f64);
        let s = Sample::new(image, label, disc_fov(n, n)).unwrap();
        let t = Affine { rotation: turns as f64 * PI / 2.0, ..Affine::identity() };
        let out = apply_affine(&s, &t, Boundary::Zero).unwrap();
        let mass = |t: &Tensor| t.data().iter().sum::<f64>();
        prop_assert_eq!(mass(&out.label), mass(&s.label));
        prop_assert_eq!(mass(&out.fov), mass(&s.fov));
    }

    #[test]
    fn full_group_cycle_is_the_identity(seed in any::<u64>(), n_rot in 1usize..9, n_scale in 1usize..4) {
        let t = Tensor::from_fn(&[1, n_scale, 2, n_rot, 4, 4], |i| ((i as u64).wrapping_mul(seed | 1) % 101) as f64);
        let f = GroupFeatureMap::new(t).unwrap();
        let w = WarpSpec { theta_hat: 2.0 * PI, s_hat: 0, mu: 1.0, interpolation: Interpolation::Bilinear, boundary: Boundary::Zero };
        let g = transform_feature(&f, &w).unwrap();
        prop_assert!(g.tensor.max_abs_diff(&f.tensor) < 1e-9);
    }

    #[test]
    fn kernels_round_trip_through_the_basis(values in prop::collection::vec(-1.0f64..1.0, 36)) {
        let b = make_fourier_basis(6, 0.5).unwrap();
        let k = Kernel::from_vec(6, values).unwrap();
        prop_assert!(round_trip_error(&k, &b).unwrap() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn bank_expansion_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 2 * 16),
        b in prop::collection::vec(-1.0f64..1.0, 2 * 16),
        alpha in -2.0f64..2.0,
    ) {
        let g = GroupSpec::new(4, 2, 1.25, 4, 0.5).unwrap();
        let plan = Rc::new(BankPlan::new(g, make_enhanced_basis(4, 0.5).unwrap()).unwrap());
        let mk = |v: Vec<f64>| LiftingBank::new(plan.clone(), 1, 2, Tensor::new(vec![1, 2, 16], v).unwrap()).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
        let (ka, kb, km) = (mk(a), mk(b), mk(mix));
        for s in 0..2 {
            let (ea, eb, em) = (ka.expanded(s), kb.expanded(s), km.expanded(s));
            for i in 0..em.len() {
                prop_assert!((em.data()[i] - (alpha * ea.data()[i] + eb.data()[i])).abs() < 1e-12);
            }
        }
    }
}
