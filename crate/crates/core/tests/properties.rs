use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chiral_det::data::{
    atom_features, axial_toy, biaryl, gen_axial_torsion, gen_rs, parse_chimol, write_chimol, SyntheticSpec, LABEL_R,
    TOY_ELEMENTS,
};
use chiral_det::encoder::{regularization_loss, retract_orthonormal, KernelBank};
use chiral_det::model::{cosine_lr, cross_entropy, margin_rank};
use chiral_det::numerics::{det3, gram_sqrt_det, norm3, qr_thin, random_matrix, sub3};

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn generated_sets_are_balanced_and_round_trip(seed in 0u64..10_000, half in 1usize..6) {
        let data = gen_rs(&SyntheticSpec { count: 2 * half, seed, ..SyntheticSpec::default() }).unwrap();
        prop_assert_eq!(data.iter().filter(|s| s.label == LABEL_R).count(), half);
        for s in &data {
            prop_assert!(s.mol.chirality_products()[0].abs() >= 0.5);
            let back = parse_chimol(&write_chimol(&s.mol), "x").unwrap();
            prop_assert_eq!(&back, &s.mol);
        }
    }

    #[test]
    fn sweep_keeps_blade_rigid(step_idx in 0usize..8, theta in 0.05f64..3.0) {
        let step = [10.0, 15.0, 20.0, 30.0, 45.0, 60.0, 90.0, 120.0][step_idx];
        let base = biaryl("b", theta, TOY_ELEMENTS).with_blade(vec![1, 4, 5, 7]).unwrap();
        let blade = base.blade().unwrap().to_vec();
        let conformers = gen_axial_torsion(&base, step).unwrap();
        prop_assert_eq!(conformers.len(), (360.0 / step) as usize);
        prop_assert_eq!(&conformers[0], &base);
        for c in &conformers {
            for &i in &blade {
                for &j in &blade {
                    let d0 = norm3(sub3(base.coords()[i], base.coords()[j]));
                    let d1 = norm3(sub3(c.coords()[i], c.coords()[j]));
                    prop_assert!((d0 - d1).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn determinant_identity_holds(seed in 0u64..100_000, d_p in 3usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, d_p, 3);
        let m = random_matrix(&mut rng, 3, 3);
        prop_assume!(det3(&m).abs() > 1e-3);
        let g = gram_sqrt_det(&w).unwrap();
        prop_assume!(g > 1e-6);
        let det_r = qr_thin(&w.matmul(&m)).unwrap().det_r().abs();
        let expected = det3(&m).abs() * g;
        prop_assert!((det_r - expected).abs() <= 1e-8 * expected);
    }

    #[test]
    fn retraction_is_orthonormal_and_zeroes_penalty(seed in 0u64..100_000, k in 1usize..5, d_p in 4usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = KernelBank::random(&mut rng, k, d_p).unwrap();
        for w in &mut bank.w {
            *w = random_matrix(&mut rng, d_p, 3);
        }
        let r = retract_orthonormal(&bank).unwrap();
        prop_assert!(r.orthonormality_error() < 1e-10);
        prop_assert!(regularization_loss(&r) < 1e-20);
        // same column spans: Q·Qᵀ·W = W
        for (w, q) in bank.w.iter().zip(&r.w) {
            let proj = q.matmul(&q.t_matmul(w));
            prop_assert!(proj.max_abs_diff(w) < 1e-9 * (1.0 + w.frobenius_norm()));
        }
    }

    #[test]
    fn schedule_stays_between_floor_and_peak(lr in 1e-5f64..1.0, f in 0.0f64..1.0, total in 1usize..500, step in 0usize..500) {
        let step = step.min(total);
        let v = cosine_lr(lr, f, step, total);
        prop_assert!(v <= lr * (1.0 + 1e-12) && v >= f * lr * (1.0 - 1e-12));
        if step < total {
            prop_assert!(cosine_lr(lr, f, step + 1, total) <= v);
        }
    }

    #[test]
    fn losses_are_nonnegative_with_consistent_gradients(
        logits in proptest::collection::vec(-30.0f64..30.0, 2..6),
        hi in -5.0f64..5.0,
        lo in -5.0f64..5.0,
        margin in 0.0f64..2.0,
    ) {
        let (loss, grad) = cross_entropy(&logits, 0);
        prop_assert!(loss >= 0.0);
        prop_assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        let (l, d_hi, d_lo) = margin_rank(hi, lo, margin);
        prop_assert!(l >= 0.0);
        prop_assert!((l - (margin - (hi - lo)).max(0.0)).abs() < 1e-15);
        prop_assert_eq!(d_hi, -d_lo);
    }

    #[test]
    fn features_have_one_hot_per_block(z in 1u8..87) {
        let f = atom_features(z);
        let mut at = 0;
        for width in [32, 6, 5, 5, 4] {
            prop_assert_eq!(f[at..at + width].iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(f[at..at + width].iter().filter(|&&v| v == 0.0).count(), width - 1);
            at += width;
        }
        prop_assert_eq!(at, f.len());
    }
}

#[test]
fn toy_sweep_matches_closed_form_products() {
    let conformers = gen_axial_torsion(&axial_toy(), 20.0).unwrap();
    for (k, c) in conformers.iter().enumerate() {
        let theta = (10.0 + 20.0 * k as f64).to_radians();
        let p = c.chirality_products()[0];
        let expected = -2.0 * 1.2 * 1.445 * 2.4 * theta.sin();
        assert!((p - expected).abs() < 1e-9, "k={k}: {p} vs {expected}");
    }
}
