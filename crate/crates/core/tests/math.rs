use dsoftmax::math::{cosine_activations, cosine_activations_with, seeded_gaussian_matrix};
use dsoftmax::RngState;
use proptest::prelude::*;

#[test]
fn parallel_cosine_is_bitwise_serial() {
    let mut rng = RngState::new(1);
    let x = seeded_gaussian_matrix(37, 24, &mut rng);
    let w = seeded_gaussian_matrix(3000, 24, &mut rng);
    let serial = cosine_activations_with(&x, &w, false).unwrap();
    let parallel = cosine_activations_with(&x, &w, true).unwrap();
    assert_eq!(serial.as_slice(), parallel.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cosines_are_bounded_and_scale_invariant(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..600, scale in 0.01f64..100.0) {
        let mut rng = RngState::new(seed);
        let x = seeded_gaussian_matrix(rows, 7, &mut rng);
        let w = seeded_gaussian_matrix(cols, 7, &mut rng);
        let mut scaled = w.clone();
        scaled.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        let z = cosine_activations(&x, &w).unwrap();
        let zs = cosine_activations(&x, &scaled).unwrap();
        for (a, b) in z.as_slice().iter().zip(zs.as_slice()) {
            prop_assert!((-1.0..=1.0).contains(a));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
