use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softreg::neural::gradcheck::{check_kabsch_steps, tape_suite};

#[test]
fn analytic_gradients_match_finite_differences() {
    for (op, err) in tape_suite(50, 21) {
        assert!(err < 1e-4, "{op}: relative error {err:e}");
    }
}

#[test]
fn kabsch_backward_is_stable_across_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for n in [3, 8, 32, 128] {
        let (diff, finite) = check_kabsch_steps(&mut rng, n).unwrap();
        assert!(finite);
        assert!(diff < 0.05, "n={n}: {diff}");
    }
}
