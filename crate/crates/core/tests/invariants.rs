//! Property tests for the moment kernels, the head and the smoother.

mod support;

use proptest::prelude::*;
use support::properties::*;

#[test]
fn initialized_head_reproduces_the_linear_head() {
    assert!(support::exact::init_identity_deviation(50, 1e-12, 3) <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relu_output_is_a_valid_gaussian(u in sized_gaussian(8)) {
        relu_is_valid(&u)?;
    }

    #[test]
    fn softmax_output_is_normalized_and_keeps_argmax((block, u) in blocked_gaussian()) {
        softmax_is_normalized(block, &u)?;
    }

    #[test]
    fn linear_output_is_a_valid_gaussian((shape, w, z) in linear_case()) {
        linear_is_valid(shape, &w, &z)?;
    }

    #[test]
    fn head_trace_shapes_follow_token_count((cfg, w) in head(3, 4, 0.1), tokens in 1usize..=4, h in vec_of(12, 2.0)) {
        trace_shapes(&cfg, &w, tokens, &h)?;
    }

    #[test]
    fn init_preserves_argmax_of_the_linear_head(w_o in vec_of(5 * 6, 2.0), h in vec_of(4, 2.0)) {
        init_keeps_argmax(&w_o, &h)?;
    }

    #[test]
    fn zero_innovation_leaves_weights_unchanged((cfg, w) in head(2, 3, 0.05), h in vec_of(4, 1.5), tokens in 1usize..=2) {
        zero_innovation_is_fixed(&cfg, &w, tokens, &h)?;
    }

    #[test]
    fn updates_are_deterministic_and_keep_valid_weights(
        (cfg, w) in head(2, 3, 0.05),
        h in vec_of(2, 1.5),
        target in 0usize..3,
        sigma in 0.01..10.0f64,
    ) {
        update_is_deterministic(&cfg, &w, &h, target, sigma)?;
    }
}
