//! Tape gradients against central differences on the two training graphs.

mod common;

use common::{classifier_instance, feature_instance};
use proptest::prelude::*;
use tailseg_core::rng::chacha;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn feature_graph_gradients(seed in any::<u64>()) {
        let (mut tape, inputs) = feature_instance(&mut chacha(seed), 1e-4);
        let err = tape.grad_check(&inputs, 1e-6, 1e-3).unwrap();
        prop_assert!(err <= 1e-5, "relative error {err:e}");
    }

    #[test]
    fn classifier_graph_gradients(seed in any::<u64>()) {
        let (mut tape, inputs) = classifier_instance(&mut chacha(seed));
        let err = tape.grad_check(&inputs, 1e-6, 1e-3).unwrap();
        prop_assert!(err <= 1e-5, "relative error {err:e}");
    }

    #[test]
    fn replaying_inputs_reproduces_the_loss(seed in any::<u64>()) {
        let (mut tape, inputs) = feature_instance(&mut chacha(seed), 0.0);
        let before = tape.scalar(tape.terminal().unwrap()).unwrap();
        let after = tape.forward(&inputs).unwrap().as_scalar().unwrap();
        prop_assert_eq!(before.to_bits(), after.to_bits());
    }
}
