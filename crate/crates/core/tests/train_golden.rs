//! One short epoch on the bundled MNIST files, pruning off.

use std::path::Path;

use cim_core::nn::train::train;
use cim_core::nn::{load_mnist, TrainSetup};

fn setup() -> TrainSetup {
    let mut s = TrainSetup::new(3);
    s.train.epochs = 1;
    s.train.train_subset = 300;
    s.train.test_subset = 100;
    s.prune.enabled = false;
    s
}

#[test]
fn one_epoch_is_deterministic_and_consistent() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (train_set, test_set) = load_mnist(&dir).unwrap();
    assert_eq!((train_set.len(), test_set.len()), (4_000, 1_000));

    let a = train(&setup(), &train_set, &test_set).unwrap();
    let b = train(&setup(), &train_set, &test_set).unwrap();
    assert_eq!(a.history.to_json(), b.history.to_json());

    let e = &a.history.epochs[0];
    assert_eq!(e.backend_mismatches, Some(0));
    assert_eq!(e.active_kernels, vec![32, 64, 32]);
    assert_eq!(e.pruned_fraction, 0.0);
    let (conv, fc) = setup().spec.ops(&[32, 64, 32]);
    assert_eq!((e.conv_ops, e.fc_ops), (conv * 300, fc * 300));
    // Chance is 0.1.
    assert!(e.test_accuracy > 0.15, "accuracy {}", e.test_accuracy);
    assert_eq!(e.cells_failed, 0);
}
