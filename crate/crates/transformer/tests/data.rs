use std::io::Cursor;

use pdelab_core::LayerParams;
use pdelab_transformer::retention::{estimate_retention, histogram_mutual_information, RetentionConfig};
use pdelab_transformer::tasks::{
    denoise_1d, listops_mini, read_examples, write_examples, DenoiseConfig, ListOpsConfig,
};
use pdelab_transformer::value::{best_position, PositionValueWeights};

#[test]
fn examples_text_round_trip() {
    let data = listops_mini(40, 10, 1, &ListOpsConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_examples(&mut buf, &data.train).unwrap();
    assert_eq!(read_examples(Cursor::new(buf)).unwrap(), data.train);
    assert!(read_examples(Cursor::new("3 1 2 3\n")).is_err());
}

#[test]
fn datasets_are_seeded() {
    let a = denoise_1d(30, 10, 4, &DenoiseConfig::default()).unwrap();
    assert_eq!(a, denoise_1d(30, 10, 4, &DenoiseConfig::default()).unwrap());
    assert_ne!(a, denoise_1d(30, 10, 5, &DenoiseConfig::default()).unwrap());
    a.validate().unwrap();
}

#[test]
fn value_argmax_scale_invariant() {
    let candidates = [(0.9, 0.2, 0.1), (0.7, 0.05, 0.05), (0.95, 0.4, 0.3), (0.5, 0.0, 0.0)];
    let w = PositionValueWeights::new(1.0, 0.7, 0.4).unwrap();
    let best = best_position(&candidates, &w);
    assert!(best.is_some());
    assert_eq!(best_position(&candidates, &w.scaled(10.0).unwrap()), best);
    assert!(best_position(&[], &w).is_none());
}

#[test]
fn noiseless_retention_is_flat() {
    let cfg = RetentionConfig {
        flip_prob: 0.0,
        trials: 1000,
        ..RetentionConfig::default()
    };
    let est = estimate_retention(&cfg, &LayerParams::new(2).unwrap()).unwrap();
    assert_eq!(est.depths, vec![1, 2, 3, 4]);
    assert!(est.rho.iter().all(|&r| r == est.rho[0]));
}

#[test]
fn one_bin_is_rejected() {
    assert!(histogram_mutual_information(&[0.1, 0.2], &[true, false], 1).is_err());
    let cfg = RetentionConfig {
        bins: 1,
        trials: 1000,
        ..RetentionConfig::default()
    };
    assert!(estimate_retention(&cfg, &LayerParams::new(2).unwrap()).is_err());
}
