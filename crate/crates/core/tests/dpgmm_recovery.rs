//! End-to-end sampler check on a synthetic corpus with known structure.

use zeroseg_core::dpgmm::{run, DpgmmConfig};
use zeroseg_core::eval::purity;
use zeroseg_core::syncorpus::{generate, CorpusSpec};

#[test]
fn three_blob_corpus_is_recovered_deterministically() {
    let spec = CorpusSpec::separated(3, 1, 20, 2, 41).unwrap();
    let corpus = generate(&spec).unwrap();
    let config = DpgmmConfig {
        alpha: 1.0,
        prior: None,
        iterations: 100,
        seed: 7,
    };
    let (state, labels) = run(&corpus.features, &config).unwrap();
    let k = state.num_components();
    assert!((3..=8).contains(&k), "found {k} components");
    let report = purity(&labels, &corpus.alignment).unwrap();
    assert!(report.overall >= 0.95, "purity {}", report.overall);

    let (state_again, labels_again) = run(&corpus.features, &config).unwrap();
    assert_eq!(labels, labels_again);
    assert_eq!(k, state_again.num_components());
}
