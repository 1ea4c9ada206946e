#![allow(dead_code)]

use optbp::data::{default_data_dir, Dataset, DatasetName, Idx};

/// Cached MNIST, or `None` when it has not been fetched.
pub fn mnist() -> Option<Dataset> {
    match Dataset::load(DatasetName::Mnist, &default_data_dir()) {
        Ok(d) => Some(d),
        Err(e) => {
            eprintln!("skipping MNIST-backed check: {e}");
            None
        }
    }
}

/// Small random dataset with balanced labels.
pub fn synthetic(n_train: usize, n_test: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = optbp::Rng::new(seed);
    let mut images = |n: usize| Idx {
        dims: vec![n, 28, 28],
        data: (0..n * 784).map(|_| rng.below(256) as u8).collect(),
    };
    let (tr, te) = (images(n_train), images(n_test));
    let labels = |n: usize| Idx { dims: vec![n], data: (0..n).map(|i| (i % classes) as u8).collect() };
    Dataset::from_idx(DatasetName::Mnist, classes, tr, labels(n_train), te, labels(n_test)).unwrap()
}
