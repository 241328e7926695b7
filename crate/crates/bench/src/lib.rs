//! Fixed inputs shared by the benchmarks.

use rankvqa::data::{generate_synthetic, Sample};
use rankvqa::{ModelConfig, RankVqaModel, Rng, SyntheticSpec, Tensor};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::param(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).expect("valid shape")
}

/// `n` samples of the reference synthetic task.
pub fn reference_samples(n: usize) -> Vec<Sample> {
    generate_synthetic(&SyntheticSpec { n_samples: n, ..SyntheticSpec::default() })
        .expect("reference spec generates")
        .samples
}

pub fn reference_model(seed: u64) -> RankVqaModel {
    RankVqaModel::new(ModelConfig::default(), &mut Rng::new(seed)).expect("reference config is valid")
}
