//! Fixtures shared by the pipeline benchmarks: a small trained target,
//! an untrained discriminator of matching width, and a test batch.

use tsconceal::data::{generate_synthetic, LabeledSeriesSet, SyntheticKind, SyntheticSpec};
use tsconceal::models::{ModelFamily, ModelSpec, TrainConfig, TrainedClassifier};
use tsconceal::Tensor;

pub const SERIES_LEN: usize = 64;

pub fn bench_data() -> LabeledSeriesSet {
    generate_synthetic(&SyntheticSpec {
        kind: SyntheticKind::TwoSine,
        n_per_class: 16,
        length: SERIES_LEN,
        noise_std: 0.2,
        seed: 7,
    })
    .expect("valid spec")
}

pub fn bench_target(data: &LabeledSeriesSet) -> TrainedClassifier {
    let spec = ModelSpec {
        family: ModelFamily::Mlp,
        hidden: vec![32],
        kernel_sizes: vec![],
        n_classes: data.n_classes(),
        input_length: data.series_length(),
        dropout: 0.0,
    };
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        learning_rate: 0.01,
        weight_decay: 0.0,
        seed: 7,
        patience: 0,
    };
    TrainedClassifier::build(spec, 7)
        .and_then(|m| m.fit(data, &cfg))
        .expect("fixture trains")
}

/// Untrained binary discriminator; gradient cost is architecture-bound, so
/// training it would only slow the fixture down.
pub fn bench_disc(data: &LabeledSeriesSet) -> TrainedClassifier {
    let spec = ModelSpec {
        family: ModelFamily::Mlp,
        hidden: vec![32],
        kernel_sizes: vec![],
        n_classes: 2,
        input_length: data.series_length(),
        dropout: 0.0,
    };
    TrainedClassifier::build(spec, 13).expect("fixture builds")
}

pub fn onehot(labels: &[usize], n_classes: usize) -> Tensor {
    let mut values = vec![0.0; labels.len() * n_classes];
    for (i, &y) in labels.iter().enumerate() {
        values[i * n_classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), n_classes], values).expect("valid one-hot")
}
