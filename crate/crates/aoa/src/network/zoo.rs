//! A small zoo of architecturally distinct classifiers trained on the same
//! corpus, used as surrogate/victim pools in transfer experiments.

use super::train::{train, TrainConfig, TrainReport};
use super::{LayerSpec, Model, Preprocess};
use crate::data::Corpus;
use crate::error::NetworkError;
use crate::rng::derive_seed;
use crate::tensor::Real;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ZooConfig {
    pub seed: u64,
    pub train: TrainConfig,
    /// Minimum test accuracy every member must reach; a transfer study over
    /// models that cannot classify clean data is meaningless.
    pub accuracy_floor: Real,
}

impl Default for ZooConfig {
    fn default() -> Self {
        ZooConfig {
            seed: 17,
            // Two extra epochs over the bare training default buy the slower
            // members (the MLP at its reduced rate) margin over the floor.
            train: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
            accuracy_floor: 0.85,
        }
    }
}

/// Untrained blueprint for one zoo member.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub label: &'static str,
    pub preprocess: Preprocess,
    pub specs: Vec<LayerSpec>,
    /// Multiplier on the shared learning rate. The MLP diverges at rates the
    /// convolutional members train well under, so it runs slower.
    pub lr_scale: Real,
}

/// The four zoo blueprints. They differ in depth, pooling style, and input
/// normalization so that transfer between them is a real test rather than a
/// comparison of near-identical networks.
pub fn zoo_architectures(channels: usize, class_count: usize) -> Vec<Architecture> {
    use LayerSpec::*;
    vec![
        Architecture {
            label: "mlp",
            preprocess: Preprocess::unit(channels),
            specs: vec![
                Flatten,
                Dense { units: 128 },
                Relu,
                Dense { units: 64 },
                Relu,
                Dense { units: class_count },
                Softmax,
            ],
            lr_scale: 0.2,
        },
        Architecture {
            label: "cnn-max",
            preprocess: Preprocess::centered(channels),
            specs: vec![
                Conv2d { channels: 8, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool { size: 2, stride: 2 },
                Conv2d { channels: 16, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool { size: 2, stride: 2 },
                Flatten,
                Dense { units: 64 },
                Relu,
                Dense { units: class_count },
                Softmax,
            ],
            lr_scale: 1.0,
        },
        Architecture {
            label: "cnn-deep",
            preprocess: Preprocess::centered(channels),
            specs: vec![
                Conv2d { channels: 8, kernel: 3, stride: 1, pad: 1 },
                Relu,
                Conv2d { channels: 8, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool { size: 2, stride: 2 },
                Conv2d { channels: 16, kernel: 3, stride: 1, pad: 1 },
                Relu,
                Conv2d { channels: 16, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool { size: 2, stride: 2 },
                Flatten,
                Dense { units: class_count },
                Softmax,
            ],
            lr_scale: 1.0,
        },
        Architecture {
            label: "cnn-avg",
            preprocess: Preprocess::unit(channels),
            specs: vec![
                Conv2d { channels: 8, kernel: 3, stride: 1, pad: 1 },
                Relu,
                AvgPool { size: 2, stride: 2 },
                Conv2d { channels: 16, kernel: 3, stride: 1, pad: 1 },
                Relu,
                AvgPool { size: 2, stride: 2 },
                Flatten,
                Dense { units: 32 },
                Relu,
                Dense { units: class_count },
                Softmax,
            ],
            lr_scale: 1.0,
        },
    ]
}

/// Trains every architecture on `corpus` with per-member derived seeds.
/// Fails if any member lands below the accuracy floor.
pub fn build_zoo(
    corpus: &Corpus,
    cfg: &ZooConfig,
) -> Result<Vec<(Model, TrainReport)>, NetworkError> {
    let input_shape = corpus.train.images[0].shape().to_vec();
    let channels = input_shape[0];
    let class_count = corpus.train.class_count;
    let mut zoo = Vec::new();
    for (i, arch) in zoo_architectures(channels, class_count).into_iter().enumerate() {
        let model = Model::from_specs(
            arch.label,
            &input_shape,
            class_count,
            arch.preprocess,
            &arch.specs,
            derive_seed(cfg.seed, i as u64, 0xA),
        )?;
        let train_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, i as u64, 0xB),
            learning_rate: cfg.train.learning_rate * arch.lr_scale,
            ..cfg.train.clone()
        };
        let (model, report) = train(model, corpus, &train_cfg)?;
        if report.test_accuracy < cfg.accuracy_floor {
            return Err(NetworkError::AccuracyFloor {
                label: model.label.clone(),
                accuracy: report.test_accuracy,
                floor: cfg.accuracy_floor,
            });
        }
        zoo.push((model, report));
    }
    Ok(zoo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architectures_are_distinct_and_buildable() {
        let archs = zoo_architectures(1, 4);
        assert_eq!(archs.len(), 4);
        let labels: Vec<_> = archs.iter().map(|a| a.label).collect();
        assert_eq!(labels, ["mlp", "cnn-max", "cnn-deep", "cnn-avg"]);
        for arch in &archs {
            Model::from_specs(arch.label, &[1, 28, 28], 4, arch.preprocess.clone(), &arch.specs, 9)
                .unwrap();
        }
    }

    #[test]
    fn accuracy_floor_is_enforced() {
        let corpus = crate::data::synthetic_corpus(&crate::data::SyntheticConfig {
            train_count: 40,
            test_count: 20,
            seed: 2,
        })
        .unwrap();
        let cfg = ZooConfig {
            train: TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            accuracy_floor: 0.99,
            ..ZooConfig::default()
        };
        match build_zoo(&corpus, &cfg) {
            Err(NetworkError::AccuracyFloor { floor, .. }) => assert_eq!(floor, 0.99),
            other => panic!("expected accuracy floor error, got {other:?}"),
        }
    }
}
