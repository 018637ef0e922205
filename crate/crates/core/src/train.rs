//! Mini-batch SGD with momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{LayerParams, NetworkSpec, SplitModel};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

pub fn train_sgd(spec: NetworkSpec, dataset: &Dataset, config: &TrainConfig) -> Result<SplitModel> {
    train_sgd_logged(spec, dataset, config, |_| {})
}

/// Same as [`train_sgd`], reporting every finished epoch to `on_epoch`.
///
/// Weights are initialized from `seed` and each epoch is shuffled from a stream
/// derived from `seed`, so equal inputs give bit-identical weights.
pub fn train_sgd_logged(
    spec: NetworkSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<SplitModel> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(dataset.name.clone()));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut model = SplitModel::<f32>::init(spec, config.seed)?;
    let mut velocity: Vec<Option<LayerParams>> = model
        .params()
        .iter()
        .map(|p| {
            p.as_ref().map(|p| LayerParams {
                weight: Tensor::zeros(p.weight.shape()),
                bias: Tensor::zeros(p.bias.shape()),
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_5A6D);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for batch in order.chunks(config.batch) {
            let x = dataset.images.select(batch);
            let y: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
            let (loss, logits, grads) = model.loss_and_param_gradients(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    loss: loss as f64,
                });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            hits += (0..batch.len()).filter(|&b| argmax(logits.item(b)) == y[b]).count();

            for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                let (Some(p), Some(v), Some(g)) = (p.as_mut(), v.as_mut(), g.as_ref()) else {
                    continue;
                };
                for (param, vel, grad) in [
                    (&mut p.weight, &mut v.weight, &g.weight),
                    (&mut p.bias, &mut v.bias, &g.bias),
                ] {
                    for ((w, m), &d) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
                        *m = config.momentum * *m + d;
                        *w -= config.lr * *m;
                    }
                }
            }
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            train_accuracy: hits as f64 / dataset.len() as f64,
        };
        if !log.loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: log.loss });
        }
        on_epoch(&log);
    }
    Ok(model)
}
