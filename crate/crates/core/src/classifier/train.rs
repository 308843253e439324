//! SGD-with-momentum training loop with the augmentation recipe.

use serde::{Deserialize, Serialize};

use super::{augment, mixup_pair, Architecture, AugmentFlags, ClassifierModel, Labels};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: AugmentFlags,
    pub mixup_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 10,
            batch_size: 4,
            augmentation: AugmentFlags::default(),
            mixup_alpha: 0.2,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.augmentation.mixup && !(self.mixup_alpha > 0.0 && self.mixup_alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mixup_alpha must be in (0,1] when mixup is enabled, got {}",
                self.mixup_alpha
            )));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Trains the default small CNN from scratch on `train_set`.
///
/// Fully deterministic given `config.seed`: initialization, epoch shuffling,
/// augmentation draws, and mixup draws all come from streams keyed by that
/// seed. The last partial batch of each epoch is kept. A non-finite loss
/// aborts immediately rather than being skipped.
pub fn train<S: Scalar>(
    train_set: &Dataset<S>,
    config: &TrainConfig,
) -> Result<(ClassifierModel<S>, TrainLog)> {
    train_traced(train_set, config, |_, _, _| {})
}

/// [`train`] with a per-epoch observer `(epoch, mean_loss, model_so_far)`.
pub fn train_traced<S: Scalar>(
    train_set: &Dataset<S>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &ClassifierModel<S>),
) -> Result<(ClassifierModel<S>, TrainLog)> {
    config.validate()?;
    let first = train_set.images.first().ok_or(Error::EmptyDataset)?;
    if !train_set.has_both_classes() {
        let only = if first.label == 0 { "healthy" } else { "diseased" };
        return Err(Error::SingleClass(only.into()));
    }
    let input_spec = (first.channels, first.height, first.width);
    let mut model = ClassifierModel::init(Architecture::small_cnn(input_spec), config.seed)?;

    let mut velocity: Vec<Vec<S>> = model
        .params
        .iter()
        .map(|p| vec![S::zero(); p.numel()])
        .collect();
    let lr = S::from_f64(config.learning_rate);
    let mu = S::from_f64(config.momentum);

    let mut log = TrainLog::default();
    let mut last_finite = f64::NAN;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        SplitMix64::keyed(config.seed, &format!("shuffle{epoch}")).shuffle(&mut order);
        let mut aug_rng = SplitMix64::keyed(config.seed, &format!("aug{epoch}"));
        let mut mix_rng = SplitMix64::keyed(config.seed, &format!("mixup{epoch}"));

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let augmented: Vec<_> = chunk
                .iter()
                .map(|&i| augment(&train_set.images[i], &config.augmentation, &mut aug_rng))
                .collect();

            let (batch, labels) = if config.augmentation.mixup {
                // One lambda per batch, partners drawn as an in-batch
                // permutation.
                let lambda = mix_rng.next_beta_symmetric(config.mixup_alpha);
                let mut partner: Vec<usize> = (0..augmented.len()).collect();
                mix_rng.shuffle(&mut partner);
                let mut data = Vec::new();
                let mut rows = Vec::with_capacity(augmented.len());
                for (i, img) in augmented.iter().enumerate() {
                    let (px, label) = mixup_pair(img, &augmented[partner[i]], lambda)?;
                    data.extend_from_slice(&px);
                    rows.push(label);
                }
                let (c, h, w) = input_spec;
                (
                    Tensor::from_vec(vec![augmented.len(), c, h, w], data)?,
                    Labels::Soft(rows),
                )
            } else {
                let mut data = Vec::new();
                let mut hard = Vec::with_capacity(augmented.len());
                for img in &augmented {
                    data.extend_from_slice(&img.pixels);
                    hard.push(img.label);
                }
                let (c, h, w) = input_spec;
                (
                    Tensor::from_vec(vec![augmented.len(), c, h, w], data)?,
                    Labels::Hard(hard),
                )
            };

            let (loss, grads) = model.loss_and_gradients(&batch, &labels, false)?;
            let loss_f = loss.as_f64();
            if !loss_f.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = loss_f;
            epoch_loss += loss_f;
            batches += 1;
            step += 1;

            for ((param, grad), vel) in model.params.iter_mut().zip(&grads.params).zip(&mut velocity)
            {
                for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut())
                {
                    *v = mu * *v - lr * g;
                    *p = *p + *v;
                }
            }
        }
        let mean_loss = epoch_loss / batches.max(1) as f64;
        log.epoch_losses.push(mean_loss);
        on_epoch(epoch, mean_loss, &model);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::metrics;

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds: Dataset<f64> = generate_synthetic(6, 2, 1).unwrap();
        let (trained, log) = train(&ds, &quick_config(0)).unwrap();
        let init: ClassifierModel<f64> =
            ClassifierModel::init(Architecture::small_cnn((1, 32, 32)), 42).unwrap();
        for (a, b) in trained.params.iter().zip(&init.params) {
            assert_eq!(a.data(), b.data());
        }
        assert!(log.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let ds: Dataset<f64> = generate_synthetic(8, 3, 2).unwrap();
        let cfg = quick_config(2);
        let (a, la) = train(&ds, &cfg).unwrap();
        let (b, lb) = train(&ds, &cfg).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.data(), pb.data());
        }
        assert_eq!(la.epoch_losses, lb.epoch_losses);
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let mut ds: Dataset<f64> = generate_synthetic(4, 2, 3).unwrap();
        for img in &mut ds.images {
            img.label = 0;
        }
        assert!(matches!(
            train(&ds, &quick_config(1)).unwrap_err(),
            Error::SingleClass(_)
        ));
    }

    #[test]
    fn losses_stay_finite_and_accuracy_does_not_regress() {
        let ds: Dataset<f64> = generate_synthetic(20, 4, 4).unwrap();
        let cfg = quick_config(3);
        let (model, log) = train(&ds, &cfg).unwrap();
        assert!(log.epoch_losses.iter().all(|l| l.is_finite()));

        let init: ClassifierModel<f64> =
            ClassifierModel::init(Architecture::small_cnn((1, 32, 32)), cfg.seed).unwrap();
        let batch = ds.to_batch().unwrap();
        let labels = ds.labels();
        let acc_trained = metrics::accuracy(&model.predict(&batch).unwrap(), &labels).unwrap();
        let acc_init = metrics::accuracy(&init.predict(&batch).unwrap(), &labels).unwrap();
        assert!(
            acc_trained >= acc_init,
            "trained {acc_trained} vs init {acc_init}"
        );
    }
}
