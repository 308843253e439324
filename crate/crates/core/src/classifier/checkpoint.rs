//! Model checkpoints in the shared binary container format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ClassifierModel, TrainConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    training_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
}

/// Serializes a model; the optional training config is echoed into the
/// trailing metadata block.
pub fn model_to_bytes<S: Scalar>(
    model: &ClassifierModel<S>,
    config: Option<&TrainConfig>,
) -> Vec<u8> {
    let tensors = model
        .params
        .iter()
        .map(|p| {
            (
                p.shape().to_vec(),
                p.data().iter().map(|v| v.as_f64()).collect(),
            )
        })
        .collect();
    let meta = CheckpointMeta {
        training_seed: model.training_seed,
        train_config: config.cloned(),
    };
    Container {
        descriptor: model.arch.descriptor(),
        tensors,
        metadata: serde_json::to_string(&meta).expect("checkpoint metadata serializes"),
    }
    .to_bytes()
}

pub fn save_model<S: Scalar>(
    path: &Path,
    model: &ClassifierModel<S>,
    config: Option<&TrainConfig>,
) -> Result<()> {
    std::fs::write(path, model_to_bytes(model, config))?;
    Ok(())
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<ClassifierModel<S>> {
    let container = Container::load(path)?;
    model_from_container(container)
}

pub fn model_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ClassifierModel<S>> {
    model_from_container(Container::from_bytes(bytes)?)
}

fn model_from_container<S: Scalar>(container: Container) -> Result<ClassifierModel<S>> {
    let arch = Architecture::parse(&container.descriptor)?;
    let expected = arch.param_shapes()?;
    if expected.len() != container.tensors.len() {
        return Err(Error::MalformedContainer(format!(
            "descriptor implies {} parameter tensors, file has {}",
            expected.len(),
            container.tensors.len()
        )));
    }
    let mut params = Vec::with_capacity(expected.len());
    for (shape, (dims, values)) in expected.iter().zip(container.tensors) {
        if shape != &dims {
            return Err(Error::MalformedContainer(format!(
                "parameter shape {dims:?} does not match descriptor shape {shape:?}"
            )));
        }
        params.push(Tensor::from_vec(
            dims,
            values.into_iter().map(S::from_f64).collect(),
        )?);
    }
    let meta: CheckpointMeta = serde_json::from_str(&container.metadata)
        .map_err(|e| Error::MalformedContainer(format!("bad metadata: {e}")))?;
    if arch.output_width() != Some(2) {
        return Err(Error::MalformedContainer(
            "final dense layer must have 2 outputs".into(),
        ));
    }
    Ok(ClassifierModel {
        input_spec: arch.input,
        class_count: 2,
        training_seed: meta.training_seed,
        arch,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn roundtrip_reproduces_predictions_bit_exactly() {
        let model: ClassifierModel<f64> =
            ClassifierModel::init(Architecture::small_cnn((1, 32, 32)), 77).unwrap();
        let bytes = model_to_bytes(&model, Some(&TrainConfig::default()));
        let back: ClassifierModel<f64> = model_from_bytes(&bytes).unwrap();

        assert_eq!(back.training_seed, 77);
        assert_eq!(back.arch, model.arch);

        let mut rng = SplitMix64::keyed(5, "ckpt");
        let x = Tensor::from_vec(
            vec![4, 1, 32, 32],
            (0..4 * 1024).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let a = model.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert_eq!(a.data(), b.data());

        // Re-serialization is byte-identical too.
        assert_eq!(bytes, model_to_bytes(&back, Some(&TrainConfig::default())));
    }

    #[test]
    fn tampered_descriptor_is_rejected() {
        let model: ClassifierModel<f64> =
            ClassifierModel::init(Architecture::small_cnn((1, 32, 32)), 0).unwrap();
        let bytes = model_to_bytes(&model, None);
        let mut container = Container::from_bytes(&bytes).unwrap();
        container.descriptor = "input 1x32x32; dense 2".into();
        assert!(model_from_bytes::<f64>(&container.to_bytes()).is_err());
    }
}
