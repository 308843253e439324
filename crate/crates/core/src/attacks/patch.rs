//! Universal adversarial patches and the natural-patch control.
//!
//! A patch is a trainable square pixel block optimized, by stochastic
//! gradient ascent on the mean log-probability of a target label, over
//! random placements (location and right-angle rotation) and training
//! images, so one patch transfers across images and placements.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::par_map;
use crate::classifier::{ClassifierModel, Labels};
use crate::container::Container;
use crate::data::{images_to_batch, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Right-angle rotations, counterclockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarters(self) -> u8 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn inverse(self) -> Rotation {
        match self {
            Rotation::R0 => Rotation::R0,
            Rotation::R90 => Rotation::R270,
            Rotation::R180 => Rotation::R180,
            Rotation::R270 => Rotation::R90,
        }
    }
}

/// Where and how a patch lands on an image: top-left offsets, rotation, and
/// the scale that fixes the effective side length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacementTransform {
    pub row: usize,
    pub col: usize,
    pub rotation: Rotation,
    pub scale: f64,
}

/// Trainable square pixel block with its deployment scale and target label.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<S> {
    /// [C, side, side], values in [0,1].
    pub pixels: Tensor<S>,
    pub scale: f64,
    pub target_label: u8,
}

impl<S: Scalar> Patch<S> {
    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Side length of a patch at `scale` on an H x W image: round(scale * min).
pub fn patch_side(scale: f64, height: usize, width: usize) -> usize {
    (scale * height.min(width) as f64).round() as usize
}

/// Hyperparameters for patch training.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchTrainConfig {
    pub scale: f64,
    pub steps: usize,
    pub step_size: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PatchTrainConfig {
    fn default() -> Self {
        PatchTrainConfig {
            scale: 0.4,
            steps: 400,
            step_size: 0.05,
            batch: 32,
            seed: 0,
        }
    }
}

impl PatchTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "patch scale must be in (0,1], got {}",
                self.scale
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "patch step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("patch batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Momentum coefficient of the patch optimizer.
pub const PATCH_MOMENTUM: f64 = 0.9;

fn rotate_square<S: Scalar>(pixels: &[S], channels: usize, side: usize, rotation: Rotation) -> Vec<S> {
    let (out, _, _) = crate::classifier::rotate_quarters(pixels, channels, side, side, rotation.quarters());
    out
}

fn resize_nearest<S: Scalar>(pixels: &[S], channels: usize, from: usize, to: usize) -> Vec<S> {
    if from == to {
        return pixels.to_vec();
    }
    let mut out = Vec::with_capacity(channels * to * to);
    for c in 0..channels {
        let plane = &pixels[c * from * from..(c + 1) * from * from];
        for y in 0..to {
            let sy = ((y as f64 + 0.5) * from as f64 / to as f64) as usize;
            let sy = sy.min(from - 1);
            for x in 0..to {
                let sx = ((x as f64 + 0.5) * from as f64 / to as f64) as usize;
                let sx = sx.min(from - 1);
                out.push(plane[sy * from + sx]);
            }
        }
    }
    out
}

/// Pastes rotated, resized patch pixels over the image region at the
/// placement location; all other pixels are untouched.
pub fn apply_patch<S: Scalar>(
    image: &LabeledImage<S>,
    patch: &Patch<S>,
    placement: &PlacementTransform,
) -> Result<LabeledImage<S>> {
    if patch.channels() != image.channels {
        return Err(Error::shape(
            "apply_patch",
            format!("{} channels vs image {}", patch.channels(), image.channels),
        ));
    }
    let side = patch_side(placement.scale, image.height, image.width);
    if side < 1 {
        return Err(Error::DegeneratePatch(format!(
            "effective side {side} at scale {}",
            placement.scale
        )));
    }
    if placement.row + side > image.height || placement.col + side > image.width {
        return Err(Error::PlacementOutOfBounds(format!(
            "{side}x{side} patch at ({}, {}) on {}x{} image",
            placement.row, placement.col, image.height, image.width
        )));
    }

    let rotated = rotate_square(patch.pixels.data(), patch.channels(), patch.side(), placement.rotation);
    let resized = resize_nearest(&rotated, patch.channels(), patch.side(), side);

    let mut out = image.clone();
    let plane = image.height * image.width;
    for c in 0..image.channels {
        for r in 0..side {
            let dst_base = c * plane + (placement.row + r) * image.width + placement.col;
            let src_base = c * side * side + r * side;
            out.pixels[dst_base..dst_base + side]
                .copy_from_slice(&resized[src_base..src_base + side]);
        }
    }
    Ok(out)
}

fn sample_placement(rng: &mut SplitMix64, scale: f64, height: usize, width: usize) -> Result<PlacementTransform> {
    let side = patch_side(scale, height, width);
    if side < 1 || side > height || side > width {
        return Err(Error::DegeneratePatch(format!(
            "effective side {side} on {height}x{width} image"
        )));
    }
    let rotation = Rotation::ALL[rng.next_below(4) as usize];
    let row = rng.next_below((height - side + 1) as u64) as usize;
    let col = rng.next_below((width - side + 1) as u64) as usize;
    Ok(PlacementTransform {
        row,
        col,
        rotation,
        scale,
    })
}

/// Trains a universal patch against `model` by gradient ascent on the mean
/// log-probability of `target`, sampling a fresh placement per image per
/// step. The patch starts mid-gray and is clamped to [0,1] after every
/// optimizer step. Deterministic given `cfg.seed`.
pub fn train_patch<S: Scalar>(
    model: &ClassifierModel<S>,
    train_images: &[LabeledImage<S>],
    target: u8,
    cfg: &PatchTrainConfig,
) -> Result<Patch<S>> {
    cfg.validate()?;
    if target > 1 {
        return Err(Error::LabelOutOfRange(target as i64));
    }
    if train_images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (channels, height, width) = model.input_spec;
    let side = patch_side(cfg.scale, height, width);
    if side < 1 {
        return Err(Error::DegeneratePatch(format!(
            "side {side} at scale {} on {height}x{width} inputs",
            cfg.scale
        )));
    }

    let mut patch = Patch {
        pixels: Tensor::full(vec![channels, side, side], S::from_f64(0.5)),
        scale: cfg.scale,
        target_label: target,
    };
    let mut velocity = vec![S::zero(); patch.pixels.numel()];
    let lr = S::from_f64(cfg.step_size);
    let mu = S::from_f64(PATCH_MOMENTUM);

    let mut batch_rng = SplitMix64::keyed(cfg.seed, &format!("patch-batch:{target}"));
    let mut place_rng = SplitMix64::keyed(cfg.seed, &format!("patch-place:{target}"));

    for step in 0..cfg.steps {
        let mut data = Vec::with_capacity(cfg.batch * channels * height * width);
        let mut placements = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let img = &train_images[batch_rng.next_below(train_images.len() as u64) as usize];
            let placement = sample_placement(&mut place_rng, cfg.scale, img.height, img.width)?;
            let patched = apply_patch(img, &patch, &placement)?;
            data.extend_from_slice(&patched.pixels);
            placements.push(placement);
        }
        let batch = Tensor::from_vec(vec![cfg.batch, channels, height, width], data)?;
        let labels = Labels::Hard(vec![target; cfg.batch]);

        // Ascending mean log p(target) == descending the cross-entropy
        // toward the target.
        let (loss, grads) = model.loss_and_gradients(&batch, &labels, true)?;
        if !loss.as_f64().is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                last_finite_loss: f64::NAN,
            });
        }
        let input_grad = grads.input.expect("input gradient was requested");

        // Gather the patch gradient: each example routes its region gradient
        // back through the inverse rotation (training keeps the native side,
        // so no resampling is involved).
        let mut patch_grad = vec![S::zero(); patch.pixels.numel()];
        let image_len = channels * height * width;
        let plane = height * width;
        for (i, placement) in placements.iter().enumerate() {
            let g = &input_grad.data()[i * image_len..(i + 1) * image_len];
            let mut region = Vec::with_capacity(channels * side * side);
            for c in 0..channels {
                for r in 0..side {
                    let base = c * plane + (placement.row + r) * width + placement.col;
                    region.extend_from_slice(&g[base..base + side]);
                }
            }
            let unrotated = rotate_square(&region, channels, side, placement.rotation.inverse());
            for (pg, u) in patch_grad.iter_mut().zip(&unrotated) {
                *pg = *pg + *u;
            }
        }

        for ((p, g), v) in patch
            .pixels
            .data_mut()
            .iter_mut()
            .zip(&patch_grad)
            .zip(&mut velocity)
        {
            *v = mu * *v - lr * *g;
            *p = (*p + *v).max(S::zero()).min(S::one());
        }
    }
    Ok(patch)
}

/// Control condition: selects the training image the model scores highest
/// for `target` (ties to the lowest index), center-crops it square, and
/// resizes it to the patch side. No optimization.
pub fn natural_patch<S: Scalar>(
    model: &ClassifierModel<S>,
    train_images: &[LabeledImage<S>],
    target: u8,
    scale: f64,
) -> Result<Patch<S>> {
    if train_images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if target > 1 {
        return Err(Error::LabelOutOfRange(target as i64));
    }
    let (channels, height, width) = model.input_spec;
    let side = patch_side(scale, height, width);
    if side < 1 {
        return Err(Error::DegeneratePatch(format!("side {side} at scale {scale}")));
    }

    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (offset, chunk) in train_images.chunks(256).enumerate() {
        let batch = images_to_batch(chunk)?;
        let probs = model.predict(&batch)?;
        for (i, row) in probs.data().chunks(2).enumerate() {
            let score = row[target as usize].as_f64();
            if score > best_score {
                best_score = score;
                best_idx = offset * 256 + i;
            }
        }
    }

    let chosen = &train_images[best_idx];
    let crop = chosen.height.min(chosen.width);
    let (r0, c0) = ((chosen.height - crop) / 2, (chosen.width - crop) / 2);
    let plane = chosen.height * chosen.width;
    let mut square = Vec::with_capacity(channels * crop * crop);
    for c in 0..channels {
        for r in 0..crop {
            let base = c * plane + (r0 + r) * chosen.width + c0;
            square.extend_from_slice(&chosen.pixels[base..base + crop]);
        }
    }
    let resized = resize_nearest(&square, channels, crop, side);
    Ok(Patch {
        pixels: Tensor::from_vec(vec![channels, side, side], resized)?,
        scale,
        target_label: target,
    })
}

/// Applies, to each image, the patch whose target is the flipped true label
/// (the targeted protocol), under a per-image random placement: uniform
/// right-angle rotation, uniform valid location, fixed scale.
///
/// Placement streams are keyed by `(seed, image id)` only, so different
/// patch conditions see identical placements.
pub fn apply_patch_set<S: Scalar>(
    patches: &[Patch<S>; 2],
    images: &[LabeledImage<S>],
    seed: u64,
) -> Result<Vec<LabeledImage<S>>> {
    if patches[0].scale != patches[1].scale {
        return Err(Error::InvalidConfig(format!(
            "patch scales differ: {} vs {}",
            patches[0].scale, patches[1].scale
        )));
    }
    par_map(images, |img| {
        let mut rng = SplitMix64::keyed(seed, &format!("patch-eval:{}", img.image_id));
        let placement = sample_placement(&mut rng, patches[0].scale, img.height, img.width)?;
        let patch = &patches[(1 - img.label) as usize];
        apply_patch(img, patch, &placement)
    })
    .into_iter()
    .collect()
}

// ── Patch files ──────────────────────────────────────────────────────

/// Metadata block of a patch file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchFileMeta {
    pub target_label: u8,
    pub scale: f64,
    pub seed: u64,
    pub victim_digest: String,
    pub surrogate_digest: String,
}

/// Saves a patch in the shared binary container format.
pub fn save_patch<S: Scalar>(path: &Path, patch: &Patch<S>, meta: &PatchFileMeta) -> Result<()> {
    let container = Container {
        descriptor: format!("patch {} {}", patch.channels(), patch.side()),
        tensors: vec![(
            patch.pixels.shape().to_vec(),
            patch.pixels.data().iter().map(|v| v.as_f64()).collect(),
        )],
        metadata: serde_json::to_string(meta).expect("patch metadata serializes"),
    };
    container.save(path)
}

pub fn load_patch<S: Scalar>(path: &Path) -> Result<(Patch<S>, PatchFileMeta)> {
    let container = Container::load(path)?;
    let tokens: Vec<&str> = container.descriptor.split_whitespace().collect();
    let bad = || Error::MalformedContainer(format!("bad patch descriptor {:?}", container.descriptor));
    let (channels, side): (usize, usize) = match tokens.as_slice() {
        ["patch", c, s] => (c.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?),
        _ => return Err(bad()),
    };
    if container.tensors.len() != 1 {
        return Err(Error::MalformedContainer(format!(
            "patch file should hold one tensor, found {}",
            container.tensors.len()
        )));
    }
    let (dims, values) = container.tensors.into_iter().next().expect("checked length");
    if dims != [channels, side, side] {
        return Err(Error::MalformedContainer(format!(
            "patch tensor {dims:?} does not match descriptor {channels}x{side}x{side}"
        )));
    }
    let meta: PatchFileMeta = serde_json::from_str(&container.metadata)
        .map_err(|e| Error::MalformedContainer(format!("bad patch metadata: {e}")))?;
    let patch = Patch {
        pixels: Tensor::from_vec(dims, values.into_iter().map(S::from_f64).collect())?,
        scale: meta.scale,
        target_label: meta.target_label,
    };
    Ok((patch, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;

    fn flat_image(height: usize, width: usize, fill: f64, label: u8) -> LabeledImage<f64> {
        LabeledImage {
            pixels: vec![fill; height * width],
            channels: 1,
            height,
            width,
            label,
            patient_id: "p".into(),
            image_id: format!("flat{label}"),
        }
    }

    fn gray_patch(side: usize, value: f64, scale: f64) -> Patch<f64> {
        Patch {
            pixels: Tensor::full(vec![1, side, side], value),
            scale,
            target_label: 1,
        }
    }

    #[test]
    fn scale_point_four_replaces_a_40x40_region() {
        let image = flat_image(100, 100, 0.0, 0);
        let patch = gray_patch(40, 1.0, 0.4);
        let placement = PlacementTransform {
            row: 13,
            col: 27,
            rotation: Rotation::R180,
            scale: 0.4,
        };
        let out = apply_patch(&image, &patch, &placement).unwrap();
        let changed = out
            .pixels
            .iter()
            .zip(&image.pixels)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 1600);
    }

    #[test]
    fn identity_placement_copies_the_patch_bit_exactly() {
        let image = flat_image(10, 10, 0.25, 0);
        let mut patch = gray_patch(4, 0.0, 0.4);
        for (i, v) in patch.pixels.data_mut().iter_mut().enumerate() {
            *v = (i as f64) / 16.0;
        }
        let placement = PlacementTransform {
            row: 0,
            col: 0,
            rotation: Rotation::R0,
            scale: 0.4,
        };
        let out = apply_patch(&image, &patch, &placement).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(out.pixels[r * 10 + c], patch.pixels.data()[r * 4 + c]);
            }
        }
        // Complement untouched.
        for r in 0..10 {
            for c in 0..10 {
                if r >= 4 || c >= 4 {
                    assert_eq!(out.pixels[r * 10 + c], 0.25);
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_placement_is_rejected() {
        let image = flat_image(10, 10, 0.0, 0);
        let patch = gray_patch(4, 0.5, 0.4);
        let placement = PlacementTransform {
            row: 7,
            col: 0,
            rotation: Rotation::R0,
            scale: 0.4,
        };
        assert!(matches!(
            apply_patch(&image, &patch, &placement).unwrap_err(),
            Error::PlacementOutOfBounds(_)
        ));
    }

    #[test]
    fn rotation_roundtrips_through_inverse() {
        let pixels: Vec<f64> = (0..9).map(|v| v as f64).collect();
        for rot in Rotation::ALL {
            let there = rotate_square(&pixels, 1, 3, rot);
            let back = rotate_square(&there, 1, 3, rot.inverse());
            assert_eq!(back, pixels);
        }
    }

    fn tiny_model(seed: u64) -> ClassifierModel<f64> {
        ClassifierModel::init(Architecture::small_cnn((1, 16, 16)), seed).unwrap()
    }

    fn tiny_images(n: usize) -> Vec<LabeledImage<f64>> {
        let mut rng = SplitMix64::keyed(1, "tiny-images");
        (0..n)
            .map(|i| LabeledImage {
                pixels: (0..256).map(|_| (rng.next_f64() * 255.0).round() / 255.0).collect(),
                channels: 1,
                height: 16,
                width: 16,
                label: (i % 2) as u8,
                patient_id: format!("p{i}"),
                image_id: format!("t{i}"),
            })
            .collect()
    }

    #[test]
    fn zero_steps_returns_the_mid_gray_initialization() {
        let model = tiny_model(2);
        let images = tiny_images(6);
        let cfg = PatchTrainConfig {
            steps: 0,
            seed: 3,
            ..PatchTrainConfig::default()
        };
        let patch = train_patch(&model, &images, 1, &cfg).unwrap();
        assert!(patch.pixels.data().iter().all(|&v| v == 0.5));
        assert_eq!(patch.side(), patch_side(0.4, 16, 16));
    }

    #[test]
    fn patch_training_is_deterministic_and_stays_in_range() {
        let model = tiny_model(4);
        let images = tiny_images(8);
        let cfg = PatchTrainConfig {
            steps: 5,
            batch: 4,
            seed: 9,
            ..PatchTrainConfig::default()
        };
        let a = train_patch(&model, &images, 0, &cfg).unwrap();
        let b = train_patch(&model, &images, 0, &cfg).unwrap();
        assert_eq!(a.pixels.data(), b.pixels.data());
        assert!(a.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// Monitored ascent: mean log-probability of the target on a frozen
    /// validation batch (frozen placements) must not fall below its value at
    /// initialization.
    #[test]
    fn training_raises_the_frozen_objective() {
        let model = tiny_model(6);
        let images = tiny_images(12);
        let cfg = PatchTrainConfig {
            steps: 60,
            batch: 8,
            step_size: 0.05,
            seed: 11,
            ..PatchTrainConfig::default()
        };

        let objective = |patch: &Patch<f64>| -> f64 {
            let mut rng = SplitMix64::keyed(99, "frozen-eval");
            let mut total = 0.0;
            for img in &images {
                let placement = sample_placement(&mut rng, patch.scale, 16, 16).unwrap();
                let patched = apply_patch(img, patch, &placement).unwrap();
                let probs = model.predict(&patched.to_tensor()).unwrap();
                total += probs.data()[1].as_f64().max(1e-12).ln();
            }
            total / images.len() as f64
        };

        let init = Patch {
            pixels: Tensor::full(vec![1, patch_side(0.4, 16, 16), patch_side(0.4, 16, 16)], 0.5),
            scale: 0.4,
            target_label: 1,
        };
        let trained = train_patch(&model, &images, 1, &cfg).unwrap();
        let before = objective(&init);
        let after = objective(&trained);
        assert!(after >= before, "objective fell: {before} -> {after}");
    }

    #[test]
    fn natural_patch_picks_the_highest_scoring_image() {
        let model = tiny_model(8);
        let images = tiny_images(10);
        let patch = natural_patch(&model, &images, 1, 0.4).unwrap();

        let batch = images_to_batch(&images).unwrap();
        let probs = model.predict(&batch).unwrap();
        let scores: Vec<f64> = probs.data().chunks(2).map(|r| r[1]).collect();
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        // The selected image resized to the patch side.
        let expect = resize_nearest(&images[best].pixels, 1, 16, patch.side());
        assert_eq!(patch.pixels.data(), &expect[..]);
        for (i, &s) in scores.iter().enumerate() {
            assert!(scores[best] >= s, "image {i} outscores the selection");
        }
    }

    #[test]
    fn one_image_dataset_becomes_the_patch() {
        let model = tiny_model(9);
        let images = tiny_images(1);
        let patch = natural_patch(&model, &images, 0, 1.0).unwrap();
        // Scale 1.0 on square inputs: the image itself.
        assert_eq!(patch.pixels.data(), &images[0].pixels[..]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = tiny_model(10);
        assert!(matches!(
            natural_patch(&model, &[], 1, 0.4).unwrap_err(),
            Error::EmptyDataset
        ));
    }

    #[test]
    fn patch_file_roundtrips() {
        let patch = Patch {
            pixels: Tensor::from_vec(vec![1, 2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap(),
            scale: 0.4,
            target_label: 1,
        };
        let meta = PatchFileMeta {
            target_label: 1,
            scale: 0.4,
            seed: 7,
            victim_digest: "aa".into(),
            surrogate_digest: "bb".into(),
        };
        let dir = std::env::temp_dir().join(format!("advml-patch-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("patch.amf");
        save_patch(&path, &patch, &meta).unwrap();
        let (back, back_meta) = load_patch::<f64>(&path).unwrap();
        assert_eq!(back, patch);
        assert_eq!(back_meta, meta);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
