//! Desk-scale data: labeled images, datasets, a deterministic synthetic
//! generator with patient grouping, and patient-grouped train/test splitting.

mod manifest;
mod pnm;
mod synthetic;

pub use manifest::{load_manifest, save_manifest, ManifestRow};
pub use pnm::{decode_image, encode_image, load_image, save_image};
pub use synthetic::generate_synthetic;

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel grid in [0,1] with a binary label and patient grouping.
///
/// Pixels are stored channel-major (C x H x W) like the model input.
/// Label 0 is healthy, 1 is diseased.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<S> {
    pub pixels: Vec<S>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub label: u8,
    pub patient_id: String,
    pub image_id: String,
}

impl<S: Scalar> LabeledImage<S> {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.channels * self.height * self.width {
            return Err(Error::shape(
                "labeled_image",
                format!(
                    "{}x{}x{} vs {} pixels",
                    self.channels,
                    self.height,
                    self.width,
                    self.pixels.len()
                ),
            ));
        }
        if self.image_id.is_empty() || self.patient_id.is_empty() {
            return Err(Error::MalformedManifest("empty image or patient id".into()));
        }
        if self.label > 1 {
            return Err(Error::LabelOutOfRange(self.label as i64));
        }
        for &p in &self.pixels {
            if !(p >= S::zero() && p <= S::one()) {
                return Err(Error::PixelOutOfRange(format!(
                    "{} in image {}",
                    p, self.image_id
                )));
            }
        }
        Ok(())
    }

    /// Pixels as a [1, C, H, W] tensor.
    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::from_vec(
            vec![1, self.channels, self.height, self.width],
            self.pixels.clone(),
        )
        .expect("image dims are consistent")
    }
}

/// Split assignment of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
    Unsplit,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::Unsplit => "unsplit",
        }
    }
}

/// An ordered collection of labeled images; order doubles as manifest order.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub images: Vec<LabeledImage<S>>,
    pub split: SplitTag,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(images: Vec<LabeledImage<S>>, split: SplitTag) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for img in &images {
            img.validate()?;
            if !seen.insert(img.image_id.clone()) {
                return Err(Error::DuplicateImageId(img.image_id.clone()));
            }
        }
        Ok(Dataset { images, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// True when both classes appear.
    pub fn has_both_classes(&self) -> bool {
        let mut seen = [false, false];
        for img in &self.images {
            seen[img.label as usize] = true;
        }
        seen[0] && seen[1]
    }

    pub fn labels(&self) -> Vec<u8> {
        self.images.iter().map(|i| i.label).collect()
    }

    /// Stacks all images into an [N, C, H, W] tensor; shapes must agree.
    pub fn to_batch(&self) -> Result<Tensor<S>> {
        images_to_batch(&self.images)
    }
}

/// Stacks images into an [N, C, H, W] tensor; shapes must agree.
pub fn images_to_batch<S: Scalar>(images: &[LabeledImage<S>]) -> Result<Tensor<S>> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::shape(
                "to_batch",
                format!(
                    "image {} is {}x{}x{}, expected {c}x{h}x{w}",
                    img.image_id, img.channels, img.height, img.width
                ),
            ));
        }
        data.extend_from_slice(&img.pixels);
    }
    Tensor::from_vec(vec![images.len(), c, h, w], data)
}

/// Assigns every patient independently to the test side with probability
/// `test_fraction`; all of a patient's images follow the assignment.
///
/// Fails with [`Error::DegenerateSplit`] when either side ends up empty or
/// single-class; the caller retries with a different seed.
pub fn split_by_patient<S: Scalar>(
    ds: &Dataset<S>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset<S>, Dataset<S>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must be in (0,1), got {test_fraction}"
        )));
    }
    // Patients in first-appearance order, so the stream consumption is
    // independent of image ordering details within a patient.
    let mut patients: Vec<&str> = Vec::new();
    let mut seen = BTreeSet::new();
    for img in &ds.images {
        if seen.insert(img.patient_id.as_str()) {
            patients.push(img.patient_id.as_str());
        }
    }
    if patients.len() < 2 {
        return Err(Error::DegenerateSplit(format!(
            "need at least 2 patients, got {}",
            patients.len()
        )));
    }

    let mut rng = SplitMix64::keyed(seed, "split");
    let mut to_test = BTreeSet::new();
    for p in &patients {
        if rng.next_f64() < test_fraction {
            to_test.insert(*p);
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for img in &ds.images {
        if to_test.contains(img.patient_id.as_str()) {
            test.push(img.clone());
        } else {
            train.push(img.clone());
        }
    }
    let train = Dataset::new(train, SplitTag::Train)?;
    let test = Dataset::new(test, SplitTag::Test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::DegenerateSplit("one side is empty".into()));
    }
    if !train.has_both_classes() || !test.has_both_classes() {
        return Err(Error::DegenerateSplit("one side is single-class".into()));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image(image_id: &str, patient_id: &str, label: u8, fill: f64) -> LabeledImage<f64> {
        LabeledImage {
            pixels: vec![fill; 4],
            channels: 1,
            height: 2,
            width: 2,
            label,
            patient_id: patient_id.into(),
            image_id: image_id.into(),
        }
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let imgs = vec![tiny_image("a", "p0", 0, 0.1), tiny_image("a", "p1", 1, 0.2)];
        let err = Dataset::new(imgs, SplitTag::Unsplit).unwrap_err();
        assert!(matches!(err, Error::DuplicateImageId(id) if id == "a"));
    }

    #[test]
    fn split_keeps_patients_together_for_every_seed() {
        let ds: Dataset<f64> = generate_synthetic(12, 4, 5).unwrap();
        for seed in 0..100u64 {
            let Ok((train, test)) = split_by_patient(&ds, 0.3, seed) else {
                continue; // degenerate split: caller would retry
            };
            let train_patients: BTreeSet<_> =
                train.images.iter().map(|i| i.patient_id.clone()).collect();
            let test_patients: BTreeSet<_> =
                test.images.iter().map(|i| i.patient_id.clone()).collect();
            assert!(train_patients.is_disjoint(&test_patients), "seed {seed}");
            assert_eq!(train.len() + test.len(), ds.len());
        }
    }

    #[test]
    fn split_is_a_partition() {
        let ds: Dataset<f64> = generate_synthetic(10, 3, 1).unwrap();
        let (train, test) = split_by_patient(&ds, 0.25, 0).unwrap();
        let mut ids: Vec<_> = train
            .images
            .iter()
            .chain(&test.images)
            .map(|i| i.image_id.clone())
            .collect();
        ids.sort();
        let mut expect: Vec<_> = ds.images.iter().map(|i| i.image_id.clone()).collect();
        expect.sort();
        assert_eq!(ids, expect);
    }

    #[test]
    fn split_fraction_is_roughly_respected() {
        // One image per patient so image share == patient share.
        let ds: Dataset<f64> = generate_synthetic(1000, 1, 9).unwrap();
        let (_, test) = split_by_patient(&ds, 0.12, 4).unwrap();
        let share = test.len() as f64 / ds.len() as f64;
        assert!((share - 0.12).abs() < 0.04, "share {share}");
    }
}
