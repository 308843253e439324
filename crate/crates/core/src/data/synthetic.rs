//! Deterministic synthetic two-class image generator with patient grouping.
//!
//! Every patient gets a persistent low-frequency background texture shared by
//! all of their images; diseased images additionally contain 1-3 bright
//! elliptical lesions with soft edges. Per-pixel Gaussian noise (sigma 0.05)
//! is applied to every image so that noise statistics carry no label signal.
//! Pixels are quantized to the 1/255 grid at generation time, making the
//! in-memory dataset identical to its PGM round-trip.

use crate::data::{Dataset, LabeledImage, SplitTag};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

pub const IMAGE_SIDE: usize = 32;

const NOISE_SIGMA: f64 = 0.05;
const WAVE_COUNT: usize = 3;

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

fn patient_texture(seed: u64, patient: usize) -> Vec<f64> {
    let mut rng = SplitMix64::keyed(seed, &format!("patient{patient}"));
    let base = rng.next_range(0.41, 0.43);
    let waves: Vec<Wave> = (0..WAVE_COUNT)
        .map(|_| {
            let orient = rng.next_range(0.0, std::f64::consts::PI);
            let cycles = rng.next_range(0.6, 1.8);
            let k = std::f64::consts::TAU * cycles / IMAGE_SIDE as f64;
            Wave {
                kx: k * orient.cos(),
                ky: k * orient.sin(),
                phase: rng.next_range(0.0, std::f64::consts::TAU),
                amp: rng.next_range(0.005, 0.010),
            }
        })
        .collect();

    let mut tex = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let mut v = base;
            for w in &waves {
                v += w.amp * (w.kx * x as f64 + w.ky * y as f64 + w.phase).sin();
            }
            tex[y * IMAGE_SIDE + x] = v;
        }
    }
    tex
}

struct Lesion {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    amp: f64,
}

/// Fine internal texture shared by every blob of one class in a dataset
/// (seeded, the same at absolute pixel coordinates across images), the way
/// real tissue structures carry characteristic signatures: lesions ripple
/// at a fine wavelength, benign blobs at a much coarser one. The pattern is
/// concentric rings about the image center, so right-angle rotations and
/// flips of a training image leave it invariant: locally it reads as
/// band-pass ripple of a fixed spatial frequency in any orientation.
struct BlobTexture {
    frequency: f64,
    phase: f64,
}

impl BlobTexture {
    fn lesion(seed: u64) -> Self {
        let mut rng = SplitMix64::keyed(seed, "lesion-texture");
        BlobTexture {
            // Near pixel scale: fine ripple the first conv layer resolves.
            frequency: rng.next_range(2.7, 2.95),
            phase: rng.next_range(0.0, std::f64::consts::TAU),
        }
    }

    fn benign(seed: u64) -> Self {
        let mut rng = SplitMix64::keyed(seed, "benign-texture");
        BlobTexture {
            // Around a 10px wavelength: coarse undulation that reads as
            // pixel-scale alternation only after two pooling stages.
            frequency: rng.next_range(0.55, 0.70),
            phase: rng.next_range(0.0, std::f64::consts::TAU),
        }
    }

    /// Zero-mean modulation in [-1, 1].
    fn at(&self, x: f64, y: f64) -> f64 {
        let center = (IMAGE_SIDE as f64 - 1.0) / 2.0;
        let r = ((x - center).powi(2) + (y - center).powi(2)).sqrt();
        (self.frequency * r + self.phase).sin()
    }
}

impl Lesion {
    fn sample(rng: &mut SplitMix64, amp_lo: f64, amp_hi: f64) -> Self {
        let theta = rng.next_range(0.0, std::f64::consts::PI);
        Lesion {
            cx: rng.next_range(6.0, IMAGE_SIDE as f64 - 6.0),
            cy: rng.next_range(6.0, IMAGE_SIDE as f64 - 6.0),
            a: rng.next_range(3.0, 5.0),
            b: rng.next_range(3.0, 5.0),
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            amp: rng.next_range(amp_lo, amp_hi),
        }
    }

    /// Additive intensity at (x, y): a soft-edged elliptical envelope (full
    /// strength inside 55% of the normalized radius, smoothstep falloff to
    /// zero at the boundary) carrying a faint brightening plus the class
    /// ripple at full modulation.
    fn intensity(&self, x: f64, y: f64, texture: &BlobTexture) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        let rho = (u * u + v * v).sqrt();
        if rho >= 1.0 {
            return 0.0;
        }
        let envelope = if rho <= 0.55 {
            1.0
        } else {
            let t = (1.0 - rho) / 0.45;
            t * t * (3.0 - 2.0 * t)
        };
        self.amp * envelope * (0.3 + texture.at(x, y))
    }
}

/// Generates `n_patients * images_per_patient` single-channel 32x32 images.
///
/// Labels alternate within each patient (image `j` of patient `i` is
/// diseased iff `(i + j)` is odd), so the class counts differ by at most
/// `n_patients` and every patient with two or more images carries both
/// classes. The output is a pure function of the arguments.
pub fn generate_synthetic<S: Scalar>(
    n_patients: usize,
    images_per_patient: usize,
    seed: u64,
) -> Result<Dataset<S>> {
    if n_patients < 2 {
        return Err(Error::InvalidConfig(format!(
            "n_patients must be >= 2, got {n_patients}"
        )));
    }
    if images_per_patient < 1 {
        return Err(Error::InvalidConfig(format!(
            "images_per_patient must be >= 1, got {images_per_patient}"
        )));
    }

    let lesion_texture = BlobTexture::lesion(seed);
    let benign_texture = BlobTexture::benign(seed);
    let mut images = Vec::with_capacity(n_patients * images_per_patient);
    for p in 0..n_patients {
        let tex = patient_texture(seed, p);
        let patient_id = format!("p{p:04}");
        for j in 0..images_per_patient {
            let label = ((p + j) % 2) as u8;
            let mut rng = SplitMix64::keyed(seed, &format!("image{p}_{j}"));
            // Diseased images carry 1-3 fine-rippled lesions (weighted
            // toward one) plus a faint diffuse intensity elevation;
            // healthy images carry 1-2 benign blobs with matching size and
            // strength but the coarse benign ripple. Half of either class
            // also shows a weak trace of the opposite texture, so neither
            // ripple's mere presence settles the label: the preponderance
            // of lesion over benign evidence does.
            let mut lesions: Vec<(Lesion, &BlobTexture)> = Vec::new();
            if label == 1 {
                let u = rng.next_f64();
                let count = if u < 0.8 {
                    1
                } else if u < 0.97 {
                    2
                } else {
                    3
                };
                // Per-lesion strength eases off with count so total lesion
                // evidence stays comparable across images.
                let scale = 1.0 / (count as f64).powf(0.25);
                for _ in 0..count {
                    lesions.push((Lesion::sample(&mut rng, 0.14 * scale, 0.20 * scale), &lesion_texture));
                }
                if rng.next_f64() < 0.5 {
                    lesions.push((Lesion::sample(&mut rng, 0.06, 0.09), &benign_texture));
                }
            } else {
                let count = if rng.next_f64() < 0.7 { 1 } else { 2 };
                let scale = 1.0 / (count as f64).powf(0.25);
                for _ in 0..count {
                    let mut blob = Lesion::sample(&mut rng, 0.14 * scale, 0.20 * scale);
                    // Coarse ripple needs spatial extent to show a cycle.
                    blob.a *= 1.4;
                    blob.b *= 1.4;
                    lesions.push((blob, &benign_texture));
                }
                if rng.next_f64() < 0.5 {
                    lesions.push((Lesion::sample(&mut rng, 0.06, 0.09), &lesion_texture));
                }
            }
            let diffuse_lift = if label == 1 { 0.010 } else { 0.0 };

            let mut pixels = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let mut v = tex[y * IMAGE_SIDE + x] + diffuse_lift;
                    for (l, blob_texture) in &lesions {
                        v += l.intensity(x as f64, y as f64, blob_texture);
                    }
                    v += NOISE_SIGMA * rng.next_gaussian();
                    // Canonical 1/255 grid; PGM round-trips become exact.
                    let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                    pixels.push(S::from_f64(q));
                }
            }
            images.push(LabeledImage {
                pixels,
                channels: 1,
                height: IMAGE_SIDE,
                width: IMAGE_SIDE,
                label,
                patient_id: patient_id.clone(),
                image_id: format!("p{p:04}_i{j:02}"),
            });
        }
    }
    Dataset::new(images, SplitTag::Unsplit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a: Dataset<f64> = generate_synthetic(4, 3, 123).unwrap();
        let b: Dataset<f64> = generate_synthetic(4, 3, 123).unwrap();
        assert_eq!(a.images.len(), b.images.len());
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn labels_are_balanced_within_patient_bound() {
        let ds: Dataset<f64> = generate_synthetic(11, 5, 7).unwrap();
        let diseased = ds.images.iter().filter(|i| i.label == 1).count() as i64;
        let healthy = ds.images.len() as i64 - diseased;
        assert!((diseased - healthy).unsigned_abs() <= 11);
    }

    #[test]
    fn invalid_counts_are_rejected() {
        assert!(generate_synthetic::<f64>(1, 5, 0).is_err());
        assert!(generate_synthetic::<f64>(2, 0, 0).is_err());
    }

    /// Independent difficulty oracle: the best single threshold on the image
    /// pixel mean must separate the classes, but far from perfectly.
    #[test]
    fn pixel_mean_threshold_lands_in_difficulty_band() {
        let ds: Dataset<f64> = generate_synthetic(200, 5, 11).unwrap();
        let mut scored: Vec<(f64, u8)> = ds
            .images
            .iter()
            .map(|img| {
                let mean = img.pixels.iter().sum::<f64>() / img.pixels.len() as f64;
                (mean, img.label)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));

        let total = scored.len();
        let positives = scored.iter().filter(|(_, l)| *l == 1).count();
        // Sweep thresholds between consecutive means; predict diseased above.
        let mut best = 0.0f64;
        let mut pos_below = 0usize;
        for k in 0..=total {
            let correct = (positives - pos_below) + (k - pos_below);
            best = best.max(correct as f64 / total as f64);
            if k < total && scored[k].1 == 1 {
                pos_below += 1;
            }
        }
        assert!(
            (0.60..=0.95).contains(&best),
            "threshold-sweep accuracy {best}; regenerate parameters"
        );
    }
}
