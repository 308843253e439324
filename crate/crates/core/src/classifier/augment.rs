//! Training-time augmentation: right-angle rotation, flips, and mixup.

use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    pub rotate: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub mixup: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            rotate: true,
            hflip: true,
            vflip: true,
            mixup: true,
        }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        AugmentFlags {
            rotate: false,
            hflip: false,
            vflip: false,
            mixup: false,
        }
    }
}

/// Rotates a C x H x W pixel block counterclockwise by `quarters` right
/// angles. Exact pixel permutation, no interpolation; output is W x H for
/// odd quarter counts.
pub fn rotate_quarters<S: Copy>(
    pixels: &[S],
    channels: usize,
    height: usize,
    width: usize,
    quarters: u8,
) -> (Vec<S>, usize, usize) {
    let quarters = quarters % 4;
    if quarters == 0 {
        return (pixels.to_vec(), height, width);
    }
    let (oh, ow) = if quarters % 2 == 0 {
        (height, width)
    } else {
        (width, height)
    };
    let mut out = Vec::with_capacity(pixels.len());
    let plane = height * width;
    for c in 0..channels {
        let src = &pixels[c * plane..(c + 1) * plane];
        for oy in 0..oh {
            for ox in 0..ow {
                // Source coordinates for a counterclockwise rotation.
                let (sy, sx) = match quarters {
                    1 => (ox, width - 1 - oy),
                    2 => (height - 1 - oy, width - 1 - ox),
                    3 => (height - 1 - ox, oy),
                    _ => unreachable!(),
                };
                out.push(src[sy * width + sx]);
            }
        }
    }
    (out, oh, ow)
}

fn flip_h<S: Copy>(pixels: &mut [S], channels: usize, height: usize, width: usize) {
    let plane = height * width;
    for c in 0..channels {
        for y in 0..height {
            let row = &mut pixels[c * plane + y * width..c * plane + (y + 1) * width];
            row.reverse();
        }
    }
}

fn flip_v<S: Copy>(pixels: &mut [S], channels: usize, height: usize, width: usize) {
    let plane = height * width;
    for c in 0..channels {
        for y in 0..height / 2 {
            for x in 0..width {
                pixels.swap(c * plane + y * width + x, c * plane + (height - 1 - y) * width + x);
            }
        }
    }
}

/// Applies the configured augmentations: a uniformly sampled right-angle
/// rotation, then horizontal and vertical flips with probability 1/2 each.
/// The label never changes. Draws are consumed only for enabled flags.
pub fn augment<S: Scalar>(
    image: &LabeledImage<S>,
    flags: &AugmentFlags,
    rng: &mut SplitMix64,
) -> LabeledImage<S> {
    let mut out = image.clone();
    if flags.rotate {
        let quarters = rng.next_below(4) as u8;
        let (pixels, h, w) =
            rotate_quarters(&out.pixels, out.channels, out.height, out.width, quarters);
        out.pixels = pixels;
        out.height = h;
        out.width = w;
    }
    if flags.hflip && rng.next_bool() {
        flip_h(&mut out.pixels, out.channels, out.height, out.width);
    }
    if flags.vflip && rng.next_bool() {
        flip_v(&mut out.pixels, out.channels, out.height, out.width);
    }
    out
}

/// Convex combination of two images and their one-hot labels:
/// `lambda * a + (1 - lambda) * b`. The caller draws lambda from
/// Beta(alpha, alpha).
pub fn mixup_pair<S: Scalar>(
    a: &LabeledImage<S>,
    b: &LabeledImage<S>,
    lambda: f64,
) -> Result<(Vec<S>, [S; 2])> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} outside [0,1]")));
    }
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::shape(
            "mixup_pair",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.channels, a.height, a.width, b.channels, b.height, b.width
            ),
        ));
    }
    let l = S::from_f64(lambda);
    let one_minus = S::one() - l;
    let pixels = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&pa, &pb)| l * pa + one_minus * pb)
        .collect();
    let mut label = [S::zero(); 2];
    label[a.label as usize] = label[a.label as usize] + l;
    label[b.label as usize] = label[b.label as usize] + one_minus;
    Ok((pixels, label))
}
