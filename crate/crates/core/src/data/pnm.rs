//! Binary PGM (P5) and PPM (P6) encoding, maxval 255.
//!
//! The encoded bytes are the canonical form of an image: pixel `p` is stored
//! as `round(p * 255)` and loads back as `v / 255`, so a stored image lives
//! on the 1/255 grid and re-encoding a loaded file is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::data::LabeledImage;
use crate::scalar::Scalar;

/// Encodes to P5 (1 channel) or P6 (3 channels).
pub fn encode_image<S: Scalar>(img: &LabeledImage<S>) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::MalformedImage(format!(
                "{c} channels not representable as PGM/PPM"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.height * img.width;
    for idx in 0..plane {
        for c in 0..img.channels {
            let p = img.pixels[c * plane + idx].as_f64();
            out.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Decodes P5/P6 bytes; label and ids come from the manifest, not the file.
pub fn decode_image<S: Scalar>(
    bytes: &[u8],
    label: u8,
    patient_id: &str,
    image_id: &str,
) -> Result<LabeledImage<S>> {
    let mut pos = 0usize;

    fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::MalformedImage("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    }

    let magic = token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::MalformedImage(format!(
                "unsupported magic {other:?} (expected P5 or P6)"
            )))
        }
    };
    let parse = |t: String| -> Result<usize> {
        t.parse()
            .map_err(|_| Error::MalformedImage(format!("bad header token {t:?}")))
    };
    let width = parse(token(bytes, &mut pos)?)?;
    let height = parse(token(bytes, &mut pos)?)?;
    let maxval = parse(token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::MalformedImage(format!(
            "unsupported maxval {maxval} (expected 255)"
        )));
    }
    // Exactly one whitespace byte separates the maxval from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedImage("missing separator after maxval".into()));
    }
    pos += 1;

    let plane = width * height;
    let expected = plane * channels;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::MalformedImage(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }

    // Interleaved on disk, channel-major in memory.
    let mut pixels = vec![S::zero(); expected];
    for idx in 0..plane {
        for c in 0..channels {
            let v = payload[idx * channels + c] as f64 / 255.0;
            pixels[c * plane + idx] = S::from_f64(v);
        }
    }
    let img = LabeledImage {
        pixels,
        channels,
        height,
        width,
        label,
        patient_id: patient_id.to_string(),
        image_id: image_id.to_string(),
    };
    img.validate()?;
    Ok(img)
}

pub fn save_image<S: Scalar>(path: &Path, img: &LabeledImage<S>) -> Result<()> {
    fs::write(path, encode_image(img)?)?;
    Ok(())
}

pub fn load_image<S: Scalar>(
    path: &Path,
    label: u8,
    patient_id: &str,
    image_id: &str,
) -> Result<LabeledImage<S>> {
    let bytes = fs::read(path)?;
    decode_image(&bytes, label, patient_id, image_id)
}
