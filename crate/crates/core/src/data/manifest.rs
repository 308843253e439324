//! Dataset manifest CSV: `image_id,patient_id,label,path`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub image_id: String,
    pub patient_id: String,
    pub label: u8,
    pub path: String,
}

pub const MANIFEST_HEADER: &str = "image_id,patient_id,label,path";

fn check_field(name: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::MalformedManifest(format!("empty {name}")));
    }
    if value.contains(',') || value.contains('\n') || value.contains('\r') {
        return Err(Error::MalformedManifest(format!(
            "{name} {value:?} contains a separator character"
        )));
    }
    Ok(())
}

pub fn render_manifest(rows: &[ManifestRow]) -> Result<String> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for row in rows {
        check_field("image_id", &row.image_id)?;
        check_field("patient_id", &row.patient_id)?;
        check_field("path", &row.path)?;
        if row.label > 1 {
            return Err(Error::LabelOutOfRange(row.label as i64));
        }
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.image_id, row.patient_id, row.label, row.path
        ));
    }
    Ok(out)
}

pub fn save_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    fs::write(path, render_manifest(rows)?)?;
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::MalformedManifest(format!(
                "bad header {other:?}, expected {MANIFEST_HEADER:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::MalformedManifest(format!(
                "line {}: expected 4 fields, got {}",
                lineno + 2,
                parts.len()
            )));
        }
        let label: i64 = parts[2]
            .parse()
            .map_err(|_| Error::MalformedManifest(format!("line {}: bad label {:?}", lineno + 2, parts[2])))?;
        if !(0..=1).contains(&label) {
            return Err(Error::LabelOutOfRange(label));
        }
        if !seen.insert(parts[0].to_string()) {
            return Err(Error::DuplicateImageId(parts[0].to_string()));
        }
        check_field("image_id", parts[0])?;
        check_field("patient_id", parts[1])?;
        check_field("path", parts[3])?;
        rows.push(ManifestRow {
            image_id: parts[0].to_string(),
            patient_id: parts[1].to_string(),
            label: label as u8,
            path: parts[3].to_string(),
        });
    }
    Ok(rows)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, label: u8) -> ManifestRow {
        ManifestRow {
            image_id: id.into(),
            patient_id: "p0".into(),
            label,
            path: format!("images/{id}.pgm"),
        }
    }

    #[test]
    fn header_only_is_an_empty_dataset() {
        let rows = parse_manifest("image_id,patient_id,label,path\n").unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn duplicate_image_id_is_rejected_by_name() {
        let text = render_manifest(&[row("a", 0)]).unwrap() + "a,p1,1,images/a2.pgm\n";
        let err = parse_manifest(&text).unwrap_err();
        assert!(matches!(err, Error::DuplicateImageId(id) if id == "a"));
    }

    #[test]
    fn label_outside_binary_range_is_rejected() {
        let text = "image_id,patient_id,label,path\na,p0,2,images/a.pgm\n";
        assert!(matches!(
            parse_manifest(text).unwrap_err(),
            Error::LabelOutOfRange(2)
        ));
    }

    #[test]
    fn roundtrip_preserves_rows_and_order() {
        let rows = vec![row("b", 1), row("a", 0), row("c", 1)];
        let text = render_manifest(&rows).unwrap();
        assert_eq!(parse_manifest(&text).unwrap(), rows);
    }
}
