use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, read_image, read_pgm16, DataError, Result, Sample};

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub heatmap: String,
    pub label: usize,
    /// Class count of the dataset; labels are checked against it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("plain struct"));
        out.push('\n');
    }
    out
}

/// Eagerly loads every sample in file order. Blank lines are skipped.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| DataError::Line { line, msg };
        let entry: ManifestEntry = serde_json::from_str(raw).map_err(|e| fail(e.to_string()))?;
        if let Some(classes) = entry.classes {
            if entry.label >= classes {
                return Err(fail(format!("label {} out of range for {classes} classes", entry.label)));
            }
        }
        let image = read_image(&base.join(&entry.image)).map_err(|e| fail(format!("{}: {e}", entry.image)))?;
        let heat_path = base.join(&entry.heatmap);
        let bytes = fs::read(&heat_path).map_err(|e| fail(format!("{}: {e}", entry.heatmap)))?;
        let heatmap = read_pgm16(&bytes).map_err(|e| fail(format!("{}: {e}", entry.heatmap)))?;
        if heatmap.width() != image.width() || heatmap.height() != image.height() {
            return Err(fail(format!(
                "heatmap {}x{} does not match image {}x{} (width x height)",
                heatmap.width(),
                heatmap.height(),
                image.width(),
                image.height()
            )));
        }
        out.push(Sample {
            image,
            label: entry.label,
            heatmap,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::Heatmap;
    use crate::datakit::{write_pgm16, write_ppm, RgbImage};

    fn entry(label: usize) -> ManifestEntry {
        ManifestEntry {
            image: "a.ppm".into(),
            heatmap: "a.pgm".into(),
            label,
            classes: Some(3),
        }
    }

    fn write_pair(dir: &Path, hw: (usize, usize)) {
        let img = RgbImage::new(32, 32, vec![9; 32 * 32 * 3]).unwrap();
        fs::write(dir.join("a.ppm"), write_ppm(&img)).unwrap();
        fs::write(dir.join("a.pgm"), write_pgm16(&Heatmap::zeros(hw.0, hw.1))).unwrap();
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn one_valid_line() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), (32, 32));
        let path = dir.path().join("m.jsonl");
        fs::write(&path, write_manifest(&[entry(2)])).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!((ds[0].heatmap.height(), ds[0].image.height()), (32, 32));
    }

    #[test]
    fn dimension_mismatch_cites_line_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), (32, 31));
        let path = dir.path().join("m.jsonl");
        fs::write(&path, write_manifest(&[entry(0)])).unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("31x32") && msg.contains("32x32"), "{msg}");
    }

    #[test]
    fn label_and_missing_file_errors_cite_line() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), (32, 32));
        let path = dir.path().join("m.jsonl");
        fs::write(&path, write_manifest(&[entry(0), entry(3)])).unwrap();
        assert!(load_dataset(&path).unwrap_err().to_string().contains("line 2"));
        let missing = ManifestEntry {
            image: "nope.ppm".into(),
            ..entry(0)
        };
        fs::write(&path, write_manifest(&[missing])).unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("nope.ppm"), "{msg}");
    }
}
