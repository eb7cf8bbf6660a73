//! JSON-lines manifests: one `{id, s1_path, s2_path, labels, lat, lon}`
//! record per line. Relative patch paths resolve against the manifest's
//! directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, MultiModalSample, Patch, Result, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub s1_path: PathBuf,
    pub s2_path: PathBuf,
    pub labels: Vec<String>,
    pub lat: f64,
    pub lon: f64,
}

/// Co-registration identity: latitude and longitude at 5 decimals.
pub fn geokey(lat: f64, lon: f64) -> String {
    format!("{lat:.5},{lon:.5}")
}

/// Reads a manifest. Patches are not read until first accessed.
pub fn load_manifest(path: &Path, vocabulary: &Vocabulary) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    let mut unknown = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| DataError::Manifest {
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        let labels = match vocabulary.encode(&rec.labels) {
            Ok(l) => l,
            Err(DataError::UnknownClasses(names)) => {
                for n in names {
                    if !unknown.contains(&n) {
                        unknown.push(n);
                    }
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let resolve = |p: &Path| -> Result<PathBuf> {
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            if full.is_file() {
                Ok(full)
            } else {
                Err(DataError::UnresolvablePath {
                    id: rec.id.clone(),
                    path: full,
                })
            }
        };
        let s1 = resolve(&rec.s1_path)?;
        let s2 = resolve(&rec.s2_path)?;
        samples.push(MultiModalSample {
            id: rec.id.clone(),
            s1: Patch::lazy(s1),
            s2: Patch::lazy(s2),
            labels,
            geokey: geokey(rec.lat, rec.lon),
        });
    }
    if !unknown.is_empty() {
        return Err(DataError::UnknownClasses(unknown));
    }
    Dataset::new(samples, vocabulary.clone())
}

/// Serializes records as JSON lines.
pub fn write_manifest(out: &mut impl Write, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r).map_err(|e| DataError::Validation(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_patch;
    use ndarray::Array3;

    fn record(id: &str, labels: &[&str]) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            s1_path: format!("{id}_s1.bin").into(),
            s2_path: format!("{id}_s2.bin").into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            lat: 52.123456789,
            lon: -1.5,
        }
    }

    fn write_records(dir: &Path, recs: &[ManifestRecord], with_patches: bool) -> PathBuf {
        if with_patches {
            for r in recs {
                write_patch(&dir.join(&r.s1_path), &Array3::zeros((2, 4, 4))).unwrap();
                write_patch(&dir.join(&r.s2_path), &Array3::ones((4, 4, 4))).unwrap();
            }
        }
        let path = dir.join("manifest.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        write_manifest(&mut f, recs).unwrap();
        path
    }

    #[test]
    fn empty_manifest_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_records(dir.path(), &[], false);
        let ds = load_manifest(&path, &Vocabulary::bigearthnet()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn loads_lazily_with_geokey() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_records(dir.path(), &[record("a", &["Arable land", "Inland waters"])], true);
        let ds = load_manifest(&path, &Vocabulary::bigearthnet()).unwrap();
        let s = &ds.samples[0];
        assert_eq!(s.geokey, "52.12346,-1.50000");
        assert_eq!(s.labels.iter().filter(|b| **b == 1).count(), 2);
        assert!(!s.s2.is_loaded());
        assert_eq!(s.s2.get().unwrap().dim(), (4, 4, 4));
        assert!(s.s2.is_loaded());
    }

    #[test]
    fn unknown_class_lists_offenders() {
        let dir = tempfile::tempdir().unwrap();
        let recs = [record("a", &["Arable land", "Lava"]), record("b", &["Ice"])];
        let path = write_records(dir.path(), &recs, true);
        match load_manifest(&path, &Vocabulary::bigearthnet()) {
            Err(DataError::UnknownClasses(n)) => assert_eq!(n, vec!["Lava", "Ice"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_patch_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_records(dir.path(), &[record("ghost", &["Pastures"])], false);
        match load_manifest(&path, &Vocabulary::bigearthnet()) {
            Err(DataError::UnresolvablePath { id, .. }) => assert_eq!(id, "ghost"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
