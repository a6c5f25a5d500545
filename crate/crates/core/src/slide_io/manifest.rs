use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, SlideError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassHint {
    Tumor,
    Artifact,
}

impl fmt::Display for ClassHint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassHint::Tumor => "tumor",
            ClassHint::Artifact => "artifact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

/// One slide crop. Paths are absolute after loading.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub id: String,
    pub patient_id: String,
    pub image_ref: PathBuf,
    pub mask_ref: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub class_hint: ClassHint,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    patient_id: String,
    image: String,
    #[serde(default)]
    mask: Option<String>,
    class_hint: ClassHint,
}

/// Reads a JSON-lines manifest. Blank lines are ignored; image sizes are
/// read from the image headers.
pub fn load_manifest(path: &Path) -> Result<Vec<SlideRecord>> {
    let file = std::fs::File::open(path).map_err(|e| SlideError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut missing = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SlideError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| SlideError::ManifestLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(parsed.id.clone()) {
            return Err(SlideError::DuplicateId(parsed.id));
        }
        let image_ref = base.join(&parsed.image);
        let mask_ref = parsed.mask.as_ref().map(|m| base.join(m));
        for p in std::iter::once(&image_ref).chain(mask_ref.as_ref()) {
            if !p.is_file() {
                missing.push(p.clone());
            }
        }
        records.push((parsed, image_ref, mask_ref));
    }
    if !missing.is_empty() {
        return Err(SlideError::MissingFiles(missing));
    }
    records
        .into_iter()
        .map(|(m, image_ref, mask_ref)| {
            let (w, h) = image::image_dimensions(&image_ref)
                .map_err(|e| SlideError::Decode { path: image_ref.clone(), message: e.to_string() })?;
            if let Some(mp) = &mask_ref {
                let dims = image::image_dimensions(mp)
                    .map_err(|e| SlideError::Decode { path: mp.clone(), message: e.to_string() })?;
                if dims != (w, h) {
                    return Err(SlideError::Dims(format!(
                        "mask {} is {}x{}, image is {w}x{h}",
                        mp.display(),
                        dims.0,
                        dims.1
                    )));
                }
            }
            Ok(SlideRecord {
                id: m.id,
                patient_id: m.patient_id,
                image_ref,
                mask_ref,
                width: w as usize,
                height: h as usize,
                class_hint: m.class_hint,
                split: Split::Unassigned,
            })
        })
        .collect()
}

/// Writes records as JSON lines with paths relative to the manifest
/// directory when possible.
pub fn write_manifest(path: &Path, records: &[SlideRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| -> String { p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/") };
    let mut out = Vec::new();
    for r in records {
        let line = ManifestLine {
            id: r.id.clone(),
            patient_id: r.patient_id.clone(),
            image: rel(&r.image_ref),
            mask: r.mask_ref.as_deref().map(rel),
            class_hint: r.class_hint,
        };
        serde_json::to_writer(&mut out, &line).expect("plain struct serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| SlideError::io(path, e))?;
    f.write_all(&out).map_err(|e| SlideError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_png(dir: &Path, name: &str) {
        image::RgbImage::new(4, 2).save(dir.join(name)).unwrap();
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn reads_records_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(dir.path(), "a.png");
        touch_png(dir.path(), "b.png");
        let p = dir.path().join("m.jsonl");
        std::fs::write(
            &p,
            concat!(
                r#"{"id":"a","patient_id":"p0","image":"a.png","mask":"b.png","class_hint":"tumor"}"#,
                "\n",
                r#"{"id":"b","patient_id":"p0","image":"b.png","class_hint":"artifact"}"#,
                "\n"
            ),
        )
        .unwrap();
        let recs = load_manifest(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[0].width, recs[0].height), (4, 2));
        assert_eq!(recs[1].mask_ref, None);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(dir.path(), "a.png");
        let p = dir.path().join("m.jsonl");
        let line = r#"{"id":"a","patient_id":"p0","image":"a.png","class_hint":"tumor"}"#;
        std::fs::write(&p, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(load_manifest(&p), Err(SlideError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "\n{not json}\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(SlideError::ManifestLine { line: 2, .. })));
    }

    #[test]
    fn missing_images_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, r#"{"id":"a","patient_id":"p0","image":"nope.png","mask":"gone.png","class_hint":"tumor"}"#)
            .unwrap();
        match load_manifest(&p) {
            Err(SlideError::MissingFiles(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
