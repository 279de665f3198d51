//! Line-delimited JSON manifest, one clip per line.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// One audio-visual clip. Paths may be relative to the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub video_path: PathBuf,
    pub audio_path: PathBuf,
    #[serde(default)]
    pub transcript: Option<String>,
    pub fps: f64,
    /// Seconds.
    pub duration: f64,
}

impl ClipRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(format!("fps {} must be positive", self.fps));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(format!("duration {} must be positive", self.duration));
        }
        if self.video_path.as_os_str().is_empty() || self.audio_path.as_os_str().is_empty() {
            return Err("empty media path".into());
        }
        Ok(())
    }
}

/// Records plus the directory their relative paths hang off.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ClipRecord>,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ClipRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Parses manifest text. Blank lines are skipped; every record is checked
/// and ids must be unique. Errors carry the 1-based line number.
pub fn parse_manifest(text: &str) -> Result<Vec<ClipRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(line).map_err(|e| DataError::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        rec.check().map_err(|message| DataError::Manifest {
            line: line_no,
            message,
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(DataError::Manifest {
                line: line_no,
                message: format!("duplicate id `{}`", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let records = parse_manifest(&text)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest { root, records };
    for (i, r) in m.records.iter().enumerate() {
        for p in [&r.video_path, &r.audio_path] {
            let full = m.resolve(p);
            if !full.is_file() {
                return Err(DataError::Manifest {
                    line: i + 1,
                    message: format!("clip `{}`: missing file {}", r.id, full.display()),
                });
            }
        }
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| DataError::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(f, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    f.flush().map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> ClipRecord {
        ClipRecord {
            id: id.into(),
            video_path: format!("video/{id}.lsvf").into(),
            audio_path: format!("audio/{id}.wav").into(),
            transcript: Some("a b".into()),
            fps: 25.0,
            duration: 0.48,
        }
    }

    #[test]
    fn empty_text_is_empty_list() {
        assert!(parse_manifest("").unwrap().is_empty());
        assert!(parse_manifest("\n\n").unwrap().is_empty());
    }

    #[test]
    fn duplicates_and_malformed_lines_report_line_numbers() {
        let a = serde_json::to_string(&rec("a")).unwrap();
        let text = format!("{a}\n{a}\n");
        match parse_manifest(&text) {
            Err(DataError::Manifest { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
        match parse_manifest(&format!("{a}\n\n{{not json\n")) {
            Err(DataError::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let mut bad = rec("b");
        bad.fps = 0.0;
        let text = serde_json::to_string(&bad).unwrap();
        assert!(matches!(
            parse_manifest(&text),
            Err(DataError::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            rec("a"),
            rec("b"),
            ClipRecord {
                transcript: None,
                ..rec("c")
            },
        ];
        for r in &records {
            for p in [&r.video_path, &r.audio_path] {
                let full = dir.path().join(p);
                std::fs::create_dir_all(full.parent().unwrap()).unwrap();
                std::fs::write(full, b"").unwrap();
            }
        }
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &records).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records, records);
        assert_eq!(
            m.resolve(&records[0].video_path),
            dir.path().join("video/a.lsvf")
        );
    }

    #[test]
    fn missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &[rec("a")]).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("a.lsvf"), "{err}");
        let missing = dir.path().join("nope.jsonl");
        let err = load_manifest(&missing).unwrap_err().to_string();
        assert!(err.contains("nope.jsonl"), "{err}");
    }
}
