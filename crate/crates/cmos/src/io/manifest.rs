//! Line-oriented dataset manifest.
//!
//! One tab-separated line per segment tensor:
//! `subject_id  segment_index  level  frame_count  label  path`
//! with `-` for a missing label. Paths are relative to the manifest file.

use std::path::{Path, PathBuf};

use crate::data::Level;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub segment_index: u8,
    pub level: Level,
    pub frame_count: usize,
    pub label: Option<u8>,
    pub path: PathBuf,
}

pub fn write(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let label = match e.label {
            Some(l) => l.to_string(),
            None => "-".to_string(),
        };
        let p = e.path.to_string_lossy();
        if p.contains('\t') || e.subject_id.contains('\t') {
            return Err(Error::InvalidArgument(
                "manifest fields must not contain tabs".into(),
            ));
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.subject_id,
            e.segment_index,
            e.level.as_str(),
            e.frame_count,
            label,
            p
        ));
    }
    super::write_atomic(path, out.as_bytes())
}

pub fn read(path: &Path) -> Result<Vec<ManifestEntry>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!(
                "{}:{}: expected 6 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            Error::Format(format!(
                "{}:{}: bad {what} `{}`",
                path.display(),
                lineno + 1,
                line
            ))
        };
        let segment_index: u8 = fields[1].parse().map_err(|_| parse_err("segment index"))?;
        let level = Level::parse(fields[2])?;
        let frame_count: usize = fields[3].parse().map_err(|_| parse_err("frame count"))?;
        let label = match fields[4] {
            "-" => None,
            s => {
                let v: u8 = s.parse().map_err(|_| parse_err("label"))?;
                if v > 3 {
                    return Err(parse_err("label"));
                }
                Some(v)
            }
        };
        entries.push(ManifestEntry {
            subject_id: fields[0].to_string(),
            segment_index,
            level,
            frame_count,
            label,
            path: PathBuf::from(fields[5]),
        });
    }
    Ok(entries)
}
