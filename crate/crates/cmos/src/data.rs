//! Domain data: polar segment sequences and per-subject studies.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::manifest::{self, ManifestEntry};
use crate::io::cmot;
use crate::tensor::{Scalar, Tensor};

/// Radial sample count of a polar segment tensor (half the 160px image size).
pub const SEGMENT_ROWS: usize = 80;
/// Angular sample count, identical for every segment.
pub const SEGMENT_COLS: usize = 60;
/// AHA segments per subject (segment 17, the apex, is not used).
pub const SEGMENTS_PER_SUBJECT: usize = 16;
/// Motion classes: normal, hypokinetic, akinetic, dyskinetic.
pub const NUM_CLASSES: usize = 4;

/// Short-axis slice level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Basal,
    Mid,
    Apical,
}

impl Level {
    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Basal => "basal",
            Level::Mid => "mid",
            Level::Apical => "apical",
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        match s {
            "basal" => Ok(Level::Basal),
            "mid" => Ok(Level::Mid),
            "apical" => Ok(Level::Apical),
            other => Err(Error::InvalidArgument(format!("unknown level `{other}`"))),
        }
    }

    /// Angular sectors this level contributes (6 of 60 deg, or 4 of 90 deg).
    pub fn sector_count(&self) -> usize {
        match self {
            Level::Apical => 4,
            _ => 6,
        }
    }
}

/// Level owning a 1-based AHA segment index: 1-6 basal, 7-12 mid, 13-16 apical.
pub fn level_for_segment(index: u8) -> Result<Level> {
    match index {
        1..=6 => Ok(Level::Basal),
        7..=12 => Ok(Level::Mid),
        13..=16 => Ok(Level::Apical),
        other => Err(Error::InvalidArgument(format!(
            "AHA segment index must be 1..=16, got {other}"
        ))),
    }
}

/// One polar-resampled myocardial segment cine with identity and label.
#[derive(Debug, Clone)]
pub struct SegmentSequence {
    pub data: Tensor<f32>,
    pub subject_id: String,
    pub segment_index: u8,
    pub level: Level,
    pub score: Option<u8>,
}

impl SegmentSequence {
    pub fn new(
        data: Tensor<f32>,
        subject_id: impl Into<String>,
        segment_index: u8,
        score: Option<u8>,
    ) -> Result<SegmentSequence> {
        let level = level_for_segment(segment_index)?;
        let seq = SegmentSequence {
            data,
            subject_id: subject_id.into(),
            segment_index,
            level,
            score,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.shape() {
            [SEGMENT_ROWS, SEGMENT_COLS, t] if *t >= 2 => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "segment tensor must be [{SEGMENT_ROWS},{SEGMENT_COLS},t>=2], got {other:?}"
                )))
            }
        }
        if let Some(s) = self.score {
            if s as usize >= NUM_CLASSES {
                return Err(Error::InvalidArgument(format!(
                    "segment score must be 0..=3, got {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.data.shape()[2]
    }
}

/// The 16 segment sequences of one subject, ordered by AHA index.
#[derive(Debug, Clone)]
pub struct SubjectStudy {
    pub subject_id: String,
    pub segments: Vec<SegmentSequence>,
    pub frame_count: usize,
}

impl SubjectStudy {
    pub fn new(subject_id: impl Into<String>, mut segments: Vec<SegmentSequence>) -> Result<SubjectStudy> {
        let subject_id = subject_id.into();
        if segments.len() != SEGMENTS_PER_SUBJECT {
            return Err(Error::InvalidArgument(format!(
                "subject {subject_id} has {} segments, expected {SEGMENTS_PER_SUBJECT}",
                segments.len()
            )));
        }
        segments.sort_by_key(|s| s.segment_index);
        for (expect, seg) in (1..=SEGMENTS_PER_SUBJECT as u8).zip(&segments) {
            if seg.segment_index != expect {
                return Err(Error::InvalidArgument(format!(
                    "subject {subject_id}: segment indices must be a permutation of 1..=16 \
                     (missing or duplicate index {expect})"
                )));
            }
            seg.validate()?;
        }
        let frame_count = segments[0].frame_count();
        if segments.iter().any(|s| s.frame_count() != frame_count) {
            return Err(Error::InvalidArgument(format!(
                "subject {subject_id}: frame count mismatch across segments"
            )));
        }
        Ok(SubjectStudy {
            subject_id,
            segments,
            frame_count,
        })
    }

    /// Stacks the 16 segments into a training batch `[16, 80, 60, t]`.
    pub fn batch<T: Scalar>(&self) -> Tensor<T> {
        let t = self.frame_count;
        let stride = SEGMENT_ROWS * SEGMENT_COLS * t;
        let mut data = Vec::with_capacity(SEGMENTS_PER_SUBJECT * stride);
        for seg in &self.segments {
            data.extend(seg.data.data().iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(vec![SEGMENTS_PER_SUBJECT, SEGMENT_ROWS, SEGMENT_COLS, t], data)
            .expect("batch shape")
    }

    /// Class labels in segment order; `None` unless every segment is scored.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.segments
            .iter()
            .map(|s| s.score.map(|v| v as usize))
            .collect()
    }
}

/// Writes subjects as one CMOT1 file per segment plus a manifest.
pub fn save_dataset(dir: &Path, subjects: &[SubjectStudy]) -> Result<()> {
    let tensor_dir = dir.join("tensors");
    std::fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    let mut entries = Vec::new();
    for subject in subjects {
        for seg in &subject.segments {
            let rel = format!("tensors/{}_seg{:02}.cmot", subject.subject_id, seg.segment_index);
            cmot::write_file(&dir.join(&rel), &seg.data)?;
            entries.push(ManifestEntry {
                subject_id: subject.subject_id.clone(),
                segment_index: seg.segment_index,
                level: seg.level,
                frame_count: seg.frame_count(),
                label: seg.score,
                path: rel.into(),
            });
        }
    }
    manifest::write(&dir.join("manifest.tsv"), &entries)
}

/// Loads a dataset back from its manifest; tensor paths resolve relative to
/// the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SubjectStudy>> {
    let entries = manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut by_subject: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
    for e in entries {
        by_subject.entry(e.subject_id.clone()).or_default().push(e);
    }
    let mut subjects = Vec::with_capacity(by_subject.len());
    for (subject_id, entries) in by_subject {
        let mut segments = Vec::with_capacity(entries.len());
        for e in entries {
            let data: Tensor<f32> = cmot::read_file(&base.join(&e.path))?;
            segments.push(SegmentSequence::new(
                data,
                &subject_id,
                e.segment_index,
                e.label,
            )?);
        }
        subjects.push(SubjectStudy::new(subject_id, segments)?);
    }
    Ok(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(subject: &str, index: u8, t: usize) -> SegmentSequence {
        SegmentSequence::new(
            Tensor::zeros(vec![SEGMENT_ROWS, SEGMENT_COLS, t]),
            subject,
            index,
            Some(0),
        )
        .unwrap()
    }

    #[test]
    fn study_requires_full_permutation() {
        let mut segs: Vec<_> = (1..=16).map(|i| seg("s1", i, 20)).collect();
        assert!(SubjectStudy::new("s1", segs.clone()).is_ok());
        segs[3].segment_index = 3; // duplicate
        let err = SubjectStudy::new("s1", segs).unwrap_err();
        assert!(err.to_string().contains("permutation"));
    }

    #[test]
    fn study_rejects_mixed_frame_counts() {
        let mut segs: Vec<_> = (1..=15).map(|i| seg("s1", i, 20)).collect();
        segs.push(seg("s1", 16, 25));
        let err = SubjectStudy::new("s1", segs).unwrap_err();
        assert!(err.to_string().contains("frame count mismatch"));
    }

    #[test]
    fn level_assignment_follows_aha_ranges() {
        assert_eq!(level_for_segment(1).unwrap(), Level::Basal);
        assert_eq!(level_for_segment(6).unwrap(), Level::Basal);
        assert_eq!(level_for_segment(7).unwrap(), Level::Mid);
        assert_eq!(level_for_segment(12).unwrap(), Level::Mid);
        assert_eq!(level_for_segment(13).unwrap(), Level::Apical);
        assert_eq!(level_for_segment(16).unwrap(), Level::Apical);
        assert!(level_for_segment(0).is_err());
        assert!(level_for_segment(17).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let segs: Vec<_> = (1..=16).map(|i| seg("s7", i, 4)).collect();
        let study = SubjectStudy::new("s7", segs).unwrap();
        save_dataset(dir.path(), &[study]).unwrap();
        let back = load_dataset(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].segments.len(), 16);
        assert_eq!(back[0].frame_count, 4);
    }
}
