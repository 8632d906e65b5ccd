//! Line-delimited JSON cohort manifests.
//!
//! Each line is one [`SessionRecord`]. `feature_path` is resolved relative to
//! the directory holding the manifest unless it is absolute.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::read_feature_header;
use crate::error::{Error, RecordIssue, Result};

pub const NUM_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSegment {
    pub phoneme: String,
    pub start_frame: usize,
    pub end_frame_exclusive: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnsetType {
    Bulbar,
    Limb,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub patient_id: String,
    pub utterance_id: String,
    pub date_days: i64,
    pub score: i64,
    pub feature_path: String,
    pub alignment: Vec<AlignmentSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset_type: Option<OnsetType>,
}

impl SessionRecord {
    /// Score as a class index. Only meaningful after validation.
    pub fn class(&self) -> usize {
        self.score as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecords {
    pub patient_id: String,
    /// Sorted by `(date_days, utterance_id)`.
    pub records: Vec<SessionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortManifest {
    /// Directory against which relative feature paths resolve.
    pub root: PathBuf,
    /// Sorted by patient id.
    pub patients: Vec<PatientRecords>,
    pub phoneme_vocab: Vec<String>,
}

/// ARPABET label: uppercase letters, optionally followed by one stress digit.
pub fn is_arpabet_label(label: &str) -> bool {
    let body = label.strip_suffix(['0', '1', '2']).unwrap_or(label);
    !body.is_empty() && body.bytes().all(|b| b.is_ascii_uppercase())
}

/// Vowels carry a stress digit in ARPABET.
pub fn is_vowel(label: &str) -> bool {
    label.ends_with(['0', '1', '2'])
}

fn record_issue(line: usize, rec: Option<&SessionRecord>, message: impl Into<String>) -> RecordIssue {
    RecordIssue {
        line,
        patient_id: rec.map(|r| r.patient_id.clone()),
        utterance_id: rec.map(|r| r.utterance_id.clone()),
        message: message.into(),
    }
}

/// Checks that need no file access.
fn structural_issues(line: usize, rec: &SessionRecord) -> Vec<RecordIssue> {
    let mut out = Vec::new();
    let mut push = |m: String| out.push(record_issue(line, Some(rec), m));
    if rec.patient_id.is_empty() {
        push("empty patient_id".into());
    }
    if rec.utterance_id.is_empty() {
        push("empty utterance_id".into());
    }
    if !(0..NUM_CLASSES as i64).contains(&rec.score) {
        push(format!("score {} outside 0-4", rec.score));
    }
    if rec.date_days < 0 {
        push(format!("negative date_days {}", rec.date_days));
    }
    let mut prev_end = 0;
    for (i, seg) in rec.alignment.iter().enumerate() {
        if !is_arpabet_label(&seg.phoneme) {
            push(format!("segment {i}: '{}' is not an ARPABET label", seg.phoneme));
        }
        if seg.start_frame >= seg.end_frame_exclusive {
            push(format!(
                "segment {i} ({}) is empty: [{}, {})",
                seg.phoneme, seg.start_frame, seg.end_frame_exclusive
            ));
        }
        if seg.start_frame < prev_end {
            push(format!(
                "segment {i} ({}) starts at frame {} before the previous segment ends at {prev_end}",
                seg.phoneme, seg.start_frame
            ));
        }
        prev_end = prev_end.max(seg.end_frame_exclusive);
    }
    out
}

impl CohortManifest {
    /// Groups, sorts and structurally validates records. Feature files are
    /// not touched; see [`load_manifest`] for the full check.
    pub fn from_records(root: impl Into<PathBuf>, records: Vec<SessionRecord>) -> Result<Self> {
        let numbered: Vec<(usize, SessionRecord)> = records.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect();
        let issues = validate_structure(&numbered);
        if !issues.is_empty() {
            return Err(Error::Validation(issues));
        }
        Ok(Self::assemble(root.into(), numbered.into_iter().map(|(_, r)| r)))
    }

    fn assemble(root: PathBuf, records: impl IntoIterator<Item = SessionRecord>) -> Self {
        let mut groups: BTreeMap<String, Vec<SessionRecord>> = BTreeMap::new();
        let mut vocab = BTreeSet::new();
        for rec in records {
            vocab.extend(rec.alignment.iter().map(|s| s.phoneme.clone()));
            groups.entry(rec.patient_id.clone()).or_default().push(rec);
        }
        let patients = groups
            .into_iter()
            .map(|(patient_id, mut records)| {
                records.sort_by(|a, b| (a.date_days, &a.utterance_id).cmp(&(b.date_days, &b.utterance_id)));
                PatientRecords { patient_id, records }
            })
            .collect();
        CohortManifest {
            root,
            patients,
            phoneme_vocab: vocab.into_iter().collect(),
        }
    }

    pub fn num_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn num_records(&self) -> usize {
        self.patients.iter().map(|p| p.records.len()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &SessionRecord> {
        self.patients.iter().flat_map(|p| p.records.iter())
    }

    pub fn patient_ids(&self) -> Vec<&str> {
        self.patients.iter().map(|p| p.patient_id.as_str()).collect()
    }

    pub fn feature_path(&self, rec: &SessionRecord) -> PathBuf {
        let p = Path::new(&rec.feature_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Patients whose ids are in `ids`, keeping the vocabulary of the parent.
    pub fn subset(&self, ids: &HashSet<&str>) -> CohortManifest {
        CohortManifest {
            root: self.root.clone(),
            patients: self
                .patients
                .iter()
                .filter(|p| ids.contains(p.patient_id.as_str()))
                .cloned()
                .collect(),
            phoneme_vocab: self.phoneme_vocab.clone(),
        }
    }

    /// Serializes one record per line in canonical (patient, date) order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.records() {
            out.push_str(&serde_json::to_string(rec).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// Writes the manifest. Relative feature paths are kept only when the
    /// destination directory is this manifest's root; otherwise they become
    /// absolute so the new file still resolves.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dest_dir = path.parent().unwrap_or(Path::new(""));
        let same_root = dest_dir == self.root
            || matches!((dest_dir.canonicalize(), self.root.canonicalize()), (Ok(a), Ok(b)) if a == b);
        let text = if same_root {
            self.to_jsonl()
        } else {
            let mut copy = self.clone();
            for p in &mut copy.patients {
                for r in &mut p.records {
                    let abs = self.feature_path(r);
                    r.feature_path = abs.canonicalize().unwrap_or(abs).to_string_lossy().into_owned();
                }
            }
            copy.to_jsonl()
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn validate_structure(records: &[(usize, SessionRecord)]) -> Vec<RecordIssue> {
    let mut issues = Vec::new();
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    for (line, rec) in records {
        issues.extend(structural_issues(*line, rec));
        if !seen.insert((&rec.patient_id, &rec.utterance_id)) {
            issues.push(record_issue(*line, Some(rec), "duplicate (patient_id, utterance_id)"));
        }
    }
    issues
}

/// Parses and fully validates a manifest, including that every feature file
/// exists, shares one feature dimension, and covers its alignment. Every
/// offending record is reported, not just the first.
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, root)
}

pub fn parse_manifest(text: &str, root: PathBuf) -> Result<CohortManifest> {
    let mut issues = Vec::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SessionRecord>(line) {
            Ok(rec) => records.push((i + 1, rec)),
            Err(e) => issues.push(record_issue(i + 1, None, format!("unparseable record: {e}"))),
        }
    }
    if records.is_empty() && issues.is_empty() {
        return Err(Error::Data("manifest holds no records".into()));
    }
    issues.extend(validate_structure(&records));

    let mut dims: BTreeMap<usize, usize> = BTreeMap::new();
    let mut headers = Vec::with_capacity(records.len());
    for (line, rec) in &records {
        let p = Path::new(&rec.feature_path);
        let full = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        match read_feature_header(&full) {
            Ok((frames, dim)) => {
                *dims.entry(dim).or_default() += 1;
                if let Some(seg) = rec.alignment.iter().find(|s| s.end_frame_exclusive > frames) {
                    issues.push(record_issue(
                        *line,
                        Some(rec),
                        format!(
                            "alignment segment {} ends at frame {} beyond the {frames} frames of {}",
                            seg.phoneme,
                            seg.end_frame_exclusive,
                            full.display()
                        ),
                    ));
                }
                if frames == 0 {
                    issues.push(record_issue(*line, Some(rec), "feature file has no frames"));
                }
                headers.push(Some(dim));
            }
            Err(Error::Io { .. }) => {
                issues.push(record_issue(*line, Some(rec), format!("dangling feature_path {}", full.display())));
                headers.push(None);
            }
            Err(e) => {
                issues.push(record_issue(*line, Some(rec), e.to_string()));
                headers.push(None);
            }
        }
    }
    if dims.len() > 1 {
        // Report records that disagree with the majority dimension.
        let majority = dims.iter().max_by_key(|(d, n)| (**n, std::cmp::Reverse(**d))).map(|(d, _)| *d);
        for ((line, rec), dim) in records.iter().zip(&headers) {
            if let (Some(d), Some(m)) = (dim, majority) {
                if *d != m {
                    issues.push(record_issue(*line, Some(rec), format!("feature dim {d} differs from cohort dim {m}")));
                }
            }
        }
    }
    if !issues.is_empty() {
        issues.sort_by_key(|i| i.line);
        return Err(Error::Validation(issues));
    }
    Ok(CohortManifest::assemble(root, records.into_iter().map(|(_, r)| r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: &str, u: &str, date: i64, score: i64) -> SessionRecord {
        SessionRecord {
            patient_id: p.into(),
            utterance_id: u.into(),
            date_days: date,
            score,
            feature_path: format!("{u}.alstf"),
            alignment: vec![],
            onset_type: None,
        }
    }

    #[test]
    fn arpabet_labels() {
        assert!(is_arpabet_label("AY1"));
        assert!(is_arpabet_label("Y"));
        assert!(!is_arpabet_label("ay1"));
        assert!(!is_arpabet_label("1"));
        assert!(!is_arpabet_label("AH0|UW0"));
        assert!(is_vowel("UW0") && !is_vowel("D"));
    }

    #[test]
    fn grouping_is_order_insensitive() {
        let a = vec![rec("b", "u3", 9, 2), rec("a", "u1", 30, 3), rec("a", "u2", 5, 4)];
        let mut b = a.clone();
        b.reverse();
        let ma = CohortManifest::from_records("", a).unwrap();
        let mb = CohortManifest::from_records("", b).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.patient_ids(), vec!["a", "b"]);
        let dates: Vec<i64> = ma.patients[0].records.iter().map(|r| r.date_days).collect();
        assert_eq!(dates, vec![5, 30]);
    }

    #[test]
    fn every_bad_record_is_listed() {
        let mut bad_seg = rec("a", "u2", 1, 1);
        bad_seg.alignment = vec![
            AlignmentSegment { phoneme: "AY1".into(), start_frame: 0, end_frame_exclusive: 4 },
            AlignmentSegment { phoneme: "OW1".into(), start_frame: 3, end_frame_exclusive: 6 },
        ];
        let records = vec![rec("a", "u1", 0, 5), bad_seg, rec("a", "u1", -2, 0)];
        let Err(Error::Validation(issues)) = CohortManifest::from_records("", records) else {
            panic!("expected validation error");
        };
        let text: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
        assert!(text.iter().any(|t| t.contains("u1") && t.contains("score 5")));
        assert!(text.iter().any(|t| t.contains("u2") && t.contains("before the previous segment")));
        assert!(text.iter().any(|t| t.contains("negative date_days")));
        assert!(text.iter().any(|t| t.contains("duplicate")));
    }

    #[test]
    fn json_round_trip() {
        let mut r = rec("p", "u", 3, 4);
        r.onset_type = Some(OnsetType::Bulbar);
        let m = CohortManifest::from_records("", vec![r, rec("q", "v", 0, 0)]).unwrap();
        let back = parse_records(&m.to_jsonl());
        assert_eq!(back, m.records().cloned().collect::<Vec<_>>());
    }

    fn parse_records(text: &str) -> Vec<SessionRecord> {
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let line = r#"{"patient_id":"p","utterance_id":"u","date_days":0,"score":1,"feature_path":"f","alignment":[],"scroe":2}"#;
        let Err(Error::Validation(issues)) = parse_manifest(line, PathBuf::new()) else {
            panic!("expected validation error");
        };
        assert!(issues[0].message.contains("scroe"));
    }
}
