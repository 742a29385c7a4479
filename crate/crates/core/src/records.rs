//! Versioned line-delimited record files: one header line naming the schema
//! and version, then one JSON object per line.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{CaseFindings, Diagnosis};
use crate::inference::ImageFindings;

pub const RECORD_VERSION: &str = "1.0";
/// One [`ImageFindings`] per line.
pub const FINDINGS_SCHEMA: &str = "cleftkit.findings";
/// One [`crate::fusion::DiagnosisResult`] per line.
pub const DIAGNOSES_SCHEMA: &str = "cleftkit.diagnoses";
/// One [`TruthRecord`] per line.
pub const TRUTH_SCHEMA: &str = "cleftkit.truth";

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing header line")]
    MissingHeader,
    #[error("expected schema {expected}, found {found}")]
    WrongSchema { expected: String, found: String },
    #[error("unsupported {schema} version {found} (this build reads {RECORD_VERSION})")]
    Version { schema: String, found: String },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("case ids without a match: {findings_only} only in findings {:?}, {truth_only} only in truth {:?}", .orphans_findings, .orphans_truth)]
    Orphans {
        findings_only: usize,
        truth_only: usize,
        orphans_findings: Vec<String>,
        orphans_truth: Vec<String>,
    },
    #[error("duplicate id {0}")]
    Duplicate(String),
    #[error("invalid record: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: String,
}

/// Reference label of one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub case_id: String,
    pub truth: Diagnosis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gestational_week: Option<u8>,
}

pub fn write_records<W: Write, T: Serialize>(mut w: W, schema: &str, items: &[T]) -> Result<(), RecordError> {
    let header = Header { schema: schema.into(), version: RECORD_VERSION.into() };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_error(line: usize, e: serde_json::Error) -> RecordError {
    RecordError::Parse { line, column: e.column(), message: e.to_string() }
}

/// Reads a record file of the given schema. Blank lines are ignored; a
/// different major version is refused.
pub fn read_records<R: BufRead, T: DeserializeOwned>(r: R, schema: &str) -> Result<Vec<T>, RecordError> {
    let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let (n, first) = lines.next().ok_or(RecordError::MissingHeader)?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| parse_error(n + 1, e))?;
    if header.schema != schema {
        return Err(RecordError::WrongSchema { expected: schema.into(), found: header.schema });
    }
    let major = |v: &str| v.split('.').next().map(str::to_owned);
    if major(&header.version) != major(RECORD_VERSION) {
        return Err(RecordError::Version { schema: header.schema, found: header.version });
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        out.push(serde_json::from_str(&line?).map_err(|e| parse_error(n + 1, e))?);
    }
    Ok(out)
}

/// Groups image records into cases ordered by case id, images ordered by
/// image id.
pub fn group_findings(images: Vec<ImageFindings>) -> Result<Vec<CaseFindings>, RecordError> {
    let mut by_case: BTreeMap<String, Vec<ImageFindings>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for img in images {
        img.validate().map_err(|e| RecordError::Invalid(e.to_string()))?;
        if !seen.insert(img.image_id.clone()) {
            return Err(RecordError::Duplicate(img.image_id));
        }
        by_case.entry(img.case_id.clone()).or_default().push(img);
    }
    by_case
        .into_iter()
        .map(|(case_id, mut images)| {
            images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            let week = images[0].gestational_week;
            if images.iter().any(|i| i.gestational_week != week) {
                return Err(RecordError::Invalid(format!("case {case_id} has images with different gestational weeks")));
            }
            CaseFindings::new(case_id, week, images).map_err(|e| RecordError::Invalid(e.to_string()))
        })
        .collect()
}

/// Pairs cases with their reference labels; any unmatched id on either side
/// is an error that lists them.
pub fn align_truth(cases: Vec<CaseFindings>, truth: &[TruthRecord]) -> Result<Vec<(CaseFindings, Diagnosis)>, RecordError> {
    let mut labels: BTreeMap<&str, Diagnosis> = BTreeMap::new();
    for t in truth {
        if labels.insert(&t.case_id, t.truth).is_some() {
            return Err(RecordError::Duplicate(t.case_id.clone()));
        }
    }
    let case_ids: BTreeSet<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
    let orphans_findings: Vec<String> =
        case_ids.iter().filter(|id| !labels.contains_key(*id)).map(|s| s.to_string()).collect();
    let orphans_truth: Vec<String> =
        labels.keys().filter(|id| !case_ids.contains(*id)).map(|s| s.to_string()).collect();
    if !orphans_findings.is_empty() || !orphans_truth.is_empty() {
        return Err(RecordError::Orphans {
            findings_only: orphans_findings.len(),
            truth_only: orphans_truth.len(),
            orphans_findings,
            orphans_truth,
        });
    }
    Ok(cases
        .into_iter()
        .map(|c| {
            let t = labels[c.case_id.as_str()];
            (c, t)
        })
        .collect())
}
