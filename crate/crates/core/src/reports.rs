//! Weak labelling from radiology report text.
//!
//! Reports are split into sections at `FINDINGS:` / `IMPRESSION:` headings
//! (case-insensitive; any text before the first heading becomes a `PREAMBLE`
//! section). A keyword screen then scans only the findings and impression
//! sections — the clinical narrative — for syndrome terms. Screening is a
//! recall-oriented triage step: flagged reports become *uncertain* (they need
//! adjudication before being trusted as positives), unflagged reports become
//! *negative*. A manual-overrides table models the adjudication result and
//! always wins over the screen.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cohort::Label;

/// Keywords used by the default screen.
pub const DEFAULT_KEYWORDS: [&str; 3] = ["dissection", "hematoma", "ulcer"];

/// Section name given to text that precedes the first recognised heading.
pub const PREAMBLE_SECTION: &str = "PREAMBLE";

const HEADINGS: [&str; 2] = ["FINDINGS", "IMPRESSION"];

/// Errors from keyword screening or overrides parsing.
#[derive(Debug, Error)]
pub enum ReportError {
    #[error("keyword list is empty")]
    EmptyKeywords,
    #[error("keyword {0:?} must be non-empty ASCII letters (matching is word-based)")]
    BadKeyword(String),
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad overrides file {path} line {line}: {reason}")]
    Csv {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate override for scan {0:?}")]
    DuplicateOverride(String),
    #[error(transparent)]
    Label(#[from] crate::cohort::CohortError),
}

/// How keywords are located in section text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// Case-insensitive match bounded by non-letter characters on both sides:
    /// `"post-dissection"` matches `dissection`, `"ulcerated"` does not match
    /// `ulcer`.
    #[default]
    WholeWord,
    /// Case-insensitive substring match; higher recall, more false flags.
    Substring,
}

/// Outcome of the keyword screen for one report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScreenLabel {
    /// At least one keyword hit in findings or impression.
    Flagged,
    #[default]
    Unflagged,
}

/// One keyword occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordHit {
    pub keyword: String,
    /// Section name (`FINDINGS` or `IMPRESSION`).
    pub section: String,
    /// Byte offset of the occurrence within the section text.
    pub offset: usize,
}

/// One named section of a report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub text: String,
}

/// A sectioned report, optionally annotated by the keyword screen.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportDoc {
    sections: Vec<Section>,
    hits: Vec<KeywordHit>,
    screen: ScreenLabel,
}

impl ReportDoc {
    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn hits(&self) -> &[KeywordHit] {
        &self.hits
    }

    pub fn screen(&self) -> ScreenLabel {
        self.screen
    }
}

fn heading_of(line: &str) -> Option<(&'static str, &str)> {
    let trimmed = line.trim_start();
    for name in HEADINGS {
        if trimmed.len() >= name.len() && trimmed[..name.len()].eq_ignore_ascii_case(name) {
            let rest = trimmed[name.len()..].trim_start();
            if let Some(inline) = rest.strip_prefix(':') {
                return Some((name, inline.trim()));
            }
        }
    }
    None
}

/// Splits report text into sections.
///
/// A line whose (leading-whitespace-trimmed) content is `FINDINGS:` or
/// `IMPRESSION:` in any letter case starts a section; text on the heading
/// line after the colon belongs to the section. Text before the first heading
/// becomes a `PREAMBLE` section when non-empty. Repeated headings append to
/// the existing section, so split dictations still screen as one unit.
pub fn parse_report(text: &str) -> ReportDoc {
    let mut order: Vec<String> = Vec::new();
    let mut bodies: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut current = PREAMBLE_SECTION.to_owned();
    bodies.insert(current.clone(), Vec::new());
    order.push(current.clone());

    for line in text.lines() {
        if let Some((name, inline)) = heading_of(line) {
            current = name.to_owned();
            if !bodies.contains_key(&current) {
                order.push(current.clone());
                bodies.insert(current.clone(), Vec::new());
            }
            if !inline.is_empty() {
                bodies.get_mut(&current).unwrap().push(inline.to_owned());
            }
        } else {
            bodies.get_mut(&current).unwrap().push(line.to_owned());
        }
    }

    let mut sections = Vec::new();
    for name in order {
        let text = bodies[&name].join("\n");
        if name == PREAMBLE_SECTION && text.trim().is_empty() {
            continue;
        }
        sections.push(Section { name, text });
    }
    ReportDoc {
        sections,
        hits: Vec::new(),
        screen: ScreenLabel::Unflagged,
    }
}

fn validate_keywords<S: AsRef<str>>(keywords: &[S]) -> Result<(), ReportError> {
    if keywords.is_empty() {
        return Err(ReportError::EmptyKeywords);
    }
    for k in keywords {
        let k = k.as_ref();
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphabetic()) {
            return Err(ReportError::BadKeyword(k.to_owned()));
        }
    }
    Ok(())
}

fn find_hits(section: &Section, keyword: &str, mode: MatchMode) -> Vec<KeywordHit> {
    // ASCII case folding preserves byte offsets, so hit offsets are valid for
    // the original section text.
    let haystack = section.text.to_ascii_lowercase();
    let needle = keyword.to_ascii_lowercase();
    let bytes = haystack.as_bytes();
    let mut out = Vec::new();
    for (offset, _) in haystack.match_indices(&needle) {
        if mode == MatchMode::WholeWord {
            let before_ok = offset == 0 || !bytes[offset - 1].is_ascii_alphabetic();
            let end = offset + needle.len();
            let after_ok = end == bytes.len() || !bytes[end].is_ascii_alphabetic();
            if !(before_ok && after_ok) {
                continue;
            }
        }
        out.push(KeywordHit {
            keyword: needle.clone(),
            section: section.name.clone(),
            offset,
        });
    }
    out
}

/// Runs the keyword screen over the findings and impression sections.
///
/// The preamble (exam metadata, clinical history) is deliberately ignored: a
/// referral saying "rule out dissection" must not flag a clean scan. Hits are
/// ordered by section, then offset, then keyword. The returned document
/// carries the hits and the flagged/unflagged screen result.
pub fn keyword_screen<S: AsRef<str>>(
    doc: ReportDoc,
    keywords: &[S],
    mode: MatchMode,
) -> Result<ReportDoc, ReportError> {
    validate_keywords(keywords)?;
    let mut doc = doc;
    let mut hits = Vec::new();
    for (section_idx, section) in doc.sections.iter().enumerate() {
        if section.name == PREAMBLE_SECTION {
            continue;
        }
        let mut section_hits = Vec::new();
        for k in keywords {
            section_hits.extend(find_hits(section, k.as_ref(), mode));
        }
        section_hits.sort_by(|a, b| a.offset.cmp(&b.offset).then(a.keyword.cmp(&b.keyword)));
        hits.extend(section_hits.into_iter().map(|h| (section_idx, h)));
    }
    doc.hits = hits.into_iter().map(|(_, h)| h).collect();
    doc.screen = if doc.hits.is_empty() {
        ScreenLabel::Unflagged
    } else {
        ScreenLabel::Flagged
    };
    Ok(doc)
}

/// Converts a screened report into a cohort label.
///
/// An override for the scan wins outright — it models manual adjudication of
/// the flagged pool (and can also rescue a missed positive). Without one, a
/// flagged report is only *uncertain*: keywords frequently appear in negated
/// or historical statements, so flags are not trusted as positives.
pub fn assign_label(doc: &ReportDoc, scan_id: &str, overrides: &BTreeMap<String, Label>) -> Label {
    if let Some(&label) = overrides.get(scan_id) {
        return label;
    }
    match doc.screen {
        ScreenLabel::Flagged => Label::Uncertain,
        ScreenLabel::Unflagged => Label::Negative,
    }
}

/// Reads a manual-overrides table: CSV `scan_id,label` with one row per scan.
pub fn read_overrides(path: &Path) -> Result<BTreeMap<String, Label>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let csv_err = |line: usize, reason: String| ReportError::Csv {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == "scan_id,label" => {}
        Some((_, header)) => {
            return Err(csv_err(1, format!("expected header \"scan_id,label\", got {header:?}")))
        }
        None => return Err(csv_err(1, "empty file".into())),
    }
    let mut out = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in lines {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let (scan_id, label) = line
            .split_once(',')
            .ok_or_else(|| csv_err(idx + 1, "expected 2 fields".into()))?;
        if scan_id.is_empty() {
            return Err(csv_err(idx + 1, "empty scan id".into()));
        }
        if !seen.insert(scan_id.to_owned()) {
            return Err(ReportError::DuplicateOverride(scan_id.to_owned()));
        }
        out.insert(scan_id.to_owned(), label.parse::<Label>()?);
    }
    Ok(out)
}
