//! Cohort records, histogram-based cohort balancing, and patient-level splits.
//!
//! Contrast timing shifts the intensity distribution inside the aorta, and a
//! classifier will happily learn that shortcut when the positive and negative
//! cohorts differ in it. [`match_histograms`] removes negatives one at a time
//! from the most over-represented aortic mean-HU bin until the two class
//! histograms agree (cosine similarity above a threshold), a removal budget is
//! hit, or no removal can help.
//!
//! Splitting is always by patient: every scan of a patient lands on the same
//! side, so near-duplicate anatomy never leaks between train and validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default bin count for aortic mean-HU histograms.
pub const DEFAULT_BINS: usize = 40;
/// Default HU range covered by the histograms.
pub const DEFAULT_RANGE_HU: (f64, f64) = (0.0, 800.0);
/// Default cosine-similarity threshold for [`match_histograms`].
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.95;
/// Default cap on the fraction of negatives that matching may remove.
pub const DEFAULT_MAX_REMOVED_FRACTION: f64 = 0.5;
/// Default fraction of patients assigned to the training side.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Errors from manifest IO, histogram matching, or splitting.
#[derive(Debug, Error)]
pub enum CohortError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad manifest {path} line {line}: {reason}")]
    Csv {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate scan id {0:?}")]
    DuplicateScanId(String),
    #[error("invalid identifier {0:?} (use letters, digits, '-', '_')")]
    BadId(String),
    #[error("unknown label {0:?} (expected positive, negative, or uncertain)")]
    BadLabel(String),
    #[error("unknown split {0:?} (expected train, val, test, excluded, or unassigned)")]
    BadSplit(String),
    #[error("histogram bin count must be >= 1")]
    BadBins,
    #[error("histogram range must satisfy lo < hi with finite bounds, got ({0}, {1})")]
    BadRange(f64, f64),
    #[error("match threshold must be in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("fraction must be in [0, 1], got {0}")]
    BadFraction(f64),
    #[error("train fraction must be in (0, 1), got {0}")]
    BadTrainFraction(f64),
    #[error("record {0:?} participates in matching but has no mean HU value")]
    MissingMeanHu(String),
    #[error("cannot build a histogram: no {0} records with a mean HU value")]
    EmptyClass(&'static str),
    #[error("patient-level split needs at least 2 unassigned patients, found {0}")]
    TooFewPatients(usize),
    #[error(
        "cannot reach the requested test counts: wanted {want_pos} positive / {want_neg} negative, \
         best achievable was {got_pos} / {got_neg}"
    )]
    CannotSatisfyTestCounts {
        want_pos: usize,
        want_neg: usize,
        got_pos: usize,
        got_neg: usize,
    },
}

/// Scan-level class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    /// Flagged by the report screen but not yet adjudicated; kept out of
    /// training and evaluation.
    Uncertain,
}

impl Label {
    /// True for labels usable as ground truth (positive or negative).
    pub fn is_definite(self) -> bool {
        !matches!(self, Label::Uncertain)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Uncertain => "uncertain",
        })
    }
}

impl std::str::FromStr for Label {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self, CohortError> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            "uncertain" => Ok(Label::Uncertain),
            other => Err(CohortError::BadLabel(other.to_owned())),
        }
    }
}

/// Which partition a scan belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Removed from the cohort (histogram matching or manual exclusion).
    Excluded,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Excluded => "excluded",
            Split::Unassigned => "unassigned",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = CohortError;

    fn from_str(s: &str) -> Result<Self, CohortError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "excluded" => Ok(Split::Excluded),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(CohortError::BadSplit(other.to_owned())),
        }
    }
}

/// One scan in the cohort.
///
/// `mean_hu` is the mean aortic intensity measured along the centerline; it is
/// absent until the straightening stage has run.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortRecord {
    pub scan_id: String,
    pub patient_id: String,
    pub label: Label,
    pub mean_hu: Option<f64>,
    pub split: Split,
}

fn validate_id(id: &str) -> Result<(), CohortError> {
    if id.is_empty()
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return Err(CohortError::BadId(id.to_owned()));
    }
    Ok(())
}

const MANIFEST_HEADER: &str = "scan_id,patient_id,label,mean_hu,split";

/// Reads a cohort manifest CSV (`scan_id,patient_id,label,mean_hu,split`).
/// An empty `mean_hu` field means the value has not been measured yet.
pub fn read_manifest(path: &Path) -> Result<Vec<CohortRecord>, CohortError> {
    let text = std::fs::read_to_string(path).map_err(|source| CohortError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let csv_err = |line: usize, reason: String| CohortError::Csv {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(csv_err(
                1,
                format!("expected header {MANIFEST_HEADER:?}, got {header:?}"),
            ))
        }
        None => return Err(csv_err(1, "empty file".into())),
    }
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in lines {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(csv_err(idx + 1, format!("expected 5 fields, got {}", fields.len())));
        }
        validate_id(fields[0])?;
        validate_id(fields[1])?;
        if !seen.insert(fields[0].to_owned()) {
            return Err(CohortError::DuplicateScanId(fields[0].to_owned()));
        }
        let label: Label = fields[2].parse()?;
        let mean_hu = if fields[3].is_empty() {
            None
        } else {
            let v: f64 = fields[3]
                .parse()
                .map_err(|_| csv_err(idx + 1, format!("bad mean_hu {:?}", fields[3])))?;
            if !v.is_finite() {
                return Err(csv_err(idx + 1, format!("non-finite mean_hu {v}")));
            }
            Some(v)
        };
        let split: Split = fields[4].parse()?;
        records.push(CohortRecord {
            scan_id: fields[0].to_owned(),
            patient_id: fields[1].to_owned(),
            label,
            mean_hu,
            split,
        });
    }
    Ok(records)
}

/// Writes a manifest in canonical form: header plus one row per record,
/// sorted by scan id. Re-writing unchanged records is byte-identical.
pub fn write_manifest(path: &Path, records: &[CohortRecord]) -> Result<(), CohortError> {
    let mut sorted: Vec<&CohortRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in sorted {
        validate_id(&r.scan_id)?;
        validate_id(&r.patient_id)?;
        let mean = r.mean_hu.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scan_id, r.patient_id, r.label, mean, r.split
        ));
    }
    std::fs::write(path, out).map_err(|source| CohortError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Class-wise aortic mean-HU histograms over a shared set of equal-width bins.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramPair {
    bin_edges: Vec<f64>,
    pos_counts: Vec<usize>,
    neg_counts: Vec<usize>,
}

impl HistogramPair {
    pub fn bins(&self) -> usize {
        self.pos_counts.len()
    }

    /// Bin edges, `bins + 1` values from `lo` to `hi`.
    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn pos_counts(&self) -> &[usize] {
        &self.pos_counts
    }

    pub fn neg_counts(&self) -> &[usize] {
        &self.neg_counts
    }
}

fn bin_of(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    // Bins are half-open [e_i, e_{i+1}) except the last, which is closed;
    // values outside the range clamp to the edge bins.
    let width = (hi - lo) / bins as f64;
    let idx = ((value - lo) / width).floor();
    if idx < 0.0 {
        0
    } else {
        (idx as usize).min(bins - 1)
    }
}

/// Builds positive/negative mean-HU histograms over the active cohort.
///
/// Uncertain labels and excluded records are skipped. Any other record
/// without a measured mean HU is an error: silently dropping it would bias
/// the match. Values outside `range` clamp into the edge bins.
pub fn build_histograms(
    records: &[CohortRecord],
    bins: usize,
    range: (f64, f64),
) -> Result<HistogramPair, CohortError> {
    if bins == 0 {
        return Err(CohortError::BadBins);
    }
    let (lo, hi) = range;
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(CohortError::BadRange(lo, hi));
    }
    let mut pos_counts = vec![0usize; bins];
    let mut neg_counts = vec![0usize; bins];
    for r in records {
        if r.split == Split::Excluded || !r.label.is_definite() {
            continue;
        }
        let v = r
            .mean_hu
            .ok_or_else(|| CohortError::MissingMeanHu(r.scan_id.clone()))?;
        let b = bin_of(v, lo, hi, bins);
        match r.label {
            Label::Positive => pos_counts[b] += 1,
            Label::Negative => neg_counts[b] += 1,
            Label::Uncertain => unreachable!(),
        }
    }
    let bin_edges = (0..=bins)
        .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
        .collect();
    Ok(HistogramPair {
        bin_edges,
        pos_counts,
        neg_counts,
    })
}

fn densities(counts: &[usize]) -> Option<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return None;
    }
    Some(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Cosine similarity between the density-normalised class histograms.
///
/// 1 means identical shapes regardless of cohort sizes; 0 means the classes
/// occupy disjoint bins. Errors if either class has no counted records.
pub fn cross_correlation(hist: &HistogramPair) -> Result<f64, CohortError> {
    let p = densities(&hist.pos_counts).ok_or(CohortError::EmptyClass("positive"))?;
    let q = densities(&hist.neg_counts).ok_or(CohortError::EmptyClass("negative"))?;
    let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    let np: f64 = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq: f64 = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(dot / (np * nq))
}

/// Why [`match_histograms`] stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchStatus {
    /// Similarity reached the threshold.
    Converged,
    /// No bin has an excess of negatives, so further removals cannot help.
    NoImprovement,
    /// The removal budget was exhausted before the threshold was reached.
    RemovalCapReached,
}

/// Result of greedy histogram matching.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Scan ids of removed negatives, in removal order.
    pub removed: Vec<String>,
    pub status: MatchStatus,
    /// Similarity of the class histograms after the final removal.
    pub final_cross_correlation: f64,
    /// Histograms after the final removal.
    pub final_histograms: HistogramPair,
}

/// Greedily removes negatives until the class mean-HU histograms align.
///
/// Each iteration removes one negative from the bin where the negative
/// density most exceeds the positive density — always the lexicographically
/// smallest scan id in that bin, and always scanning bins low-to-high on
/// ties, so the outcome is fully deterministic. Stops when the cosine
/// similarity reaches `threshold` (`Converged`), when no bin has a negative
/// excess (`NoImprovement`), or when `max_removed_fraction` of the initial
/// negatives has been removed (`RemovalCapReached`). The budget never removes
/// the final negative. Hitting the cap is an outcome, not an error: the
/// caller decides whether a partial match is acceptable.
///
/// The input records are not modified; apply `removed` to the manifest (e.g.
/// by marking those records excluded) to commit the result.
pub fn match_histograms(
    records: &[CohortRecord],
    bins: usize,
    range: (f64, f64),
    threshold: f64,
    max_removed_fraction: f64,
) -> Result<MatchOutcome, CohortError> {
    if !(0.0..=1.0).contains(&max_removed_fraction) {
        return Err(CohortError::BadFraction(max_removed_fraction));
    }
    if !threshold.is_finite() || threshold <= 0.0 || threshold > 1.0 {
        return Err(CohortError::BadThreshold(threshold));
    }
    let mut hist = build_histograms(records, bins, range)?;

    // Negatives still in play, keyed by bin, ordered by scan id.
    let (lo, hi) = range;
    let mut neg_bins: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); bins];
    for r in records {
        if r.split != Split::Excluded && r.label == Label::Negative {
            let v = r
                .mean_hu
                .ok_or_else(|| CohortError::MissingMeanHu(r.scan_id.clone()))?;
            neg_bins[bin_of(v, lo, hi, bins)].insert(&r.scan_id);
        }
    }
    let neg_initial: usize = hist.neg_counts.iter().sum();
    let cap = ((max_removed_fraction * neg_initial as f64).floor() as usize)
        .min(neg_initial.saturating_sub(1));

    let mut removed = Vec::new();
    let mut cc = cross_correlation(&hist)?;
    let status = loop {
        if cc >= threshold {
            break MatchStatus::Converged;
        }
        if removed.len() >= cap {
            break MatchStatus::RemovalCapReached;
        }
        let pos_d = densities(&hist.pos_counts).expect("checked by cross_correlation");
        let neg_d = densities(&hist.neg_counts).expect("checked by cross_correlation");
        let mut best: Option<(usize, f64)> = None;
        for b in 0..bins {
            let diff = neg_d[b] - pos_d[b];
            // Strict comparison keeps the lowest bin on ties.
            if diff > 0.0 && best.map_or(true, |(_, d)| diff > d) {
                best = Some((b, diff));
            }
        }
        let Some((bin, _)) = best else {
            break MatchStatus::NoImprovement;
        };
        let id = neg_bins[bin]
            .iter()
            .next()
            .copied()
            .expect("positive density excess implies a resident negative")
            .to_owned();
        neg_bins[bin].remove(id.as_str());
        hist.neg_counts[bin] -= 1;
        removed.push(id);
        cc = cross_correlation(&hist)?;
    };
    Ok(MatchOutcome {
        removed,
        status,
        final_cross_correlation: cc,
        final_histograms: hist,
    })
}

/// Assigns every unassigned record to train or validation, whole patients at
/// a time.
///
/// Patients are shuffled with a ChaCha stream seeded by `seed` and assigned
/// to the training side while the training patient fraction is below
/// `train_frac`; the remainder go to validation. Both sides are guaranteed
/// non-empty. Records already carrying a split (test, excluded, or an earlier
/// assignment) are left untouched.
pub fn patient_level_split(
    records: &mut [CohortRecord],
    train_frac: f64,
    seed: u64,
) -> Result<(), CohortError> {
    if !train_frac.is_finite() || train_frac <= 0.0 || train_frac >= 1.0 {
        return Err(CohortError::BadTrainFraction(train_frac));
    }
    let mut patients: Vec<&str> = records
        .iter()
        .filter(|r| r.split == Split::Unassigned)
        .map(|r| r.patient_id.as_str())
        .collect();
    patients.sort_unstable();
    patients.dedup();
    let n = patients.len();
    if n < 2 {
        return Err(CohortError::TooFewPatients(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled: Vec<String> = patients.iter().map(|s| (*s).to_owned()).collect();
    shuffled.shuffle(&mut rng);

    let mut train_patients: BTreeSet<String> = BTreeSet::new();
    for patient in shuffled {
        let fraction = train_patients.len() as f64 / n as f64;
        if fraction < train_frac && train_patients.len() < n - 1 {
            train_patients.insert(patient);
        }
    }
    for r in records.iter_mut() {
        if r.split == Split::Unassigned {
            r.split = if train_patients.contains(&r.patient_id) {
                Split::Train
            } else {
                Split::Val
            };
        }
    }
    Ok(())
}

/// Carves out a held-out test set with exact class counts, whole patients at
/// a time.
///
/// Patients are visited in seeded shuffle order; a patient is taken when
/// their definite-label scans fit inside the remaining positive/negative
/// budget. All scans of a taken patient (uncertain ones included) move to the
/// test split. Errors if the exact counts cannot be reached.
pub fn select_test_set(
    records: &mut [CohortRecord],
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<(), CohortError> {
    let mut patient_counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records.iter() {
        if r.split != Split::Unassigned {
            continue;
        }
        let entry = patient_counts.entry(r.patient_id.as_str()).or_default();
        match r.label {
            Label::Positive => entry.0 += 1,
            Label::Negative => entry.1 += 1,
            Label::Uncertain => {}
        }
    }
    let mut patients: Vec<String> = patient_counts.keys().map(|s| (*s).to_owned()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);

    let mut taken: BTreeSet<String> = BTreeSet::new();
    let (mut got_pos, mut got_neg) = (0usize, 0usize);
    for patient in patients {
        if got_pos == n_pos && got_neg == n_neg {
            break;
        }
        let (p, q) = patient_counts[patient.as_str()];
        if got_pos + p <= n_pos && got_neg + q <= n_neg {
            got_pos += p;
            got_neg += q;
            taken.insert(patient);
        }
    }
    if got_pos != n_pos || got_neg != n_neg {
        return Err(CohortError::CannotSatisfyTestCounts {
            want_pos: n_pos,
            want_neg: n_neg,
            got_pos,
            got_neg,
        });
    }
    for r in records.iter_mut() {
        if r.split == Split::Unassigned && taken.contains(&r.patient_id) {
            r.split = Split::Test;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(scan: &str, patient: &str, label: Label, mean: Option<f64>) -> CohortRecord {
        CohortRecord {
            scan_id: scan.into(),
            patient_id: patient.into(),
            label,
            mean_hu: mean,
            split: Split::Unassigned,
        }
    }

    #[test]
    fn manifest_round_trip_and_canonical_order() {
        let dir = std::env::temp_dir().join("aortamil_manifest");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let mut records = vec![
            rec("scan_b", "p2", Label::Negative, Some(310.25)),
            rec("scan_a", "p1", Label::Positive, None),
            rec("scan_c", "p2", Label::Uncertain, Some(-12.5)),
        ];
        records[2].split = Split::Excluded;
        write_manifest(&path, &records).unwrap();
        let loaded = read_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        // Canonical order is by scan id.
        assert_eq!(loaded[0].scan_id, "scan_a");
        assert_eq!(loaded[0].mean_hu, None);
        assert_eq!(loaded[1].mean_hu, Some(310.25));
        assert_eq!(loaded[2].label, Label::Uncertain);
        assert_eq!(loaded[2].split, Split::Excluded);

        // Writing what was read is byte-identical.
        let first = std::fs::read(&path).unwrap();
        write_manifest(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_rejects_malformed_input() {
        let dir = std::env::temp_dir().join("aortamil_manifest_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");

        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(CohortError::Csv { line: 1, .. })));

        std::fs::write(
            &path,
            "scan_id,patient_id,label,mean_hu,split\ns1,p1,positive,100,train\ns1,p1,negative,,val\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(CohortError::DuplicateScanId(_))));

        std::fs::write(
            &path,
            "scan_id,patient_id,label,mean_hu,split\ns1,p1,maybe,100,train\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(CohortError::BadLabel(_))));

        std::fs::write(
            &path,
            "scan_id,patient_id,label,mean_hu,split\ns1,p1,positive,abc,train\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(CohortError::Csv { line: 2, .. })));

        std::fs::write(
            &path,
            "scan_id,patient_id,label,mean_hu,split\ns 1,p1,positive,100,train\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(CohortError::BadId(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn histogram_binning_clamps_and_uses_half_open_bins() {
        let records = vec![
            rec("a", "p1", Label::Positive, Some(-50.0)), // below range -> bin 0
            rec("b", "p2", Label::Positive, Some(0.0)),   // lo -> bin 0
            rec("c", "p3", Label::Positive, Some(50.0)),  // edge -> right bin
            rec("d", "p4", Label::Negative, Some(99.9)),  // inside last bin
            rec("e", "p5", Label::Negative, Some(100.0)), // hi clamps into last bin
            rec("f", "p6", Label::Negative, Some(500.0)), // above range -> last bin
            rec("g", "p7", Label::Uncertain, Some(10.0)), // skipped
        ];
        let hist = build_histograms(&records, 2, (0.0, 100.0)).unwrap();
        assert_eq!(hist.pos_counts(), &[2, 1]);
        assert_eq!(hist.neg_counts(), &[0, 3]);
        assert_eq!(hist.bin_edges(), &[0.0, 50.0, 100.0]);

        // Excluded records are invisible to the histogram.
        let mut with_excluded = records;
        with_excluded[3].split = Split::Excluded;
        let hist2 = build_histograms(&with_excluded, 2, (0.0, 100.0)).unwrap();
        assert_eq!(hist2.neg_counts(), &[0, 2]);
    }

    #[test]
    fn histogram_requires_mean_for_active_definite_records() {
        let records = vec![
            rec("a", "p1", Label::Positive, Some(10.0)),
            rec("b", "p2", Label::Negative, None),
        ];
        assert!(matches!(
            build_histograms(&records, 4, (0.0, 100.0)),
            Err(CohortError::MissingMeanHu(_))
        ));
        assert!(matches!(
            build_histograms(&[], 0, (0.0, 100.0)),
            Err(CohortError::BadBins)
        ));
        assert!(matches!(
            build_histograms(&[], 4, (100.0, 0.0)),
            Err(CohortError::BadRange(..))
        ));
    }

    fn hist_from_counts(pos: Vec<usize>, neg: Vec<usize>) -> HistogramPair {
        let bins = pos.len();
        HistogramPair {
            bin_edges: (0..=bins).map(|i| i as f64).collect(),
            pos_counts: pos,
            neg_counts: neg,
        }
    }

    #[test]
    fn cross_correlation_matches_hand_computed_values() {
        // Identical shapes at different totals: densities coincide -> 1.
        let same = hist_from_counts(vec![2, 6, 2], vec![1, 3, 1]);
        assert_relative_eq!(cross_correlation(&same).unwrap(), 1.0, epsilon = 1e-12);

        // Disjoint support -> 0.
        let disjoint = hist_from_counts(vec![3, 0], vec![0, 7]);
        assert_relative_eq!(cross_correlation(&disjoint).unwrap(), 0.0, epsilon = 1e-12);

        // pos density (0.5, 0.5), neg density (1, 0):
        // cos = 0.5 / (sqrt(0.5) * 1) = 1/sqrt(2).
        let half = hist_from_counts(vec![1, 1], vec![5, 0]);
        assert_relative_eq!(
            cross_correlation(&half).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );

        let empty = hist_from_counts(vec![0, 0], vec![1, 1]);
        assert!(matches!(
            cross_correlation(&empty),
            Err(CohortError::EmptyClass("positive"))
        ));
    }

    /// 10 positives split 5/5 over two bins; 25 negatives split 20/5. Greedy
    /// matching must remove exactly 15 negatives from the first bin (checked
    /// by hand: similarity first reaches 0.999 when the counts hit 5/5).
    #[test]
    fn matching_reproduces_the_hand_worked_two_bin_case() {
        let mut records = Vec::new();
        for i in 0..5 {
            records.push(rec(&format!("p{i:02}"), &format!("pp{i:02}"), Label::Positive, Some(25.0)));
        }
        for i in 5..10 {
            records.push(rec(&format!("p{i:02}"), &format!("pp{i:02}"), Label::Positive, Some(75.0)));
        }
        for i in 0..20 {
            records.push(rec(&format!("n{i:02}"), &format!("np{i:02}"), Label::Negative, Some(25.0)));
        }
        for i in 20..25 {
            records.push(rec(&format!("n{i:02}"), &format!("np{i:02}"), Label::Negative, Some(75.0)));
        }
        let out = match_histograms(&records, 2, (0.0, 100.0), 0.999, 1.0).unwrap();
        assert_eq!(out.status, MatchStatus::Converged);
        assert_eq!(out.removed.len(), 15);
        // Removal is lexicographic within the over-dense bin.
        let want: Vec<String> = (0..15).map(|i| format!("n{i:02}")).collect();
        assert_eq!(out.removed, want);
        assert!(out.final_cross_correlation >= 0.999);
        assert_eq!(out.final_histograms.neg_counts(), &[5, 5]);
        assert_eq!(out.final_histograms.pos_counts(), &[5, 5]);
    }

    #[test]
    fn matching_converges_immediately_when_already_similar() {
        let records = vec![
            rec("a", "p1", Label::Positive, Some(10.0)),
            rec("b", "p2", Label::Negative, Some(12.0)),
        ];
        let out = match_histograms(&records, 4, (0.0, 100.0), 0.95, 0.5).unwrap();
        assert_eq!(out.status, MatchStatus::Converged);
        assert!(out.removed.is_empty());
    }

    #[test]
    fn matching_stops_when_no_bin_has_negative_excess() {
        // Densities are proportional but not bit-identical under cosine
        // (norm * norm rounds up), so threshold 1.0 is never met; the
        // zero-excess guard must stop the loop instead of spinning.
        let records = vec![
            rec("a", "p1", Label::Positive, Some(10.0)),
            rec("b", "p2", Label::Positive, Some(60.0)),
            rec("c", "p3", Label::Positive, Some(11.0)),
            rec("d", "p4", Label::Positive, Some(61.0)),
            rec("e", "p5", Label::Negative, Some(12.0)),
            rec("f", "p6", Label::Negative, Some(62.0)),
        ];
        let out = match_histograms(&records, 2, (0.0, 100.0), 1.0, 1.0).unwrap();
        assert_eq!(out.status, MatchStatus::NoImprovement);
        assert!(out.removed.is_empty());
    }

    #[test]
    fn matching_respects_the_removal_cap() {
        let mut records = Vec::new();
        for i in 0..5 {
            records.push(rec(&format!("p{i}"), &format!("pp{i}"), Label::Positive, Some(75.0)));
        }
        for i in 0..10 {
            records.push(rec(&format!("n{i}"), &format!("np{i}"), Label::Negative, Some(25.0)));
        }
        let out = match_histograms(&records, 2, (0.0, 100.0), 0.99, 0.3).unwrap();
        assert_eq!(out.status, MatchStatus::RemovalCapReached);
        // floor(0.3 * 10) = 3 removals, lexicographically first in bin 0.
        assert_eq!(out.removed, vec!["n0", "n1", "n2"]);

        // The cap never removes the final negative even at fraction 1.
        let two = vec![
            rec("p0", "pp0", Label::Positive, Some(75.0)),
            rec("n0", "np0", Label::Negative, Some(25.0)),
            rec("n1", "np1", Label::Negative, Some(25.0)),
        ];
        let out2 = match_histograms(&two, 2, (0.0, 100.0), 0.99, 1.0).unwrap();
        assert_eq!(out2.status, MatchStatus::RemovalCapReached);
        assert_eq!(out2.removed.len(), 1);
    }

    #[test]
    fn matching_validates_parameters() {
        let records = vec![
            rec("a", "p1", Label::Positive, Some(10.0)),
            rec("b", "p2", Label::Negative, Some(90.0)),
        ];
        assert!(matches!(
            match_histograms(&records, 2, (0.0, 100.0), 0.0, 0.5),
            Err(CohortError::BadThreshold(_))
        ));
        assert!(matches!(
            match_histograms(&records, 2, (0.0, 100.0), 1.5, 0.5),
            Err(CohortError::BadThreshold(_))
        ));
        assert!(matches!(
            match_histograms(&records, 2, (0.0, 100.0), 0.9, 1.5),
            Err(CohortError::BadFraction(_))
        ));
    }

    #[test]
    fn split_keeps_patients_together_and_fractions_right() {
        // 10 patients, 2 scans each.
        let mut records = Vec::new();
        for p in 0..10 {
            for s in 0..2 {
                records.push(rec(
                    &format!("scan_{p}_{s}"),
                    &format!("pat_{p}"),
                    if p % 2 == 0 { Label::Positive } else { Label::Negative },
                    None,
                ));
            }
        }
        patient_level_split(&mut records, 0.8, 7).unwrap();
        let mut sides: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for r in &records {
            sides.entry(r.patient_id.as_str()).or_default().insert(r.split);
        }
        for (patient, splits) in &sides {
            assert_eq!(splits.len(), 1, "patient {patient} straddles splits");
        }
        let train_patients = sides
            .values()
            .filter(|s| s.contains(&Split::Train))
            .count();
        assert_eq!(train_patients, 8);

        // Deterministic per seed.
        let mut again = records.clone();
        for r in &mut again {
            r.split = Split::Unassigned;
        }
        patient_level_split(&mut again, 0.8, 7).unwrap();
        assert_eq!(again, records);

        // Some other seed yields a different partition.
        let mut different = false;
        for seed in 8..20 {
            let mut alt = records.clone();
            for r in &mut alt {
                r.split = Split::Unassigned;
            }
            patient_level_split(&mut alt, 0.8, seed).unwrap();
            if alt != records {
                different = true;
                break;
            }
        }
        assert!(different, "split ignored the seed");
    }

    #[test]
    fn split_leaves_preassigned_records_alone_and_validates() {
        let mut records = vec![
            rec("a", "p1", Label::Positive, None),
            rec("b", "p2", Label::Negative, None),
            rec("c", "p3", Label::Negative, None),
        ];
        records[2].split = Split::Test;
        patient_level_split(&mut records, 0.5, 1).unwrap();
        assert_eq!(records[2].split, Split::Test);
        assert!(records[..2].iter().all(|r| r.split != Split::Unassigned));
        // Both sides non-empty even at extreme fractions.
        let mut extreme = vec![
            rec("a", "p1", Label::Positive, None),
            rec("b", "p2", Label::Negative, None),
        ];
        patient_level_split(&mut extreme, 0.99, 1).unwrap();
        let splits: BTreeSet<Split> = extreme.iter().map(|r| r.split).collect();
        assert!(splits.contains(&Split::Train) && splits.contains(&Split::Val));

        assert!(matches!(
            patient_level_split(&mut [rec("a", "p1", Label::Positive, None)], 0.8, 1),
            Err(CohortError::TooFewPatients(1))
        ));
        assert!(matches!(
            patient_level_split(&mut records.clone(), 1.0, 1),
            Err(CohortError::BadTrainFraction(_))
        ));
    }

    #[test]
    fn test_selection_hits_exact_counts_with_whole_patients() {
        let mut records = Vec::new();
        for p in 0..12 {
            records.push(rec(
                &format!("scan_{p:02}"),
                &format!("pat_{p:02}"),
                if p < 5 { Label::Positive } else { Label::Negative },
                None,
            ));
        }
        select_test_set(&mut records, 2, 3, 99).unwrap();
        let test_pos = records
            .iter()
            .filter(|r| r.split == Split::Test && r.label == Label::Positive)
            .count();
        let test_neg = records
            .iter()
            .filter(|r| r.split == Split::Test && r.label == Label::Negative)
            .count();
        assert_eq!((test_pos, test_neg), (2, 3));

        // Unsatisfiable request errors with the best achievable counts.
        let mut few = vec![rec("a", "p1", Label::Positive, None)];
        assert!(matches!(
            select_test_set(&mut few, 2, 0, 1),
            Err(CohortError::CannotSatisfyTestCounts { got_pos: 1, .. })
        ));
    }
}
