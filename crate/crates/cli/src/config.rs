//! Pipeline configuration: defaults, file parsing, and validation.
//!
//! The config file is plain text, read line by line:
//!
//! ```ini
//! # comment (';' also works); blank lines are ignored
//! seed = 7              # keys before any section header are top-level
//!
//! [paths]
//! volumes_dir = data/volumes
//! centerlines_dir = data/centerlines
//! reports_dir = data/reports
//! workdir = work
//!
//! [straighten]
//! patch_size = 114
//! spacing = 0.7
//! slice_count = 50
//!
//! [cohort]
//! bins = 32
//! range_lo = 0
//! range_hi = 800
//! threshold = 0.95
//! max_removed_fraction = 0.5
//!
//! [train]
//! learning_rate = 0.0003
//! batch_size = 8
//! epochs = 25
//! patience = 10
//!
//! [eval]
//! n_boot = 2000
//! level = 0.95
//! ```
//!
//! Every key is optional and falls back to the defaults above. Unknown
//! sections or keys are errors (they are almost always typos). Values given
//! on the command line override values from the file; the `AORTAMIL_WORKDIR`
//! environment variable overrides the configured workdir but is itself
//! overridden by an explicit `--workdir` flag.

use std::fmt;
use std::path::{Path, PathBuf};

/// Environment variable consulted for the working directory.
pub const WORKDIR_ENV: &str = "AORTAMIL_WORKDIR";

/// A config-file problem, with the line it came from when applicable.
#[derive(Debug)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "config line {}: {}", n, self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line: Some(line),
        message: message.into(),
    }
}

fn verr(message: impl Into<String>) -> ConfigError {
    ConfigError {
        line: None,
        message: message.into(),
    }
}

/// Input/output locations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paths {
    pub volumes_dir: PathBuf,
    pub centerlines_dir: PathBuf,
    pub reports_dir: PathBuf,
    /// Where every stage writes its outputs (straightened stacks,
    /// checkpoints, predictions, summaries).
    pub workdir: PathBuf,
}

/// Cross-section extraction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StraightenParams {
    /// Patch height and width in pixels.
    pub patch_size: usize,
    /// Isotropic sampling step in mm (in-plane and between slices).
    pub spacing: f64,
    /// Slices sampled per volume when building classifier bags.
    pub slice_count: usize,
}

/// Histogram-matching parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortParams {
    pub bins: usize,
    pub range_lo: f64,
    pub range_hi: f64,
    /// Histogram similarity at which matching stops.
    pub threshold: f64,
    /// Hard cap on the fraction of negatives matching may remove.
    pub max_removed_fraction: f64,
}

/// Optimisation parameters (the classifier architecture itself is fixed).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation-loss improvement before stopping early.
    pub patience: usize,
}

/// Bootstrap parameters for confidence intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub n_boot: usize,
    pub level: f64,
}

/// Everything the pipeline needs, with clinically-scaled defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub straighten: StraightenParams,
    pub cohort: CohortParams,
    pub train: TrainParams,
    pub eval: EvalParams,
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths {
                volumes_dir: PathBuf::from("volumes"),
                centerlines_dir: PathBuf::from("centerlines"),
                reports_dir: PathBuf::from("reports"),
                workdir: PathBuf::from("work"),
            },
            straighten: StraightenParams {
                patch_size: 114,
                spacing: 0.7,
                slice_count: 50,
            },
            cohort: CohortParams {
                bins: 32,
                range_lo: 0.0,
                range_hi: 800.0,
                threshold: 0.95,
                max_removed_fraction: 0.5,
            },
            train: TrainParams {
                learning_rate: 3e-4,
                batch_size: 8,
                epochs: 25,
                patience: 10,
            },
            eval: EvalParams {
                n_boot: 2000,
                level: 0.95,
            },
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Profile sized for the synthetic phantom benchmark: small patches and
    /// few slices (the phantoms are much smaller than a thorax), a higher
    /// learning rate, and a short epoch budget so the full pipeline runs in
    /// minutes on a laptop. `pipeline` uses this when no config file is
    /// given; `configs/synthetic.ini` in the repository mirrors it.
    pub fn synthetic_benchmark() -> Self {
        let mut cfg = Self::default();
        cfg.straighten = StraightenParams {
            patch_size: 24,
            spacing: 1.0,
            slice_count: 8,
        };
        cfg.train = TrainParams {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 10,
            patience: 10,
        };
        cfg
    }

    /// Reads and validates a config file, starting from the defaults.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| verr(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find(['#', ';']) {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(line_no, "unterminated section header"))?
                    .trim();
                if !matches!(name, "paths" | "straighten" | "cohort" | "train" | "eval") {
                    return Err(err(line_no, format!("unknown section [{name}]")));
                }
                section = name.to_owned();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(line_no, format!("empty value for {key}")));
            }
            self.set(&section, key, value, line_no)?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError> {
            value
                .parse()
                .map_err(|_| err(line, format!("cannot parse {key} value {value:?}")))
        }
        match (section, key) {
            ("", "seed") => self.seed = parse(key, value, line)?,
            ("", other) => {
                return Err(err(line, format!("unknown top-level key {other} (only `seed`)")))
            }
            ("paths", "volumes_dir") => self.paths.volumes_dir = PathBuf::from(value),
            ("paths", "centerlines_dir") => self.paths.centerlines_dir = PathBuf::from(value),
            ("paths", "reports_dir") => self.paths.reports_dir = PathBuf::from(value),
            ("paths", "workdir") => self.paths.workdir = PathBuf::from(value),
            ("straighten", "patch_size") => self.straighten.patch_size = parse(key, value, line)?,
            ("straighten", "spacing") => self.straighten.spacing = parse(key, value, line)?,
            ("straighten", "slice_count") => self.straighten.slice_count = parse(key, value, line)?,
            ("cohort", "bins") => self.cohort.bins = parse(key, value, line)?,
            ("cohort", "range_lo") => self.cohort.range_lo = parse(key, value, line)?,
            ("cohort", "range_hi") => self.cohort.range_hi = parse(key, value, line)?,
            ("cohort", "threshold") => self.cohort.threshold = parse(key, value, line)?,
            ("cohort", "max_removed_fraction") => {
                self.cohort.max_removed_fraction = parse(key, value, line)?
            }
            ("train", "learning_rate") => self.train.learning_rate = parse(key, value, line)?,
            ("train", "batch_size") => self.train.batch_size = parse(key, value, line)?,
            ("train", "epochs") => self.train.epochs = parse(key, value, line)?,
            ("train", "patience") => self.train.patience = parse(key, value, line)?,
            ("eval", "n_boot") => self.eval.n_boot = parse(key, value, line)?,
            ("eval", "level") => self.eval.level = parse(key, value, line)?,
            (s, k) => return Err(err(line, format!("unknown key {k} in section [{s}]"))),
        }
        Ok(())
    }

    /// Checks every numeric parameter against the range its consumer accepts,
    /// so bad values fail at startup rather than mid-pipeline.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.straighten;
        if s.patch_size < 2 {
            return Err(verr(format!("patch_size must be at least 2, got {}", s.patch_size)));
        }
        if !s.spacing.is_finite() || s.spacing <= 0.0 {
            return Err(verr(format!("spacing must be positive, got {}", s.spacing)));
        }
        if s.slice_count < 2 {
            return Err(verr(format!(
                "slice_count must be at least 2 (batchnorm needs a batch), got {}",
                s.slice_count
            )));
        }
        let c = &self.cohort;
        if c.bins < 2 {
            return Err(verr(format!("bins must be at least 2, got {}", c.bins)));
        }
        if !(c.range_lo.is_finite() && c.range_hi.is_finite() && c.range_lo < c.range_hi) {
            return Err(verr(format!(
                "cohort range must satisfy lo < hi, got ({}, {})",
                c.range_lo, c.range_hi
            )));
        }
        if !c.threshold.is_finite() || c.threshold <= 0.0 || c.threshold > 1.0 {
            return Err(verr(format!("threshold must be in (0, 1], got {}", c.threshold)));
        }
        if !(0.0..=1.0).contains(&c.max_removed_fraction) {
            return Err(verr(format!(
                "max_removed_fraction must be in [0, 1], got {}",
                c.max_removed_fraction
            )));
        }
        let t = &self.train;
        if !t.learning_rate.is_finite() || t.learning_rate <= 0.0 {
            return Err(verr(format!("learning_rate must be positive, got {}", t.learning_rate)));
        }
        if t.batch_size == 0 {
            return Err(verr("batch_size must be at least 1".to_owned()));
        }
        if t.epochs == 0 {
            return Err(verr("epochs must be at least 1".to_owned()));
        }
        if t.patience == 0 {
            return Err(verr("patience must be at least 1".to_owned()));
        }
        let e = &self.eval;
        if e.n_boot < aortamil_core::eval::MIN_N_BOOT {
            return Err(verr(format!(
                "n_boot must be at least {}, got {}",
                aortamil_core::eval::MIN_N_BOOT,
                e.n_boot
            )));
        }
        if !e.level.is_finite() || e.level <= 0.0 || e.level >= 1.0 {
            return Err(verr(format!("level must be in (0, 1), got {}", e.level)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        PipelineConfig::default().validate().unwrap();
        PipelineConfig::synthetic_benchmark().validate().unwrap();
    }

    #[test]
    fn full_file_round_trips_every_key() {
        let text = "\
            seed = 42          # master seed\n\
            [paths]\n\
            volumes_dir = v\n\
            centerlines_dir = c\n\
            reports_dir = r\n\
            workdir = w\n\
            [straighten]\n\
            patch_size = 28\n\
            spacing = 1.0\n\
            slice_count = 12\n\
            [cohort]\n\
            bins = 16\n\
            range_lo = 100\n\
            range_hi = 600\n\
            threshold = 0.9\n\
            max_removed_fraction = 0.25\n\
            [train]\n\
            learning_rate = 0.001\n\
            batch_size = 4\n\
            epochs = 6\n\
            patience = 3\n\
            [eval]\n\
            n_boot = 500\n\
            level = 0.9\n";
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.paths.volumes_dir, PathBuf::from("v"));
        assert_eq!(cfg.paths.workdir, PathBuf::from("w"));
        assert_eq!(cfg.straighten.patch_size, 28);
        assert_eq!(cfg.straighten.spacing, 1.0);
        assert_eq!(cfg.straighten.slice_count, 12);
        assert_eq!(cfg.cohort.bins, 16);
        assert_eq!(cfg.cohort.range_lo, 100.0);
        assert_eq!(cfg.cohort.threshold, 0.9);
        assert_eq!(cfg.cohort.max_removed_fraction, 0.25);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.epochs, 6);
        assert_eq!(cfg.train.patience, 3);
        assert_eq!(cfg.eval.n_boot, 500);
        assert_eq!(cfg.eval.level, 0.9);
    }

    #[test]
    fn partial_file_keeps_defaults_elsewhere() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.straighten.patch_size, 114);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("# top\n\n; also a comment\nseed = 9 ; trailing\n")
            .unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected_with_line_numbers() {
        let mut cfg = PipelineConfig::default();
        let e = cfg.apply_text("[train]\nlr = 0.1\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.message.contains("lr"), "{}", e.message);

        let e = cfg.apply_text("[optimizer]\n").unwrap_err();
        assert_eq!(e.line, Some(1));

        let e = cfg.apply_text("patch_size = 3\n").unwrap_err();
        assert!(e.message.contains("top-level"), "{}", e.message);

        let e = cfg.apply_text("[train]\nepochs\n").unwrap_err();
        assert!(e.message.contains("key = value"), "{}", e.message);
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let cases = [
            "[straighten]\npatch_size = 1\n",
            "[straighten]\nspacing = 0\n",
            "[straighten]\nslice_count = 1\n",
            "[cohort]\nbins = 1\n",
            "[cohort]\nrange_lo = 900\n", // above default range_hi
            "[cohort]\nthreshold = 1.5\n",
            "[cohort]\nmax_removed_fraction = 1.1\n",
            "[train]\nlearning_rate = 0\n",
            "[train]\nbatch_size = 0\n",
            "[train]\nepochs = 0\n",
            "[train]\npatience = 0\n",
            "[eval]\nn_boot = 10\n",
            "[eval]\nlevel = 1\n",
        ];
        for text in cases {
            let mut cfg = PipelineConfig::default();
            cfg.apply_text(text).unwrap();
            assert!(cfg.validate().is_err(), "{text:?} should fail validation");
        }
    }

    #[test]
    fn unparseable_numbers_report_the_key() {
        let mut cfg = PipelineConfig::default();
        let e = cfg.apply_text("[train]\nepochs = many\n").unwrap_err();
        assert!(e.message.contains("epochs"), "{}", e.message);
    }
}
