//! Experiment configuration and its flat TOML file form.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxdata::BenchmarkConfig;
use crate::trajectory::TermMask;

/// Environment variable overriding the output directory of the config file.
pub const OUT_DIR_ENV: &str = "TRAJDISTILL_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SupOnly,
    MultiTask,
    NoCrossDomain,
    NoCrossClass,
    NoHistorical,
    NoProjection,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::SupOnly,
        Variant::MultiTask,
        Variant::NoCrossDomain,
        Variant::NoCrossClass,
        Variant::NoHistorical,
        Variant::NoProjection,
    ];

    pub const ABLATIONS: [Variant; 4] = [
        Variant::NoCrossDomain,
        Variant::NoCrossClass,
        Variant::NoHistorical,
        Variant::NoProjection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SupOnly => "sup_only",
            Variant::MultiTask => "multi_task",
            Variant::NoCrossDomain => "no_cross_domain",
            Variant::NoCrossClass => "no_cross_class",
            Variant::NoHistorical => "no_historical",
            Variant::NoProjection => "no_projection",
        }
    }

    /// Active penalty terms, `None` when the variant trains without distillation.
    pub fn penalty_mask(self) -> Option<TermMask> {
        match self {
            Variant::SupOnly | Variant::MultiTask => None,
            Variant::NoCrossDomain => Some(TermMask {
                domain: false,
                class: true,
            }),
            Variant::NoCrossClass => Some(TermMask {
                domain: true,
                class: false,
            }),
            _ => Some(TermMask::ALL),
        }
    }

    pub fn historical(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoCrossDomain | Variant::NoCrossClass | Variant::NoProjection
        )
    }

    pub fn projects_statistics(self) -> bool {
        self != Variant::NoProjection
    }

    pub fn uses_source(self) -> bool {
        self != Variant::SupOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Every knob of one training run. The file form is the same struct as flat
/// TOML; omitted keys keep their defaults and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seed: u64,

    pub feature_dim: usize,
    pub n_anchor: usize,
    pub n_new: usize,
    pub n_source_private: usize,
    pub class_sep: f64,
    pub class_std: f64,
    pub shift_angle_deg: f64,
    pub shift_translation: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shots: usize,
    pub shots_anchor: usize,

    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub kappa: f64,
    pub tau: f64,
    /// Capacity of the source and anchor buffers.
    pub buffer_k: usize,
    /// Capacity of the historical buffer.
    pub buffer_t: usize,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Support samples in every target batch; the rest are pseudo-labeled.
    pub support_per_batch: usize,
    pub pseudo_threshold: f64,
    /// Restrict pseudo-labels to anchor classes.
    pub pseudo_anchor_only: bool,
    /// Rescale the full objective gradient to at most this norm; 0 disables.
    pub grad_clip: f64,

    pub output_dir: Option<PathBuf>,
    /// Measure wall-clock time; off by default so outputs are bit-reproducible.
    pub record_wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        Self {
            variant: Variant::Full,
            seed: 0,
            feature_dim: b.feature_dim,
            n_anchor: b.n_anchor,
            n_new: b.n_new,
            n_source_private: b.n_source_private,
            class_sep: b.class_sep,
            class_std: b.class_std,
            shift_angle_deg: b.shift_angle_deg,
            shift_translation: b.shift_translation,
            train_per_class: b.train_per_class,
            test_per_class: b.test_per_class,
            shots: b.shots,
            shots_anchor: b.shots_anchor,
            hidden: vec![32],
            lambda: 0.2,
            kappa: 100.0,
            tau: 0.98,
            buffer_k: 16,
            buffer_t: 16,
            lr: 0.05,
            iterations: 2000,
            batch_size: 16,
            support_per_batch: 8,
            pseudo_threshold: 0.0,
            pseudo_anchor_only: false,
            grad_clip: 5.0,
            output_dir: None,
            record_wall_clock: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            feature_dim: self.feature_dim,
            n_anchor: self.n_anchor,
            n_new: self.n_new,
            n_source_private: self.n_source_private,
            class_sep: self.class_sep,
            class_std: self.class_std,
            shift_angle_deg: self.shift_angle_deg,
            shift_translation: self.shift_translation,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            shots: self.shots,
            shots_anchor: self.shots_anchor,
            seed: self.seed,
        }
    }

    /// Layer widths: input, hidden..., one output per target class.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_dim];
        w.extend(&self.hidden);
        w.push(self.n_anchor + self.n_new);
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark().validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return fail(format!("kappa must be > 0, got {}", self.kappa));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if self.buffer_k == 0 || self.buffer_t == 0 {
            return fail("buffer sizes must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.support_per_batch > self.batch_size {
            return fail(format!(
                "support_per_batch {} exceeds batch_size {}",
                self.support_per_batch, self.batch_size
            ));
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be >= 1".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return fail(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if !self.pseudo_threshold.is_finite() {
            return fail("pseudo_threshold must be finite".into());
        }
        Ok(())
    }

    /// Output directory: explicit flag, then the environment, then the file,
    /// then `runs`.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}
