//! Synthetic taxonomy-mismatched benchmark: Gaussian classes, a rigid domain
//! shift on the target, deterministic splits and few-shot support sampling.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{argmax, forward, ModelParams};

pub const DATASET_MAGIC: &str = "# trajdistill-dataset v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Support,
    Unlabeled,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Format(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(Domain { Source => "source", Target => "target" });
text_enum!(Split { Train => "train", Test => "test", Support => "support", Unlabeled => "unlabeled" });

/// Source/target label sets and the derived anchor and new classes.
///
/// Target classes are the contiguous ids `0..|C_t|` so that a class id is also
/// its head index; source-private classes take ids at or above `|C_t|`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomySpec {
    source: Vec<usize>,
    target: Vec<usize>,
    anchors: Vec<usize>,
    new: Vec<usize>,
}

impl TaxonomySpec {
    pub fn new(source: Vec<usize>, target: Vec<usize>) -> Result<Self> {
        if target.iter().copied().ne(0..target.len()) {
            return Err(Error::InvalidInput(format!(
                "target classes must be 0..{}, got {target:?}",
                target.len()
            )));
        }
        let unique: BTreeSet<_> = source.iter().collect();
        if unique.len() != source.len() {
            return Err(Error::InvalidInput(format!("duplicate source classes in {source:?}")));
        }
        let anchors: Vec<usize> = target.iter().copied().filter(|c| source.contains(c)).collect();
        let new: Vec<usize> = target.iter().copied().filter(|c| !source.contains(c)).collect();
        if anchors.is_empty() {
            return Err(Error::InvalidInput("taxonomy has no anchor classes".into()));
        }
        if new.is_empty() {
            return Err(Error::InvalidInput("taxonomy has no new classes".into()));
        }
        Ok(Self {
            source,
            target,
            anchors,
            new,
        })
    }

    pub fn source(&self) -> &[usize] {
        &self.source
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn new_classes(&self) -> &[usize] {
        &self.new
    }

    pub fn n_new(&self) -> usize {
        self.new.len()
    }

    pub fn n_target(&self) -> usize {
        self.target.len()
    }

    pub fn is_anchor(&self, class: usize) -> bool {
        self.anchors.contains(&class)
    }

    pub fn is_new(&self, class: usize) -> bool {
        self.new.contains(&class)
    }

    pub fn in_target(&self, class: usize) -> bool {
        class < self.target.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub feature_dim: usize,
    pub n_anchor: usize,
    pub n_new: usize,
    pub n_source_private: usize,
    /// Distance of every class mean from the origin.
    pub class_sep: f64,
    /// Isotropic standard deviation of every class component.
    pub class_std: f64,
    /// Target rotation angle in the plane of the first two coordinates.
    pub shift_angle_deg: f64,
    /// Target translation added to every coordinate.
    pub shift_translation: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Labeled target samples per new class.
    pub shots: usize,
    /// Labeled target samples per anchor class.
    pub shots_anchor: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            n_anchor: 2,
            n_new: 2,
            n_source_private: 0,
            class_sep: 2.0,
            class_std: 1.0,
            shift_angle_deg: 30.0,
            shift_translation: 0.5,
            train_per_class: 200,
            test_per_class: 50,
            shots: 5,
            shots_anchor: 5,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim < 2 {
            return fail(format!("feature_dim must be >= 2, got {}", self.feature_dim));
        }
        if self.n_anchor == 0 || self.n_new == 0 {
            return fail("need at least one anchor and one new class".into());
        }
        if !(self.class_std > 0.0 && self.class_std.is_finite()) {
            return fail(format!("class_std must be positive, got {}", self.class_std));
        }
        if !self.class_sep.is_finite() || !self.shift_angle_deg.is_finite() || !self.shift_translation.is_finite() {
            return fail("benchmark geometry must be finite".into());
        }
        if self.shots == 0 {
            return fail("shots must be >= 1".into());
        }
        if self.test_per_class == 0 || self.train_per_class == 0 {
            return fail("train and test counts per class must be >= 1".into());
        }
        if self.shots > self.train_per_class || self.shots_anchor > self.train_per_class {
            return fail(format!(
                "shots ({}, anchor {}) exceed the per-class train pool ({})",
                self.shots, self.shots_anchor, self.train_per_class
            ));
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<TaxonomySpec> {
        let n_target = self.n_anchor + self.n_new;
        let source = (0..self.n_anchor)
            .chain(n_target..n_target + self.n_source_private)
            .collect();
        TaxonomySpec::new(source, (0..n_target).collect())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn n_classes_total(&self) -> usize {
        self.n_anchor + self.n_new + self.n_source_private
    }
}

/// Rotation in the plane of the first two coordinates followed by a translation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    cos: f64,
    sin: f64,
    translation: f64,
}

impl DomainShift {
    pub fn new(angle_deg: f64, translation: f64) -> Self {
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        Self { cos, sin, translation }
    }

    pub fn apply(&self, x: &mut [f64]) {
        let (a, b) = (x[0], x[1]);
        x[0] = self.cos * a - self.sin * b;
        x[1] = self.sin * a + self.cos * b;
        for v in x.iter_mut() {
            *v += self.translation;
        }
    }

    pub fn invert(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v -= self.translation;
        }
        let (a, b) = (x[0], x[1]);
        x[0] = self.cos * a + self.sin * b;
        x[1] = -self.sin * a + self.cos * b;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Ground-truth class. Kept for unlabeled samples too; training never reads it.
    pub class: usize,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub taxonomy: TaxonomySpec,
    pub feature_dim: usize,
    pub config_hash: String,
}

impl Dataset {
    pub fn select(&self, domain: Domain, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.domain == domain && s.split == split)
            .collect()
    }

    pub fn source_train(&self) -> Vec<&Sample> {
        self.select(Domain::Source, Split::Train)
    }

    pub fn support(&self) -> Vec<&Sample> {
        self.select(Domain::Target, Split::Support)
    }

    pub fn unlabeled(&self) -> Vec<&Sample> {
        self.select(Domain::Target, Split::Unlabeled)
    }

    pub fn target_test(&self) -> Vec<&Sample> {
        self.select(Domain::Target, Split::Test)
    }

    /// Writes the delimited export: a header comment with the format version,
    /// config hash and label sets, a column line, then one
    /// `split,domain,class,f0,..` line per sample.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
        writeln!(
            out,
            "{DATASET_MAGIC} config_hash={} feature_dim={} source_classes={} target_classes={}",
            self.config_hash,
            self.feature_dim,
            join(self.taxonomy.source()),
            join(self.taxonomy.target()),
        )?;
        let cols: Vec<String> = (0..self.feature_dim).map(|i| format!("f{i}")).collect();
        writeln!(out, "split,domain,class,{}", cols.join(","))?;
        for s in &self.samples {
            write!(out, "{},{},{}", s.split, s.domain, s.class)?;
            for v in &s.features {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let rest = header
            .strip_prefix(DATASET_MAGIC)
            .ok_or_else(|| Error::Format(format!("unsupported dataset header {header:?}")))?;
        let mut hash = None;
        let mut dim = None;
        let mut source = None;
        let mut target = None;
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            v.split(';')
                .filter(|s| !s.is_empty())
                .map(|c| c.parse().map_err(|_| Error::Format(format!("bad class {c:?}"))))
                .collect()
        };
        for field in rest.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            match k {
                "config_hash" => hash = Some(v.to_string()),
                "feature_dim" => {
                    dim = Some(v.parse().map_err(|_| Error::Format(format!("bad feature_dim {v:?}")))?)
                }
                "source_classes" => source = Some(parse_list(v)?),
                "target_classes" => target = Some(parse_list(v)?),
                other => return Err(Error::Format(format!("unknown header field {other:?}"))),
            }
        }
        let missing = |what: &str| Error::Format(format!("dataset header lacks {what}"));
        let feature_dim: usize = dim.ok_or_else(|| missing("feature_dim"))?;
        let taxonomy = TaxonomySpec::new(
            source.ok_or_else(|| missing("source_classes"))?,
            target.ok_or_else(|| missing("target_classes"))?,
        )?;
        lines
            .next()
            .ok_or_else(|| Error::Format("dataset lacks a column line".into()))??;
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let mut field = |what: &str| {
                parts
                    .next()
                    .ok_or_else(|| Error::Format(format!("row lacks {what}: {line:?}")))
            };
            let split: Split = field("split")?.parse()?;
            let domain: Domain = field("domain")?.parse()?;
            let class_text = field("class")?;
            let class = class_text
                .parse()
                .map_err(|_| Error::Format(format!("bad class {class_text:?}")))?;
            let features: Vec<f64> = parts
                .map(|v| v.parse().map_err(|_| Error::Format(format!("bad feature {v:?}"))))
                .collect::<Result<_>>()?;
            if features.len() != feature_dim {
                return Err(Error::Format(format!(
                    "row has {} features, expected {feature_dim}",
                    features.len()
                )));
            }
            samples.push(Sample {
                features,
                class,
                domain,
                split,
            });
        }
        Ok(Self {
            samples,
            taxonomy,
            feature_dim,
            config_hash: hash.ok_or_else(|| missing("config_hash"))?,
        })
    }
}

/// Class means: `class_sep` times a unit direction drawn from a seeded stream.
pub fn class_means(config: &BenchmarkConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d65_616e_735f_7631);
    (0..config.n_classes_total())
        .map(|_| {
            let dir: Vec<f64> = (0..config.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = crate::linalg::norm(&dir);
            dir.into_iter().map(|v| config.class_sep * v / n).collect()
        })
        .collect()
}

/// Deterministic benchmark generation for a fixed config.
///
/// Every class of a domain draws `train_per_class + test_per_class` points
/// from `N(mean_c, class_std^2 I)`; the test split is the first
/// `test_per_class` points after a shuffle, so splits are stratified. Target
/// points are passed through the [`DomainShift`]. The target train pool is
/// split into the labeled support set and the unlabeled pool.
pub fn generate(config: &BenchmarkConfig) -> Result<Dataset> {
    config.validate()?;
    let taxonomy = config.taxonomy()?;
    let means = class_means(config);
    let shift = DomainShift::new(config.shift_angle_deg, config.shift_translation);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_class = config.train_per_class + config.test_per_class;
    let mut samples = Vec::with_capacity(
        per_class * (taxonomy.source().len() + taxonomy.target().len()),
    );

    let draw = |class: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        let mut pts: Vec<Vec<f64>> = (0..per_class)
            .map(|_| {
                means[class]
                    .iter()
                    .map(|m| {
                        let e: f64 = StandardNormal.sample(&mut *rng);
                        m + config.class_std * e
                    })
                    .collect()
            })
            .collect();
        pts.shuffle(rng);
        pts
    };

    for &class in taxonomy.source() {
        for (i, features) in draw(class, &mut rng).into_iter().enumerate() {
            let split = if i < config.test_per_class {
                Split::Test
            } else {
                Split::Train
            };
            samples.push(Sample {
                features,
                class,
                domain: Domain::Source,
                split,
            });
        }
    }
    for &class in taxonomy.target() {
        let labeled = if taxonomy.is_new(class) {
            config.shots
        } else {
            config.shots_anchor
        };
        for (i, mut features) in draw(class, &mut rng).into_iter().enumerate() {
            shift.apply(&mut features);
            let split = if i < config.test_per_class {
                Split::Test
            } else if i < config.test_per_class + labeled {
                Split::Support
            } else {
                Split::Unlabeled
            };
            samples.push(Sample {
                features,
                class,
                domain: Domain::Target,
                split,
            });
        }
    }
    Ok(Dataset {
        samples,
        taxonomy,
        feature_dim: config.feature_dim,
        config_hash: config.hash(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    /// `None` means the sample abstained.
    pub label: Option<usize>,
    pub confidence: f64,
}

/// Argmax pseudo-label over `allowed` classes (all classes when `None`), with
/// abstention below `threshold`. Ties go to the lowest class id.
pub fn pseudo_label_probs(p: &[f64], threshold: f64, allowed: Option<&[usize]>) -> PseudoLabel {
    let (label, confidence) = match allowed {
        None => {
            let c = argmax(p);
            (c, p[c])
        }
        Some(classes) => {
            let mut best = classes[0];
            for &c in &classes[1..] {
                if p[c] > p[best] || (p[c] == p[best] && c < best) {
                    best = c;
                }
            }
            (best, p[best])
        }
    };
    PseudoLabel {
        label: (confidence >= threshold).then_some(label),
        confidence,
    }
}

/// Online pseudo-labels for a batch of unlabeled inputs under the current model.
pub fn pseudo_label<X: AsRef<[f64]>>(
    model: &ModelParams,
    batch: &[X],
    threshold: f64,
    allowed: Option<&[usize]>,
) -> Result<Vec<PseudoLabel>> {
    batch
        .iter()
        .map(|x| Ok(pseudo_label_probs(&forward(model, x.as_ref())?.probs, threshold, allowed)))
        .collect()
}
