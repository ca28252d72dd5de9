//! Confusion-matrix metrics over the target label set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::Variant;
use crate::net::{argmax, forward, ModelParams};
use crate::taxdata::{Sample, TaxonomySpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub new_class: bool,
}

/// All scores are percentages. Starred scores cover new classes only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub seed: u64,
    pub shots: usize,
    #[serde(rename = "mAcc")]
    pub macc: f64,
    #[serde(rename = "mAcc_star")]
    pub macc_star: f64,
    #[serde(rename = "mF1")]
    pub mf1: f64,
    #[serde(rename = "mF1_star")]
    pub mf1_star: f64,
    /// Overall accuracy on the evaluated samples.
    pub acc: f64,
    pub final_erm_loss: f64,
    pub final_penalty: f64,
    pub wall_clock_s: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Counts indexed `confusion[truth][prediction]`.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Metrics of `predicted` against `truth`. Classes without test samples are
/// left out of the macro averages and reported in `warnings`.
pub fn report_from_predictions(
    truth: &[usize],
    predicted: &[usize],
    taxonomy: &TaxonomySpec,
    variant: Variant,
    seed: u64,
    shots: usize,
) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let c = taxonomy.n_target();
    if let Some(&bad) = truth.iter().chain(predicted).find(|&&k| k >= c) {
        return Err(Error::InvalidInput(format!("class {bad} outside the target label set")));
    }
    let confusion = confusion_matrix(truth, predicted, c);
    let mut per_class = Vec::new();
    let mut warnings = Vec::new();
    for k in 0..c {
        let support: usize = confusion[k].iter().sum();
        if support == 0 {
            warnings.push(format!("class {k} has no test samples; excluded from macro averages"));
            continue;
        }
        let tp = confusion[k][k] as f64;
        let predicted_k: usize = confusion.iter().map(|row| row[k]).sum();
        let fp = predicted_k as f64 - tp;
        let fn_ = support as f64 - tp;
        per_class.push(ClassMetrics {
            class: k,
            support,
            recall: 100.0 * tp / support as f64,
            precision: if predicted_k == 0 { 0.0 } else { 100.0 * tp / predicted_k as f64 },
            f1: 100.0 * 2.0 * tp / (2.0 * tp + fp + fn_),
            new_class: taxonomy.is_new(k),
        });
    }
    let correct = truth.iter().zip(predicted).filter(|(t, p)| t == p).count();
    let new = || per_class.iter().filter(|m| m.new_class);
    Ok(MetricsReport {
        variant,
        seed,
        shots,
        macc: mean(per_class.iter().map(|m| m.recall)),
        macc_star: mean(new().map(|m| m.recall)),
        mf1: mean(per_class.iter().map(|m| m.f1)),
        mf1_star: mean(new().map(|m| m.f1)),
        acc: 100.0 * correct as f64 / truth.len() as f64,
        final_erm_loss: 0.0,
        final_penalty: 0.0,
        wall_clock_s: 0.0,
        per_class,
        confusion,
        warnings,
    })
}

pub fn predict(model: &ModelParams, samples: &[&Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| Ok(argmax(&forward(model, &s.features)?.probs)))
        .collect()
}

/// Evaluates `model` on `test` (normally the target test split).
pub fn evaluate(
    model: &ModelParams,
    test: &[&Sample],
    taxonomy: &TaxonomySpec,
    variant: Variant,
    seed: u64,
    shots: usize,
) -> Result<MetricsReport> {
    if model.n_classes() != taxonomy.n_target() {
        return Err(Error::InvalidInput(format!(
            "head has {} outputs but the target label set has {} classes",
            model.n_classes(),
            taxonomy.n_target()
        )));
    }
    let truth: Vec<usize> = test.iter().map(|s| s.class).collect();
    let predicted = predict(model, test)?;
    report_from_predictions(&truth, &predicted, taxonomy, variant, seed, shots)
}

/// Overall accuracy in percent.
pub fn accuracy(model: &ModelParams, test: &[&Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let predicted = predict(model, test)?;
    let correct = test.iter().zip(&predicted).filter(|(s, p)| s.class == **p).count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}
