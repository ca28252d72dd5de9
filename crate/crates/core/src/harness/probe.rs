//! Flatness probe: accuracy change under random parameter perturbations of a
//! fixed relative norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::metrics::{accuracy, predict};
use crate::linalg::{dot, norm};
use crate::net::ModelParams;
use crate::taxdata::Sample;

pub const DEFAULT_PROBE_SAMPLES: usize = 50;

/// Accuracy measured before and after each perturbation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProbeAccuracy {
    /// Fraction of correctly classified test samples.
    #[default]
    Overall,
    /// Mean per-class recall over the classes present in the test split.
    ClassMean,
}

impl ProbeAccuracy {
    pub fn measure(self, model: &ModelParams, test: &[&Sample]) -> Result<f64> {
        match self {
            ProbeAccuracy::Overall => accuracy(model, test),
            ProbeAccuracy::ClassMean => {
                if test.is_empty() {
                    return Err(Error::Empty("accuracy"));
                }
                let predicted = predict(model, test)?;
                let mut counts: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
                for (s, p) in test.iter().zip(&predicted) {
                    let e = counts.entry(s.class).or_default();
                    e.0 += usize::from(s.class == *p);
                    e.1 += 1;
                }
                let recall: f64 = counts.values().map(|&(hit, n)| hit as f64 / n as f64).sum();
                Ok(100.0 * recall / counts.len() as f64)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessProbeResult {
    pub rhos: Vec<f64>,
    /// Mean accuracy change per rho, in percentage points.
    pub gaps: Vec<f64>,
    pub n_samples: usize,
    /// `per_sample[i][s]` is the gap of draw `s` at `rhos[i]`.
    pub per_sample: Vec<Vec<f64>>,
    pub metric: ProbeAccuracy,
    pub base_acc: f64,
    /// Largest relative violation of the norm constraint over all draws.
    pub max_norm_error: f64,
}

/// Step `delta >= 0` with `|theta + delta d| = (1 + rho) |theta|` for unit `d`.
///
/// Solves `delta^2 + 2 b delta - c = 0` with `b = <theta, d>` and
/// `c = ((1 + rho)^2 - 1) |theta|^2`, picking the cancellation-free form of
/// the nonnegative root.
pub fn perturbation_step(theta: &[f64], d: &[f64], rho: f64) -> f64 {
    assert!(rho >= 0.0, "rho must be nonnegative");
    if rho == 0.0 {
        return 0.0;
    }
    let b = dot(theta, d);
    let c = rho * (2.0 + rho) * dot(theta, theta);
    let disc = (b * b + c).sqrt();
    if b >= 0.0 {
        if disc == 0.0 {
            0.0
        } else {
            c / (b + disc)
        }
    } else {
        disc - b
    }
}

fn unit_direction(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let len = norm(&d);
        if len > 0.0 {
            return d.into_iter().map(|v| v / len).collect();
        }
    }
}

/// Monte-Carlo estimate of `E[Acc(theta*) - Acc(theta)]` per rho, with
/// directions uniform on the unit sphere over all parameters. The same
/// directions are reused for every rho.
pub fn flatness_probe(
    model: &ModelParams,
    test: &[&Sample],
    rhos: &[f64],
    n_samples: usize,
    seed: u64,
    metric: ProbeAccuracy,
) -> Result<FlatnessProbeResult> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("probe needs at least one sample".into()));
    }
    if let Some(r) = rhos.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
        return Err(Error::InvalidInput(format!("rho must be finite and >= 0, got {r}")));
    }
    let theta = model.flatten();
    let theta_norm = norm(&theta);
    if theta_norm == 0.0 && rhos.iter().any(|r| *r > 0.0) {
        return Err(Error::Degenerate("zero parameter vector has no perturbation of relative size".into()));
    }
    let base_acc = metric.measure(model, test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Vec<f64>> = (0..n_samples).map(|_| unit_direction(theta.len(), &mut rng)).collect();

    let mut perturbed = model.clone();
    let mut per_sample = Vec::with_capacity(rhos.len());
    let mut max_norm_error: f64 = 0.0;
    for &rho in rhos {
        let mut gaps = Vec::with_capacity(n_samples);
        for d in &directions {
            let delta = perturbation_step(&theta, d, rho);
            let moved: Vec<f64> = theta.iter().zip(d).map(|(t, di)| t + delta * di).collect();
            if theta_norm > 0.0 {
                let want = (1.0 + rho) * theta_norm;
                max_norm_error = max_norm_error.max((norm(&moved) - want).abs() / want);
            }
            perturbed.set_flat(&moved)?;
            gaps.push(metric.measure(&perturbed, test)? - base_acc);
        }
        per_sample.push(gaps);
    }
    let gaps = per_sample
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .collect();
    Ok(FlatnessProbeResult {
        rhos: rhos.to_vec(),
        gaps,
        n_samples,
        per_sample,
        metric,
        base_acc,
        max_norm_error,
    })
}
