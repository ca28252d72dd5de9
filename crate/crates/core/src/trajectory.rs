//! Gradient buffers, gradient statistics, principal-subspace projectors and the
//! gradient-statistics matching penalty with its exact parameter gradient.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linalg::{dot, energy_ratio, select_rank, svd, Matrix};
use crate::net::{
    backprop, batch_gradient, closed_form_ce_head_gradient, forward, one_hot, softmax_vjp,
    ForwardTrace, LossKind, ModelParams,
};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferGroup {
    SourceDomain,
    AnchorAverage,
    Historical,
}

/// Fixed-capacity FIFO of head gradients for one group.
#[derive(Clone, Debug)]
pub struct GradientBuffer {
    group: BufferGroup,
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl GradientBuffer {
    pub fn new(group: BufferGroup, capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!(
                "buffer capacity and dimension must be positive (got {capacity}, {dim})"
            )));
        }
        Ok(Self {
            group,
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    /// Appends `g`, evicting the oldest entry when at capacity.
    pub fn push(&mut self, g: Vec<f64>) -> Result<()> {
        ensure_len("GradientBuffer::push", self.dim, g.len())?;
        ensure_finite("GradientBuffer::push", &g)?;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(g);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn group(&self) -> BufferGroup {
        self.group
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.entries.len()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    /// The `dim x fill` matrix with one gradient per column.
    pub fn as_matrix(&self) -> Result<Matrix> {
        let cols: Vec<&[f64]> = self.entries.iter().map(Vec::as_slice).collect();
        Matrix::from_columns(&cols)
    }
}

/// Per-coordinate mean and unbiased variance of a set of gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub n: usize,
}

/// Mean and `(n-1)`-divisor variance; the variance of a single vector is zero.
pub fn stats<G: AsRef<[f64]>>(gradients: &[G]) -> Result<GradientStats> {
    let first = gradients.first().ok_or(Error::Empty("stats"))?;
    let dim = first.as_ref().len();
    let n = gradients.len();
    let mut mean = vec![0.0; dim];
    for g in gradients {
        let g = g.as_ref();
        ensure_len("stats", dim, g.len())?;
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut variance = vec![0.0; dim];
    if n > 1 {
        for g in gradients {
            for ((s, v), m) in variance.iter_mut().zip(g.as_ref()).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in &mut variance {
            *s /= (n - 1) as f64;
        }
    }
    Ok(GradientStats { mean, variance, n })
}

/// Orthonormal basis of a principal gradient subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    /// `w x r`, orthonormal columns.
    pub basis: Matrix,
    pub rank: usize,
    pub group: BufferGroup,
    pub built_at: usize,
    pub energy_ratio: f64,
}

impl Projector {
    /// `M M^T g`.
    pub fn project(&self, g: &[f64]) -> Result<Vec<f64>> {
        let coeffs = self.basis.tr_matvec(g)?;
        self.basis.matvec(&coeffs)
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }
}

/// Leading left singular vectors of the full buffer that keep a `tau` share of
/// its Frobenius energy. The caller clears the buffer afterwards.
pub fn build_projector(buffer: &GradientBuffer, tau: f64, iteration: usize) -> Result<Projector> {
    if !buffer.is_full() {
        return Err(Error::NotReady {
            fill: buffer.fill(),
            capacity: buffer.capacity(),
        });
    }
    let g = buffer.as_matrix()?;
    let dec = svd(&g)?;
    let rank = select_rank(&dec.sigma, tau)?;
    let cols: Vec<Vec<f64>> = (0..rank).map(|j| dec.u.column(j)).collect();
    Ok(Projector {
        basis: Matrix::from_columns(&cols)?,
        rank,
        group: buffer.group(),
        built_at: iteration,
        energy_ratio: energy_ratio(&dec.sigma, rank),
    })
}

fn apply(projector: Option<&Projector>, g: &[f64]) -> Result<Vec<f64>> {
    match projector {
        Some(p) => p.project(g),
        None => Ok(g.to_vec()),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unweighted discrepancy terms of the matching penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTerms {
    pub domain_mean: f64,
    pub domain_var: f64,
    /// Already averaged over new classes.
    pub class_mean: f64,
    pub class_var: f64,
}

impl PenaltyTerms {
    pub fn sum(&self) -> f64 {
        self.domain_mean + self.domain_var + self.class_mean + self.class_var
    }
}

pub fn penalty_terms(
    source: &GradientStats,
    target: &GradientStats,
    anchor: &GradientStats,
    new_classes: &[GradientStats],
) -> PenaltyTerms {
    let mut terms = PenaltyTerms {
        domain_mean: sq_dist(&source.mean, &target.mean),
        domain_var: sq_dist(&source.variance, &target.variance),
        ..PenaltyTerms::default()
    };
    if !new_classes.is_empty() {
        let k = new_classes.len() as f64;
        terms.class_mean = new_classes.iter().map(|s| sq_dist(&anchor.mean, &s.mean)).sum::<f64>() / k;
        terms.class_var = new_classes
            .iter()
            .map(|s| sq_dist(&anchor.variance, &s.variance))
            .sum::<f64>()
            / k;
    }
    terms
}

/// `lambda * (|m_s - m_t|^2 + |v_s - v_t|^2 + mean_i(|m_A - m_Ni|^2 + |v_A - v_Ni|^2))`.
///
/// With no new-class statistics the class term is omitted.
pub fn distillation_loss(
    source: &GradientStats,
    target: &GradientStats,
    anchor: &GradientStats,
    new_classes: &[GradientStats],
    lambda: f64,
) -> f64 {
    lambda * penalty_terms(source, target, anchor, new_classes).sum()
}

/// Frozen teacher side of the penalty: projectors and projected statistics
/// from the most recent full source and anchor buffers.
#[derive(Clone, Debug)]
pub struct Teacher {
    /// `None` matches unprojected gradients.
    pub source_projector: Option<Projector>,
    pub anchor_projector: Option<Projector>,
    pub source_stats: GradientStats,
    pub anchor_stats: GradientStats,
    pub built_at: usize,
}

impl Teacher {
    pub fn from_buffers(
        source: &GradientBuffer,
        anchor: &GradientBuffer,
        tau: f64,
        project: bool,
        iteration: usize,
    ) -> Result<Self> {
        let (source_projector, anchor_projector) = if project {
            (
                Some(build_projector(source, tau, iteration)?),
                Some(build_projector(anchor, tau, iteration)?),
            )
        } else {
            for b in [source, anchor] {
                if !b.is_full() {
                    return Err(Error::NotReady {
                        fill: b.fill(),
                        capacity: b.capacity(),
                    });
                }
            }
            (None, None)
        };
        let projected = |buf: &GradientBuffer, p: Option<&Projector>| -> Result<GradientStats> {
            let g: Vec<Vec<f64>> = buf.entries().map(|g| apply(p, g)).collect::<Result<_>>()?;
            stats(&g)
        };
        Ok(Self {
            source_stats: projected(source, source_projector.as_ref())?,
            anchor_stats: projected(anchor, anchor_projector.as_ref())?,
            source_projector,
            anchor_projector,
            built_at: iteration,
        })
    }
}

/// Which parts of the penalty are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermMask {
    pub domain: bool,
    pub class: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        domain: true,
        class: true,
    };
}

/// A labeled (or pseudo-labeled) input.
#[derive(Clone, Copy, Debug)]
pub struct LabeledRef<'a> {
    pub features: &'a [f64],
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct DistillationOutcome {
    /// `lambda * terms.sum()`
    pub value: f64,
    pub terms: PenaltyTerms,
    pub grad: ModelParams,
    /// No teacher yet: value and gradient are zero.
    pub warmup: bool,
}

/// Student statistics of one sample group and the means to differentiate them.
struct StudentGroup {
    traces: Vec<ForwardTrace>,
    residuals: Vec<Vec<f64>>,
    projected: Vec<Vec<f64>>,
    stats: GradientStats,
}

impl StudentGroup {
    fn new(params: &ModelParams, samples: &[LabeledRef<'_>], projector: Option<&Projector>) -> Result<Self> {
        let c = params.n_classes();
        let mut traces = Vec::with_capacity(samples.len());
        let mut residuals = Vec::with_capacity(samples.len());
        let mut projected = Vec::with_capacity(samples.len());
        for s in samples {
            if s.class >= c {
                return Err(Error::InvalidInput(format!("class {} outside the head", s.class)));
            }
            let trace = forward(params, s.features)?;
            let y = one_hot(s.class, c);
            let g = closed_form_ce_head_gradient(&trace, &y);
            projected.push(apply(projector, &g)?);
            residuals.push(trace.probs.iter().zip(&y).map(|(p, y)| p - y).collect());
            traces.push(trace);
        }
        let stats = stats(&projected)?;
        Ok(Self {
            traces,
            residuals,
            projected,
            stats,
        })
    }

    /// Adds `weight * d(|m_T - m|^2 + |v_T - v|^2)/dtheta` to `grad`.
    ///
    /// The head gradient of sample `i` is `g_i = vec(z_i e_i^T) ++ e_i` with
    /// `e_i = p_i - y_i`; its upstream `dL/dg_i` is pulled back through `e_i`
    /// (softmax Jacobian) and through `z_i` (backbone chain rule). Teacher
    /// statistics and the projector are constants.
    fn accumulate(
        &self,
        params: &ModelParams,
        teacher: &GradientStats,
        projector: Option<&Projector>,
        weight: f64,
        grad: &mut ModelParams,
    ) -> Result<()> {
        let n = self.projected.len() as f64;
        let c = params.n_classes();
        let m = params.feature_dim();
        let mean_pull: Vec<f64> = teacher
            .mean
            .iter()
            .zip(&self.stats.mean)
            .map(|(t, s)| -2.0 * (t - s) / n)
            .collect();
        let var_pull: Option<Vec<f64>> = (self.stats.n > 1).then(|| {
            teacher
                .variance
                .iter()
                .zip(&self.stats.variance)
                .map(|(t, s)| -4.0 * (t - s) / (n - 1.0))
                .collect()
        });
        for ((trace, e), q) in self.traces.iter().zip(&self.residuals).zip(&self.projected) {
            let mut dq = mean_pull.clone();
            if let Some(vp) = &var_pull {
                for (((d, v), qk), mk) in dq.iter_mut().zip(vp).zip(q).zip(&self.stats.mean) {
                    *d += v * (qk - mk);
                }
            }
            let dg = apply(projector, &dq)?;
            let (gw, gb) = dg.split_at(m * c);
            let z = &trace.features;
            let mut de = gb.to_vec();
            let mut dz = vec![0.0; m];
            for k in 0..m {
                let row = &gw[k * c..(k + 1) * c];
                for j in 0..c {
                    de[j] += row[j] * z[k];
                }
                dz[k] = dot(row, e);
            }
            let du = softmax_vjp(&trace.probs, &de);
            let g = backprop(params, trace, &du, Some(&dz))?;
            grad.axpy(weight, &g);
        }
        Ok(())
    }
}

/// Value, breakdown and exact parameter gradient of the matching penalty.
///
/// `target_batch` feeds the domain term (projected with the source projector);
/// each entry of `new_class_batches` is the samples of one new class, matched
/// against the anchor-average statistics under the anchor projector. Empty
/// class batches are skipped and the class term averages over the rest.
pub fn distillation_grad(
    params: &ModelParams,
    teacher: Option<&Teacher>,
    target_batch: &[LabeledRef<'_>],
    new_class_batches: &[Vec<LabeledRef<'_>>],
    lambda: f64,
    mask: TermMask,
) -> Result<DistillationOutcome> {
    let mut grad = params.zeros_like();
    let Some(teacher) = teacher else {
        return Ok(DistillationOutcome {
            value: 0.0,
            terms: PenaltyTerms::default(),
            grad,
            warmup: true,
        });
    };
    let mut terms = PenaltyTerms::default();
    if mask.domain && !target_batch.is_empty() {
        let p = teacher.source_projector.as_ref();
        let group = StudentGroup::new(params, target_batch, p)?;
        terms.domain_mean = sq_dist(&teacher.source_stats.mean, &group.stats.mean);
        terms.domain_var = sq_dist(&teacher.source_stats.variance, &group.stats.variance);
        group.accumulate(params, &teacher.source_stats, p, lambda, &mut grad)?;
    }
    if mask.class {
        let present: Vec<&Vec<LabeledRef<'_>>> =
            new_class_batches.iter().filter(|b| !b.is_empty()).collect();
        if !present.is_empty() {
            let k = present.len() as f64;
            let p = teacher.anchor_projector.as_ref();
            for batch in present {
                let group = StudentGroup::new(params, batch, p)?;
                terms.class_mean += sq_dist(&teacher.anchor_stats.mean, &group.stats.mean) / k;
                terms.class_var += sq_dist(&teacher.anchor_stats.variance, &group.stats.variance) / k;
                group.accumulate(params, &teacher.anchor_stats, p, lambda / k, &mut grad)?;
            }
        }
    }
    Ok(DistillationOutcome {
        value: lambda * terms.sum(),
        terms,
        grad,
        warmup: false,
    })
}

/// Projected statistics of the closed-form head gradients of `samples`.
/// Independent of [`distillation_grad`]; used to evaluate the penalty alone.
pub fn student_stats(
    params: &ModelParams,
    samples: &[LabeledRef<'_>],
    projector: Option<&Projector>,
) -> Result<GradientStats> {
    Ok(StudentGroup::new(params, samples, projector)?.stats)
}

/// Predicted and measured change of the new-class loss after one step along
/// `sum_i grad L_{a_i} + grad L_q`.
///
/// Returns `(predicted, actual)` where `predicted = -mu <grad L_q, step>` is the
/// first-order term and `actual = L_q(theta - mu * step) - L_q(theta)`.
pub fn first_order_descent_check(
    params: &ModelParams,
    anchor_batches: &[Vec<(Vec<f64>, Vec<f64>)>],
    new_batch: &[(Vec<f64>, Vec<f64>)],
    mu: f64,
) -> Result<(f64, f64)> {
    let split = |batch: &[(Vec<f64>, Vec<f64>)]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        batch.iter().cloned().unzip()
    };
    let (xq, yq) = split(new_batch);
    let (loss_q, grad_q) = batch_gradient(params, &xq, &yq, LossKind::CrossEntropy)?;
    let mut step = grad_q.clone();
    for batch in anchor_batches {
        let (xa, ya) = split(batch);
        let (_, grad_a) = batch_gradient(params, &xa, &ya, LossKind::CrossEntropy)?;
        step.axpy(1.0, &grad_a);
    }
    let predicted = -mu * grad_q.dot(&step);
    let mut moved = params.clone();
    moved.axpy(-mu, &step);
    let (loss_moved, _) = batch_gradient(&moved, &xq, &yq, LossKind::CrossEntropy)?;
    Ok((predicted, loss_moved - loss_q))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ranks {
    pub source: Option<usize>,
    pub anchor: Option<usize>,
    pub historical: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferFill {
    pub source: usize,
    pub anchor: usize,
    pub historical: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub total: f64,
    pub head: f64,
    pub backbone: f64,
}

/// One JSON-lines record per training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub iteration: usize,
    pub erm_loss: f64,
    pub penalty: f64,
    pub penalty_terms: PenaltyTerms,
    pub ranks: Ranks,
    pub buffer_fill: BufferFill,
    pub grad_norm: GradNorms,
    pub warmup: bool,
}
