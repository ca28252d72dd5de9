//! The training loop: paired source/target batches, online pseudo-labels,
//! buffer bookkeeping, the distillation penalty and historical-subspace steps.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{evaluate, MetricsReport};
use crate::linalg::{axpy, norm};
use crate::net::{batch_gradient, closed_form_ce_head_gradient, forward, one_hot, LossKind, ModelParams};
use crate::optimizer::{OptState, Renewal};
use crate::taxdata::{generate, pseudo_label_probs, Dataset, Sample};
use crate::trajectory::{
    distillation_grad, BufferFill, BufferGroup, GradNorms, GradientBuffer, LabeledRef, Ranks, Teacher,
    TrajectoryRecord, LOG_SCHEMA_VERSION,
};

const INIT_STREAM: u64 = 0x696e_6974_5f70_6172;
const BATCH_STREAM: u64 = 0x6261_7463_685f_7631;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrajectoryRecord>,
    pub report: MetricsReport,
    pub dataset: Dataset,
}

/// Generates the benchmark for `cfg` and trains on it.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = generate(&cfg.benchmark())?;
    let (params, log, report) = train_on(cfg, &dataset)?;
    Ok(TrainOutcome {
        params,
        log,
        report,
        dataset,
    })
}

pub fn initial_params(cfg: &ExperimentConfig) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
    ModelParams::init(&cfg.widths(), &mut rng)
}

fn draw<'a>(pool: &[&'a Sample], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Sample> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn mean_of(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; vectors[0].len()];
    let w = 1.0 / vectors.len() as f64;
    for v in vectors {
        axpy(w, v, &mut m);
    }
    m
}

fn erm_part(params: &ModelParams, batch: &[(&[f64], usize)]) -> Result<Option<(f64, ModelParams)>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let c = params.n_classes();
    let xs: Vec<&[f64]> = batch.iter().map(|(x, _)| *x).collect();
    let ys: Vec<Vec<f64>> = batch.iter().map(|(_, y)| one_hot(*y, c)).collect();
    batch_gradient(params, &xs, &ys, LossKind::CrossEntropy).map(Some)
}

fn grad_norms(g: &ModelParams) -> GradNorms {
    let head = norm(&g.head_flat());
    let backbone = g
        .backbone
        .iter()
        .map(|l| {
            let w = norm(l.weight.as_slice());
            let b = norm(&l.bias);
            w * w + b * b
        })
        .sum::<f64>()
        .sqrt();
    GradNorms {
        total: (head * head + backbone * backbone).sqrt(),
        head,
        backbone,
    }
}

fn sgd(params: &mut ModelParams, grad: &ModelParams, lr: f64) {
    params.axpy(-lr, grad);
}

/// Trains on an existing dataset and evaluates on its target test split.
pub fn train_on(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(ModelParams, Vec<TrajectoryRecord>, MetricsReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let variant = cfg.variant;
    let tax = &dataset.taxonomy;
    let c = tax.n_target();
    let mut params = initial_params(cfg)?;
    if params.input_dim() != dataset.feature_dim || params.n_classes() != c {
        return Err(Error::Config("model shape does not match the dataset".into()));
    }
    let w = params.head_dim();

    // the head only covers target classes, so source-private samples are unusable
    let source: Vec<&Sample> = dataset
        .source_train()
        .into_iter()
        .filter(|s| tax.in_target(s.class))
        .collect();
    let support = dataset.support();
    let unlabeled = dataset.unlabeled();
    if support.is_empty() {
        return Err(Error::Config("empty support set".into()));
    }
    if variant.uses_source() && (source.is_empty() || unlabeled.is_empty()) {
        return Err(Error::Config("variant needs source and unlabeled target samples".into()));
    }
    let allowed = cfg.pseudo_anchor_only.then(|| tax.anchors().to_vec());

    let mask = variant.penalty_mask();
    let mut source_buf = GradientBuffer::new(BufferGroup::SourceDomain, cfg.buffer_k, w)?;
    let mut anchor_buf = GradientBuffer::new(BufferGroup::AnchorAverage, cfg.buffer_k, w)?;
    let mut teacher: Option<Teacher> = None;
    let mut opt = OptState::new(cfg.lr, cfg.kappa, cfg.tau, cfg.buffer_t, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut warnings = Vec::new();

    for it in 0..cfg.iterations {
        let source_batch = if variant.uses_source() {
            draw(&source, cfg.batch_size, &mut rng)
        } else {
            Vec::new()
        };
        let mut target: Vec<(&[f64], usize)> = Vec::with_capacity(cfg.batch_size);
        if variant.uses_source() {
            for s in draw(&support, cfg.support_per_batch, &mut rng) {
                target.push((&s.features, s.class));
            }
            for s in draw(&unlabeled, cfg.batch_size - cfg.support_per_batch, &mut rng) {
                let p = forward(&params, &s.features)?.probs;
                if let Some(label) = pseudo_label_probs(&p, cfg.pseudo_threshold, allowed.as_deref()).label {
                    target.push((&s.features, label));
                }
            }
        } else {
            for s in draw(&support, cfg.batch_size, &mut rng) {
                target.push((&s.features, s.class));
            }
        }
        let source_pairs: Vec<(&[f64], usize)> = source_batch.iter().map(|s| (s.features.as_slice(), s.class)).collect();

        let mut grad = params.zeros_like();
        let mut erm = 0.0;
        for part in [erm_part(&params, &source_pairs)?, erm_part(&params, &target)?].into_iter().flatten() {
            erm += part.0;
            grad.axpy(1.0, &part.1);
        }

        let mut penalty = 0.0;
        let mut terms = Default::default();
        if let Some(mask) = mask {
            let head_grads: Vec<(usize, Vec<f64>)> = source_pairs
                .iter()
                .map(|&(x, y)| Ok((y, closed_form_ce_head_gradient(&forward(&params, x)?, &one_hot(y, c)))))
                .collect::<Result<_>>()?;
            let all: Vec<Vec<f64>> = head_grads.iter().map(|(_, g)| g.clone()).collect();
            source_buf.push(mean_of(&all))?;
            let class_means: Vec<Vec<f64>> = tax
                .anchors()
                .iter()
                .filter_map(|&a| {
                    let members: Vec<Vec<f64>> =
                        head_grads.iter().filter(|(y, _)| *y == a).map(|(_, g)| g.clone()).collect();
                    (!members.is_empty()).then(|| mean_of(&members))
                })
                .collect();
            if !class_means.is_empty() {
                anchor_buf.push(mean_of(&class_means))?;
            }
            if source_buf.is_full() && anchor_buf.is_full() {
                match Teacher::from_buffers(&source_buf, &anchor_buf, cfg.tau, variant.projects_statistics(), it) {
                    Ok(t) => teacher = Some(t),
                    Err(Error::Degenerate(m)) => warnings.push(format!("iteration {it}: teacher kept ({m})")),
                    Err(e) => return Err(e),
                }
                source_buf.clear();
                anchor_buf.clear();
            }

            let target_refs: Vec<LabeledRef<'_>> =
                target.iter().map(|&(features, class)| LabeledRef { features, class }).collect();
            let class_batches: Vec<Vec<LabeledRef<'_>>> = tax
                .new_classes()
                .iter()
                .map(|&k| target_refs.iter().copied().filter(|r| r.class == k).collect())
                .collect();
            let out = distillation_grad(&params, teacher.as_ref(), &target_refs, &class_batches, cfg.lambda, mask)?;
            penalty = out.value;
            terms = out.terms;
            grad.axpy(1.0, &out.grad);
        }

        if !erm.is_finite() || !penalty.is_finite() || !grad.is_finite() {
            return Err(Error::Training {
                iteration: it,
                message: format!(
                    "non-finite objective (erm {erm}, penalty {penalty}, |grad| {}, |theta| {})",
                    grad.norm(),
                    params.norm()
                ),
            });
        }

        let norms = grad_norms(&grad);
        if cfg.grad_clip > 0.0 && norms.total > cfg.grad_clip {
            grad.scale(cfg.grad_clip / norms.total);
        }
        if variant.historical() {
            opt.step_model(&mut params, &grad)?;
            if opt.maybe_renew(it)? == Renewal::Degenerate {
                warnings.push(format!("iteration {it}: historical projector kept (zero buffer)"));
            }
        } else {
            sgd(&mut params, &grad, cfg.lr);
        }
        if !params.is_finite() {
            return Err(Error::Training {
                iteration: it,
                message: "parameters left the finite range".into(),
            });
        }

        log.push(TrajectoryRecord {
            schema_version: LOG_SCHEMA_VERSION,
            iteration: it,
            erm_loss: erm,
            penalty,
            penalty_terms: terms,
            ranks: Ranks {
                source: teacher.as_ref().and_then(|t| t.source_projector.as_ref()).map(|p| p.rank),
                anchor: teacher.as_ref().and_then(|t| t.anchor_projector.as_ref()).map(|p| p.rank),
                historical: opt.projector().map(|p| p.rank),
            },
            buffer_fill: BufferFill {
                source: source_buf.fill(),
                anchor: anchor_buf.fill(),
                historical: opt.buffer().fill(),
            },
            grad_norm: norms,
            warmup: mask.is_some() && teacher.is_none(),
        });
    }

    let mut report = evaluate(&params, &dataset.target_test(), tax, variant, cfg.seed, cfg.shots)?;
    if let Some(last) = log.last() {
        report.final_erm_loss = last.erm_loss;
        report.final_penalty = last.penalty;
    }
    if cfg.record_wall_clock {
        report.wall_clock_s = started.elapsed().as_secs_f64();
    }
    report.warnings.extend(warnings);
    Ok((params, log, report))
}
