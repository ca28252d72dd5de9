#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajdistill::linalg::{norm, select_rank, svd, Matrix};
use trajdistill::net::{
    backward, ce_factorization_check, closed_form_ce_head_gradient, forward, loss, one_hot, per_sample_head_gradients,
    softmax, LossKind, ModelParams,
};
use trajdistill::trajectory::{
    build_projector, distillation_grad, first_order_descent_check, stats, BufferGroup, GradientBuffer, LabeledRef, Projector, Teacher,
    TermMask,
};

pub const FD_STEP: f64 = 1e-5;

pub fn seeded_model(widths: &[usize], seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(widths, &mut rng).unwrap();
    for v in p.values_mut() {
        if *v == 0.0 {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub fn seeded_inputs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

pub fn seeded_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// True when no pre-activation of any input sits within `margin` of the ReLU kink.
pub fn clear_of_kinks(params: &ModelParams, inputs: &[Vec<f64>], margin: f64) -> bool {
    inputs.iter().all(|x| {
        forward(params, x)
            .unwrap()
            .pre_activations
            .iter()
            .flatten()
            .all(|h| h.abs() > margin)
    })
}

/// Model and inputs re-seeded until finite differences cannot cross a kink.
pub fn smooth_config(widths: &[usize], n: usize, seed: u64) -> (ModelParams, Vec<Vec<f64>>) {
    for attempt in 0..1000 {
        let s = seed * 1000 + attempt;
        let params = seeded_model(widths, s);
        let inputs = seeded_inputs(n, widths[0], s ^ 0xabc);
        if clear_of_kinks(&params, &inputs, 1e-3) {
            return (params, inputs);
        }
    }
    panic!("no kink-free configuration found");
}

/// Central differences of `f` over every flat parameter coordinate.
pub fn fd_gradient(params: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = params.flatten();
    let mut p = params.clone();
    (0..base.len())
        .map(|i| {
            let mut x = base.clone();
            x[i] = base[i] + FD_STEP;
            p.set_flat(&x).unwrap();
            let up = f(&p);
            x[i] = base[i] - FD_STEP;
            p.set_flat(&x).unwrap();
            let down = f(&p);
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}

/// Teacher built from seeded random buffers of the model's head dimension.
pub fn seeded_teacher(params: &ModelParams, k: usize, project: bool, seed: u64) -> Teacher {
    let w = params.head_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |group| {
        let mut b = GradientBuffer::new(group, k, w).unwrap();
        for _ in 0..k {
            b.push((0..w).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        }
        b
    };
    let s = fill(BufferGroup::SourceDomain);
    let a = fill(BufferGroup::AnchorAverage);
    Teacher::from_buffers(&s, &a, 0.98, project, 0).unwrap()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Penalty evaluated from backprop head gradients, projected and summarised
/// independently of the analytic gradient path.
pub fn oracle_penalty(
    params: &ModelParams,
    teacher: &Teacher,
    target: &[LabeledRef<'_>],
    classes: &[Vec<LabeledRef<'_>>],
    lambda: f64,
    mask: TermMask,
) -> f64 {
    let group = |batch: &[LabeledRef<'_>], proj: Option<&Projector>| {
        let xs: Vec<&[f64]> = batch.iter().map(|r| r.features).collect();
        let ys: Vec<Vec<f64>> = batch.iter().map(|r| one_hot(r.class, params.n_classes())).collect();
        let g: Vec<Vec<f64>> = per_sample_head_gradients(params, &xs, &ys, LossKind::CrossEntropy)
            .unwrap()
            .into_iter()
            .map(|g| match proj {
                Some(p) => p.project(&g.values).unwrap(),
                None => g.values,
            })
            .collect();
        stats(&g).unwrap()
    };
    let mut total = 0.0;
    if mask.domain && !target.is_empty() {
        let t = group(target, teacher.source_projector.as_ref());
        total += sq(&teacher.source_stats.mean, &t.mean) + sq(&teacher.source_stats.variance, &t.variance);
    }
    if mask.class {
        let present: Vec<_> = classes.iter().filter(|b| !b.is_empty()).collect();
        for b in &present {
            let s = group(b, teacher.anchor_projector.as_ref());
            total += (sq(&teacher.anchor_stats.mean, &s.mean) + sq(&teacher.anchor_stats.variance, &s.variance))
                / present.len() as f64;
        }
    }
    lambda * total
}

pub fn loss_at(params: &ModelParams, x: &[f64], y: &[f64], kind: LossKind) -> f64 {
    loss(kind, &forward(params, x).unwrap().probs, y).unwrap()
}

pub fn soft_label(c: usize, seed: u64) -> Vec<f64> {
    softmax(&seeded_inputs(1, c, seed).remove(0))
}

/// Worst relative error of backprop against central differences over small
/// networks, both losses, one-hot and soft labels, plus one wide network.
pub fn backprop_fd_worst() -> f64 {
    let shapes: [&[usize]; 3] = [&[3, 4], &[4, 6, 3], &[5, 8, 7, 4]];
    let mut worst: f64 = 0.0;
    for (i, widths) in shapes.iter().enumerate() {
        for kind in [LossKind::CrossEntropy, LossKind::Dice] {
            let (params, inputs) = smooth_config(widths, 1, i as u64 + 1);
            let c = params.n_classes();
            for y in [one_hot(1, c), soft_label(c, 7 + i as u64)] {
                let x = &inputs[0];
                let analytic = backward(&params, &forward(&params, x).unwrap(), &y, kind).unwrap().flatten();
                let numeric = fd_gradient(&params, |p| loss_at(p, x, &y, kind));
                worst = worst.max(max_rel_err(&analytic, &numeric, 1e-6));
            }
        }
    }
    let (params, inputs) = smooth_config(&[6, 32, 32, 4], 1, 11);
    let y = one_hot(2, 4);
    let x = &inputs[0];
    let analytic = backward(&params, &forward(&params, x).unwrap(), &y, LossKind::CrossEntropy).unwrap().flatten();
    let numeric = fd_gradient(&params, |p| loss_at(p, x, &y, LossKind::CrossEntropy));
    worst.max(max_rel_err(&analytic, &numeric, 1e-6))
}

/// Largest absolute gap between the closed-form head gradient and backprop.
pub fn closed_form_worst(seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let params = seeded_model(&[5, 7, 4], seed);
            let x = seeded_inputs(1, 5, seed + 100).remove(0);
            let y = one_hot((seed % 4) as usize, 4);
            let trace = forward(&params, &x).unwrap();
            let closed = closed_form_ce_head_gradient(&trace, &y);
            let bp = backward(&params, &trace, &y, LossKind::CrossEntropy).unwrap().head_flat();
            closed.iter().zip(&bp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

pub struct PenaltyCase {
    pub params: ModelParams,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl PenaltyCase {
    /// Four classes, 2 and 3 new, both present and class 3 at least twice.
    pub fn new(seed: u64) -> Self {
        let (params, inputs) = smooth_config(&[4, 6, 4], 10, seed);
        let mut labels = seeded_labels(10, 4, seed + 50);
        labels[0] = 2;
        labels[1] = 3;
        labels[2] = 3;
        Self { params, inputs, labels }
    }

    pub fn refs(&self) -> Vec<LabeledRef<'_>> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .map(|(x, &class)| LabeledRef { features: x, class })
            .collect()
    }
}

pub fn by_class<'a>(refs: &[LabeledRef<'a>], classes: &[usize]) -> Vec<Vec<LabeledRef<'a>>> {
    classes
        .iter()
        .map(|&k| refs.iter().copied().filter(|r| r.class == k).collect())
        .collect()
}

/// Worst (value, gradient) relative errors of the analytic penalty path
/// against the oracle penalty and its central differences.
pub fn distillation_fd_worst() -> (f64, f64) {
    let mut worst = (0.0_f64, 0.0_f64);
    for seed in 0..4 {
        for project in [true, false] {
            for mask in [
                TermMask::ALL,
                TermMask { domain: true, class: false },
                TermMask { domain: false, class: true },
            ] {
                let case = PenaltyCase::new(seed + 1);
                let teacher = seeded_teacher(&case.params, 6, project, seed + 20);
                let refs = case.refs();
                let classes = by_class(&refs, &[2, 3]);
                let out = distillation_grad(&case.params, Some(&teacher), &refs, &classes, 10.0, mask).unwrap();
                let oracle = oracle_penalty(&case.params, &teacher, &refs, &classes, 10.0, mask);
                let numeric = fd_gradient(&case.params, |p| oracle_penalty(p, &teacher, &refs, &classes, 10.0, mask));
                worst.0 = worst.0.max(rel_err(out.value, oracle, 1e-12));
                worst.1 = worst.1.max(max_rel_err(&out.grad.flatten(), &numeric, 1e-6));
            }
        }
    }
    worst
}

/// Worst relative gap between the two sides of the single-sample CE
/// factorisation over `n` seeded networks of varying shape.
pub fn factorization_worst(n: u64) -> f64 {
    (0..n)
        .map(|seed| {
            let c = 2 + (seed % 5) as usize;
            let widths = [3 + (seed % 4) as usize, 5 + (seed % 7) as usize, c];
            let params = seeded_model(&widths, seed);
            let x = seeded_inputs(1, widths[0], seed + 1000).remove(0);
            let (lhs, rhs) = ce_factorization_check(&params, &x).unwrap();
            rel_err(lhs, rhs, 1e-300)
        })
        .fold(0.0, f64::max)
}

/// Relative error of the first-order prediction at each `mu`, for a smooth
/// four-class configuration with two anchor batches and one new-class batch.
pub fn first_order_errors(seed: u64, mus: &[f64]) -> Vec<f64> {
    let (params, inputs) = smooth_config(&[4, 6, 4], 12, seed);
    let batch = |range: std::ops::Range<usize>, class: usize| -> Vec<(Vec<f64>, Vec<f64>)> {
        inputs[range].iter().map(|x| (x.clone(), one_hot(class, 4))).collect()
    };
    let anchors = vec![batch(0..4, 0), batch(4..8, 1)];
    let new = batch(8..12, 2);
    mus.iter()
        .map(|&mu| {
            let (predicted, actual) = first_order_descent_check(&params, &anchors, &new, mu).unwrap();
            (predicted - actual).abs() / actual.abs()
        })
        .collect()
}

pub fn seeded_matrix(rows: usize, cols: usize, rank: Option<usize>, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: usize, c: usize| {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    match rank {
        Some(k) => draw(rows, k).matmul(&draw(k, cols)).unwrap(),
        None => draw(rows, cols),
    }
}

fn orthonormality_error(m: &Matrix) -> f64 {
    m.transpose().matmul(m).unwrap().max_abs_diff(&Matrix::identity(m.cols())).unwrap()
}

/// Worst reconstruction error (relative to the largest entry) and worst
/// orthonormality error of `U` and `V` over `seeds` seeded matrices of mixed
/// shape and rank.
pub fn svd_worst(seeds: u64) -> (f64, f64) {
    let mut worst = (0.0_f64, 0.0_f64);
    for seed in 0..seeds {
        let rows = 1 + (seed % 23) as usize;
        let cols = 1 + ((seed * 7) % 17) as usize;
        let rank = (seed % 3 == 0).then(|| 1 + (seed as usize % rows.min(cols)));
        let g = seeded_matrix(rows, cols, rank, seed);
        let dec = svd(&g).unwrap();
        let scale = g.as_slice().iter().fold(1e-300_f64, |m, v| m.max(v.abs()));
        worst.0 = worst.0.max(dec.reconstruct().max_abs_diff(&g).unwrap() / scale);
        worst.1 = worst.1.max(orthonormality_error(&dec.u)).max(orthonormality_error(&dec.v));
    }
    worst
}

/// Builds a projector from a buffer filled with seeded (possibly low-rank) data.
pub fn seeded_projector(dim: usize, capacity: usize, rank: Option<usize>, tau: f64, seed: u64) -> Projector {
    let g = seeded_matrix(dim, capacity, rank, seed);
    let mut buf = GradientBuffer::new(BufferGroup::Historical, capacity, dim).unwrap();
    for j in 0..capacity {
        buf.push(g.column(j)).unwrap();
    }
    build_projector(&buf, tau, 0).unwrap()
}

/// Worst idempotence gap `|P(Pg) - Pg| / |g|` and worst contraction excess
/// `(|Pg| - |g|) / |g|` over seeded projectors and vectors.
pub fn projection_worst(seeds: u64) -> (f64, f64) {
    let mut worst = (0.0_f64, f64::NEG_INFINITY);
    for seed in 0..seeds {
        let dim = 2 + (seed % 30) as usize;
        let cap = 1 + (seed % 9) as usize;
        let p = seeded_projector(dim, cap, None, 0.5 + 0.05 * (seed % 10) as f64, seed);
        let g = seeded_inputs(1, dim, seed + 7).remove(0);
        let pg = p.project(&g).unwrap();
        let ppg = p.project(&pg).unwrap();
        let gn = norm(&g);
        let gap = norm(&pg.iter().zip(&ppg).map(|(a, b)| a - b).collect::<Vec<_>>()) / gn;
        worst.0 = worst.0.max(gap);
        worst.1 = worst.1.max((norm(&pg) - gn) / gn);
    }
    worst
}

/// Rank chosen by a direct scan of cumulative energy shares, from the top.
pub fn direct_rank(sigma: &[f64], tau: f64) -> usize {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut kept = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        kept += s * s;
        if kept / total >= tau {
            return i + 1;
        }
    }
    sigma.len()
}

/// Mean and variance from all pairwise differences, independent of the
/// centred two-pass form.
pub fn brute_stats(gs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = gs.len();
    let dim = gs[0].len();
    let mean: Vec<f64> = (0..dim).map(|d| gs.iter().map(|g| g[d]).sum::<f64>() / n as f64).collect();
    let var = (0..dim)
        .map(|d| {
            if n < 2 {
                return 0.0;
            }
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    s += (gs[i][d] - gs[j][d]).powi(2);
                }
            }
            s / (n * (n - 1)) as f64
        })
        .collect();
    (mean, var)
}

/// Worst absolute gap between `stats` and the pairwise oracle.
pub fn stats_worst(seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let n = 1 + (seed % 12) as usize;
            let gs = seeded_inputs(n, 1 + (seed % 9) as usize, seed);
            let s = stats(&gs).unwrap();
            let (m, v) = brute_stats(&gs);
            s.mean
                .iter()
                .zip(&m)
                .chain(s.variance.iter().zip(&v))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Number of seeded spectra on which `select_rank` disagrees with the direct scan.
pub fn select_rank_mismatches(seeds: u64) -> usize {
    (0..seeds)
        .filter(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 1 + (seed % 12) as usize;
            let mut sigma: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..3.0)).collect();
            sigma.sort_by(|a, b| b.total_cmp(a));
            sigma[0] += 0.1;
            let tau = rng.random_range(0.05..=1.0);
            select_rank(&sigma, tau).unwrap() != direct_rank(&sigma, tau)
        })
        .count()
}
