mod common;

use common::*;
use proptest::prelude::*;
use trajdistill::linalg::{dot, energy_ratio, norm, select_rank, svd, Matrix};
use trajdistill::optimizer::OptState;
use trajdistill::trajectory::{stats, BufferGroup, GradientBuffer, Projector};

fn matrix_strategy() -> impl Strategy<Value = Matrix> {
    (1usize..14, 1usize..14).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

fn spectrum_strategy() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..5.0, 1..16).prop_map(|mut s| {
        s.sort_by(|a, b| b.total_cmp(a));
        s[0] += 0.01;
        s
    })
}

#[test]
fn seeded_algebraic_suite() {
    let (recon, orth) = svd_worst(200);
    assert!(recon <= 1e-8 && orth <= 1e-8, "svd {recon:e} {orth:e}");
    let (idem, contraction) = projection_worst(200);
    assert!(idem <= 1e-10 && contraction <= 1e-10, "projection {idem:e} {contraction:e}");
    assert_eq!(select_rank_mismatches(500), 0);
    assert!(stats_worst(200) <= 1e-10);
}

#[test]
fn duplicate_and_zero_columns_converge() {
    let mut cols = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]; 4];
    cols.push(vec![0.0; 5]);
    cols.push(vec![-1.0, 0.5, 0.0, 2.0, 1.0]);
    let g = Matrix::from_columns(&cols).unwrap();
    let dec = svd(&g).unwrap();
    assert!(dec.reconstruct().max_abs_diff(&g).unwrap() <= 1e-10);
    assert_eq!(dec.sigma.iter().filter(|s| **s > 1e-9).count(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(g in matrix_strategy()) {
        let dec = svd(&g).unwrap();
        let scale = g.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(dec.reconstruct().max_abs_diff(&g).unwrap() <= 1e-8 * scale);
        let k = dec.sigma.len();
        prop_assert_eq!(k, g.rows().min(g.cols()));
        for m in [&dec.u, &dec.v] {
            let gram = m.transpose().matmul(m).unwrap();
            prop_assert!(gram.max_abs_diff(&Matrix::identity(k)).unwrap() <= 1e-8);
        }
        prop_assert!(dec.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(dec.sigma.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn low_rank_svd_keeps_orthonormal_factors(seed in 0u64..100_000, rows in 1usize..20, cols in 1usize..20, rank in 1usize..6) {
        let g = seeded_matrix(rows, cols, Some(rank), seed);
        let dec = svd(&g).unwrap();
        prop_assert!(dec.reconstruct().max_abs_diff(&g).unwrap() <= 1e-8);
        let k = dec.sigma.len();
        for m in [&dec.u, &dec.v] {
            let gram = m.transpose().matmul(m).unwrap();
            prop_assert!(gram.max_abs_diff(&Matrix::identity(k)).unwrap() <= 1e-8);
        }
        prop_assert!(dec.sigma.iter().filter(|s| **s > 0.0).count() <= rank);
    }

    #[test]
    fn select_rank_matches_direct_scan_and_is_monotone(sigma in spectrum_strategy(), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r_lo = select_rank(&sigma, lo).unwrap();
        let r_hi = select_rank(&sigma, hi).unwrap();
        prop_assert!(r_lo <= r_hi);
        prop_assert_eq!(r_lo, direct_rank(&sigma, lo));
        prop_assert!(energy_ratio(&sigma, r_hi) >= hi * (1.0 - 1e-12));
        if r_hi > 1 {
            prop_assert!(energy_ratio(&sigma, r_hi - 1) < hi);
        }
        prop_assert_eq!(select_rank(&sigma, 1.0).unwrap(), sigma.iter().rposition(|s| *s > 0.0).unwrap() + 1);
    }

    #[test]
    fn stats_match_pairwise_oracle(gs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..10)) {
        let s = stats(&gs).unwrap();
        let (m, v) = brute_stats(&gs);
        for (a, b) in s.mean.iter().zip(&m).chain(s.variance.iter().zip(&v)) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        prop_assert!(s.variance.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn projection_is_idempotent_and_contracting(seed in 0u64..10_000, dim in 2usize..24, cap in 1usize..8) {
        let p = seeded_projector(dim, cap, None, 0.9, seed);
        let g = seeded_inputs(1, dim, seed ^ 0x55).remove(0);
        let pg = p.project(&g).unwrap();
        let ppg = p.project(&pg).unwrap();
        for (a, b) in pg.iter().zip(&ppg) {
            prop_assert!((a - b).abs() <= 1e-10 * norm(&g));
        }
        prop_assert!(norm(&pg) <= norm(&g) * (1.0 + 1e-10));
        // the residual is orthogonal to the subspace
        let resid: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
        prop_assert!(dot(&resid, &pg).abs() <= 1e-9 * norm(&g) * norm(&g));
    }

    #[test]
    fn historical_direction_never_shrinks_descent(seed in 0u64..10_000, dim in 2usize..16, kappa in 0.01f64..1e4) {
        let mut opt = OptState::new(0.1, kappa, 0.98, 4, dim).unwrap();
        opt.set_projector(Some(seeded_projector(dim, 4, None, 0.98, seed))).unwrap();
        let g = seeded_inputs(1, dim, seed + 1).remove(0);
        let d = opt.direction(&g).unwrap();
        let g2 = dot(&g, &g);
        prop_assert!(dot(&d, &g) >= g2 * (1.0 - 1e-12));
        prop_assert!(dot(&d, &g) <= g2 * (1.0 + 1.0 / kappa) * (1.0 + 1e-12));
    }
}

#[test]
fn optimizer_limits() {
    // huge kappa: plain SGD
    let dim = 10;
    let g = seeded_inputs(1, dim, 3).remove(0);
    let mut opt = OptState::new(0.05, 1e9, 0.98, 4, dim).unwrap();
    opt.set_projector(Some(seeded_projector(dim, 4, None, 0.98, 1))).unwrap();
    let mut head = vec![0.0; dim];
    opt.step(&mut head, &g).unwrap();
    for (h, gi) in head.iter().zip(&g) {
        assert!((h + 0.05 * gi).abs() <= 1e-6 * (0.05 * gi).abs().max(1e-12));
    }

    // full-rank subspace: the step is (1 + 1/kappa) times SGD
    let full = Projector {
        basis: Matrix::identity(dim),
        rank: dim,
        group: BufferGroup::Historical,
        built_at: 0,
        energy_ratio: 1.0,
    };
    let mut opt = OptState::new(0.05, 4.0, 0.98, 4, dim).unwrap();
    opt.set_projector(Some(full)).unwrap();
    let d = opt.direction(&g).unwrap();
    for (a, b) in d.iter().zip(&g) {
        assert_eq!(*a, b + b / 4.0);
    }

    // one basis vector e1, kappa = 1, g = (3, 4)
    let e1 = Projector {
        basis: Matrix::from_columns(&[vec![1.0, 0.0]]).unwrap(),
        rank: 1,
        group: BufferGroup::Historical,
        built_at: 0,
        energy_ratio: 1.0,
    };
    let mut opt = OptState::new(0.5, 1.0, 0.98, 2, 2).unwrap();
    opt.set_projector(Some(e1)).unwrap();
    let mut head = vec![0.0, 0.0];
    opt.step(&mut head, &[3.0, 4.0]).unwrap();
    assert_eq!(head, vec![-0.5 * 6.0, -0.5 * 4.0]);
}

#[test]
fn renewal_builds_from_pushed_gradients() {
    let mut opt = OptState::new(0.1, 10.0, 0.98, 3, 4).unwrap();
    let mut head = vec![0.0; 4];
    for (i, g) in [[1.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]].iter().enumerate() {
        opt.step(&mut head, g).unwrap();
        opt.maybe_renew(i).unwrap();
    }
    let p = opt.projector().expect("renewed after three steps");
    assert_eq!(p.rank, 1);
    assert!((p.basis[(0, 0)].abs() - 1.0).abs() < 1e-12);
    assert_eq!(opt.buffer().fill(), 0);
}

#[test]
fn first_order_identity() {
    for seed in 0..5 {
        let errs = first_order_errors(seed + 1, &[1e-4, 5e-5, 2.5e-5]);
        assert!(errs[0] <= 0.1, "seed {seed}: {errs:?}");
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.5..=2.7).contains(&ratio), "seed {seed}: {errs:?}");
        }
    }
}

#[test]
fn first_order_stationary_case() {
    use trajdistill::net::ModelParams;
    use trajdistill::trajectory::first_order_descent_check;
    // uniform logits and a uniform label give a zero new-class gradient
    let params = ModelParams::zeros(&[2, 3, 3]).unwrap();
    let new = vec![(vec![0.5, -0.5], vec![1.0 / 3.0; 3])];
    let anchors = vec![vec![(vec![1.0, 1.0], vec![1.0, 0.0, 0.0])]];
    let (predicted, actual) = first_order_descent_check(&params, &anchors, &new, 1e-4).unwrap();
    assert_eq!(predicted, 0.0);
    assert!(actual.abs() <= 10.0 * 1e-4 * 1e-4, "{actual:e}");
}

#[test]
fn buffer_is_fifo() {
    let mut b = GradientBuffer::new(BufferGroup::SourceDomain, 2, 1).unwrap();
    for v in 0..5 {
        b.push(vec![v as f64]).unwrap();
    }
    let kept: Vec<f64> = b.entries().map(|e| e[0]).collect();
    assert_eq!(kept, vec![3.0, 4.0]);
}


#[test]
fn identical_streams_renew_identically() {
    let run = || {
        let mut opt = OptState::new(0.1, 10.0, 0.98, 5, 6).unwrap();
        let mut head = vec![0.0; 6];
        for (i, g) in seeded_inputs(10, 6, 42).iter().enumerate() {
            opt.step(&mut head, g).unwrap();
            opt.maybe_renew(i).unwrap();
        }
        (opt.projector().cloned().unwrap(), opt.renewals(), head)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.1, 2);
    assert_eq!(a.0, b.0);
    assert_eq!(a.2, b.2);
}
