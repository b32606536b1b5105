//! Training objectives: masked reconstruction and NT-Xent.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};

/// One stream's contribution to the reconstruction loss: full-length target
/// and reconstruction (`B·N × D`, row `b·N + i`) and the masked positions of
/// each sample.
pub struct ReconTerm<'a> {
    pub target: Var,
    pub recon: Var,
    pub tokens: usize,
    pub masked: &'a [Vec<usize>],
}

/// Mean over streams of the per-dimension mean squared error at masked rows.
/// Only masked rows enter the graph, so kept positions have exactly zero
/// influence. Every stream must mask the same count per sample.
pub fn recon_loss(g: &mut Graph, terms: &[ReconTerm<'_>]) -> Result<Var> {
    ensure!(!terms.is_empty(), "reconstruction loss needs at least one stream");
    let mut per_stream = Vec::with_capacity(terms.len());
    for t in terms {
        let rows: Vec<usize> = t
            .masked
            .iter()
            .enumerate()
            .flat_map(|(b, m)| m.iter().map(move |&i| b * t.tokens + i))
            .collect();
        ensure!(!rows.is_empty(), "reconstruction loss needs at least one masked token");
        let (tr, rr) = (g.value(t.target).dim(), g.value(t.recon).dim());
        ensure!(tr == rr, "target {tr:?} and reconstruction {rr:?} differ in shape");
        ensure!(
            rows.iter().all(|&r| r < tr.0),
            "masked index outside the {} token rows",
            tr.0
        );
        let idx = Arc::new(rows);
        let e = g.select_rows(t.target, idx.clone());
        let r = g.select_rows(t.recon, idx);
        let d = g.sub(e, r);
        let sq = g.square(d);
        per_stream.push(g.mean_all(sq));
    }
    let mut total = per_stream[0];
    for &p in &per_stream[1..] {
        total = g.add(total, p);
    }
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}

/// Order of the 2N-element set inside NT-Xent. Both give the same loss value;
/// the switch exists so the two readings of the index scheme can be compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLayout {
    /// `[a_0, b_0, a_1, b_1, …]`
    #[default]
    Interleaved,
    /// `[a_0 … a_{N-1}, b_0 … b_{N-1}]`
    Banks,
}

/// NT-Xent over pairs `(a_k, b_k)`. Inputs are `N × D` and assumed
/// L2-normalised. Each of the 2N rows is scored against the other 2N−1 with
/// its partner as the positive; the result is the mean over rows.
pub fn nt_xent(g: &mut Graph, a: Var, b: Var, tau: f64, layout: PairLayout) -> Result<Var> {
    ensure!(tau > 0.0 && tau.is_finite(), "temperature must be positive, got {tau}");
    let (na, da) = g.value(a).dim();
    let (nb, db) = g.value(b).dim();
    ensure!((na, da) == (nb, db), "NT-Xent views differ in shape: {na}x{da} vs {nb}x{db}");
    ensure!(na >= 2, "NT-Xent needs a batch of at least 2, got {na}");
    let n = na;
    let stacked = g.concat_rows(&[a, b]);
    let (order, targets): (Vec<usize>, Vec<usize>) = match layout {
        PairLayout::Interleaved => (
            (0..2 * n).map(|r| if r % 2 == 0 { r / 2 } else { n + r / 2 }).collect(),
            (0..2 * n).map(|r| r ^ 1).collect(),
        ),
        PairLayout::Banks => ((0..2 * n).collect(), (0..2 * n).map(|r| (r + n) % (2 * n)).collect()),
    };
    let s = g.select_rows(stacked, Arc::new(order));
    let sim = g.matmul_nt(s, s);
    let logits = g.scale(sim, 1.0 / tau);
    Ok(g.cross_entropy(logits, &targets, true))
}

/// `recon + α · contra`.
pub fn joint_loss(g: &mut Graph, recon: Var, contra: Var, alpha: f64) -> Result<Var> {
    ensure!(alpha >= 0.0 && alpha.is_finite(), "loss weight α must be ≥ 0, got {alpha}");
    let c = g.scale(contra, alpha);
    Ok(g.add(recon, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mat;
    use crate::rng::rng_for;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Direct evaluation over the 2N set as written, one term at a time.
    fn nt_xent_oracle(a: &Mat, b: &Mat, tau: f64) -> f64 {
        let n = a.nrows();
        let set: Vec<Vec<f64>> = (0..n).flat_map(|k| [a.row(k).to_vec(), b.row(k).to_vec()]).collect();
        let sim = |i: usize, j: usize| set[i].iter().zip(&set[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
        let mut total = 0.0;
        for i in 0..2 * n {
            let partner = if i % 2 == 0 { i + 1 } else { i - 1 };
            let denom: f64 = (0..2 * n).filter(|&j| j != i).map(|j| sim(i, j).exp()).sum();
            total += -(sim(i, partner).exp() / denom).ln();
        }
        total / (2 * n) as f64
    }

    fn unit_rows(rows: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = rng_for(seed, "unit", &[]);
        let mut m = Mat::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0));
        for mut r in m.rows_mut() {
            let norm = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / norm);
        }
        m
    }

    fn eval_nt(a: &Mat, b: &Mat, tau: f64, layout: PairLayout) -> f64 {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = nt_xent(&mut g, va, vb, tau, layout).unwrap();
        g.scalar(l)
    }

    #[test]
    fn nt_xent_batch_two_matches_hand_oracle() {
        // fh = sh per sample, the two samples antipodal.
        let a = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let got = eval_nt(&a, &a, 0.1, PairLayout::Interleaved);
        // Each row: positive sim 10, negatives -10, -10.
        let hand = -(10f64.exp() / (10f64.exp() + 2.0 * (-10f64).exp())).ln();
        assert_abs_diff_eq!(got, hand, epsilon = 1e-12);
        assert_abs_diff_eq!(got, nt_xent_oracle(&a, &a, 0.1), epsilon = 1e-12);
    }

    #[test]
    fn nt_xent_matches_oracle_on_random_batches() {
        for seed in 0..10 {
            let a = unit_rows(6, 5, seed);
            let b = unit_rows(6, 5, seed + 100);
            let want = nt_xent_oracle(&a, &b, 0.1);
            assert_abs_diff_eq!(eval_nt(&a, &b, 0.1, PairLayout::Interleaved), want, epsilon = 1e-9);
            assert_abs_diff_eq!(eval_nt(&a, &b, 0.1, PairLayout::Banks), want, epsilon = 1e-9);
        }
    }

    #[test]
    fn nt_xent_large_tau_limit() {
        let a = unit_rows(4, 3, 1);
        let b = unit_rows(4, 3, 2);
        assert_abs_diff_eq!(eval_nt(&a, &b, 1e6, PairLayout::Interleaved), (7f64).ln(), epsilon = 1e-5);
    }

    #[test]
    fn nt_xent_rejects_bad_input() {
        let a = unit_rows(1, 3, 1);
        let mut g = Graph::new();
        let v = g.constant(a);
        assert!(nt_xent(&mut g, v, v, 0.1, PairLayout::Interleaved).is_err());
        let b = unit_rows(3, 3, 1);
        let w = g.constant(b);
        assert!(nt_xent(&mut g, w, w, 0.0, PairLayout::Interleaved).is_err());
    }

    /// NT-Xent from an interleaved similarity matrix (already divided by τ).
    fn nt_xent_from_similarity(sim: &Mat) -> f64 {
        let m = sim.nrows();
        (0..m)
            .map(|i| {
                let denom: f64 = (0..m).filter(|&j| j != i).map(|j| sim[[i, j]].exp()).sum();
                denom.ln() - sim[[i, i ^ 1]]
            })
            .sum::<f64>()
            / m as f64
    }

    #[test]
    fn nt_xent_monotone_in_positive_similarity() {
        let mut rng = rng_for(5, "sim", &[]);
        let base = Mat::from_shape_fn((6, 6), |_| rng.random_range(-3.0..3.0));
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let mut sim = base.clone();
            let pos = -3.0 + 0.3 * step as f64;
            for (i, j) in [(0, 1), (1, 0), (2, 3), (3, 2), (4, 5), (5, 4)] {
                sim[[i, j]] = pos;
            }
            let loss = nt_xent_from_similarity(&sim);
            assert!(loss >= 0.0 && loss < prev);
            prev = loss;
        }
    }

    proptest! {
        #[test]
        fn nt_xent_nonnegative_and_permutation_invariant(seed in 0u64..500, n in 2usize..7) {
            let a = unit_rows(n, 4, seed);
            let b = unit_rows(n, 4, seed ^ 0xABCD);
            let base = eval_nt(&a, &b, 0.2, PairLayout::Interleaved);
            prop_assert!(base >= 0.0);
            let perm: Vec<usize> = (0..n).rev().collect();
            let pa = a.select(ndarray::Axis(0), &perm);
            let pb = b.select(ndarray::Axis(0), &perm);
            prop_assert!((eval_nt(&pa, &pb, 0.2, PairLayout::Interleaved) - base).abs() < 1e-10);
        }

        #[test]
        fn recon_ignores_kept_rows(seed in 0u64..500, bump in -5.0f64..5.0) {
            let mut rng = rng_for(seed, "recon", &[]);
            let (b, n, d) = (2usize, 5usize, 3usize);
            let e = Mat::from_shape_fn((b * n, d), |_| rng.random_range(-1.0..1.0));
            let r = Mat::from_shape_fn((b * n, d), |_| rng.random_range(-1.0..1.0));
            let masked = vec![vec![1, 3], vec![0, 4]];
            let eval = |r: &Mat| {
                let mut g = Graph::new();
                let (ve, vr) = (g.constant(e.clone()), g.constant(r.clone()));
                let l = recon_loss(&mut g, &[ReconTerm { target: ve, recon: vr, tokens: n, masked: &masked }]).unwrap();
                g.scalar(l)
            };
            let base = eval(&r);
            prop_assert!(base >= 0.0);
            let mut r2 = r.clone();
            for kept in [0usize, 2, 4] {
                r2.row_mut(kept).mapv_inplace(|v| v + bump);
            }
            for kept in [1usize, 2, 3] {
                r2.row_mut(n + kept).mapv_inplace(|v| v + bump);
            }
            prop_assert_eq!(eval(&r2), base);
        }
    }

    #[test]
    fn recon_examples() {
        let d = 8;
        let e = Mat::ones((3, d));
        let r = Mat::zeros((3, d));
        let masked = vec![vec![1]];
        let mut g = Graph::new();
        let (ve, vr) = (g.constant(e.clone()), g.constant(r));
        let l = recon_loss(&mut g, &[ReconTerm { target: ve, recon: vr, tokens: 3, masked: &masked }]).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let ve2 = g.constant(e);
        let same = recon_loss(&mut g, &[ReconTerm { target: ve2, recon: ve2, tokens: 3, masked: &masked }]).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let empty = vec![vec![]];
        assert!(recon_loss(&mut g, &[ReconTerm { target: ve2, recon: ve2, tokens: 3, masked: &empty }]).is_err());
    }

    #[test]
    fn joint_loss_arithmetic() {
        let mut g = Graph::new();
        let r = g.constant(Mat::from_elem((1, 1), 0.5));
        let c = g.constant(Mat::from_elem((1, 1), 0.3));
        let t = joint_loss(&mut g, r, c, 1.0).unwrap();
        assert_abs_diff_eq!(g.scalar(t), 0.8, epsilon = 1e-15);
        let t0 = joint_loss(&mut g, r, c, 0.0).unwrap();
        assert_eq!(g.scalar(t0), 0.5);
        assert!(joint_loss(&mut g, r, c, -1.0).is_err());
    }
}
