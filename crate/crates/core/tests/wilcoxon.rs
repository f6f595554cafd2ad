//! Signed-rank test against enumeration and tabulated critical values.

use clseg_core::eval::{wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod};
use clseg_core::rng::stream_rng;
use clseg_core::Error;
use rand::Rng;

/// Largest positive rank sum T with P(W⁺ ≤ T) ≤ α, from standard tables.
const ONE_SIDED_05: [(usize, i64); 6] = [(5, 0), (6, 2), (7, 3), (8, 5), (9, 8), (10, 10)];
const TWO_SIDED_05: [(usize, i64); 6] = [(5, -1), (6, 0), (7, 2), (8, 3), (9, 5), (10, 8)];

/// Differences ±1..±n whose positive ranks sum to `t`.
fn with_rank_sum(n: usize, t: usize) -> Vec<f64> {
    let mut left = t;
    let mut d: Vec<f64> = (1..=n).map(|r| -(r as f64)).collect();
    for r in (1..=n).rev() {
        if r <= left {
            d[r - 1] = r as f64;
            left -= r;
        }
    }
    assert_eq!(left, 0);
    d
}

fn p_for(n: usize, t: usize) -> f64 {
    let d = with_rank_sum(n, t);
    let r = wilcoxon_signed_rank(&d, &vec![0.0; n]).unwrap();
    assert_eq!(r.w, t as f64);
    r.p_two_sided
}

#[test]
fn five_positive_differences_give_p_0625() {
    let r = wilcoxon_signed_rank(&[0.3, 1.2, 0.7, 2.0, 0.1], &[0.0; 5]).unwrap();
    assert_eq!(r.method, WilcoxonMethod::Exact);
    assert_eq!(r.n_effective, 5);
    assert_eq!(r.p_two_sided, 0.0625);
}

#[test]
fn one_sided_critical_values() {
    for (n, t) in ONE_SIDED_05 {
        let t = t as usize;
        assert!(p_for(n, t) / 2.0 <= 0.05, "n={n} T={t}");
        assert!(p_for(n, t + 1) / 2.0 > 0.05, "n={n} T={}", t + 1);
    }
}

#[test]
fn two_sided_critical_values() {
    for (n, t) in TWO_SIDED_05 {
        if t >= 0 {
            assert!(p_for(n, t as usize) <= 0.05, "n={n} T={t}");
        }
        assert!(p_for(n, (t + 1) as usize) > 0.05, "n={n} T={}", t + 1);
    }
}

/// Two-sided p by listing all 2ⁿ sign vectors over average ranks.
fn enumerate_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let rank = |i: usize| {
        let a = d[i].abs();
        let below = d.iter().filter(|v| v.abs() < a).count() as f64;
        let equal = d.iter().filter(|v| v.abs() == a).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = (0..n).map(rank).collect();
    let observed: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0..1u64 << n {
        let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        lo += (w <= observed + 1e-9) as u64;
        hi += (w >= observed - 1e-9) as u64;
    }
    let total = (1u64 << n) as f64;
    (2.0 * (lo.min(hi) as f64) / total).min(1.0)
}

#[test]
fn exact_p_matches_enumeration_with_ties_and_zeros() {
    for trial in 0..300u64 {
        let mut rng = stream_rng(300, &[trial]);
        let n = rng.random_range(5..=14);
        // Coarse values force ties; some pairs are equal and get dropped.
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64 * 0.5).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64 * 0.5).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        match wilcoxon_signed_rank(&a, &b) {
            Ok(r) => {
                let want = enumerate_p(&d);
                assert!((r.p_two_sided - want).abs() < 1e-12, "trial {trial}: {} vs {want}", r.p_two_sided);
            }
            Err(Error::TooFewPairs(k)) => assert!(k < 5),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn exact_and_normal_agree_at_n_25() {
    for trial in 0..50u64 {
        let mut rng = stream_rng(301, &[trial]);
        let shift = rng.random_range(-0.5..0.5);
        let a: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
        let b: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Exact).unwrap();
        let z = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::NormalApprox).unwrap();
        assert!((e.p_two_sided - z.p_two_sided).abs() < 0.02, "trial {trial}: {} vs {}", e.p_two_sided, z.p_two_sided);
    }
}

#[test]
fn large_samples_switch_to_the_normal_approximation() {
    let a: Vec<f64> = (0..30).map(|i| i as f64 + 1.0).collect();
    let r = wilcoxon_signed_rank(&a, &vec![0.0; 30]).unwrap();
    assert_eq!(r.method, WilcoxonMethod::NormalApprox);
    assert!(r.p_two_sided < 1e-5);
}

#[test]
fn fewer_than_five_pairs_and_length_mismatch_fail() {
    assert!(matches!(
        wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 0.0, 0.0, 0.0, 0.0]),
        Err(Error::TooFewPairs(4))
    ));
    assert!(matches!(wilcoxon_signed_rank(&[1.0; 6], &[0.0; 5]), Err(Error::Contract(_))));
}
