//! Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest effective sample size evaluated exactly.
pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    /// Sum of ranks of positive differences `a − b`.
    pub w: f64,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

/// Nonzero differences ranked by magnitude, ties sharing the average rank.
/// Returns `(doubled ranks, signs)`; doubling keeps half ranks integral.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<u64>, Vec<bool>)> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "wilcoxon: samples have different lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.len() < 5 {
        return Err(Error::TooFewPairs(d.len()));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut ranks = vec![0u64; d.len()];
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j + 1 < d.len() && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled.
        let doubled = (i + 1 + j + 1) as u64;
        ranks[i..=j].fill(doubled);
        i = j + 1;
    }
    let signs = d.iter().map(|v| *v > 0.0).collect();
    Ok((ranks, signs))
}

/// Test with the exact null distribution for `n ≤ 25` and the normal
/// approximation otherwise.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (ranks, _) = signed_ranks(a, b)?;
    let method = if ranks.len() <= EXACT_MAX_N {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::NormalApprox
    };
    wilcoxon_signed_rank_with(a, b, method)
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    let (ranks, signs) = signed_ranks(a, b)?;
    let w2: u64 = ranks.iter().zip(&signs).filter(|(_, &s)| s).map(|(r, _)| r).sum();
    let p = match method {
        WilcoxonMethod::Exact => exact_p(&ranks, w2),
        WilcoxonMethod::NormalApprox => normal_p(&ranks, w2),
    };
    Ok(WilcoxonResult {
        n_effective: ranks.len(),
        w: w2 as f64 / 2.0,
        p_two_sided: p,
        method,
    })
}

/// Two-sided exact p-value: the null distribution of the doubled positive
/// rank sum over all 2ⁿ equally likely sign vectors, by dynamic programming.
fn exact_p(doubled_ranks: &[u64], w2: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(doubled_ranks.len() as i32);
    let lower: f64 = counts[..=w2 as usize].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2 as usize..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Normal approximation with tie-corrected variance and a continuity
/// correction of one half.
fn normal_p(doubled_ranks: &[u64], w2: u64) -> f64 {
    let n = doubled_ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < doubled_ranks.len() {
        let mut j = i;
        while j + 1 < doubled_ranks.len() && doubled_ranks[j + 1] == doubled_ranks[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let w = w2 as f64 / 2.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    // 2·(1 − Φ(z)) = erfc(z/√2)
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}
