//! pass@k: the unbiased estimator ρ(n, c, k), empirical pass@k, and the
//! pass@k policy-gradient weights.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::envs::Problem;
use crate::error::{LabError, Result};
use crate::policy::{self, PolicyParams};
use crate::rlcore::RolloutGroup;
use crate::rng::LabRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassKEstimate {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassKWeightSet {
    pub weights: Vec<f64>,
    pub correct_weight: f64,
    pub incorrect_weight: f64,
}

fn check_args(n: usize, c: usize, k: usize) -> Result<()> {
    if c > n || k == 0 || k > n {
        return Err(LabError::PassKArgs { n, c, k });
    }
    Ok(())
}

/// `C(n-c, k) / C(n, k)` in product form; zero when `n - c < k`, one when
/// `k == 0`.
fn miss_ratio(n: usize, c: usize, k: usize) -> f64 {
    if n - c < k {
        return 0.0;
    }
    let mut r = 1.0;
    for j in 0..k {
        r *= (n - c - j) as f64 / (n - j) as f64;
    }
    r
}

/// ρ(n, c, k) = 1 − C(n−c, k)/C(n, k).
pub fn passk_estimate(n: usize, c: usize, k: usize) -> Result<f64> {
    check_args(n, c, k)?;
    Ok(rho(n, c, k))
}

/// ρ without range checks beyond `c ≤ n`; `k = 0` gives 0.
fn rho(n: usize, c: usize, k: usize) -> f64 {
    if k == 0 || c == 0 {
        return 0.0;
    }
    if n - c < k {
        return 1.0;
    }
    1.0 - miss_ratio(n, c, k)
}

/// ρ(n, c, k) in exact rational arithmetic.
pub fn passk_estimate_exact(n: usize, c: usize, k: usize) -> Result<Ratio<u128>> {
    check_args(n, c, k)?;
    if n - c < k {
        return Ok(Ratio::from_integer(1));
    }
    let mut miss = Ratio::from_integer(1u128);
    for j in 0..k {
        miss *= Ratio::new((n - c - j) as u128, (n - j) as u128);
    }
    Ok(Ratio::from_integer(1) - miss)
}

/// Draws `n_samples` unguided rollouts and estimates pass@k.
pub fn passk_empirical(
    params: &PolicyParams,
    problem: &Problem,
    n_samples: usize,
    k: usize,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<PassKEstimate> {
    check_args(n_samples, 0, k)?;
    let mut c = 0;
    for _ in 0..n_samples {
        c += policy::sample_rollout(params, problem, None, temperature, rng)?.reward as usize;
    }
    Ok(PassKEstimate {
        n: n_samples,
        c,
        k,
        value: rho(n_samples, c, k),
    })
}

/// Per-rollout weights: `k/n` for correct rollouts and
/// `(k/n)·ρ(n−1, c, k−1)` for incorrect ones.
pub fn passk_weights(correct_flags: &[u8], k: usize) -> Result<PassKWeightSet> {
    let n = correct_flags.len();
    let c = correct_flags.iter().filter(|&&f| f != 0).count();
    check_args(n, c, k)?;
    let base = k as f64 / n as f64;
    let correct_weight = base;
    let incorrect_weight = if c == n {
        0.0
    } else {
        base * rho(n - 1, c, k - 1)
    };
    let weights = correct_flags
        .iter()
        .map(|&f| if f != 0 { correct_weight } else { incorrect_weight })
        .collect();
    Ok(PassKWeightSet {
        weights,
        correct_weight,
        incorrect_weight,
    })
}

/// Negated pass@k surrogate `−mean_groups Σ_i r_i · log π(y_i)` and its
/// gradient.
pub fn passk_loss_and_grad(
    params: &PolicyParams,
    groups: &[RolloutGroup],
    k: usize,
) -> Result<(f64, PolicyParams)> {
    if groups.is_empty() {
        return Err(LabError::Config("passk loss needs at least one group".into()));
    }
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let scale = 1.0 / groups.len() as f64;
    for g in groups {
        let (l, grad) = group_loss_and_grad(params, g, k)?;
        loss += l * scale;
        total.add_assign(&grad);
    }
    total.scale(scale);
    Ok((loss, total))
}

/// Loss and gradient for one group, unscaled by the group count.
pub fn group_loss_and_grad(
    params: &PolicyParams,
    group: &RolloutGroup,
    k: usize,
) -> Result<(f64, PolicyParams)> {
    let n = group.rollouts.len();
    if n < k {
        return Err(LabError::GroupTooSmall { need: k, got: n });
    }
    let flags: Vec<u8> = group.rollouts.iter().map(|r| r.reward).collect();
    let w = passk_weights(&flags, k)?;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for (r, &wi) in group.rollouts.iter().zip(&w.weights) {
        policy::visit_free_positions(params, r, Some(&mut grad), |v, dl| {
            loss -= wi * v.logprobs[v.token];
            if wi == 0.0 {
                return Ok(false);
            }
            for (d, p) in dl.iter_mut().zip(v.probs) {
                *d = wi * p;
            }
            dl[v.token] -= wi;
            Ok(true)
        })?;
    }
    Ok((loss, grad))
}

/// Brute-force reference values by enumerating k-subsets.
pub mod oracle {
    use super::*;

    /// Largest n accepted by the enumeration oracle.
    pub const MAX_N: usize = 20;

    /// Fraction of the k-subsets of `{0..n}` that intersect `{0..c}`.
    pub fn enumerate(n: usize, c: usize, k: usize) -> Result<Ratio<u128>> {
        check_args(n, c, k)?;
        if n > MAX_N {
            return Err(LabError::PassKArgs { n, c, k });
        }
        let correct: u32 = (1u32 << c) - 1;
        let (mut hit, mut total) = (0u128, 0u128);
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize == k {
                total += 1;
                if mask & correct != 0 {
                    hit += 1;
                }
            }
        }
        Ok(Ratio::new(hit, total))
    }

    /// Exact binomial coefficient.
    pub fn binomial(n: u64, k: u64) -> u128 {
        if k > n {
            return 0;
        }
        let k = k.min(n - k);
        let mut r: u128 = 1;
        for j in 0..k {
            r = r * (n - j) as u128 / (j + 1) as u128;
        }
        r
    }

    /// One row of the estimator-vs-oracle table.
    #[derive(Debug, Clone, PartialEq, Serialize)]
    pub struct CheckRow {
        pub n: usize,
        pub c: usize,
        pub k: usize,
        pub estimate: f64,
        pub exact: String,
        pub enumerated: String,
        pub agree: bool,
    }

    /// Compares the floating-point and rational estimators with enumeration
    /// for every `c` in `0..=n` and every `k` in `ks`.
    pub fn check_grid(n: usize, ks: &[usize]) -> Result<Vec<CheckRow>> {
        let mut rows = Vec::new();
        for &k in ks {
            for c in 0..=n {
                let estimate = passk_estimate(n, c, k)?;
                let exact = passk_estimate_exact(n, c, k)?;
                let enumerated = enumerate(n, c, k)?;
                let as_f = *enumerated.numer() as f64 / *enumerated.denom() as f64;
                rows.push(CheckRow {
                    n,
                    c,
                    k,
                    estimate,
                    exact: exact.to_string(),
                    enumerated: enumerated.to_string(),
                    agree: exact == enumerated && (estimate - as_f).abs() < 1e-12,
                });
            }
        }
        Ok(rows)
    }

    /// `Σ_c Binom(n, c, p) · ρ(n, c, k)`.
    pub fn expected_estimate(n: usize, k: usize, p: f64) -> Result<f64> {
        let mut s = 0.0;
        for c in 0..=n {
            let pmf = binomial(n as u64, c as u64) as f64
                * p.powi(c as i32)
                * (1.0 - p).powi((n - c) as i32);
            s += pmf * passk_estimate(n, c, k)?;
        }
        Ok(s)
    }
}
