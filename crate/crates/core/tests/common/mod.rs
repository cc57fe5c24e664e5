//! Brute-force reference implementations used by integration and acceptance tests.
//!
//! Written from the definitions, without calling into the library.

#![allow(dead_code)]

use std::f64::consts::PI;

/// Sorted copy.
fn ascending(p: &[f64]) -> Vec<f64> {
    let mut s = p.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s
}

/// Step-up rule as a counting condition: reject iff some `k` has at least
/// `k` p-values at or below `alpha k / denom`.
pub fn step_up_rejects(p: &[f64], alpha: f64, denom: f64) -> bool {
    (1..=p.len()).any(|k| {
        let t = alpha * k as f64 / denom;
        p.iter().filter(|&&v| v <= t).count() >= k
    })
}

/// Rejected positions (1-based) of the step-up rule.
pub fn step_up_rejected(p: &[f64], alpha: f64, denom: f64) -> Vec<usize> {
    let best = (1..=p.len())
        .filter(|&k| p.iter().filter(|&&v| v <= alpha * k as f64 / denom).count() >= k)
        .max();
    match best {
        None => Vec::new(),
        Some(k) => {
            let t = alpha * k as f64 / denom;
            (1..=p.len()).filter(|&i| p[i - 1] <= t).collect()
        }
    }
}

pub fn bh(p: &[f64], alpha: f64) -> bool {
    step_up_rejects(p, alpha, p.len() as f64)
}

pub fn by(p: &[f64], alpha: f64) -> bool {
    let m = p.len();
    let h: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
    step_up_rejects(p, alpha, m as f64 * h)
}

/// Two-stage adaptive BH, spelled out step by step.
pub fn adabh(p: &[f64], alpha: f64) -> (bool, Option<usize>) {
    let m = p.len();
    let s = ascending(p);
    let mut stage_one_id = true;
    for i in 1..=m {
        if s[i - 1] < alpha * i as f64 / m as f64 {
            stage_one_id = false;
        }
    }
    if stage_one_id {
        return (false, None);
    }
    let slopes: Vec<f64> = (1..=m).map(|i| (1.0 - s[i - 1]) / (m + 1 - i) as f64).collect();
    let mut m0 = m;
    for j in 2..=m {
        if slopes[j - 1] < slopes[j - 2] {
            let est = (1.0 / slopes[j - 1]).floor() + 1.0;
            m0 = if est < m as f64 { est as usize } else { m };
            break;
        }
    }
    (step_up_rejects(p, alpha, m0 as f64), Some(m0))
}

/// Upper tail of chi-square with `2m` degrees of freedom:
/// `exp(-x/2) sum_{j<m} (x/2)^j / j!`, summed with explicit factorials in log space.
pub fn chi2_sf_2m(x: f64, m: usize) -> f64 {
    let h = x / 2.0;
    if h == 0.0 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut log_fact = 0.0;
    for j in 0..m {
        if j > 0 {
            log_fact += (j as f64).ln();
        }
        total += (j as f64 * h.ln() - h - log_fact).exp();
    }
    total
}

pub fn fisher(p: &[f64], alpha: f64) -> bool {
    let f: f64 = p.iter().map(|v| -2.0 * v.ln()).sum();
    chi2_sf_2m(f, p.len()) < alpha
}

/// Standard Cauchy upper tail `1/2 - atan(t)/pi`.
pub fn cauchy_sf(t: f64) -> f64 {
    0.5 - t.atan() / PI
}

pub fn cauchy(p: &[f64], alpha: f64) -> bool {
    let m = p.len() as f64;
    let t: f64 = p.iter().map(|v| ((0.5 - v) * PI).tan() / m).sum();
    cauchy_sf(t) < alpha
}

pub fn naive_and(p: &[f64], alpha: f64) -> bool {
    p.iter().any(|&v| v < alpha)
}

pub fn last_layer(p: &[f64], alpha: f64) -> bool {
    p[p.len() - 1] < alpha
}

/// FPR at the largest threshold keeping `target` of the ID scores, by trying
/// every observed score and `+inf` as the threshold.
pub fn fpr_brute(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &lambda in id.iter().chain(ood).chain([&f64::INFINITY]) {
        let tpr = id.iter().filter(|&&s| s >= lambda).count() as f64 / id.len() as f64;
        if tpr >= target && lambda > best {
            best = lambda;
        }
    }
    ood.iter().filter(|&&s| s >= best).count() as f64 / ood.len() as f64
}

/// Mann–Whitney by pair counting.
pub fn auroc_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                s += 1.0;
            } else if a == b {
                s += 0.5;
            }
        }
    }
    s / (id.len() * ood.len()) as f64
}
