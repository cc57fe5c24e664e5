//! Chi-square (even degrees of freedom), Cauchy and Kolmogorov distribution
//! functions.
//!
//! Fisher's statistic over `m` p-values has `2m` degrees of freedom, so only
//! even `df` is needed. For `df = 2a` the chi-square CDF at `x` is the
//! regularized lower incomplete gamma `P(a, x/2)`, which has the finite
//! closed form `1 - e^{-x/2} * sum_{j<a} (x/2)^j / j!`.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatError {
    #[error("degrees of freedom must be a positive even integer, got {0}")]
    OddDf(u64),
    #[error("{name} = {value} is outside its domain")]
    OutOfDomain { name: &'static str, value: f64 },
}

impl StatError {
    pub fn kind(&self) -> &'static str {
        match self {
            StatError::OddDf(_) => "OddDf",
            StatError::OutOfDomain { .. } => "OutOfDomain",
        }
    }
}

fn check_df(df: u64) -> Result<u64, StatError> {
    if df == 0 || !df.is_multiple_of(2) {
        Err(StatError::OddDf(df))
    } else {
        Ok(df / 2)
    }
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|j| (j as f64).ln()).sum()
}

/// `(P(a, h), Q(a, h))` for integer shape `a >= 1`.
///
/// Below the mode the lower series is summed directly; above it the finite
/// upper sum is accumulated from its largest term downwards. Prefactors are
/// formed in log space so large `a` cannot overflow.
fn gamma_pq_integer(a: u64, h: f64) -> (f64, f64) {
    if h <= 0.0 {
        return (0.0, 1.0);
    }
    if h.is_infinite() {
        return (1.0, 0.0);
    }
    let af = a as f64;
    if h < af {
        // P(a,h) = e^{-h} h^a / a! * sum_{i>=0} h^i / ((a+1)...(a+i))
        let log_pre = -h + af * h.ln() - ln_factorial(a);
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut i = 1.0;
        loop {
            term *= h / (af + i);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            i += 1.0;
        }
        let p = (log_pre + sum.ln()).exp().min(1.0);
        (p, 1.0 - p)
    } else {
        // Q(a,h) = sum_{j<a} e^{-h} h^j / j!, terms shrink as j decreases
        let top = a - 1;
        let mut term = (-h + top as f64 * h.ln() - ln_factorial(top)).exp();
        let mut sum = term;
        let mut j = top;
        while j > 0 {
            term *= j as f64 / h;
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            j -= 1;
        }
        let q = sum.min(1.0);
        (1.0 - q, q)
    }
}

/// Chi-square CDF for even `df`.
pub fn chi2_cdf_even(x: f64, df: u64) -> Result<f64, StatError> {
    let a = check_df(df)?;
    if x.is_nan() || x < 0.0 {
        return Err(StatError::OutOfDomain { name: "x", value: x });
    }
    Ok(gamma_pq_integer(a, x / 2.0).0)
}

/// Chi-square survival function `1 - CDF` for even `df`, accurate in the upper tail.
pub fn chi2_sf_even(x: f64, df: u64) -> Result<f64, StatError> {
    let a = check_df(df)?;
    if x.is_nan() || x < 0.0 {
        return Err(StatError::OutOfDomain { name: "x", value: x });
    }
    Ok(gamma_pq_integer(a, x / 2.0).1)
}

fn check_open_unit(name: &'static str, value: f64) -> Result<(), StatError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(StatError::OutOfDomain { name, value })
    }
}

/// Bisection for a monotone `f` on `[0, inf)`: returns the point where `f`
/// crosses `target`. `increasing` gives the direction of `f`.
fn invert_monotone(target: f64, increasing: bool, start: f64, f: impl Fn(f64) -> f64) -> f64 {
    let below = |x: f64| if increasing { f(x) < target } else { f(x) > target };
    let mut lo = 0.0;
    let mut hi = start.max(1.0);
    while below(hi) {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // pick whichever endpoint lands closer to the target
    if (f(lo) - target).abs() <= (f(hi) - target).abs() {
        lo
    } else {
        hi
    }
}

/// Chi-square quantile: `x` with `CDF(x; df) = q`.
pub fn chi2_quantile(q: f64, df: u64) -> Result<f64, StatError> {
    let a = check_df(df)?;
    check_open_unit("q", q)?;
    if a == 1 {
        return Ok(-2.0 * (-q).ln_1p());
    }
    Ok(invert_monotone(q, true, df as f64, |x| gamma_pq_integer(a, x / 2.0).0))
}

/// Upper `alpha` quantile: `x` with `P(X > x) = alpha`.
///
/// Equals `chi2_quantile(1 - alpha, df)` but avoids forming `1 - alpha`.
pub fn chi2_upper_quantile(alpha: f64, df: u64) -> Result<f64, StatError> {
    let a = check_df(df)?;
    check_open_unit("alpha", alpha)?;
    if a == 1 {
        return Ok(-2.0 * alpha.ln());
    }
    Ok(invert_monotone(alpha, false, df as f64, |x| {
        gamma_pq_integer(a, x / 2.0).1
    }))
}

/// Standard Cauchy quantile `tan(pi (q - 1/2))`.
pub fn cauchy_quantile(q: f64) -> Result<f64, StatError> {
    check_open_unit("q", q)?;
    Ok((PI * (q - 0.5)).tan())
}

/// Upper `alpha` quantile of the standard Cauchy, `tan((1/2 - alpha) pi)`.
///
/// Written in the same form as the Cauchy combination terms so that a single
/// p-value equal to `alpha` maps exactly onto the threshold.
pub fn cauchy_upper_quantile(alpha: f64) -> Result<f64, StatError> {
    check_open_unit("alpha", alpha)?;
    Ok(((0.5 - alpha) * PI).tan())
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // Jacobi-theta form converges fast for small lambda
        let c = -PI * PI / (8.0 * lambda * lambda);
        let s: f64 = (1..=20)
            .map(|k| {
                let odd = (2 * k - 1) as f64;
                (c * odd * odd).exp()
            })
            .sum();
        return (1.0 - (2.0 * PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against `U(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// KS test of `samples` against the uniform distribution on `[0, 1]`.
///
/// The p-value uses the asymptotic Kolmogorov law with Stephens' finite-n
/// correction `lambda = (sqrt(n) + 0.12 + 0.11 / sqrt(n)) * D`.
pub fn ks_uniform(samples: &[f64]) -> Result<KsTest, StatError> {
    if samples.is_empty() {
        return Err(StatError::OutOfDomain { name: "n", value: 0.0 });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        let u = u.clamp(0.0, 1.0);
        d = d.max((i + 1) as f64 / n - u).max(u - i as f64 / n);
    }
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    Ok(KsTest {
        statistic: d,
        p_value: kolmogorov_sf(lambda),
    })
}
