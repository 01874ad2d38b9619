//! Small exact significance tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn ln_choose_table(n: u64) -> Vec<f64> {
    // ln k! for k = 0..=n
    let mut lf = Vec::with_capacity(n as usize + 1);
    lf.push(0.0);
    for k in 1..=n {
        lf.push(lf[k as usize - 1] + (k as f64).ln());
    }
    lf
}

/// Exact two-sided binomial test of `k` successes in `n` trials against
/// success probability `p0`: the total probability of every outcome no more
/// likely than the one observed.
pub fn binomial_test(k: u64, n: u64, p0: f64) -> Result<f64> {
    if k > n {
        return Err(Error::Domain {
            op: "binomial_test",
            detail: format!("{k} successes out of {n}"),
        });
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Domain {
            op: "binomial_test",
            detail: format!("null probability {p0}"),
        });
    }
    if n == 0 {
        return Ok(1.0);
    }
    let lf = ln_choose_table(n);
    let (lp, lq) = (p0.ln(), (1.0 - p0).ln());
    let log_pmf = |i: u64| lf[n as usize] - lf[i as usize] - lf[(n - i) as usize] + i as f64 * lp + (n - i) as f64 * lq;
    let observed = log_pmf(k);
    // relative slack so that ties survive rounding
    let cutoff = observed + 1e-7;
    let terms: Vec<f64> = (0..=n).map(log_pmf).filter(|&l| l <= cutoff).collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total = top + terms.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    Ok(total.exp().min(1.0))
}

/// Largest side size for which [`permutation_test`] enumerates every split.
pub const EXACT_PERMUTATION_LIMIT: usize = 10;

/// Two-sided two-sample permutation test on the difference of means.
/// Exact when both samples have at most [`EXACT_PERMUTATION_LIMIT`] values;
/// otherwise `resamples` random relabellings drawn from `seed`.
pub fn permutation_test(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("permutation test sample"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let total: f64 = pooled.iter().sum();
    let (na, nb) = (a.len(), b.len());
    let stat = |sum_a: f64| (sum_a / na as f64 - (total - sum_a) / nb as f64).abs();
    let observed = stat(a.iter().sum());
    let tol = 1e-12 * (1.0 + observed);
    if na <= EXACT_PERMUTATION_LIMIT && nb <= EXACT_PERMUTATION_LIMIT {
        let (mut hits, mut count) = (0u64, 0u64);
        let n = pooled.len();
        // walk every size-na subset
        let mut idx: Vec<usize> = (0..na).collect();
        loop {
            let s: f64 = idx.iter().map(|&i| pooled[i]).sum();
            count += 1;
            if stat(s) >= observed - tol {
                hits += 1;
            }
            let mut i = na;
            loop {
                if i == 0 {
                    return Ok(hits as f64 / count as f64);
                }
                i -= 1;
                if idx[i] != i + n - na {
                    break;
                }
            }
            idx[i] += 1;
            for j in i + 1..na {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    if resamples == 0 {
        return Err(Error::Config("permutation test needs resamples for large samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = pooled.clone();
    let mut hits = 0usize;
    for _ in 0..resamples {
        shuffled.shuffle(&mut rng);
        if stat(shuffled[..na].iter().sum()) >= observed - tol {
            hits += 1;
        }
    }
    // add-one estimate keeps the p-value valid
    Ok((hits + 1) as f64 / (resamples + 1) as f64)
}
