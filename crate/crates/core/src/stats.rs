//! Summary statistics and rank tests used to turn per-input deltas into
//! verdicts.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Alternative {
    /// The location of the differences is above zero.
    Greater,
    /// The location of the differences is below zero.
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RankTest {
    /// Non-zero differences that entered the test.
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(s.len() - 1);
    let frac = pos - lo as f64;
    s[lo] * (1.0 - frac) + s[hi] * frac
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / math::sqrt(sxx * syy)
}

/// Average ranks (1-based) with ties sharing the mean rank. Also returns the
/// tie-correction term `Σ (t³ − t)`.
fn average_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

fn normal_sf(z: f64) -> f64 {
    0.5 * math::erfc(z / core::f64::consts::SQRT_2)
}

fn tail_p(z_upper: f64, z_lower: f64, alt: Alternative) -> f64 {
    let p = match alt {
        Alternative::Greater => normal_sf(z_upper),
        Alternative::Less => normal_sf(-z_lower),
        Alternative::TwoSided => 2.0 * normal_sf(z_upper).min(normal_sf(-z_lower)),
    };
    p.clamp(0.0, 1.0)
}

/// Wilcoxon signed-rank test on paired differences. Zero differences are
/// dropped. Uses the exact null distribution for up to 25 untied differences
/// and the tie-corrected normal approximation with continuity correction
/// otherwise.
pub fn signed_rank_test(diffs: &[f64], alt: Alternative) -> RankTest {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return RankTest {
            n,
            statistic: 0.0,
            p_value: 1.0,
            exact: true,
        };
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let nf = n as f64;
    if n <= 25 && ties == 0.0 {
        // counts[s] = number of sign assignments with W+ = s.
        let max = n * (n + 1) / 2;
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for r in 1..=n {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let total = libm::pow(2.0, nf);
        let w = math::round(w_plus) as usize;
        let upper: f64 = counts[w..].iter().sum::<f64>() / total;
        let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
        let p = match alt {
            Alternative::Greater => upper,
            Alternative::Less => lower,
            Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
        };
        return RankTest {
            n,
            statistic: w_plus,
            p_value: p,
            exact: true,
        };
    }
    let mu = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return RankTest {
            n,
            statistic: w_plus,
            p_value: 1.0,
            exact: false,
        };
    }
    let sd = math::sqrt(var);
    let z_upper = (w_plus - mu - 0.5) / sd;
    let z_lower = (w_plus - mu + 0.5) / sd;
    RankTest {
        n,
        statistic: w_plus,
        p_value: tail_p(z_upper, z_lower, alt),
        exact: false,
    }
}

/// Mann–Whitney U test comparing two independent samples (`Greater` means
/// `xs` tends to exceed `ys`). Normal approximation with tie correction.
pub fn rank_sum_test(xs: &[f64], ys: &[f64], alt: Alternative) -> RankTest {
    let (n1, n2) = (xs.len(), ys.len());
    if n1 == 0 || n2 == 0 {
        return RankTest {
            n: n1 + n2,
            statistic: 0.0,
            p_value: 1.0,
            exact: false,
        };
    }
    let pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let (ranks, ties) = average_ranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let (a, b) = (n1 as f64, n2 as f64);
    let u = r1 - a * (a + 1.0) / 2.0;
    let mu = a * b / 2.0;
    let n = a + b;
    let var = a * b / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return RankTest {
            n: n1 + n2,
            statistic: u,
            p_value: 1.0,
            exact: false,
        };
    }
    let sd = math::sqrt(var);
    RankTest {
        n: n1 + n2,
        statistic: u,
        p_value: tail_p((u - mu - 0.5) / sd, (u - mu + 0.5) / sd, alt),
        exact: false,
    }
}
