//! Rank statistics and small descriptive helpers.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]].total_cmp(&xs[order[i]]) == Ordering::Equal {
            j += 1;
        }
        // positions i..j (0-based) -> ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::SeriesLengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("correlation needs at least two pairs"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks. Infinite values rank
/// like any other value.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::SeriesLengthMismatch(xs.len(), ys.len()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::InvalidConfig("NaN in rank correlation input".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Kendall's τ-b in O(n log n) (Knight's merge-sort count).
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::SeriesLengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::EmptyInput("kendall tau needs at least two pairs"));
    }
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let tie_pairs = |run: u64| run * run.saturating_sub(1) / 2;
    let (mut x_ties, mut joint_ties) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for i in 1..n {
        let same_x = pairs[i].0.total_cmp(&pairs[i - 1].0) == Ordering::Equal;
        let same_y = pairs[i].1.total_cmp(&pairs[i - 1].1) == Ordering::Equal;
        if same_x {
            run_x += 1;
            if same_y {
                run_xy += 1;
            } else {
                joint_ties += tie_pairs(run_xy);
                run_xy = 1;
            }
        } else {
            x_ties += tie_pairs(run_x);
            joint_ties += tie_pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    x_ties += tie_pairs(run_x);
    joint_ties += tie_pairs(run_xy);

    let mut ys_sorted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys_sorted, &mut buf);

    let mut y_ties = 0u64;
    let mut run = 1u64;
    for i in 1..n {
        if ys_sorted[i].total_cmp(&ys_sorted[i - 1]) == Ordering::Equal {
            run += 1;
        } else {
            y_ties += tie_pairs(run);
            run = 1;
        }
    }
    y_ties += tie_pairs(run);

    let total = (n as u64) * (n as u64 - 1) / 2;
    let numer = total as i128 - x_ties as i128 - y_ties as i128 + joint_ties as i128 - 2 * swaps as i128;
    let denom = ((total - x_ties) as f64) * ((total - y_ties) as f64);
    if denom == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((numer as f64 / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// |A ∩ B| / |A ∪ B|; two empty sets give 1.0.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Quantile with linear interpolation between order statistics (type 7).
/// `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let (a, b) = (sorted[lo], sorted[lo + 1]);
    let frac = h - lo as f64;
    ((1.0 - frac) * a + frac * b).clamp(a, b)
}

pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile of empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, q))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
