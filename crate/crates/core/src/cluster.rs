//! K-Means over prediction-error features with silhouette-based K selection.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::PredictionResult;
use crate::scene::{FEAT_V, FEAT_X};
use crate::seed;
use crate::stats::mean_std;

pub const FEATURE_NAMES: [&str; 6] = ["max_dx", "mean_dx", "std_dx", "max_v", "mean_v", "std_v"];
pub const LATERAL_AXES: [usize; 3] = [0, 1, 2];
pub const VELOCITY_AXES: [usize; 3] = [3, 4, 5];
/// Best silhouette below this is reported as weak structure.
pub const LOW_SILHOUETTE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorFeatures {
    pub scene_id: String,
    pub max_dx: f64,
    pub mean_dx: f64,
    pub std_dx: f64,
    pub max_v: f64,
    pub mean_v: f64,
    pub std_v: f64,
}

impl ErrorFeatures {
    pub fn vector(&self) -> [f64; 6] {
        [self.max_dx, self.mean_dx, self.std_dx, self.max_v, self.mean_v, self.std_v]
    }
}

fn max_mean_std(v: &[f64]) -> (f64, f64, f64) {
    let (m, s) = mean_std(v);
    (v.iter().copied().fold(0.0, f64::max), m, s)
}

/// Lateral and velocity error statistics pooled over present agent-timesteps.
pub fn extract_features(pred: &PredictionResult) -> ErrorFeatures {
    let (mut dx, mut dv) = (Vec::new(), Vec::new());
    for (t, s) in pred.entries() {
        let (p, a) = (pred.predicted[t][s], pred.actual[t][s]);
        dx.push((p[FEAT_X] - a[FEAT_X]).abs());
        dv.push((p[FEAT_V] - a[FEAT_V]).abs());
    }
    let (max_dx, mean_dx, std_dx) = max_mean_std(&dx);
    let (max_v, mean_v, std_v) = max_mean_std(&dv);
    ErrorFeatures { scene_id: pred.scene_id.clone(), max_dx, mean_dx, std_dx, max_v, mean_v, std_v }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit(points: &[Vec<f64>]) -> Result<MinMax> {
        let d = points.first().ok_or(Error::EmptyInput("min-max of no points"))?.len();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for p in points {
            for j in 0..d {
                min[j] = min[j].min(p[j]);
                max[j] = max[j].max(p[j]);
            }
        }
        Ok(MinMax { min, max })
    }

    pub fn constant(&self) -> Vec<usize> {
        (0..self.min.len()).filter(|&j| self.max[j] <= self.min[j]).collect()
    }

    /// Constant features map to 0.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.max[j] - self.min[j];
                if span > 0.0 { ((v - self.min[j]) / span).clamp(0.0, 1.0) } else { 0.0 }
            })
            .collect()
    }

    pub fn invert(&self, p: &[f64]) -> Vec<f64> {
        p.iter().enumerate().map(|(j, &v)| self.min[j] + v * (self.max[j] - self.min[j])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { restarts: 10, max_iter: 300, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Cluster per input point; clusters are numbered by sorted center.
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = dist2(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d) {
            Ok(w) => w.sample(rng),
            // fewer distinct points than k
            Err(_) => 0,
        };
        centers.push(points[next].clone());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, cfg: &KMeansConfig) -> (Vec<usize>, Vec<Vec<f64>>, f64, Vec<f64>) {
    let (k, dim) = (centers.len(), points[0].len());
    let mut trace = Vec::new();
    let mut assign = vec![0; points.len()];
    for _ in 0..cfg.max_iter {
        let mut inertia = 0.0;
        for (a, p) in assign.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centers);
            *a = c;
            inertia += d;
        }
        trace.push(inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for j in 0..dim {
                sums[a][j] += p[j];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed at the point farthest from its own center
                let far = (0..points.len())
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&i, &j| dist2(&points[i], &centers[assign[i]]).total_cmp(&dist2(&points[j], &centers[assign[j]])).then(j.cmp(&i)));
                if let Some(i) = far {
                    let old = assign[i];
                    counts[old] -= 1;
                    for j in 0..dim {
                        sums[old][j] -= points[i][j];
                    }
                    assign[i] = c;
                    counts[c] = 1;
                    sums[c] = points[i].clone();
                }
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(dist2(&next, &centers[c]).sqrt());
            centers[c] = next;
        }
        if shift < cfg.tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for (a, p) in assign.iter_mut().zip(points) {
        let (c, d) = nearest(p, &centers);
        *a = c;
        inertia += d;
    }
    trace.push(inertia);
    (assign, centers, inertia, trace)
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// inertia wins. Points are processed in sorted order, so the result does
/// not depend on input order.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::TooFewPoints { needed: k.max(1), got: points.len() });
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lex(&points[a], &points[b]));
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    let runs: Vec<_> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::child_rng(seed, &format!("kmeans/k{k}/restart/{r}"));
            lloyd(&sorted, plus_plus(&sorted, k, &mut rng), cfg)
        })
        .collect();
    let (assign, centers, inertia, trace) = runs
        .into_iter()
        .reduce(|best, run| if run.2 < best.2 { run } else { best })
        .expect("at least one restart");
    let mut relabel: Vec<usize> = (0..k).collect();
    relabel.sort_by(|&a, &b| lex(&centers[a], &centers[b]));
    let mut new_id = vec![0; k];
    for (new, &old) in relabel.iter().enumerate() {
        new_id[old] = new;
    }
    let mut assignments = vec![0; points.len()];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = new_id[assign[pos]];
    }
    Ok(KMeans { assignments, centers: relabel.iter().map(|&c| centers[c].clone()).collect(), inertia, trace })
}

/// Mean silhouette, Euclidean; points in singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    if points.len() != assignments.len() {
        return Err(Error::SeriesLengthMismatch(points.len(), assignments.len()));
    }
    let labels: BTreeSet<usize> = assignments.iter().copied().collect();
    if labels.len() < 2 {
        return Err(Error::SingleCluster);
    }
    let index: BTreeMap<usize, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let cl: Vec<usize> = assignments.iter().map(|a| index[a]).collect();
    let mut size = vec![0usize; labels.len()];
    for &c in &cl {
        size[c] += 1;
    }
    let total: f64 = (0..points.len())
        .into_par_iter()
        .map(|i| {
            if size[cl[i]] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; labels.len()];
            for (j, p) in points.iter().enumerate() {
                if j != i {
                    sums[cl[j]] += dist2(&points[i], p).sqrt();
                }
            }
            let a = sums[cl[i]] / (size[cl[i]] - 1) as f64;
            let b = (0..labels.len()).filter(|&c| c != cl[i]).map(|c| sums[c] / size[c] as f64).fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 { (b - a) / m } else { 0.0 }
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub feature_names: Vec<String>,
    pub assignments: BTreeMap<String, usize>,
    pub sizes: Vec<usize>,
    pub centers_raw: Vec<Vec<f64>>,
    pub centers_minmax: Vec<Vec<f64>>,
    pub silhouette_by_k: BTreeMap<usize, f64>,
    pub inertia: f64,
    pub constant_features: Vec<String>,
    /// Best silhouette fell below the weak-structure threshold.
    pub low_silhouette: bool,
}

/// Min-max scale, cluster for every k in range, keep the best silhouette
/// (ties to the smaller k).
pub fn select_k_and_report(features: &[ErrorFeatures], ks: RangeInclusive<usize>, seed: u64, cfg: &KMeansConfig) -> Result<ClusterReport> {
    let raw: Vec<Vec<f64>> = features.iter().map(|f| f.vector().to_vec()).collect();
    let n = raw.len();
    let ks: Vec<usize> = ks.filter(|&k| k >= 2 && k <= n).collect();
    if ks.is_empty() {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let scaler = MinMax::fit(&raw)?;
    let constant: Vec<String> = scaler.constant().into_iter().map(|j| FEATURE_NAMES[j].to_string()).collect();
    if !constant.is_empty() {
        log::warn!("constant features mapped to 0: {}", constant.join(", "));
    }
    let scaled: Vec<Vec<f64>> = raw.iter().map(|p| scaler.apply(p)).collect();
    let fits: Vec<(usize, KMeans, f64)> = ks
        .iter()
        .map(|&k| {
            let km = kmeans(&scaled, k, seed, cfg)?;
            let s = match silhouette(&scaled, &km.assignments) {
                Err(Error::SingleCluster) => 0.0,
                r => r?,
            };
            Ok((k, km, s))
        })
        .collect::<Result<_>>()?;
    let silhouette_by_k: BTreeMap<usize, f64> = fits.iter().map(|(k, _, s)| (*k, *s)).collect();
    let (k, best, best_s) = fits
        .into_iter()
        .reduce(|a, b| if b.2 > a.2 { b } else { a })
        .expect("non-empty k range");
    let low_silhouette = best_s < LOW_SILHOUETTE;
    if low_silhouette {
        log::warn!("best silhouette {best_s:.3} at k={k}: weak cluster structure");
    }
    let mut sizes = vec![0; k];
    for &a in &best.assignments {
        sizes[a] += 1;
    }
    Ok(ClusterReport {
        k,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        assignments: features.iter().zip(&best.assignments).map(|(f, &a)| (f.scene_id.clone(), a)).collect(),
        sizes,
        centers_raw: best.centers.iter().map(|c| scaler.invert(c)).collect(),
        centers_minmax: best.centers,
        silhouette_by_k,
        inertia: best.inertia,
        constant_features: constant,
        low_silhouette,
    })
}

/// Fraction of points whose cluster maps to their label under the best
/// one-to-one matching of clusters to labels.
pub fn matched_agreement<L: Ord + Clone>(clusters: &[usize], labels: &[L]) -> f64 {
    let ls: Vec<L> = labels.iter().cloned().collect::<BTreeSet<L>>().into_iter().collect();
    let k = clusters.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; ls.len()]; k];
    for (&c, l) in clusters.iter().zip(labels) {
        table[c][ls.binary_search(l).expect("label present")] += 1;
    }
    fn best(table: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == table.len() {
            return 0;
        }
        let mut top = best(table, row + 1, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                top = top.max(table[row][j] + best(table, row + 1, used));
                used[j] = false;
            }
        }
        top
    }
    if clusters.is_empty() {
        return 1.0;
    }
    best(&table, 0, &mut vec![false; ls.len()]) as f64 / clusters.len() as f64
}

/// Center that holds the largest value on every axis in `axes`, if any.
pub fn dominant_center(centers: &[Vec<f64>], axes: &[usize]) -> Option<usize> {
    let argmax = |j: usize| (0..centers.len()).max_by(|&a, &b| centers[a][j].total_cmp(&centers[b][j]).then(b.cmp(&a)));
    let first = argmax(axes[0])?;
    axes.iter().all(|&j| argmax(j) == Some(first)).then_some(first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::predict_cv;
    use crate::scene::testutil::scene_from_fn;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::Normal;

    fn blobs(centers: &[[f64; 2]], per: usize, sd: f64, s: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seed::rng(s);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut pts = Vec::new();
        let mut lab = Vec::new();
        for (c, m) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]);
                lab.push(c);
            }
        }
        (pts, lab)
    }

    fn silhouette_oracle(points: &[Vec<f64>], a: &[usize]) -> f64 {
        let d = |i: usize, j: usize| dist2(&points[i], &points[j]).sqrt();
        let n = points.len();
        let labels: BTreeSet<usize> = a.iter().copied().collect();
        let mut total = 0.0;
        for i in 0..n {
            let own: Vec<usize> = (0..n).filter(|&j| j != i && a[j] == a[i]).collect();
            if own.is_empty() {
                continue;
            }
            let ai = own.iter().map(|&j| d(i, j)).sum::<f64>() / own.len() as f64;
            let bi = labels
                .iter()
                .filter(|&&l| l != a[i])
                .map(|&l| {
                    let m: Vec<usize> = (0..n).filter(|&j| a[j] == l).collect();
                    m.iter().map(|&j| d(i, j)).sum::<f64>() / m.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            total += (bi - ai) / ai.max(bi);
        }
        total / n as f64
    }

    #[test]
    fn exact_prediction_has_zero_features() {
        let s = scene_from_fn("c", "e", [true, true, false, false, false, false, false], |t, k| [0.0, t as f64 + 20.0 * k as f64, 10.0]);
        let mut p = predict_cv(&s);
        p.predicted = p.actual.clone();
        assert_eq!(extract_features(&p).vector(), [0.0; 6]);
        for f in p.predicted.iter_mut() {
            f[0][0] += 2.0;
            f[1][0] -= 2.0;
        }
        assert_eq!(extract_features(&p).vector(), [2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn features_match_loop_oracle() {
        let mut rng = seed::rng(3);
        let s = scene_from_fn("c", "e", [true, false, true, true, false, false, true], |t, k| [0.0, t as f64 + k as f64, 10.0]);
        let mut p = predict_cv(&s);
        for f in p.predicted.iter_mut() {
            for a in f.iter_mut() {
                a[0] += rng.random_range(-1.0..1.0);
                a[2] += rng.random_range(-3.0..3.0);
            }
        }
        let (mut xs, mut vs) = (vec![], vec![]);
        for t in 0..p.predicted.len() {
            for k in 0..7 {
                if p.present[k] {
                    xs.push((p.predicted[t][k][0] - p.actual[t][k][0]).abs());
                    vs.push((p.predicted[t][k][2] - p.actual[t][k][2]).abs());
                }
            }
        }
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            [v.iter().cloned().fold(0.0, f64::max), m, var.sqrt()]
        };
        let want: Vec<f64> = stats(&xs).into_iter().chain(stats(&vs)).collect();
        for (g, w) in extract_features(&p).vector().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn k_equals_n_is_exact() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let km = kmeans(&pts, 6, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(km.inertia, 0.0);
        assert_eq!(km.assignments.iter().collect::<BTreeSet<_>>().len(), 6);
        assert!(matches!(kmeans(&pts, 7, 1, &KMeansConfig::default()), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn recovers_planted_blobs() {
        let (pts, lab) = blobs(&[[0.0, 0.0], [10.0, 10.0]], 50, 0.5, 4);
        let km = kmeans(&pts, 2, 9, &KMeansConfig::default()).unwrap();
        assert_eq!(matched_agreement(&km.assignments, &lab), 1.0);
        assert!(km.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn silhouette_hand_case() {
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        let want = ((10.05 - 0.1) / 10.05 + (9.95 - 0.1) / 9.95) / 2.0;
        assert!((s - want).abs() < 1e-12 && (s - 0.990).abs() < 1e-3);
        assert!(matches!(silhouette(&pts, &[1, 1, 1, 1]), Err(Error::SingleCluster)));
        // singleton scores 0
        let s = silhouette(&pts[..3], &[0, 0, 1]).unwrap();
        assert!((s - silhouette_oracle(&pts[..3], &[0, 0, 1])).abs() < 1e-12);
    }

    #[test]
    fn silhouette_null_and_separated() {
        let (pts, _) = blobs(&[[0.0, 0.0]], 200, 1.0, 5);
        let mut rng = seed::rng(6);
        let random: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        assert!(silhouette(&pts, &random).unwrap().abs() < 0.2);
        let (pts, lab) = blobs(&[[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]], 30, 0.5, 7);
        assert!(silhouette(&pts, &lab).unwrap() > 0.9);
    }

    #[test]
    fn minmax_handles_constant_feature() {
        let pts = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let mm = MinMax::fit(&pts).unwrap();
        assert_eq!(mm.constant(), vec![1]);
        assert_eq!(mm.apply(&pts[1]), vec![1.0, 0.0]);
        assert_eq!(mm.invert(&[0.5, 0.0]), vec![2.0, 5.0]);
    }

    fn feat(id: &str, v: [f64; 6]) -> ErrorFeatures {
        ErrorFeatures { scene_id: id.into(), max_dx: v[0], mean_dx: v[1], std_dx: v[2], max_v: v[3], mean_v: v[4], std_v: v[5] }
    }

    #[test]
    fn selects_planted_k() {
        let mut rng = seed::rng(8);
        let protos = [[5.0, 2.0, 1.0, 0.2, 0.1, 0.1], [0.2, 0.1, 0.1, 6.0, 3.0, 2.0], [2.0, 1.0, 0.5, 2.0, 1.0, 0.5], [0.5, 0.2, 0.1, 0.5, 0.2, 0.1]];
        let mut fs = Vec::new();
        let mut lab = Vec::new();
        for (c, p) in protos.iter().enumerate() {
            for i in 0..30 {
                let v = p.map(|x| x * (1.0 + rng.random_range(-0.1..0.1)));
                fs.push(feat(&format!("{c}-{i}"), v));
                lab.push(c);
            }
        }
        let r = select_k_and_report(&fs, 2..=8, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(r.k, 4);
        assert!(!r.low_silhouette);
        let assign: Vec<usize> = fs.iter().map(|f| r.assignments[&f.scene_id]).collect();
        assert_eq!(matched_agreement(&assign, &lab), 1.0);
        assert!(r.centers_minmax.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        let vel = dominant_center(&r.centers_minmax, &VELOCITY_AXES).unwrap();
        let lat = dominant_center(&r.centers_minmax, &LATERAL_AXES).unwrap();
        assert_ne!(vel, lat);
        assert_eq!(r.silhouette_by_k.len(), 7);
    }

    #[test]
    fn single_archetype_is_flagged_weak() {
        let mut rng = seed::rng(9);
        let fs: Vec<ErrorFeatures> = (0..80).map(|i| feat(&i.to_string(), [0; 6].map(|_: i32| rng.random_range(0.0..1.0)))).collect();
        let r = select_k_and_report(&fs, 2..=8, 1, &KMeansConfig::default()).unwrap();
        assert!(r.low_silhouette);
    }

    #[test]
    fn agreement_matching() {
        assert_eq!(matched_agreement(&[0, 0, 1, 1], &["b", "b", "a", "a"]), 1.0);
        assert_eq!(matched_agreement(&[0, 0, 0, 1], &["a", "b", "a", "a"]), 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn silhouette_matches_oracle(n in 4usize..120, k in 2usize..6, s in 0u64..1000) {
            let mut rng = seed::rng(s);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0..5) as f64, rng.random_range(-1.0..1.0)]).collect();
            let mut a: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            a[0] = 0;
            a[1] = 1;
            prop_assert!((silhouette(&pts, &a).unwrap() - silhouette_oracle(&pts, &a)).abs() < 1e-9);
        }

        #[test]
        fn kmeans_ignores_point_order(s in 0u64..1000, k in 1usize..5) {
            let (pts, _) = blobs(&[[0.0, 0.0], [4.0, 1.0], [1.0, 5.0]], 15, 1.0, s);
            let mut perm: Vec<usize> = (0..pts.len()).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut seed::rng(s + 1));
            let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
            let a = kmeans(&pts, k, 3, &KMeansConfig::default()).unwrap();
            let b = kmeans(&shuffled, k, 3, &KMeansConfig::default()).unwrap();
            prop_assert_eq!(&a.centers, &b.centers);
            prop_assert_eq!(a.inertia, b.inertia);
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a.assignments[i], b.assignments[j]);
            }
        }
    }
}
