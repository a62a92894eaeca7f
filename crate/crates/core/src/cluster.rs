//! Seeded k-means and the cluster-count model-selection objective
//! (silhouette plus inverse Davies-Bouldin).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{distance, squared_distance, Scalar};

pub const MAX_ITERATIONS: usize = 100;
/// Guards the inverse Davies-Bouldin term when the index reaches zero.
pub const DBI_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment<T> {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
}

impl<T: Scalar> ClusterAssignment<T> {
    /// Builds an assignment from labels, computing centroids as member means.
    pub fn from_labels(points: &[Vec<T>], labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(Error::Dimension {
                expected: points.len(),
                actual: labels.len(),
            });
        }
        let centroids = centroids_of(points, &labels, k)?;
        Ok(Self {
            k,
            labels,
            centroids,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Member indices per cluster, in point order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

fn centroids_of<T: Scalar>(points: &[Vec<T>], labels: &[usize], k: usize) -> Result<Vec<Vec<T>>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![T::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        if l >= k {
            return Err(Error::invalid(format!("label {l} out of range for k = {k}")));
        }
        counts[l] += 1;
        for (s, &x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("cluster {empty} is empty")));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        let n = T::of_usize(c);
        s.iter_mut().for_each(|x| *x /= n);
    }
    Ok(sums)
}

/// Index drawn with probability proportional to `weights`; `u` in `[0, 1)`.
fn sample_weighted(weights: &[f64], total: f64, u: f64) -> usize {
    let mut target = u * total;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && target < w {
            return i;
        }
        target -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn nearest<T: Scalar>(p: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Fails with [`Error::Degenerate`] when the points hold fewer than `k`
/// distinct locations.
pub fn kmeans<T: Scalar>(points: &[Vec<T>], k: usize, seed: u64) -> Result<ClusterAssignment<T>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("kmeans needs at least one point"));
    }
    if k < 2 || k > n {
        return Err(Error::invalid(format!("k = {k} outside [2, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]).as_f64())
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate(format!(
                "fewer than {k} distinct points"
            )));
        }
        // Greedy k-means++: draw several D^2-weighted candidates and keep the
        // one that lowers the total potential most.
        let trials = 2 + (k as f64).ln().floor() as usize;
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = sample_weighted(&d2, total, rng.random::<f64>());
            let cand: Vec<f64> = points
                .iter()
                .zip(&d2)
                .map(|(p, &w)| w.min(squared_distance(p, &points[pick]).as_f64()))
                .collect();
            let potential: f64 = cand.iter().sum();
            if best.as_ref().is_none_or(|(bp, _, _)| potential < *bp) {
                best = Some((potential, pick, cand));
            }
        }
        let (_, pick, cand) = best.expect("at least two trials");
        centroids.push(points[pick].clone());
        d2 = cand;
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut dists = vec![T::zero(); n];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            dists[i] = d;
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        // Refill empty clusters with the point farthest from its centroid.
        loop {
            let mut counts = vec![0usize; k];
            labels.iter().for_each(|&l| counts[l] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(b.cmp(&a)))
                .ok_or_else(|| Error::Degenerate("cannot refill empty cluster".into()))?;
            labels[far] = empty;
            dists[far] = T::zero();
            centroids[empty] = points[far].clone();
            changed = true;
        }
        centroids = centroids_of(points, &labels, k)?;
        if !changed {
            break;
        }
    }
    Ok(ClusterAssignment {
        k,
        labels,
        centroids,
    })
}

/// Within-cluster sum of squared distances to the centroids.
pub fn inertia<T: Scalar>(points: &[Vec<T>], assignment: &ClusterAssignment<T>) -> T {
    points
        .iter()
        .zip(&assignment.labels)
        .map(|(p, &l)| squared_distance(p, &assignment.centroids[l]))
        .sum()
}

/// Best of `restarts` seeded [`kmeans`] runs by inertia; earlier runs win ties.
pub fn kmeans_restarts<T: Scalar>(
    points: &[Vec<T>],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterAssignment<T>> {
    let mut best: Option<(T, ClusterAssignment<T>)> = None;
    for r in 0..restarts.max(1) {
        let a = kmeans(points, k, seed.wrapping_add((r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)))?;
        let w = inertia(points, &a);
        if best.as_ref().is_none_or(|(bw, _)| w < *bw) {
            best = Some((w, a));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Symmetric pairwise Euclidean distances, row-major `n x n`.
pub fn pairwise_distances<T: Scalar>(points: &[Vec<T>]) -> Vec<T> {
    let n = points.len();
    let mut d = vec![T::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = distance(&points[i], &points[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Silhouette over a precomputed distance matrix. Clusters without members
/// are ignored; fewer than two populated clusters yields `None`.
fn silhouette_with<T: Scalar>(dist: &[T], labels: &[usize], k: usize) -> Option<T> {
    let n = labels.len();
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let mut total = T::zero();
    let mut sums = vec![T::zero(); k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = T::zero());
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist[i * n + j];
            }
        }
        let own = labels[i];
        if counts[own] == 1 {
            continue;
        }
        let a = sums[own] / T::of_usize(counts[own] - 1);
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / T::of_usize(counts[c]))
            .fold(T::infinity(), T::min);
        let m = a.max(b);
        if m > T::zero() {
            total += (b - a) / m;
        }
    }
    Some(total / T::of_usize(n))
}

/// Mean silhouette coefficient; singleton clusters contribute 0.
pub fn silhouette<T: Scalar>(points: &[Vec<T>], assignment: &ClusterAssignment<T>) -> Result<T> {
    check_assignment(points, assignment)?;
    let dist = pairwise_distances(points);
    Ok(silhouette_with(&dist, &assignment.labels, assignment.k).expect("k >= 2 populated clusters"))
}

fn check_assignment<T: Scalar>(points: &[Vec<T>], a: &ClusterAssignment<T>) -> Result<()> {
    if a.k < 2 {
        return Err(Error::invalid(format!("k = {} < 2", a.k)));
    }
    if a.labels.len() != points.len() {
        return Err(Error::Dimension {
            expected: points.len(),
            actual: a.labels.len(),
        });
    }
    if let Some(bad) = a.labels.iter().find(|&&l| l >= a.k) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    if a.sizes().contains(&0) {
        return Err(Error::invalid("every cluster must be non-empty"));
    }
    Ok(())
}

/// Davies-Bouldin index, with centroids recomputed from the labels.
pub fn davies_bouldin<T: Scalar>(points: &[Vec<T>], assignment: &ClusterAssignment<T>) -> Result<T> {
    check_assignment(points, assignment)?;
    let k = assignment.k;
    let centroids = centroids_of(points, &assignment.labels, k)?;
    let mut scatter = vec![T::zero(); k];
    let sizes = assignment.sizes();
    for (p, &l) in points.iter().zip(&assignment.labels) {
        scatter[l] += distance(p, &centroids[l]);
    }
    for (s, &c) in scatter.iter_mut().zip(&sizes) {
        *s /= T::of_usize(c);
    }
    let mut total = T::zero();
    for i in 0..k {
        let mut worst = T::neg_infinity();
        for j in 0..k {
            if i == j {
                continue;
            }
            let m = distance(&centroids[i], &centroids[j]);
            if m == T::zero() {
                return Err(Error::Degenerate(format!(
                    "clusters {i} and {j} share a centroid"
                )));
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / T::of_usize(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSelectionConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// Silhouette is scored on at most this many points (seeded subsample).
    pub max_scoring_points: usize,
    /// k-means runs per candidate k; the lowest-inertia run is scored.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    3
}

impl Default for KSelectionConfig {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 20,
            max_scoring_points: 1000,
            restarts: default_restarts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection<T> {
    /// Chosen cluster count; 1 when the data cannot be split.
    pub k: usize,
    pub assignment: Option<ClusterAssignment<T>>,
    /// `(k, silhouette + 1 / (dbi + eps))` for every k that was scored.
    pub scores: Vec<(usize, f64)>,
    pub degenerate: bool,
}

impl<T> KSelection<T> {
    fn degenerate() -> Self {
        Self {
            k: 1,
            assignment: None,
            scores: Vec::new(),
            degenerate: true,
        }
    }
}

/// Picks `k` in `[k_min, min(k_max, n - 1)]` maximizing
/// `silhouette(k) + 1 / (dbi(k) + eps)`, ties to the smallest `k`.
pub fn select_k<T: Scalar>(points: &[Vec<T>], config: KSelectionConfig, seed: u64) -> Result<KSelection<T>> {
    let n = points.len();
    if config.k_min < 2 || config.k_max < config.k_min {
        return Err(Error::invalid(format!(
            "bad k range [{}, {}]",
            config.k_min, config.k_max
        )));
    }
    if n < 3 {
        return Ok(KSelection::degenerate());
    }
    let k_max = config.k_max.min(n - 1);
    if k_max < config.k_min {
        return Ok(KSelection::degenerate());
    }

    let sample: Vec<usize> = if n > config.max_scoring_points.max(2) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        idx.truncate(config.max_scoring_points.max(2));
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let sample_points: Vec<Vec<T>> = sample.iter().map(|&i| points[i].clone()).collect();
    let sample_dist = pairwise_distances(&sample_points);

    let mut best: Option<(f64, ClusterAssignment<T>)> = None;
    let mut scores = Vec::new();
    for k in config.k_min..=k_max {
        let assignment = match kmeans_restarts(points, k, seed.wrapping_add(k as u64), config.restarts) {
            Ok(a) => a,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        let dbi = match davies_bouldin(points, &assignment) {
            Ok(d) => d.as_f64(),
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        let labels: Vec<usize> = sample.iter().map(|&i| assignment.labels[i]).collect();
        let Some(sil) = silhouette_with(&sample_dist, &labels, k) else {
            continue;
        };
        let score = sil.as_f64() + 1.0 / (dbi + DBI_EPSILON);
        scores.push((k, score));
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, assignment));
        }
    }
    Ok(match best {
        Some((_, assignment)) => KSelection {
            k: assignment.k,
            assignment: Some(assignment),
            scores,
            degenerate: false,
        },
        None => KSelection::degenerate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    /// Minimum within-cluster sum of squares over every 2-partition.
    fn best_two_partition(points: &[Vec<f64>]) -> Vec<usize> {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let a = ClusterAssignment::from_labels(points, labels.clone(), 2).unwrap();
            let wcss: f64 = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| squared_distance(p, &a.centroids[l]))
                .sum();
            if wcss < best.0 - 1e-12 {
                best = (wcss, labels);
            }
        }
        best.1
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn kmeans_fixture_matches_brute_force() {
        let p = pts(&[0.0, 0.1, 10.0, 10.1]);
        let got = kmeans(&p, 2, 3).unwrap();
        assert!(same_partition(&got.labels, &best_two_partition(&p)));
        assert_eq!(got.labels[0], got.labels[1]);
        assert_ne!(got.labels[1], got.labels[2]);
    }

    #[test]
    fn kmeans_k_equals_n() {
        let p = pts(&[0.0, 1.0, 5.0, 7.0]);
        let got = kmeans(&p, 4, 0).unwrap();
        let mut l = got.labels.clone();
        l.sort_unstable();
        assert_eq!(l, [0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_errors() {
        let p = pts(&[2.0, 2.0, 2.0]);
        assert!(matches!(kmeans(&p, 2, 0), Err(Error::Degenerate(_))));
        assert!(kmeans(&p, 1, 0).is_err());
        assert!(kmeans(&p, 4, 0).is_err());
        assert!(kmeans::<f64>(&[], 2, 0).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let p: Vec<Vec<f64>> = (0..40).map(|i| vec![(i * 37 % 11) as f64, (i % 7) as f64]).collect();
        assert_eq!(kmeans(&p, 4, 9).unwrap(), kmeans(&p, 4, 9).unwrap());
    }

    #[test]
    fn metric_fixtures() {
        let p = pts(&[0.0, 0.1, 10.0, 10.1]);
        let a = ClusterAssignment::from_labels(&p, vec![0, 0, 1, 1], 2).unwrap();
        let s = silhouette(&p, &a).unwrap();
        assert!((s - 0.990).abs() < 1e-3, "{s}");
        let d = davies_bouldin(&p, &a).unwrap();
        assert!((d - 0.01).abs() < 1e-9, "{d}");

        let two = pts(&[0.0, 1.0]);
        let a = ClusterAssignment::from_labels(&two, vec![0, 1], 2).unwrap();
        assert_eq!(davies_bouldin(&two, &a).unwrap(), 0.0);
        assert_eq!(silhouette(&two, &a).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_symmetric_case_is_zero() {
        // Regular tetrahedron: every pairwise distance is equal, so a == b.
        let p: Vec<Vec<f64>> = vec![
            vec![1.0, 1.0, 1.0],
            vec![1.0, -1.0, -1.0],
            vec![-1.0, 1.0, -1.0],
            vec![-1.0, -1.0, 1.0],
        ];
        let a = ClusterAssignment::from_labels(&p, vec![0, 0, 1, 1], 2).unwrap();
        assert!(silhouette(&p, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn metric_errors() {
        let p = pts(&[0.0, 0.0, 1.0]);
        let same = ClusterAssignment {
            k: 2,
            labels: vec![0, 1, 2],
            centroids: vec![],
        };
        assert!(silhouette(&p, &same).is_err());
        let dup = pts(&[0.0, 0.0]);
        let a = ClusterAssignment::from_labels(&dup, vec![0, 1], 2).unwrap();
        assert!(matches!(davies_bouldin(&dup, &a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn select_k_examples() {
        let blobs = pts(&[0.0, 0.1, 0.2, 10.0, 10.1, 10.2]);
        let cfg = KSelectionConfig {
            k_min: 2,
            k_max: 4,
            max_scoring_points: 1000,
            restarts: 3,
        };
        assert_eq!(select_k(&blobs, cfg, 1).unwrap().k, 2);

        let three = pts(&[0.0, 1.0, 5.0]);
        let wide = KSelectionConfig { k_max: 8, ..cfg };
        let sel = select_k(&three, wide, 1).unwrap();
        assert_eq!(sel.scores.iter().map(|s| s.0).collect::<Vec<_>>(), [2]);

        let two = pts(&[0.0, 1.0]);
        let sel = select_k(&two, cfg, 1).unwrap();
        assert!(sel.degenerate);
        assert_eq!(sel.k, 1);

        let flat = pts(&[4.0, 4.0, 4.0, 4.0]);
        assert!(select_k(&flat, cfg, 1).unwrap().degenerate);
    }

    #[test]
    fn select_k_prefers_zero_dbi() {
        // Three exact duplicates pairs: k = 3 has zero scatter and wins via 1/eps.
        let p = pts(&[0.0, 0.0, 5.0, 5.0, 9.0, 9.0]);
        let cfg = KSelectionConfig {
            k_min: 2,
            k_max: 5,
            max_scoring_points: 1000,
            restarts: 3,
        };
        let sel = select_k(&p, cfg, 2).unwrap();
        assert_eq!(sel.k, 3);
        assert!(sel.scores.iter().find(|s| s.0 == 3).unwrap().1 > 1e8);
    }
}
