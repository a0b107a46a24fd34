use rand::Rng;

use super::{EvalError, Result};
use crate::scalar::Scalar;

fn dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    sq_dist(a, b).sqrt()
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn check_points<T: Scalar>(points: &[Vec<T>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != d) {
        return Err(EvalError::Parameter(
            "points have different dimensions".into(),
        ));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::Parameter("non-finite coordinate".into()));
    }
    Ok(d)
}

/// Result of [`kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<T> {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    /// Within-cluster sum of squares after the initial assignment and after
    /// each Lloyd update.
    pub wcss_history: Vec<T>,
    pub iterations: usize,
}

fn assign<T: Scalar>(points: &[Vec<T>], centroids: &[Vec<T>], out: &mut [usize]) -> (bool, T) {
    let mut changed = false;
    let mut wcss = T::zero();
    for (p, a) in points.iter().zip(out.iter_mut()) {
        let mut best = 0;
        let mut best_d = sq_dist(p, &centroids[0]);
        for (c, cent) in centroids.iter().enumerate().skip(1) {
            let d = sq_dist(p, cent);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        if *a != best {
            changed = true;
            *a = best;
        }
        wcss = wcss + best_d;
    }
    (changed, wcss)
}

fn wcss<T: Scalar>(points: &[Vec<T>], centroids: &[Vec<T>], a: &[usize]) -> T {
    points
        .iter()
        .zip(a)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Index drawn with probability proportional to `w`, given `u` uniform on
/// `[0, Σw)`. Zero-weight entries are never returned.
fn weighted_pick(w: &[f64], mut u: f64) -> usize {
    let mut pick = w.len() - 1;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 && u < x {
            pick = i;
            break;
        }
        u -= x;
    }
    while w[pick] == 0.0 {
        pick -= 1;
    }
    pick
}

/// Greedy k-means++ seeding (best of `2 + ⌊ln k⌋` candidates per centroid)
/// followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` updates. Empty clusters keep their centroid; ties
/// go to the lower cluster index.
pub fn kmeans<T: Scalar, R: Rng + ?Sized>(
    points: &[Vec<T>],
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> Result<KMeans<T>> {
    let dim = check_points(points)?;
    let n = points.len();
    if k == 0 || n < k {
        return Err(EvalError::Parameter(format!(
            "k-means with k = {k} on {n} points"
        )));
    }
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centroids[0]).as_f64())
        .collect();
    let trials = 2 + (k as f64).ln().floor() as usize;
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                weighted_pick(&d2, rng.random::<f64>() * total)
            } else {
                rng.random_range(0..n)
            };
            let cand: Vec<f64> = d2
                .iter()
                .zip(points)
                .map(|(&d, p)| d.min(sq_dist(p, &points[pick]).as_f64()))
                .collect();
            let potential: f64 = cand.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, cand));
            }
        }
        let (_, pick, cand) = best.expect("at least one seeding trial");
        centroids.push(points[pick].clone());
        d2 = cand;
    }

    let mut assignments = vec![usize::MAX; n];
    let (_, w0) = assign(points, &centroids, &mut assignments);
    let mut history = vec![w0];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s = *s + v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = T::lit(counts[c] as f64);
                centroids[c] = sums[c].iter().map(|&s| s / inv).collect();
            }
        }
        history.push(wcss(points, &centroids, &assignments));
        let (changed, _) = assign(points, &centroids, &mut assignments);
        if !changed {
            break;
        }
        history.push(wcss(points, &centroids, &assignments));
    }
    Ok(KMeans {
        assignments,
        centroids,
        wcss_history: history,
        iterations,
    })
}

fn clusters(assignments: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = assignments.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Mean silhouette with Euclidean distance. Points in singleton clusters and
/// points with `a = b = 0` score 0.
pub fn silhouette<T: Scalar>(points: &[Vec<T>], assignments: &[usize]) -> Result<T> {
    check_points(points)?;
    if points.len() != assignments.len() {
        return Err(EvalError::Parameter(
            "assignment count differs from point count".into(),
        ));
    }
    let ids = clusters(assignments);
    if ids.len() < 2 || ids.len() == points.len() {
        return Err(EvalError::Undefined(format!(
            "silhouette needs 2 to N-1 clusters, got {} for {} points",
            ids.len(),
            points.len()
        )));
    }
    let slot = |c: usize| ids.binary_search(&c).unwrap_or(0);
    let mut sizes = vec![0usize; ids.len()];
    for &a in assignments {
        sizes[slot(a)] += 1;
    }
    let mut total = T::zero();
    for (i, p) in points.iter().enumerate() {
        let own = slot(assignments[i]);
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![T::zero(); ids.len()];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let s = slot(assignments[j]);
                sums[s] = sums[s] + dist(p, q);
            }
        }
        let a = sums[own] / T::lit((sizes[own] - 1) as f64);
        let b = (0..ids.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / T::lit(sizes[c] as f64))
            .fold(T::infinity(), T::min);
        let m = a.max(b);
        if m > T::zero() {
            total = total + (b - a) / m;
        }
    }
    Ok(total / T::lit(points.len() as f64))
}

/// Davies-Bouldin index. Coincident centroids make the ratio unbounded; the
/// result is then `+∞` and a warning is logged.
pub fn davies_bouldin<T: Scalar>(points: &[Vec<T>], assignments: &[usize]) -> Result<T> {
    let dim = check_points(points)?;
    if points.len() != assignments.len() {
        return Err(EvalError::Parameter(
            "assignment count differs from point count".into(),
        ));
    }
    let ids = clusters(assignments);
    if ids.len() < 2 {
        return Err(EvalError::Undefined(
            "Davies-Bouldin needs at least 2 clusters".into(),
        ));
    }
    let kc = ids.len();
    let slot = |c: usize| ids.binary_search(&c).unwrap_or(0);
    let mut cent = vec![vec![T::zero(); dim]; kc];
    let mut size = vec![0usize; kc];
    for (p, &a) in points.iter().zip(assignments) {
        let s = slot(a);
        size[s] += 1;
        for (c, &v) in cent[s].iter_mut().zip(p) {
            *c = *c + v;
        }
    }
    for (c, &n) in cent.iter_mut().zip(&size) {
        let inv = T::lit(n as f64);
        c.iter_mut().for_each(|v| *v = *v / inv);
    }
    let mut scatter = vec![T::zero(); kc];
    for (p, &a) in points.iter().zip(assignments) {
        let s = slot(a);
        scatter[s] = scatter[s] + dist(p, &cent[s]);
    }
    for (s, &n) in scatter.iter_mut().zip(&size) {
        *s = *s / T::lit(n as f64);
    }
    let mut total = T::zero();
    for i in 0..kc {
        let mut worst = T::neg_infinity();
        for j in 0..kc {
            if i == j {
                continue;
            }
            let d = dist(&cent[i], &cent[j]);
            if d == T::zero() {
                log::warn!(
                    "Davies-Bouldin: clusters {} and {} share a centroid",
                    ids[i],
                    ids[j]
                );
                return Ok(T::infinity());
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total = total + worst;
    }
    Ok(total / T::lit(kc as f64))
}

/// Average precision of `scores` for binary `positive` labels: precision
/// at each distinct threshold weighted by the recall gained there.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() || scores.is_empty() {
        return Err(EvalError::Parameter(
            "scores and labels must be non-empty and equal length".into(),
        ));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(EvalError::Undefined("no positive examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut gained = 0;
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                gained += 1;
            }
            seen += 1;
            i += 1;
        }
        tp += gained;
        if gained > 0 {
            ap += (gained as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Macro one-vs-rest average precision over the classes that occur in
/// `labels`; `scores[i][c]` is the score of sample `i` for class `c`.
pub fn macro_auprc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n_classes = scores.first().map_or(0, Vec::len);
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..n_classes {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if !pos.iter().any(|&p| p) {
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        sum += average_precision(&col, &pos)?;
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::Undefined("no class present".into()));
    }
    Ok(sum / used as f64)
}

/// Values of strict local extrema after collapsing plateaus to their first
/// index.
pub fn turning_points(x: &[f64]) -> Vec<f64> {
    let mut runs: Vec<f64> = Vec::with_capacity(x.len());
    for &v in x {
        if runs.last() != Some(&v) {
            runs.push(v);
        }
    }
    runs.windows(3)
        .filter(|w| (w[1] > w[0] && w[1] > w[2]) || (w[1] < w[0] && w[1] < w[2]))
        .map(|w| w[1])
        .collect()
}

/// Sum of squared differences between consecutive turning-point values.
pub fn turning_point_score(x: &[f64]) -> f64 {
    turning_points(x)
        .windows(2)
        .map(|w| (w[1] - w[0]).powi(2))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn turning_point_examples() {
        assert_eq!(
            turning_points(&[0.0, 1.0, 0.0, 2.0, 0.0]),
            vec![1.0, 0.0, 2.0]
        );
        assert_eq!(turning_point_score(&[0.0, 1.0, 0.0, 2.0, 0.0]), 5.0);
        assert_eq!(turning_point_score(&[1.0, 2.0, 3.0, 4.0]), 0.0);
        assert_eq!(turning_point_score(&[2.0; 6]), 0.0);
        assert_eq!(
            turning_points(&[0.0, 1.0, 1.0, 0.0, 2.0, 2.0, 3.0]),
            vec![1.0, 0.0]
        );
    }

    #[test]
    fn average_precision_cases() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(),
            1.0
        );
        let ap = average_precision(&[0.9, 0.8, 0.1], &[false, true, true]).unwrap();
        assert!((ap - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        // constant scorer equals prevalence
        assert_eq!(
            average_precision(&[0.3; 4], &[true, false, false, false]).unwrap(),
            0.25
        );
        assert!(average_precision(&[0.3], &[false]).is_err());
    }

    #[test]
    fn kmeans_small_cases() {
        let mut rng = stream(1, Stream::Cluster);
        let pts: Vec<Vec<f64>> = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let r = kmeans(&pts, 1, 300, &mut rng).unwrap();
        assert!(r.assignments.iter().all(|&a| a == 0));
        let r = kmeans(&pts, 2, 300, &mut rng).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        assert!(kmeans(&pts, 5, 300, &mut rng).is_err());

        let dup = vec![vec![1.0, 1.0]; 5];
        let r = kmeans(&dup, 3, 300, &mut rng).unwrap();
        assert!(r.assignments.iter().all(|&a| a == r.assignments[0]));
    }

    #[test]
    fn silhouette_and_dbi_degenerate() {
        let pts = vec![vec![1.0], vec![1.0], vec![1.0], vec![1.0]];
        assert_eq!(silhouette(&pts, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(davies_bouldin(&pts, &[0, 0, 1, 1]).unwrap(), f64::INFINITY);
        assert!(silhouette(&pts, &[0, 1, 2, 3]).is_err());
        assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
        assert!(davies_bouldin(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn far_blobs() {
        let mut pts = Vec::new();
        let mut lab = Vec::new();
        for i in 0..10 {
            let e = i as f64 * 0.01;
            pts.push(vec![e, -e]);
            pts.push(vec![100.0 + e, 100.0 - e]);
            lab.extend([0, 1]);
        }
        assert!(silhouette(&pts, &lab).unwrap() > 0.9);
        assert!(davies_bouldin(&pts, &lab).unwrap() < 0.01);
        let scaled: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| p.iter().map(|v| v * 8.0).collect())
            .collect();
        let a = davies_bouldin(&pts, &lab).unwrap();
        let b = davies_bouldin(&scaled, &lab).unwrap();
        assert!((a - b).abs() < 1e-12 * a.max(1e-300));
    }
}
