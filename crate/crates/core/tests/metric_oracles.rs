use maneuverlab::eval::{
    average_precision, davies_bouldin, kmeans, linear_probe, linear_regression_probe, macro_auprc,
    random_reps, silhouette, turning_point_summary, ProbeConfig,
};
use maneuverlab::signals::MultivariateSeries;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Silhouette from the full distance matrix.
fn naive_silhouette(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = x.len();
    let k = labels.iter().max().unwrap() + 1;
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| euclid(&x[i], &x[j])).collect())
        .collect();
    let size = |c: usize| labels.iter().filter(|&&l| l == c).count();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if size(own) == 1 {
            continue;
        }
        let mean_to = |c: usize| {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c && j != i).collect();
            members.iter().map(|&j| d[i][j]).sum::<f64>() / members.len() as f64
        };
        let a = mean_to(own);
        let b = (0..k)
            .filter(|&c| c != own && size(c) > 0)
            .map(mean_to)
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

fn naive_dbi(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().unwrap() + 1;
    let dim = x[0].len();
    let members: Vec<Vec<usize>> = (0..k)
        .map(|c| (0..x.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let centroid: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            (0..dim)
                .map(|j| m.iter().map(|&i| x[i][j]).sum::<f64>() / m.len() as f64)
                .collect()
        })
        .collect();
    let scatter: Vec<f64> = (0..k)
        .map(|c| {
            members[c]
                .iter()
                .map(|&i| euclid(&x[i], &centroid[c]))
                .sum::<f64>()
                / members[c].len() as f64
        })
        .collect();
    (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (scatter[i] + scatter[j]) / euclid(&centroid[i], &centroid[j]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / k as f64
}

/// Random points with a random labelling that uses every one of `k` clusters.
fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = rng.random_range(10..=200);
    let dim = rng.random_range(1..=6);
    let k = rng.random_range(2..=5);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let mut labels: Vec<usize> = (0..n)
        .map(|i| if i < k { i } else { rng.random_range(0..k) })
        .collect();
    labels.shuffle(rng);
    (x, labels)
}

#[test]
fn silhouette_and_dbi_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..50 {
        let (x, labels) = random_instance(&mut rng);
        let s = silhouette(&x, &labels).unwrap();
        let s_ref = naive_silhouette(&x, &labels);
        assert!(
            (s - s_ref).abs() < 1e-12,
            "case {case}: silhouette {s} vs {s_ref}"
        );
        let d = davies_bouldin(&x, &labels).unwrap();
        let d_ref = naive_dbi(&x, &labels);
        assert!(
            (d - d_ref).abs() < 1e-12 * d_ref.max(1.0),
            "case {case}: DBI {d} vs {d_ref}"
        );
    }
}

fn blobs(
    rng: &mut ChaCha8Rng,
    centers: &[[f64; 2]],
    per: usize,
    spread: f64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            x.push(
                center
                    .iter()
                    .map(|&m| m + spread * rng.random_range(-1.0..1.0))
                    .collect(),
            );
            labels.push(c);
        }
    }
    (x, labels)
}

#[test]
fn separated_blobs_are_recovered_exactly() {
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, truth) = blobs(&mut rng, &centers, 25, 0.5);
        let km = kmeans(&x, 4, 300, &mut rng).unwrap();
        // a consistent relabelling maps every true cluster to one found cluster
        let mut map = [usize::MAX; 4];
        for (&t, &a) in truth.iter().zip(&km.assignments) {
            if map[t] == usize::MAX {
                map[t] = a;
            }
            assert_eq!(map[t], a, "seed {seed}");
        }
        let mut used = map.to_vec();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 4, "seed {seed}");
    }
}

#[test]
fn kmeans_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_reps(30, 3, &mut rng);
    let one = kmeans(&x, 1, 300, &mut rng).unwrap();
    assert!(one.assignments.iter().all(|&a| a == 0));
    let dup: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 2) as f64, 0.0]).collect();
    let km = kmeans(&dup, 4, 300, &mut rng).unwrap();
    let mut used = km.assignments.clone();
    used.sort_unstable();
    used.dedup();
    assert!(used.len() <= 2, "{used:?}");
    for i in 2..40 {
        assert_eq!(km.assignments[i], km.assignments[i % 2]);
    }
    assert!(kmeans(&x[..3], 4, 300, &mut rng).is_err());
}

#[test]
fn cluster_indices_on_far_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, labels) = blobs(&mut rng, &[[0.0, 0.0], [100.0, 0.0]], 10, 1.0);
    assert!(silhouette(&x, &labels).unwrap() > 0.9);
    let d = davies_bouldin(&x, &labels).unwrap();
    assert!(d < 0.1, "DBI {d}");
    let scaled: Vec<Vec<f64>> = x
        .iter()
        .map(|p| p.iter().map(|v| 7.5 * v).collect())
        .collect();
    assert!((davies_bouldin(&scaled, &labels).unwrap() - d).abs() < 1e-12);
}

#[test]
fn random_scorer_average_precision_is_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 1000;
    let prevalence = 0.2;
    let trials = 200;
    let mut sum = 0.0;
    for _ in 0..trials {
        let pos: Vec<bool> = (0..n)
            .map(|i| i < (prevalence * n as f64) as usize)
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        sum += average_precision(&scores, &pos).unwrap();
    }
    let mean = sum / trials as f64;
    assert!((mean - prevalence).abs() < 0.02, "mean AP {mean}");

    let pos: Vec<bool> = (0..n).map(|i| i % 5 == 0).collect();
    assert_eq!(average_precision(&vec![0.5; n], &pos).unwrap(), 0.2);
    let perfect: Vec<f64> = pos.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    assert_eq!(average_precision(&perfect, &pos).unwrap(), 1.0);
    let one_hot: Vec<Vec<f64>> = (0..8)
        .map(|i| (0..4).map(|c| if c == i % 4 { 1.0 } else { 0.0 }).collect())
        .collect();
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    assert_eq!(macro_auprc(&one_hot, &labels).unwrap(), 1.0);
}

#[test]
fn probe_on_random_representations_is_at_chance() {
    let seeds = 10;
    let (mut acc, mut auprc) = (0.0, 0.0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let reps = random_reps(400, 16, &mut rng);
        let mut labels: Vec<u8> = (0..400).map(|i| (i % 4) as u8).collect();
        labels.shuffle(&mut rng);
        let r = linear_probe(
            &reps,
            &labels,
            &ProbeConfig {
                seed,
                ..ProbeConfig::default()
            },
        )
        .unwrap();
        acc += r.accuracy;
        auprc += r.auprc;
    }
    let (acc, auprc) = (acc / seeds as f64, auprc / seeds as f64);
    assert!((acc - 0.25).abs() < 0.1, "accuracy {acc}");
    assert!((auprc - 0.25).abs() < 0.1, "AUPRC {auprc}");
}

#[test]
fn independent_target_has_no_held_out_skill() {
    let mut r2 = Vec::new();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let reps = random_reps(100, 8, &mut rng);
        let target: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
        r2.push(linear_regression_probe(&reps, &target, 0.7).unwrap().r2);
    }
    r2.sort_by(f64::total_cmp);
    let median = r2[r2.len() / 2];
    assert!(median <= 0.0, "median held-out R² {median}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wcss_never_increases(seed in 0u64..10_000, n in 5usize..120, k in 1usize..6, dim in 1usize..5) {
        prop_assume!(k <= n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_reps(n, dim, &mut rng);
        let km = kmeans(&x, k, 300, &mut rng).unwrap();
        for w in km.wcss_history.windows(2) {
            prop_assert!(w[1] <= w[0], "{:?}", km.wcss_history);
        }
    }

    #[test]
    fn turning_point_summary_ignores_offsets(
        values in prop::collection::vec(-5.0f64..5.0, 40..120),
        shift in -100.0f64..100.0,
    ) {
        let other: Vec<f64> = values.iter().rev().copied().collect();
        let a = MultivariateSeries::new(vec![values.clone(), other.clone()]).unwrap();
        let b = MultivariateSeries::new(vec![
            values.iter().map(|v| v + shift).collect(),
            other.iter().map(|v| v + shift).collect(),
        ]).unwrap();
        let sa = turning_point_summary(&a, 19).unwrap();
        let sb = turning_point_summary(&b, 19).unwrap();
        prop_assert_eq!(sa.len(), sb.len());
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!(*x >= 0.0);
            prop_assert!((x - y).abs() < 1e-9 * x.max(1.0));
        }
    }
}
