use flim_core::filters::{compute_marker_stats, learn_filters, STD_FLOOR};
use flim_core::kmeans::{kmeans, KMeansParams};
use flim_core::markers::{Patch, PatchSets, PatchSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn patch(values: Vec<f32>, label: u16) -> Patch {
    Patch {
        values,
        label,
        source: PatchSource { image_id: "fixture".into(), x: 0, y: 0 },
    }
}

/// Two classes of 3x3x2 patches around opposite prototypes.
fn two_blob_patches(seed: u64, per_class: usize) -> PatchSets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let proto: Vec<f32> = (0..18).map(|i| if i % 3 == 0 { 1.0 } else { -0.5 }).collect();
    let mut sets = PatchSets::new(3, 2);
    for label in [1u16, 2] {
        let sign = if label == 1 { 1.0 } else { -1.0 };
        for _ in 0..per_class {
            let v = proto.iter().map(|&p| sign * p + noise.sample(&mut rng) as f32).collect();
            sets.push(patch(v, label)).unwrap();
        }
    }
    sets
}

#[test]
fn standardized_patches_have_zero_mean_unit_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut sets = PatchSets::new(3, 2);
    for i in 0..50 {
        let v: Vec<f32> = (0..18).map(|j| rng.random_range(-2.0..3.0) * (1.0 + j as f32)).collect();
        sets.push(patch(v, 1 + (i % 2) as u16)).unwrap();
    }
    let stats = compute_marker_stats(&sets).unwrap();
    assert_eq!(stats.floored_components(), 0);
    let standardized: Vec<Vec<f32>> = sets.iter().map(|p| stats.standardize(&p.values)).collect();
    for j in 0..18 {
        let col: Vec<f64> = standardized.iter().map(|s| f64::from(s[j])).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert!(mean.abs() <= 1e-6, "component {j}: mean {mean}");
        assert!((std - 1.0).abs() <= 1e-6, "component {j}: std {std}");
    }
}

#[test]
fn flat_components_are_floored() {
    let mut sets = PatchSets::new(1, 2);
    sets.push(patch(vec![0.3, 1.0], 1)).unwrap();
    sets.push(patch(vec![0.3, 3.0], 2)).unwrap();
    let stats = compute_marker_stats(&sets).unwrap();
    assert_eq!(stats.std[0], STD_FLOOR);
    assert_eq!(stats.floored_components(), 1);
    assert_eq!(stats.standardize(&[0.3, 2.0]), vec![0.0, 0.0]);
}

/// Lowest K-means objective over every partition into `k` non-empty groups.
fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    fn cost(groups: &[Vec<usize>], points: &[Vec<f64>]) -> f64 {
        let dim = points[0].len();
        groups
            .iter()
            .map(|g| {
                let mut mean = vec![0.0; dim];
                for &i in g {
                    for (m, v) in mean.iter_mut().zip(&points[i]) {
                        *m += v / g.len() as f64;
                    }
                }
                g.iter()
                    .map(|&i| points[i].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .sum::<f64>()
            })
            .sum()
    }
    // restricted growth strings enumerate each set partition once
    fn walk(i: usize, points: &[Vec<f64>], k: usize, groups: &mut Vec<Vec<usize>>, best: &mut f64) {
        if i == points.len() {
            if groups.len() == k {
                *best = best.min(cost(groups, points));
            }
            return;
        }
        if groups.len() + (points.len() - i) < k {
            return;
        }
        for g in 0..groups.len() {
            groups[g].push(i);
            walk(i + 1, points, k, groups, best);
            groups[g].pop();
        }
        if groups.len() < k {
            groups.push(vec![i]);
            walk(i + 1, points, k, groups, best);
            groups.pop();
        }
    }
    let mut best = f64::INFINITY;
    walk(0, points, k, &mut Vec::new(), &mut best);
    best
}

#[test]
fn kmeans_matches_exhaustive_partition_on_two_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let points: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            let c = if i < 6 { -4.0 } else { 4.0 };
            vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        })
        .collect();
    let flat: Vec<f32> = points.iter().flatten().map(|&v| v as f32).collect();
    let pts32: Vec<Vec<f64>> = flat.chunks(2).map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect();
    let res = kmeans(&flat, 2, &KMeansParams::new(2, 1)).unwrap();
    let optimum = exhaustive_optimum(&pts32, 2);
    assert!((res.objective - optimum).abs() <= 1e-6, "{} vs {optimum}", res.objective);
    assert!(res.assignments[..6].iter().all(|&a| a == res.assignments[0]));
    assert!(res.assignments[6..].iter().all(|&a| a != res.assignments[0]));
}

#[test]
fn kmeans_history_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let flat: Vec<f32> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
    let res = kmeans(&flat, 3, &KMeansParams::new(5, 4)).unwrap();
    for w in res.history.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{:?}", res.history);
    }
}

#[test]
fn filters_have_unit_norm_and_requested_count() {
    let sets = two_blob_patches(1, 40);
    for counts in [vec![1, 1], vec![3, 2], vec![8, 0], vec![5, 7]] {
        let bank = learn_filters(&sets, &counts, 3).unwrap();
        assert_eq!(bank.num_filters(), counts.iter().sum::<usize>());
        for j in 0..bank.num_filters() {
            let norm: f64 = bank.filter(j).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "filter {j}: {norm}");
        }
    }
}

#[test]
fn learning_is_deterministic() {
    let sets = two_blob_patches(5, 30);
    let a = learn_filters(&sets, &[4, 4], 77).unwrap();
    let b = learn_filters(&sets, &[4, 4], 77).unwrap();
    assert_eq!(a, b);
}

#[test]
fn each_class_filter_prefers_its_own_class() {
    let sets = two_blob_patches(8, 50);
    let bank = learn_filters(&sets, &[2, 2], 0).unwrap();
    let mean_response = |j: usize, label: u16| {
        let members = sets.class(label);
        members
            .iter()
            .map(|p| {
                let s = bank.stats.standardize(&p.values);
                s.iter().zip(bank.filter(j)).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>()
            })
            .sum::<f64>()
            / members.len() as f64
    };
    for j in 0..bank.num_filters() {
        let own = bank.classes[j];
        let other = 3 - own;
        assert!(
            mean_response(j, own) > mean_response(j, other),
            "filter {j} of class {own}"
        );
    }
}
