use flim_core::kmeans::{kmeans, KMeansParams};
use flim_core::projection::{
    conditional_probabilities, joint_probabilities, kl_divergence, kl_gradient, squared_distances,
    tsne, TsneParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn two_blobs(seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut vectors = Vec::new();
    let mut blob = Vec::new();
    for i in 0..20 {
        let c = if i < 10 { 0.0 } else { 10.0 };
        vectors.push((0..50).map(|_| (c + noise.sample(&mut rng)) as f32).collect());
        blob.push(i / 10);
    }
    (vectors, blob)
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

fn params() -> TsneParams {
    TsneParams { perplexity: 5.0, seed: 3, ..TsneParams::default() }
}

#[test]
fn separated_blobs_stay_separated() {
    let (vectors, blob) = two_blobs(1);
    let emb = tsne(&vectors, &ids(20), &params()).unwrap();
    assert_eq!(emb.ids, ids(20));
    assert!(emb.points.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
    let flat: Vec<f32> = emb.points.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect();
    let km = kmeans(&flat, 2, &KMeansParams::new(2, 0)).unwrap();
    let agree = km.assignments.iter().zip(&blob).filter(|(a, b)| a == b).count();
    let best = agree.max(20 - agree);
    assert!(best as f64 / 20.0 >= 0.95, "agreement {best}/20");
}

#[test]
fn embedding_is_deterministic() {
    let (vectors, _) = two_blobs(2);
    let a = tsne(&vectors, &ids(20), &params()).unwrap();
    let b = tsne(&vectors, &ids(20), &params()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn kl_decreases_after_exaggeration_and_settles() {
    let (vectors, _) = two_blobs(3);
    let emb = tsne(&vectors, &ids(20), &params()).unwrap();
    let kl = &emb.kl_history;
    assert_eq!(kl.len(), 1000);
    assert!(kl.iter().all(|&v| v >= 0.0));
    assert!(kl[999] < kl[249], "{} vs {}", kl[999], kl[249]);
    for w in kl[900..].windows(2) {
        assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<Vec<f32>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let p = joint_probabilities(&conditional_probabilities(&squared_distances(&x), 6, 1.5), 6);
    let y: Vec<[f64; 2]> = (0..6).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let grad = kl_gradient(&p, &y);
    let h = 1e-6;
    for i in 0..6 {
        for d in 0..2 {
            let mut up = y.clone();
            up[i][d] += h;
            let mut down = y.clone();
            down[i][d] -= h;
            let numeric = (kl_divergence(&p, &up) - kl_divergence(&p, &down)) / (2.0 * h);
            let scale = grad[i][d].abs().max(numeric.abs()).max(1e-7);
            let rel = (grad[i][d] - numeric).abs() / scale;
            assert!(rel <= 1e-4, "point {i} dim {d}: {} vs {numeric}", grad[i][d]);
        }
    }
}
