use flim_core::classifier::mlp::{train_mlp, MlpModel, TrainConfig};
use flim_core::classifier::svm::{train_svm, LinearSvmModel, SvmClassifier, SvmConfig};
use flim_core::classifier::{evaluate, Confusion};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn primal(w: f64, b: f64, xs: &[f64], ys: &[f64], c: f64) -> f64 {
    0.5 * w * w
        + c * xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (1.0 - y * (w * x + b)).max(0.0))
            .sum::<f64>()
}

fn ternary(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let x = (lo + hi) / 2.0;
    (x, f(x))
}

/// Minimum of the convex 1-D primal by nested ternary search over (w, b).
fn tiny_qp_oracle(xs: &[f64], ys: &[f64], c: f64) -> f64 {
    let inner = |w: f64| ternary(-50.0, 50.0, |b| primal(w, b, xs, ys, c)).1;
    ternary(-50.0, 50.0, inner).1
}

#[test]
fn svm_objective_matches_tiny_qp_oracle() {
    let fixtures: [(&[f64], &[f64], f64); 4] = [
        (&[1.0, 1.0, -1.0], &[1.0, -1.0, -1.0], 1.0),
        (&[2.0, 2.0], &[1.0, -1.0], 0.5),
        (&[0.5, 0.5, 3.0], &[-1.0, 1.0, 1.0], 10.0),
        (&[1.0, -2.0, 1.0], &[1.0, -1.0, -1.0], 0.01),
    ];
    for (xs, ys, c) in fixtures {
        let feats: Vec<Vec<f32>> = xs.iter().map(|&x| vec![x as f32]).collect();
        let labels: Vec<i8> = ys.iter().map(|&y| y as i8).collect();
        let model = train_svm(&feats, &labels, &SvmConfig { c, ..Default::default() }).unwrap();
        let got = model.primal_objective(&feats, &labels);
        let want = tiny_qp_oracle(xs, ys, c);
        assert!((got - want).abs() <= 1e-3, "{xs:?} {ys:?} C={c}: {got} vs {want}");
    }
}

#[test]
fn svm_default_c_learns_nonzero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let y = if i % 2 == 0 { 1u16 } else { 2 };
        let shift = if y == 1 { 1.0 } else { -1.0 };
        feats.push((0..20).map(|_| shift + rng.random_range(-0.5..0.5)).collect::<Vec<f32>>());
        labels.push(y);
    }
    let clf = SvmClassifier::train(&feats, &labels, &SvmConfig::default()).unwrap();
    assert_eq!(clf.models.len(), 1);
    let m: &LinearSvmModel = &clf.models[0];
    assert_eq!(m.c, 0.01);
    assert!(m.w.iter().any(|&w| w != 0.0));
    let correct = feats.iter().zip(&labels).filter(|(x, &y)| clf.predict(x) == y).count();
    assert_eq!(correct, 60);
}

/// Largest relative deviation between the analytic and central-difference gradient.
fn gradient_check(model: &mut MlpModel, xs: &[Vec<f32>], targets: &[usize]) -> f64 {
    let refs: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
    let analytic = model.loss_and_grad(&refs, targets).1.flatten();
    let base = model.parameters();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        model.set_parameters(&p);
        let up = model.loss_and_grad(&refs, targets).0;
        p[i] -= 2.0 * h;
        model.set_parameters(&p);
        let down = model.loss_and_grad(&refs, targets).0;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    model.set_parameters(&base);
    worst
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut tiny = MlpModel::new(vec![1, 1, 2], vec![1, 2], 0).unwrap();
    tiny.set_parameters(&[0.8, 0.1, -0.6, 0.9, 0.05, -0.2]);
    let worst = gradient_check(&mut tiny, &[vec![1.5], vec![0.7]], &[0, 1]);
    assert!(worst <= 1e-4, "tiny net: {worst}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut wider = MlpModel::new(vec![3, 5, 4, 3], vec![1, 2, 3], 9).unwrap();
    let xs: Vec<Vec<f32>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let worst = gradient_check(&mut wider, &xs, &[0, 1, 2, 0, 1, 2]);
    assert!(worst <= 1e-4, "wider net: {worst}");
}

#[test]
fn mlp_fits_separable_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..80 {
        let y = 1 + (i % 2) as u16;
        let c = if y == 1 { [2.0, 2.0] } else { [-2.0, -2.0] };
        feats.push(vec![c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-1.0..1.0)]);
        labels.push(y);
    }
    let config = TrainConfig {
        epochs: 40,
        batch_size: 8,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let (model, history) = train_mlp(&feats, &labels, &[8], &config).unwrap();
    assert_eq!(history.len(), 40);
    assert!(history[39] < history[0]);
    let correct = feats.iter().zip(&labels).filter(|(x, &y)| model.predict(x) == y).count();
    assert_eq!(correct, 80);
}

fn confusion_oracle(pred: &[u16], truth: &[u16], positive: u16) -> (usize, usize, usize, usize) {
    let mut m = [[0usize; 2]; 2];
    for (p, t) in pred.iter().zip(truth) {
        m[usize::from(*p == positive)][usize::from(*t == positive)] += 1;
    }
    (m[1][1], m[1][0], m[0][1], m[0][0])
}

#[test]
fn hand_computed_fixtures() {
    // (tp, fp, fn, tn) -> exact fractions
    let cases: [((usize, usize, usize, usize), (f64, f64, f64)); 4] = [
        ((3, 1, 2, 4), (3.0 / 4.0, 3.0 / 5.0, 6.0 / 9.0)),
        ((5, 0, 0, 5), (1.0, 1.0, 1.0)),
        ((0, 0, 4, 6), (0.0, 0.0, 0.0)),
        ((1, 3, 0, 0), (1.0 / 4.0, 1.0, 2.0 / 5.0)),
    ];
    for ((tp, fp, fn_, tn), (p, r, f)) in cases {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (n, pv, tv) in [(tp, 1u16, 1u16), (fp, 1, 2), (fn_, 2, 1), (tn, 2, 2)] {
            pred.extend(std::iter::repeat_n(pv, n));
            truth.extend(std::iter::repeat_n(tv, n));
        }
        let m = evaluate(&pred, &truth, 1).unwrap();
        assert_eq!(m.confusion, Confusion { tp, fp, fn_, tn });
        assert_eq!((m.precision, m.recall, m.f_score), (p, r, f));
    }
}

proptest! {
    #[test]
    fn evaluate_matches_confusion_oracle(
        pairs in proptest::collection::vec((1u16..4, 1u16..4), 0..100),
        positive in 1u16..4,
    ) {
        let (pred, truth): (Vec<u16>, Vec<u16>) = pairs.into_iter().unzip();
        let m = evaluate(&pred, &truth, positive).unwrap();
        let (tp, fp, fn_, tn) = confusion_oracle(&pred, &truth, positive);
        prop_assert_eq!(m.confusion, Confusion { tp, fp, fn_, tn });
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        prop_assert!((m.precision - p).abs() < 1e-12);
        prop_assert!((m.recall - r).abs() < 1e-12);
        prop_assert!((m.f_score - f).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_example_order(
        pairs in proptest::collection::vec((1u16..3, 1u16..3), 1..100),
        seed in any::<u64>(),
    ) {
        let (pred, truth): (Vec<u16>, Vec<u16>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (sp, st): (Vec<u16>, Vec<u16>) = shuffled.into_iter().unzip();
        prop_assert_eq!(evaluate(&pred, &truth, 1).unwrap(), evaluate(&sp, &st, 1).unwrap());
    }
}
