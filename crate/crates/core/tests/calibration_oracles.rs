use mantis_core::calibration::{
    apply_temperature, ece, fit_isotonic_multiclass, fit_temperature, reliability_bins, softmax_row, temperature_nll,
    ProbabilityMatrix, TemperatureCorrector,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Second implementation: loop over bins, then over samples.
fn ece_direct(probs: &[Vec<f64>], labels: &[usize], m: usize) -> f64 {
    let n = probs.len();
    let mut total = 0.0;
    for j in 0..m {
        let lo = j as f64 / m as f64;
        let hi = (j + 1) as f64 / m as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let row = &probs[i];
            let mut pred = 0;
            for c in 1..row.len() {
                if row[c] > row[pred] {
                    pred = c;
                }
            }
            let conf = row[pred];
            let inside = (conf > lo && conf <= hi) || (j == 0 && conf == 0.0);
            if inside {
                acc += if pred == labels[i] { 1.0 } else { 0.0 } - conf;
            }
        }
        total += acc.abs();
    }
    total / n as f64
}

fn random_logits(n: usize, k: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n * k).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

#[test]
fn ece_matches_direct_loop_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let n = rng.random_range(1..12);
        let k = rng.random_range(2..5);
        let logits = random_logits(n, k, 3.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pm = ProbabilityMatrix::from_logits(k, &logits, labels.clone()).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| pm.row(i).to_vec()).collect();
        assert_eq!(ece(&pm, 10), ece_direct(&rows, &labels, 10));
    }
}

#[test]
fn ece_of_calibrated_ensemble_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 100_000;
    let mut probs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c: f64 = rng.random_range(0.5..1.0);
        probs.extend([c, 1.0 - c]);
        labels.push(if rng.random_bool(c) { 0 } else { 1 });
    }
    let pm = ProbabilityMatrix::new(2, probs, labels).unwrap();
    assert!(ece(&pm, 10) < 0.02);
}

/// Labels sampled from softmax(z) are calibrated at T = 1.
fn sampled_from_softmax(n: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_logits(n, k, 3.0, &mut rng);
    let labels = logits
        .chunks(k)
        .map(|row| {
            let p = softmax_row(row);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    return c;
                }
            }
            k - 1
        })
        .collect();
    (logits, labels)
}

fn grid_argmin(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    (0..600)
        .map(|i| (0.05f64.ln() + (20f64.ln() - 0.05f64.ln()) * i as f64 / 599.0).exp())
        .min_by(|&a, &b| temperature_nll(logits, k, labels, a).total_cmp(&temperature_nll(logits, k, labels, b)))
        .unwrap()
}

#[test]
fn calibrated_logits_give_unit_temperature() {
    let (logits, labels) = sampled_from_softmax(8_000, 3, 1);
    let t = fit_temperature(&logits, 3, &labels).unwrap().temperature;
    assert!((t - 1.0).abs() < 0.05, "{t}");
    assert!((t - grid_argmin(&logits, 3, &labels)).abs() < 0.01);
}

#[test]
fn doubled_logits_give_temperature_two() {
    let (logits, labels) = sampled_from_softmax(8_000, 3, 2);
    let doubled: Vec<f64> = logits.iter().map(|z| 2.0 * z).collect();
    let t = fit_temperature(&doubled, 3, &labels).unwrap().temperature;
    let oracle = 2.0 * grid_argmin(&logits, 3, &labels);
    assert!((t - 2.0).abs() < 0.1, "{t}");
    assert!((t - oracle).abs() < 0.02, "{t} vs {oracle}");
}

#[test]
fn isotonic_maps_are_monotone_and_rows_stay_on_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = random_logits(300, 4, 2.0, &mut rng);
    let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..4)).collect();
    let pm = ProbabilityMatrix::from_logits(4, &logits, labels).unwrap();
    let iso = fit_isotonic_multiclass(&pm).unwrap();
    for map in &iso.maps {
        let grid: Vec<f64> = (0..100).map(|i| map.eval(i as f64 / 99.0)).collect();
        assert!(grid.windows(2).all(|w| w[0] <= w[1]));
    }
    let out = iso.apply(&pm).unwrap();
    for i in 0..out.len() {
        assert!((out.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn isotonic_is_identity_on_frequency_matched_probabilities() {
    // each confidence level p appears 10 times with exactly round(10 p) positives
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for level in 1..10 {
        let p = level as f64 / 10.0;
        for j in 0..10 {
            probs.extend([p, 1.0 - p]);
            labels.push(if j < level { 0 } else { 1 });
        }
    }
    let pm = ProbabilityMatrix::new(2, probs, labels).unwrap();
    let iso = fit_isotonic_multiclass(&pm).unwrap();
    for level in 1..10 {
        let p = level as f64 / 10.0;
        assert!((iso.maps[0].eval(p) - p).abs() < 1e-6);
        assert!((iso.maps[1].eval(1.0 - p) - (1.0 - p)).abs() < 1e-6);
    }
}

#[test]
fn reliability_counts_sum_to_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random_logits(77, 3, 4.0, &mut rng);
    let labels: Vec<usize> = (0..77).map(|_| rng.random_range(0..3)).collect();
    let pm = ProbabilityMatrix::from_logits(3, &logits, labels).unwrap();
    let bins = reliability_bins(&pm, 10);
    assert_eq!(bins.count.iter().sum::<usize>(), 77);
}

proptest! {
    #[test]
    fn ece_is_a_fraction(seed in 0u64..1000, n in 1usize..40, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(n, k, 5.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pm = ProbabilityMatrix::from_logits(k, &logits, labels).unwrap();
        let e = ece(&pm, 10);
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn temperature_preserves_argmax(seed in 0u64..1000, t in prop::sample::select(vec![0.1, 1.0, 10.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(20, 4, 3.0, &mut rng);
        let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
        let before = ProbabilityMatrix::from_logits(4, &logits, labels.clone()).unwrap();
        let after = apply_temperature(&TemperatureCorrector { temperature: t }, &logits, 4, labels).unwrap();
        prop_assert_eq!(before.predictions(), after.predictions());
        prop_assert_eq!(before.accuracy(), after.accuracy());
    }

    #[test]
    fn fitted_temperature_never_hurts_nll(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(30, 3, 4.0, &mut rng);
        let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
        let t = fit_temperature(&logits, 3, &labels).unwrap().temperature;
        prop_assert!(temperature_nll(&logits, 3, &labels, t) <= temperature_nll(&logits, 3, &labels, 1.0) + 1e-8);
    }
}
