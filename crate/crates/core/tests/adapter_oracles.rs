use mantis_core::adapters::{fit_pca, fit_rand_proj, fit_svd, fit_var_selector, reshape_for_fit, Design};
use mantis_core::linalg::normalize_sign;
use mantis_core::RawSeries;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_design(rows: usize, cols: usize, seed: u64) -> Design {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // distinct column scales keep the spectrum well separated
    let data = (0..rows * cols)
        .map(|i| rng.random_range(-1.0..1.0) * (1.0 + (i % cols) as f64) + 0.3 * (i % cols) as f64)
        .collect();
    Design { rows, cols, data }
}

fn oracle_rows(design: &Design, center: bool) -> Vec<Vec<f64>> {
    let mut m = DMatrix::from_row_slice(design.rows, design.cols, &design.data);
    if center {
        for c in 0..design.cols {
            let mean = m.column(c).mean();
            m.column_mut(c).add_scalar_mut(-mean);
        }
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order
        .into_iter()
        .map(|k| {
            let mut row: Vec<f64> = vt.row(k).iter().copied().collect();
            normalize_sign(&mut row);
            row
        })
        .collect()
}

fn assert_rows_match(weights: &[f32], oracle: &[Vec<f64>], d: usize) {
    for (k, row) in oracle.iter().enumerate().take(weights.len() / d) {
        for (j, &o) in row.iter().enumerate() {
            let w = weights[k * d + j] as f64;
            assert!((w - o).abs() < 1e-6, "component {k} entry {j}: {w} vs {o}");
        }
    }
}

#[test]
fn pca_matches_full_svd_oracle() {
    for seed in 0..10 {
        let design = random_design(40, 6, seed);
        let a = fit_pca(&design, 6).unwrap();
        assert_rows_match(&a.weights, &oracle_rows(&design, true), 6);
    }
}

#[test]
fn svd_matches_full_svd_oracle() {
    for seed in 0..10 {
        let design = random_design(40, 6, 100 + seed);
        let a = fit_svd(&design, 4).unwrap();
        assert_rows_match(&a.weights, &oracle_rows(&design, false), 6);
    }
}

fn gram_of_rows(w: &[f32], k: usize, d: usize) -> Vec<f64> {
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            g[i * k + j] = (0..d).map(|c| w[i * d + c] as f64 * w[j * d + c] as f64).sum();
        }
    }
    g
}

#[test]
fn components_are_orthonormal() {
    let design = random_design(50, 8, 7);
    for a in [fit_pca(&design, 5).unwrap(), fit_svd(&design, 5).unwrap()] {
        let g = gram_of_rows(&a.weights, 5, 8);
        for i in 0..5 {
            for j in 0..5 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[i * 5 + j] - e).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn svd_on_centered_data_spans_pca_subspace() {
    let mut design = random_design(60, 5, 3);
    for c in 0..5 {
        let mean: f64 = design.column(c).iter().sum::<f64>() / 60.0;
        for r in 0..60 {
            design.data[r * 5 + c] -= mean;
        }
    }
    let p = fit_pca(&design, 3).unwrap();
    let s = fit_svd(&design, 3).unwrap();
    // projection of each svd row onto the pca span keeps its full norm
    for k in 0..3 {
        let row = &s.weights[k * 5..(k + 1) * 5];
        let captured: f64 = (0..3)
            .map(|i| {
                let dot: f64 = (0..5).map(|c| row[c] as f64 * p.weights[i * 5 + c] as f64).sum();
                dot * dot
            })
            .sum();
        let angle = (captured.min(1.0)).sqrt().acos();
        assert!(angle < 1e-3, "principal angle {angle}");
    }
}

#[test]
fn pca_reconstruction_error_equals_discarded_energy() {
    let design = random_design(40, 6, 11);
    let samples = design.to_series(8).unwrap();
    let a = fit_pca(&design, 3).unwrap();
    let mut err = 0.0;
    for s in &samples {
        let z = a.apply(s).unwrap();
        for step in 0..8 {
            for c in 0..6 {
                let back: f64 = (0..3)
                    .map(|k| a.weights[k * 6 + c] as f64 * z.channel(k)[step] as f64)
                    .sum::<f64>()
                    + a.means[c] as f64;
                err += (back - s.channel(c)[step] as f64).powi(2);
            }
        }
    }
    let mut m = DMatrix::from_row_slice(40, 6, &design.data);
    for c in 0..6 {
        let mean = m.column(c).mean();
        m.column_mut(c).add_scalar_mut(-mean);
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let discarded: f64 = sv[3..].iter().map(|s| s * s).sum();
    assert!(
        (err - discarded).abs() / discarded.max(1.0) < 1e-4,
        "{err} vs {discarded}"
    );
}

#[test]
fn svd_truncation_is_best_rank_k_on_small_matrix() {
    let design = random_design(4, 3, 5);
    let a = fit_svd(&design, 2).unwrap();
    let m = DMatrix::from_row_slice(4, 3, &design.data);
    let w = DMatrix::from_row_slice(2, 3, &a.weights.iter().map(|&x| x as f64).collect::<Vec<_>>());
    let approx = &m * w.transpose() * &w;
    let err = (&m - approx).norm_squared();
    let svd = m.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    assert!((err - sv[2] * sv[2]).abs() < 1e-5);
    // any other orthonormal pair of rows does no better
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let r = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let q = r.qr().q();
        let other = (&m - &m * &q * q.transpose()).norm_squared();
        assert!(other >= err - 1e-6);
    }
}

#[test]
fn var_selector_matches_subset_enumeration() {
    for seed in 0..20 {
        let design = random_design(30, 5, 200 + seed);
        let a = fit_var_selector(&design, 2).unwrap();
        let var = |c: usize| {
            let col = design.column(c);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64
        };
        let mut best = (f64::MIN, (0, 0));
        for i in 0..5 {
            for j in i + 1..5 {
                let s = var(i) + var(j);
                if s > best.0 {
                    best = (s, (i, j));
                }
            }
        }
        let mut got = a.indices.clone();
        got.sort();
        assert_eq!(got, vec![best.1 .0, best.1 .1]);
        assert!(var(a.indices[0]) >= var(a.indices[1]));
    }
}

#[test]
fn random_projection_preserves_norms_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm2: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
    let s = RawSeries::new(1000, 2, x.iter().flat_map(|&v| [v, v]).collect(), None).unwrap();
    let mut mean = 0.0;
    for trial in 0..100 {
        let a = fit_rand_proj(1000, 10, trial).unwrap();
        let y = a.apply(&s).unwrap();
        mean += (0..10).map(|k| (y.channel(k)[0] as f64).powi(2)).sum::<f64>() / 100.0;
    }
    assert!((mean / norm2 - 1.0).abs() < 0.2, "{}", mean / norm2);
}

proptest! {
    #[test]
    fn pca_variances_are_non_increasing(seed in 0u64..500) {
        let design = random_design(30, 4, seed);
        let a = fit_pca(&design, 4).unwrap();
        let samples = design.to_series(30).unwrap();
        let z = a.apply(&samples[0]).unwrap();
        let var = |c: usize| {
            let ch = z.channel(c);
            let m = ch.iter().map(|&v| v as f64).sum::<f64>() / 30.0;
            ch.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>()
        };
        for k in 1..4 {
            prop_assert!(var(k) <= var(k - 1) + 1e-6);
        }
    }

    #[test]
    fn mean_free_adapters_commute_with_time_slicing(seed in 0u64..500, s0 in 0usize..5, len in 2usize..5) {
        let design = random_design(20, 3, seed);
        let samples = design.to_series(10).unwrap();
        let x = &samples[0];
        let a = fit_svd(&design, 2).unwrap();
        let full = a.apply(x).unwrap();
        let sliced: Vec<f32> = (0..3).flat_map(|c| x.channel(c)[s0..s0 + len].to_vec()).collect();
        let part = a.apply(&RawSeries::new(3, len, sliced, None).unwrap()).unwrap();
        for k in 0..2 {
            prop_assert_eq!(&full.channel(k)[s0..s0 + len], part.channel(k));
        }
    }

    #[test]
    fn reshape_round_trips(n in 1usize..4, t in 2usize..6, d in 1usize..4, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<RawSeries> = (0..n)
            .map(|_| RawSeries::new(d, t, (0..d * t).map(|_| rng.random_range(-5.0f32..5.0)).collect(), None).unwrap())
            .collect();
        let design = reshape_for_fit(&samples).unwrap();
        prop_assert_eq!(design.rows, n * t);
        prop_assert_eq!(design.to_series(t).unwrap(), samples);
    }
}
