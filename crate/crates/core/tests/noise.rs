mod common;

use std::collections::HashMap;

use mixnoise::synthdata::{
    empirical_extended_matrix, generate_mixture, generate_reservoir, inject_mixed_noise, region_of, reservoir_size,
    true_region_matrices, MixtureSpec, NoiseSpec,
};
use mixnoise::Split;

fn floor_count(rate: f64, n: usize) -> usize {
    (rate * n as f64 + 1e-9).floor() as usize
}

#[test]
fn corruption_counts_are_exact_per_split() {
    let mix = MixtureSpec::separated(4, 6, 2, 5.0).unwrap();
    let clean = generate_mixture(&mix, 3_000, 11).unwrap();
    let reservoir = generate_reservoir(&mix, reservoir_size(&mix, 3_000), 11).unwrap();
    let spec = NoiseSpec::class_dependent(0.5, 0.4, 11);
    let noisy = inject_mixed_noise(&clean, &spec, &reservoir).unwrap();
    for split in [Split::Train, Split::Val] {
        let idx = noisy.indices(split);
        let open = idx.iter().filter(|&&i| noisy.is_open(i)).count();
        let flipped = idx
            .iter()
            .filter(|&&i| !noisy.is_open(i) && noisy.noisy_labels[i] != noisy.clean_labels[i])
            .count();
        assert_eq!(open, floor_count(0.5 * 0.4, idx.len()), "{split:?}");
        assert_eq!(flipped, floor_count(0.5 * 0.6, idx.len()), "{split:?}");
    }
    for i in noisy.indices(Split::Test) {
        assert_eq!(noisy.clean_labels[i], clean.clean_labels[i]);
        assert_eq!(noisy.noisy_labels[i], clean.noisy_labels[i]);
        assert_eq!(noisy.features.row(i), clean.features.row(i));
    }
    // replaced examples keep the label of the example they replace
    for i in 0..noisy.n() {
        if noisy.is_open(i) {
            assert_eq!(noisy.noisy_labels[i], clean.clean_labels[i]);
            assert_ne!(noisy.features.row(i), clean.features.row(i));
        }
    }
}

#[test]
fn empirical_matrix_matches_direct_counting() {
    let fx = common::gaussian(3, 5, 4_000, 6.0, 0.6, 0.5, 3);
    let idx = fx.data.indices(Split::Train);
    let mut pairs: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    for &i in &idx {
        *pairs.entry((fx.data.clean_labels[i], fx.data.noisy_labels[i])).or_default() += 1.0;
        *rows.entry(fx.data.clean_labels[i]).or_default() += 1.0;
    }
    let emp = empirical_extended_matrix(&fx.data, &idx).unwrap();
    for i in 0..=3 {
        for j in 0..3 {
            let expected = pairs.get(&(i, j)).copied().unwrap_or(0.0) / rows[&i];
            assert!((emp.entries()[[i, j]] - expected).abs() < 1e-15, "({i},{j})");
        }
    }
    // the label-preserving meta row sits near the priors, closed rows near the analytic matrix
    for i in 0..=3 {
        for j in 0..3 {
            assert!((emp.entries()[[i, j]] - fx.truth.entries()[[i, j]]).abs() < 0.06, "({i},{j})");
        }
    }
}

#[test]
fn region_noise_follows_each_region_flip_law() {
    let fx = common::two_regions(3, 6, 6_000, [0.9, 0.6], 24.0, 0.4, 0.5, 5);
    let truths = true_region_matrices(&fx.noise, &[1.0 / 3.0; 3]).unwrap();
    let idx = fx.data.indices(Split::Train);
    for (r, truth) in truths.iter().enumerate() {
        // placement follows the features before replacement
        let members: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| region_of(&fx.noise.region_matrices, fx.clean.features.row(i)) == r)
            .collect();
        let open = members.iter().filter(|&&i| fx.data.is_open(i)).count();
        assert_eq!(open, floor_count(0.4 * 0.5, members.len()));
        let emp = empirical_extended_matrix(&fx.data, &members).unwrap();
        for i in 0..3 {
            // exact apportioning: each clean-class count is split by largest remainder
            let n_i = members.iter().filter(|&&k| fx.data.clean_labels[k] == i).count() as f64;
            for j in 0..3 {
                assert!((emp.entries()[[i, j]] - truth.entries()[[i, j]]).abs() <= 1.0 / n_i + 1e-12);
            }
        }
    }
}

#[test]
fn generation_is_reproducible() {
    let a = common::gaussian(3, 4, 1_000, 6.0, 0.4, 0.5, 9);
    let b = common::gaussian(3, 4, 1_000, 6.0, 0.4, 0.5, 9);
    let c = common::gaussian(3, 4, 1_000, 6.0, 0.4, 0.5, 10);
    assert_eq!(a.data, b.data);
    assert_ne!(a.data, c.data);
}
