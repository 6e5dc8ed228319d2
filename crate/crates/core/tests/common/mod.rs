#![allow(dead_code)]

use mixnoise::synthdata::{
    generate_mixture, generate_reservoir, inject_mixed_noise, inject_region_noise, reservoir_size, true_extended_matrix,
    MixtureSpec, NoiseSpec, NoiseStructure, RegionNoise,
};
use mixnoise::{Dataset, ExtendedTransitionMatrix};

/// Axis-aligned mixture (2 open populations) with class-dependent mixed noise.
pub struct Fixture {
    pub mixture: MixtureSpec,
    pub noise: NoiseSpec,
    pub data: Dataset,
    pub truth: ExtendedTransitionMatrix,
}

pub fn gaussian(c: usize, d: usize, n: usize, separation: f64, tau: f64, rho: f64, seed: u64) -> Fixture {
    let mixture = MixtureSpec::separated(c, d, 2, separation).unwrap();
    let clean = generate_mixture(&mixture, n, seed).unwrap();
    let reservoir = generate_reservoir(&mixture, reservoir_size(&mixture, n), seed).unwrap();
    let noise = NoiseSpec::class_dependent(tau, rho, seed);
    let data = inject_mixed_noise(&clean, &noise, &reservoir).unwrap();
    let truth = true_extended_matrix(&noise, c).unwrap();
    Fixture {
        mixture,
        noise,
        data,
        truth,
    }
}

/// Symmetric c×c flip matrix with diagonal `diag`.
pub fn symmetric_flip(c: usize, diag: f64) -> Vec<Vec<f64>> {
    (0..c)
        .map(|i| {
            (0..c)
                .map(|j| if i == j { diag } else { (1.0 - diag) / (c as f64 - 1.0) })
                .collect()
        })
        .collect()
}

/// Two copies of the same mixture, shifted apart along the last axis; each
/// copy is a region with its own flip law.
pub struct RegionFixture {
    pub noise: NoiseSpec,
    /// Uncorrupted data, whose features decide where noise is injected.
    pub clean: Dataset,
    pub data: Dataset,
    /// Region of every example, by nearest region centroid.
    pub region: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn two_regions(c: usize, d: usize, n: usize, diags: [f64; 2], shift: f64, tau: f64, rho: f64, seed: u64) -> RegionFixture {
    let base = MixtureSpec::separated(c, d, 2, 6.0).unwrap();
    let mut offsets = [vec![0.0; d], vec![0.0; d]];
    offsets[0][d - 1] = -shift / 2.0;
    offsets[1][d - 1] = shift / 2.0;
    let halves: Vec<MixtureSpec> = offsets.iter().map(|o| base.shifted(o)).collect();
    let a = generate_mixture(&halves[0], n / 2, seed).unwrap();
    let b = generate_mixture(&halves[1], n - n / 2, seed.wrapping_add(1_000)).unwrap();
    let clean = a.concat(&b).unwrap();
    let ra = generate_reservoir(&halves[0], reservoir_size(&halves[0], n / 2), seed).unwrap();
    let rb = generate_reservoir(&halves[1], reservoir_size(&halves[1], n - n / 2), seed.wrapping_add(1_000)).unwrap();
    let reservoir = ndarray::concatenate(ndarray::Axis(0), &[ra.view(), rb.view()]).unwrap();
    let centroid = |o: &Vec<f64>| {
        let mut m = vec![0.0; d];
        m[d - 1] = o[d - 1];
        m
    };
    let noise = NoiseSpec {
        tau,
        rho,
        structure: NoiseStructure::RegionDependent,
        region_matrices: (0..2)
            .map(|r| RegionNoise {
                centroid: centroid(&offsets[r]),
                flip: symmetric_flip(c, diags[r]),
                rho,
            })
            .collect(),
        seed,
        uniform_open_labels: false,
    };
    let data = inject_region_noise(&clean, &noise, Some(&reservoir)).unwrap();
    let region = (0..data.n())
        .map(|i| mixnoise::synthdata::region_of(&noise.region_matrices, data.features.row(i)))
        .collect();
    RegionFixture { noise, clean, data, region }
}
