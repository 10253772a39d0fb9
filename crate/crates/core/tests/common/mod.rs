#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use rap_core::{DiscreteDataset, NoiseSource, Schema, Stream};

/// Rows drawn from a mixture of `classes` latent classes, each with its own
/// per-feature categorical distribution. Gives marginals with real structure.
pub fn latent_class(cardinalities: &[usize], n: usize, classes: usize, seed: u64) -> DiscreteDataset {
    let schema = Schema::from_cardinalities(cardinalities).unwrap();
    let mut rng = NoiseSource::stream(seed, Stream::Data);
    let profiles: Vec<Vec<Vec<f64>>> = (0..classes)
        .map(|_| {
            cardinalities
                .iter()
                .map(|&t| {
                    // cube of a uniform skews the class profile
                    let w: Vec<f64> = (0..t).map(|_| rng.gen::<f64>().powi(3) + 0.02).collect();
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / s).collect()
                })
                .collect()
        })
        .collect();
    let rows = (0..n)
        .map(|_| {
            let c = rng.gen_range(0..classes);
            profiles[c]
                .iter()
                .map(|p| {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    for (j, &pj) in p.iter().enumerate() {
                        acc += pj;
                        if u < acc {
                            return j as u32;
                        }
                    }
                    (p.len() - 1) as u32
                })
                .collect()
        })
        .collect();
    DiscreteDataset::new(schema, rows).unwrap()
}

/// Uniformly random rows over the given cardinalities.
pub fn uniform(cardinalities: &[usize], n: usize, rng: &mut impl Rng) -> DiscreteDataset {
    let schema = Schema::from_cardinalities(cardinalities).unwrap();
    let rows = (0..n)
        .map(|_| cardinalities.iter().map(|&t| rng.gen_range(0..t as u32)).collect())
        .collect();
    DiscreteDataset::new(schema, rows).unwrap()
}

/// The 200-row, 4 × 3 instance shared by the recovery and rounding checks.
pub fn small_instance() -> DiscreteDataset {
    latent_class(&[3, 3, 3, 3], 200, 3, 11)
}

/// The 5000-row, 5 × 4 instance shared by the trend checks.
pub fn trend_instance() -> DiscreteDataset {
    latent_class(&[4, 4, 4, 4, 4], 5000, 4, 7)
}

pub fn write_csv(data: &DiscreteDataset, path: &Path) {
    data.write_csv(path).unwrap();
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
