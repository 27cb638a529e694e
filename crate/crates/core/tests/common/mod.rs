#![allow(dead_code)]

use lsvcmm::{LongitudinalDataset, SubjectRecord};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Intercept plus alternating 0/1 group, every subject seen at every time.
pub fn complete_two_group(n: usize, times: &[f64], seed: u64, noise: f64, effect: impl Fn(f64) -> f64) -> LongitudinalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..n)
        .map(|i| {
            let g = (i % 2) as f64;
            let theta: f64 = StandardNormal.sample(&mut rng);
            let y = times
                .iter()
                .map(|&t| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    1.0 + g * effect(t) + noise * (theta + e)
                })
                .collect();
            let x = DMatrix::from_fn(times.len(), 2, |_, j| if j == 0 { 1.0 } else { g });
            SubjectRecord::new(format!("s{i}"), times.to_vec(), y, x).unwrap()
        })
        .collect();
    LongitudinalDataset::new(subjects, vec!["intercept".into(), "group".into()]).unwrap()
}

/// Random sparse design with `p` covariates and random observation subsets.
pub fn random_instance(n: usize, times: &[f64], p: usize, seed: u64) -> LongitudinalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..n)
        .map(|i| {
            let mut ts: Vec<f64> = times.iter().copied().filter(|_| rng.random::<f64>() < 0.7).collect();
            if ts.is_empty() {
                ts.push(times[rng.random_range(0..times.len())]);
            }
            let y = (0..ts.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = DMatrix::from_fn(ts.len(), p, |_, _| StandardNormal.sample(&mut rng));
            SubjectRecord::new(format!("r{i}"), ts, y, x).unwrap()
        })
        .collect();
    LongitudinalDataset::new(subjects, (0..p).map(|j| format!("x{j}")).collect()).unwrap()
}
