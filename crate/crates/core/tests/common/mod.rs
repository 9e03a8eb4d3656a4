#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write;

pub const TRIAL_TIMES: [f64; 7] = [0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0];

/// Depression-score-like trial data on weeks 0,1,2,3,4,6,8 with some dropout,
/// in the ingest CSV format.
pub fn trial_csv(n_per_group: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intercept = Normal::new(0.0, 3.0).unwrap();
    let slope = Normal::new(0.0, 0.25).unwrap();
    let noise = Normal::new(0.0, 2.0).unwrap();
    let mut out = String::from("subject_id,group,time,value\n");
    for (g, name, b1, b2) in [(0, "drug", -1.6, 0.1), (1, "placebo", -1.0, 0.06)] {
        for i in 0..n_per_group {
            let (a, s) = (intercept.sample(&mut rng), slope.sample(&mut rng));
            let last = if rng.random::<f64>() < 0.2 { rng.random_range(2..TRIAL_TIMES.len()) } else { TRIAL_TIMES.len() };
            for &t in &TRIAL_TIMES[..last] {
                let y = 18.0 + a + (b1 + s) * t + b2 * t * t + noise.sample(&mut rng);
                writeln!(out, "{name}-{g}{i:03},{name},{t},{y:.2}").unwrap();
            }
        }
    }
    out
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Two-sided one-sample Kolmogorov–Smirnov distance to U(0, 1).
pub fn ks_uniform(ps: &mut [f64]) -> f64 {
    ps.sort_by(f64::total_cmp);
    let n = ps.len() as f64;
    ps.iter()
        .enumerate()
        .map(|(i, &p)| ((i + 1) as f64 / n - p).max(p - i as f64 / n))
        .fold(0.0, f64::max)
}
