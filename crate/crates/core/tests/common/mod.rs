#![allow(dead_code)]

use aftkm::data::{Dataset, LabeledMatrix, SurvivalRecord};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

/// Shape of a random test dataset.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub n: usize,
    pub q: usize,
    pub p: usize,
    pub truncation: bool,
    pub censoring: bool,
}

impl Shape {
    pub fn new(n: usize, q: usize, p: usize) -> Self {
        Self { n, q, p, truncation: true, censoring: true }
    }
}

/// Dataset with exponential times, optional `U(0,1)` entry, two causes plus
/// censoring, normal covariates and genotypes in {0, 1, 2}. At least one
/// cause-1 failure is guaranteed.
pub fn random_dataset(seed: u64, shape: Shape) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(1.0).unwrap();
    let mut records = Vec::with_capacity(shape.n);
    for i in 0..shape.n {
        let entry = if shape.truncation && rng.random_bool(0.7) { rng.random::<f64>() } else { 0.0 };
        let time = entry + exp.sample(&mut rng) + 1e-3;
        let status = if i == 0 {
            1
        } else if shape.censoring {
            rng.random_range(0..3)
        } else {
            rng.random_range(1..3)
        };
        records.push(SurvivalRecord::new(format!("i{i}"), entry, time, status).unwrap());
    }
    let z = DMatrix::from_fn(shape.n, shape.q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let g = DMatrix::from_fn(shape.n, shape.p, |_, _| rng.random_range(0..3) as f64);
    Dataset::assemble(
        records,
        LabeledMatrix::unnamed("Z", z),
        LabeledMatrix::unnamed("G", g),
        None,
        1,
    )
    .unwrap()
}

/// Same dataset with every log-time (entry and exit) shifted by `c`.
pub fn shift_log_times(data: &Dataset<f64>, c: f64) -> Dataset<f64> {
    let factor = c.exp();
    let records = data
        .survival()
        .iter()
        .map(|r| SurvivalRecord::new(r.id.clone(), r.entry * factor, r.time * factor, r.status).unwrap())
        .collect();
    Dataset::assemble(records, data.covariates().clone(), data.markers().clone(), None, data.cause()).unwrap()
}
