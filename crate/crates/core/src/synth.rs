//! Seeded two-modality classification tasks with controllable per-modality
//! information density, and the Gaussian replacement used for robustness
//! checks.
//!
//! The PRNG is ChaCha8 (`rand_chacha` 0.3) with `rand_distr` 0.4's standard
//! normal sampler; both are pinned so generated datasets stay byte-stable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MoirError, Result};
use crate::tokens::{Modality, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub len_a: usize,
    pub len_b: usize,
    pub dims: usize,
    pub informative_dims_a: usize,
    pub informative_dims_b: usize,
    pub snr_a: f64,
    pub snr_b: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Share of instances whose label can only be read from modality A.
    pub dependent_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            len_a: 12,
            len_b: 6,
            dims: 32,
            informative_dims_a: 8,
            informative_dims_b: 8,
            snr_a: 2.0,
            snr_b: 0.5,
            n_train: 800,
            n_test: 200,
            dependent_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(MoirError::config("need at least two classes"));
        }
        if self.len_a == 0 || self.len_b == 0 || self.dims == 0 {
            return Err(MoirError::config("token lengths and width must be positive"));
        }
        if self.informative_dims_a > self.dims || self.informative_dims_b > self.dims {
            return Err(MoirError::config(format!(
                "informative dims ({}, {}) exceed D = {}",
                self.informative_dims_a, self.informative_dims_b, self.dims
            )));
        }
        for (name, snr) in [("snr_a", self.snr_a), ("snr_b", self.snr_b)] {
            if !(snr.is_finite() && snr >= 0.0) {
                return Err(MoirError::config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.dependent_fraction) {
            return Err(MoirError::config("dependent_fraction must lie in [0, 1]"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(MoirError::config("train and test sets must be nonempty"));
        }
        Ok(())
    }
}

/// One paired example.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tokens_a: TokenSequence,
    pub tokens_b: TokenSequence,
    pub question: Vec<f64>,
    pub label: usize,
    pub dependent_on_a: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    /// Channels carrying class signal in A, ascending.
    pub informative_a: Vec<usize>,
    pub informative_b: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn choose_channels(rng: &mut ChaCha8Rng, dims: usize, count: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..dims).collect();
    let (picked, _) = all.partial_shuffle(rng, count);
    let mut picked = picked.to_vec();
    picked.sort_unstable();
    picked
}

/// Draw order: informative channel sets (A then B), class means (A then B),
/// the class-free mean for B, per-class questions, then the train and test
/// instances.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let informative_a = choose_channels(&mut rng, spec.dims, spec.informative_dims_a);
    let informative_b = choose_channels(&mut rng, spec.dims, spec.informative_dims_b);
    let means_a: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(&mut rng, spec.informative_dims_a))
        .collect();
    let means_b: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(&mut rng, spec.informative_dims_b))
        .collect();
    let shared_b = normal_vec(&mut rng, spec.informative_dims_b);
    let questions: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(&mut rng, spec.dims))
        .collect();

    let mut split = |n: usize| -> Vec<Instance> {
        let n_dep = (spec.dependent_fraction * n as f64).round() as usize;
        // Labels cycle through the classes so both the whole split and its
        // dependent part are class-balanced.
        let mut slots: Vec<(usize, bool)> = (0..n).map(|i| (i % spec.classes, i < n_dep)).collect();
        slots.shuffle(&mut rng);
        slots
            .into_iter()
            .map(|(label, dependent_on_a)| {
                let tokens_a = draw_tokens(
                    &mut rng,
                    spec.len_a,
                    spec.dims,
                    &informative_a,
                    spec.snr_a,
                    &means_a[label],
                    Modality::A,
                );
                let mean_b = if dependent_on_a { &shared_b } else { &means_b[label] };
                let tokens_b = draw_tokens(
                    &mut rng,
                    spec.len_b,
                    spec.dims,
                    &informative_b,
                    spec.snr_b,
                    mean_b,
                    Modality::B,
                );
                Instance {
                    tokens_a,
                    tokens_b,
                    question: questions[label].clone(),
                    label,
                    dependent_on_a,
                }
            })
            .collect()
    };
    let train = split(spec.n_train);
    let test = split(spec.n_test);
    Ok(SyntheticData {
        train,
        test,
        informative_a,
        informative_b,
    })
}

fn draw_tokens(
    rng: &mut ChaCha8Rng,
    len: usize,
    dims: usize,
    informative: &[usize],
    snr: f64,
    mean: &[f64],
    modality: Modality,
) -> TokenSequence {
    let mut values = normal_vec(rng, len * dims);
    for l in 0..len {
        for (&d, m) in informative.iter().zip(mean) {
            values[l * dims + d] += snr * m;
        }
    }
    TokenSequence::new(1, len, dims, values, modality).expect("finite draws")
}

/// Replaces every value with a fresh unit-normal draw, keeping the shape.
pub fn degrade(f: &TokenSequence, seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, l, d) = f.shape();
    TokenSequence::new(b, l, d, normal_vec(&mut rng, b * l * d), f.modality()).expect("finite draws")
}
