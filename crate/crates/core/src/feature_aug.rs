//! Class-dependent feature augmentation: labeled EMA features are blended
//! with random unlabeled EMA features from the same batch, more often for
//! rarer classes, and keep their label.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{ClafError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaConfig {
    /// Beta(α, α) shape.
    pub alpha: f64,
    /// Floor μ on the mixing coefficient.
    pub mu: f64,
    /// FA runs for iterations `≥ start_fraction · total`.
    pub start_fraction: f64,
}

impl Default for FaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            mu: 0.8,
            start_fraction: 0.8,
        }
    }
}

impl FaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ClafError::Config(format!("fa.alpha must be positive, got {}", self.alpha)));
        }
        if !(0.5..=1.0).contains(&self.mu) {
            return Err(ClafError::Config(format!("fa.mu must lie in [0.5, 1], got {}", self.mu)));
        }
        if !(0.0..=1.0).contains(&self.start_fraction) {
            return Err(ClafError::Config(format!(
                "fa.start_fraction must lie in [0, 1], got {}",
                self.start_fraction
            )));
        }
        Ok(())
    }
}

/// `P_k = (N_1 − N_k) / N_1` with `N_1` the largest count.
pub fn fa_probability(counts: &[usize]) -> Vec<f64> {
    let head = counts.iter().copied().max().unwrap_or(0);
    if head == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&n| (head - n) as f64 / head as f64).collect()
}

/// `max(λ, 1 − λ, μ)`.
pub fn clamp_lambda(raw: f64, mu: f64) -> f64 {
    raw.max(1.0 - raw).max(mu)
}

pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, mu: f64, rng: &mut R) -> f64 {
    let beta = Beta::new(alpha, alpha).expect("alpha validated positive");
    clamp_lambda(beta.sample(rng), mu)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedFeature {
    pub z_aug: Vec<f32>,
    pub label: usize,
    pub lam: f64,
    /// Row of the labeled parent in the batch.
    pub source: usize,
    /// Row of the unlabeled partner in the batch.
    pub partner: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaOutcome {
    pub features: Vec<AugmentedFeature>,
    /// Set when the unlabeled batch was empty and FA did nothing.
    pub skipped_empty: bool,
}

/// For each labeled row of class k, with probability `P_k` emit one blend
/// `λ z_l + (1 − λ) z_u` with a uniformly chosen unlabeled partner.
///
/// RNG draws per labeled row: one uniform for the gate and, when it fires,
/// one partner index followed by one Beta draw.
pub fn augment_batch<R: Rng + ?Sized>(
    labeled: &Array2<f32>,
    labels: &[usize],
    unlabeled: &Array2<f32>,
    probabilities: &[f64],
    config: &FaConfig,
    rng: &mut R,
) -> FaOutcome {
    if unlabeled.nrows() == 0 {
        return FaOutcome {
            features: Vec::new(),
            skipped_empty: true,
        };
    }
    let mut features = Vec::new();
    for (i, (zl, &label)) in labeled.rows().into_iter().zip(labels).enumerate() {
        let gate: f64 = rng.random();
        if gate >= probabilities[label] {
            continue;
        }
        let partner = rng.random_range(0..unlabeled.nrows());
        let lam = sample_lambda(config.alpha, config.mu, rng);
        let z_aug = zl
            .iter()
            .zip(unlabeled.row(partner).iter())
            .map(|(&a, &b)| (lam * a as f64 + (1.0 - lam) * b as f64) as f32)
            .collect();
        features.push(AugmentedFeature {
            z_aug,
            label,
            lam,
            source: i,
            partner,
        });
    }
    FaOutcome {
        features,
        skipped_empty: false,
    }
}
