use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{DemographicsSpec, IdentityTraitSpace};
use crate::error::Result;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

/// Per-identity defaults, drawn once and carried unchanged by every sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityTraits {
    pub ethnicity: String,
    pub gender: Gender,
    pub eye_color: String,
    pub iris_texture: u32,
    pub eyebrow_style: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub identity_id: u32,
    pub traits: IdentityTraits,
}

/// Splits `n` into integer counts proportional to `proportions` with the
/// largest-remainder method. Ties on the fractional part go to the earlier
/// entry, so the split is deterministic and always sums to `n`.
pub fn largest_remainder_counts(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws `n` identities with exact demographic counts and fixed traits.
///
/// Ethnicity labels are assigned by a seeded shuffle of the count vector, then
/// each identity's traits come from its own sub-seed.
pub fn sample_identity_pool(
    n: usize,
    demographics: &DemographicsSpec,
    traits: &IdentityTraitSpace,
    pool_seed: u64,
) -> Result<Vec<IdentityRecord>> {
    demographics.validate()?;
    let proportions: Vec<f64> = demographics.groups.iter().map(|g| g.proportion).collect();
    let counts = largest_remainder_counts(n, &proportions);

    let mut labels: Vec<&str> = Vec::with_capacity(n);
    for (group, count) in demographics.groups.iter().zip(&counts) {
        labels.extend(std::iter::repeat_n(group.label.as_str(), *count));
    }
    let mut rng = seed::rng(seed::derive(pool_seed, "ethnicity-order"));
    labels.shuffle(&mut rng);

    let trait_seed = seed::derive(pool_seed, "traits");
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, ethnicity)| {
            let mut rng = seed::rng(seed::derive_index(trait_seed, i as u64));
            let gender = if rng.random_bool(traits.male_fraction) {
                Gender::Male
            } else {
                Gender::Female
            };
            let eye_color = traits.eye_colors[rng.random_range(0..traits.eye_colors.len())].clone();
            IdentityRecord {
                identity_id: i as u32,
                traits: IdentityTraits {
                    ethnicity: ethnicity.to_string(),
                    gender,
                    eye_color,
                    iris_texture: rng.random_range(0..traits.iris_textures),
                    eyebrow_style: rng.random_range(0..traits.eyebrow_styles),
                },
            }
        })
        .collect())
}
