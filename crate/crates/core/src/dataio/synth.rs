//! Synthetic interaction logs with planted structure.
//!
//! Users and items carry latent factors; a user's chance of interacting
//! with an item grows with their latent affinity, labels follow the
//! affinity sign with flip noise, and attributes are quantized latent
//! coordinates. Both collaborative and attribute signals therefore
//! genuinely predict labels, which is what the directional experiments
//! need.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, FieldDef, InteractionLog, Record};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub old_items: usize,
    pub new_items: usize,
    pub latent_dim: usize,
    /// interaction counts per old item (heavy head), inclusive
    pub old_count_min: usize,
    pub old_count_max: usize,
    /// interaction counts per new item (light tail), inclusive
    pub new_count_min: usize,
    pub new_count_max: usize,
    pub user_attr_fields: usize,
    pub item_attr_fields: usize,
    /// quantization levels per attribute field
    pub attr_buckets: usize,
    /// number of latent prototypes entities cluster around; 0 draws every
    /// latent independently. Clustered latents give items well-defined
    /// neighborhoods, the regime where co-occurrence similarity is
    /// informative.
    pub communities: usize,
    /// jitter radius around a prototype, relative to the unit latent box
    pub community_jitter: f64,
    /// weight of latent affinity when choosing which users see an item;
    /// 0 means uniformly random exposure
    pub affinity_sharpness: f64,
    /// fraction of each item's audience drawn uniformly instead of by
    /// affinity. Pure affinity exposure truncates the within-item feature
    /// distribution so hard that labels become unrankable; the uniform
    /// share keeps ranking signal while the biased share plants
    /// co-occurrence structure.
    pub explore: f64,
    /// label flip probability between 0 and 1
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            old_items: 300,
            new_items: 100,
            latent_dim: 4,
            old_count_min: 110,
            old_count_max: 180,
            new_count_min: 80,
            new_count_max: 100,
            user_attr_fields: 2,
            item_attr_fields: 2,
            attr_buckets: 8,
            communities: 0,
            community_jitter: 0.3,
            affinity_sharpness: 4.0,
            explore: 0.5,
            noise: 0.1,
        }
    }
}

fn jitter_around(proto: &[f64], jitter: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    proto
        .iter()
        .map(|&c| (c + jitter * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0))
        .collect()
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::InvalidSynth(msg.into()));
        if self.users == 0 || self.old_items + self.new_items == 0 {
            return bad("need at least one user and one item");
        }
        if self.latent_dim == 0 || self.attr_buckets == 0 {
            return bad("latent_dim and attr_buckets must be positive");
        }
        if self.old_count_min > self.old_count_max || self.new_count_min > self.new_count_max {
            return bad("count ranges must be non-empty");
        }
        if (self.old_items > 0 && self.old_count_max > self.users)
            || (self.new_items > 0 && self.new_count_max > self.users)
        {
            return bad("per-item interaction count cannot exceed the user count");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.explore) {
            return bad("explore must lie in [0,1]");
        }
        Ok(())
    }
}

/// Planted ground truth aligned with the generated records.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// latent affinity (user·item dot product) per record
    pub affinities: Vec<f64>,
    /// label before flip noise, the pure sign rule
    pub clean_labels: Vec<u8>,
}

fn bucket(x: f64, buckets: usize) -> u32 {
    // x in (-1, 1) mapped to 0..buckets
    let t = ((x + 1.0) / 2.0 * buckets as f64).floor() as i64;
    t.clamp(0, buckets as i64 - 1) as u32
}

pub fn synthesize(config: &SynthConfig, seed: u64) -> Result<InteractionLog, DataError> {
    synthesize_with_truth(config, seed).map(|(log, _)| log)
}

pub fn synthesize_with_truth(config: &SynthConfig, seed: u64) -> Result<(InteractionLog, SynthTruth), DataError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let k = config.latent_dim;
    let num_items = config.old_items + config.new_items;

    let latent = |rng: &mut ChaCha12Rng| -> Vec<f64> { (0..k).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let prototypes: Vec<Vec<f64>> = (0..config.communities).map(|_| latent(&mut rng)).collect();
    let draw = |rng: &mut ChaCha12Rng| -> Vec<f64> {
        if prototypes.is_empty() {
            latent(rng)
        } else {
            let c = rng.random_range(0..prototypes.len());
            jitter_around(&prototypes[c], config.community_jitter, rng)
        }
    };
    let user_latents: Vec<Vec<f64>> = (0..config.users).map(|_| draw(&mut rng)).collect();
    let item_latents: Vec<Vec<f64>> = (0..num_items).map(|_| draw(&mut rng)).collect();

    let quantize = |latents: &[Vec<f64>], fields: usize| -> Vec<Vec<Vec<u32>>> {
        latents
            .iter()
            .map(|v| (0..fields).map(|f| vec![bucket(v[f % k], config.attr_buckets)]).collect())
            .collect()
    };
    let user_attrs = quantize(&user_latents, config.user_attr_fields);
    let item_attrs = quantize(&item_latents, config.item_attr_fields);

    let mut records = Vec::new();
    let mut affinities = Vec::new();
    let mut clean_labels = Vec::new();
    for (item, item_latent) in item_latents.iter().enumerate() {
        let is_old = item < config.old_items;
        let (lo, hi) = if is_old {
            (config.old_count_min, config.old_count_max)
        } else {
            (config.new_count_min, config.new_count_max)
        };
        let count = rng.random_range(lo..=hi);

        // Gumbel top-k: users with high latent affinity are more likely to
        // be exposed to the item, which plants co-occurrence structure.
        let mut scored: Vec<(f64, u32)> = (0..config.users as u32)
            .map(|u| {
                let dot: f64 = user_latents[u as usize]
                    .iter()
                    .zip(item_latent)
                    .map(|(a, b)| a * b)
                    .sum();
                let unif: f64 = rng.random_range(1e-12..1.0);
                let gumbel = -(-unif.ln()).ln();
                (config.affinity_sharpness * dot + gumbel, u)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

        // the exploration share of the audience is drawn uniformly from the
        // users the biased pass did not pick
        let explore_n = ((count as f64) * config.explore).round() as usize;
        let biased_n = count - explore_n;
        let mut audience: Vec<u32> = scored.iter().take(biased_n).map(|&(_, u)| u).collect();
        let mut rest: Vec<u32> = scored.iter().skip(biased_n).map(|&(_, u)| u).collect();
        rest.shuffle(&mut rng);
        audience.extend(rest.into_iter().take(explore_n));

        for &user in &audience {
            let affinity: f64 = user_latents[user as usize]
                .iter()
                .zip(item_latent)
                .map(|(a, b)| a * b)
                .sum();
            let clean = u8::from(affinity > 0.0);
            let flip = rng.random_range(0.0..1.0) < config.noise;
            let label = if flip { 1 - clean } else { clean };
            records.push(Record {
                user,
                item: item as u32,
                label,
                ts: 0,
            });
            affinities.push(affinity);
            clean_labels.push(clean);
        }
    }

    // Unique timestamps in random order so per-item fold boundaries are not
    // tied to generation order.
    let mut stamps: Vec<i64> = (0..records.len() as i64).collect();
    stamps.shuffle(&mut rng);
    for (r, ts) in records.iter_mut().zip(stamps) {
        r.ts = ts;
    }

    let log = InteractionLog {
        num_users: config.users,
        num_items,
        user_fields: (0..config.user_attr_fields)
            .map(|f| FieldDef { name: format!("user_f{f}"), vocab: config.attr_buckets })
            .collect(),
        item_fields: (0..config.item_attr_fields)
            .map(|f| FieldDef { name: format!("item_f{f}"), vocab: config.attr_buckets })
            .collect(),
        user_attrs,
        item_attrs,
        records,
        user_keys: (0..config.users).map(|u| format!("u{u}")).collect(),
        item_keys: (0..num_items).map(|i| format!("i{i}")).collect(),
    };
    log.validate()?;
    Ok((log, SynthTruth { affinities, clean_labels }))
}
