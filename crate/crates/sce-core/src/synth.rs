//! Synthetic interaction logs with planted next-item structure.
//!
//! Each item has a designated successor under a random permutation; a user's
//! next interaction follows the successor with probability `follow_prob` and
//! is uniform otherwise. A model that learns the permutation predicts the
//! next item far above the random baseline, which makes these logs useful
//! as trainability fixtures.

use serde::{Deserialize, Serialize};

use crate::data::{Interaction, InteractionLog};
use crate::rng::RngState;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovConfig {
    pub users: usize,
    pub catalog: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of following the planted successor.
    pub follow_prob: f64,
    /// Timestamps are drawn per user from [0, horizon) and then step by 1,
    /// so late-starting users fall into a temporal test region.
    pub horizon: i64,
    /// Popularity skew of start/exploration draws: item at popularity rank
    /// r is weighted 1/r^zipf. Zero means uniform.
    pub zipf: f64,
}

impl Default for MarkovConfig {
    fn default() -> Self {
        MarkovConfig {
            users: 2000,
            catalog: 2000,
            min_len: 5,
            max_len: 10,
            follow_prob: 0.7,
            horizon: 1_000_000,
            zipf: 0.0,
        }
    }
}

/// Sample item ids 1..=C from a Zipf-like weight table via inverse CDF.
struct ItemSampler {
    cumulative: Vec<f64>,
}

impl ItemSampler {
    fn new(catalog: usize, zipf: f64) -> Self {
        let mut cumulative = Vec::with_capacity(catalog);
        let mut total = 0.0;
        for rank in 1..=catalog {
            total += if zipf == 0.0 { 1.0 } else { (rank as f64).powf(-zipf) };
            cumulative.push(total);
        }
        ItemSampler { cumulative }
    }

    fn draw(&self, rng: &mut RngState) -> u64 {
        let total = *self.cumulative.last().unwrap();
        let u = rng.next_f64() * total;
        let idx = self.cumulative.partition_point(|&c| c < u);
        (idx.min(self.cumulative.len() - 1) + 1) as u64
    }
}

/// The planted successor permutation (raw item ids 1..=C).
pub fn planted_successors(catalog: usize, rng: &mut RngState) -> Vec<u64> {
    let mut succ: Vec<u64> = (1..=catalog as u64).collect();
    rng.shuffle(&mut succ);
    succ
}

pub fn markov_log(cfg: &MarkovConfig, rng: &mut RngState) -> InteractionLog {
    assert!(cfg.catalog >= 2 && cfg.min_len >= 2 && cfg.max_len >= cfg.min_len);
    let succ = planted_successors(cfg.catalog, rng);
    let sampler = ItemSampler::new(cfg.catalog, cfg.zipf);
    let mut records = Vec::new();
    for user in 1..=cfg.users as u64 {
        let len = cfg.min_len + rng.next_below((cfg.max_len - cfg.min_len + 1) as u64) as usize;
        let start = rng.next_below(cfg.horizon as u64) as i64;
        let mut item = sampler.draw(rng);
        for i in 0..len {
            records.push(Interaction { user, item, timestamp: start + i as i64 });
            item = if rng.next_f64() < cfg.follow_prob {
                succ[(item - 1) as usize]
            } else {
                sampler.draw(rng)
            };
        }
    }
    InteractionLog { records }
}
