//! Mini-batch construction.
//!
//! Each epoch shuffles every example id into an anchor order, cuts it into
//! groups of `n_hat` anchors, and follows every anchor with `m` companions
//! drawn from the anchor's class. Batches therefore hold `n_hat · (m + 1)` ids
//! laid out as `[a₁, c₁₁ … c₁ₘ, a₂, c₂₁ …]`. With `m = 0` this is plain
//! shuffled batching.

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Anchors per batch.
    pub n_hat: usize,
    /// Same-class companions per anchor.
    pub m: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_hat: 32,
            m: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.n_hat * (self.m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_hat == 0 {
            return Err(Error::config("n_hat must be positive"));
        }
        Ok(())
    }
}

/// Batches for one epoch, deterministic in `(cfg, epoch)`.
///
/// `class_index[c]` lists the example ids of class `c`. The trailing group of
/// fewer than `n_hat` anchors is dropped.
pub fn epoch_batches(class_index: &[Vec<usize>], cfg: &SamplerConfig, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch);
    let mut owner = Vec::new();
    for (class, ids) in class_index.iter().enumerate() {
        for &id in ids {
            if owner.len() <= id {
                owner.resize(id + 1, usize::MAX);
            }
            owner[id] = class;
        }
    }
    let mut anchors: Vec<usize> = class_index.iter().flatten().copied().collect();
    anchors.sort_unstable();
    anchors.shuffle(&mut rng);

    if cfg.n_hat == 0 {
        return Vec::new();
    }
    anchors
        .chunks_exact(cfg.n_hat)
        .map(|group| {
            let mut batch = Vec::with_capacity(cfg.batch_size());
            for &anchor in group {
                batch.push(anchor);
                draw_companions(&class_index[owner[anchor]], anchor, cfg.m, &mut rng, &mut batch);
            }
            batch
        })
        .collect()
}

fn draw_companions(class: &[usize], anchor: usize, m: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
    if m == 0 {
        return;
    }
    let others: Vec<usize> = class.iter().copied().filter(|&id| id != anchor).collect();
    if others.is_empty() {
        // singleton class: the only same-class example is the anchor itself
        out.extend(std::iter::repeat_n(anchor, m));
    } else if others.len() >= m {
        out.extend(index::sample(rng, others.len(), m).into_iter().map(|i| others[i]));
    } else {
        for _ in 0..m {
            out.push(*others.choose(rng).expect("non-empty"));
        }
    }
}
