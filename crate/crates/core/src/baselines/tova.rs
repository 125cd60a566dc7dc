use std::collections::BTreeMap;

use crate::attention::AttentionConfig;
use crate::kvcache::{Admission, CacheError, CachePolicy, HeadWeights, PagedKVCache};

/// Index of the smallest score; ties go to the earliest entry.
pub fn tova_choose(scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(pos, s) in scores {
        match best {
            Some((bp, bs)) if s > bs || (s == bs && pos > bp) => {}
            _ => best = Some((pos, s)),
        }
    }
    best.map(|(p, _)| p)
}

/// Head-summed current-step weight per position, summed in query-head order.
pub(crate) fn head_sum(weights: &[HeadWeights]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for head in weights {
        for &(pos, w) in head {
            *acc.entry(pos).or_insert(0.0) += w;
        }
    }
    acc.into_iter().collect()
}

/// Keeps at most `budget` entries per head, evicting the position with the
/// lowest attention weight summed over every query head of the layer.
#[derive(Clone, Debug)]
pub struct Tova {
    budget: usize,
}

impl Tova {
    pub fn new(budget: usize) -> Self {
        Self { budget: budget.max(1) }
    }
}

impl CachePolicy for Tova {
    fn name(&self) -> &'static str {
        "tova"
    }

    fn admit(&mut self, _: &mut PagedKVCache, _: usize, _: usize, _: usize, _: bool) -> Result<Admission, CacheError> {
        Ok(Admission::Append { deadline: None })
    }

    fn wants_weights(&self) -> bool {
        true
    }

    fn observe(
        &mut self,
        cache: &mut PagedKVCache,
        cfg: &AttentionConfig,
        layer: usize,
        _t: usize,
        weights: &[HeadWeights],
    ) -> Result<(), CacheError> {
        if cache.live(layer, 0) <= self.budget {
            return Ok(());
        }
        if let Some(pos) = tova_choose(&head_sum(weights)) {
            for g in 0..cfg.n_kv_heads {
                cache.remove(layer, g, pos)?;
            }
        }
        Ok(())
    }
}
