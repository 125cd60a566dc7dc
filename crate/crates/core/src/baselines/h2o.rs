use std::collections::BTreeMap;

use crate::attention::AttentionConfig;
use crate::kvcache::{Admission, CacheError, CachePolicy, HeadWeights, PagedKVCache};

use super::tova::{head_sum, tova_choose};
use super::PolicyBudget;

/// Lowest cumulative score outside the `recent` newest positions, or
/// `None` when every position is protected.
pub fn h2o_choose(cumulative: &[(usize, f64)], recent: usize) -> Option<usize> {
    let mut by_pos: Vec<(usize, f64)> = cumulative.to_vec();
    by_pos.sort_by_key(|&(p, _)| p);
    let keep = by_pos.len().saturating_sub(recent);
    tova_choose(&by_pos[..keep])
}

/// Heavy-hitter cache: a recent window plus the positions with the
/// largest running sum of attention weight.
#[derive(Clone, Debug)]
pub struct H2o {
    budget: PolicyBudget,
    cumulative: Vec<BTreeMap<usize, f64>>,
}

impl H2o {
    pub fn new(budget: PolicyBudget) -> Self {
        Self {
            budget,
            cumulative: Vec::new(),
        }
    }

    /// Running scores of one layer, by position.
    pub fn scores(&self, layer: usize) -> Vec<(usize, f64)> {
        self.cumulative
            .get(layer)
            .map(|m| m.iter().map(|(&p, &s)| (p, s)).collect())
            .unwrap_or_default()
    }
}

impl CachePolicy for H2o {
    fn name(&self) -> &'static str {
        "h2o"
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
        if self.cumulative.len() <= layer {
            self.cumulative.resize(layer + 1, BTreeMap::new());
        }
        let cum = &mut self.cumulative[layer];
        for (pos, w) in head_sum(weights) {
            *cum.entry(pos).or_insert(0.0) += w;
        }
        if cache.live(layer, 0) <= self.budget.kv_budget {
            return Ok(());
        }
        let scores: Vec<(usize, f64)> = cum.iter().map(|(&p, &s)| (p, s)).collect();
        let (recent, _) = self.budget.split();
        if let Some(pos) = h2o_choose(&scores, recent) {
            cum.remove(&pos);
            for g in 0..cfg.n_kv_heads {
                cache.remove(layer, g, pos)?;
            }
        }
        Ok(())
    }
}
