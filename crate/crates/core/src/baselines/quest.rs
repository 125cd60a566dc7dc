use crate::kvcache::{Admission, CacheError, CachePolicy, PagedKVCache};

/// Elementwise bounds of the keys stored in one page.
#[derive(Clone, Debug, PartialEq)]
pub struct PageMeta {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    count: usize,
}

impl PageMeta {
    pub fn new(dim: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
            count: 0,
        }
    }

    pub fn from_keys<'a>(dim: usize, keys: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut m = Self::new(dim);
        for k in keys {
            m.update(k);
        }
        m
    }

    pub fn update(&mut self, key: &[f64]) {
        for ((lo, hi), &x) in self.min.iter_mut().zip(self.max.iter_mut()).zip(key) {
            *lo = lo.min(x);
            *hi = hi.max(x);
        }
        self.count += 1;
    }

    /// Upper bound on `q · k` over every key of the page.
    pub fn score(&self, q: &[f64]) -> f64 {
        q.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&x, (&lo, &hi))| (x * lo).max(x * hi))
            .sum()
    }
}

/// Top-`k` pages by bound, ties to the lower page id, returned in id order.
pub fn quest_select(query: &[f64], metas: &[PageMeta], top_k: usize) -> Vec<usize> {
    if top_k >= metas.len() {
        return (0..metas.len()).collect();
    }
    let mut scored: Vec<(usize, f64)> = metas.iter().map(|m| m.score(query)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ids: Vec<usize> = scored[..top_k].iter().map(|&(i, _)| i).collect();
    ids.sort_unstable();
    ids
}

/// Retrieval block size: `max(16, 2 * CR)`.
pub fn quest_block_size(cr: f64) -> usize {
    ((2.0 * cr).ceil() as usize).max(16)
}

/// Query-aware page retrieval over a cache that never evicts. Prompt
/// tokens attend densely; decode steps read the top pages per query head.
#[derive(Clone, Debug)]
pub struct Quest {
    top_k: usize,
    metas: Vec<Vec<Vec<PageMeta>>>,
}

impl Quest {
    pub fn new(budget: usize, page_size: usize) -> Self {
        Self {
            top_k: budget.div_ceil(page_size.max(1)).max(1),
            metas: Vec::new(),
        }
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    fn refresh(&mut self, cache: &PagedKVCache, layer: usize, head: usize) {
        if self.metas.len() < cache.n_layers() {
            self.metas = vec![vec![Vec::new(); cache.n_heads()]; cache.n_layers()];
        }
        let metas = &mut self.metas[layer][head];
        let dim = cache.head_dim();
        for p in 0..cache.pages(layer, head) {
            if metas.len() <= p {
                metas.push(PageMeta::new(dim));
            }
            let n = cache.page_entries(layer, head, p).count();
            if metas[p].count != n {
                metas[p] = PageMeta::from_keys(dim, cache.page_entries(layer, head, p).map(|e| e.key.as_slice()));
            }
        }
    }
}

impl CachePolicy for Quest {
    fn name(&self) -> &'static str {
        "quest"
    }

    fn admit(&mut self, _: &mut PagedKVCache, _: usize, _: usize, _: usize, _: bool) -> Result<Admission, CacheError> {
        Ok(Admission::Append { deadline: None })
    }

    fn select_pages(
        &mut self,
        cache: &PagedKVCache,
        layer: usize,
        kv_head: usize,
        query: &[f64],
        prefill: bool,
    ) -> Option<Vec<usize>> {
        if prefill {
            return None;
        }
        self.refresh(cache, layer, kv_head);
        Some(quest_select(query, &self.metas[layer][kv_head], self.top_k))
    }

    /// Min and max vectors take the room of one key/value pair per page.
    fn overhead(&self, cache: &PagedKVCache) -> u64 {
        cache.page_accounting_total().pages as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_example() {
        let m = PageMeta {
            min: vec![-1.0, 0.0],
            max: vec![2.0, 3.0],
            count: 2,
        };
        assert_eq!(m.score(&[1.0, -2.0]), 2.0);
    }

    #[test]
    fn selection() {
        let one = [PageMeta::from_keys(1, [[1.0].as_slice()])];
        assert_eq!(quest_select(&[-3.0], &one, 1), vec![0]);
        let metas: Vec<PageMeta> = [0.5, 2.0, 1.0, 2.0]
            .iter()
            .map(|&x| PageMeta::from_keys(1, [[x].as_slice()]))
            .collect();
        assert_eq!(quest_select(&[1.0], &metas, 2), vec![1, 3]);
        assert_eq!(quest_select(&[1.0], &metas, 9), vec![0, 1, 2, 3]);
        assert_eq!(quest_block_size(4.0), 16);
        assert_eq!(quest_block_size(12.0), 24);
    }
}
