//! Per-head paged storage of key/value entries.

use serde::{Deserialize, Serialize};

use super::CacheError;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub position: usize,
    /// First step at which the entry is no longer visible.
    pub deadline: Option<usize>,
    /// Number of tokens merged into this entry (1 unless accumulated).
    pub merged: usize,
}

#[derive(Clone, Debug, Default)]
struct Page {
    slots: Vec<Option<Entry>>,
    live: usize,
}

/// Identifies a slot inside one head's page list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId {
    pub page: usize,
    pub slot: usize,
}

#[derive(Clone, Debug, Default)]
struct HeadStore {
    pages: Vec<Page>,
    appended: usize,
    evicted: usize,
    last_position: Option<usize>,
    newest: Option<SlotId>,
}

impl HeadStore {
    fn live(&self) -> usize {
        self.appended - self.evicted
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageAccounting {
    pub pages: usize,
    pub slack: usize,
}

/// Paged KV cache with one independent page list per `(layer, kv_head)`.
#[derive(Clone, Debug)]
pub struct PagedKVCache {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    page_size: usize,
    heads: Vec<HeadStore>,
}

pub const DEFAULT_PAGE_SIZE: usize = 16;

impl PagedKVCache {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, page_size: usize) -> Result<Self, CacheError> {
        if n_layers == 0 || n_heads == 0 || head_dim == 0 || page_size == 0 {
            return Err(CacheError::Config(format!(
                "cache dims must be positive (layers {n_layers}, heads {n_heads}, head_dim {head_dim}, page_size {page_size})"
            )));
        }
        Ok(Self {
            n_layers,
            n_heads,
            head_dim,
            page_size,
            heads: vec![HeadStore::default(); n_layers * n_heads],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    /// Number of `(layer, head)` stores.
    pub fn n_stores(&self) -> usize {
        self.heads.len()
    }

    fn idx(&self, layer: usize, head: usize) -> Result<usize, CacheError> {
        if layer >= self.n_layers || head >= self.n_heads {
            return Err(CacheError::NoSuchHead { layer, head });
        }
        Ok(layer * self.n_heads + head)
    }

    fn store(&self, layer: usize, head: usize) -> &HeadStore {
        &self.heads[self.idx(layer, head).expect("head index")]
    }

    /// Stores a new entry in the first free slot (lowest page first),
    /// allocating a page only when every existing page is full.
    pub fn append(
        &mut self,
        layer: usize,
        head: usize,
        key: Vec<f64>,
        value: Vec<f64>,
        position: usize,
        deadline: Option<usize>,
    ) -> Result<SlotId, CacheError> {
        let i = self.idx(layer, head)?;
        if key.len() != self.head_dim || value.len() != self.head_dim {
            return Err(CacheError::Dim {
                expected: self.head_dim,
                key: key.len(),
                value: value.len(),
            });
        }
        let ps = self.page_size;
        let h = &mut self.heads[i];
        if h.last_position.is_some_and(|p| position <= p) {
            return Err(CacheError::PositionOrder {
                position,
                last: h.last_position.unwrap_or(0),
            });
        }
        let entry = Entry {
            key,
            value,
            position,
            deadline,
            merged: 1,
        };
        let page = match h.pages.iter().position(|p| p.live < ps) {
            Some(p) => p,
            None => {
                h.pages.push(Page {
                    slots: vec![None; ps],
                    live: 0,
                });
                h.pages.len() - 1
            }
        };
        let pg = &mut h.pages[page];
        let slot = pg.slots.iter().position(Option::is_none).expect("page has a free slot");
        pg.slots[slot] = Some(entry);
        pg.live += 1;
        h.appended += 1;
        h.last_position = Some(position);
        let id = SlotId { page, slot };
        h.newest = Some(id);
        Ok(id)
    }

    fn remove_at(h: &mut HeadStore, id: SlotId) -> Entry {
        let pg = &mut h.pages[id.page];
        let e = pg.slots[id.slot].take().expect("occupied slot");
        pg.live -= 1;
        h.evicted += 1;
        if h.newest == Some(id) {
            h.newest = None;
        }
        e
    }

    /// Drops pages that hold no live entry. Slot ids of later pages shift.
    fn release_empty(h: &mut HeadStore) {
        if h.pages.iter().all(|p| p.live > 0) {
            return;
        }
        let newest_pos = h.newest.and_then(|id| h.pages[id.page].slots[id.slot].as_ref().map(|e| e.position));
        h.pages.retain(|p| p.live > 0);
        h.newest = newest_pos.and_then(|pos| find(h, pos));
    }

    /// Removes every entry whose deadline is `<= t`, returning how many.
    pub fn evict_due(&mut self, layer: usize, head: usize, t: usize) -> Result<usize, CacheError> {
        let i = self.idx(layer, head)?;
        let h = &mut self.heads[i];
        let due: Vec<SlotId> = slots(h)
            .filter(|(_, e)| e.deadline.is_some_and(|d| d <= t))
            .map(|(id, _)| id)
            .collect();
        for &id in &due {
            Self::remove_at(h, id);
        }
        Self::release_empty(h);
        Ok(due.len())
    }

    /// Removes the entry at `position`; returns it if it was live.
    pub fn remove(&mut self, layer: usize, head: usize, position: usize) -> Result<Option<Entry>, CacheError> {
        let i = self.idx(layer, head)?;
        let h = &mut self.heads[i];
        let Some(id) = find(h, position) else {
            return Ok(None);
        };
        let e = Self::remove_at(h, id);
        Self::release_empty(h);
        Ok(Some(e))
    }

    /// Folds `(key, value)` into the most recently appended entry as a
    /// uniform running mean over its constituents.
    pub fn accumulate(&mut self, layer: usize, head: usize, key: &[f64], value: &[f64]) -> Result<(), CacheError> {
        let i = self.idx(layer, head)?;
        let h = &mut self.heads[i];
        let id = h.newest.ok_or(CacheError::EmptyHead { layer, head })?;
        let e = h.pages[id.page].slots[id.slot].as_mut().expect("newest slot occupied");
        let n = e.merged as f64;
        for (a, b) in e.key.iter_mut().zip(key) {
            *a = (*a * n + b) / (n + 1.0);
        }
        for (a, b) in e.value.iter_mut().zip(value) {
            *a = (*a * n + b) / (n + 1.0);
        }
        e.merged += 1;
        Ok(())
    }

    /// Live entries in storage order (page, then slot).
    pub fn entries(&self, layer: usize, head: usize) -> impl Iterator<Item = &Entry> + '_ {
        slots(self.store(layer, head)).map(|(_, e)| e)
    }

    pub fn entries_with_ids(&self, layer: usize, head: usize) -> impl Iterator<Item = (SlotId, &Entry)> + '_ {
        slots(self.store(layer, head))
    }

    /// Live entries of one page in slot order.
    pub fn page_entries(&self, layer: usize, head: usize, page: usize) -> impl Iterator<Item = &Entry> + '_ {
        self.store(layer, head).pages[page].slots.iter().flatten()
    }

    pub fn positions(&self, layer: usize, head: usize) -> Vec<usize> {
        let mut p: Vec<usize> = self.entries(layer, head).map(|e| e.position).collect();
        p.sort_unstable();
        p
    }

    pub fn contains(&self, layer: usize, head: usize, position: usize) -> bool {
        find(self.store(layer, head), position).is_some()
    }

    pub fn live(&self, layer: usize, head: usize) -> usize {
        self.store(layer, head).live()
    }

    pub fn appended(&self, layer: usize, head: usize) -> usize {
        self.store(layer, head).appended
    }

    pub fn evicted(&self, layer: usize, head: usize) -> usize {
        self.store(layer, head).evicted
    }

    /// Live counts for every store, layer-major.
    pub fn live_per_head(&self) -> Vec<usize> {
        self.heads.iter().map(HeadStore::live).collect()
    }

    pub fn live_total(&self) -> usize {
        self.heads.iter().map(HeadStore::live).sum()
    }

    pub fn pages(&self, layer: usize, head: usize) -> usize {
        self.store(layer, head).pages.len()
    }

    /// Pages currently held by one head and the unused slots inside them.
    pub fn page_accounting(&self, layer: usize, head: usize) -> PageAccounting {
        let h = self.store(layer, head);
        let pages = h.pages.len();
        PageAccounting {
            pages,
            slack: pages * self.page_size - h.live(),
        }
    }

    /// Sum of [`Self::page_accounting`] over all heads.
    pub fn page_accounting_total(&self) -> PageAccounting {
        let mut acc = PageAccounting { pages: 0, slack: 0 };
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                let a = self.page_accounting(l, h);
                acc.pages += a.pages;
                acc.slack += a.slack;
            }
        }
        acc
    }

    /// Packs each head's live entries into `ceil(live / page_size)` pages.
    /// Entries keep their positions; only their slots change.
    pub fn compact(&mut self) {
        let ps = self.page_size;
        for h in &mut self.heads {
            let newest_pos = h.newest.and_then(|id| h.pages[id.page].slots[id.slot].as_ref().map(|e| e.position));
            let live: Vec<Entry> = h.pages.drain(..).flat_map(|p| p.slots.into_iter().flatten()).collect();
            for chunk in live.chunks(ps) {
                let mut slots: Vec<Option<Entry>> = chunk.iter().cloned().map(Some).collect();
                slots.resize(ps, None);
                h.pages.push(Page {
                    slots,
                    live: chunk.len(),
                });
            }
            h.newest = newest_pos.and_then(|pos| find(h, pos));
        }
    }
}

fn slots(h: &HeadStore) -> impl Iterator<Item = (SlotId, &Entry)> + '_ {
    h.pages.iter().enumerate().flat_map(|(page, p)| {
        p.slots
            .iter()
            .enumerate()
            .filter_map(move |(slot, e)| e.as_ref().map(|e| (SlotId { page, slot }, e)))
    })
}

fn find(h: &HeadStore, position: usize) -> Option<SlotId> {
    slots(h).find(|(_, e)| e.position == position).map(|(id, _)| id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn push(c: &mut PagedKVCache, pos: usize, deadline: Option<usize>) {
        c.append(0, 0, vec![pos as f64], vec![-(pos as f64)], pos, deadline).unwrap();
    }

    #[test]
    fn page_counts() {
        let mut c = PagedKVCache::new(1, 1, 1, 16).unwrap();
        for p in 0..16 {
            push(&mut c, p, None);
        }
        assert_eq!(c.page_accounting(0, 0), PageAccounting { pages: 1, slack: 0 });
        push(&mut c, 16, None);
        assert_eq!(c.page_accounting(0, 0), PageAccounting { pages: 2, slack: 15 });
    }

    #[test]
    fn evicted_slots_are_reused_before_new_pages() {
        let mut c = PagedKVCache::new(1, 1, 1, 4).unwrap();
        for p in 0..4 {
            push(&mut c, p, if p == 1 { Some(5) } else { None });
        }
        assert_eq!(c.evict_due(0, 0, 5).unwrap(), 1);
        push(&mut c, 6, None);
        assert_eq!(c.pages(0, 0), 1);
        assert_eq!(c.positions(0, 0), vec![0, 2, 3, 6]);
        let order: Vec<usize> = c.entries(0, 0).map(|e| e.position).collect();
        assert_eq!(order, vec![0, 6, 2, 3]);
        assert_eq!(c.live(0, 0), c.appended(0, 0) - c.evicted(0, 0));
    }

    #[test]
    fn positions_must_increase() {
        let mut c = PagedKVCache::new(1, 1, 1, 4).unwrap();
        push(&mut c, 3, None);
        assert!(matches!(
            c.append(0, 0, vec![0.0], vec![0.0], 3, None),
            Err(CacheError::PositionOrder { .. })
        ));
    }

    #[test]
    fn empty_pages_are_released_and_compaction_packs() {
        let mut c = PagedKVCache::new(1, 1, 1, 2).unwrap();
        for p in 0..6 {
            push(&mut c, p, if p % 2 == 0 { Some(10) } else { None });
        }
        c.remove(0, 0, 3).unwrap();
        assert_eq!(c.pages(0, 0), 3);
        c.evict_due(0, 0, 10).unwrap();
        // page 1 held positions 2 and 3, both gone now
        assert_eq!(c.pages(0, 0), 2);
        c.compact();
        assert_eq!(c.page_accounting(0, 0), PageAccounting { pages: 1, slack: 0 });
        assert_eq!(c.positions(0, 0), vec![1, 5]);
    }

    #[test]
    fn accumulate_is_running_mean() {
        let mut c = PagedKVCache::new(1, 1, 1, 4).unwrap();
        assert!(matches!(c.accumulate(0, 0, &[1.0], &[1.0]), Err(CacheError::EmptyHead { .. })));
        c.append(0, 0, vec![0.0], vec![0.0], 0, None).unwrap();
        c.accumulate(0, 0, &[2.0], &[4.0]).unwrap();
        let e = c.entries(0, 0).next().unwrap();
        assert_eq!((e.key[0], e.value[0], e.merged), (1.0, 2.0, 2));
    }
}
