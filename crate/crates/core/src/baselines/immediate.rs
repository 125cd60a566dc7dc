use crate::kvcache::{Admission, CacheError, CachePolicy, PagedKVCache};

/// Ablation: the decision taken at step `t` evicts the entry from step
/// `t - w` right away, so no token gets a grace period after its fate is set.
#[derive(Clone, Copy, Debug)]
pub struct ImmediateEviction {
    pub window: usize,
}

impl CachePolicy for ImmediateEviction {
    fn name(&self) -> &'static str {
        "dms-immediate"
    }

    fn admit(
        &mut self,
        cache: &mut PagedKVCache,
        layer: usize,
        head: usize,
        t: usize,
        decision: bool,
    ) -> Result<Admission, CacheError> {
        if decision && t >= self.window {
            cache.remove(layer, head, t - self.window)?;
        }
        Ok(Admission::Append { deadline: None })
    }
}
