use crate::kvcache::{Admission, CacheError, CachePolicy, PagedKVCache};

/// Inference-only merging: a positive decision folds the token into the
/// newest entry as a uniform mean instead of appending it.
#[derive(Clone, Copy, Debug, Default)]
pub struct DmcLite;

impl CachePolicy for DmcLite {
    fn name(&self) -> &'static str {
        "dmc-lite"
    }

    fn admit(
        &mut self,
        cache: &mut PagedKVCache,
        layer: usize,
        head: usize,
        _t: usize,
        decision: bool,
    ) -> Result<Admission, CacheError> {
        if decision {
            if cache.live(layer, head) == 0 {
                return Err(CacheError::EmptyHead { layer, head });
            }
            Ok(Admission::Accumulate)
        } else {
            Ok(Admission::Append { deadline: None })
        }
    }
}
