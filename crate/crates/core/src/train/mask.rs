//! Compact training mask: a decision vector per KV head plus the window.

use thiserror::Error;

use crate::numerics::{eviction_offset, MaskMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("decision {value} at head {head}, token {token} is outside [0, 1]")]
    OutOfRange { head: usize, token: usize, value: f64 },
    #[error("binary mask requires decisions in {{0, 1}}, got {value} at head {head}, token {token}")]
    NotBinary { head: usize, token: usize, value: f64 },
    #[error("window must be >= 1")]
    ZeroWindow,
    #[error("heads disagree on sequence length")]
    Ragged,
}

/// When a decision takes effect relative to the token it governs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvictionTiming {
    /// `alpha_j` (taken at step `j`) evicts key `j` at step `j + w`.
    Delayed,
    /// `alpha_{j+w}` (taken at step `j + w`) evicts key `j` at that step.
    Immediate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    decisions: Vec<Vec<f64>>,
    window: usize,
    timing: EvictionTiming,
    mode: MaskMode,
}

impl MaskSpec {
    /// Relaxed mask: decisions in `[0, 1]`, clamped below 1 when evaluated.
    pub fn new(decisions: Vec<Vec<f64>>, window: usize, timing: EvictionTiming) -> Result<Self, MaskError> {
        Self::check(&decisions, window, false)?;
        Ok(Self {
            decisions,
            window,
            timing,
            mode: MaskMode::Relaxed,
        })
    }

    /// Exact mask from binary decisions; `alpha = 1` gives `-inf`.
    pub fn binary(decisions: Vec<Vec<f64>>, window: usize, timing: EvictionTiming) -> Result<Self, MaskError> {
        Self::check(&decisions, window, true)?;
        Ok(Self {
            decisions,
            window,
            timing,
            mode: MaskMode::Exact,
        })
    }

    pub fn from_bools(decisions: &[Vec<bool>], window: usize, timing: EvictionTiming) -> Result<Self, MaskError> {
        let d = decisions
            .iter()
            .map(|h| h.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::binary(d, window, timing)
    }

    fn check(decisions: &[Vec<f64>], window: usize, binary: bool) -> Result<(), MaskError> {
        if window == 0 {
            return Err(MaskError::ZeroWindow);
        }
        let t = decisions.first().map_or(0, Vec::len);
        for (head, row) in decisions.iter().enumerate() {
            if row.len() != t {
                return Err(MaskError::Ragged);
            }
            for (token, &value) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(MaskError::OutOfRange { head, token, value });
                }
                if binary && value != 0.0 && value != 1.0 {
                    return Err(MaskError::NotBinary { head, token, value });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.decisions.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn heads(&self) -> usize {
        self.decisions.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn timing(&self) -> EvictionTiming {
        self.timing
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn decisions(&self) -> &[Vec<f64>] {
        &self.decisions
    }

    pub fn source_offset(&self) -> usize {
        source_offset(self.timing, self.window)
    }

    /// Additive mask entry for query `i`, key `j` of KV head `head`.
    pub fn offset(&self, head: usize, i: usize, j: usize) -> f64 {
        if j > i {
            return f64::NEG_INFINITY;
        }
        if i < j + self.window {
            return 0.0;
        }
        let alpha = self.decisions[head].get(j + self.source_offset()).copied();
        eviction_offset(alpha, self.mode)
    }
}

/// Keys of one head still resident once all `decisions.len()` tokens have
/// been processed.
pub fn live_after(decisions: &[bool], window: usize, timing: EvictionTiming) -> usize {
    let t = decisions.len();
    let src = source_offset(timing, window);
    (0..t)
        .filter(|&j| j + window >= t || !decisions.get(j + src).copied().unwrap_or(false))
        .count()
}

pub(crate) fn source_offset(timing: EvictionTiming, window: usize) -> usize {
    match timing {
        EvictionTiming::Delayed => 0,
        EvictionTiming::Immediate => window,
    }
}

/// Single-head mask with delayed-eviction semantics.
pub fn build_mask(decisions: &[f64], window: usize) -> Result<MaskSpec, MaskError> {
    MaskSpec::new(vec![decisions.to_vec()], window, EvictionTiming::Delayed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn live_after_keeps_window_tail() {
        let all = [true; 10];
        assert_eq!(live_after(&all, 3, EvictionTiming::Delayed), 3);
        assert_eq!(live_after(&all, 3, EvictionTiming::Immediate), 3);
        assert_eq!(live_after(&[false; 10], 3, EvictionTiming::Delayed), 10);
        let mut d = [false; 10];
        d[0] = true;
        assert_eq!(live_after(&d, 3, EvictionTiming::Delayed), 9);
        assert_eq!(live_after(&d, 3, EvictionTiming::Immediate), 10);
        d[3] = true;
        assert_eq!(live_after(&d, 3, EvictionTiming::Immediate), 9);
        assert_eq!(live_after(&[true; 2], 4, EvictionTiming::Delayed), 2);
    }

    #[test]
    fn zero_decisions_give_pure_causal_mask() {
        let m = build_mask(&[0.0; 5], 2).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if j > i { f64::NEG_INFINITY } else { 0.0 };
                assert_eq!(m.offset(0, i, j), want);
            }
        }
    }

    #[test]
    fn binary_eviction_row_pattern() {
        let mut d = vec![0.0; 6];
        d[0] = 1.0;
        let m = MaskSpec::binary(vec![d], 4, EvictionTiming::Delayed).unwrap();
        for q in 0..4 {
            assert_eq!(m.offset(0, q, 0), 0.0);
        }
        assert_eq!(m.offset(0, 4, 0), f64::NEG_INFINITY);
        assert_eq!(m.offset(0, 5, 0), f64::NEG_INFINITY);
    }

    #[test]
    fn half_decision_entry() {
        let mut d = vec![0.0; 6];
        d[0] = 0.5;
        let m = build_mask(&d, 4).unwrap();
        assert!((m.offset(0, 4, 0) - (-0.693_147_180_559_945_3)).abs() < 1e-15);
    }

    #[test]
    fn relaxed_mask_clamps_full_decisions() {
        let m = build_mask(&[1.0, 0.0, 0.0], 1).unwrap();
        let v = m.offset(0, 2, 0);
        assert!(v.is_finite() && v < -27.0);
    }

    #[test]
    fn diagonal_always_visible_and_entries_nonpositive() {
        let d: Vec<f64> = (0..10).map(|i| (i as f64) / 10.0).collect();
        let m = build_mask(&d, 3).unwrap();
        for i in 0..10 {
            assert_eq!(m.offset(0, i, i), 0.0);
            for j in 0..=i {
                assert!(m.offset(0, i, j) <= 0.0);
            }
        }
    }

    #[test]
    fn immediate_timing_reads_later_decision() {
        let mut d = vec![0.0; 8];
        d[4] = 1.0;
        let m = MaskSpec::binary(vec![d], 4, EvictionTiming::Immediate).unwrap();
        assert_eq!(m.offset(0, 3, 0), 0.0);
        assert_eq!(m.offset(0, 4, 0), f64::NEG_INFINITY);
        assert_eq!(m.offset(0, 7, 4), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(build_mask(&[0.0], 0), Err(MaskError::ZeroWindow));
        assert!(matches!(build_mask(&[1.5], 1), Err(MaskError::OutOfRange { .. })));
        assert!(matches!(
            MaskSpec::binary(vec![vec![0.5]], 1, EvictionTiming::Delayed),
            Err(MaskError::NotBinary { .. })
        ));
    }
}
