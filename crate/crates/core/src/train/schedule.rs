use serde::{Deserialize, Serialize};

/// Linear compression-ratio schedule and the neuron zero-out horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Training steps per unit of compression ratio.
    pub steps_per_cr: usize,
    pub final_cr: f64,
    /// Length of the query-neuron zero-out pre-phase.
    pub neuron_horizon: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps_per_cr: 100,
            final_cr: 4.0,
            neuron_horizon: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub cr: f64,
    pub alpha_target: f64,
    pub neuron_scale: f64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if self.steps_per_cr == 0 {
            return Err("steps_per_cr must be >= 1".into());
        }
        if !(self.final_cr >= 1.0) {
            return Err(format!("final_cr must be >= 1, got {}", self.final_cr));
        }
        Ok(())
    }

    /// `CR(t) = min(t / steps_per_cr + 1, final_cr)`.
    pub fn cr(&self, t: usize) -> f64 {
        (t as f64 / self.steps_per_cr as f64 + 1.0).min(self.final_cr)
    }

    /// `1 - 1/CR(t)`.
    pub fn alpha_target(&self, t: usize) -> f64 {
        1.0 - 1.0 / self.cr(t)
    }

    /// Multiplier on `q_first[0]` at pre-phase step `t`.
    pub fn neuron_scale(&self, t: usize) -> f64 {
        if self.neuron_horizon == 0 {
            return 0.0;
        }
        (1.0 - t as f64 / self.neuron_horizon as f64).max(0.0)
    }

    /// Steps needed for the schedule to reach `final_cr`.
    pub fn steps_to_final(&self) -> usize {
        ((self.final_cr - 1.0) * self.steps_per_cr as f64).ceil() as usize
    }

    pub fn state(&self, t: usize) -> ScheduleState {
        ScheduleState {
            cr: self.cr(t),
            alpha_target: self.alpha_target(t),
            neuron_scale: self.neuron_scale(t),
        }
    }
}
