use crate::env::NUM_PHASES;

/// Cycles through the phases in order, one every `period_s` of simulated time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedTimeController {
    pub period_s: f64,
    pub num_phases: usize,
}

impl Default for FixedTimeController {
    fn default() -> Self {
        Self::new(45.0)
    }
}

impl FixedTimeController {
    pub fn new(period_s: f64) -> Self {
        Self {
            period_s,
            num_phases: NUM_PHASES,
        }
    }

    /// Phase requested at simulation time `clock_s`.
    pub fn phase_at(&self, clock_s: f64) -> usize {
        // A small tolerance keeps accumulated float steps on the right side.
        ((clock_s + 1e-9) / self.period_s).floor() as usize % self.num_phases
    }

    pub fn cycle_s(&self) -> f64 {
        self.period_s * self.num_phases as f64
    }
}
