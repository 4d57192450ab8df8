use crate::error::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
    /// Linear ramp from `warmup_start` to `base`, then cosine to `final_value`.
    WarmupCosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base: f64,
    pub final_value: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub warmup_start: f64,
}

impl Schedule {
    pub fn constant(value: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            base: value,
            final_value: value,
            warmup_steps: 0,
            total_steps,
            warmup_start: value,
        }
    }

    pub fn cosine(base: f64, final_value: f64, total_steps: u64) -> Self {
        Self { kind: ScheduleKind::Cosine, base, final_value, warmup_steps: 0, total_steps, warmup_start: base }
    }

    pub fn warmup_cosine(base: f64, final_value: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::WarmupCosine,
            base,
            final_value,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
            warmup_start: 0.0,
        }
    }

    fn cosine_between(&self, step: u64, start: u64) -> f64 {
        let span = self.total_steps - start;
        if span == 0 || step >= self.total_steps {
            return self.final_value;
        }
        let progress = (step - start) as f64 / span as f64;
        self.final_value + 0.5 * (self.base - self.final_value) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn value(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(TensorError::Contract(format!(
                "schedule step {step} beyond total {}",
                self.total_steps
            )));
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::Cosine => self.cosine_between(step, 0),
            ScheduleKind::WarmupCosine => {
                if step < self.warmup_steps {
                    let frac = step as f64 / self.warmup_steps as f64;
                    self.warmup_start + (self.base - self.warmup_start) * frac
                } else {
                    self.cosine_between(step, self.warmup_steps)
                }
            }
        })
    }
}
