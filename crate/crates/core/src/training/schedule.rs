#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    pub fn lr(self, step: usize, total_steps: usize, initial_lr: f64) -> f64 {
        match self {
            Schedule::Constant => initial_lr,
            Schedule::Cosine => cosine_lr(step, total_steps, initial_lr),
        }
    }
}

/// `initial_lr · ½(1 + cos(π·step/total))`, with `step` clamped to `total`.
pub fn cosine_lr(step: usize, total_steps: usize, initial_lr: f64) -> f64 {
    if total_steps == 0 {
        return initial_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    initial_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 1e-3), cosine_lr(100, 100, 1e-3));
        assert_eq!(Schedule::Constant.lr(70, 100, 0.1), 0.1);
    }
}
