use crate::harness::config::OptimConfig;

/// Linear warmup to `learning_rate`, then cosine decay to
/// `min_learning_rate` at the final step.
pub fn lr_at(o: &OptimConfig, step: usize) -> f64 {
    if step < o.warmup_steps {
        return o.learning_rate * (step + 1) as f64 / o.warmup_steps as f64;
    }
    let span = o.steps.saturating_sub(o.warmup_steps).max(1);
    let progress = ((step - o.warmup_steps) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    o.min_learning_rate + (o.learning_rate - o.min_learning_rate) * cos
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let o = OptimConfig {
            steps: 110,
            warmup_steps: 10,
            learning_rate: 1.0,
            min_learning_rate: 0.1,
            ..OptimConfig::default()
        };
        assert!((lr_at(&o, 0) - 0.1).abs() < 1e-12);
        assert!((lr_at(&o, 10) - 1.0).abs() < 1e-12);
        assert!((lr_at(&o, 60) - 0.55).abs() < 1e-12);
        assert!((lr_at(&o, 110) - 0.1).abs() < 1e-12);
    }
}
