use std::f64::consts::PI;

use super::layout::Layout;
use super::{AdamConfig, ModelConfig};

/// Linear warmup from 0 to `max_lr`, then cosine decay to
/// `min_lr_ratio * max_lr` at `total_steps`. Steps past the end clamp.
pub fn lr_at(step: u64, config: &ModelConfig) -> f64 {
    let max = config.max_lr;
    let min = config.min_lr_ratio * max;
    let step = step.min(config.total_steps);
    if step < config.warmup_steps {
        return max * step as f64 / config.warmup_steps as f64;
    }
    let span = config.total_steps - config.warmup_steps;
    if span == 0 {
        return max;
    }
    let progress = (step - config.warmup_steps) as f64 / span as f64;
    max - (max - min) * 0.5 * (1.0 - (PI * progress).cos())
}

/// One AdamW update with bias correction for update number `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub(crate) fn adam_update(
    layout: &Layout,
    adam: &AdamConfig,
    params: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    grad: &[f64],
    lr: f64,
    t: u64,
) {
    let bc1 = 1.0 - adam.beta1.powf(t as f64);
    let bc2 = 1.0 - adam.beta2.powf(t as f64);
    for s in layout.sections() {
        let wd = if s.decay { adam.weight_decay } else { 0.0 };
        for i in s.offset..s.offset + s.len {
            let g = grad[i];
            m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g;
            v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + adam.eps) + wd * params[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(warmup: u64) -> ModelConfig {
        ModelConfig { max_lr: 6e-4, min_lr_ratio: 0.1, warmup_steps: warmup, total_steps: 1010, ..ModelConfig::default() }
    }

    #[test]
    fn schedule_anchors() {
        let c = cfg(10);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(10, &c), 6e-4);
        assert!((lr_at(1010, &c) - 0.1 * 6e-4).abs() < 1e-9);
        assert_eq!(lr_at(5000, &c), lr_at(1010, &c));
        // cosine midpoint: cos(pi/2) = 0
        assert!((lr_at(510, &c) - (6e-4 + 0.1 * 6e-4) / 2.0).abs() < 1e-12);
        assert_eq!(lr_at(0, &cfg(0)), 6e-4);
    }

    #[test]
    fn schedule_shape() {
        let c = cfg(37);
        let lrs: Vec<f64> = (0..=c.total_steps).map(|s| lr_at(s, &c)).collect();
        assert!(lrs[..=37].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[37..].windows(2).all(|w| w[0] >= w[1]));
    }
}
