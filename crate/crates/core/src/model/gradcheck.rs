use rand::seq::index;

use super::{init_model, Batch, ModelConfig, ModelState};
use crate::rng;

const H: f64 = 1e-4;
const SAMPLES: usize = 256;
/// Denominator floor so that parameters with vanishing gradient do not
/// dominate the relative error through rounding noise.
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Max relative error between `analytic` and five-point central differences of the
/// mean batch loss on `samples` randomly chosen parameters.
pub fn check_gradient(state: &ModelState, batch: &Batch, analytic: &[f64], samples: usize, seed: u64) -> f64 {
    let n = state.params.len();
    let mut rng = rng::substream(seed, "gradcheck");
    let picks = index::sample(&mut rng, n, samples.min(n));
    let mut probe = state.clone();
    let loss = |s: &ModelState| s.loss_and_grad(batch).map(|(l, _)| l).unwrap_or(f64::NAN);
    let mut worst: f64 = 0.0;
    for i in picks.iter() {
        let orig = probe.params[i];
        let mut at = |dx: f64| {
            probe.params[i] = orig + dx;
            loss(&probe)
        };
        // five-point central stencil: the three-point one carries an O(h^2)
        // truncation term that exceeds 1e-4 relative on curved parameters
        let (p1, m1, p2, m2) = (at(H), at(-H), at(2.0 * H), at(-2.0 * H));
        probe.params[i] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * H);
        let e = rel_err(analytic[i], numeric);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    worst
}

/// Gradient check of a freshly initialized model of `config` on `batch`.
pub fn gradient_check(config: &ModelConfig, batch: &Batch) -> f64 {
    let state = match init_model(config) {
        Ok(s) => s,
        Err(_) => return f64::INFINITY,
    };
    match state.loss_and_grad(batch) {
        Ok((_, grad)) => check_gradient(&state, batch, &grad, SAMPLES, config.init_seed),
        Err(_) => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig { d_model: 8, n_heads: 2, d_ffn: 16, vocab_size: 16, context_len: 64, ..ModelConfig::default() }
    }

    fn batch() -> Batch {
        let rows: Vec<Vec<u32>> = (0..3).map(|r| (0..12).map(|t| (3 + (r * 5 + t * 7) % 13) as u32).collect()).collect();
        Batch::from_sequences(&rows)
    }

    #[test]
    fn micro_parameter_budget() {
        assert!(micro().param_count() <= 10_000);
    }

    #[test]
    fn backprop_agrees_with_finite_differences() {
        let e = gradient_check(&micro(), &batch());
        assert!(e < 1e-4, "max relative error {e}");
    }

    #[test]
    fn zero_mask_gives_zero_gradient() {
        let mut b = batch();
        b.clear_mask();
        let s = init_model(&micro()).unwrap();
        let (loss, grad) = s.loss_and_grad(&b).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let s = init_model(&micro()).unwrap();
        let (_, mut grad) = s.loss_and_grad(&batch()).unwrap();
        grad.iter_mut().for_each(|g| *g *= 1.1);
        assert!(check_gradient(&s, &batch(), &grad, 256, 0) > 1e-2);
    }
}
