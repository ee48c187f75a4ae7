//! Multilayer perceptrons with exact reverse-mode gradients, Adam, and checkpoints.

mod adam;
pub mod checkpoint;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, Role};
pub use mlp::{Gradients, Mlp, Trace};

/// Relative slack under which a gradient already counts as within the clip bound,
/// so that clipping twice is a bitwise no-op.
const CLIP_SLACK: f64 = 1e-12;

/// Rescales `grads` to global L2 norm `max_norm` when it exceeds it.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    clip_joint(&mut [&mut grads.values], max_norm)
}

/// Like [`clip_grad_norm`] but over several parameter groups sharing one global norm.
pub fn clip_joint(groups: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm * (1.0 + CLIP_SLACK) {
        let s = max_norm / norm;
        for g in groups.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grads(values: Vec<f64>) -> Gradients {
        let mut g = Mlp::zeros(&[values.len() - 1, 1]).unwrap().zero_gradients();
        g.values = values;
        g
    }

    #[test]
    fn clip_below_bound_is_unchanged() {
        let mut g = grads(vec![0.3, 0.4]);
        let before = g.clone();
        assert!((clip_grad_norm(&mut g, 0.9) - 0.5).abs() < 1e-15);
        assert_eq!(g, before);
    }

    #[test]
    fn clip_above_bound_halves() {
        let mut g = grads(vec![1.2, 1.6]);
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g.values, vec![0.6, 0.8]);
        assert!((g.norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn clip_zero_grads() {
        let mut g = grads(vec![0.0; 4]);
        clip_grad_norm(&mut g, 0.5);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_clip_uses_global_norm() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_joint(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent(values in prop::collection::vec(-1e3f64..1e3, 2..40), m in 1e-3f64..10.0) {
            let mut once = grads(values);
            clip_grad_norm(&mut once, m);
            let mut twice = once.clone();
            clip_grad_norm(&mut twice, m);
            prop_assert!(once.values.iter().zip(&twice.values).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert!(once.norm() <= m * (1.0 + 1e-12));
        }
    }
}
