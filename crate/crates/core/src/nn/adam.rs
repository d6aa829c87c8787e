//! Adaptive-moment gradient descent, state laid out parallel to the model's
//! per-layer parameter buffers.
//!
//! Optionally the step size is scaled per layer by `min(1, cap / fan_in)`.
//! Adam's per-parameter steps are scale-free, so on layers with very wide
//! fan-in (the 3D valid-convolution stacks reach 6480) a handful of
//! sign-coherent steps can shift pre-activations by O(fan_in * lr) and
//! blow the forward pass up; capping the per-layer step restores the
//! usual "pre-activations move O(lr)" behaviour without touching narrow
//! layers.

use crate::nn::model::{Grads, Model};

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    layer_scale: Vec<f32>,
}

impl Adam {
    pub fn new(model: &Model, lr: f32) -> Adam {
        Adam::with_fan_in_cap(model, lr, None)
    }

    pub fn with_fan_in_cap(model: &Model, lr: f32, fan_in_cap: Option<usize>) -> Adam {
        let zeros: Vec<Vec<f32>> = model
            .layers()
            .iter()
            .map(|l| vec![0f32; l.param_count()])
            .collect();
        let layer_scale = model
            .layers()
            .iter()
            .map(|l| match fan_in_cap {
                Some(cap) if cap > 0 => {
                    let fan_in = l.fan_in().max(1);
                    (cap as f32 / fan_in as f32).min(1.0)
                }
                _ => 1.0,
            })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            layer_scale,
        }
    }

    /// One update from a full gradient (already averaged over the batch).
    pub fn step(&mut self, model: &mut Model, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (li, layer) in model.layers_mut().iter_mut().enumerate() {
            let g = &grads.0[li];
            let m = &mut self.m[li];
            let v = &mut self.v[li];
            let lr = self.lr * self.layer_scale[li];
            let mut off = 0;
            layer.visit_params_mut(&mut |p: &mut [f32]| {
                for (i, w) in p.iter_mut().enumerate() {
                    let gi = g[off + i];
                    let mi = &mut m[off + i];
                    let vi = &mut v[off + i];
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + self.eps);
                }
                off += p.len();
            });
        }
    }
}
