//! Network architectures: the encoder-decoder segmenter, the grade
//! classifier, and the joint model that fuses the two.
//!
//! Everything processes one sample at a time in [C, D, H, W] layout; batch
//! training accumulates gradients across per-sample passes. Construction is
//! driven by a [`plan::NetworkPlan`], and parameter initialization consumes
//! a seeded stream in a fixed structural order, so equal seeds give
//! bit-identical networks.

pub mod cls;
pub mod jcs;
pub mod layers;
pub mod plan;
pub mod seg;

pub use cls::Classifier;
pub use jcs::Jcs;
pub use plan::{default_plan, plan_param_count, ConvKind, NetworkPlan, NormKind, Variant};
pub use seg::Segmenter;

use crate::tensor::Tensor;

/// Uniform access to a network's named parameters. `frozen` marks tensors
/// the optimizer must skip; it is a property of the containing network, not
/// of the tensor.
pub trait Params {
    fn visit_params<F: FnMut(&str, &Tensor, bool)>(&self, f: &mut F);
    fn visit_params_mut<F: FnMut(&str, &mut Tensor, bool)>(&mut self, f: &mut F);

    /// Named non-parameter state (running statistics), flat per tensor.
    fn visit_buffers<F: FnMut(&str, &[f32])>(&self, f: &mut F) {
        let _ = f;
    }

    fn visit_buffers_mut<F: FnMut(&str, &mut [f32])>(&mut self, f: &mut F) {
        let _ = f;
    }
}

/// Total parameter elements; `trainable_only` excludes frozen tensors.
pub fn count_parameters<P: Params>(net: &P, trainable_only: bool) -> usize {
    let mut n = 0;
    net.visit_params(&mut |_, t, frozen| {
        if !(trainable_only && frozen) {
            n += t.numel();
        }
    });
    n
}

/// Clears every parameter gradient, allocating absent buffers.
pub fn zero_grads<P: Params>(net: &mut P) {
    net.visit_params_mut(&mut |_, t, _| {
        t.ensure_grad();
        t.zero_grad();
    });
}
