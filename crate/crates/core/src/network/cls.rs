//! Tumor grade classifier: the shared encoder trunk pooled into a single
//! logit (positive class = high grade).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{init_conv_weight, LinearLayer};
use super::plan::NetworkPlan;
use super::seg::{
    build_encoder, encoder_forward_eval, encoder_forward_train, visit_encoder,
    visit_encoder_buffers, visit_encoder_buffers_mut, visit_encoder_mut, EncoderStage, StageTape,
};
use super::Params;
use crate::error::{Error, Result};
use crate::ops::{self, DropoutMask};
use crate::tensor::Tensor;

fn make_linear(in_ch: usize, out_ch: usize, slope: f32, rng: &mut ChaCha8Rng) -> LinearLayer {
    LinearLayer {
        weight: init_conv_weight(&[out_ch, in_ch], in_ch, slope, rng),
        bias: Some(Tensor::zeros(&[out_ch])),
    }
}

/// Grade classifier: encoder, global average pool, two fully connected
/// layers with dropout between them.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub plan: NetworkPlan,
    pub encoder: Vec<EncoderStage>,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub dropout: f32,
}

/// Activations one training pass of the classifier retains.
#[derive(Debug, Clone)]
pub struct ClsTape {
    enc: Vec<StageTape>,
    bottleneck: Tensor,
    pooled: Tensor,
    fc1_out: Tensor,
    mask: DropoutMask,
    drop_out: Tensor,
}

impl Classifier {
    pub fn build(plan: &NetworkPlan, seed: u64) -> Result<Classifier> {
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Classifier::build_with(plan, &mut rng))
    }

    pub(crate) fn build_with(plan: &NetworkPlan, rng: &mut ChaCha8Rng) -> Classifier {
        let encoder = build_encoder(plan, rng);
        let bottom = *plan.stage_channels().last().expect("stages");
        let fc1 = make_linear(bottom, plan.classifier_hidden, plan.activation_slope, rng);
        let fc2 = make_linear(plan.classifier_hidden, 1, plan.activation_slope, rng);
        Classifier { plan: plan.clone(), encoder, fc1, fc2, dropout: plan.classifier_dropout }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.extent(0) != self.plan.in_channels {
            return Err(Error::shape(format!(
                "classifier: input must be [{}, D, H, W], got {:?}",
                self.plan.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training forward pass; the rng drives dropout only.
    pub fn forward_train(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, ClsTape)> {
        self.check_input(x)?;
        let (features, enc) = encoder_forward_train(&mut self.encoder, x)?;
        let bottleneck = features.last().expect("bottleneck").clone();
        let pooled = ops::global_avg_pool(&bottleneck)?;
        let fc1_out = self.fc1.forward(&pooled)?;
        let act_out = ops::leaky_relu(&fc1_out, self.plan.activation_slope);
        let (drop_out, mask) = ops::dropout(&act_out, self.dropout, true, rng)?;
        let logit = self.fc2.forward(&drop_out)?;
        Ok((logit, ClsTape { enc, bottleneck, pooled, fc1_out, mask, drop_out }))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward_acc(&mut self, tape: &ClsTape, grad_logit: &Tensor) -> Result<Tensor> {
        let g = self.fc2.backward_acc(&tape.drop_out, grad_logit)?;
        let g = ops::dropout_backward(&tape.mask, &g);
        let g = ops::leaky_relu_backward(&tape.fc1_out, self.plan.activation_slope, &g);
        let g = self.fc1.backward_acc(&tape.pooled, &g)?;
        let g = ops::global_avg_pool_backward(tape.bottleneck.shape(), &g)?;
        let mut feature_grads: Vec<Option<Tensor>> = vec![None; self.encoder.len()];
        let last = feature_grads.len() - 1;
        feature_grads[last] = Some(g);
        super::seg::encoder_backward_acc(&mut self.encoder, &tape.enc, feature_grads, true)
    }

    /// Inference logit: dropout disabled, running statistics untouched.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let features = encoder_forward_eval(&self.encoder, x)?;
        let pooled = ops::global_avg_pool(features.last().expect("bottleneck"))?;
        let act = ops::leaky_relu(&self.fc1.forward(&pooled)?, self.plan.activation_slope);
        self.fc2.forward(&act)
    }

    /// Per-stage encoder features without any training side effects.
    pub fn encoder_features_eval(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        encoder_forward_eval(&self.encoder, x)
    }
}

pub(super) fn visit_classifier_head<F: FnMut(&str, &Tensor, bool)>(
    cls: &Classifier,
    frozen: bool,
    f: &mut F,
) {
    f("fc1.weight", &cls.fc1.weight, frozen);
    if let Some(b) = &cls.fc1.bias {
        f("fc1.bias", b, frozen);
    }
    f("fc2.weight", &cls.fc2.weight, frozen);
    if let Some(b) = &cls.fc2.bias {
        f("fc2.bias", b, frozen);
    }
}

pub(super) fn visit_classifier_head_mut<F: FnMut(&str, &mut Tensor, bool)>(
    cls: &mut Classifier,
    frozen: bool,
    f: &mut F,
) {
    f("fc1.weight", &mut cls.fc1.weight, frozen);
    if let Some(b) = cls.fc1.bias.as_mut() {
        f("fc1.bias", b, frozen);
    }
    f("fc2.weight", &mut cls.fc2.weight, frozen);
    if let Some(b) = cls.fc2.bias.as_mut() {
        f("fc2.bias", b, frozen);
    }
}

impl Params for Classifier {
    fn visit_params<F: FnMut(&str, &Tensor, bool)>(&self, f: &mut F) {
        visit_encoder(&self.encoder, "encoder", false, f);
        visit_classifier_head(self, false, f);
    }

    fn visit_params_mut<F: FnMut(&str, &mut Tensor, bool)>(&mut self, f: &mut F) {
        visit_encoder_mut(&mut self.encoder, "encoder", false, f);
        visit_classifier_head_mut(self, false, f);
    }

    fn visit_buffers<F: FnMut(&str, &[f32])>(&self, f: &mut F) {
        visit_encoder_buffers(&self.encoder, "encoder", f);
    }

    fn visit_buffers_mut<F: FnMut(&str, &mut [f32])>(&mut self, f: &mut F) {
        visit_encoder_buffers_mut(&mut self.encoder, "encoder", f);
    }
}

#[cfg(test)]
mod tests {
    use super::super::plan::{default_plan, ConvKind, LayerSpec, NormKind, Variant};
    use super::super::{count_parameters, zero_grads};
    use super::*;
    use rand::Rng;

    /// Three encoder stages keep a small input's bottleneck above one
    /// voxel, where instance norm would flatten the features to a constant
    /// and starve the head of signal. Bypasses plan validation, so builds
    /// go through `build_with`.
    fn shallow_plan() -> NetworkPlan {
        let mut plan = default_plan(Variant::Baseline, ConvKind::ThreeD, NormKind::Instance);
        plan.encoder_stages.truncate(3);
        for (st, ch) in plan.encoder_stages.iter_mut().zip([2, 3, 4]) {
            st.channels = ch;
        }
        plan.classifier_hidden = 32;
        plan
    }

    fn shallow_classifier(plan: &NetworkPlan, seed: u64) -> Classifier {
        Classifier::build_with(plan, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn sample(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn count_matches_spec_accounting() {
        let plan = default_plan(Variant::Baseline, ConvKind::ThreeD, NormKind::Instance);
        let net = Classifier::build(&plan, 1).unwrap();
        let want: usize = plan.classifier_specs().iter().map(LayerSpec::param_count).sum();
        assert_eq!(count_parameters(&net, false), want);
        let head: usize = plan
            .classifier_specs()
            .iter()
            .filter(|s| s.name.starts_with("fc"))
            .map(LayerSpec::param_count)
            .sum();
        assert_eq!(head, 41_217);
    }

    #[test]
    fn logit_is_scalar_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = shallow_classifier(&shallow_plan(), 2);
        let x = sample(&mut rng, &[4, 8, 8, 8]);
        let y = net.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1]);
    }

    #[test]
    fn eval_matches_train_when_dropout_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut plan = shallow_plan();
        plan.classifier_dropout = 0.0;
        let mut net = shallow_classifier(&plan, 2);
        let x = sample(&mut rng, &[4, 8, 8, 8]);
        let eval = net.infer(&x).unwrap();
        let mut drng = ChaCha8Rng::seed_from_u64(9);
        let (train, _) = net.forward_train(&x, &mut drng).unwrap();
        assert!(eval.bits_eq(&train));
    }

    #[test]
    fn dropout_is_rng_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = shallow_classifier(&shallow_plan(), 2);
        let x = sample(&mut rng, &[4, 8, 8, 8]);
        let run = |net: &mut Classifier, seed| {
            let mut drng = ChaCha8Rng::seed_from_u64(seed);
            let (y, _) = net.forward_train(&x, &mut drng).unwrap();
            y
        };
        let a = run(&mut net, 1);
        let b = run(&mut net, 1);
        let c = run(&mut net, 2);
        assert!(a.bits_eq(&b));
        assert!(!a.bits_eq(&c), "a different dropout stream must change the logit");
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = shallow_classifier(&shallow_plan(), 2);
        zero_grads(&mut net);
        let x = sample(&mut rng, &[4, 6, 7, 6]);
        let mut drng = ChaCha8Rng::seed_from_u64(1);
        let (logit, tape) = net.forward_train(&x, &mut drng).unwrap();
        let go = Tensor::new(&[1], vec![1.0]).unwrap();
        let gx = net.backward_acc(&tape, &go).unwrap();
        assert_eq!(gx.shape(), x.shape());
        assert_eq!(logit.numel(), 1);
        net.visit_params(&mut |name, t, _| {
            let g = t.grad().expect("grad allocated");
            assert!(g.iter().any(|&v| v != 0.0), "no gradient reached {name}");
        });
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        use crate::reference;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut plan = shallow_plan();
        plan.classifier_dropout = 0.0;
        let mut net = shallow_classifier(&plan, 8);
        let x = sample(&mut rng, &[4, 5, 6, 5]);
        zero_grads(&mut net);
        let mut drng = ChaCha8Rng::seed_from_u64(1);
        let (_, tape) = net.forward_train(&x, &mut drng).unwrap();
        let go = Tensor::new(&[1], vec![1.0]).unwrap();
        let gx = net.backward_acc(&tape, &go).unwrap();

        // Entries without a one-sided smoothness certificate sit on a
        // relu kink and are skipped, as in the segmenter check.
        let mut xm = x.data().to_vec();
        let fd = reference::finite_diff_sided(&mut xm, 2e-3, |v| {
            let t = Tensor::new(x.shape(), v.to_vec()).unwrap();
            f64::from(net.infer(&t).unwrap().data()[0])
        });
        let checked = reference::check_grad_filtered("input", gx.data(), &fd, 2e-2);
        assert!(
            checked.compared * 10 >= checked.total * 8,
            "too many kink-skipped entries: {} of {}",
            checked.total - checked.compared,
            checked.total
        );
    }
}
