//! Encoder-decoder segmentation network.
//!
//! Six encoder stages of two conv blocks each, downsampling by 2 from the
//! second stage on; five decoder stages of transposed-conv upsampling, skip
//! concatenation and two conv blocks; a 1x1x1 head producing one logit map
//! per tumor region. How a downsampling stage enters depends on the conv
//! kind: 3D plans stride the stage's first k=3 conv, tri-planar plans run a
//! channel-preserving stride-2 1x1x1 projection first so every k=3 kernel
//! stays in-plane and both kinds share one k=3 channel sequence.
//!
//! Upsampling doubles extents while the encoder halves them rounding up,
//! so a transposed output can overshoot its skip by one voxel per axis;
//! the decoder crops trailing voxels to align.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    concat_ch, crop_trailing, crop_trailing_backward, init_conv_weight, split_ch, AcsConvLayer,
    BlockCache, Conv3dLayer, ConvBlock, NormLayer, StageConv,
};
use super::plan::{ConvKind, DecoderStageSpec, NetworkPlan, Variant};
use super::Params;
use crate::acs::ACSKernel;
use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(super) fn make_conv3d(
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    bias: bool,
    slope: f32,
    rng: &mut ChaCha8Rng,
) -> Conv3dLayer {
    let weight = init_conv_weight(&[out_ch, in_ch, k, k, k], in_ch * k * k * k, slope, rng);
    let bias = bias.then(|| Tensor::zeros(&[out_ch]));
    let params = ConvParams::new(weight, bias, &[stride; 3], &[k / 2; 3]).expect("conv shapes");
    Conv3dLayer { params, transpose: false }
}

pub(super) fn make_transpose(
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    slope: f32,
    rng: &mut ChaCha8Rng,
) -> Conv3dLayer {
    let weight = init_conv_weight(&[in_ch, out_ch, k, k, k], in_ch * k * k * k, slope, rng);
    let bias = Some(Tensor::zeros(&[out_ch]));
    let params = ConvParams::new(weight, bias, &[stride; 3], &[0; 3]).expect("conv shapes");
    Conv3dLayer { params, transpose: true }
}

pub(super) fn make_stage_conv(
    kind: ConvKind,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    bias: bool,
    slope: f32,
    rng: &mut ChaCha8Rng,
) -> StageConv {
    match kind {
        ConvKind::ThreeD => StageConv::ThreeD(make_conv3d(in_ch, out_ch, 3, stride, bias, slope, rng)),
        ConvKind::Acs => {
            let weight = init_conv_weight(&[out_ch, in_ch, 3, 3], in_ch * 9, slope, rng);
            let bias = bias.then(|| Tensor::zeros(&[out_ch]));
            let kernel = ACSKernel::new(weight, bias, [stride; 2], [1; 2]).expect("kernel shapes");
            StageConv::Acs(AcsConvLayer { kernel })
        }
    }
}

fn make_block(
    plan: &NetworkPlan,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> ConvBlock {
    ConvBlock {
        conv: make_stage_conv(plan.conv_kind, in_ch, out_ch, stride, false, plan.activation_slope, rng),
        norm: NormLayer::new(plan.norm_kind, out_ch),
        slope: plan.activation_slope,
    }
}

/// One encoder stage. Tri-planar plans enter downsampling stages through a
/// strided 1x1x1 projection; 3D plans stride the first block's conv.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub projection: Option<Conv3dLayer>,
    pub blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone)]
pub struct StageTape {
    proj_input: Option<Tensor>,
    blocks: Vec<BlockCache>,
}

impl EncoderStage {
    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, StageTape)> {
        let mut tape = StageTape { proj_input: None, blocks: Vec::with_capacity(self.blocks.len()) };
        let mut cur = x.clone();
        if let Some(proj) = &self.projection {
            tape.proj_input = Some(cur.clone());
            cur = proj.forward(&cur)?;
        }
        for block in &mut self.blocks {
            let (out, cache) = block.forward_train(&cur)?;
            tape.blocks.push(cache);
            cur = out;
        }
        Ok((cur, tape))
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = match &self.projection {
            Some(proj) => proj.forward(x)?,
            None => x.clone(),
        };
        for block in &self.blocks {
            cur = block.forward_eval(&cur)?;
        }
        Ok(cur)
    }

    fn backward_acc(&mut self, tape: &StageTape, grad_out: &Tensor, training: bool) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (block, cache) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            g = block.backward_acc(cache, &g, training)?;
        }
        if let Some(proj) = self.projection.as_mut() {
            let input = tape.proj_input.as_ref().expect("projection input cached");
            g = proj.backward_acc(input, &g)?;
        }
        Ok(g)
    }

    fn visit<F: FnMut(&str, &Tensor, bool)>(&self, prefix: &str, frozen: bool, f: &mut F) {
        if let Some(proj) = &self.projection {
            f(&format!("{prefix}.proj.weight"), &proj.params.weight, frozen);
            if let Some(b) = &proj.params.bias {
                f(&format!("{prefix}.proj.bias"), b, frozen);
            }
        }
        for (b, block) in self.blocks.iter().enumerate() {
            visit_block(block, &format!("{prefix}.block.{b}"), frozen, f);
        }
    }

    fn visit_mut<F: FnMut(&str, &mut Tensor, bool)>(&mut self, prefix: &str, frozen: bool, f: &mut F) {
        if let Some(proj) = self.projection.as_mut() {
            f(&format!("{prefix}.proj.weight"), &mut proj.params.weight, frozen);
            if let Some(b) = proj.params.bias.as_mut() {
                f(&format!("{prefix}.proj.bias"), b, frozen);
            }
        }
        for (b, block) in self.blocks.iter_mut().enumerate() {
            visit_block_mut(block, &format!("{prefix}.block.{b}"), frozen, f);
        }
    }
}

pub(super) fn visit_conv<F: FnMut(&str, &Tensor, bool)>(
    conv: &StageConv,
    prefix: &str,
    frozen: bool,
    f: &mut F,
) {
    match conv {
        StageConv::ThreeD(l) => {
            f(&format!("{prefix}.weight"), &l.params.weight, frozen);
            if let Some(b) = &l.params.bias {
                f(&format!("{prefix}.bias"), b, frozen);
            }
        }
        StageConv::Acs(l) => {
            f(&format!("{prefix}.weight"), &l.kernel.weight, frozen);
            if let Some(b) = &l.kernel.bias {
                f(&format!("{prefix}.bias"), b, frozen);
            }
        }
    }
}

pub(super) fn visit_conv_mut<F: FnMut(&str, &mut Tensor, bool)>(
    conv: &mut StageConv,
    prefix: &str,
    frozen: bool,
    f: &mut F,
) {
    match conv {
        StageConv::ThreeD(l) => {
            f(&format!("{prefix}.weight"), &mut l.params.weight, frozen);
            if let Some(b) = l.params.bias.as_mut() {
                f(&format!("{prefix}.bias"), b, frozen);
            }
        }
        StageConv::Acs(l) => {
            f(&format!("{prefix}.weight"), &mut l.kernel.weight, frozen);
            if let Some(b) = l.kernel.bias.as_mut() {
                f(&format!("{prefix}.bias"), b, frozen);
            }
        }
    }
}

fn visit_block<F: FnMut(&str, &Tensor, bool)>(
    block: &ConvBlock,
    prefix: &str,
    frozen: bool,
    f: &mut F,
) {
    visit_conv(&block.conv, &format!("{prefix}.conv"), frozen, f);
    f(&format!("{prefix}.norm.gamma"), &block.norm.gamma, frozen);
    f(&format!("{prefix}.norm.beta"), &block.norm.beta, frozen);
}

fn visit_block_mut<F: FnMut(&str, &mut Tensor, bool)>(
    block: &mut ConvBlock,
    prefix: &str,
    frozen: bool,
    f: &mut F,
) {
    visit_conv_mut(&mut block.conv, &format!("{prefix}.conv"), frozen, f);
    f(&format!("{prefix}.norm.gamma"), &mut block.norm.gamma, frozen);
    f(&format!("{prefix}.norm.beta"), &mut block.norm.beta, frozen);
}

fn visit_block_buffers<F: FnMut(&str, &[f32])>(block: &ConvBlock, prefix: &str, f: &mut F) {
    if let Some(stats) = &block.norm.running {
        f(&format!("{prefix}.norm.running_mean"), &stats.mean);
        f(&format!("{prefix}.norm.running_var"), &stats.var);
    }
}

fn visit_block_buffers_mut<F: FnMut(&str, &mut [f32])>(block: &mut ConvBlock, prefix: &str, f: &mut F) {
    if let Some(stats) = block.norm.running.as_mut() {
        f(&format!("{prefix}.norm.running_mean"), &mut stats.mean);
        f(&format!("{prefix}.norm.running_var"), &mut stats.var);
    }
}

pub(super) fn build_encoder(plan: &NetworkPlan, rng: &mut ChaCha8Rng) -> Vec<EncoderStage> {
    let mut stages = Vec::with_capacity(plan.encoder_stages.len());
    let mut cin = plan.in_channels;
    for st in &plan.encoder_stages {
        let downsampling = st.downsample > 1;
        let projection = if downsampling && plan.conv_kind == ConvKind::Acs {
            Some(make_conv3d(cin, cin, 1, st.downsample, true, plan.activation_slope, rng))
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(st.convs);
        for b in 0..st.convs {
            let stride = if downsampling && plan.conv_kind == ConvKind::ThreeD && b == 0 {
                st.downsample
            } else {
                1
            };
            blocks.push(make_block(plan, cin, st.channels, stride, rng));
            cin = st.channels;
        }
        stages.push(EncoderStage { projection, blocks });
    }
    stages
}

pub(super) fn encoder_forward_train(
    stages: &mut [EncoderStage],
    x: &Tensor,
) -> Result<(Vec<Tensor>, Vec<StageTape>)> {
    let mut features = Vec::with_capacity(stages.len());
    let mut tapes = Vec::with_capacity(stages.len());
    let mut cur = x.clone();
    for stage in stages {
        let (out, tape) = stage.forward_train(&cur)?;
        tapes.push(tape);
        features.push(out.clone());
        cur = out;
    }
    Ok((features, tapes))
}

pub(super) fn encoder_forward_eval(stages: &[EncoderStage], x: &Tensor) -> Result<Vec<Tensor>> {
    let mut features = Vec::with_capacity(stages.len());
    let mut cur = x.clone();
    for stage in stages {
        cur = stage.forward_eval(&cur)?;
        features.push(cur.clone());
    }
    Ok(features)
}

/// Pushes the per-stage feature gradients back through the encoder,
/// returning the gradient with respect to the network input.
pub(super) fn encoder_backward_acc(
    stages: &mut [EncoderStage],
    tapes: &[StageTape],
    mut feature_grads: Vec<Option<Tensor>>,
    training: bool,
) -> Result<Tensor> {
    let mut carry: Option<Tensor> = None;
    for (stage, tape) in stages.iter_mut().zip(tapes).rev() {
        let idx = feature_grads.len() - 1;
        let g_out = match (feature_grads.pop().flatten(), carry.take()) {
            (Some(mut a), Some(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
                a
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(Error::numeric(format!("encoder backward: stage {idx} got no gradient")))
            }
        };
        carry = Some(stage.backward_acc(tape, &g_out, training)?);
    }
    Ok(carry.expect("encoder has stages"))
}

/// One decoder stage: learnable upsampling, then two conv blocks over the
/// concatenated [upsampled, skip] channels.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: Conv3dLayer,
    pub blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone)]
pub(super) struct DecoderTape {
    up_input: Tensor,
    up_dims: [usize; 3],
    split: usize,
    skip_stage: usize,
    blocks: Vec<BlockCache>,
}

pub(super) fn build_decoder(plan: &NetworkPlan, rng: &mut ChaCha8Rng) -> Vec<DecoderStage> {
    let mut cur = *plan.stage_channels().last().expect("stages");
    let mut decoder = Vec::with_capacity(plan.decoder_stages.len());
    for d in &plan.decoder_stages {
        let up = make_transpose(cur, d.channels, 2, 2, plan.activation_slope, rng);
        let blocks = vec![
            make_block(plan, 2 * d.channels, d.channels, 1, rng),
            make_block(plan, d.channels, d.channels, 1, rng),
        ];
        decoder.push(DecoderStage { up, blocks });
        cur = d.channels;
    }
    decoder
}

/// Runs decoder plus head over the six stage features (deepest last).
pub(super) fn decoder_forward_train(
    specs: &[DecoderStageSpec],
    decoder: &mut [DecoderStage],
    head: &Conv3dLayer,
    features: &[Tensor],
) -> Result<(Tensor, Vec<DecoderTape>, Tensor)> {
    let mut cur = features.last().expect("bottleneck feature").clone();
    let mut tapes = Vec::with_capacity(decoder.len());
    for (stage, d) in decoder.iter_mut().zip(specs) {
        let skip = &features[d.skip_stage];
        let up_out = stage.up.forward(&cur)?;
        let up_dims = [up_out.extent(1), up_out.extent(2), up_out.extent(3)];
        let cropped = crop_trailing(&up_out, [skip.extent(1), skip.extent(2), skip.extent(3)])?;
        let split = cropped.extent(0);
        let mut tape = DecoderTape {
            up_input: cur,
            up_dims,
            split,
            skip_stage: d.skip_stage,
            blocks: Vec::with_capacity(stage.blocks.len()),
        };
        let mut out = concat_ch(&cropped, skip)?;
        for block in &mut stage.blocks {
            let (next, cache) = block.forward_train(&out)?;
            tape.blocks.push(cache);
            out = next;
        }
        tapes.push(tape);
        cur = out;
    }
    let logits = head.forward(&cur)?;
    Ok((logits, tapes, cur))
}

pub(super) fn decoder_forward_eval(
    specs: &[DecoderStageSpec],
    decoder: &[DecoderStage],
    head: &Conv3dLayer,
    features: &[Tensor],
) -> Result<Tensor> {
    let mut cur = features.last().expect("bottleneck feature").clone();
    for (stage, d) in decoder.iter().zip(specs) {
        let skip = &features[d.skip_stage];
        let up_out = stage.up.forward(&cur)?;
        let cropped = crop_trailing(&up_out, [skip.extent(1), skip.extent(2), skip.extent(3)])?;
        cur = concat_ch(&cropped, skip)?;
        for block in &stage.blocks {
            cur = block.forward_eval(&cur)?;
        }
    }
    head.forward(&cur)
}

/// Backward over head and decoder; returns per-stage gradients on the six
/// input features (deepest last holds the bottleneck gradient).
pub(super) fn decoder_backward_acc(
    decoder: &mut [DecoderStage],
    head: &mut Conv3dLayer,
    tapes: &[DecoderTape],
    head_input: &Tensor,
    grad_logits: &Tensor,
    training: bool,
) -> Result<Vec<Option<Tensor>>> {
    let mut feature_grads: Vec<Option<Tensor>> = vec![None; tapes.len() + 1];
    let mut g = head.backward_acc(head_input, grad_logits)?;
    for (stage, tape) in decoder.iter_mut().zip(tapes).rev() {
        for (block, cache) in stage.blocks.iter_mut().zip(&tape.blocks).rev() {
            g = block.backward_acc(cache, &g, training)?;
        }
        let (g_cropped, g_skip) = split_ch(&g, tape.split);
        match &mut feature_grads[tape.skip_stage] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g_skip.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g_skip),
        }
        let g_up_out = crop_trailing_backward(&g_cropped, tape.up_dims);
        g = stage.up.backward_acc(&tape.up_input, &g_up_out)?;
    }
    let last = feature_grads.len() - 1;
    feature_grads[last] = Some(g);
    Ok(feature_grads)
}

pub(super) fn visit_decoder<F: FnMut(&str, &Tensor, bool)>(
    decoder: &[DecoderStage],
    frozen: bool,
    f: &mut F,
) {
    for (i, stage) in decoder.iter().enumerate() {
        let p = format!("decoder.{i}");
        f(&format!("{p}.up.weight"), &stage.up.params.weight, frozen);
        if let Some(b) = &stage.up.params.bias {
            f(&format!("{p}.up.bias"), b, frozen);
        }
        for (b, block) in stage.blocks.iter().enumerate() {
            visit_block(block, &format!("{p}.block.{b}"), frozen, f);
        }
    }
}

pub(super) fn visit_decoder_mut<F: FnMut(&str, &mut Tensor, bool)>(
    decoder: &mut [DecoderStage],
    frozen: bool,
    f: &mut F,
) {
    for (i, stage) in decoder.iter_mut().enumerate() {
        let p = format!("decoder.{i}");
        f(&format!("{p}.up.weight"), &mut stage.up.params.weight, frozen);
        if let Some(b) = stage.up.params.bias.as_mut() {
            f(&format!("{p}.up.bias"), b, frozen);
        }
        for (b, block) in stage.blocks.iter_mut().enumerate() {
            visit_block_mut(block, &format!("{p}.block.{b}"), frozen, f);
        }
    }
}

pub(super) fn visit_encoder<F: FnMut(&str, &Tensor, bool)>(
    stages: &[EncoderStage],
    prefix: &str,
    frozen: bool,
    f: &mut F,
) {
    for (s, stage) in stages.iter().enumerate() {
        stage.visit(&format!("{prefix}.{s}"), frozen, f);
    }
}

pub(super) fn visit_encoder_mut<F: FnMut(&str, &mut Tensor, bool)>(
    stages: &mut [EncoderStage],
    prefix: &str,
    frozen: bool,
    f: &mut F,
) {
    for (s, stage) in stages.iter_mut().enumerate() {
        stage.visit_mut(&format!("{prefix}.{s}"), frozen, f);
    }
}

pub(super) fn visit_encoder_buffers<F: FnMut(&str, &[f32])>(
    stages: &[EncoderStage],
    prefix: &str,
    f: &mut F,
) {
    for (s, stage) in stages.iter().enumerate() {
        for (b, block) in stage.blocks.iter().enumerate() {
            visit_block_buffers(block, &format!("{prefix}.{s}.block.{b}"), f);
        }
    }
}

pub(super) fn visit_encoder_buffers_mut<F: FnMut(&str, &mut [f32])>(
    stages: &mut [EncoderStage],
    prefix: &str,
    f: &mut F,
) {
    for (s, stage) in stages.iter_mut().enumerate() {
        for (b, block) in stage.blocks.iter_mut().enumerate() {
            visit_block_buffers_mut(block, &format!("{prefix}.{s}.block.{b}"), f);
        }
    }
}

/// The segmentation network.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub plan: NetworkPlan,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderStage>,
    pub head: Conv3dLayer,
}

/// Activations one training forward pass retains for backward.
#[derive(Debug, Clone)]
pub struct SegTape {
    enc: Vec<StageTape>,
    dec: Vec<DecoderTape>,
    head_input: Tensor,
}

impl Segmenter {
    /// Builds with Kaiming-initialized convolutions. The rng stream is
    /// consumed in structural order (encoder, decoder, head), so equal
    /// seeds give bit-identical parameters.
    pub fn build(plan: &NetworkPlan, seed: u64) -> Result<Segmenter> {
        plan.validate()?;
        if plan.variant == Variant::Jcs {
            return Err(Error::config(
                "segmenter: joint variant plans build through the joint network".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Segmenter::build_with(plan, &mut rng))
    }

    pub(super) fn build_with(plan: &NetworkPlan, rng: &mut ChaCha8Rng) -> Segmenter {
        let encoder = build_encoder(plan, rng);
        let decoder = build_decoder(plan, rng);
        let bottom = plan.decoder_stages.last().expect("decoder stages").channels;
        let head = make_conv3d(bottom, plan.head_channels, 1, 1, true, plan.activation_slope, rng);
        Segmenter { plan: plan.clone(), encoder, decoder, head }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.extent(0) != self.plan.in_channels {
            return Err(Error::shape(format!(
                "segmenter: input must be [{}, D, H, W], got {:?}",
                self.plan.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training forward pass; keeps every activation backward needs.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, SegTape)> {
        self.check_input(x)?;
        let (features, enc) = encoder_forward_train(&mut self.encoder, x)?;
        let (logits, dec, head_input) =
            decoder_forward_train(&self.plan.decoder_stages, &mut self.decoder, &self.head, &features)?;
        Ok((logits, SegTape { enc, dec, head_input }))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward_acc(&mut self, tape: &SegTape, grad_logits: &Tensor) -> Result<Tensor> {
        let feature_grads = decoder_backward_acc(
            &mut self.decoder,
            &mut self.head,
            &tape.dec,
            &tape.head_input,
            grad_logits,
            true,
        )?;
        encoder_backward_acc(&mut self.encoder, &tape.enc, feature_grads, true)
    }

    /// Inference forward pass: no caches, no running-stat updates.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let features = encoder_forward_eval(&self.encoder, x)?;
        decoder_forward_eval(&self.plan.decoder_stages, &self.decoder, &self.head, &features)
    }
}

impl Params for Segmenter {
    fn visit_params<F: FnMut(&str, &Tensor, bool)>(&self, f: &mut F) {
        visit_encoder(&self.encoder, "encoder", false, f);
        visit_decoder(&self.decoder, false, f);
        f("head.weight", &self.head.params.weight, false);
        if let Some(b) = &self.head.params.bias {
            f("head.bias", b, false);
        }
    }

    fn visit_params_mut<F: FnMut(&str, &mut Tensor, bool)>(&mut self, f: &mut F) {
        visit_encoder_mut(&mut self.encoder, "encoder", false, f);
        visit_decoder_mut(&mut self.decoder, false, f);
        f("head.weight", &mut self.head.params.weight, false);
        if let Some(b) = self.head.params.bias.as_mut() {
            f("head.bias", b, false);
        }
    }

    fn visit_buffers<F: FnMut(&str, &[f32])>(&self, f: &mut F) {
        visit_encoder_buffers(&self.encoder, "encoder", f);
        for (i, stage) in self.decoder.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                visit_block_buffers(block, &format!("decoder.{i}.block.{b}"), f);
            }
        }
    }

    fn visit_buffers_mut<F: FnMut(&str, &mut [f32])>(&mut self, f: &mut F) {
        visit_encoder_buffers_mut(&mut self.encoder, "encoder", f);
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                visit_block_buffers_mut(block, &format!("decoder.{i}.block.{b}"), f);
            }
        }
    }
}
