//! Declarative network plans and their per-layer parameter accounting.
//!
//! A plan pins the full topology: six encoder stages with fixed channel
//! anchors, a mirrored five-stage decoder with skip wiring, and the 1x1x1
//! region head. The convolution kind decides how k=3 stage convolutions
//! are realized; downsampling differs between the kinds so that every k=3
//! kernel in the tri-planar variant stays strictly 2D:
//!
//! * 3D plan: each stage past the first opens with a stride-2 k=3 conv.
//! * tri-planar plan: a channel-preserving stride-2 1x1x1 3D projection
//!   enters the stage, followed by stride-1 tri-planar convolutions whose
//!   first one widens the channels.
//!
//! Both plans therefore share one k=3 channel sequence, starting 4-32,
//! 32-32, 32-64, so a pretrained 2D store initializes either the same way.
//!
//! Stage convolutions carry no bias (their norm layer's shift covers it),
//! which also keeps the per-position 3D-to-tri-planar parameter ratio at
//! exactly k. Projections, transposed convolutions, and the head are bare
//! convs with bias and no norm.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Acs,
    Jcs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "acs")]
    Acs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Instance,
    Batch,
}

/// One encoder stage: output channels, conv count, and the stride entering
/// the stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub convs: usize,
    pub downsample: usize,
}

/// One decoder stage, deepest first. `skip_stage` names the encoder stage
/// whose features concatenate after upsampling; `channels` must equal that
/// stage's width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderStageSpec {
    pub channels: usize,
    pub skip_stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub variant: Variant,
    pub conv_kind: ConvKind,
    pub norm_kind: NormKind,
    pub in_channels: usize,
    pub head_channels: usize,
    pub activation_slope: f32,
    pub se_reduction: usize,
    pub classifier_hidden: usize,
    pub classifier_dropout: f32,
    pub encoder_stages: Vec<StageSpec>,
    pub decoder_stages: Vec<DecoderStageSpec>,
}

/// Channel widths of the six encoder stages.
pub const STAGE_CHANNELS: [usize; 6] = [32, 64, 128, 256, 320, 320];

/// Builds the canonical plan for a variant. The baseline variant pairs
/// naturally with 3D convolutions and the others with tri-planar ones, but
/// the kinds stay orthogonal so ablations can cross them.
pub fn default_plan(variant: Variant, conv_kind: ConvKind, norm_kind: NormKind) -> NetworkPlan {
    let encoder_stages = STAGE_CHANNELS
        .iter()
        .enumerate()
        .map(|(s, &channels)| StageSpec {
            channels,
            convs: 2,
            downsample: if s == 0 { 1 } else { 2 },
        })
        .collect();
    let decoder_stages = (0..5)
        .rev()
        .map(|s| DecoderStageSpec { channels: STAGE_CHANNELS[s], skip_stage: s })
        .collect();
    NetworkPlan {
        variant,
        conv_kind,
        norm_kind,
        in_channels: 4,
        head_channels: 3,
        activation_slope: 0.01,
        se_reduction: 16,
        classifier_hidden: 128,
        classifier_dropout: 0.5,
        encoder_stages,
        decoder_stages,
    }
}

impl NetworkPlan {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_stages.len() != 6 {
            return Err(Error::config(format!(
                "plan: exactly 6 encoder stages required, got {}",
                self.encoder_stages.len()
            )));
        }
        for w in self.encoder_stages.windows(2) {
            if w[1].channels < w[0].channels {
                return Err(Error::config(format!(
                    "plan: stage channels must be non-decreasing, got {} after {}",
                    w[1].channels, w[0].channels
                )));
            }
        }
        for (s, st) in self.encoder_stages.iter().enumerate() {
            if st.channels == 0 || st.convs == 0 {
                return Err(Error::config(format!("plan: stage {s} has empty channels or convs")));
            }
            let want = if s == 0 { 1 } else { 2 };
            if st.downsample != want {
                return Err(Error::config(format!(
                    "plan: stage {s} downsample must be {want}, got {}",
                    st.downsample
                )));
            }
        }
        if self.decoder_stages.len() != self.encoder_stages.len() - 1 {
            return Err(Error::config(format!(
                "plan: {} decoder stages required, got {}",
                self.encoder_stages.len() - 1,
                self.decoder_stages.len()
            )));
        }
        for (i, d) in self.decoder_stages.iter().enumerate() {
            let want_stage = self.encoder_stages.len() - 2 - i;
            if d.skip_stage != want_stage {
                return Err(Error::config(format!(
                    "plan: decoder stage {i} must consume encoder stage {want_stage}'s skip, got {}",
                    d.skip_stage
                )));
            }
            if d.channels != self.encoder_stages[d.skip_stage].channels {
                return Err(Error::config(format!(
                    "plan: decoder stage {i} channels {} disagree with skip stage width {}",
                    d.channels, self.encoder_stages[d.skip_stage].channels
                )));
            }
        }
        if self.in_channels == 0 || self.head_channels == 0 {
            return Err(Error::config("plan: zero input or head channels".to_string()));
        }
        if self.se_reduction == 0 {
            return Err(Error::config("plan: zero SE reduction".to_string()));
        }
        if self.classifier_hidden == 0 {
            return Err(Error::config("plan: zero classifier hidden width".to_string()));
        }
        if !(0.0..1.0).contains(&self.classifier_dropout) {
            return Err(Error::config(format!(
                "plan: classifier dropout {} outside [0, 1)",
                self.classifier_dropout
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(format!("plan serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<NetworkPlan> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let plan: NetworkPlan =
            toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }

    /// Stage widths as a plain vector.
    pub fn stage_channels(&self) -> Vec<usize> {
        self.encoder_stages.iter().map(|s| s.channels).collect()
    }

    /// SE bottleneck width for a given channel count.
    pub fn se_mid(&self, channels: usize) -> usize {
        (channels / self.se_reduction).max(1)
    }

    /// Flat, ordered description of every parameterized or parameter-free
    /// position the plan instantiates. The builder walks this same
    /// structure, so summed spec counts must equal the built network's
    /// parameter count.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        self.encoder_specs("encoder", &mut out);
        let ch = self.stage_channels();
        let mut cur = *ch.last().expect("validated plan has stages");
        if self.variant == Variant::Jcs {
            // Classifier branch, its head, and one adapter per stage.
            let mut cls = Vec::new();
            self.encoder_specs("classifier.encoder", &mut cls);
            out.splice(0..0, cls);
            out.push(LayerSpec::pool("classifier.pool", cur));
            out.push(LayerSpec::linear(
                "classifier.fc1",
                cur,
                self.classifier_hidden,
                true,
            ));
            out.push(LayerSpec::activation("classifier.act", self.classifier_hidden, self.activation_slope));
            out.push(LayerSpec::dropout("classifier.dropout", self.classifier_hidden));
            out.push(LayerSpec::linear("classifier.fc2", self.classifier_hidden, 1, true));
            for (s, &c) in ch.iter().enumerate() {
                let cat = 2 * c;
                out.push(LayerSpec::se_block(
                    format!("adapter.{s}.se"),
                    cat,
                    self.se_mid(cat),
                ));
                out.push(LayerSpec::conv(
                    format!("adapter.{s}.conv"),
                    self.conv_kind,
                    3,
                    cat,
                    c,
                    1,
                    true,
                ));
            }
        }
        for (i, d) in self.decoder_stages.iter().enumerate() {
            let p = format!("decoder.{i}");
            out.push(LayerSpec {
                name: format!("{p}.up"),
                kind: LayerKind::ConvTranspose3d,
                kernel: 2,
                in_ch: cur,
                out_ch: d.channels,
                stride: 2,
                bias: true,
                se_mid: 0,
                slope: None,
            });
            for b in 0..2 {
                let cin = if b == 0 { 2 * d.channels } else { d.channels };
                self.block_specs(&format!("{p}.block.{b}"), cin, d.channels, 1, &mut out);
            }
            cur = d.channels;
        }
        out.push(LayerSpec::conv("head", ConvKind::ThreeD, 1, cur, self.head_channels, 1, true));
        out
    }

    /// Specs for the classifier network alone (encoder plus head).
    pub fn classifier_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        self.encoder_specs("encoder", &mut out);
        let bottom = *self.stage_channels().last().expect("stages");
        out.push(LayerSpec::pool("pool", bottom));
        out.push(LayerSpec::linear("fc1", bottom, self.classifier_hidden, true));
        out.push(LayerSpec::activation("act", self.classifier_hidden, self.activation_slope));
        out.push(LayerSpec::dropout("dropout", self.classifier_hidden));
        out.push(LayerSpec::linear("fc2", self.classifier_hidden, 1, true));
        out
    }

    fn encoder_specs(&self, prefix: &str, out: &mut Vec<LayerSpec>) {
        let mut cin = self.in_channels;
        for (s, st) in self.encoder_stages.iter().enumerate() {
            let p = format!("{prefix}.{s}");
            let downsampling = st.downsample > 1;
            if downsampling && self.conv_kind == ConvKind::Acs {
                out.push(LayerSpec::conv(
                    format!("{p}.proj"),
                    ConvKind::ThreeD,
                    1,
                    cin,
                    cin,
                    st.downsample,
                    true,
                ));
            }
            for b in 0..st.convs {
                let stride = if downsampling && self.conv_kind == ConvKind::ThreeD && b == 0 {
                    st.downsample
                } else {
                    1
                };
                self.block_specs(&format!("{p}.block.{b}"), cin, st.channels, stride, out);
                cin = st.channels;
            }
        }
    }

    fn block_specs(&self, prefix: &str, cin: usize, cout: usize, stride: usize, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::conv(
            format!("{prefix}.conv"),
            self.conv_kind,
            3,
            cin,
            cout,
            stride,
            false,
        ));
        out.push(LayerSpec {
            name: format!("{prefix}.norm"),
            kind: LayerKind::Norm(self.norm_kind),
            kernel: 0,
            in_ch: cout,
            out_ch: cout,
            stride: 1,
            bias: false,
            se_mid: 0,
            slope: None,
        });
        out.push(LayerSpec::activation(
            format!("{prefix}.act"),
            cout,
            self.activation_slope,
        ));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv3d,
    AcsConv,
    ConvTranspose3d,
    Norm(NormKind),
    Activation,
    Pool,
    Linear,
    Dropout,
    SeBlock,
}

/// One instantiated position in a plan, carrying exactly enough to count
/// its parameters and to name its tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub bias: bool,
    pub se_mid: usize,
    pub slope: Option<f32>,
}

impl LayerSpec {
    fn conv(
        name: impl Into<String>,
        kind: ConvKind,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        bias: bool,
    ) -> LayerSpec {
        // 1x1x1 convs stay 3D in every plan: a tri-planar split buys
        // nothing at k=1 and bare convs must not depend on the kind.
        let kind = if kernel == 1 || kind == ConvKind::ThreeD {
            LayerKind::Conv3d
        } else {
            LayerKind::AcsConv
        };
        LayerSpec {
            name: name.into(),
            kind,
            kernel,
            in_ch,
            out_ch,
            stride,
            bias,
            se_mid: 0,
            slope: None,
        }
    }

    fn linear(name: impl Into<String>, in_ch: usize, out_ch: usize, bias: bool) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Linear,
            kernel: 0,
            in_ch,
            out_ch,
            stride: 1,
            bias,
            se_mid: 0,
            slope: None,
        }
    }

    fn se_block(name: impl Into<String>, channels: usize, mid: usize) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::SeBlock,
            kernel: 0,
            in_ch: channels,
            out_ch: channels,
            stride: 1,
            bias: false,
            se_mid: mid,
            slope: None,
        }
    }

    fn activation(name: impl Into<String>, channels: usize, slope: f32) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Activation,
            kernel: 0,
            in_ch: channels,
            out_ch: channels,
            stride: 1,
            bias: false,
            se_mid: 0,
            slope: Some(slope),
        }
    }

    fn pool(name: impl Into<String>, channels: usize) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Pool,
            kernel: 0,
            in_ch: channels,
            out_ch: channels,
            stride: 1,
            bias: false,
            se_mid: 0,
            slope: None,
        }
    }

    fn dropout(name: impl Into<String>, channels: usize) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Dropout,
            kernel: 0,
            in_ch: channels,
            out_ch: channels,
            stride: 1,
            bias: false,
            se_mid: 0,
            slope: None,
        }
    }

    /// Parameter elements this position contributes.
    pub fn param_count(&self) -> usize {
        let bias = if self.bias { self.out_ch } else { 0 };
        match self.kind {
            LayerKind::Conv3d | LayerKind::ConvTranspose3d => {
                self.out_ch * self.in_ch * self.kernel.pow(3) + bias
            }
            LayerKind::AcsConv => self.out_ch * self.in_ch * self.kernel.pow(2) + bias,
            LayerKind::Norm(_) => 2 * self.out_ch,
            LayerKind::Linear => self.out_ch * self.in_ch + bias,
            LayerKind::SeBlock => 2 * self.in_ch * self.se_mid,
            LayerKind::Activation | LayerKind::Pool | LayerKind::Dropout => 0,
        }
    }

    /// What this position would cost under the other conv kind; identity
    /// for non-conv positions and for 1x1x1 convs.
    pub fn param_count_as(&self, kind: ConvKind) -> usize {
        let mut alt = self.clone();
        alt.kind = match (self.kind, kind) {
            (LayerKind::AcsConv, ConvKind::ThreeD) => LayerKind::Conv3d,
            (LayerKind::Conv3d, ConvKind::Acs) if self.kernel > 1 => LayerKind::AcsConv,
            (k, _) => k,
        };
        alt.param_count()
    }
}

/// Total parameter count a plan instantiates.
pub fn plan_param_count(plan: &NetworkPlan) -> usize {
    plan.layer_specs().iter().map(LayerSpec::param_count).sum()
}
