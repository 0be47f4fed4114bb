//! Independent per-task heads.
//!
//! Each head gates every backbone scale with its own spatial attention
//! (shared feature attention), refines the gated features with two residual
//! blocks, makes an auxiliary prediction per scale, and fuses the scales
//! into the final prediction with either the multi-scale attention (MSA)
//! head or the plain upsample-and-concatenate head (HRHead).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Var};
use crate::backbone::{BackboneConfig, ScalePyramid};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv2d, ConvBlock, Forward, Initializer, ResidualBlock};
use crate::losses::{LossKind, MetricKind};

pub const PREFIX: &str = "head.";

/// Number of semantic classes in the synthetic scenes (background included).
pub const SEGMENTATION_CLASSES: usize = 5;
/// Top and bottom half of every foreground class, plus background.
pub const PART_CLASSES: usize = 2 * SEGMENTATION_CLASSES - 1;
/// Positive-class weight of the edge-detection BCE.
pub const EDGE_POS_WEIGHT: f64 = 0.95;

/// Which dense label map of a sample supervises a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Depth,
    Segmentation,
    Edges,
    Normals,
    Saliency,
    Parts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub out_channels: usize,
    pub loss_kind: LossKind,
    pub metric_kind: MetricKind,
    pub lower_is_better: bool,
    pub label: LabelKind,
}

impl TaskSpec {
    pub fn depth() -> Self {
        Self::new("depth", 1, LossKind::L1, MetricKind::Rmse, LabelKind::Depth)
    }

    pub fn segmentation() -> Self {
        Self::new(
            "segm",
            SEGMENTATION_CLASSES,
            LossKind::CrossEntropy,
            MetricKind::Miou,
            LabelKind::Segmentation,
        )
    }

    pub fn edges() -> Self {
        Self::new(
            "edges",
            1,
            LossKind::WeightedBce {
                pos_weight: EDGE_POS_WEIGHT,
            },
            MetricKind::BceError,
            LabelKind::Edges,
        )
    }

    pub fn normals() -> Self {
        Self::new("normals", 3, LossKind::L1, MetricKind::Rmse, LabelKind::Normals)
    }

    /// Binary saliency, scored as two-class mIoU of the thresholded logit.
    pub fn saliency() -> Self {
        Self::new(
            "saliency",
            1,
            LossKind::WeightedBce { pos_weight: 0.5 },
            MetricKind::Miou,
            LabelKind::Saliency,
        )
    }

    pub fn parts() -> Self {
        Self::new(
            "parts",
            PART_CLASSES,
            LossKind::CrossEntropy,
            MetricKind::Miou,
            LabelKind::Parts,
        )
    }

    fn new(name: &str, out_channels: usize, loss_kind: LossKind, metric_kind: MetricKind, label: LabelKind) -> Self {
        Self {
            name: name.to_string(),
            out_channels,
            loss_kind,
            metric_kind,
            lower_is_better: metric_kind.lower_is_better(),
            label,
        }
    }

    /// Looks up one of the built-in tasks by its roster name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "depth" => Ok(Self::depth()),
            "segm" | "segmentation" => Ok(Self::segmentation()),
            "edges" => Ok(Self::edges()),
            "normals" => Ok(Self::normals()),
            "saliency" => Ok(Self::saliency()),
            "parts" => Ok(Self::parts()),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "task {} needs at least one output channel",
                self.name
            )));
        }
        if self.lower_is_better != self.metric_kind.lower_is_better() {
            return Err(Error::InvalidArgument(format!(
                "task {}: lower_is_better disagrees with {:?}",
                self.name, self.metric_kind
            )));
        }
        if self.name.is_empty() || self.name.contains(['.', ',', ' ']) {
            return Err(Error::InvalidArgument(format!("bad task name {:?}", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Msa,
    HrHead,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Msa => "msa",
            HeadKind::HrHead => "hrhead",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msa" => Ok(HeadKind::Msa),
            "hrhead" => Ok(HeadKind::HrHead),
            other => Err(Error::InvalidArgument(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Architecture switches of one head: the fusion head and whether the
/// backbone is gated by spatial attention or by a plain conv block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadOptions {
    pub kind: HeadKind,
    pub sfa: bool,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            kind: HeadKind::Msa,
            sfa: true,
        }
    }
}

/// `σ(gate(x)) ⊙ value(x)`, where both branches are conv→BN→ReLU blocks.
///
/// The gate sees a non-negative input, so every gate value lies in [0.5, 1).
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub gate: ConvBlock,
    pub value: ConvBlock,
}

impl SpatialAttention {
    pub const GATE_KERNEL: usize = 1;
    pub const VALUE_KERNEL: usize = 3;

    pub fn new(store: &mut ParamStore, init: &Initializer, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gate: ConvBlock::new(
                store,
                init,
                &format!("{name}.gate"),
                channels,
                channels,
                Self::GATE_KERNEL,
                1,
            )?,
            value: ConvBlock::new(
                store,
                init,
                &format!("{name}.value"),
                channels,
                channels,
                Self::VALUE_KERNEL,
                1,
            )?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        ConvBlock::param_count(channels, channels, Self::GATE_KERNEL)
            + ConvBlock::param_count(channels, channels, Self::VALUE_KERNEL)
    }

    pub fn channels(&self) -> usize {
        self.gate.conv.in_channels
    }

    /// Returns the attended features and the gate.
    pub fn forward_with_gate(&self, fw: &mut Forward, fmap: Var) -> Result<(Var, Var)> {
        let c = fw.tape.value(fmap).dims4()?.1;
        if c != self.channels() {
            return Err(shape_err!(
                "spatial attention over {} channels got {c}",
                self.channels()
            ));
        }
        let g = self.gate.forward(fw, fmap)?;
        let gate = fw.tape.sigmoid(g);
        let value = self.value.forward(fw, fmap)?;
        Ok((fw.tape.hadamard(gate, value)?, gate))
    }

    pub fn forward(&self, fw: &mut Forward, fmap: Var) -> Result<Var> {
        Ok(self.forward_with_gate(fw, fmap)?.0)
    }
}

/// What sits between a backbone scale and the head.
#[derive(Clone, Debug)]
pub enum FeatureGate {
    Attention(SpatialAttention),
    /// Ablation: a single 3×3 conv→BN→ReLU block.
    Plain(ConvBlock),
}

impl FeatureGate {
    fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        match self {
            FeatureGate::Attention(a) => a.forward(fw, x),
            FeatureGate::Plain(b) => {
                let c = fw.tape.value(x).dims4()?.1;
                if c != b.conv.in_channels {
                    return Err(shape_err!("feature gate over {} channels got {c}", b.conv.in_channels));
                }
                b.forward(fw, x)
            }
        }
    }

    fn param_count(channels: usize, sfa: bool) -> usize {
        if sfa {
            SpatialAttention::param_count(channels)
        } else {
            ConvBlock::param_count(channels, channels, 3)
        }
    }
}

#[derive(Clone, Debug)]
struct ScaleBranch {
    sfa: FeatureGate,
    refine1: ResidualBlock,
    refine2: ResidualBlock,
    init_pred: Conv2d,
    msa: Option<SpatialAttention>,
}

/// Output of one head for one batch, at label resolution.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub prediction: Var,
    /// Per-scale auxiliary predictions; empty outside training.
    pub initial: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    spec: TaskSpec,
    options: HeadOptions,
    scales: Vec<usize>,
    branches: Vec<ScaleBranch>,
    final_conv: Conv2d,
}

impl TaskHead {
    pub fn new(
        store: &mut ParamStore,
        init: &Initializer,
        backbone: &BackboneConfig,
        spec: TaskSpec,
        options: HeadOptions,
    ) -> Result<Self> {
        spec.validate()?;
        backbone.validate()?;
        let root = format!("{PREFIX}{}", spec.name);
        let mut branches = Vec::with_capacity(backbone.num_scales());
        for (s, &c) in backbone.channels.iter().enumerate() {
            let sfa_name = format!("{root}.sfa.scale{s}");
            let sfa = if options.sfa {
                FeatureGate::Attention(SpatialAttention::new(store, init, &sfa_name, c)?)
            } else {
                FeatureGate::Plain(ConvBlock::new(store, init, &sfa_name, c, c, 3, 1)?)
            };
            let refine1 = ResidualBlock::new(store, init, &format!("{root}.refine1.scale{s}"), c)?;
            let refine2 = ResidualBlock::new(store, init, &format!("{root}.refine2.scale{s}"), c)?;
            let init_pred = Conv2d::new(
                store,
                init,
                &format!("{root}.init_pred.scale{s}"),
                c,
                spec.out_channels,
                1,
                1,
            )?;
            let msa = match options.kind {
                HeadKind::Msa => Some(SpatialAttention::new(store, init, &format!("{root}.msa.scale{s}"), c)?),
                HeadKind::HrHead => None,
            };
            branches.push(ScaleBranch {
                sfa,
                refine1,
                refine2,
                init_pred,
                msa,
            });
        }
        let final_conv = Conv2d::new(
            store,
            init,
            &format!("{root}.final_conv"),
            backbone.total_channels(),
            spec.out_channels,
            1,
            1,
        )?;
        Ok(Self {
            spec,
            options,
            scales: backbone.scales.clone(),
            branches,
            final_conv,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn options(&self) -> HeadOptions {
        self.options
    }

    /// Name prefix shared by every parameter of this head.
    pub fn prefix(&self) -> String {
        format!("{PREFIX}{}.", self.spec.name)
    }

    /// Spatial-attention modules of the head: SFA gates first, then MSA.
    pub fn attention_modules(&self) -> Vec<&SpatialAttention> {
        let sfa = self.branches.iter().filter_map(|b| match &b.sfa {
            FeatureGate::Attention(a) => Some(a),
            FeatureGate::Plain(_) => None,
        });
        let msa = self.branches.iter().filter_map(|b| b.msa.as_ref());
        sfa.chain(msa).collect()
    }

    /// Initial task features, one per scale.
    pub fn apply_sfa(&self, fw: &mut Forward, pyramid: &ScalePyramid) -> Result<Vec<Var>> {
        if pyramid.features.len() != self.branches.len() {
            return Err(shape_err!(
                "head {} expects {} scales, pyramid has {}",
                self.name(),
                self.branches.len(),
                pyramid.features.len()
            ));
        }
        self.branches
            .iter()
            .zip(&pyramid.features)
            .map(|(b, &f)| b.sfa.forward(fw, f))
            .collect()
    }

    /// Two residual blocks per scale.
    pub fn refine(&self, fw: &mut Forward, task_feats: &[Var]) -> Result<Vec<Var>> {
        self.check_len(task_feats)?;
        self.branches
            .iter()
            .zip(task_feats)
            .map(|(b, &f)| {
                let r = b.refine1.forward(fw, f)?;
                b.refine2.forward(fw, r)
            })
            .collect()
    }

    /// Per-scale predictions at each scale's own resolution.
    pub fn initial_predict(&self, fw: &mut Forward, refined: &[Var]) -> Result<Vec<Var>> {
        self.check_len(refined)?;
        self.branches
            .iter()
            .zip(refined)
            .map(|(b, &f)| b.init_pred.forward(fw, f))
            .collect()
    }

    /// Attends each refined scale with its own MSA gate, upsamples to the
    /// first scale, concatenates (first scale first) and maps to the task
    /// channels. The result is upsampled to input resolution.
    pub fn msa_combine(&self, fw: &mut Forward, refined: &[Var]) -> Result<Var> {
        if self.options.kind != HeadKind::Msa {
            return Err(Error::InvalidState(format!("head {} is not an MSA head", self.name())));
        }
        self.check_len(refined)?;
        let attended = self
            .branches
            .iter()
            .zip(refined)
            .map(|(b, &f)| b.msa.as_ref().expect("MSA head has gates").forward(fw, f))
            .collect::<Result<Vec<_>>>()?;
        self.fuse(fw, &attended)
    }

    /// The naive fusion: upsample, concatenate, convolve.
    pub fn hrhead_combine(&self, fw: &mut Forward, refined: &[Var]) -> Result<Var> {
        if self.options.kind != HeadKind::HrHead {
            return Err(Error::InvalidState(format!("head {} is not an HRHead", self.name())));
        }
        self.check_len(refined)?;
        self.fuse(fw, refined)
    }

    fn fuse(&self, fw: &mut Forward, per_scale: &[Var]) -> Result<Var> {
        let base = self.scales[0];
        let upsampled = per_scale
            .iter()
            .zip(&self.scales)
            .map(|(&f, &s)| fw.tape.upsample_bilinear(f, s / base))
            .collect::<Result<Vec<_>>>()?;
        let cat = fw.tape.concat_channels(&upsampled)?;
        let pred = self.final_conv.forward(fw, cat)?;
        fw.tape.upsample_bilinear(pred, base)
    }

    /// Full head. Auxiliary per-scale predictions are computed only in
    /// training mode.
    pub fn forward(&self, fw: &mut Forward, pyramid: &ScalePyramid) -> Result<HeadOutput> {
        let feats = self.apply_sfa(fw, pyramid)?;
        let refined = self.refine(fw, &feats)?;
        let initial = if fw.training {
            self.initial_predict(fw, &refined)?
                .into_iter()
                .zip(&self.scales)
                .map(|(p, &s)| fw.tape.upsample_bilinear(p, s))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let prediction = match self.options.kind {
            HeadKind::Msa => self.msa_combine(fw, &refined)?,
            HeadKind::HrHead => self.hrhead_combine(fw, &refined)?,
        };
        Ok(HeadOutput { prediction, initial })
    }

    fn check_len(&self, xs: &[Var]) -> Result<()> {
        if xs.len() != self.branches.len() {
            return Err(shape_err!(
                "head {} expects {} scales, got {}",
                self.name(),
                self.branches.len(),
                xs.len()
            ));
        }
        Ok(())
    }
}

/// Exact number of learnable scalars of one head.
pub fn head_param_count(backbone: &BackboneConfig, task: &TaskSpec, options: HeadOptions) -> usize {
    let out = task.out_channels;
    let per_scale: usize = backbone
        .channels
        .iter()
        .map(|&c| {
            let msa = match options.kind {
                HeadKind::Msa => SpatialAttention::param_count(c),
                HeadKind::HrHead => 0,
            };
            FeatureGate::param_count(c, options.sfa)
                + 2 * ResidualBlock::param_count(c)
                + Conv2d::param_count(c, out, 1)
                + msa
        })
        .sum();
    per_scale + Conv2d::param_count(backbone.total_channels(), out, 1)
}
