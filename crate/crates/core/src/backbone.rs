//! Shared multi-resolution feature extractor.
//!
//! A strided-convolution stem brings the image down to the first scale, then
//! each further scale is reached by stride-2 conv blocks followed by
//! residual blocks. Every stage emits one level of the [`ScalePyramid`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{ConvBlock, Forward, Initializer, ResidualBlock};

pub const PREFIX: &str = "backbone.";
const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Downsampling factor of each pyramid level.
    pub scales: Vec<usize>,
    /// Channel count of each pyramid level.
    pub channels: Vec<usize>,
    pub stem_channels: usize,
    pub blocks_per_scale: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            scales: vec![4, 8, 16, 32],
            channels: vec![8, 16, 32, 64],
            stem_channels: 8,
            blocks_per_scale: 1,
        }
    }
}

impl BackboneConfig {
    /// HRNet-18 pyramid widths.
    pub fn hrnet18_widths() -> Self {
        Self {
            channels: vec![18, 36, 72, 144],
            stem_channels: 18,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.len() != self.channels.len() {
            return Err(Error::Config(format!(
                "backbone needs one channel count per scale, got {:?} / {:?}",
                self.scales, self.channels
            )));
        }
        if !self.scales.iter().all(|s| s.is_power_of_two()) || !self.scales.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "scales must be strictly increasing powers of two, got {:?}",
                self.scales
            )));
        }
        if self.channels.contains(&0) || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn max_scale(&self) -> usize {
        *self.scales.last().expect("validated config has scales")
    }

    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Checks that an H×W input maps onto whole pixels at every scale.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.max_scale();
        if h % m != 0 || w % m != 0 {
            return Err(shape_err!("input {h}×{w} is not divisible by the largest scale {m}"));
        }
        Ok(())
    }

    /// Input/output channels of the stride-2 blocks of the stem.
    fn stem_layout(&self) -> Vec<(usize, usize, usize)> {
        let c0 = self.channels[0];
        let downs = self.scales[0].trailing_zeros() as usize;
        if downs == 0 {
            return vec![(IMAGE_CHANNELS, c0, 1)];
        }
        (0..downs)
            .map(|i| {
                let cin = if i == 0 { IMAGE_CHANNELS } else { self.stem_channels };
                let cout = if i + 1 == downs { c0 } else { self.stem_channels };
                (cin, cout, 2)
            })
            .collect()
    }

    /// Input/output channels of the stride-2 blocks entering stage `s ≥ 1`.
    fn transition_layout(&self, s: usize) -> Vec<(usize, usize)> {
        let downs = (self.scales[s] / self.scales[s - 1]).trailing_zeros() as usize;
        (0..downs)
            .map(|i| {
                let cin = if i == 0 { self.channels[s - 1] } else { self.channels[s] };
                (cin, self.channels[s])
            })
            .collect()
    }

    /// Exact number of learnable scalars of the backbone.
    pub fn param_count(&self) -> usize {
        let stem: usize = self
            .stem_layout()
            .iter()
            .map(|&(i, o, _)| ConvBlock::param_count(i, o, 3))
            .sum();
        let transitions: usize = (1..self.num_scales())
            .flat_map(|s| self.transition_layout(s))
            .map(|(i, o)| ConvBlock::param_count(i, o, 3))
            .sum();
        let blocks: usize = self
            .channels
            .iter()
            .map(|&c| self.blocks_per_scale * ResidualBlock::param_count(c))
            .sum();
        stem + transitions + blocks
    }
}

/// Backbone features, one entry per scale (highest resolution first).
#[derive(Clone, Debug)]
pub struct ScalePyramid {
    pub features: Vec<Var>,
}

#[derive(Clone, Debug)]
struct Stage {
    downsample: Vec<ConvBlock>,
    blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &Initializer, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.num_scales());
        for s in 0..config.num_scales() {
            let downsample = if s == 0 {
                config
                    .stem_layout()
                    .into_iter()
                    .enumerate()
                    .map(|(i, (cin, cout, stride))| {
                        ConvBlock::new(store, init, &format!("{PREFIX}stem.{i}"), cin, cout, 3, stride)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                config
                    .transition_layout(s)
                    .into_iter()
                    .enumerate()
                    .map(|(i, (cin, cout))| {
                        ConvBlock::new(store, init, &format!("{PREFIX}stage{s}.down{i}"), cin, cout, 3, 2)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let blocks = (0..config.blocks_per_scale)
                .map(|j| ResidualBlock::new(store, init, &format!("{PREFIX}stage{s}.block{j}"), config.channels[s]))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
        }
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs an N×3×H×W batch through the backbone.
    pub fn extract_features(&self, fw: &mut Forward, image: Var) -> Result<ScalePyramid> {
        let (_, c, h, w) = fw.tape.value(image).dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(shape_err!("backbone expects {IMAGE_CHANNELS}-channel images, got {c}"));
        }
        self.config.check_input(h, w)?;
        let mut x = image;
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for down in &stage.downsample {
                x = down.forward(fw, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(fw, x)?;
            }
            features.push(x);
        }
        Ok(ScalePyramid { features })
    }
}
