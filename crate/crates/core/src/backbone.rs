//! Residual feature extractor producing C2..C5 at strides 4, 8, 16, 32.
//!
//! Layout: a stem (2×2 max-pool, 3×3 conv + ReLU, 2×2 max-pool) brings the
//! image to stride 4; stage 2 runs at that resolution and each later stage
//! opens with another 2×2 max-pool. A residual block is
//! `relu(conv3(relu(conv3(x))) + shortcut(x))` where the shortcut is a 1×1
//! projection whenever the channel count changes.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::tensor::Real;

/// Total downsampling between the input image and C5.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { stage_channels: [16, 32, 64, 128], blocks_per_stage: [1, 1, 1, 1], input_channels: 3 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.stage_channels.contains(&0)
            || self.blocks_per_stage.contains(&0)
        {
            return Err(Error::Config(format!("backbone entries must all be at least 1: {self:?}")));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "backbone stage channels must be nondecreasing: {:?}",
                self.stage_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    proj: Option<Conv>,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let conv1 = Conv::new(store, init, &format!("{name}.conv1"), cin, cout, 3)?;
        let conv2 = Conv::new(store, init, &format!("{name}.conv2"), cout, cout, 3)?;
        let proj = if cin != cout { Some(Conv::new(store, init, &format!("{name}.proj"), cin, cout, 1)?) } else { None };
        Ok(Self { conv1, conv2, proj })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let shortcut = match &self.proj {
            Some(p) => p.forward(tape, store, x)?,
            None => x,
        };
        let sum = tape.add(h, shortcut)?;
        Ok(tape.relu(sum))
    }

    fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.num_params() + self.proj.as_ref().map_or(0, Conv::num_params)
    }
}

/// Bottom-up maps; `c[0]` is C2 (stride 4) through `c[3]` = C5 (stride 32).
#[derive(Debug, Clone, Copy)]
pub struct BackboneFeatures {
    pub c: [Var; 4],
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv,
    stages: Vec<Vec<ResBlock>>,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels;
        let stem = Conv::new(store, init, "backbone.stem", config.input_channels, ch[0], 3)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = ch[0];
        for (s, (&cout, &blocks)) in ch.iter().zip(&config.blocks_per_stage).enumerate() {
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                stage.push(ResBlock::new(store, init, &format!("backbone.c{}.block{b}", s + 2), cin, cout)?);
                cin = cout;
            }
            stages.push(stage);
        }
        Ok(Self { config: config.clone(), stem, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn out_channels(&self) -> [usize; 4] {
        self.config.stage_channels
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params() + self.stages.iter().flatten().map(ResBlock::num_params).sum::<usize>()
    }

    /// Checks that an (N, C, H, W) image can be processed.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::shape("backbone_forward", format!("expected (N, C, H, W), got {shape:?}")));
        };
        if c != self.config.input_channels {
            return Err(Error::shape(
                "backbone_forward",
                format!("input channels: image has {c}, backbone expects {}", self.config.input_channels),
            ));
        }
        if h < MAX_STRIDE || w < MAX_STRIDE || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(Error::shape(
                "backbone_forward",
                format!("image extent {h}x{w} must be a positive multiple of {MAX_STRIDE} on both axes"),
            ));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<BackboneFeatures> {
        self.check_input(tape.shape(image))?;
        let x = tape.max_pool2(image)?;
        let x = self.stem.forward(tape, store, x)?;
        let x = tape.relu(x);
        let mut x = tape.max_pool2(x)?;
        let mut c = [x; 4];
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                x = tape.max_pool2(x)?;
            }
            for block in stage {
                x = block.forward(tape, store, x)?;
            }
            c[s] = x;
        }
        Ok(BackboneFeatures { c })
    }
}

/// Fresh parameter store holding a backbone initialized from `seed`.
pub fn build_backbone<T: Real>(config: &BackboneConfig, seed: u64) -> Result<(ParamStore<T>, Backbone)> {
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, &mut Init::new(seed), config)?;
    Ok((store, backbone))
}
