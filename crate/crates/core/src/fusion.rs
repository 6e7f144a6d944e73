//! Top-down feature pyramid and dense multiscale fusion.
//!
//! The baseline pyramid follows the usual top-down scheme:
//!
//! ```text
//! M5 = lat5(C5)                 P5 = smooth5(M5)
//! Mi = lati(Ci) + up2(Mi+1)     Pi = smoothi(Mi)      i = 4, 3, 2
//! ```
//!
//! Dense fusion rewires the two finest levels. For i ∈ {2, 3}, every coarser
//! backbone map Cj (j = i+1..5) gets its own 1×1 reduction, is upsampled by
//! 2^(j-i) to the extent of Pi, and is merged with Pi either by channel
//! concatenation (in order Ci+1, ..., C5, Pi) or by elementwise addition. A
//! 3×3 convolution brings the merge back to `out_channels`:
//!
//! ```text
//! Pi* = fuse_i( up(dense_ij(Cj)) for j > i  ⊕  Pi )
//! ```
//!
//! P4* and P5* are the baseline P4 and P5. Levels whose dense toggle is off
//! pass through unchanged.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::backbone::BackboneFeatures;
use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Concat,
    Add,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "add" => Ok(FusionMode::Add),
            other => Err(Error::Config(format!("unknown fusion mode `{other}` (expected concat or add)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    pub dense_to_p2: bool,
    pub dense_to_p3: bool,
    pub mode: FusionMode,
    pub out_channels: usize,
    pub add_p6: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { dense_to_p2: true, dense_to_p3: true, mode: FusionMode::Concat, out_channels: 256, add_p6: true }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::Config("fusion.out_channels must be at least 1".into()));
        }
        Ok(())
    }

    /// The four ablation settings: dense into P3 only, into P2 only, into
    /// both (concat), into both (add).
    pub fn ablation_rows(out_channels: usize) -> [FusionConfig; 4] {
        let row = |p2, p3, mode| FusionConfig { dense_to_p2: p2, dense_to_p3: p3, mode, out_channels, add_p6: true };
        [
            row(false, true, FusionMode::Concat),
            row(true, false, FusionMode::Concat),
            row(true, true, FusionMode::Concat),
            row(true, true, FusionMode::Add),
        ]
    }

    pub fn dense_enabled(&self, level: usize) -> bool {
        match level {
            2 => self.dense_to_p2,
            3 => self.dense_to_p3,
            _ => false,
        }
    }

    /// Input width of the 3×3 fusion conv at `level`, if that level is fused.
    pub fn fusion_input_width(&self, level: usize) -> Option<usize> {
        if !self.dense_enabled(level) {
            return None;
        }
        Some(match self.mode {
            FusionMode::Concat => (5 - level + 1) * self.out_channels,
            FusionMode::Add => self.out_channels,
        })
    }
}

/// Dense connections into one target level.
#[derive(Debug, Clone)]
pub struct DenseBranch {
    pub level: usize,
    pub mode: FusionMode,
    /// 1×1 reductions of C(level+1)..C5, in that order.
    pub laterals: Vec<Conv>,
    pub fuse: Conv,
}

impl DenseBranch {
    fn num_params(&self) -> usize {
        self.laterals.iter().map(Conv::num_params).sum::<usize>() + self.fuse.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub out_channels: usize,
    /// 1×1 lateral convs for C2..C5.
    pub lateral: Vec<Conv>,
    /// 3×3 output convs for P2..P5.
    pub output: Vec<Conv>,
    pub dense_p2: Option<DenseBranch>,
    pub dense_p3: Option<DenseBranch>,
}

impl FusionParams {
    /// Builds baseline pyramid weights plus dense branches for every level
    /// the config enables.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        backbone_channels: [usize; 4],
        config: &FusionConfig,
    ) -> Result<Self> {
        config.validate()?;
        let out = config.out_channels;
        let mut lateral = Vec::with_capacity(4);
        let mut output = Vec::with_capacity(4);
        for (i, &c) in backbone_channels.iter().enumerate() {
            lateral.push(Conv::new(store, init, &format!("fpn.lateral{}", i + 2), c, out, 1)?);
        }
        for i in 0..4 {
            output.push(Conv::new(store, init, &format!("fpn.output{}", i + 2), out, out, 3)?);
        }
        let mut branch = |level: usize| -> Result<Option<DenseBranch>> {
            let Some(width) = config.fusion_input_width(level) else { return Ok(None) };
            let laterals = (level + 1..=5)
                .map(|j| Conv::new(store, init, &format!("dense.p{level}.from_c{j}"), backbone_channels[j - 2], out, 1))
                .collect::<Result<Vec<_>>>()?;
            let fuse = Conv::new(store, init, &format!("dense.p{level}.fuse"), width, out, 3)?;
            Ok(Some(DenseBranch { level, mode: config.mode, laterals, fuse }))
        };
        let dense_p2 = branch(2)?;
        let dense_p3 = branch(3)?;
        Ok(Self { out_channels: out, lateral, output, dense_p2, dense_p3 })
    }

    pub fn baseline_params(&self) -> usize {
        self.lateral.iter().chain(&self.output).map(Conv::num_params).sum()
    }

    pub fn num_params(&self) -> usize {
        self.baseline_params()
            + self.dense_p2.as_ref().map_or(0, DenseBranch::num_params)
            + self.dense_p3.as_ref().map_or(0, DenseBranch::num_params)
    }

    fn branch(&self, level: usize) -> Option<&DenseBranch> {
        match level {
            2 => self.dense_p2.as_ref(),
            3 => self.dense_p3.as_ref(),
            _ => None,
        }
    }
}

/// Pyramid levels P2..P5 (`p[0]` is P2) and the optional P6.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidFeatures {
    pub p: [Var; 4],
    pub p6: Option<Var>,
}

impl PyramidFeatures {
    /// All levels from finest to coarsest.
    pub fn levels(&self) -> Vec<Var> {
        let mut v = self.p.to_vec();
        v.extend(self.p6);
        v
    }
}

fn check_features<T: Real>(tape: &Tape<T>, feats: &BackboneFeatures, params: &FusionParams) -> Result<()> {
    for (i, (&c, conv)) in feats.c.iter().zip(&params.lateral).enumerate() {
        let got = tape.shape(c).get(1).copied().unwrap_or(0);
        if got != conv.in_channels {
            return Err(Error::shape(
                "fpn",
                format!("C{} has {got} channels but its lateral conv expects {}", i + 2, conv.in_channels),
            ));
        }
    }
    Ok(())
}

/// Baseline top-down pyramid, P2..P5.
fn top_down<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    feats: &BackboneFeatures,
    params: &FusionParams,
) -> Result<[Var; 4]> {
    check_features(tape, feats, params)?;
    let mut merged = [feats.c[3]; 4];
    merged[3] = params.lateral[3].forward(tape, store, feats.c[3])?;
    for i in (0..3).rev() {
        let lat = params.lateral[i].forward(tape, store, feats.c[i])?;
        let up = tape.upsample(merged[i + 1], 2)?;
        merged[i] = tape.add(lat, up)?;
    }
    let mut p = merged;
    for i in 0..4 {
        p[i] = params.output[i].forward(tape, store, merged[i])?;
    }
    Ok(p)
}

/// Standard feature pyramid over C2..C5 (no P6).
pub fn fpn_baseline<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    feats: &BackboneFeatures,
    params: &FusionParams,
) -> Result<PyramidFeatures> {
    Ok(PyramidFeatures { p: top_down(tape, store, feats, params)?, p6: None })
}

/// Dense multiscale fusion pyramid.
pub fn dmffpn_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    feats: &BackboneFeatures,
    config: &FusionConfig,
    params: &FusionParams,
) -> Result<PyramidFeatures> {
    config.validate()?;
    if config.out_channels != params.out_channels {
        return Err(Error::invalid(
            "dmffpn_forward",
            format!("config wants {} channels, parameters have {}", config.out_channels, params.out_channels),
        ));
    }
    for level in [2, 3] {
        if !config.dense_enabled(level) {
            continue;
        }
        let branch = params.branch(level).ok_or_else(|| {
            Error::invalid("dmffpn_forward", format!("dense fusion into P{level} enabled but no parameters were built for it"))
        })?;
        if branch.mode != config.mode {
            return Err(Error::invalid(
                "dmffpn_forward",
                format!(
                    "P{level} fusion conv was built for {} mode ({} input channels) but config asks for {}",
                    branch.mode, branch.fuse.in_channels, config.mode
                ),
            ));
        }
    }

    let mut p = top_down(tape, store, feats, params)?;
    for level in [2, 3] {
        if !config.dense_enabled(level) {
            continue;
        }
        let branch = params.branch(level).expect("checked above");
        let idx = level - 2;
        let mut terms = Vec::with_capacity(branch.laterals.len() + 1);
        for (conv, j) in branch.laterals.iter().zip(level + 1..=5) {
            let reduced = conv.forward(tape, store, feats.c[j - 2])?;
            terms.push(tape.upsample(reduced, 1 << (j - level))?);
        }
        terms.push(p[idx]);
        let merged = match config.mode {
            FusionMode::Concat => tape.concat_channels(&terms)?,
            FusionMode::Add => tape.add_all(&terms)?,
        };
        p[idx] = branch.fuse.forward(tape, store, merged)?;
    }
    let p6 = if config.add_p6 { Some(make_p6(tape, p[3])?) } else { None };
    Ok(PyramidFeatures { p, p6 })
}

/// Stride-2 max-pool of P5*.
pub fn make_p6<T: Real>(tape: &mut Tape<T>, p5: Var) -> Result<Var> {
    tape.max_pool2(p5)
}
