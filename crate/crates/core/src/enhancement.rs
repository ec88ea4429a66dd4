//! Deep feature enhancement: per-level summation and difference fusion of the
//! two temporal branches, each extended with a local contrast feature.

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::grid::{FeaturePyramid, TokenGrid, PYRAMID_LEVELS};
use crate::nn::{BatchNorm, Linear, ParamBuilder, Session};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Sum,
    Diff,
}

/// Enhanced sum/diff features of one level, each `2C` wide.
#[derive(Clone, Copy, Debug)]
pub struct EnhancedLevel<'g, T> {
    pub level: usize,
    pub sum: TokenGrid<'g, T>,
    pub diff: TokenGrid<'g, T>,
}

/// `ReLU(BN(Conv1x1(e1 ± e2)))`.
#[derive(Clone, Debug)]
pub struct FuseBranch {
    pub mode: FuseMode,
    pub conv: Linear,
    pub bn: BatchNorm,
}

impl FuseBranch {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, mode: FuseMode) -> Self {
        FuseBranch {
            mode,
            conv: Linear::new(pb, &format!("{name}.conv"), channels, channels, true),
            bn: BatchNorm::new(pb, &format!("{name}.bn"), channels),
        }
    }

    pub fn fuse<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        e1: TokenGrid<'g, T>,
        e2: TokenGrid<'g, T>,
    ) -> Result<TokenGrid<'g, T>> {
        if !e1.same_shape(&e2) {
            return Err(invalid(format!(
                "fuse operands differ: {:?}@{} vs {:?}@{}",
                e1.dims(),
                e1.stride,
                e2.dims(),
                e2.stride
            )));
        }
        let combined = match self.mode {
            FuseMode::Sum => e1.var.add(e2.var),
            FuseMode::Diff => e1.var.sub(e2.var),
        };
        let y = self.bn.forward(s, self.conv.forward(s, combined)).relu();
        Ok(e1.with_var(y))
    }
}

/// `[e, e − AvgPool3x3(e)]` along channels.
pub fn contrast<'g, T: Scalar>(e: TokenGrid<'g, T>) -> TokenGrid<'g, T> {
    let local = e.var.sub(e.var.avg_pool3());
    e.with_var(Var::concat_last(&[e.var, local]))
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub sum: Vec<FuseBranch>,
    pub diff: Vec<FuseBranch>,
}

impl Enhancer {
    /// Separate parameters per level and per mode.
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        Enhancer {
            sum: (0..PYRAMID_LEVELS)
                .map(|k| FuseBranch::new(pb, &format!("dfe.{k}.sum"), channels, FuseMode::Sum))
                .collect(),
            diff: (0..PYRAMID_LEVELS)
                .map(|k| FuseBranch::new(pb, &format!("dfe.{k}.diff"), channels, FuseMode::Diff))
                .collect(),
        }
    }

    pub fn enhance_pyramid<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        a: &FeaturePyramid<'g, T>,
        b: &FeaturePyramid<'g, T>,
    ) -> Result<Vec<EnhancedLevel<'g, T>>> {
        if !a.aligned_with(b) {
            return Err(invalid("pyramids are not level-aligned"));
        }
        a.levels
            .iter()
            .zip(&b.levels)
            .enumerate()
            .map(|(k, (&ea, &eb))| {
                Ok(EnhancedLevel {
                    level: k + 1,
                    sum: contrast(self.sum[k].fuse(s, ea, eb)?),
                    diff: contrast(self.diff[k].fuse(s, ea, eb)?),
                })
            })
            .collect()
    }
}
