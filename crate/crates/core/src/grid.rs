//! Spatial feature grids flowing between the encoder, enhancement and decoder stages.

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// A `[batch, height, width, channels]` feature grid at a given pixel stride.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'g, T> {
    pub var: Var<'g, T>,
    pub stride: usize,
}

impl<'g, T: Scalar> TokenGrid<'g, T> {
    pub fn new(var: Var<'g, T>, stride: usize) -> Self {
        debug_assert_eq!(var.shape().len(), 4, "token grid rank");
        TokenGrid { var, stride }
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.var.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn batch(&self) -> usize {
        self.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.dims()[3]
    }

    pub fn with_var(self, var: Var<'g, T>) -> Self {
        TokenGrid::new(var, self.stride)
    }

    pub fn same_shape(&self, other: &TokenGrid<'g, T>) -> bool {
        self.dims() == other.dims() && self.stride == other.stride
    }

    pub fn is_finite(&self) -> bool {
        self.var.value().iter().all(|v| v.is_finite())
    }
}

pub const PYRAMID_LEVELS: usize = 5;
pub const PYRAMID_STRIDES: [usize; PYRAMID_LEVELS] = [4, 8, 16, 32, 32];

/// Five encoder levels, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'g, T> {
    pub levels: Vec<TokenGrid<'g, T>>,
}

impl<'g, T: Scalar> FeaturePyramid<'g, T> {
    pub fn new(levels: Vec<TokenGrid<'g, T>>) -> Result<Self> {
        if levels.len() != PYRAMID_LEVELS {
            return Err(invalid(format!(
                "pyramid needs {PYRAMID_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }

    pub fn aligned_with(&self, other: &FeaturePyramid<'g, T>) -> bool {
        self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.same_shape(b))
    }
}
