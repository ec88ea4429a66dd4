//! Progressive change prediction: attention-gated fusion of the enhanced
//! branches, a top-down window-attention pyramid, and the prediction heads.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{GatherMap, Var};
use crate::backbone::{build_blocks, run_blocks, SwinBlock};
use crate::enhancement::EnhancedLevel;
use crate::error::{config, invalid, Result};
use crate::grid::{TokenGrid, PYRAMID_LEVELS, PYRAMID_STRIDES};
use crate::nn::{BatchNorm, Init, Linear, ParamBuilder, Session};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Window-attention blocks and patch unmerging between levels.
    Pcp,
    /// Plain top-down feature pyramid: nearest upsampling and addition.
    Fp,
}

impl std::str::FromStr for DecoderKind {
    type Err = crate::FtnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcp" => Ok(DecoderKind::Pcp),
            "fp" => Ok(DecoderKind::Fp),
            other => Err(config(format!("decoder must be pcp or fp, got '{other}'"))),
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderKind::Pcp => "pcp",
            DecoderKind::Fp => "fp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Blocks per transition, coarsest first: 5→4, 4→3, 3→2, 2→1.
    pub depths: [usize; 4],
    pub heads: usize,
    pub window_size: usize,
    pub mlp_ratio: usize,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        DecoderConfig {
            depths: [4, 4, 4, 4],
            heads: 2,
            window_size: 4,
            mlp_ratio: 4,
        }
    }

    pub fn full() -> Self {
        DecoderConfig {
            depths: [4, 4, 4, 4],
            heads: 4,
            window_size: 12,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.depths.contains(&0) {
            return Err(config("decoder depths must be positive"));
        }
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(config(format!(
                "decoder width {channels} not divisible by {} heads",
                self.heads
            )));
        }
        if self.window_size == 0 || self.mlp_ratio == 0 {
            return Err(config("decoder window_size and mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// `F = ReLU(BN(Conv(x)))`, then `F ⊙ σ(Conv(GAP(F))) + F` when gated.
#[derive(Clone, Debug)]
pub struct Pam {
    pub fuse: Linear,
    pub bn: BatchNorm,
    pub gate: Option<Linear>,
}

impl Pam {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, channels: usize, gated: bool) -> Self {
        Pam {
            fuse: Linear::new(pb, &format!("{name}.fuse"), in_dim, channels, true),
            bn: BatchNorm::new(pb, &format!("{name}.bn"), channels),
            gate: gated.then(|| Linear::new(pb, &format!("{name}.attn"), channels, channels, true)),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: TokenGrid<'g, T>) -> Result<TokenGrid<'g, T>> {
        if x.channels() != self.fuse.in_dim {
            return Err(config(format!(
                "attention module expects {} input channels, got {}",
                self.fuse.in_dim,
                x.channels()
            )));
        }
        let f = self.bn.forward(s, self.fuse.forward(s, x.var)).relu();
        let out = match &self.gate {
            Some(gate) => {
                let weights = gate.forward(s, f.mean_spatial()).sigmoid();
                f.mul(weights).add(f)
            }
            None => f,
        };
        Ok(x.with_var(out))
    }

    /// Applies the module to the concatenated sum and difference features.
    pub fn pam<'g, T: Scalar>(&self, s: &Session<'g, T>, level: &EnhancedLevel<'g, T>) -> Result<TokenGrid<'g, T>> {
        if !level.sum.same_shape(&level.diff) {
            return Err(invalid("sum and difference features differ in shape"));
        }
        let joined = level.sum.with_var(Var::concat_last(&[level.sum.var, level.diff.var]));
        self.forward(s, joined)
    }
}

/// Linear C → 4C followed by a factor-2 depth-to-space rearrangement.
#[derive(Clone, Debug)]
pub struct PatchUnmerge {
    pub expand: Linear,
    channels: usize,
}

impl PatchUnmerge {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        PatchUnmerge {
            expand: Linear::new(pb, &format!("{name}.expand"), channels, 4 * channels, true),
            channels,
        }
    }

    /// Doubles both sides, then crops to `target` (used when the finer level has an odd side).
    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        x: TokenGrid<'g, T>,
        target: Option<(usize, usize)>,
    ) -> TokenGrid<'g, T> {
        let [b, h, w, c] = x.dims();
        debug_assert_eq!(c, self.channels);
        let (th, tw) = target.unwrap_or((2 * h, 2 * w));
        assert!(th <= 2 * h && tw <= 2 * w, "unmerge target larger than 2x");
        let expanded = self.expand.forward(s, x.var);
        let mut src = Vec::with_capacity(b * th * tw);
        for bi in 0..b {
            for y in 0..th {
                for xx in 0..tw {
                    src.push(((bi * h + y / 2) * w + xx / 2) * 4 + (y % 2) * 2 + xx % 2);
                }
            }
        }
        let out = expanded.gather(Rc::new(GatherMap::new(vec![b, th, tw, c], c, src)));
        TokenGrid::new(out, (x.stride / 2).max(1))
    }
}

fn nearest_up<'g, T: Scalar>(x: TokenGrid<'g, T>, th: usize, tw: usize) -> TokenGrid<'g, T> {
    let [b, h, w, c] = x.dims();
    let mut src = Vec::with_capacity(b * th * tw);
    for bi in 0..b {
        for y in 0..th {
            for xx in 0..tw {
                src.push((bi * h + (y / 2).min(h - 1)) * w + (xx / 2).min(w - 1));
            }
        }
    }
    TokenGrid::new(
        x.var.gather(Rc::new(GatherMap::new(vec![b, th, tw, c], c, src))),
        (x.stride / 2).max(1),
    )
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub kind: DecoderKind,
    pub channels: usize,
    /// Indexed by transition, coarsest first; empty for [`DecoderKind::Fp`].
    pub blocks: Vec<Vec<SwinBlock>>,
    /// `unmerges[k]` produces level `k + 1` (k = 0..3).
    pub unmerges: Vec<PatchUnmerge>,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &DecoderConfig, channels: usize, kind: DecoderKind) -> Result<Self> {
        let (blocks, unmerges) = match kind {
            DecoderKind::Pcp => {
                cfg.validate(channels)?;
                let blocks = cfg
                    .depths
                    .iter()
                    .enumerate()
                    .map(|(t, &n)| {
                        build_blocks(
                            pb,
                            &format!("decoder.blocks.{t}"),
                            n,
                            channels,
                            cfg.heads,
                            cfg.window_size,
                            cfg.mlp_ratio,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let unmerges = (0..3)
                    .map(|k| PatchUnmerge::new(pb, &format!("decoder.unmerge{k}"), channels))
                    .collect();
                (blocks, unmerges)
            }
            DecoderKind::Fp => (Vec::new(), Vec::new()),
        };
        Ok(Decoder {
            kind,
            channels,
            blocks,
            unmerges,
        })
    }

    /// Top-down decoding of the five attention outputs `F_A`, finest first.
    /// The coarsest level passes through unchanged; the 5→4 transition has
    /// equal strides and therefore no upsampling.
    pub fn decode<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        attended: &[TokenGrid<'g, T>],
    ) -> Result<Vec<TokenGrid<'g, T>>> {
        check_levels(attended, self.channels)?;
        let mut decoded: Vec<Option<TokenGrid<'g, T>>> = vec![None; PYRAMID_LEVELS];
        decoded[PYRAMID_LEVELS - 1] = Some(attended[PYRAMID_LEVELS - 1]);
        for k in (0..PYRAMID_LEVELS - 1).rev() {
            let coarse = decoded[k + 1].expect("decoded coarser level");
            let target = attended[k];
            let up = match self.kind {
                DecoderKind::Pcp => {
                    let refined = run_blocks(&self.blocks[PYRAMID_LEVELS - 2 - k], s, coarse)?;
                    if k == PYRAMID_LEVELS - 2 {
                        refined
                    } else {
                        self.unmerges[k].forward(s, refined, Some((target.height(), target.width())))
                    }
                }
                DecoderKind::Fp => {
                    if k == PYRAMID_LEVELS - 2 {
                        coarse
                    } else {
                        nearest_up(coarse, target.height(), target.width())
                    }
                }
            };
            let up = TokenGrid::new(up.var, target.stride);
            decoded[k] = Some(target.with_var(up.var.add(target.var)));
        }
        Ok(decoded.into_iter().map(|d| d.unwrap()).collect())
    }
}

fn check_levels<T: Scalar>(levels: &[TokenGrid<'_, T>], channels: usize) -> Result<()> {
    if levels.len() != PYRAMID_LEVELS {
        return Err(invalid(format!("decoder needs {PYRAMID_LEVELS} levels, got {}", levels.len())));
    }
    for (k, l) in levels.iter().enumerate() {
        if l.stride != PYRAMID_STRIDES[k] {
            return Err(invalid(format!(
                "level {} has stride {}, expected {}",
                k + 1,
                l.stride,
                PYRAMID_STRIDES[k]
            )));
        }
        if l.channels() != channels {
            return Err(invalid(format!(
                "level {} has {} channels, expected {channels}",
                k + 1,
                l.channels()
            )));
        }
        if l.batch() != levels[0].batch() {
            return Err(invalid("levels disagree on batch size"));
        }
    }
    for k in 0..PYRAMID_LEVELS - 1 {
        let (fine, coarse) = (&levels[k], &levels[k + 1]);
        let expected = if k == PYRAMID_LEVELS - 2 {
            (fine.height(), fine.width())
        } else {
            (fine.height().div_ceil(2), fine.width().div_ceil(2))
        };
        if (coarse.height(), coarse.width()) != expected {
            return Err(invalid(format!(
                "level {} is {}x{}, inconsistent with level {} at {}x{}",
                k + 2,
                coarse.height(),
                coarse.width(),
                k + 1,
                fine.height(),
                fine.width()
            )));
        }
    }
    Ok(())
}

/// Five side logit maps and one fused logit map, each `[B, H, W, 1]`.
#[derive(Clone, Debug)]
pub struct PredictionSet<'g, T> {
    pub side_logits: Vec<Var<'g, T>>,
    pub fused_logits: Var<'g, T>,
}

impl<'g, T: Scalar> PredictionSet<'g, T> {
    pub fn all(&self) -> impl Iterator<Item = Var<'g, T>> + '_ {
        std::iter::once(self.fused_logits).chain(self.side_logits.iter().copied())
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub side: Vec<Linear>,
    pub fuse: Linear,
}

impl Heads {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        Heads {
            side: (0..PYRAMID_LEVELS)
                .map(|k| Linear::new(pb, &format!("head.side{k}"), channels, 1, true))
                .collect(),
            // starts as the plain average of the side maps
            fuse: Linear::with_init(
                pb,
                "head.fuse",
                PYRAMID_LEVELS,
                1,
                true,
                Init::Constant(1.0 / PYRAMID_LEVELS as f64),
            ),
        }
    }

    /// 1×1 conv to one logit per level, bilinear upsampling of the logits to
    /// the input size, and a learned 1×1 fusion across the five maps.
    pub fn predict<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        decoded: &[TokenGrid<'g, T>],
        input_size: (usize, usize),
    ) -> Result<PredictionSet<'g, T>> {
        if decoded.len() != PYRAMID_LEVELS {
            return Err(invalid(format!("heads need {PYRAMID_LEVELS} levels")));
        }
        let (h, w) = input_size;
        let side_logits: Vec<Var<'g, T>> = decoded
            .iter()
            .zip(&self.side)
            .map(|(level, head)| {
                let inv = 1.0 / level.stride as f64;
                head.forward(s, level.var).resize_bilinear(h, w, inv, inv)
            })
            .collect();
        let fused_logits = self.fuse.forward(s, Var::concat_last(&side_logits));
        Ok(PredictionSet {
            side_logits,
            fused_logits,
        })
    }
}
