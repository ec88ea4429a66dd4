//! Siamese hierarchical window-attention encoder.
//!
//! Patch embedding at stride 4, four stages of shifted-window blocks joined by
//! patch merging, and a fifth stage of extra blocks at stride 32. Every level
//! is normalized and projected to a common channel width.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{GatherMap, Var};
use crate::error::{config, invalid, Result};
use crate::grid::{FeaturePyramid, TokenGrid};
use crate::nn::{Init, LayerNorm, Linear, ParamBuilder, Session};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub window_size: usize,
    /// Number of W/SW block pairs in the fifth, non-downsampling stage.
    pub extra_stage_depth: usize,
    pub mlp_ratio: usize,
    pub reduce_to: usize,
}

impl EncoderConfig {
    /// Small CPU-friendly configuration for 64×64 inputs.
    pub fn desk() -> Self {
        EncoderConfig {
            patch_size: 4,
            in_channels: 3,
            embed_dim: 32,
            stage_depths: [2, 2, 2, 2],
            stage_heads: [2, 4, 8, 8],
            window_size: 4,
            extra_stage_depth: 1,
            mlp_ratio: 4,
            reduce_to: 32,
        }
    }

    /// Base-sized layout for 384×384 inputs and imported weights.
    pub fn full() -> Self {
        EncoderConfig {
            patch_size: 4,
            in_channels: 3,
            embed_dim: 128,
            stage_depths: [2, 2, 18, 2],
            stage_heads: [4, 8, 16, 32],
            window_size: 12,
            extra_stage_depth: 1,
            mlp_ratio: 4,
            reduce_to: 128,
        }
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage.min(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.window_size == 0 || self.reduce_to == 0 {
            return Err(config("patch_size, embed_dim, window_size and reduce_to must be positive"));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(config("in_channels and mlp_ratio must be positive"));
        }
        for stage in 0..4 {
            let heads = self.stage_heads[stage];
            let dim = self.stage_dim(stage);
            if heads == 0 || !dim.is_multiple_of(heads) {
                return Err(config(format!(
                    "stage {} width {dim} not divisible by {heads} heads",
                    stage + 1
                )));
            }
            if self.stage_depths[stage] == 0 {
                return Err(config(format!("stage {} has no blocks", stage + 1)));
            }
        }
        Ok(())
    }
}

/// Hyperparameters of one window-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct SwinBlockParams {
    pub channels: usize,
    pub window_size: usize,
    /// 0 for W-MHSA, `window_size / 2` for SW-MHSA.
    pub shift: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl SwinBlockParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.channels.is_multiple_of(self.num_heads) {
            return Err(config(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.num_heads
            )));
        }
        if self.shift != 0 && self.shift != self.window_size / 2 {
            return Err(config(format!(
                "shift {} must be 0 or {}",
                self.shift,
                self.window_size / 2
            )));
        }
        Ok(())
    }
}

/// Window geometry for one attention call on an `h × w` grid.
///
/// Grids no larger than the window collapse to a single unshifted window;
/// otherwise the grid is zero-padded right/bottom to a window multiple.
#[derive(Clone, Debug)]
struct WindowPlan {
    batch: usize,
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
    hp: usize,
    wp: usize,
}

impl WindowPlan {
    fn new(batch: usize, h: usize, w: usize, window_size: usize, shift: usize) -> Self {
        let (window, shift) = if h.min(w) <= window_size {
            (h.min(w), 0)
        } else {
            (window_size, shift)
        };
        WindowPlan {
            batch,
            h,
            w,
            window,
            shift,
            hp: h.div_ceil(window) * window,
            wp: w.div_ceil(window) * window,
        }
    }

    fn windows_per_image(&self) -> usize {
        (self.hp / self.window) * (self.wp / self.window)
    }

    fn tokens(&self) -> usize {
        self.window * self.window
    }

    fn padded(&self) -> bool {
        self.hp != self.h || self.wp != self.w
    }

    /// Original grid position of padded/shifted coordinate `(py, px)`, if real.
    fn source(&self, py: usize, px: usize) -> Option<(usize, usize)> {
        let oy = (py + self.shift) % self.hp;
        let ox = (px + self.shift) % self.wp;
        (oy < self.h && ox < self.w).then_some((oy, ox))
    }

    /// `[B,h,w,C]` rows → `[B·nW, n, C]` rows.
    fn partition(&self, channels: usize) -> GatherMap {
        let (e, nww) = (self.window, self.wp / self.window);
        let nw = self.windows_per_image();
        let n = self.tokens();
        let mut src = Vec::with_capacity(self.batch * nw * n);
        for b in 0..self.batch {
            for win in 0..nw {
                let (wy, wx) = (win / nww, win % nww);
                for t in 0..n {
                    let (py, px) = (wy * e + t / e, wx * e + t % e);
                    src.push(match self.source(py, px) {
                        Some((oy, ox)) => (b * self.h + oy) * self.w + ox,
                        None => GatherMap::NONE,
                    });
                }
            }
        }
        GatherMap::new(vec![self.batch * nw, n, channels], channels, src)
    }

    /// Inverse of [`partition`](Self::partition) restricted to real positions.
    fn reverse(&self, channels: usize) -> GatherMap {
        let (e, nww) = (self.window, self.wp / self.window);
        let nw = self.windows_per_image();
        let n = self.tokens();
        let mut src = Vec::with_capacity(self.batch * self.h * self.w);
        for b in 0..self.batch {
            for oy in 0..self.h {
                for ox in 0..self.w {
                    let py = (oy + self.hp - self.shift) % self.hp;
                    let px = (ox + self.wp - self.shift) % self.wp;
                    let win = (py / e) * nww + px / e;
                    let t = (py % e) * e + px % e;
                    src.push((b * nw + win) * n + t);
                }
            }
        }
        GatherMap::new(vec![self.batch, self.h, self.w, channels], channels, src)
    }

    /// Additive `[1, nW, 1, n, n]` mask: `-inf` between tokens from different
    /// pre-shift regions, and from real queries to padding keys.
    fn mask<T: Scalar>(&self) -> Option<ArrayD<T>> {
        if self.shift == 0 && !self.padded() {
            return None;
        }
        let (e, nww) = (self.window, self.wp / self.window);
        let nw = self.windows_per_image();
        let n = self.tokens();
        let region = |p: usize, len: usize| -> usize {
            if self.shift == 0 || p < len - self.window {
                0
            } else if p < len - self.shift {
                1
            } else {
                2
            }
        };
        let mut data = vec![T::zero(); nw * n * n];
        for win in 0..nw {
            let (wy, wx) = (win / nww, win % nww);
            let info: Vec<(usize, bool)> = (0..n)
                .map(|t| {
                    let (py, px) = (wy * e + t / e, wx * e + t % e);
                    (
                        region(py, self.hp) * 3 + region(px, self.wp),
                        self.source(py, px).is_some(),
                    )
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    if info[i].0 != info[j].0 || (info[i].1 && !info[j].1) {
                        data[(win * n + i) * n + j] = T::neg_infinity();
                    }
                }
            }
        }
        Some(ArrayD::from_shape_vec(IxDyn(&[1, nw, 1, n, n]), data).unwrap())
    }
}

/// One W-MHSA or SW-MHSA block: attention sub-block then MLP sub-block.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub params: SwinBlockParams,
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    rel_bias: String,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl SwinBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, params: SwinBlockParams) -> Result<Self> {
        params.validate()?;
        let c = params.channels;
        let table = (2 * params.window_size - 1).pow(2);
        Ok(SwinBlock {
            norm1: LayerNorm::new(pb, &format!("{name}.norm1"), c),
            qkv: Linear::new(pb, &format!("{name}.attn.qkv"), c, 3 * c, true),
            proj: Linear::new(pb, &format!("{name}.attn.proj"), c, c, true),
            rel_bias: pb.trainable(
                format!("{name}.attn.relative_position_bias_table"),
                &[table, params.num_heads],
                Init::Zeros,
            ),
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), c),
            fc1: Linear::new(pb, &format!("{name}.mlp.fc1"), c, params.mlp_ratio * c, true),
            fc2: Linear::new(pb, &format!("{name}.mlp.fc2"), params.mlp_ratio * c, c, true),
            params,
        })
    }

    /// Parameter names of the attention projections, for tests and import reports.
    pub fn qkv_weight(&self) -> &str {
        &self.qkv.weight
    }

    pub fn proj_weight(&self) -> &str {
        &self.proj.weight
    }

    pub fn fc1_weight(&self) -> &str {
        &self.fc1.weight
    }

    pub fn fc2_weight(&self) -> &str {
        &self.fc2.weight
    }

    pub fn relative_bias(&self) -> &str {
        &self.rel_bias
    }

    /// Attention probabilities `[B, nW, heads, n, n]` and the pre-residual output.
    fn attend<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        x: TokenGrid<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let [b, h, w, c] = x.dims();
        if c != self.params.channels {
            return Err(config(format!(
                "window attention expects {} channels, got {c}",
                self.params.channels
            )));
        }
        let heads = self.params.num_heads;
        let hd = c / heads;
        let plan = WindowPlan::new(b, h, w, self.params.window_size, self.params.shift);
        let nw = plan.windows_per_image();
        let n = plan.tokens();
        let bw = b * nw;

        let xn = self.norm1.forward(s, x.var);
        let windows = xn.gather(Rc::new(plan.partition(c)));
        let qkv = self.qkv.forward(s, windows);
        let split = |which: usize| {
            let mut src = Vec::with_capacity(bw * heads * n);
            for wi in 0..bw {
                for hh in 0..heads {
                    for t in 0..n {
                        src.push((wi * n + t) * 3 * heads + which * heads + hh);
                    }
                }
            }
            Rc::new(GatherMap::new(vec![bw * heads, n, hd], hd, src))
        };
        let q = qkv.gather(split(0));
        let k = qkv.gather(split(1));
        let v = qkv.gather(split(2));

        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut scores = q
            .bmm(k, false, true)
            .scale(scale)
            .reshape(&[b, nw, heads, n, n]);

        let ws = self.params.window_size;
        let span = 2 * ws - 1;
        let e = plan.window;
        let mut bias_src = Vec::with_capacity(heads * n * n);
        for hh in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    let dy = (i / e) + ws - 1 - (j / e);
                    let dx = (i % e) + ws - 1 - (j % e);
                    bias_src.push((dy * span + dx) * heads + hh);
                }
            }
        }
        let table = s.param(&self.rel_bias).reshape(&[span * span * heads, 1]);
        let bias = table.gather(Rc::new(GatherMap::new(vec![1, 1, heads, n, n], 1, bias_src)));
        scores = scores.add(bias);
        if let Some(mask) = plan.mask::<T>() {
            scores = scores.add(s.constant(mask));
        }
        let probs = scores.softmax_last();

        let out = probs.reshape(&[bw * heads, n, n]).bmm(v, false, false);
        let mut merge = Vec::with_capacity(bw * n * heads);
        for wi in 0..bw {
            for t in 0..n {
                for hh in 0..heads {
                    merge.push((wi * heads + hh) * n + t);
                }
            }
        }
        let merged = out.gather(Rc::new(GatherMap::new(vec![bw, n, c], hd, merge)));
        let projected = self.proj.forward(s, merged);
        let restored = projected.gather(Rc::new(plan.reverse(c)));
        Ok((probs, restored))
    }

    /// `(S)W-MHSA(LN(x)) + x`.
    pub fn window_attention<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        x: TokenGrid<'g, T>,
    ) -> Result<TokenGrid<'g, T>> {
        let (_, attn) = self.attend(s, x)?;
        Ok(x.with_var(attn.add(x.var)))
    }

    /// Softmax attention maps `[B, nW, heads, n, n]` for inspection.
    pub fn attention_maps<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        x: TokenGrid<'g, T>,
    ) -> Result<Var<'g, T>> {
        Ok(self.attend(s, x)?.0)
    }

    /// `MLP(LN(x)) + x`.
    pub fn mlp<'g, T: Scalar>(&self, s: &Session<'g, T>, x: TokenGrid<'g, T>) -> TokenGrid<'g, T> {
        let hidden = self.fc1.forward(s, self.norm2.forward(s, x.var)).gelu();
        x.with_var(self.fc2.forward(s, hidden).add(x.var))
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        x: TokenGrid<'g, T>,
    ) -> Result<TokenGrid<'g, T>> {
        Ok(self.mlp(s, self.window_attention(s, x)?))
    }
}

/// Alternating W/SW blocks at one width.
pub fn build_blocks(
    pb: &mut ParamBuilder,
    name: &str,
    count: usize,
    channels: usize,
    heads: usize,
    window_size: usize,
    mlp_ratio: usize,
) -> Result<Vec<SwinBlock>> {
    (0..count)
        .map(|i| {
            SwinBlock::new(
                pb,
                &format!("{name}.{i}"),
                SwinBlockParams {
                    channels,
                    window_size,
                    shift: if i % 2 == 0 { 0 } else { window_size / 2 },
                    num_heads: heads,
                    mlp_ratio,
                },
            )
        })
        .collect()
}

pub fn run_blocks<'g, T: Scalar>(
    blocks: &[SwinBlock],
    s: &Session<'g, T>,
    mut x: TokenGrid<'g, T>,
) -> Result<TokenGrid<'g, T>> {
    for block in blocks {
        x = block.forward(s, x)?;
    }
    Ok(x)
}

/// The four-step W-MHSA → MLP → SW-MHSA → MLP sequence.
pub fn swin_block_pair<'g, T: Scalar>(
    s: &Session<'g, T>,
    x: TokenGrid<'g, T>,
    regular: &SwinBlock,
    shifted: &SwinBlock,
) -> Result<TokenGrid<'g, T>> {
    if regular.params.shift != 0 || shifted.params.shift == 0 {
        return Err(config("block pair needs an unshifted then a shifted block"));
    }
    let x = regular.forward(s, x)?;
    shifted.forward(s, x)
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    patch: usize,
    in_channels: usize,
    proj: Linear,
    norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &EncoderConfig) -> Self {
        let patch_len = cfg.patch_size * cfg.patch_size * cfg.in_channels;
        PatchEmbed {
            patch: cfg.patch_size,
            in_channels: cfg.in_channels,
            proj: Linear::new(pb, &format!("{name}.proj"), patch_len, cfg.embed_dim, true),
            norm: LayerNorm::new(pb, &format!("{name}.norm"), cfg.embed_dim),
        }
    }

    pub fn proj_weight(&self) -> &str {
        &self.proj.weight
    }

    /// `[B, H, W, in]` image → stride-`patch` grid; right/bottom zero padded.
    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, image: Var<'g, T>) -> Result<TokenGrid<'g, T>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] == 0 || shape[2] == 0 || shape[0] == 0 {
            return Err(invalid(format!("image must be [B,H,W,C] with positive dims, got {shape:?}")));
        }
        let (b, h, w, ch) = (shape[0], shape[1], shape[2], shape[3]);
        if ch != self.in_channels {
            return Err(invalid(format!("image has {ch} channels, expected {}", self.in_channels)));
        }
        let p = self.patch;
        let (gh, gw) = (h.div_ceil(p), w.div_ceil(p));
        let mut src = Vec::with_capacity(b * gh * gw * p * p);
        for bi in 0..b {
            for i in 0..gh {
                for j in 0..gw {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, x) = (i * p + dy, j * p + dx);
                            src.push(if y < h && x < w {
                                (bi * h + y) * w + x
                            } else {
                                GatherMap::NONE
                            });
                        }
                    }
                }
            }
        }
        let patches = image.gather(Rc::new(GatherMap::new(vec![b, gh, gw, p * p * ch], ch, src)));
        let tokens = self.norm.forward(s, self.proj.forward(s, patches));
        Ok(TokenGrid::new(tokens, p))
    }
}

/// 2×2 neighbourhood concatenation, LayerNorm, then a 4C → 2C projection.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerge {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(pb, &format!("{name}.norm"), 4 * channels),
            reduction: Linear::new(pb, &format!("{name}.reduction"), 4 * channels, 2 * channels, false),
        }
    }

    pub fn reduction_weight(&self) -> &str {
        &self.reduction.weight
    }

    /// Odd sides are zero padded to even before merging.
    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: TokenGrid<'g, T>) -> TokenGrid<'g, T> {
        let [b, h, w, c] = x.dims();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        // concatenation order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets
        const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
        let mut src = Vec::with_capacity(b * oh * ow * 4);
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    for (dy, dx) in OFFSETS {
                        let (y, xx) = (2 * i + dy, 2 * j + dx);
                        src.push(if y < h && xx < w {
                            (bi * h + y) * w + xx
                        } else {
                            GatherMap::NONE
                        });
                    }
                }
            }
        }
        let merged = x.var.gather(Rc::new(GatherMap::new(vec![b, oh, ow, 4 * c], c, src)));
        let out = self.reduction.forward(s, self.norm.forward(s, merged));
        TokenGrid::new(out, x.stride * 2)
    }
}

/// 1×1 projection to the shared pyramid width.
pub fn reduce_channels<'g, T: Scalar>(
    s: &Session<'g, T>,
    projection: &Linear,
    x: TokenGrid<'g, T>,
) -> Result<TokenGrid<'g, T>> {
    if x.channels() != projection.in_dim {
        return Err(config(format!(
            "reduction expects {} channels, got {}",
            projection.in_dim,
            x.channels()
        )));
    }
    Ok(x.with_var(projection.forward(s, x.var)))
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<SwinBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub norms: Vec<LayerNorm>,
    pub reducers: Vec<Linear>,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        pb.set_backbone(true);
        let embed = PatchEmbed::new(pb, "encoder.patch_embed", cfg);
        let mut stages = Vec::with_capacity(5);
        for stage in 0..5 {
            let dim = cfg.stage_dim(stage);
            let merge = (1..4)
                .contains(&stage)
                .then(|| PatchMerge::new(pb, &format!("encoder.layers.{stage}.downsample"), dim / 2));
            let (depth, heads) = if stage < 4 {
                (cfg.stage_depths[stage], cfg.stage_heads[stage])
            } else {
                (2 * cfg.extra_stage_depth, cfg.stage_heads[3])
            };
            let blocks = build_blocks(
                pb,
                &format!("encoder.layers.{stage}.blocks"),
                depth,
                dim,
                heads,
                cfg.window_size,
                cfg.mlp_ratio,
            )?;
            stages.push(Stage { merge, blocks });
        }
        let norms = (0..5)
            .map(|k| LayerNorm::new(pb, &format!("encoder.norm{k}"), cfg.stage_dim(k)))
            .collect();
        pb.set_backbone(false);
        let reducers = (0..5)
            .map(|k| Linear::new(pb, &format!("encoder.reduce{k}"), cfg.stage_dim(k), cfg.reduce_to, true))
            .collect();
        Ok(Encoder {
            cfg: cfg.clone(),
            embed,
            stages,
            norms,
            reducers,
        })
    }

    /// Five levels at strides {4, 8, 16, 32, 32}, each `reduce_to` wide.
    pub fn encode<'g, T: Scalar>(&self, s: &Session<'g, T>, image: Var<'g, T>) -> Result<FeaturePyramid<'g, T>> {
        let mut x = self.embed.forward(s, image)?;
        let mut levels = Vec::with_capacity(5);
        for (k, stage) in self.stages.iter().enumerate() {
            if let Some(merge) = &stage.merge {
                x = merge.forward(s, x);
            }
            x = run_blocks(&stage.blocks, s, x)?;
            let normed = x.with_var(self.norms[k].forward(s, x.var));
            levels.push(reduce_channels(s, &self.reducers[k], normed)?);
        }
        FeaturePyramid::new(levels)
    }

    /// Both branches read the same parameter leaves of `s`.
    pub fn encode_siamese<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        image_a: Var<'g, T>,
        image_b: Var<'g, T>,
    ) -> Result<(FeaturePyramid<'g, T>, FeaturePyramid<'g, T>)> {
        if image_a.shape() != image_b.shape() {
            return Err(invalid(format!(
                "image pair dimensions differ: {:?} vs {:?}",
                image_a.shape(),
                image_b.shape()
            )));
        }
        Ok((self.encode(s, image_a)?, self.encode(s, image_b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_and_reverse_are_inverse() {
        for (h, w, ws, shift) in [(8, 8, 4, 2), (6, 10, 4, 2), (3, 3, 4, 2), (5, 7, 2, 1)] {
            let plan = WindowPlan::new(2, h, w, ws, shift);
            let part = plan.partition(1);
            let rev = plan.reverse(1);
            for (dst, &src) in rev.src.iter().enumerate() {
                assert_eq!(part.src[src], dst, "h={h} w={w}");
            }
        }
    }

    #[test]
    fn small_grid_collapses_to_one_window() {
        let plan = WindowPlan::new(1, 2, 2, 4, 2);
        assert_eq!((plan.window, plan.shift, plan.windows_per_image()), (2, 0, 1));
        assert!(plan.mask::<f64>().is_none());
    }

    #[test]
    fn shift_mask_blocks_wrapped_neighbours() {
        let plan = WindowPlan::new(1, 8, 8, 4, 2);
        let mask = plan.mask::<f64>().unwrap();
        // window 0 never wraps; the last window mixes four regions
        let n = 16;
        let first = mask.as_slice().unwrap()[..n * n].iter().all(|&v| v == 0.0);
        assert!(first);
        let last = &mask.as_slice().unwrap()[3 * n * n..];
        assert_eq!(last.iter().filter(|v| v.is_infinite()).count(), n * n - 4 * 4 * 4);
    }

    #[test]
    fn config_rejects_bad_heads() {
        let mut cfg = EncoderConfig::desk();
        cfg.stage_heads[1] = 5;
        assert!(cfg.validate().is_err());
        let p = SwinBlockParams {
            channels: 8,
            window_size: 4,
            shift: 1,
            num_heads: 2,
            mlp_ratio: 4,
        };
        assert!(p.validate().is_err());
    }
}
