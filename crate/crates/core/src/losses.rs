//! Deeply supervised boundary-aware objective.
//!
//! Each loss is a pure function of a probability map and a binary reference,
//! paired with its analytic gradient with respect to the probabilities.
//! [`total_loss`] lifts them onto the graph over the six logit maps.

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::decoder::PredictionSet;
use crate::error::{config, invalid, Result};
use crate::grid::PYRAMID_LEVELS;
use crate::scalar::Scalar;

/// Log clamp for cross-entropy.
pub const BCE_DELTA: f64 = 1e-7;
/// Denominator guard for soft IoU.
pub const SIOU_EPS: f64 = 1e-7;
/// Floor applied to each class frequency.
pub const FREQ_FLOOR: f64 = 1e-6;

/// Which map decides class membership and boundaries in the pixel weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightReference {
    /// Ground-truth mask.
    Label,
    /// Current prediction thresholded at 0.5.
    Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// `[f0, f1]`: no-change and change pixel fractions.
    pub class_frequencies: [f64; 2],
    pub boundary_weight: f64,
    pub ssim_window: usize,
    pub ssim_eps: f64,
    pub side_weights: [f64; PYRAMID_LEVELS],
    pub use_bce: bool,
    /// Median-frequency and boundary weighting on the cross-entropy term.
    pub weighted_bce: bool,
    pub use_ssim: bool,
    pub use_siou: bool,
    pub weight_reference: WeightReference,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            class_frequencies: [0.5, 0.5],
            boundary_weight: 2.0,
            ssim_window: 11,
            ssim_eps: 1e-4,
            side_weights: [1.0; PYRAMID_LEVELS],
            use_bce: true,
            weighted_bce: true,
            use_ssim: true,
            use_siou: true,
            weight_reference: WeightReference::Label,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let [f0, f1] = self.class_frequencies;
        if !(f0 > 0.0 && f1 > 0.0) || ((f0 + f1) - 1.0).abs() > 1e-9 {
            return Err(config(format!(
                "class frequencies must be positive and sum to 1, got [{f0}, {f1}]"
            )));
        }
        if !(self.boundary_weight >= 0.0) {
            return Err(config("boundary weight must be non-negative"));
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(config(format!("ssim window must be odd and >= 3, got {}", self.ssim_window)));
        }
        if !(self.ssim_eps > 0.0) {
            return Err(config("ssim epsilon must be positive"));
        }
        if self.side_weights.iter().any(|&a| !(a >= 0.0)) {
            return Err(config("side weights must be non-negative"));
        }
        if !(self.use_bce || self.use_ssim || self.use_siou) {
            return Err(config("at least one loss term must be enabled"));
        }
        Ok(())
    }

    /// Sets the class frequencies after flooring each at [`FREQ_FLOOR`].
    pub fn with_frequencies(mut self, f: [f64; 2]) -> Self {
        self.class_frequencies = floor_frequencies(f);
        self
    }
}

/// Pixel fraction of each class over every pixel of every mask.
pub fn class_frequencies<'a>(masks: impl IntoIterator<Item = ArrayView2<'a, u8>>) -> Result<[f64; 2]> {
    let (mut total, mut changed) = (0u64, 0u64);
    for m in masks {
        total += m.len() as u64;
        changed += m.iter().filter(|&&v| v != 0).count() as u64;
    }
    if total == 0 {
        return Err(invalid("class frequencies need at least one non-empty mask"));
    }
    let f1 = changed as f64 / total as f64;
    Ok([1.0 - f1, f1])
}

pub fn floor_frequencies(f: [f64; 2]) -> [f64; 2] {
    let a = f[0].max(FREQ_FLOOR);
    let b = f[1].max(FREQ_FLOOR);
    [a / (a + b), b / (a + b)]
}

fn check_shapes<T>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("map shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Pixels with a 4-neighbour of a different value.
pub fn boundary_map<T: Scalar>(reference: ArrayView2<T>) -> Array2<bool> {
    let (h, w) = reference.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = reference[[y, x]];
        (y > 0 && reference[[y - 1, x]] != v)
            || (y + 1 < h && reference[[y + 1, x]] != v)
            || (x > 0 && reference[[y, x - 1]] != v)
            || (x + 1 < w && reference[[y, x + 1]] != v)
    })
}

/// `median(f) / f_class + w0 · [boundary]` per pixel of a binary reference map.
pub fn wbce_weights<T: Scalar>(reference: ArrayView2<T>, cfg: &LossConfig) -> Array2<T> {
    let [f0, f1] = cfg.class_frequencies;
    let median = 0.5 * (f0 + f1);
    let (w0, w1) = (T::lit(median / f0), T::lit(median / f1));
    let boundary = boundary_map(reference);
    let bw = T::lit(cfg.boundary_weight);
    let mut out = reference.mapv(|v| if v > T::lit(0.5) { w1 } else { w0 });
    ndarray::Zip::from(&mut out).and(&boundary).for_each(|o, &b| {
        if b {
            *o += bw;
        }
    });
    out
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let d = T::lit(BCE_DELTA);
    p.max(d).min(T::one() - d)
}

/// Pixel-mean weighted binary cross-entropy.
pub fn wbce_loss<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>, w: ArrayView2<T>) -> Result<T> {
    check_shapes(&p, &g)?;
    check_shapes(&p, &w)?;
    let n = T::lit(p.len() as f64);
    let mut total = T::zero();
    ndarray::Zip::from(&p).and(&g).and(&w).for_each(|&pv, &gv, &wv| {
        let pc = clamp_prob(pv);
        total -= wv * (gv * pc.ln() + (T::one() - gv) * (T::one() - pc).ln());
    });
    Ok(total / n)
}

pub fn wbce_grad<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>, w: ArrayView2<T>) -> Array2<T> {
    let n = T::lit(p.len() as f64);
    let d = T::lit(BCE_DELTA);
    let mut out = Array2::zeros(p.dim());
    ndarray::Zip::from(&mut out)
        .and(&p)
        .and(&g)
        .and(&w)
        .for_each(|o, &pv, &gv, &wv| {
            if pv > d && pv < T::one() - d {
                *o = -wv * (gv / pv - (T::one() - gv) / (T::one() - pv)) / n;
            }
        });
    out
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn reflect_pad<T: Scalar>(a: ArrayView2<T>, r: usize) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h + 2 * r, w + 2 * r), |(y, x)| {
        a[[
            reflect(y as isize - r as isize, h),
            reflect(x as isize - r as isize, w),
        ]]
    })
}

/// Sums over every `n × n` window fully inside `a`.
fn box_sum<T: Scalar>(a: &Array2<T>, n: usize) -> Array2<T> {
    let (h, w) = a.dim();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<T>::zeros((h, ow));
    for y in 0..h {
        let line = a.row(y);
        let mut acc: T = line.slice(s![..n]).sum();
        rows[[y, 0]] = acc;
        for x in 1..ow {
            acc += line[x + n - 1] - line[x - 1];
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<T>::zeros((oh, ow));
    for x in 0..ow {
        let col = rows.column(x);
        let mut acc: T = col.slice(s![..n]).sum();
        out[[0, x]] = acc;
        for y in 1..oh {
            acc += col[y + n - 1] - col[y - 1];
            out[[y, x]] = acc;
        }
    }
    out
}

struct SsimParts<T> {
    ssim: Array2<T>,
    // partial derivatives of per-pixel SSIM w.r.t. window mean of x, of x², and of x·y
    d_mean: Array2<T>,
    d_sq: Array2<T>,
    d_cross: Array2<T>,
    px: Array2<T>,
    py: Array2<T>,
}

fn ssim_parts<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>, n: usize, eps: T) -> SsimParts<T> {
    let r = n / 2;
    let px = reflect_pad(p, r);
    let py = reflect_pad(g, r);
    let inv = T::one() / T::lit((n * n) as f64);
    let mx = box_sum(&px, n) * inv;
    let my = box_sum(&py, n) * inv;
    let exx = box_sum(&px.mapv(|v| v * v), n) * inv;
    let eyy = box_sum(&py.mapv(|v| v * v), n) * inv;
    let exy = box_sum(&(&px * &py), n) * inv;
    let two = T::lit(2.0);
    let dim = mx.dim();
    let mut ssim = Array2::zeros(dim);
    let mut d_mean = Array2::zeros(dim);
    let mut d_sq = Array2::zeros(dim);
    let mut d_cross = Array2::zeros(dim);
    for idx in ndarray::indices(dim) {
        let (ux, uy) = (mx[idx], my[idx]);
        let sxx = exx[idx] - ux * ux;
        let syy = eyy[idx] - uy * uy;
        let sxy = exy[idx] - ux * uy;
        let a = two * ux * uy + eps;
        let b = two * sxy + eps;
        let c = ux * ux + uy * uy + eps;
        let d = sxx + syy + eps;
        let sv = a * b / (c * d);
        ssim[idx] = sv;
        d_mean[idx] = (two * uy * b - two * uy * a) / (c * d) - sv * (two * ux / c - two * ux / d);
        d_sq[idx] = -sv / d;
        d_cross[idx] = two * a / (c * d);
    }
    SsimParts {
        ssim,
        d_mean,
        d_sq,
        d_cross,
        px,
        py,
    }
}

fn check_ssim_input<T: Scalar>(p: &ArrayView2<T>, g: &ArrayView2<T>, cfg: &LossConfig) -> Result<()> {
    check_shapes(p, g)?;
    let (h, w) = p.dim();
    if h < cfg.ssim_window || w < cfg.ssim_window {
        return Err(invalid(format!(
            "{h}x{w} map smaller than the {n}x{n} ssim window",
            n = cfg.ssim_window
        )));
    }
    Ok(())
}

/// `1 − mean SSIM` over uniform `N × N` windows centred on every pixel, reflect padded.
pub fn ssim_loss<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>, cfg: &LossConfig) -> Result<T> {
    check_ssim_input(&p, &g, cfg)?;
    let parts = ssim_parts(p, g, cfg.ssim_window, T::lit(cfg.ssim_eps));
    Ok(T::one() - parts.ssim.mean().unwrap())
}

pub fn ssim_grad<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>, cfg: &LossConfig) -> Result<Array2<T>> {
    check_ssim_input(&p, &g, cfg)?;
    let n = cfg.ssim_window;
    let r = n / 2;
    let (h, w) = p.dim();
    let parts = ssim_parts(p, g, n, T::lit(cfg.ssim_eps));
    // adjoint of the window sum: every padded cell collects the coefficients
    // of all windows covering it
    let spread = |coef: &Array2<T>| {
        let mut z = Array2::<T>::zeros((h + 2 * (n - 1), w + 2 * (n - 1)));
        z.slice_mut(s![n - 1..n - 1 + h, n - 1..n - 1 + w]).assign(coef);
        box_sum(&z, n)
    };
    let a = spread(&parts.d_mean);
    let b = spread(&parts.d_sq);
    let c = spread(&parts.d_cross);
    let scale = -T::one() / (T::lit((n * n) as f64) * T::lit((h * w) as f64));
    let two = T::lit(2.0);
    let mut grad = Array2::<T>::zeros((h, w));
    for ((y, x), &av) in a.indexed_iter() {
        let xv = parts.px[[y, x]];
        let yv = parts.py[[y, x]];
        let src = (
            reflect(y as isize - r as isize, h),
            reflect(x as isize - r as isize, w),
        );
        grad[src] += scale * (av + two * b[[y, x]] * xv + c[[y, x]] * yv);
    }
    Ok(grad)
}

fn siou_sums<T: Scalar>(p: &ArrayView2<T>, g: &ArrayView2<T>) -> (T, T) {
    let mut inter = T::zero();
    let mut union = T::zero();
    ndarray::Zip::from(p).and(g).for_each(|&pv, &gv| {
        inter += pv * gv;
        union += pv + gv - pv * gv;
    });
    (inter, union)
}

/// `1 − Σpg / (Σ(p + g − pg) + ε)`, defined as 0 when both sums vanish.
pub fn siou_loss<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>) -> Result<T> {
    check_shapes(&p, &g)?;
    let (inter, union) = siou_sums(&p, &g);
    if inter == T::zero() && union == T::zero() {
        return Ok(T::zero());
    }
    Ok(T::one() - inter / (union + T::lit(SIOU_EPS)))
}

pub fn siou_grad<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>) -> Array2<T> {
    let (inter, union) = siou_sums(&p, &g);
    if inter == T::zero() && union == T::zero() {
        return Array2::zeros(p.dim());
    }
    let u = union + T::lit(SIOU_EPS);
    let u2 = u * u;
    g.mapv(|gv| -(gv * u - inter * (T::one() - gv)) / u2)
}

/// Values of the enabled terms of one combined loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub bce: Option<T>,
    pub ssim: Option<T>,
    pub siou: Option<T>,
}

impl<T: Scalar> LossTerms<T> {
    pub fn total(&self) -> T {
        [self.bce, self.ssim, self.siou].iter().flatten().copied().sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, T)> {
        [("wbce", self.bce), ("ssim", self.ssim), ("siou", self.siou)]
            .into_iter()
            .filter_map(|(n, v)| v.map(|v| (n, v)))
    }
}

fn pixel_weights<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>, cfg: &LossConfig) -> Array2<T> {
    if !cfg.weighted_bce {
        return Array2::from_elem(p.dim(), T::one());
    }
    match cfg.weight_reference {
        WeightReference::Label => wbce_weights(g, cfg),
        WeightReference::Prediction => {
            let half = T::lit(0.5);
            let binary = p.mapv(|v| if v >= half { T::one() } else { T::zero() });
            wbce_weights(binary.view(), cfg)
        }
    }
}

/// Sum of the enabled cross-entropy, SSIM and soft-IoU terms.
pub fn combined_loss<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>, cfg: &LossConfig) -> Result<LossTerms<T>> {
    cfg.validate()?;
    check_shapes(&p, &g)?;
    let bce = if cfg.use_bce {
        let w = pixel_weights(p, g, cfg);
        Some(wbce_loss(p, g, w.view())?)
    } else {
        None
    };
    let ssim = if cfg.use_ssim { Some(ssim_loss(p, g, cfg)?) } else { None };
    let siou = if cfg.use_siou { Some(siou_loss(p, g)?) } else { None };
    Ok(LossTerms { bce, ssim, siou })
}

/// Gradient of [`combined_loss`] w.r.t. `p`; pixel weights are held constant.
pub fn combined_grad<T: Scalar>(p: ArrayView2<T>, g: ArrayView2<T>, cfg: &LossConfig) -> Result<Array2<T>> {
    cfg.validate()?;
    check_shapes(&p, &g)?;
    let mut grad = Array2::zeros(p.dim());
    if cfg.use_bce {
        let w = pixel_weights(p, g, cfg);
        grad += &wbce_grad(p, g, w.view());
    }
    if cfg.use_ssim {
        grad += &ssim_grad(p, g, cfg)?;
    }
    if cfg.use_siou {
        grad += &siou_grad(p, g);
    }
    Ok(grad)
}

/// Graph-level objective with a per-output, per-term breakdown.
pub struct TotalLoss<'g, T> {
    pub total: Var<'g, T>,
    /// `("fused.wbce", v)`, `("side3.ssim", v)`, ... averaged over the batch.
    pub terms: Vec<(String, T)>,
}

impl<T: Scalar> TotalLoss<'_, T> {
    pub fn value(&self) -> T {
        self.total.scalar()
    }

    /// First term whose value is not finite.
    pub fn non_finite_term(&self) -> Option<&str> {
        self.terms
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Batch-mean combined loss of one `[B, H, W, 1]` logit map.
fn logit_loss<'g, T: Scalar>(
    logits: Var<'g, T>,
    masks: &ArrayD<T>,
    cfg: &LossConfig,
    prefix: &str,
    terms: &mut Vec<(String, T)>,
) -> Result<Var<'g, T>> {
    let z = logits.value();
    let shape = z.shape().to_vec();
    if shape.len() != 4 || shape[3] != 1 || masks.shape() != &shape[..3] {
        return Err(invalid(format!(
            "logits {shape:?} do not match masks {:?}",
            masks.shape()
        )));
    }
    let (b, h, w) = (shape[0], shape[1], shape[2]);
    let inv_b = T::one() / T::lit(b as f64);
    let mut value = T::zero();
    let mut sums = LossTerms::<T>::default();
    let mut grad = ArrayD::<T>::zeros(IxDyn(&shape));
    for bi in 0..b {
        let zb = z
            .index_axis(Axis(0), bi)
            .into_shape_with_order((h, w))
            .unwrap()
            .to_owned();
        let p = zb.mapv(sigmoid);
        let g = masks.index_axis(Axis(0), bi).into_dimensionality::<ndarray::Ix2>().unwrap();
        let t = combined_loss(p.view(), g, cfg)?;
        value += t.total() * inv_b;
        let add = |acc: &mut Option<T>, v: Option<T>| {
            if let Some(v) = v {
                *acc = Some(acc.unwrap_or(T::zero()) + v * inv_b);
            }
        };
        add(&mut sums.bce, t.bce);
        add(&mut sums.ssim, t.ssim);
        add(&mut sums.siou, t.siou);
        let dp = combined_grad(p.view(), g, cfg)?;
        let dz = &dp * &p.mapv(|v| v * (T::one() - v)) * inv_b;
        grad.index_axis_mut(Axis(0), bi)
            .assign(&dz.into_shape_with_order((h, w, 1)).unwrap());
    }
    terms.extend(sums.named().map(|(n, v)| (format!("{prefix}.{n}"), v)));
    let grad = std::rc::Rc::new(grad);
    Ok(logits.graph().op(
        ArrayD::from_elem(IxDyn(&[]), value),
        &[logits],
        Box::new(move |g, _| {
            let s = *g.iter().next().unwrap();
            vec![Some(grad.mapv(|v| v * s))]
        }),
    ))
}

/// `L = L_fused + Σ α_s L_side_s`, each a combined loss on sigmoid probabilities,
/// averaged over the batch. `masks` is `[B, H, W]` with values in {0, 1}.
pub fn total_loss<'g, T: Scalar>(
    preds: &PredictionSet<'g, T>,
    masks: &ArrayD<T>,
    cfg: &LossConfig,
) -> Result<TotalLoss<'g, T>> {
    cfg.validate()?;
    if preds.side_logits.len() != PYRAMID_LEVELS {
        return Err(invalid(format!(
            "expected {PYRAMID_LEVELS} side outputs, got {}",
            preds.side_logits.len()
        )));
    }
    let mut terms = Vec::new();
    let mut total = logit_loss(preds.fused_logits, masks, cfg, "fused", &mut terms)?;
    for (k, (&side, &alpha)) in preds.side_logits.iter().zip(&cfg.side_weights).enumerate() {
        if alpha == 0.0 {
            continue;
        }
        let l = logit_loss(side, masks, cfg, &format!("side{}", k + 1), &mut terms)?;
        total = total.add(l.scale(T::lit(alpha)));
    }
    Ok(TotalLoss { total, terms })
}
