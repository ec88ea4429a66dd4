use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn, Zip};

use super::{dyn_shape, reduce_to_shape, standard, Tensor, Var};
use crate::scalar::Scalar;

/// Row-granular index map: output row `i` (of `inner` contiguous elements)
/// copies input row `src[i]`, or is zero when `src[i] == GatherMap::NONE`.
///
/// Cyclic shifts, window partitioning, padding, cropping, head splitting and
/// depth-to-space are all instances of this.
#[derive(Clone, Debug)]
pub struct GatherMap {
    pub out_shape: Vec<usize>,
    pub inner: usize,
    pub src: Vec<usize>,
}

impl GatherMap {
    pub const NONE: usize = usize::MAX;

    pub fn new(out_shape: Vec<usize>, inner: usize, src: Vec<usize>) -> Self {
        assert_eq!(
            out_shape.iter().product::<usize>(),
            src.len() * inner,
            "gather map does not cover its output shape"
        );
        GatherMap {
            out_shape,
            inner,
            src,
        }
    }
}

fn grad_view2<T: Scalar>(g: &Tensor<T>, rows: usize, cols: usize) -> Array2<T> {
    standard(g.clone())
        .into_shape_with_order((rows, cols))
        .expect("gradient reshape")
}

fn matmul<T: Scalar>(
    a: &ndarray::ArrayView2<T>,
    b: &ndarray::ArrayView2<T>,
) -> Array2<T> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), a, b, T::zero(), &mut out);
    out
}

/// Batched `op(a) · op(b)` where `op` optionally transposes the last two axes.
pub(crate) fn bmm_raw<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs rank");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs rank");
    let batch = a3.shape()[0];
    assert_eq!(batch, b3.shape()[0], "bmm batch mismatch");
    let (m, k) = if ta {
        (a3.shape()[2], a3.shape()[1])
    } else {
        (a3.shape()[1], a3.shape()[2])
    };
    let (k2, n) = if tb {
        (b3.shape()[2], b3.shape()[1])
    } else {
        (b3.shape()[1], b3.shape()[2])
    };
    assert_eq!(k, k2, "bmm inner dimension mismatch");
    let mut out = Array3::<T>::zeros((batch, m, n));
    for i in 0..batch {
        let av = a3.index_axis(Axis(0), i);
        let bv = b3.index_axis(Axis(0), i);
        let av = if ta { av.reversed_axes() } else { av };
        let bv = if tb { bv.reversed_axes() } else { bv };
        let mut ov = out.index_axis_mut(Axis(0), i);
        general_mat_mul(T::one(), &av, &bv, T::zero(), &mut ov);
    }
    out.into_dyn()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `x · w + b` over the last axis; `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Var<'g, T> {
        let x = self.value();
        let wv = w.value();
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        let xs = x.shape().to_vec();
        assert_eq!(
            *xs.last().unwrap(),
            din,
            "linear: input width {} != weight rows {din}",
            xs.last().unwrap()
        );
        let rows = x.len() / din;
        let x2 = x.view().into_shape_with_order((rows, din)).unwrap();
        let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = matmul(&x2, &w2);
        if let Some(b) = b {
            let bv = b.value();
            let b1 = bv.view().into_shape_with_order(dout).unwrap();
            y += &b1;
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = dout;
        let y = y.into_shape_with_order(dyn_shape(&out_shape)).unwrap();
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.graph.op(
            y,
            &parents,
            Box::new(move |g, needs| {
                let g2 = grad_view2(g, rows, dout);
                let x2 = x.view().into_shape_with_order((rows, din)).unwrap();
                let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::with_capacity(3);
                out.push(needs[0].then(|| {
                    matmul(&g2.view(), &w2.t())
                        .into_shape_with_order(dyn_shape(&xs))
                        .unwrap()
                }));
                out.push(needs[1].then(|| matmul(&x2.t(), &g2.view()).into_dyn()));
                if has_bias {
                    out.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }),
        )
    }

    /// Batched matrix product of rank-3 operands, optionally transposing either side.
    pub fn bmm(self, other: Var<'g, T>, trans_a: bool, trans_b: bool) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let y = bmm_raw(&a, trans_a, &b, trans_b);
        self.graph.op(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                let g = standard(g.clone());
                let ga = needs[0].then(|| {
                    if trans_a {
                        bmm_raw(&b, trans_b, &g, true)
                    } else {
                        bmm_raw(&g, false, &b, !trans_b)
                    }
                });
                let gb = needs[1].then(|| {
                    if trans_b {
                        bmm_raw(&g, true, &a, trans_a)
                    } else {
                        bmm_raw(&a, !trans_a, &g, false)
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise sum with broadcasting (equal ranks).
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let y = standard(&*a + &*b);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.op(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g.clone(), &sa)),
                    needs[1].then(|| reduce_to_shape(g.clone(), &sb)),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let y = standard(&*a - &*b);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.op(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g.clone(), &sa)),
                    needs[1].then(|| reduce_to_shape(g.mapv(|v| -v), &sb)),
                ]
            }),
        )
    }

    /// Elementwise product with broadcasting (equal ranks).
    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let y = standard(&*a * &*b);
        self.graph.op(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(standard(g * &*b), a.shape())),
                    needs[1].then(|| reduce_to_shape(standard(g * &*a), b.shape())),
                ]
            }),
        )
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let y = self.value().mapv(|v| v * s);
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(g.mapv(|v| v * s))]),
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        let x = self.value();
        let y = x.mapv(|v| v.max(T::zero()));
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(&*x).for_each(|gv, &xv| {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                });
                vec![Some(gx)]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let y = Rc::new(self.value().mapv(sigmoid));
        let yv = (*y).clone();
        self.graph.op(
            yv,
            &[self],
            Box::new(move |g, _| {
                let mut gx = g.clone();
                Zip::from(&mut gx)
                    .and(&*y)
                    .for_each(|gv, &s| *gv = *gv * s * (T::one() - s));
                vec![Some(gx)]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g, T> {
        let x = self.value();
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(0.044715);
        let half = T::lit(0.5);
        let y = x.mapv(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()));
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(&*x).for_each(|gv, &v| {
                    let t = (k * (v + c * v * v * v)).tanh();
                    let d = half * (T::one() + t)
                        + half * v * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * v * v);
                    *gv *= d;
                });
                vec![Some(gx)]
            }),
        )
    }

    /// Softmax over the last axis. Entries equal to `-inf` get probability 0.
    pub fn softmax_last(self) -> Var<'g, T> {
        let x = self.value();
        let width = *x.shape().last().unwrap();
        let mut y = (*x).clone();
        for row in y
            .as_slice_mut()
            .expect("softmax input layout")
            .chunks_exact_mut(width)
        {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let y = Rc::new(y);
        let yv = (*y).clone();
        self.graph.op(
            yv,
            &[self],
            Box::new(move |g, _| {
                let g = standard(g.clone());
                let mut gx = g.clone();
                let gs = g.as_slice().unwrap();
                let ys = y.as_slice().unwrap();
                for ((gx_row, g_row), y_row) in gx
                    .as_slice_mut()
                    .unwrap()
                    .chunks_exact_mut(width)
                    .zip(gs.chunks_exact(width))
                    .zip(ys.chunks_exact(width))
                {
                    let dot: T = g_row.iter().zip(y_row).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[C]`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let c = *x.shape().last().unwrap();
        let rows = x.len() / c;
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        let gs = gv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        for (r, row) in x.as_slice().unwrap().chunks_exact(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gs[j] + bs[j];
            }
        }
        let shape = x.shape().to_vec();
        let y = ArrayD::from_shape_vec(dyn_shape(&shape), y).unwrap();
        self.graph.op(
            y,
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let g = standard(g.clone());
                let gsl = g.as_slice().unwrap();
                let gam = gv.as_slice().unwrap();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xhat.len()];
                for r in 0..rows {
                    let gr = &gsl[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_gg = T::zero();
                    let mut mean_ggh = T::zero();
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let gg = gr[j] * gam[j];
                        mean_gg += gg;
                        mean_ggh += gg * hr[j];
                    }
                    mean_gg *= inv_c;
                    mean_ggh *= inv_c;
                    for j in 0..c {
                        dx[r * c + j] = inv_std[r] * (gr[j] * gam[j] - mean_gg - hr[j] * mean_ggh);
                    }
                }
                vec![
                    needs[0].then(|| ArrayD::from_shape_vec(dyn_shape(&shape), dx).unwrap()),
                    needs[1].then(|| Array1::from(dgamma).into_dyn()),
                    needs[2].then(|| Array1::from(dbeta).into_dyn()),
                ]
            }),
        )
    }

    /// Batch normalization over every axis but the last, using batch statistics.
    /// Also returns the batch mean and unbiased batch variance for running-stat updates.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: T,
    ) -> (Var<'g, T>, Array1<T>, Array1<T>) {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().unwrap();
        let n = x.len() / c;
        let x2 = x.view().into_shape_with_order((n, c)).unwrap();
        let inv_n = T::one() / T::lit(n as f64);
        let mean = x2.sum_axis(Axis(0)) * inv_n;
        let centered = &x2 - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) * inv_n;
        let unbiased = if n > 1 {
            &var * (T::lit(n as f64) / T::lit((n - 1) as f64))
        } else {
            var.clone()
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = Rc::new(&centered * &inv_std);
        let gv = gamma.value();
        let bv = beta.value();
        let g1 = gv.view().into_shape_with_order(c).unwrap().to_owned();
        let b1 = bv.view().into_shape_with_order(c).unwrap();
        let y = (&*xhat * &g1 + b1)
            .into_shape_with_order(dyn_shape(&shape))
            .unwrap();
        let out = self.graph.op(
            y,
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let g2 = grad_view2(g, n, c);
                let dgamma = (&g2 * &*xhat).sum_axis(Axis(0));
                let dbeta = g2.sum_axis(Axis(0));
                let dx = needs[0].then(|| {
                    let mg = &dbeta * inv_n;
                    let mgh = &dgamma * inv_n;
                    let scale = &g1 * &inv_std;
                    let dx = (&g2 - &mg - &(&*xhat * &mgh)) * &scale;
                    dx.into_shape_with_order(dyn_shape(&shape)).unwrap()
                });
                vec![dx, needs[1].then(|| dgamma.into_dyn()), needs[2].then(|| dbeta.into_dyn())]
            }),
        );
        (out, mean, unbiased)
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().unwrap();
        let n = x.len() / c;
        let x2 = x.view().into_shape_with_order((n, c)).unwrap();
        let rm = running_mean.view().into_shape_with_order(c).unwrap();
        let inv_std = running_var
            .view()
            .into_shape_with_order(c)
            .unwrap()
            .mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = Rc::new((&x2 - &rm) * &inv_std);
        let gv = gamma.value();
        let bv = beta.value();
        let g1 = gv.view().into_shape_with_order(c).unwrap().to_owned();
        let b1 = bv.view().into_shape_with_order(c).unwrap();
        let y = (&*xhat * &g1 + b1)
            .into_shape_with_order(dyn_shape(&shape))
            .unwrap();
        self.graph.op(
            y,
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let g2 = grad_view2(g, n, c);
                let scale = &g1 * &inv_std;
                vec![
                    needs[0].then(|| {
                        (&g2 * &scale)
                            .into_shape_with_order(dyn_shape(&shape))
                            .unwrap()
                    }),
                    needs[1].then(|| (&g2 * &*xhat).sum_axis(Axis(0)).into_dyn()),
                    needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()),
                ]
            }),
        )
    }

    pub fn gather(self, map: Rc<GatherMap>) -> Var<'g, T> {
        let x = self.value();
        let xs = x.as_slice().expect("gather input layout");
        assert_eq!(xs.len() % map.inner, 0, "gather inner width");
        let inner = map.inner;
        let mut out = vec![T::zero(); map.src.len() * inner];
        for (i, &s) in map.src.iter().enumerate() {
            if s != GatherMap::NONE {
                out[i * inner..(i + 1) * inner].copy_from_slice(&xs[s * inner..(s + 1) * inner]);
            }
        }
        let y = ArrayD::from_shape_vec(dyn_shape(&map.out_shape), out).unwrap();
        let in_shape = x.shape().to_vec();
        let in_len = x.len();
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let g = standard(g.clone());
                let gs = g.as_slice().unwrap();
                let mut gx = vec![T::zero(); in_len];
                for (i, &s) in map.src.iter().enumerate() {
                    if s != GatherMap::NONE {
                        for (d, &v) in gx[s * inner..(s + 1) * inner]
                            .iter_mut()
                            .zip(&gs[i * inner..(i + 1) * inner])
                        {
                            *d += v;
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(dyn_shape(&in_shape), gx).unwrap())]
            }),
        )
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat_last(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let lead: Vec<usize> = values[0].shape()[..values[0].ndim() - 1].to_vec();
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(&v.shape()[..v.ndim() - 1], &lead[..], "concat leading dims");
                *v.shape().last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (v, &w) in values.iter().zip(&widths) {
            let vs = v.as_slice().unwrap();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&vs[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.clone();
        shape.push(total);
        let y = ArrayD::from_shape_vec(dyn_shape(&shape), out).unwrap();
        graph.op(
            y,
            parts,
            Box::new(move |g, needs| {
                let g = standard(g.clone());
                let gs = g.as_slice().unwrap();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (k, &w) in widths.iter().enumerate() {
                    if needs[k] {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&gs[r * total + offset..r * total + offset + w]);
                        }
                        let mut s = lead.clone();
                        s.push(w);
                        grads.push(Some(ArrayD::from_shape_vec(dyn_shape(&s), part).unwrap()));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let y = (*x)
            .clone()
            .into_shape_with_order(dyn_shape(shape))
            .expect("reshape size mismatch");
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    standard(g.clone())
                        .into_shape_with_order(dyn_shape(&in_shape))
                        .unwrap(),
                )]
            }),
        )
    }

    /// Global average over the two spatial axes of a `[B, H, W, C]` grid.
    pub fn mean_spatial(self) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "mean_spatial expects [B,H,W,C]");
        let hw = T::lit((s[1] * s[2]) as f64);
        let y = x
            .sum_axis(Axis(1))
            .sum_axis(Axis(1))
            .mapv(|v| v / hw)
            .into_shape_with_order(IxDyn(&[s[0], 1, 1, s[3]]))
            .unwrap();
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let scaled = g.mapv(|v| v / hw);
                vec![Some(standard(
                    scaled.broadcast(IxDyn(&s)).unwrap().to_owned(),
                ))]
            }),
        )
    }

    /// 3×3 average pooling, stride 1, zero padding 1, always dividing by 9.
    pub fn avg_pool3(self) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "avg_pool3 expects [B,H,W,C]");
        let y = box3(&x, &s);
        self.graph.op(
            y,
            &[self],
            // zero-padded 3×3 box averaging is self-adjoint
            Box::new(move |g, _| vec![Some(box3(&standard(g.clone()), &s))]),
        )
    }

    /// Bilinear resampling of a `[B, h, w, C]` grid to `[B, out_h, out_w, C]`
    /// with half-pixel centers. `scale_h`/`scale_w` are input pixels per output
    /// pixel (`1/stride` when upsampling a stride-`s` grid).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize, scale_h: f64, scale_w: f64) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "resize_bilinear expects [B,H,W,C]");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let taps_h = Rc::new(bilinear_taps::<T>(h, out_h, scale_h));
        let taps_w = Rc::new(bilinear_taps::<T>(w, out_w, scale_w));
        let xs = x.as_slice().unwrap();
        let mut out = vec![T::zero(); b * out_h * out_w * c];
        for bi in 0..b {
            for (oy, &(y0, y1, ly)) in taps_h.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in taps_w.iter().enumerate() {
                    let o = ((bi * out_h + oy) * out_w + ox) * c;
                    let corners = [
                        (y0, x0, (T::one() - ly) * (T::one() - lx)),
                        (y0, x1, (T::one() - ly) * lx),
                        (y1, x0, ly * (T::one() - lx)),
                        (y1, x1, ly * lx),
                    ];
                    for (yy, xx, wgt) in corners {
                        let i = ((bi * h + yy) * w + xx) * c;
                        for ch in 0..c {
                            out[o + ch] += wgt * xs[i + ch];
                        }
                    }
                }
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[b, out_h, out_w, c]), out).unwrap();
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let g = standard(g.clone());
                let gs = g.as_slice().unwrap();
                let mut gx = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for (oy, &(y0, y1, ly)) in taps_h.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in taps_w.iter().enumerate() {
                            let o = ((bi * out_h + oy) * out_w + ox) * c;
                            let corners = [
                                (y0, x0, (T::one() - ly) * (T::one() - lx)),
                                (y0, x1, (T::one() - ly) * lx),
                                (y1, x0, ly * (T::one() - lx)),
                                (y1, x1, ly * lx),
                            ];
                            for (yy, xx, wgt) in corners {
                                let i = ((bi * h + yy) * w + xx) * c;
                                for ch in 0..c {
                                    gx[i + ch] += wgt * gs[o + ch];
                                }
                            }
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, h, w, c]), gx).unwrap())]
            }),
        )
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let v = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(dyn_shape(&shape), v))]
            }),
        )
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = T::lit(self.value().len() as f64);
        self.sum_all().scale(T::one() / n)
    }
}

fn box3<T: Scalar>(x: &Tensor<T>, s: &[usize]) -> Tensor<T> {
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let xs = x.as_slice().unwrap();
    let ninth = T::one() / T::lit(9.0);
    let mut out = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let o = ((bi * h + i) * w + j) * c;
                for di in i.saturating_sub(1)..(i + 2).min(h) {
                    for dj in j.saturating_sub(1)..(j + 2).min(w) {
                        let src = ((bi * h + di) * w + dj) * c;
                        for ch in 0..c {
                            out[o + ch] += xs[src + ch];
                        }
                    }
                }
                for v in &mut out[o..o + c] {
                    *v *= ninth;
                }
            }
        }
    }
    ArrayD::from_shape_vec(dyn_shape(s), out).unwrap()
}

/// Per output index: (low tap, high tap, weight of high tap).
fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize, scale: f64) -> Vec<(usize, usize, T)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, T::lit(l))
        })
        .collect()
}
