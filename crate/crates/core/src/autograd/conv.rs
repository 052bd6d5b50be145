//! Spatial kernels: im2col convolution, pooling and resampling.

use super::{Scalar, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

pub(super) fn out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

pub(super) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = dims4(x.shape());
    let (o, ci, kh, kw) = dims4(w.shape());
    assert_eq!(c, ci, "conv2d channel mismatch: input {c}, kernel {ci}");
    assert_eq!(kh, kw, "square kernels only");
    let k = kh;
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let w2 = ArrayView2::from_shape((o, c * k * k), w.as_slice().unwrap()).unwrap();
    let mut out = vec![T::zero(); n * o * ho * wo];
    let mut cols = if is_pointwise(k, stride, pad) {
        Vec::new()
    } else {
        vec![T::zero(); c * k * k * ho * wo]
    };
    for b in 0..n {
        let xb = &xs[b * c * h * wd..(b + 1) * c * h * wd];
        let colv = if is_pointwise(k, stride, pad) {
            ArrayView2::from_shape((c, h * wd), xb).unwrap()
        } else {
            im2col(xb, c, h, wd, k, stride, pad, ho, wo, &mut cols);
            ArrayView2::from_shape((c * k * k, ho * wo), &cols[..]).unwrap()
        };
        let mut ob =
            ArrayViewMut2::from_shape((o, ho * wo), &mut out[b * o * ho * wo..(b + 1) * o * ho * wo])
                .unwrap();
        general_mat_mul(T::one(), &w2, &colv, T::zero(), &mut ob);
    }
    ArrayD::from_shape_vec(IxDyn(&[n, o, ho, wo]), out).unwrap()
}

#[allow(clippy::type_complexity)]
pub(super) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = dims4(x.shape());
    let (o, _, k, _) = dims4(w.shape());
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let g = g.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    let w2 = ArrayView2::from_shape((o, c * k * k), w.as_slice().unwrap()).unwrap();
    let pointwise = is_pointwise(k, stride, pad);

    let mut gw = vec![T::zero(); o * c * k * k];
    let mut gx = if need_x {
        vec![T::zero(); n * c * h * wd]
    } else {
        Vec::new()
    };
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    let mut dcols = vec![T::zero(); c * k * k * ho * wo];
    for b in 0..n {
        let gb = ArrayView2::from_shape((o, ho * wo), &gs[b * o * ho * wo..(b + 1) * o * ho * wo])
            .unwrap();
        if need_w {
            let xb = &xs[b * c * h * wd..(b + 1) * c * h * wd];
            let colv = if pointwise {
                ArrayView2::from_shape((c, h * wd), xb).unwrap()
            } else {
                im2col(xb, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                ArrayView2::from_shape((c * k * k, ho * wo), &cols[..]).unwrap()
            };
            let mut gwv = ArrayViewMut2::from_shape((o, c * k * k), &mut gw[..]).unwrap();
            general_mat_mul(T::one(), &gb, &colv.t(), T::one(), &mut gwv);
        }
        if need_x {
            let dst = &mut gx[b * c * h * wd..(b + 1) * c * h * wd];
            if pointwise {
                let mut dv = ArrayViewMut2::from_shape((c, h * wd), dst).unwrap();
                general_mat_mul(T::one(), &w2.t(), &gb, T::zero(), &mut dv);
            } else {
                {
                    let mut dv =
                        ArrayViewMut2::from_shape((c * k * k, ho * wo), &mut dcols[..]).unwrap();
                    general_mat_mul(T::one(), &w2.t(), &gb, T::zero(), &mut dv);
                }
                col2im(&dcols, c, h, wd, k, stride, pad, ho, wo, dst);
            }
        }
    }
    let gx = need_x.then(|| ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), gx).unwrap());
    let gw = need_w.then(|| ArrayD::from_shape_vec(IxDyn(&[o, c, k, k]), gw).unwrap());
    (gx, gw)
}

fn lead_and_hw(shape: &[usize]) -> (usize, usize, usize) {
    let nd = shape.len();
    assert!(nd >= 2, "spatial op on tensor of shape {shape:?}");
    let lead: usize = shape[..nd - 2].iter().product();
    (lead, shape[nd - 2], shape[nd - 1])
}

fn with_hw(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let nd = s.len();
    s[nd - 2] = h;
    s[nd - 1] = w;
    s
}

pub(super) fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (lead, h, w) = lead_and_hw(x.shape());
    assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
    let (ho, wo) = (h / k, w / k);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let scale = T::one() / T::from_usize(k * k).unwrap();
    let mut out = vec![T::zero(); lead * ho * wo];
    for p in 0..lead {
        let src = &xs[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                let o = (y / k) * wo + xx / k;
                dst[o] = dst[o] + src[y * w + xx];
            }
        }
        for d in dst.iter_mut() {
            *d = *d * scale;
        }
    }
    ArrayD::from_shape_vec(IxDyn(&with_hw(x.shape(), ho, wo)), out).unwrap()
}

pub(super) fn avg_pool_backward<T: Scalar>(g: &Tensor<T>, k: usize) -> Tensor<T> {
    let up = upsample_nearest_forward(g, k);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    up.mapv(|e| e * scale)
}

pub(super) fn upsample_nearest_forward<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (lead, h, w) = lead_and_hw(x.shape());
    let (ho, wo) = (h * f, w * f);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![T::zero(); lead * ho * wo];
    for p in 0..lead {
        let src = &xs[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            let row = &src[(y / f) * w..(y / f + 1) * w];
            for (xx, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                *d = row[xx / f];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&with_hw(x.shape(), ho, wo)), out).unwrap()
}

pub(super) fn upsample_nearest_backward<T: Scalar>(g: &Tensor<T>, f: usize) -> Tensor<T> {
    let (lead, ho, wo) = lead_and_hw(g.shape());
    let (h, w) = (ho / f, wo / f);
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let mut out = vec![T::zero(); lead * h * w];
    for p in 0..lead {
        let src = &gs[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let o = (y / f) * w + xx / f;
                dst[o] = dst[o] + src[y * wo + xx];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&with_hw(g.shape(), h, w)), out).unwrap()
}

/// Source taps for half-pixel bilinear sampling: (i0, i1, weight of i1).
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

pub(super) fn bilinear_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (lead, h, w) = lead_and_hw(x.shape());
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![T::zero(); lead * oh * ow];
    for p in 0..lead {
        let src = &xs[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy).unwrap();
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx).unwrap();
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + xx] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&with_hw(x.shape(), oh, ow)), out).unwrap()
}

pub(super) fn bilinear_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (lead, h, w) = lead_and_hw(in_shape);
    let (_, oh, ow) = lead_and_hw(g.shape());
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let g = g.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let mut out = vec![T::zero(); lead * h * w];
    for p in 0..lead {
        let src = &gs[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy).unwrap();
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx).unwrap();
                let v = src[y * ow + xx];
                let (a, b) = (v * (T::one() - fy), v * fy);
                dst[y0 * w + x0] = dst[y0 * w + x0] + a * (T::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + a * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + b * (T::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + b * fx;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(in_shape), out).unwrap()
}
