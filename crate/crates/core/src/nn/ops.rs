//! Parameter-free layers: activations, pooling, resizing, channel plumbing,
//! padding and softmax.

use crate::error::{bail, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU backward from the forward *output*.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// LeakyReLU backward from the forward output (sign is preserved for slope > 0).
pub fn leaky_relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { g * s })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// 2×2 max pooling with stride 2. Returns the argmax offsets for backward.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = (h / 2, w / 2);
    let planes = par::map_range(x.n() * x.c(), |i| {
        let src = &x.data()[i * h * w..(i + 1) * h * w];
        let mut out = Vec::with_capacity(oh * ow);
        let mut idx = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                out.push(src[best]);
                idx.push(best as u32);
            }
        }
        (out, idx)
    });
    let mut data = Vec::with_capacity(x.n() * x.c() * oh * ow);
    let mut indices = Vec::with_capacity(data.capacity());
    for (o, i) in planes {
        data.extend(o);
        indices.extend(i);
    }
    (
        Tensor::from_vec([x.n(), x.c(), oh, ow], data).expect("pool shape"),
        indices,
    )
}

pub fn max_pool2_backward<T: Scalar>(indices: &[u32], dy: &Tensor<T>, in_hw: (usize, usize)) -> Tensor<T> {
    let (h, w) = in_hw;
    let mut dx = Tensor::zeros([dy.n(), dy.c(), h, w]);
    let op = dy.plane_len();
    par::for_each_chunk_mut(dx.data_mut(), h * w, |i, plane| {
        let g = &dy.data()[i * op..(i + 1) * op];
        let id = &indices[i * op..(i + 1) * op];
        for (&j, &v) in id.iter().zip(g) {
            plane[j as usize] += v;
        }
    });
    dx
}

/// Source taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Clone, Debug)]
struct AxisTaps {
    i0: Vec<usize>,
    i1: Vec<usize>,
    w0: Vec<f64>,
    w1: Vec<f64>,
}

impl AxisTaps {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut t = AxisTaps {
            i0: Vec::with_capacity(out_len),
            i1: Vec::with_capacity(out_len),
            w0: Vec::with_capacity(out_len),
            w1: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            t.i0.push(i0);
            t.i1.push(i1);
            t.w0.push(1.0 - l1);
            t.w1.push(l1);
        }
        t
    }
}

/// Bilinear resize of one plane (half-pixel centres, edge clamped).
pub fn resize_plane<T: Scalar>(src: &[T], ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = AxisTaps::new(ih, oh);
    let tx = AxisTaps::new(iw, ow);
    resize_plane_with(src, iw, &ty, &tx)
}

fn resize_plane_with<T: Scalar>(src: &[T], iw: usize, ty: &AxisTaps, tx: &AxisTaps) -> Vec<T> {
    let (oh, ow) = (ty.i0.len(), tx.i0.len());
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let r0 = &src[ty.i0[oy] * iw..(ty.i0[oy] + 1) * iw];
        let r1 = &src[ty.i1[oy] * iw..(ty.i1[oy] + 1) * iw];
        let (wy0, wy1) = (T::of(ty.w0[oy]), T::of(ty.w1[oy]));
        for ox in 0..ow {
            let (a, b) = (tx.i0[ox], tx.i1[ox]);
            let (wx0, wx1) = (T::of(tx.w0[ox]), T::of(tx.w1[ox]));
            out.push(wy0 * (wx0 * r0[a] + wx1 * r0[b]) + wy1 * (wx0 * r1[a] + wx1 * r1[b]));
        }
    }
    out
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (ih, iw) = (x.h(), x.w());
    if (ih, iw) == (oh, ow) {
        return x.clone();
    }
    let ty = AxisTaps::new(ih, oh);
    let tx = AxisTaps::new(iw, ow);
    let planes = par::map_range(x.n() * x.c(), |i| {
        resize_plane_with(&x.data()[i * ih * iw..(i + 1) * ih * iw], iw, &ty, &tx)
    });
    Tensor::from_samples([x.c(), oh, ow], regroup(planes, x.c()))
}

pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, ih: usize, iw: usize) -> Tensor<T> {
    let (oh, ow) = (dy.h(), dy.w());
    if (ih, iw) == (oh, ow) {
        return dy.clone();
    }
    let ty = AxisTaps::new(ih, oh);
    let tx = AxisTaps::new(iw, ow);
    let mut dx = Tensor::zeros([dy.n(), dy.c(), ih, iw]);
    par::for_each_chunk_mut(dx.data_mut(), ih * iw, |i, plane| {
        let g = &dy.data()[i * oh * ow..(i + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = (ty.i0[oy], ty.i1[oy]);
            let (wy0, wy1) = (T::of(ty.w0[oy]), T::of(ty.w1[oy]));
            for ox in 0..ow {
                let v = g[oy * ow + ox];
                let (x0, x1) = (tx.i0[ox], tx.i1[ox]);
                let (wx0, wx1) = (T::of(tx.w0[ox]), T::of(tx.w1[ox]));
                plane[y0 * iw + x0] += v * wy0 * wx0;
                plane[y0 * iw + x1] += v * wy0 * wx1;
                plane[y1 * iw + x0] += v * wy1 * wx0;
                plane[y1 * iw + x1] += v * wy1 * wx1;
            }
        }
    });
    dx
}

fn regroup<T: Scalar>(planes: Vec<Vec<T>>, c: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut it = planes.into_iter();
    loop {
        let mut sample = Vec::new();
        for _ in 0..c {
            match it.next() {
                Some(p) => sample.extend(p),
                None => return out,
            }
        }
        out.push(sample);
    }
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.n() != b.n() || a.h() != b.h() || a.w() != b.w() {
        bail!(Shape, "concat: {:?} vs {:?}", a.shape(), b.shape());
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for n in 0..a.n() {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec([a.n(), a.c() + b.c(), a.h(), a.w()], data)
}

pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let mut a = Vec::with_capacity(n * first * h * w);
    let mut b = Vec::with_capacity(n * (c - first) * h * w);
    for s in 0..n {
        let d = x.sample(s);
        a.extend_from_slice(&d[..first * h * w]);
        b.extend_from_slice(&d[first * h * w..]);
    }
    (
        Tensor::from_vec([n, first, h, w], a).expect("split"),
        Tensor::from_vec([n, c - first, h, w], b).expect("split"),
    )
}

fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if len == 1 {
        return 0;
    }
    while i < 0 || i >= len {
        if i < 0 {
            i = -i;
        }
        if i >= len {
            i = 2 * (len - 1) - i;
        }
    }
    i as usize
}

/// Reflection padding (edge pixel not repeated).
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, top: usize, bottom: usize, left: usize, right: usize) -> Tensor<T> {
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut y = Tensor::zeros([x.n(), x.c(), oh, ow]);
    par::for_each_chunk_mut(y.data_mut(), oh * ow, |i, plane| {
        let src = &x.data()[i * h * w..(i + 1) * h * w];
        for oy in 0..oh {
            let sy = reflect(oy as isize - top as isize, h);
            for ox in 0..ow {
                let sx = reflect(ox as isize - left as isize, w);
                plane[oy * ow + ox] = src[sy * w + sx];
            }
        }
    });
    y
}

pub fn crop<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    let (ih, iw) = (x.h(), x.w());
    let mut y = Tensor::zeros([x.n(), x.c(), h, w]);
    par::for_each_chunk_mut(y.data_mut(), h * w, |i, plane| {
        let src = &x.data()[i * ih * iw..(i + 1) * ih * iw];
        for r in 0..h {
            plane[r * w..(r + 1) * w].copy_from_slice(&src[(r + top) * iw + left..(r + top) * iw + left + w]);
        }
    });
    y
}

/// Adjoint of [`crop`]: embeds `dy` in a zero tensor of the original size.
pub fn crop_backward<T: Scalar>(dy: &Tensor<T>, top: usize, left: usize, ih: usize, iw: usize) -> Tensor<T> {
    let (h, w) = (dy.h(), dy.w());
    let mut dx = Tensor::zeros([dy.n(), dy.c(), ih, iw]);
    par::for_each_chunk_mut(dx.data_mut(), ih * iw, |i, plane| {
        let src = &dy.data()[i * h * w..(i + 1) * h * w];
        for r in 0..h {
            plane[(r + top) * iw + left..(r + top) * iw + left + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
    });
    dx
}

/// Channel-wise softmax and log-softmax of `logits`.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (c, plane) = (logits.c(), logits.plane_len());
    let per_sample = par::map_range(logits.n(), |n| {
        let x = logits.sample(n);
        let mut p = vec![T::zero(); c * plane];
        let mut lp = vec![T::zero(); c * plane];
        for px in 0..plane {
            let mut m = x[px];
            for k in 1..c {
                m = m.max(x[k * plane + px]);
            }
            let mut s = T::zero();
            for k in 0..c {
                s += (x[k * plane + px] - m).exp();
            }
            let lse = m + s.ln();
            for k in 0..c {
                let l = x[k * plane + px] - lse;
                lp[k * plane + px] = l;
                p[k * plane + px] = l.exp();
            }
        }
        (p, lp)
    });
    let (ps, lps): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    let chw = [c, logits.h(), logits.w()];
    (Tensor::from_samples(chw, ps), Tensor::from_samples(chw, lps))
}

/// Softmax backward: `dz = p ⊙ (dp − Σ_c p·dp)`.
pub fn softmax_backward<T: Scalar>(p: &Tensor<T>, dp: &Tensor<T>) -> Tensor<T> {
    let (c, plane) = (p.c(), p.plane_len());
    let per_sample = par::map_range(p.n(), |n| {
        let ps = p.sample(n);
        let g = dp.sample(n);
        let mut dz = vec![T::zero(); c * plane];
        for px in 0..plane {
            let mut dot = T::zero();
            for k in 0..c {
                dot += ps[k * plane + px] * g[k * plane + px];
            }
            for k in 0..c {
                let j = k * plane + px;
                dz[j] = ps[j] * (g[j] - dot);
            }
        }
        dz
    });
    Tensor::from_samples([c, p.h(), p.w()], per_sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::from_vec([1, 1, 3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        assert_eq!(resize_bilinear(&x, 3, 4), x);
        let c = Tensor::full([1, 2, 5, 7], 0.3f64);
        let y = resize_bilinear(&c, 11, 3);
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn resize_backward_is_adjoint() {
        // <R x, g> == <x, R^T g>
        let x = Tensor::from_vec([1, 1, 3, 5], (0..15).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap();
        let g = Tensor::from_vec([1, 1, 8, 6], (0..48).map(|v| (v as f64 * 0.3).cos()).collect()).unwrap();
        let rx = resize_bilinear(&x, 8, 6);
        let rtg = resize_bilinear_backward(&g, 3, 5);
        let lhs: f64 = rx.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(rtg.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn reflect_pad_then_crop_roundtrips() {
        let x = Tensor::from_vec([1, 1, 4, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let p = reflect_pad(&x, 2, 1, 1, 2);
        assert_eq!(p.shape(), [1, 1, 7, 6]);
        assert_eq!(*p.at(0, 0, 0, 1), *x.at(0, 0, 2, 0));
        assert_eq!(crop(&p, 2, 1, 4, 3), x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = Tensor::from_vec([2, 3, 2, 2], (0..24).map(|v| (v as f64) * 0.9 - 7.0).collect()).unwrap();
        let (p, lp) = softmax_channels(&z);
        for n in 0..2 {
            for px in 0..4 {
                let s: f64 = (0..3).map(|c| p.plane(n, c)[px]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                for c in 0..3 {
                    assert!((lp.plane(n, c)[px].exp() - p.plane(n, c)[px]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, idx) = max_pool2(&x);
        assert_eq!(y.data(), &[4.0]);
        let dx = max_pool2_backward(&idx, &Tensor::full([1, 1, 1, 1], 1.0), (2, 2));
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
