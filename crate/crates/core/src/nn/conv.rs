//! 2D convolution via im2col + gemm.

use crate::error::{bail, Result};
use crate::nn::params::{he_normal, Grads, ParamId, ParamKind, ParamSet};
use crate::par;
use crate::seed::Rng;
use crate::tensor::{gemm, Op, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn same3x3(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
            dilation: 1,
        }
    }

    fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.out_len(h), self.out_len(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => bail!(
                Shape,
                "input {}x{} too small for kernel {} (dilation {}, padding {})",
                h,
                w,
                self.kernel,
                self.dilation,
                self.padding
            ),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn param_count(&self, bias: bool) -> usize {
        self.out_ch * self.patch_len() + if bias { self.out_ch } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub geom: ConvGeometry,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        geom: ConvGeometry,
        bias: bool,
        rng: &mut Rng,
        gain: f64,
    ) -> Self {
        let k = geom.kernel;
        let w = he_normal(rng, geom.out_ch * geom.patch_len(), geom.patch_len(), gain);
        let weight = ps.add(
            &format!("{name}.weight"),
            &[geom.out_ch, geom.in_ch, k, k],
            ParamKind::Trainable,
            w,
        );
        let bias = bias.then(|| {
            ps.add(
                &format!("{name}.bias"),
                &[geom.out_ch],
                ParamKind::Trainable,
                vec![0.0; geom.out_ch],
            )
        });
        Self { geom, weight, bias }
    }

    fn im2col<T: Scalar>(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let g = &self.geom;
        let k = g.kernel;
        let mut col = vec![T::zero(); g.patch_len() * oh * ow];
        for ci in 0..g.in_ch {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        let off = (kx * g.dilation) as isize - g.padding as isize;
                        if g.stride == 1 {
                            // contiguous run of valid columns
                            let lo = (-off).max(0) as usize;
                            let hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + off) as usize;
                                out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = (ox * g.stride) as isize + off;
                                if ix >= 0 && ix < w as isize {
                                    *o = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
        let g = &self.geom;
        let k = g.kernel;
        let mut x = vec![T::zero(); g.in_ch * h * w];
        for ci in 0..g.in_ch {
            let plane = &mut x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let s = &src[oy * ow..(oy + 1) * ow];
                        let off = (kx * g.dilation) as isize - g.padding as isize;
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + off;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom;
        if x.c() != g.in_ch {
            bail!(Shape, "conv expects {} channels, got {}", g.in_ch, x.c());
        }
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = g.out_size(h, w)?;
        let weight = ps.get(self.weight);
        let bias = self.bias.map(|b| ps.get(b));
        let outs = par::map_range(x.n(), |n| {
            let xs = x.sample(n);
            let mut y = vec![T::zero(); g.out_ch * oh * ow];
            if g.is_pointwise() {
                gemm(g.out_ch, g.in_ch, oh * ow, weight, Op::N, xs, Op::N, T::zero(), &mut y);
            } else {
                let col = self.im2col(xs, h, w, oh, ow);
                gemm(g.out_ch, g.patch_len(), oh * ow, weight, Op::N, &col, Op::N, T::zero(), &mut y);
            }
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
            y
        });
        Ok(Tensor::from_samples([g.out_ch, oh, ow], outs))
    }

    /// Backpropagates `dy`. Parameter gradients are accumulated into `grads`
    /// when given; the input gradient is returned when `need_dx`.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut Grads<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let g = self.geom;
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = (dy.h(), dy.w());
        let weight = ps.get(self.weight);
        let want_params = grads.is_some();
        let kk = g.patch_len();
        let per_sample = par::map_range(x.n(), |n| {
            let xs = x.sample(n);
            let dys = dy.sample(n);
            let col = if g.is_pointwise() {
                None
            } else {
                Some(self.im2col(xs, h, w, oh, ow))
            };
            let col_ref: &[T] = col.as_deref().unwrap_or(xs);
            let dw = want_params.then(|| {
                let mut dw = vec![T::zero(); g.out_ch * kk];
                gemm(g.out_ch, oh * ow, kk, dys, Op::N, col_ref, Op::T, T::zero(), &mut dw);
                let db: Vec<T> = dys.chunks(oh * ow).map(|p| p.iter().copied().sum()).collect();
                (dw, db)
            });
            let dx = need_dx.then(|| {
                let mut dcol = vec![T::zero(); kk * oh * ow];
                gemm(kk, g.out_ch, oh * ow, weight, Op::T, dys, Op::N, T::zero(), &mut dcol);
                if g.is_pointwise() {
                    dcol
                } else {
                    self.col2im(&dcol, h, w, oh, ow)
                }
            });
            (dw, dx)
        });
        let mut dxs = Vec::new();
        let mut grads = grads;
        for (dw, dx) in per_sample {
            if let (Some(gr), Some((dw, db))) = (grads.as_deref_mut(), dw) {
                gr.accumulate(self.weight, &dw);
                if let Some(b) = self.bias {
                    gr.accumulate(b, &db);
                }
            }
            if let Some(dx) = dx {
                dxs.push(dx);
            }
        }
        need_dx.then(|| Tensor::from_samples([g.in_ch, h, w], dxs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    /// Direct 7-loop convolution.
    fn naive(x: &Tensor<f64>, wt: &[f64], b: Option<&[f64]>, g: ConvGeometry) -> Tensor<f64> {
        let (oh, ow) = g.out_size(x.h(), x.w()).unwrap();
        let mut y = Tensor::zeros([x.n(), g.out_ch, oh, ow]);
        let k = g.kernel;
        for n in 0..x.n() {
            for co in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.map_or(0.0, |b| b[co]);
                        for ci in 0..g.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h() && (ix as usize) < x.w() {
                                        s += wt[((co * g.in_ch + ci) * k + ky) * k + kx]
                                            * x.at(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let idx = ((n * g.out_ch + co) * oh + oy) * ow + ox;
                        y.data_mut()[idx] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let geoms = [
            ConvGeometry::same3x3(3, 4),
            ConvGeometry { in_ch: 2, out_ch: 3, kernel: 4, stride: 2, padding: 1, dilation: 1 },
            ConvGeometry { in_ch: 2, out_ch: 2, kernel: 3, stride: 1, padding: 3, dilation: 3 },
            ConvGeometry { in_ch: 3, out_ch: 2, kernel: 1, stride: 1, padding: 0, dilation: 1 },
        ];
        for g in geoms {
            let mut ps = ParamSet::<f64>::new();
            let mut rng = rng_from(3);
            let conv = Conv2d::new(&mut ps, "c", g, true, &mut rng, 1.0);
            ps.get_mut(conv.bias.unwrap()).iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
            let data: Vec<f64> = (0..2 * g.in_ch * 9 * 7).map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.6).collect();
            let x = Tensor::from_vec([2, g.in_ch, 9, 7], data).unwrap();
            let y = conv.forward(&ps, &x).unwrap();
            let r = naive(&x, ps.get(conv.weight), Some(ps.get(conv.bias.unwrap())), g);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn output_size_rule() {
        let g = ConvGeometry { in_ch: 1, out_ch: 1, kernel: 4, stride: 2, padding: 1, dilation: 1 };
        assert_eq!(g.out_size(304, 304).unwrap(), (152, 152));
        assert_eq!(g.out_size(19, 19).unwrap(), (9, 9));
        assert!(g.out_size(1, 1).is_err());
    }
}
