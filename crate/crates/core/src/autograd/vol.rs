//! Volumetric operations on `[channels, depth, height, width]` tensors.

use super::Var;
use crate::tensor::{gemm, Float, MatMut, MatRef, Tensor};
use crate::tokenizer::{abs_max_argmax, GRID};

/// Upper bound on im2col buffer elements; larger convolutions are chunked.
const IM2COL_BUDGET: usize = 1 << 22;

fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected [C, D, H, W], got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn n_out(&self) -> usize {
        self.out.iter().product()
    }

    /// Output columns per im2col chunk; always whole output lines so the
    /// copies below run along contiguous rows.
    fn chunk(&self) -> usize {
        let ow = self.out[2];
        let lines = (IM2COL_BUDGET / (self.rows() * ow)).max(1);
        (lines * ow).min(self.n_out())
    }

    /// Output columns `[lo, hi)` along the width whose tap `kw` lands inside
    /// the input.
    fn w_range(&self, kw: usize) -> (usize, usize) {
        let (s, p, w, ow) = (self.stride, self.pad, self.inp[2], self.out[2]);
        let lo = if kw >= p { 0 } else { (p - kw).div_ceil(s) };
        let hi = if w + p > kw { ((w + p - kw - 1) / s + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Visits every (row, line) of the column matrix for output columns
    /// `[n0, n1)`: `f(row_slice_range, input_offset_of_first_valid, lo, hi)`
    /// where the input offset is `None` for lines entirely in the padding.
    fn for_each_line(&self, n0: usize, n1: usize, mut f: impl FnMut(usize, Option<usize>, usize, usize)) {
        let nc = n1 - n0;
        let [d, h, w] = self.inp;
        let [_, oh, ow] = self.out;
        debug_assert!(n0 % ow == 0 && n1 % ow == 0);
        let (l0, l1) = (n0 / ow, n1 / ow);
        let (s, p, k) = (self.stride, self.pad as isize, self.k);
        let mut r = 0;
        for ci in 0..self.cin {
            let base = ci * d * h * w;
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let (lo, hi) = self.w_range(kw);
                        for line in l0..l1 {
                            let at = r * nc + (line - l0) * ow;
                            let z = ((line / oh) * s + kd) as isize - p;
                            let y = ((line % oh) * s + kh) as isize - p;
                            if z < 0 || y < 0 || z as usize >= d || y as usize >= h || lo == hi {
                                f(at, None, lo, hi);
                            } else {
                                let x0 = lo * s + kw - self.pad;
                                f(at, Some(base + (z as usize * h + y as usize) * w + x0), lo, hi);
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    fn im2col<T: Float>(&self, x: &[T], n0: usize, n1: usize, cols: &mut [T]) {
        let (ow, s) = (self.out[2], self.stride);
        self.for_each_line(n0, n1, |at, src, lo, hi| {
            let dst = &mut cols[at..at + ow];
            match src {
                None => dst.fill(T::zero()),
                Some(src) => {
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&x[src..src + hi - lo]);
                    } else {
                        for (i, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = x[src + i * s];
                        }
                    }
                }
            }
        });
    }

    fn col2im<T: Float>(&self, cols: &[T], n0: usize, n1: usize, gx: &mut [T]) {
        let s = self.stride;
        self.for_each_line(n0, n1, |at, src, lo, hi| {
            if let Some(src) = src {
                let row = &cols[at + lo..at + hi];
                if s == 1 {
                    for (g, &v) in gx[src..src + hi - lo].iter_mut().zip(row) {
                        *g += v;
                    }
                } else {
                    for (i, &v) in row.iter().enumerate() {
                        gx[src + i * s] += v;
                    }
                }
            }
        });
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<'g, T: Float> Var<'g, T> {
    /// 3D convolution with a cubic kernel, symmetric zero padding and bias.
    /// `self: [cin, D, H, W]`, `w: [cout, cin, k, k, k]`, `b: [cout]`.
    pub fn conv3d(self, w: Var<'g, T>, b: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let [cin, d, h, wd] = dims4(x.shape());
        let ws = wv.shape();
        assert_eq!(ws.len(), 5, "conv weight rank");
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv weight cin");
        assert_eq!(bv.shape(), &[cout], "conv bias");
        assert!(d + 2 * pad >= k && h + 2 * pad >= k && wd + 2 * pad >= k, "conv input too small");
        let geom = ConvGeom {
            cin,
            k,
            stride,
            pad,
            inp: [d, h, wd],
            out: [
                conv_out_len(d, k, stride, pad),
                conv_out_len(h, k, stride, pad),
                conv_out_len(wd, k, stride, pad),
            ],
        };
        let n = geom.n_out();
        let rows = geom.rows();
        let chunk = geom.chunk();
        let mut out = Tensor::zeros(&[cout, geom.out[0], geom.out[1], geom.out[2]]);
        {
            let od = out.data_mut();
            for (c, row) in od.chunks_mut(n).enumerate() {
                row.fill(bv.data()[c]);
            }
            let mut cols = vec![T::zero(); rows * chunk];
            let mut n0 = 0;
            while n0 < n {
                let n1 = (n0 + chunk).min(n);
                let nc = n1 - n0;
                geom.im2col(x.data(), n0, n1, &mut cols[..rows * nc]);
                gemm(
                    T::one(),
                    MatRef::new(wv.data(), cout, rows),
                    MatRef::new(&cols[..rows * nc], rows, nc),
                    T::one(),
                    MatMut::strided(od, n0, cout, nc, n, 1),
                );
                n0 = n1;
            }
        }
        self.graph.op(&[self, w, b], out, move |ctx| {
            let (x, wv, g) = (ctx.input(0), ctx.input(1), ctx.grad.data());
            let mut gx = ctx.needs[0].then(|| Tensor::zeros(x.shape()));
            let mut gw = ctx.needs[1].then(|| Tensor::zeros(wv.shape()));
            let gb = ctx.needs[2].then(|| {
                let data = g.chunks(n).map(|row| row.iter().copied().sum()).collect();
                Tensor::from_vec(&[cout], data).unwrap()
            });
            if gx.is_some() || gw.is_some() {
                let mut cols = vec![T::zero(); rows * chunk];
                let mut n0 = 0;
                while n0 < n {
                    let n1 = (n0 + chunk).min(n);
                    let nc = n1 - n0;
                    let gview = MatRef::strided(g, n0, cout, nc, n, 1);
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(x.data(), n0, n1, &mut cols[..rows * nc]);
                        gemm(
                            T::one(),
                            gview,
                            MatRef::new(&cols[..rows * nc], rows, nc).t(),
                            T::one(),
                            MatMut::new(gw.data_mut(), cout, rows),
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            T::one(),
                            MatRef::new(wv.data(), cout, rows).t(),
                            gview,
                            T::zero(),
                            MatMut::new(&mut cols[..rows * nc], rows, nc),
                        );
                        geom.col2im(&cols[..rows * nc], n0, n1, gx.data_mut());
                    }
                    n0 = n1;
                }
            }
            vec![gx, gw, gb]
        })
    }

    /// Per-channel normalization over the spatial extent with affine
    /// `gamma`, `beta` of shape `[channels]`.
    pub fn instance_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let c = x.shape()[0];
        let s = x.len() / c;
        let (gv, bv) = (gamma.value(), beta.value());
        assert_eq!(gv.shape(), &[c]);
        let eps = T::of(eps);
        let sn = T::of(s as f64);
        let mut xhat = vec![T::zero(); c * s];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * s];
        for ch in 0..c {
            let row = &x.data()[ch * s..(ch + 1) * s];
            let mean = row.iter().copied().sum::<T>() / sn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / sn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for j in 0..s {
                let hv = (row[j] - mean) * inv;
                xhat[ch * s + j] = hv;
                out[ch * s + j] = hv * gv.data()[ch] + bv.data()[ch];
            }
        }
        let out = Tensor::from_vec(x.shape(), out).unwrap();
        self.graph.op(&[self, gamma, beta], out, move |ctx| {
            let (gam, g) = (ctx.input(1), ctx.grad.data());
            let mut gx = vec![T::zero(); c * s];
            let mut ggam = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for ch in 0..c {
                let gr = &g[ch * s..(ch + 1) * s];
                let xh = &xhat[ch * s..(ch + 1) * s];
                let gm = gam.data()[ch];
                let mut sum_g = T::zero();
                let mut sum_g_xh = T::zero();
                for j in 0..s {
                    sum_g += gr[j];
                    sum_g_xh += gr[j] * xh[j];
                }
                ggam[ch] = sum_g_xh;
                gbeta[ch] = sum_g;
                let f = gm * inv_std[ch] / sn;
                for j in 0..s {
                    gx[ch * s + j] = f * (sn * gr[j] - sum_g - xh[j] * sum_g_xh);
                }
            }
            vec![
                Some(Tensor::from_vec(ctx.input(0).shape(), gx).unwrap()),
                Some(Tensor::from_vec(&[c], ggam).unwrap()),
                Some(Tensor::from_vec(&[c], gbeta).unwrap()),
            ]
        })
    }

    /// Nearest-neighbour upsampling by two along every spatial axis.
    pub fn upsample2(self) -> Var<'g, T> {
        let x = self.value();
        let [c, d, h, w] = dims4(x.shape());
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![T::zero(); c * d2 * h2 * w2];
        for ch in 0..c {
            for z in 0..d2 {
                for y in 0..h2 {
                    let src = ((ch * d + z / 2) * h + y / 2) * w;
                    let dst = ((ch * d2 + z) * h2 + y) * w2;
                    for xx in 0..w2 {
                        out[dst + xx] = x.data()[src + xx / 2];
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[c, d2, h2, w2], out).unwrap();
        self.graph.op(&[self], out, move |ctx| {
            let g = ctx.grad.data();
            let mut gx = Tensor::zeros(&[c, d, h, w]);
            let gd = gx.data_mut();
            for ch in 0..c {
                for z in 0..d2 {
                    for y in 0..h2 {
                        let src = ((ch * d + z / 2) * h + y / 2) * w;
                        let dst = ((ch * d2 + z) * h2 + y) * w2;
                        for xx in 0..w2 {
                            gd[src + xx / 2] += g[dst + xx];
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Trilinear resampling (half-pixel centres, edge clamped) of each
    /// channel to `size`.
    pub fn resize_trilinear(self, size: [usize; 3]) -> Var<'g, T> {
        let x = self.value();
        let [c, d, h, w] = dims4(x.shape());
        let [od, oh, ow] = size;
        let tz = axis_taps(d, od);
        let ty = axis_taps(h, oh);
        let tx = axis_taps(w, ow);
        // Each output voxel is a weighted sum of 8 input voxels.
        let visit = move |mut f: Box<dyn FnMut(usize, usize, T) + '_>| {
            for ch in 0..c {
                for (z, &(z0, z1, fz)) in tz.iter().enumerate() {
                    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let o = ((ch * od + z) * oh + y) * ow + xx;
                            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                                for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                        let wgt = wz * wy * wx;
                                        if wgt != 0.0 {
                                            let i = ((ch * d + zi) * h + yi) * w + xi;
                                            f(o, i, T::of(wgt));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        let mut out = vec![T::zero(); c * od * oh * ow];
        visit(Box::new(|o, i, wgt| out[o] += wgt * x.data()[i]));
        let out = Tensor::from_vec(&[c, od, oh, ow], out).unwrap();
        self.graph.op(&[self], out, move |ctx| {
            let g = ctx.grad.data();
            let mut gx = Tensor::zeros(&[c, d, h, w]);
            let gd = gx.data_mut();
            visit(Box::new(|o, i, wgt| gd[i] += wgt * g[o]));
            vec![Some(gx)]
        })
    }

    /// Signed abs-max pooling of a `[C, D, H, W]` tensor over the 8x8x8
    /// region grid (each region spans every channel). Returns `[512]`; the
    /// gradient flows to the winning element of each region.
    pub fn summarize(self) -> Var<'g, T> {
        let x = self.value();
        let dims = dims4(x.shape());
        let winners = abs_max_argmax(x.data(), dims).expect("summarize: volume smaller than grid");
        let data = winners.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::from_vec(&[GRID * GRID * GRID], data).unwrap();
        self.graph.op(&[self], out, move |ctx| {
            let mut gx = Tensor::zeros(ctx.input(0).shape());
            for (&i, &g) in winners.iter().zip(ctx.grad.data()) {
                gx.data_mut()[i] += g;
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::check::gradcheck;
    use super::super::Graph;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct 7-loop convolution.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Vec<f64> {
        let [cin, d, h, wd] = dims4(x.shape());
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let (od, oh, ow) = (
            conv_out_len(d, k, s, p),
            conv_out_len(h, k, s, p),
            conv_out_len(wd, k, s, p),
        );
        let mut out = vec![0.0; cout * od * oh * ow];
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * s + kz) as isize - p as isize;
                                        let iy = (y * s + ky) as isize - p as isize;
                                        let ix = (xx * s + kx) as isize - p as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        acc += x.data()[((ci * d + iz) * h + iy) * wd + ix]
                                            * w.data()[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (s, p, shape) in [(1, 1, [2, 5, 4, 6]), (2, 1, [3, 7, 6, 5]), (1, 0, [2, 3, 3, 3])] {
            let x = rand_t(&shape, 1);
            let w = rand_t(&[4, shape[0], 3, 3, 3], 2);
            let b = rand_t(&[4], 3);
            let g = Graph::new();
            let y = g
                .constant(x.clone())
                .conv3d(g.constant(w.clone()), g.constant(b.clone()), s, p);
            let expected = conv_naive(&x, &w, b.data(), s, p);
            for (a, e) in y.value().data().iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        gradcheck(
            &[rand_t(&[2, 4, 3, 5], 4), rand_t(&[3, 2, 3, 3, 3], 5), rand_t(&[3], 6)],
            |_, v| v[0].conv3d(v[1], v[2], 2, 1).tanh().sum(),
            1e-6,
        );
        gradcheck(
            &[rand_t(&[2, 3, 3, 3], 7), rand_t(&[1, 2, 1, 1, 1], 8), rand_t(&[1], 9)],
            |_, v| v[0].conv3d(v[1], v[2], 1, 0).tanh().sum(),
            1e-6,
        );
    }

    #[test]
    fn instance_norm_gradients() {
        let w = rand_t(&[2, 3, 2, 2], 13);
        gradcheck(
            &[rand_t(&[2, 3, 2, 2], 10), rand_t(&[2], 11), rand_t(&[2], 12)],
            move |g, v| {
                v[0].instance_norm(v[1], v[2], 1e-5)
                    .mul(g.constant(w.clone()))
                    .sum()
            },
            1e-6,
        );
    }

    #[test]
    fn upsample_and_resize_gradients() {
        let w = rand_t(&[2, 4, 6, 4], 15);
        gradcheck(
            &[rand_t(&[2, 2, 3, 2], 14)],
            move |g, v| v[0].upsample2().mul(g.constant(w.clone())).sum(),
            1e-6,
        );
        let w2 = rand_t(&[1, 3, 5, 2], 17);
        gradcheck(
            &[rand_t(&[1, 4, 3, 4], 16)],
            move |g, v| v[0].resize_trilinear([3, 5, 2]).mul(g.constant(w2.clone())).sum(),
            1e-6,
        );
    }

    #[test]
    fn resize_identity_and_constant() {
        let g = Graph::<f64>::new();
        let x = rand_t(&[2, 3, 4, 5], 18);
        let same = g.constant(x.clone()).resize_trilinear([3, 4, 5]).value();
        for (a, b) in same.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = g
            .constant(Tensor::full(&[1, 8, 8, 8], 2.5))
            .resize_trilinear([5, 3, 7])
            .value();
        assert!(c.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn summarize_routes_gradient_to_winner() {
        let g = Graph::<f64>::new();
        let mut x = Tensor::zeros(&[2, 8, 8, 8]);
        x.data_mut()[512 + 9] = -4.0;
        let v = g.leaf(x, true);
        let s = v.summarize();
        assert_eq!(s.value().data()[0], 0.0);
        // voxel (z=0,y=1,x=1) lies in region (0,1,1) -> index 9
        assert_eq!(s.value().data()[9], -4.0);
        let grads = g.backward(s.sum());
        let gx = grads.get(v).unwrap();
        assert_eq!(gx.data()[512 + 9], 1.0);
        assert_eq!(gx.sum(), 512.0);
    }
}
