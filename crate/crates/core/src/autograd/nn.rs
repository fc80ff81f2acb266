//! Dense layers for the transformer: linear maps, layer norm, multi-head
//! attention and token embeddings.

use super::Var;
use crate::tensor::{gemm, Float, MatMut, MatRef, Tensor};

/// Straight-through routing from continuous values to embedding rows.
///
/// The forward pass of [`Var::embedding_ste`] is an ordinary table lookup.
/// In the backward pass, slot `offset + j` whose `active[j]` is set sends
/// `scale * <grad_row, slope(id)>` to `values[j]`, where `slope(id)` is the
/// centered difference of neighbouring table rows inside `band`. That is the
/// gradient of the lookup as if `id` were the continuous quantity
/// `scale * value`.
#[derive(Clone, Debug)]
pub struct SteSpec {
    pub offset: usize,
    pub active: Vec<bool>,
    pub scale: f64,
    pub band: (usize, usize),
}

impl<'g, T: Float> Var<'g, T> {
    /// `x @ w + b` for `x: [n, din]`, `w: [din, dout]`, `b: [dout]`.
    pub fn linear(self, w: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let (n, din) = (x.shape()[0], x.shape()[1]);
        let dout = wv.shape()[1];
        assert_eq!(wv.shape()[0], din, "linear weight rows");
        assert_eq!(bv.shape(), &[dout], "linear bias");
        let mut out = Tensor::zeros(&[n, dout]);
        for row in out.data_mut().chunks_mut(dout) {
            row.copy_from_slice(bv.data());
        }
        gemm(
            T::one(),
            MatRef::new(x.data(), n, din),
            MatRef::new(wv.data(), din, dout),
            T::one(),
            MatMut::new(out.data_mut(), n, dout),
        );
        self.graph.op(&[self, w, b], out, move |ctx| {
            let (x, w, g) = (ctx.input(0), ctx.input(1), ctx.grad);
            let gx = ctx.needs[0].then(|| {
                let mut gx = Tensor::zeros(&[n, din]);
                gemm(
                    T::one(),
                    MatRef::new(g.data(), n, dout),
                    MatRef::new(w.data(), din, dout).t(),
                    T::zero(),
                    MatMut::new(gx.data_mut(), n, din),
                );
                gx
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = Tensor::zeros(&[din, dout]);
                gemm(
                    T::one(),
                    MatRef::new(x.data(), n, din).t(),
                    MatRef::new(g.data(), n, dout),
                    T::zero(),
                    MatMut::new(gw.data_mut(), din, dout),
                );
                gw
            });
            let gb = ctx.needs[2].then(|| {
                let mut gb = Tensor::zeros(&[dout]);
                for row in g.data().chunks(dout) {
                    for (a, &v) in gb.data_mut().iter_mut().zip(row) {
                        *a += v;
                    }
                }
                gb
            });
            vec![gx, gw, gb]
        })
    }

    /// Per-row layer normalization of `[n, d]` with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let d = *x.shape().last().unwrap();
        let n = x.len() / d;
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &x.data()[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / T::of(d as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(d as f64);
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_vec(x.shape(), out).unwrap();
        self.graph.op(&[self, gamma, beta], out, move |ctx| {
            let (gam, g) = (ctx.input(1), ctx.grad.data());
            let mut gx = vec![T::zero(); n * d];
            let mut ggam = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            let dn = T::of(d as f64);
            for i in 0..n {
                let gr = &g[i * d..(i + 1) * d];
                let xh = &xhat[i * d..(i + 1) * d];
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for j in 0..d {
                    let dxh = gr[j] * gam.data()[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[j];
                    ggam[j] += gr[j] * xh[j];
                    gbeta[j] += gr[j];
                }
                for j in 0..d {
                    let dxh = gr[j] * gam.data()[j];
                    gx[i * d + j] = inv_std[i] / dn * (dn * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                }
            }
            vec![
                Some(Tensor::from_vec(ctx.input(0).shape(), gx).unwrap()),
                Some(Tensor::from_vec(&[d], ggam).unwrap()),
                Some(Tensor::from_vec(&[d], gbeta).unwrap()),
            ]
        })
    }

    /// Bidirectional multi-head scaled dot-product attention over a packed
    /// `[len, 3 * hidden]` query/key/value tensor. Returns `[len, hidden]`.
    pub fn attention(self, heads: usize) -> Var<'g, T> {
        let qkv = self.value();
        let (len, h3) = (qkv.shape()[0], qkv.shape()[1]);
        assert_eq!(h3 % 3, 0, "attention expects packed qkv");
        let hidden = h3 / 3;
        assert_eq!(hidden % heads, 0, "hidden not divisible by heads");
        let dh = hidden / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[len, hidden]);
        let mut probs: Vec<Vec<T>> = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = MatRef::strided(qkv.data(), h * dh, len, dh, h3, 1);
            let k = MatRef::strided(qkv.data(), hidden + h * dh, len, dh, h3, 1);
            let v = MatRef::strided(qkv.data(), 2 * hidden + h * dh, len, dh, h3, 1);
            let mut p = vec![T::zero(); len * len];
            gemm(scale, q, k.t(), T::zero(), MatMut::new(&mut p, len, len));
            for row in p.chunks_mut(len) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    z += *e;
                }
                let inv = T::one() / z;
                for e in row.iter_mut() {
                    *e *= inv;
                }
            }
            gemm(
                T::one(),
                MatRef::new(&p, len, len),
                v,
                T::zero(),
                MatMut::strided(out.data_mut(), h * dh, len, dh, hidden, 1),
            );
            probs.push(p);
        }
        self.graph.op(&[self], out, move |ctx| {
            let qkv = ctx.input(0);
            let g = ctx.grad;
            let mut gqkv = Tensor::zeros(&[len, h3]);
            let mut dp = vec![T::zero(); len * len];
            for (h, p) in probs.iter().enumerate() {
                let q = MatRef::strided(qkv.data(), h * dh, len, dh, h3, 1);
                let k = MatRef::strided(qkv.data(), hidden + h * dh, len, dh, h3, 1);
                let v = MatRef::strided(qkv.data(), 2 * hidden + h * dh, len, dh, h3, 1);
                let go = MatRef::strided(g.data(), h * dh, len, dh, hidden, 1);
                let pm = MatRef::new(p, len, len);
                // dV = P^T dO
                gemm(
                    T::one(),
                    pm.t(),
                    go,
                    T::zero(),
                    MatMut::strided(gqkv.data_mut(), 2 * hidden + h * dh, len, dh, h3, 1),
                );
                // dP = dO V^T, then the softmax Jacobian row by row.
                gemm(T::one(), go, v.t(), T::zero(), MatMut::new(&mut dp, len, len));
                for (drow, prow) in dp.chunks_mut(len).zip(p.chunks(len)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                }
                let ds = MatRef::new(&dp, len, len);
                gemm(
                    scale,
                    ds,
                    k,
                    T::zero(),
                    MatMut::strided(gqkv.data_mut(), h * dh, len, dh, h3, 1),
                );
                gemm(
                    scale,
                    ds.t(),
                    q,
                    T::zero(),
                    MatMut::strided(gqkv.data_mut(), hidden + h * dh, len, dh, h3, 1),
                );
            }
            vec![Some(gqkv)]
        })
    }

    /// Row lookup `table[ids]` for `table: [vocab, hidden]`.
    pub fn embedding(self, ids: &[usize]) -> Var<'g, T> {
        let table = self.value();
        let out = gather_rows(&table, ids);
        let ids = ids.to_vec();
        self.graph.op(&[self], out, move |ctx| {
            vec![Some(scatter_rows(ctx.input(0).shape(), ctx.grad, &ids))]
        })
    }

    /// Table lookup that also routes gradient into `values` (see [`SteSpec`]).
    pub fn embedding_ste(self, ids: &[usize], values: Var<'g, T>, spec: SteSpec) -> Var<'g, T> {
        let table = self.value();
        assert_eq!(values.value().len(), spec.active.len(), "ste values");
        assert!(spec.offset + spec.active.len() <= ids.len(), "ste slots");
        let out = gather_rows(&table, ids);
        let ids = ids.to_vec();
        self.graph.op(&[self, values], out, move |ctx| {
            let table = ctx.input(0);
            let d = table.shape()[1];
            let gt = ctx.needs[0].then(|| scatter_rows(table.shape(), ctx.grad, &ids));
            let gv = ctx.needs[1].then(|| {
                let (lo, hi) = spec.band;
                let scale = T::of(spec.scale);
                let mut gv = Tensor::zeros(&[spec.active.len()]);
                for (j, &on) in spec.active.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    let pos = spec.offset + j;
                    let id = ids[pos];
                    let a = id.saturating_sub(1).max(lo);
                    let b = (id + 1).min(hi);
                    if b <= a {
                        continue;
                    }
                    let inv = T::one() / T::of((b - a) as f64);
                    let (ra, rb) = (&table.data()[a * d..(a + 1) * d], &table.data()[b * d..(b + 1) * d]);
                    let grow = &ctx.grad.data()[pos * d..(pos + 1) * d];
                    let dot: T = (0..d).map(|k| grow[k] * (rb[k] - ra[k]) * inv).sum();
                    gv.data_mut()[j] = scale * dot;
                }
                gv
            });
            vec![gt, gv]
        })
    }
}

fn gather_rows<T: Float>(table: &Tensor<T>, ids: &[usize]) -> Tensor<T> {
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        assert!(id < vocab, "id {id} out of vocabulary {vocab}");
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::from_vec(&[ids.len(), d], data).unwrap()
}

fn scatter_rows<T: Float>(shape: &[usize], grad: &Tensor<T>, ids: &[usize]) -> Tensor<T> {
    let d = shape[1];
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (i, &id) in ids.iter().enumerate() {
        for k in 0..d {
            od[id * d + k] += grad.data()[i * d + k];
        }
    }
    out
}
