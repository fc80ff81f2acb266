//! Elementwise operations, reductions and losses.

use super::Var;
use crate::tensor::{Float, Tensor};

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

impl<'g, T: Float> Var<'g, T> {
    /// Elementwise op with a pointwise derivative `df(x, y)` where `y = f(x)`.
    fn pointwise(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let out = self.value().map(f);
        self.graph.op(&[self], out, move |ctx| {
            let x = ctx.input(0);
            let data = x
                .data()
                .iter()
                .zip(ctx.output.data())
                .zip(ctx.grad.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(x.shape(), data).unwrap())]
        })
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = zip_map(&self.value(), &other.value(), |a, b| a + b);
        self.graph.op(&[self, other], out, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = zip_map(&self.value(), &other.value(), |a, b| a - b);
        self.graph.op(&[self, other], out, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = zip_map(&self.value(), &other.value(), |a, b| a * b);
        self.graph.op(&[self, other], out, |ctx| {
            let ga = ctx.needs[0].then(|| zip_map(ctx.grad, ctx.input(1), |g, b| g * b));
            let gb = ctx.needs[1].then(|| zip_map(ctx.grad, ctx.input(0), |g, a| g * a));
            vec![ga, gb]
        })
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = T::of(s);
        let out = self.value().map(|v| v * s);
        self.graph
            .op(&[self], out, move |ctx| vec![Some(ctx.grad.map(|g| g * s))])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    /// Value-preserving copy that blocks gradient flow.
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant_rc(self.value())
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let out = (*self.value()).clone().reshaped(shape);
        self.graph.op(&[self], out, |ctx| {
            vec![Some(ctx.grad.clone().reshaped(ctx.input(0).shape()))]
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.op(&[self], out, |ctx| {
            vec![Some(Tensor::full(ctx.input(0).shape(), ctx.grad.item()))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.pointwise(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let a = T::of(slope);
        self.pointwise(
            move |x| if x > T::zero() { x } else { x * a },
            move |x, _| if x > T::zero() { T::one() } else { a },
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.pointwise(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// `x - tanh(x)`, with derivative `tanh(x)^2`.
    pub fn tanhshrink(self) -> Var<'g, T> {
        self.pointwise(
            |x| x - x.tanh(),
            |x, _| {
                let t = x.tanh();
                t * t
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g, T> {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let half = T::of(0.5);
        self.pointwise(
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + T::of(3.0) * k * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            },
        )
    }

    /// Concatenation along the leading axis.
    pub fn concat0(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in &values {
            assert_eq!(&v.shape()[1..], &tail[..], "concat0 trailing dims");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data).unwrap();
        parts[0].graph.op(parts, out, |ctx| {
            let mut offset = 0;
            ctx.inputs
                .iter()
                .zip(&ctx.needs)
                .map(|(x, &need)| {
                    let n = x.len();
                    let g = need.then(|| {
                        Tensor::from_vec(x.shape(), ctx.grad.data()[offset..offset + n].to_vec())
                            .unwrap()
                    });
                    offset += n;
                    g
                })
                .collect()
        })
    }

    /// Rows `rows` of a rank-2 tensor.
    pub fn select_rows(self, rows: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < n, "row {r} out of {n}");
            data.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_vec(&[rows.len(), d], data).unwrap();
        let rows = rows.to_vec();
        self.graph.op(&[self], out, move |ctx| {
            let mut gx = Tensor::zeros(ctx.input(0).shape());
            let gd = gx.data_mut();
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..d {
                    gd[r * d + j] += ctx.grad.data()[i * d + j];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(self, target: &Tensor<T>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "l1_loss shape");
        let n = T::of(x.len() as f64);
        let total: T = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let target = target.clone();
        self.graph.op(&[self], Tensor::scalar(total / n), move |ctx| {
            let g = ctx.grad.item() / n;
            vec![Some(zip_map(ctx.input(0), &target, |a, b| {
                if a > b {
                    g
                } else if a < b {
                    -g
                } else {
                    T::zero()
                }
            }))]
        })
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against class
    /// indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(n, targets.len(), "cross_entropy batch");
        assert!(n > 0);
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &x.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / z;
            }
            let t = targets[i];
            assert!(t < c, "target {t} out of {c} classes");
            loss += z.ln() + m - row[t];
        }
        let inv_n = T::one() / T::of(n as f64);
        let targets = targets.to_vec();
        self.graph
            .op(&[self], Tensor::scalar(loss * inv_n), move |ctx| {
                let g = ctx.grad.item() * inv_n;
                let mut gx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * c + t] -= T::one();
                }
                for v in &mut gx {
                    *v *= g;
                }
                vec![Some(Tensor::from_vec(&[n, c], gx).unwrap())]
            })
    }

    /// Mean binary cross-entropy of logits against a single label in {0, 1}.
    pub fn bce_with_logits(self, label: f64) -> Var<'g, T> {
        let y = T::of(label);
        let x = self.value();
        let n = T::of(x.len() as f64);
        let total: T = x
            .data()
            .iter()
            .map(|&z| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        self.graph.op(&[self], Tensor::scalar(total / n), move |ctx| {
            let g = ctx.grad.item() / n;
            vec![Some(ctx.input(0).map(|z| {
                let s = T::one() / (T::one() + (-z).exp());
                (s - y) * g
            }))]
        })
    }
}
