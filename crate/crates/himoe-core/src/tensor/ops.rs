//! Primitive ops: forward builders plus the matching reverse-mode rules.

use super::graph::{Graph, NodeId};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: T },
    AddScalar { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    Sqrt { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Silu { a: NodeId },
    SoftmaxRows { a: NodeId },
    MaskedSoftmaxRows { a: NodeId, _mask: Vec<bool> },
    LogSumExpRows { a: NodeId },
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    Pick { a: NodeId, r: usize, c: usize },
    MulScalarNode { a: NodeId, s: NodeId },
    Reshape { a: NodeId },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::Sqrt { .. } => "sqrt",
            Op::Exp { .. } => "exp",
            Op::Ln { .. } => "ln",
            Op::Silu { .. } => "silu",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::MaskedSoftmaxRows { .. } => "masked_softmax_rows",
            Op::LogSumExpRows { .. } => "logsumexp_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Pick { .. } => "pick",
            Op::MulScalarNode { .. } => "mul_scalar_node",
            Op::Reshape { .. } => "reshape",
        }
    }

    pub(crate) fn clone_meta(&self) -> Op<T> {
        self.clone()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Plain matrix product on raw tensors (no recording).
pub fn tensor_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = a.rc();
    let (k2, n) = b.rc();
    assert_eq!(k, k2, "matmul inner extents {} vs {}", k, k2);
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn tensor_transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = a.rc();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).unwrap()
}

fn zip_map<T: Scalar, F: Fn(T, T) -> T>(a: &Tensor<T>, b: &Tensor<T>, f: F) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

impl<T: Scalar> Graph<T> {
    /// Matrix product with shape validation.
    pub fn try_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, k) = self.value(a).rc();
        let (k2, _) = self.value(b).rc();
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul: inner extents {} vs {}",
                k, k2
            )));
        }
        Ok(self.matmul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor_matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = tensor_transpose(self.value(a));
        self.push(v, Op::Transpose { a })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div { a, b })
    }

    /// `[r,c] + [c]` broadcast along rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.value(a).rc();
        let bv = self.value(bias);
        assert_eq!(bv.len(), c, "add_bias width mismatch");
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(self.value(a).data()[i * c + j] + bv.data()[j]);
            }
        }
        let v = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(v, Op::AddBias { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = T::of_f64(self.value(a).len() as f64);
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll { a })
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(v, Op::Sqrt { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp { a })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Ln { a })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu { a })
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.value(a).rc();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.value(a).data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
            // Sum in descending order: the denominator is then bitwise
            // invariant to column permutations of the input, which makes
            // top-K gating exactly equivariant under expert permutation.
            let mut sorted = exps.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
            let z: T = sorted.iter().copied().sum();
            data.extend(exps.iter().map(|&e| e / z));
        }
        let v = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(v, Op::SoftmaxRows { a })
    }

    /// Row-wise softmax over the columns where `mask` is true; masked
    /// columns get probability exactly 0. The -inf logits are applied
    /// internally so no non-finite tensor is ever materialized.
    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        let (r, c) = self.value(a).rc();
        assert_eq!(mask.len(), c, "mask width mismatch");
        assert!(mask.iter().any(|&m| m), "masked_softmax: all columns masked");
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.value(a).data()[i * c..(i + 1) * c];
            let m = row
                .iter()
                .zip(mask)
                .filter(|(_, &v)| v)
                .map(|(&x, _)| x)
                .fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row
                .iter()
                .zip(mask)
                .map(|(&x, &v)| if v { (x - m).exp() } else { T::zero() })
                .collect();
            let z: T = exps.iter().copied().sum();
            data.extend(exps.iter().map(|&e| e / z));
        }
        let v = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(v, Op::MaskedSoftmaxRows { a, _mask: mask.to_vec() })
    }

    /// Row-wise log-sum-exp, `[r,c] -> [r,1]`, stabilized.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.value(a).rc();
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let row = &self.value(a).data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            data.push(m + z.ln());
        }
        let v = Tensor::new(vec![r, 1], data).unwrap();
        self.push(v, Op::LogSumExpRows { a })
    }

    /// Layer normalization over the last axis with affine transform.
    /// Population variance, `eps` inside the square root.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let (r, c) = self.value(x).rc();
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let cn = T::of_f64(c as f64);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.value(x).data()[i * c..(i + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let sigma = (var + eps).sqrt();
            for j in 0..c {
                let xh = (row[j] - mu) / sigma;
                data.push(self.value(gamma).data()[j] * xh + self.value(beta).data()[j]);
            }
        }
        let v = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(v, Op::LayerNormRows { x, gamma, beta, eps })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, c) = self.value(parts[0]).rc();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).rc();
            assert_eq!(pc, c, "concat_rows width mismatch");
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, c], data).unwrap();
        self.push(v, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (r, c) = self.value(a).rc();
        assert!(start < end && end <= r, "slice_rows out of range");
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let v = Tensor::new(vec![end - start, c], data).unwrap();
        self.push(v, Op::SliceRows { a, start })
    }

    /// Extract one element as a `[1]` scalar node.
    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        let v = Tensor::scalar(self.value(a).at(r, c));
        self.push(v, Op::Pick { a, r, c })
    }

    /// Multiply a tensor by a `[1]` scalar node (gradient flows to both).
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x * sv);
        self.push(v, Op::MulScalarNode { a, s })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(a).len(), "reshape element count mismatch");
        let v = Tensor::new(shape, self.value(a).data().to_vec()).unwrap();
        self.push(v, Op::Reshape { a })
    }
}

pub(crate) fn backward_op<T: Scalar>(g: &mut Graph<T>, node: usize, op: &Op<T>, out: &Tensor<T>) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let bt = tensor_transpose(g.value(*b));
            let da = tensor_matmul(out, &bt);
            let at = tensor_transpose(g.value(*a));
            let db = tensor_matmul(&at, out);
            g.accum_grad(*a, da);
            g.accum_grad(*b, db);
        }
        Op::Transpose { a } => {
            g.accum_grad(*a, tensor_transpose(out));
        }
        Op::Add { a, b } => {
            g.accum_grad(*a, reshaped_like(out, g.value(*a)));
            g.accum_grad(*b, reshaped_like(out, g.value(*b)));
        }
        Op::Sub { a, b } => {
            g.accum_grad(*a, reshaped_like(out, g.value(*a)));
            g.accum_grad(*b, reshaped_like(&out.map(|x| -x), g.value(*b)));
        }
        Op::Mul { a, b } => {
            let da = zip_map(out, g.value(*b), |o, bv| o * bv);
            let db = zip_map(out, g.value(*a), |o, av| o * av);
            g.accum_grad(*a, da);
            g.accum_grad(*b, db);
        }
        Op::Div { a, b } => {
            let da = zip_map(out, g.value(*b), |o, bv| o / bv);
            let av = g.value(*a).clone();
            let bv = g.value(*b).clone();
            let mut db = zip_map(&av, &bv, |x, y| -x / (y * y));
            for (d, o) in db.data_mut().iter_mut().zip(out.data()) {
                *d = *d * *o;
            }
            g.accum_grad(*a, da);
            g.accum_grad(*b, db);
        }
        Op::AddBias { a, bias } => {
            let (r, c) = g.value(*a).rc();
            let mut dbias = vec![T::zero(); c];
            for i in 0..r {
                for j in 0..c {
                    dbias[j] = dbias[j] + out.data()[i * c + j];
                }
            }
            let bias_shape = g.value(*bias).shape().to_vec();
            g.accum_grad(*a, out.clone());
            g.accum_grad(*bias, Tensor::new(bias_shape, dbias).unwrap());
        }
        Op::Scale { a, c } => {
            let cc = *c;
            g.accum_grad(*a, out.map(|x| x * cc));
        }
        Op::AddScalar { a } => {
            g.accum_grad(*a, out.clone());
        }
        Op::SumAll { a } => {
            let go = out.item();
            let shape = g.value(*a).shape().to_vec();
            let n: usize = shape.iter().product();
            g.accum_grad(*a, Tensor::new(shape, vec![go; n]).unwrap());
        }
        Op::MeanAll { a } => {
            let shape = g.value(*a).shape().to_vec();
            let n: usize = shape.iter().product();
            let go = out.item() / T::of_f64(n as f64);
            g.accum_grad(*a, Tensor::new(shape, vec![go; n]).unwrap());
        }
        Op::Sqrt { a } => {
            let y = g.nodes[node].value.clone();
            let two = T::of_f64(2.0);
            let da = zip_map(out, &y, |o, yy| o / (two * yy));
            g.accum_grad(*a, da);
        }
        Op::Exp { a } => {
            let y = g.nodes[node].value.clone();
            g.accum_grad(*a, zip_map(out, &y, |o, yy| o * yy));
        }
        Op::Ln { a } => {
            let av = g.value(*a).clone();
            g.accum_grad(*a, zip_map(out, &av, |o, x| o / x));
        }
        Op::Silu { a } => {
            let av = g.value(*a).clone();
            let da = zip_map(out, &av, |o, x| {
                let s = sigmoid(x);
                o * s * (T::one() + x * (T::one() - s))
            });
            g.accum_grad(*a, da);
        }
        Op::SoftmaxRows { a } | Op::MaskedSoftmaxRows { a, .. } => {
            // dx = y * (g - sum(g*y)) per row; masked entries have y = 0.
            let y = g.nodes[node].value.clone();
            let (r, c) = y.rc();
            let mut dx = vec![T::zero(); r * c];
            for i in 0..r {
                let mut dot = T::zero();
                for j in 0..c {
                    dot = dot + out.data()[i * c + j] * y.data()[i * c + j];
                }
                for j in 0..c {
                    dx[i * c + j] = y.data()[i * c + j] * (out.data()[i * c + j] - dot);
                }
            }
            let shape = g.value(*a).shape().to_vec();
            g.accum_grad(*a, Tensor::new(shape, dx).unwrap());
        }
        Op::LogSumExpRows { a } => {
            let x = g.value(*a).clone();
            let (r, c) = x.rc();
            let mut dx = vec![T::zero(); r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
                let z: T = exps.iter().copied().sum();
                let go = out.data()[i];
                for j in 0..c {
                    dx[i * c + j] = go * exps[j] / z;
                }
            }
            g.accum_grad(*a, Tensor::new(x.shape().to_vec(), dx).unwrap());
        }
        Op::LayerNormRows { x, gamma, beta, eps } => {
            let xv = g.value(*x).clone();
            let gv = g.value(*gamma).clone();
            let (r, c) = xv.rc();
            let cn = T::of_f64(c as f64);
            let mut dx = vec![T::zero(); r * c];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for i in 0..r {
                let row = &xv.data()[i * c..(i + 1) * c];
                let mu = row.iter().copied().sum::<T>() / cn;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
                let sigma = (var + *eps).sqrt();
                let xhat: Vec<T> = row.iter().map(|&v| (v - mu) / sigma).collect();
                let go = &out.data()[i * c..(i + 1) * c];
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..c {
                    dgamma[j] = dgamma[j] + go[j] * xhat[j];
                    dbeta[j] = dbeta[j] + go[j];
                    let dxh = go[j] * gv.data()[j];
                    m1 = m1 + dxh;
                    m2 = m2 + dxh * xhat[j];
                }
                m1 = m1 / cn;
                m2 = m2 / cn;
                for j in 0..c {
                    let dxh = go[j] * gv.data()[j];
                    dx[i * c + j] = (dxh - m1 - xhat[j] * m2) / sigma;
                }
            }
            let gshape = g.value(*gamma).shape().to_vec();
            let bshape = g.value(*beta).shape().to_vec();
            g.accum_grad(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            g.accum_grad(*gamma, Tensor::new(gshape, dgamma).unwrap());
            g.accum_grad(*beta, Tensor::new(bshape, dbeta).unwrap());
        }
        Op::ConcatRows { parts } => {
            let (_, c) = out.rc();
            let mut offset = 0;
            for &p in parts {
                let (pr, _) = g.value(p).rc();
                let slice = out.data()[offset * c..(offset + pr) * c].to_vec();
                let shape = g.value(p).shape().to_vec();
                g.accum_grad(p, Tensor::new(shape, slice).unwrap());
                offset += pr;
            }
        }
        Op::SliceRows { a, start } => {
            let (r, c) = g.value(*a).rc();
            let (or, _) = out.rc();
            let mut da = vec![T::zero(); r * c];
            da[start * c..(start + or) * c].copy_from_slice(out.data());
            let shape = g.value(*a).shape().to_vec();
            g.accum_grad(*a, Tensor::new(shape, da).unwrap());
        }
        Op::Pick { a, r, c } => {
            let (_, cols) = g.value(*a).rc();
            let shape = g.value(*a).shape().to_vec();
            let mut da = Tensor::zeros(shape);
            da.data_mut()[r * cols + c] = out.item();
            g.accum_grad(*a, da);
        }
        Op::MulScalarNode { a, s } => {
            let sv = g.value(*s).item();
            let da = out.map(|x| x * sv);
            let ds: T = out.data().iter().zip(g.value(*a).data()).map(|(&o, &x)| o * x).sum();
            g.accum_grad(*a, da);
            g.accum_grad(*s, Tensor::scalar(ds));
        }
        Op::Reshape { a } => {
            let shape = g.value(*a).shape().to_vec();
            g.accum_grad(*a, Tensor::new(shape, out.data().to_vec()).unwrap());
        }
    }
}

/// Gradient tensors must match the parent's shape even when an op was fed a
/// rank-1 tensor where the output is rank-2 (never happens for same-shape
/// elementwise ops, but keeps Add/Sub robust across `[n]` vs `[1,n]`).
fn reshaped_like<T: Scalar>(g: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    Tensor::new(like.shape().to_vec(), g.data().to_vec()).unwrap()
}
