//! Differentiable primitives recorded on a [`Tape`].

use super::conv::{self, ConvGeom};
use super::kernels::{self, for_each_index2};
use super::tape::{CustomBackward, MatmulPlan, Op, Tape, Var};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

impl Tape {
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let value = if sa == sb {
            let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(sa, data)
        } else {
            let out =
                kernels::broadcast_shape(&sa, &sb).ok_or_else(|| Error::shapes(what, &sa, &sb))?;
            let stra = kernels::aligned_strides(&sa, &out);
            let strb = kernels::aligned_strides(&sb, &out);
            let mut data = vec![0.0; numel(&out)];
            for_each_index2(&out, &stra, &strb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
            Tensor::from_parts(out, data)
        };
        Ok((value, self.any_grad(&[a, b])))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    /// `[.., m, k] × [.., k, n] → [.., m, n]`, leading dimensions broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![0.0; plan.out_len()];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            plan.for_each(|o, ia, ib| {
                kernels::mm_acc(
                    &ad[ia * m * k..(ia + 1) * m * k],
                    &bd[ib * k * n..(ib + 1) * k * n],
                    &mut out[o * m * n..(o + 1) * m * n],
                    m,
                    k,
                    n,
                );
            });
        }
        let value = Tensor::from_parts(plan.out_shape(), out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let rank = src.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "permutation {perm:?} is invalid for shape {:?}",
                src.shape()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| src.shape()[p]).collect();
        let strides = kernels::row_major_strides(src.shape());
        let permuted: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let zeros = vec![0; rank];
        let sd = src.data();
        let mut data = vec![0.0; src.numel()];
        for_each_index2(&out_shape, &permuted, &zeros, |o, is, _| data[o] = sd[is]);
        let value = Tensor::from_parts(out_shape, data);
        let rg = self.requires_grad(a);
        Ok(self.push(value, rg, Op::Permute(a, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(a)
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shapes("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let width = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * width..(o + 1) * width]);
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        let rg = self.any_grad(inputs);
        Ok(self.push(value, rg, Op::Concat(inputs.to_vec(), axis)))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = shape[axis] * inner;
        let width = len * inner;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            data.extend_from_slice(&src[o * row + start * inner..o * row + start * inner + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        let rg = self.requires_grad(a);
        Ok(self.push(
            value,
            rg,
            Op::Slice {
                input: a,
                axis,
                start,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let width = *src.shape().last().unwrap_or(&1);
        let value = Tensor::from_parts(
            src.shape().to_vec(),
            kernels::softmax_rows(src.data(), width),
        );
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Softmax(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Gelu(a))
    }

    /// Zero-mean, unit-variance over the last axis (population variance).
    /// A constant row maps to zeros.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let width = *src.shape().last().unwrap_or(&1);
        let (data, inv_std) = kernels::normalize_rows(src.data(), width, eps);
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Normalize { input: a, inv_std })
    }

    /// `normalize(x) ⊙ gamma + beta` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over {:?} with gamma {:?}, beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let n = self.normalize(x, eps);
        let scaled = self.mul(n, gamma)?;
        self.add(scaled, beta)
    }

    /// `x · wᵀ + bias` with `w: [d_out, d_in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let wt = self.transpose(weight)?;
        let y = self.matmul(x, wt)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Mean(a))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shapes("mse_loss", p.shape(), t.shape()));
        }
        let sq: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(sq / p.numel() as f64);
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(value, rg, Op::Mse(pred, target)))
    }

    /// Cross-correlation of `x: [c_in, d, h, w]` with `k: [c_out, c_in, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 5 || ks[1] != xs[0] {
            return Err(Error::shapes("conv3d input vs kernel", &xs, &ks));
        }
        let geom = ConvGeom::new(
            xs[0],
            ks[0],
            [xs[1], xs[2], xs[3]],
            [ks[2], ks[3], ks[4]],
            stride,
            pad,
        )?;
        let mut out = vec![0.0; geom.output_len()];
        conv::forward(
            self.value(x).data(),
            self.value(kernel).data(),
            &geom,
            &mut out,
        );
        let mut shape = vec![geom.c_out];
        shape.extend(geom.output);
        let value = Tensor::from_parts(shape, out);
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(
            value,
            rg,
            Op::Conv {
                input: x,
                weight: kernel,
                geom,
            },
        ))
    }

    /// Transposed convolution of `x: [c_in, d, h, w]` with
    /// `k: [c_in, c_out, kd, kh, kw]`; each spatial size becomes
    /// `(s - 1)·stride - 2·pad + k`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 5 || ks[0] != xs[0] {
            return Err(Error::shapes("conv_transpose3d input vs kernel", &xs, &ks));
        }
        let geom = ConvGeom::transposed(
            xs[0],
            ks[1],
            [xs[1], xs[2], xs[3]],
            [ks[2], ks[3], ks[4]],
            stride,
            pad,
        )?;
        let mut out = vec![0.0; geom.input_len()];
        conv::backward_input(
            self.value(x).data(),
            self.value(kernel).data(),
            &geom,
            &mut out,
        );
        let mut shape = vec![geom.c_in];
        shape.extend(geom.input);
        let value = Tensor::from_parts(shape, out);
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(
            value,
            rg,
            Op::ConvTranspose {
                input: x,
                weight: kernel,
                geom,
            },
        ))
    }

    /// Records an operation whose value and vector-Jacobian product are
    /// supplied by the caller. `backward` receives the upstream gradient and
    /// the input values and returns one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Var {
        let rg = self.any_grad(inputs);
        let backward: CustomBackward = Box::new(backward);
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(i, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("vs"), "{msg}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_doubles_input() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -3.0]));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 5.0);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0, 7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros([3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_inputs_receive_no_gradient() {
        let mut tape = Tape::new();
        let frozen = tape.constant(t(&[2], &[1.0, 2.0]));
        let live = tape.param(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(frozen, live).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(live).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn identity_conv_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 3, 2], |i| i as f64 * 0.5));
        let k = tape.constant(Tensor::ones([1, 1, 1, 1, 1]));
        let y = tape.conv3d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn all_ones_conv_counts() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 2, 2, 2]));
        let k = tape.constant(Tensor::ones([1, 1, 2, 2, 2]));
        let y = tape.conv3d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[8.0]);
    }

    #[test]
    fn conv_output_size_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 7, 6, 5]));
        let k = tape.constant(Tensor::ones([2, 1, 3, 3, 3]));
        let y = tape.conv3d(x, k, 2, 1).unwrap();
        // floor((s + 2·pad − k) / stride) + 1
        assert_eq!(tape.shape(y), &[2, 4, 3, 3]);
        let big = tape.constant(Tensor::ones([1, 1, 4, 4, 4]));
        let small = tape.constant(Tensor::ones([1, 2, 2, 2]));
        assert!(matches!(
            tape.conv3d(small, big, 1, 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn transposed_conv_upsamples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([3, 2, 2, 2]));
        let k = tape.constant(Tensor::ones([3, 4, 2, 2, 2]));
        let y = tape.conv_transpose3d(x, k, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([4], 2.5));
        let g = tape.constant(Tensor::ones([4]));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_zero_gamma_yields_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3], |i| (i * i) as f64));
        let g = tape.constant(Tensor::zeros([3]));
        let b = tape.constant(Tensor::full([3], 0.75));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([3, 4], |i| (i as f64).sin() * 5.0));
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([2, 2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([2, 1, 3], |i| 100.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 3]);
        let back = tape.slice(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(a));
        let tail = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(tail), tape.value(b));
    }

    #[test]
    fn permute_matches_index_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        let yd = tape.value(y).data();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(yd[(k * 2 + i) * 3 + j], ((i * 3 + j) * 4 + k) as f64);
                }
            }
        }
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn broadcast_add_bias() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros([3, 2]));
        let b = tape.param(t(&[2], &[1.0, -1.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }
}
