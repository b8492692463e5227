//! Forward primitives. Every primitive has a backward rule in
//! [`super::grad`] written in terms of these same primitives.

use super::conv::{self, ConvGeom};
use super::element::Element;
use super::tape::{Op, Var};
use super::tensor::numel;
use crate::error::{Error, Result};

fn same_tape<T>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "operands recorded on different tapes"
    );
}

impl<'t, T: Element> Var<'t, T> {
    fn unary(&self, op: Op, shape: Vec<usize>, value: Vec<T>) -> Var<'t, T> {
        self.tape.push(op, &[self.id], shape, value)
    }

    fn zip_with(&self, other: &Var<'t, T>, op: Op, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        same_tape(self, other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::shape(op.name(), &[&sa, &sb]));
        }
        let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(other.id));
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.push(op, &[self.id, other.id], sa, out))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(other, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(other, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(other, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let k = T::from_f64(c);
        let v = self.tape.value_of(self.id).iter().map(|&x| x * k).collect();
        self.unary(Op::Scale(c), self.shape(), v)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let k = T::from_f64(c);
        let v = self.tape.value_of(self.id).iter().map(|&x| x + k).collect();
        self.unary(Op::AddScalar(c), self.shape(), v)
    }

    /// Multiplies every element by the single element of `s`.
    pub fn scale_by(&self, s: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, s);
        if s.numel() != 1 {
            return Err(Error::shape("scale_by", &[&self.shape(), &s.shape()]));
        }
        let k = self.tape.value_of(s.id)[0];
        let v = self.tape.value_of(self.id).iter().map(|&x| x * k).collect();
        Ok(self
            .tape
            .push(Op::ScaleBy, &[self.id, s.id], self.shape(), v))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let z = T::zero();
        let v = self
            .tape
            .value_of(self.id)
            .iter()
            .map(|&x| if x > z { x } else { z })
            .collect();
        self.unary(Op::Relu, self.shape(), v)
    }

    /// Elementwise `x^(-1/2)`.
    pub fn rsqrt(&self) -> Var<'t, T> {
        let v = self
            .tape
            .value_of(self.id)
            .iter()
            .map(|&x| T::one() / x.sqrt())
            .collect();
        self.unary(Op::Rsqrt, self.shape(), v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let own = self.shape();
        if numel(shape) != numel(&own) {
            return Err(Error::shape("reshape", &[&own, shape]));
        }
        let v = self.tape.value_of(self.id).to_vec();
        Ok(self.unary(Op::Reshape, shape.to_vec(), v))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'t, T> {
        let mut acc = T::zero();
        for &x in self.tape.value_of(self.id).iter() {
            acc = acc + x;
        }
        self.unary(Op::SumAll, vec![1], vec![acc])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        if self.numel() != 1 {
            return Err(Error::shape("expand_scalar", &[&self.shape(), shape]));
        }
        let v = vec![self.tape.value_of(self.id)[0]; numel(shape)];
        Ok(self.unary(Op::ExpandScalar, shape.to_vec(), v))
    }

    /// Sums over every axis except axis 1: `[N, C, ...] -> [C]`.
    pub fn sum_channels(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape("sum_channels", &[&s]));
        }
        let (n, c, inner) = (s[0], s[1], numel(&s[2..]));
        let x = self.tape.value_of(self.id);
        let mut out = vec![T::zero(); c];
        for ni in 0..n {
            for (ci, o) in out.iter_mut().enumerate() {
                let base = (ni * c + ci) * inner;
                for &v in &x[base..base + inner] {
                    *o = *o + v;
                }
            }
        }
        Ok(self.unary(Op::SumChannels, vec![c], out))
    }

    /// Broadcasts a `[C]` vector along axis 1 of `shape`.
    pub fn expand_channels(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let own = self.shape();
        if shape.len() < 2 || own.len() != 1 || own[0] != shape[1] {
            return Err(Error::shape("expand_channels", &[&own, shape]));
        }
        let (n, c, inner) = (shape[0], shape[1], numel(&shape[2..]));
        let x = self.tape.value_of(self.id);
        let mut out = Vec::with_capacity(numel(shape));
        for _ in 0..n {
            for &v in x.iter().take(c) {
                out.extend(std::iter::repeat_n(v, inner));
            }
        }
        Ok(self.unary(Op::ExpandChannels, shape.to_vec(), out))
    }

    /// `[B, K] -> [B]`
    pub fn sum_rows(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("sum_rows", &[&s]));
        }
        let x = self.tape.value_of(self.id);
        let out = x
            .chunks(s[1].max(1))
            .take(s[0])
            .map(|r| r.iter().fold(T::zero(), |a, &b| a + b))
            .collect::<Vec<_>>();
        let out = if s[1] == 0 {
            vec![T::zero(); s[0]]
        } else {
            out
        };
        Ok(self.unary(Op::SumRows, vec![s[0]], out))
    }

    /// `[B] -> [B, K]`
    pub fn expand_rows(&self, k: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::shape("expand_rows", &[&s, &[k]]));
        }
        let x = self.tape.value_of(self.id);
        let out = x.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
        Ok(self.unary(Op::ExpandRows, vec![s[0], k], out))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&self, other: &Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        same_tape(self, other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &[&sa, &sb]));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", &[&sa, &sb]));
        }
        let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(other.id));
        let (rsa, csa) = if ta {
            (1, sa[1] as isize)
        } else {
            (sa[1] as isize, 1)
        };
        let (rsb, csb) = if tb {
            (1, sb[1] as isize)
        } else {
            (sb[1] as isize, 1)
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            ka,
            n,
            T::one(),
            &a,
            rsa,
            csa,
            &b,
            rsb,
            csb,
            T::zero(),
            &mut out,
        );
        Ok(self
            .tape
            .push(Op::Matmul { ta, tb }, &[self.id, other.id], vec![m, n], out))
    }

    /// Adds a per-feature bias along axis 1.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = bias.expand_channels(&self.shape())?;
        self.add(&b)
    }

    /// 2-D cross-correlation of NCHW input `self` with OIHW kernel `w`.
    pub fn conv2d(&self, w: &Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        same_tape(self, w);
        let g = ConvGeom { stride, pad };
        let (xs, ws) = (self.shape(), w.shape());
        let out_shape =
            conv_out_shape(&xs, &ws, g).ok_or_else(|| Error::shape("conv2d", &[&xs, &ws]))?;
        let (x, wv) = (self.tape.value_of(self.id), self.tape.value_of(w.id));
        let out = conv::conv2d(&x, &xs, &wv, &ws, g);
        Ok(self
            .tape
            .push(Op::Conv2d(g), &[self.id, w.id], out_shape, out))
    }

    /// Input-gradient of a convolution (a transposed convolution of `self`,
    /// the output cotangent, by `w`), producing `x_shape`.
    pub fn conv2d_input_grad(
        &self,
        w: &Var<'t, T>,
        x_shape: &[usize],
        g: ConvGeom,
    ) -> Result<Var<'t, T>> {
        same_tape(self, w);
        let (gs, ws) = (self.shape(), w.shape());
        if conv_out_shape(x_shape, &ws, g).as_deref() != Some(&gs[..]) {
            return Err(Error::shape("conv2d_input_grad", &[&gs, &ws, x_shape]));
        }
        let (gy, wv) = (self.tape.value_of(self.id), self.tape.value_of(w.id));
        let out = conv::conv2d_input_grad(&gy, &wv, &ws, x_shape, g);
        Ok(self.tape.push(
            Op::Conv2dInputGrad(g),
            &[self.id, w.id],
            x_shape.to_vec(),
            out,
        ))
    }

    /// Weight-gradient of a convolution of input `self` with output
    /// cotangent `gy`, producing `w_shape`.
    pub fn conv2d_weight_grad(
        &self,
        gy: &Var<'t, T>,
        w_shape: &[usize],
        g: ConvGeom,
    ) -> Result<Var<'t, T>> {
        same_tape(self, gy);
        let (xs, gs) = (self.shape(), gy.shape());
        if conv_out_shape(&xs, w_shape, g).as_deref() != Some(&gs[..]) {
            return Err(Error::shape("conv2d_weight_grad", &[&xs, &gs, w_shape]));
        }
        let (x, gv) = (self.tape.value_of(self.id), self.tape.value_of(gy.id));
        let out = conv::conv2d_weight_grad(&x, &xs, &gv, w_shape, g);
        Ok(self.tape.push(
            Op::Conv2dWeightGrad(g),
            &[self.id, gy.id],
            w_shape.to_vec(),
            out,
        ))
    }

    /// Row-wise softmax of a `[B, K]` tensor.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("softmax", &[&s]));
        }
        let x = self.tape.value_of(self.id);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(s[1]) {
            let m = row.iter().fold(row[0], |a, &b| a.max(b));
            let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let z = e.iter().fold(T::zero(), |a, &b| a + b);
            out.extend(e.into_iter().map(|v| v / z));
        }
        Ok(self.unary(Op::Softmax, s, out))
    }

    /// Row-wise `log Σ exp`, `[B, K] -> [B]`, stabilized by the row max.
    pub fn logsumexp(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("logsumexp", &[&s]));
        }
        let x = self.tape.value_of(self.id);
        let out = x
            .chunks(s[1])
            .map(|row| {
                let m = row.iter().fold(row[0], |a, &b| a.max(b));
                let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
                m + z.ln()
            })
            .collect();
        Ok(self.unary(Op::LogSumExp, vec![s[0]], out))
    }
}

pub(crate) fn conv_out_shape(xs: &[usize], ws: &[usize], g: ConvGeom) -> Option<Vec<usize>> {
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return None;
    }
    let ho = g.out_extent(xs[2], ws[2])?;
    let wo = g.out_extent(xs[3], ws[3])?;
    Some(vec![xs[0], ws[0], ho, wo])
}
