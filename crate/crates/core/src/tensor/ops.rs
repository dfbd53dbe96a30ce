//! Elementwise and small dense ops recorded on the tape.

use super::tape::BackwardFn;
use super::{dims4, lit, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

struct AddOp {
    sign: f64,
}

impl<T: Scalar> BackwardFn<T> for AddOp {
    fn name(&self) -> &'static str {
        if self.sign > 0.0 {
            "add"
        } else {
            "sub"
        }
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let sign = lit::<T>(self.sign);
        Ok(vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.map(|g| g * sign))])
    }
}

struct ScaleOp {
    factor: f64,
}

impl<T: Scalar> BackwardFn<T> for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let f = lit::<T>(self.factor);
        Ok(vec![Some(grad.map(|g| g * f))])
    }
}

struct LeakyReluOp {
    slope: f64,
}

impl<T: Scalar> BackwardFn<T> for LeakyReluOp {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let slope = lit::<T>(self.slope);
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { g * slope })
            .collect();
        Ok(vec![Some(Tensor::new(grad.shape().to_vec(), data)?)])
    }
}

struct MatmulOp;

impl<T: Scalar> BackwardFn<T> for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let g = grad.data();
        let ga = needs[0].then(|| {
            // dA = G · Bᵀ
            Tensor::from_fn(vec![m, k], |idx| {
                let (i, p) = (idx / k, idx % k);
                (0..n).map(|j| g[i * n + j] * b.data()[p * n + j]).sum()
            })
        });
        let gb = needs[1].then(|| {
            // dB = Aᵀ · G
            Tensor::from_fn(vec![k, n], |idx| {
                let (p, j) = (idx / n, idx % n);
                (0..m).map(|i| a.data()[i * k + p] * g[i * n + j]).sum()
            })
        });
        Ok(vec![ga, gb])
    }
}

struct LinearOp;

impl<T: Scalar> BackwardFn<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (rows, n_in) = (x.shape()[0], x.shape()[1]);
        let n_out = w.shape()[0];
        let (xd, wd, g) = (x.data(), w.data(), grad.data());
        let gx = needs[0].then(|| {
            Tensor::from_fn(vec![rows, n_in], |idx| {
                let (e, c) = (idx / n_in, idx % n_in);
                (0..n_out).map(|o| g[e * n_out + o] * wd[o * n_in + c]).sum()
            })
        });
        let gw = needs[1].then(|| {
            Tensor::from_fn(vec![n_out, n_in], |idx| {
                let (o, c) = (idx / n_in, idx % n_in);
                (0..rows).map(|e| g[e * n_out + o] * xd[e * n_in + c]).sum()
            })
        });
        let gb = needs[2].then(|| Tensor::from_fn(vec![n_out], |o| (0..rows).map(|e| g[e * n_out + o]).sum()));
        Ok(vec![gx, gw, gb])
    }
}

struct ConcatOp {
    channels: Vec<usize>,
}

impl<T: Scalar> BackwardFn<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            out.push(if need { Some(grad.slice_channels(start, start + c)?) } else { None });
            start += c;
        }
        Ok(out)
    }
}

struct MseOp;

impl<T: Scalar> BackwardFn<T> for MseOp {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let scale = grad.item() * lit::<T>(2.0) / lit::<T>(a.len() as f64);
        let diff: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * scale).collect();
        let ga = Tensor::new(a.shape().to_vec(), diff)?;
        let gb = needs[1].then(|| ga.map(|v| -v));
        Ok(vec![needs[0].then_some(ga), gb])
    }
}

struct SumOp;

impl<T: Scalar> BackwardFn<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape().to_vec(), grad.item()))])
    }
}

struct ReshapeOp;

impl<T: Scalar> BackwardFn<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone().reshape(inputs[0].shape().to_vec())?)])
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_signed(a, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_signed(a, b, -1.0)
    }

    fn add_signed(&mut self, a: Var, b: Var, sign: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(if sign > 0.0 { "add" } else { "sub" }, ta, tb)?;
        let s = lit::<T>(sign);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, vec![a, b], Box::new(AddOp { sign }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = lit::<T>(factor);
        let out = self.value(a).map(|v| v * f);
        self.push(out, vec![a], Box::new(ScaleOp { factor }))
    }

    /// Elementwise `max(x, slope·x)`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!("leaky ReLU slope {slope} not in (0, 1)")));
        }
        let s = lit::<T>(slope);
        let t = self.value(x);
        let out = t.map(|v| if v > T::zero() { v } else { v * s });
        let above: Vec<bool> = t.data().iter().map(|&v| v > T::zero()).collect();
        self.note_kinks(above);
        self.push(out, vec![x], Box::new(LeakyReluOp { slope }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape("matmul", "operands must be rank 2"));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, vec![a, b], Box::new(MatmulOp))
    }

    /// Row-wise affine map `x · wᵀ + b` for `x: [rows, n_in]`, `w: [n_out, n_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[rows, n_in], &[n_out, n_in2]) = (tx.shape(), tw.shape()) else {
            return Err(Error::shape("linear", "input and weight must be rank 2"));
        };
        if n_in != n_in2 || tb.shape() != [n_out] {
            return Err(Error::shape("linear", format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape())));
        }
        let mut out = Vec::with_capacity(rows * n_out);
        for e in 0..rows {
            let xr = &tx.data()[e * n_in..(e + 1) * n_in];
            for o in 0..n_out {
                let wr = &tw.data()[o * n_in..(o + 1) * n_in];
                out.push(tb.data()[o] + xr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>());
            }
        }
        let out = Tensor::new(vec![rows, n_out], out)?;
        self.push(out, vec![x, w, b], Box::new(LinearOp))
    }

    /// Concatenate `[N, C_i, H, W]` maps along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let (n, _, h, w) = dims4(self.value(*first), "concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = dims4(self.value(p), "concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.value(p).shape(), self.value(*first).shape()),
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let d = self.value(p).data();
                data.extend_from_slice(&d[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let out = Tensor::new(vec![n, total, h, w], data)?;
        self.push(out, parts.to_vec(), Box::new(ConcatOp { channels }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mse", ta, tb)?;
        let total: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(total / lit::<T>(ta.len() as f64));
        self.push(out, vec![a, b], Box::new(MseOp))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().copied().sum());
        self.push(out, vec![a], Box::new(SumOp))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, vec![a], Box::new(ReshapeOp))
    }
}
