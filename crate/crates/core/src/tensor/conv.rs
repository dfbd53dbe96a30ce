//! Same-size 2-D cross-correlation with zero padding.

use rayon::prelude::*;

use super::tape::BackwardFn;
use super::{dims4, gemm, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    ks: usize,
    pad: usize,
}

impl Geometry {
    fn check<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>, pad: usize) -> Result<Self> {
        let (n, c_in, h, w) = dims4(x, "conv2d")?;
        let &[c_out, kc, kh, kw] = k.shape() else {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {:?}", k.shape())));
        };
        if kc != c_in {
            return Err(Error::shape("conv2d", format!("input has {c_in} channels, kernel expects {kc}")));
        }
        if kh != kw || kh % 2 == 0 || pad != (kh - 1) / 2 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} with padding {pad} does not preserve size")));
        }
        if b.shape() != [c_out] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}", b.shape())));
        }
        Ok(Geometry { n, c_in, c_out, h, w, ks: kh, pad })
    }

    /// Valid `(y_lo, y_hi, x_lo, x_hi)` output ranges for tap offset `(dy, dx)`,
    /// such that `(y + dy, x + dx)` stays inside the image.
    #[inline]
    fn ranges(&self, dy: isize, dx: isize) -> (usize, usize, usize, usize) {
        let (h, w) = (self.h as isize, self.w as isize);
        let y_lo = (-dy).max(0) as usize;
        let y_hi = (h - dy).min(h).max(0) as usize;
        let x_lo = (-dx).max(0) as usize;
        let x_hi = (w - dx).min(w).max(0) as usize;
        (y_lo, y_hi, x_lo, x_hi)
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let p = self.pad as isize;
        (0..self.ks * self.ks).map(move |t| ((t), (t / self.ks) as isize - p, (t % self.ks) as isize - p))
    }
}

/// `cols[(c·k² + t), p]`: input channel `c` shifted by tap `t`, zero outside.
fn im2col<T: Scalar>(g: &Geometry, x: &[T]) -> Vec<T> {
    let plane = g.h * g.w;
    let kk = g.ks * g.ks;
    let mut cols = vec![T::zero(); g.c_in * kk * plane];
    for c in 0..g.c_in {
        let xp = &x[c * plane..(c + 1) * plane];
        for (t, dy, dx) in g.taps() {
            let dst = &mut cols[(c * kk + t) * plane..(c * kk + t + 1) * plane];
            let (y_lo, y_hi, x_lo, x_hi) = g.ranges(dy, dx);
            let sx0 = (x_lo as isize + dx) as usize;
            for y in y_lo..y_hi {
                let sy = (y as isize + dy) as usize;
                dst[y * g.w + x_lo..y * g.w + x_hi].copy_from_slice(&xp[sy * g.w + sx0..sy * g.w + sx0 + x_hi - x_lo]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input planes.
fn col2im<T: Scalar>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let plane = g.h * g.w;
    let kk = g.ks * g.ks;
    for c in 0..g.c_in {
        let dp = &mut dx[c * plane..(c + 1) * plane];
        for (t, dy, dxo) in g.taps() {
            let src = &cols[(c * kk + t) * plane..(c * kk + t + 1) * plane];
            let (y_lo, y_hi, x_lo, x_hi) = g.ranges(dy, dxo);
            let sx0 = (x_lo as isize + dxo) as usize;
            for y in y_lo..y_hi {
                let sy = (y as isize + dy) as usize;
                let d = &mut dp[sy * g.w + sx0..sy * g.w + sx0 + x_hi - x_lo];
                d.iter_mut().zip(&src[y * g.w + x_lo..y * g.w + x_hi]).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

fn forward_sample<T: Scalar>(g: &Geometry, x: &[T], k: &[T], b: &[T], out: &mut [T]) {
    let plane = g.h * g.w;
    let depth = g.c_in * g.ks * g.ks;
    for (o, row) in out.chunks_exact_mut(plane).enumerate() {
        row.fill(b[o]);
    }
    let cols = im2col(g, x);
    gemm(g.c_out, depth, plane, (k, depth, 1), (&cols, plane, 1), (out, plane, 1), true);
}

/// Plain forward pass over `[N, C_in, H, W]` with a `[C_out, C_in, k, k]` kernel.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, padding: usize) -> Result<Tensor<T>> {
    let g = Geometry::check(x, kernel, bias, padding)?;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.h * g.w;
    let mut out = vec![T::zero(); g.n * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(s, o)| forward_sample(&g, &x.data()[s * in_len..(s + 1) * in_len], kernel.data(), bias.data(), o));
    Tensor::new(vec![g.n, g.c_out, g.h, g.w], out)
}

/// Tape record for [`conv2d`].
pub struct Conv2dOp {
    padding: usize,
}

impl<T: Scalar> BackwardFn<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, k, b) = (inputs[0], inputs[1], inputs[2]);
        let g = Geometry::check(x, k, b, self.padding)?;
        let plane = g.h * g.w;
        let kk = g.ks * g.ks;
        let in_len = g.c_in * plane;
        let out_len = g.c_out * plane;

        let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..g.n)
            .into_par_iter()
            .map(|s| {
                let xs = &x.data()[s * in_len..(s + 1) * in_len];
                let gs = &grad.data()[s * out_len..(s + 1) * out_len];
                let depth = g.c_in * kk;
                let cols = im2col(&g, xs);
                let mut dk = if needs[1] { vec![T::zero(); k.len()] } else { Vec::new() };
                if needs[1] {
                    gemm(g.c_out, plane, depth, (gs, plane, 1), (&cols, 1, plane), (&mut dk, depth, 1), false);
                }
                let mut dx = if needs[0] { vec![T::zero(); in_len] } else { Vec::new() };
                if needs[0] {
                    let mut dcols = cols;
                    gemm(depth, g.c_out, plane, (k.data(), 1, depth), (gs, plane, 1), (&mut dcols, plane, 1), false);
                    col2im(&g, &dcols, &mut dx);
                }
                let db: Vec<T> = if needs[2] {
                    (0..g.c_out).map(|o| gs[o * plane..(o + 1) * plane].iter().copied().sum()).collect()
                } else {
                    Vec::new()
                };
                (dx, dk, db)
            })
            .collect();

        let mut dx = needs[0].then(|| Vec::with_capacity(x.len()));
        let mut dk = needs[1].then(|| vec![T::zero(); k.len()]);
        let mut db = needs[2].then(|| vec![T::zero(); g.c_out]);
        for (sdx, sdk, sdb) in per_sample {
            if let Some(dx) = &mut dx {
                dx.extend(sdx);
            }
            if let Some(dk) = &mut dk {
                dk.iter_mut().zip(sdk).for_each(|(a, v)| *a += v);
            }
            if let Some(db) = &mut db {
                db.iter_mut().zip(sdb).for_each(|(a, v)| *a += v);
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
            dk.map(|d| Tensor::new(k.shape().to_vec(), d)).transpose()?,
            db.map(|d| Tensor::new(b.shape().to_vec(), d)).transpose()?,
        ])
    }
}

impl<T: Scalar> Tape<T> {
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(kernel), self.value(bias), padding)?;
        self.push(out, vec![x, kernel, bias], Box::new(Conv2dOp { padding }))
    }
}
