//! Edge-conditioned convolution.
//!
//! For pixel `i` with non-local neighbors `N_i`:
//!
//! ```text
//! out_i = (1/|N_i|) Σ_{j ∈ N_i} Θ(H_j − H_i) · H_j  +  W · H_i  +  b
//! ```
//!
//! where `Θ(·)` is produced by the filter-generating network `F`: a dense
//! hidden layer with leaky ReLU followed by an output layer whose
//! `(d_out·d_in) × h` matrix is a vertical stack of row-subsampled circulant
//! matrices. Row `j` of stacked matrix `m` is generator `m` cyclically shifted
//! right by `j`, and only rows `0..r` of each circulant are kept.
//!
//! The layer nonlinearity is applied by the caller, not here.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::NonLocalGraph;
use crate::tensor::{dims4, gemm, lit, BackwardFn, Scalar, Tape, Tensor, Var};

/// `H_j − H_i`.
pub fn edge_label<T: Scalar>(h_i: &[T], h_j: &[T]) -> Vec<T> {
    debug_assert_eq!(h_i.len(), h_j.len());
    h_j.iter().zip(h_i).map(|(&a, &b)| a - b).collect()
}

/// Largest divisor of `n_out` not exceeding `rows`, so that a stack of
/// `n_out / r` circulants with `r` rows each covers `n_out` exactly.
/// A circulant over `n_in` columns has at most `n_in` distinct rows, so
/// callers should pass `rows ≤ n_in`.
pub fn effective_rows(n_out: usize, rows: usize) -> usize {
    (1..=rows.max(1)).rev().find(|&r| n_out.is_multiple_of(r)).unwrap_or(1)
}

/// Parameters of a circulant-stacked `n_out × n_in` layer.
pub fn circulant_param_count(n_in: usize, n_out: usize, rows: usize) -> usize {
    n_out / effective_rows(n_out, rows.min(n_in)) * n_in
}

/// Parameters of an unstructured `n_out × n_in` layer.
pub fn dense_param_count(n_in: usize, n_out: usize) -> usize {
    n_in * n_out
}

// out[m·r + j] = Σ_t g_m[(t − j) mod n] · x[t]
#[inline]
fn circ_forward<T: Scalar>(gens: &[T], n_in: usize, r: usize, x: &[T], out: &mut [T]) {
    for (m, g) in gens.chunks_exact(n_in).enumerate() {
        for j in 0..r {
            let head: T = g[..n_in - j].iter().zip(&x[j..]).map(|(&a, &b)| a * b).sum();
            let tail: T = g[n_in - j..].iter().zip(&x[..j]).map(|(&a, &b)| a * b).sum();
            out[m * r + j] = head + tail;
        }
    }
}

// dx[t] += Σ dθ[m·r + j] · g_m[(t − j) mod n]
// dg_m[s] += Σ_j dθ[m·r + j] · x[(s + j) mod n]
#[inline]
fn circ_backward<T: Scalar>(
    gens: &[T],
    n_in: usize,
    r: usize,
    x: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dgens: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        for (m, g) in gens.chunks_exact(n_in).enumerate() {
            for j in 0..r {
                let d = dout[m * r + j];
                if d == T::zero() {
                    continue;
                }
                for (o, &gv) in dx[j..].iter_mut().zip(&g[..n_in - j]) {
                    *o += d * gv;
                }
                for (o, &gv) in dx[..j].iter_mut().zip(&g[n_in - j..]) {
                    *o += d * gv;
                }
            }
        }
    }
    if let Some(dg) = dgens {
        for (m, dgm) in dg.chunks_exact_mut(n_in).enumerate() {
            for j in 0..r {
                let d = dout[m * r + j];
                if d == T::zero() {
                    continue;
                }
                for (o, &xv) in dgm[..n_in - j].iter_mut().zip(&x[j..]) {
                    *o += d * xv;
                }
                for (o, &xv) in dgm[n_in - j..].iter_mut().zip(&x[..j]) {
                    *o += d * xv;
                }
            }
        }
    }
}

/// Vertical stack of `M` row-subsampled circulant matrices, `r` rows each.
#[derive(Clone, Debug, PartialEq)]
pub struct CirculantStack<T: Scalar> {
    generators: Tensor<T>,
    rows_per_matrix: usize,
}

impl<T: Scalar> CirculantStack<T> {
    /// `generators` is `[M, n_in]`.
    pub fn new(generators: Tensor<T>, rows_per_matrix: usize) -> Result<Self> {
        if generators.rank() != 2 || rows_per_matrix == 0 || rows_per_matrix > generators.shape()[1] {
            return Err(Error::shape(
                "circulant",
                format!("generators {:?} with {rows_per_matrix} rows", generators.shape()),
            ));
        }
        Ok(CirculantStack { generators, rows_per_matrix })
    }

    pub fn generators(&self) -> &Tensor<T> {
        &self.generators
    }

    pub fn n_matrices(&self) -> usize {
        self.generators.shape()[0]
    }

    pub fn rows_per_matrix(&self) -> usize {
        self.rows_per_matrix
    }

    pub fn n_in(&self) -> usize {
        self.generators.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.n_matrices() * self.rows_per_matrix
    }

    pub fn param_count(&self) -> usize {
        self.generators.len()
    }

    /// Matrix-vector product without forming the dense matrix.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.n_in() {
            return Err(Error::shape(
                "circulant_apply",
                format!("input length {} for {} columns", x.len(), self.n_in()),
            ));
        }
        let mut out = vec![T::zero(); self.n_out()];
        circ_forward(self.generators.data(), self.n_in(), self.rows_per_matrix, x, &mut out);
        Ok(out)
    }

    /// Explicit `(M·r) × n_in` matrix.
    pub fn expand_to_dense(&self) -> Tensor<T> {
        let (n, r) = (self.n_in(), self.rows_per_matrix);
        let g = self.generators.data();
        Tensor::from_fn(vec![self.n_out(), n], |idx| {
            let (row, t) = (idx / n, idx % n);
            let (m, j) = (row / r, row % r);
            g[m * n + (t + n - j % n) % n]
        })
    }
}

pub fn circulant_apply<T: Scalar>(stack: &CirculantStack<T>, x: &[T]) -> Result<Vec<T>> {
    stack.apply(x)
}

pub fn expand_to_dense<T: Scalar>(stack: &CirculantStack<T>) -> Tensor<T> {
    stack.expand_to_dense()
}

/// Last layer of the filter-generating network.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputLayer<T: Scalar> {
    Circulant(CirculantStack<T>),
    /// Unstructured `[n_out, h]` matrix.
    Dense(Tensor<T>),
}

impl<T: Scalar> OutputLayer<T> {
    pub fn param_count(&self) -> usize {
        match self {
            OutputLayer::Circulant(c) => c.param_count(),
            OutputLayer::Dense(w) => w.len(),
        }
    }

    fn weights(&self) -> (&[T], Option<usize>) {
        match self {
            OutputLayer::Circulant(c) => (c.generators.data(), Some(c.rows_per_matrix)),
            OutputLayer::Dense(w) => (w.data(), None),
        }
    }
}

/// Filter-generating network `F: R^{d_in} → R^{d_out × d_in}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FNet<T: Scalar> {
    pub hidden_w: Tensor<T>,
    pub hidden_b: Tensor<T>,
    pub output: OutputLayer<T>,
    pub d_in: usize,
    pub d_out: usize,
    pub slope: f64,
}

impl<T: Scalar> FNet<T> {
    pub fn hidden(&self) -> usize {
        self.hidden_b.len()
    }

    fn shape(&self) -> Result<EccShape> {
        let h = self.hidden();
        let (out_w, rows) = self.output.weights();
        let shape = EccShape { d_in: self.d_in, d_out: self.d_out, hidden: h, rows, slope: self.slope };
        if self.hidden_w.shape() != [h, self.d_in] {
            return Err(Error::shape("fnet", format!("hidden weight {:?}", self.hidden_w.shape())));
        }
        if out_w.len() != shape.out_len() {
            return Err(Error::shape(
                "fnet",
                format!("output layer has {} weights, expected {}", out_w.len(), shape.out_len()),
            ));
        }
        Ok(shape)
    }
}

/// Weights of one edge-conditioned convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EccParams<T: Scalar> {
    pub fnet: FNet<T>,
    pub node_transform: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Dimensions of an ECC layer. `rows` is the circulant row count, `None` for
/// an unstructured output layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EccShape {
    pub d_in: usize,
    pub d_out: usize,
    pub hidden: usize,
    pub rows: Option<usize>,
    pub slope: f64,
}

impl EccShape {
    pub fn n_out(&self) -> usize {
        self.d_in * self.d_out
    }

    /// Number of output-layer weights.
    pub fn out_len(&self) -> usize {
        match self.rows {
            Some(r) => self.n_out() / r * self.hidden,
            None => self.n_out() * self.hidden,
        }
    }

    /// Shape of the output-layer weight tensor.
    pub fn out_shape(&self) -> Vec<usize> {
        match self.rows {
            Some(r) => vec![self.n_out() / r, self.hidden],
            None => vec![self.n_out(), self.hidden],
        }
    }
}

/// Borrowed weights of an ECC layer.
#[derive(Clone, Copy)]
struct Weights<'a, T> {
    hidden_w: &'a [T],
    hidden_b: &'a [T],
    out_w: &'a [T],
    node_w: &'a [T],
    node_b: &'a [T],
}

/// Per-edge scratch buffers.
struct Scratch<T> {
    label: Vec<T>,
    z: Vec<T>,
    a: Vec<T>,
    theta: Vec<T>,
}

impl<T: Scalar> Scratch<T> {
    fn new(s: &EccShape) -> Self {
        Scratch {
            label: vec![T::zero(); s.d_in],
            z: vec![T::zero(); s.hidden],
            a: vec![T::zero(); s.hidden],
            theta: vec![T::zero(); s.n_out()],
        }
    }
}

/// `theta = F(label)` with intermediates left in `sc`.
#[inline]
fn filter<T: Scalar>(s: &EccShape, w: &Weights<T>, sc: &mut Scratch<T>) {
    let slope = lit::<T>(s.slope);
    for (o, (z, a)) in sc.z.iter_mut().zip(sc.a.iter_mut()).enumerate() {
        let row = &w.hidden_w[o * s.d_in..(o + 1) * s.d_in];
        *z = w.hidden_b[o] + row.iter().zip(&sc.label).map(|(&p, &q)| p * q).sum::<T>();
        *a = if *z > T::zero() { *z } else { *z * slope };
    }
    match s.rows {
        Some(r) => circ_forward(w.out_w, s.hidden, r, &sc.a, &mut sc.theta),
        None => {
            for (o, t) in sc.theta.iter_mut().enumerate() {
                let row = &w.out_w[o * s.hidden..(o + 1) * s.hidden];
                *t = row.iter().zip(&sc.a).map(|(&p, &q)| p * q).sum();
            }
        }
    }
}

/// Gradient accumulators of one sample.
struct Grads<T> {
    hidden_w: Vec<T>,
    hidden_b: Vec<T>,
    out_w: Vec<T>,
    node_w: Vec<T>,
    node_b: Vec<T>,
    x: Vec<T>,
}

fn check_inputs<T: Scalar>(
    s: &EccShape,
    x: &Tensor<T>,
    graphs: &[Arc<NonLocalGraph>],
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = dims4(x, "ecc_aggregate")?;
    if c != s.d_in {
        return Err(Error::shape("ecc_aggregate", format!("input has {c} channels, layer expects {}", s.d_in)));
    }
    if graphs.len() != n {
        return Err(Error::shape("ecc_aggregate", format!("{} graphs for batch of {n}", graphs.len())));
    }
    for g in graphs {
        if (g.height(), g.width()) != (h, w) {
            return Err(Error::shape(
                "ecc_aggregate",
                format!("graph is {}x{}, features are {h}x{w}", g.height(), g.width()),
            ));
        }
    }
    Ok((n, h, w))
}

fn to_pixel_major<T: Scalar>(planar: &[T], channels: usize, pixels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planar.len()];
    for c in 0..channels {
        for p in 0..pixels {
            out[p * channels + c] = planar[c * pixels + p];
        }
    }
    out
}

fn to_planar<T: Scalar>(pm: &[T], channels: usize, pixels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); pm.len()];
    for p in 0..pixels {
        for c in 0..channels {
            out[c * pixels + p] = pm[p * channels + c];
        }
    }
    out
}

/// Output layer as a dense `[d_out, d_in·h]` matrix (the `[n_out, h]` filter
/// matrix with rows grouped by output channel).
fn dense_output<T: Scalar>(s: &EccShape, out_w: &[T]) -> Vec<T> {
    let h = s.hidden;
    match s.rows {
        None => out_w.to_vec(),
        Some(r) => {
            let mut dense = vec![T::zero(); s.n_out() * h];
            for (row, d) in dense.chunks_exact_mut(h).enumerate() {
                let g = &out_w[(row / r) * h..(row / r + 1) * h];
                let j = row % r;
                d[j..].copy_from_slice(&g[..h - j]);
                d[..j].copy_from_slice(&g[h - j..]);
            }
            dense
        }
    }
}

/// Gradient of [`dense_output`] folded back onto the stored weights.
fn fold_output<T: Scalar>(s: &EccShape, dense: &[T], out: &mut [T]) {
    let h = s.hidden;
    match s.rows {
        None => out.iter_mut().zip(dense).for_each(|(o, &d)| *o += d),
        Some(r) => {
            for (row, d) in dense.chunks_exact(h).enumerate() {
                let g = &mut out[(row / r) * h..(row / r + 1) * h];
                let j = row % r;
                g[..h - j].iter_mut().zip(&d[j..]).for_each(|(o, &v)| *o += v);
                g[h - j..].iter_mut().zip(&d[..j]).for_each(|(o, &v)| *o += v);
            }
        }
    }
}

/// Pixels per block of the edge computations; bounds scratch memory.
const BLOCK: usize = 256;

/// Edge quantities of pixels `p0..p1` in pixel-major layout: labels
/// `L[e, d_in]`, hidden pre-activations `Z[e, h]` and activations `A[e, h]`
/// with `e` running over `(pixel, neighbor)` pairs, and the per-pixel sums
/// `S[p, c·h + t] = (1/k) Σ_j x_j[c]·A_j[t]`.
struct EdgeBlock<T> {
    label: Vec<T>,
    z: Vec<T>,
    a: Vec<T>,
    sums: Vec<T>,
}

fn edge_block<T: Scalar>(
    s: &EccShape,
    w: &Weights<T>,
    xp: &[T],
    graph: &NonLocalGraph,
    p0: usize,
    p1: usize,
) -> EdgeBlock<T> {
    let (d, h, k) = (s.d_in, s.hidden, graph.k());
    let edges = (p1 - p0) * k;
    let mut label = vec![T::zero(); edges * d];
    for (e, l) in label.chunks_exact_mut(d).enumerate() {
        let i = p0 + e / k;
        let j = graph.neighbors(i)[e % k] as usize;
        for ((l, &a), &b) in l.iter_mut().zip(&xp[j * d..(j + 1) * d]).zip(&xp[i * d..(i + 1) * d]) {
            *l = a - b;
        }
    }
    let mut z = vec![T::zero(); edges * h];
    for row in z.chunks_exact_mut(h) {
        row.copy_from_slice(w.hidden_b);
    }
    gemm(edges, d, h, (&label, d, 1), (w.hidden_w, 1, d), (&mut z, h, 1), true);
    let slope = lit::<T>(s.slope);
    let a: Vec<T> = z.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
    let inv_k = T::one() / lit::<T>(k as f64);
    let mut sums = vec![T::zero(); (p1 - p0) * d * h];
    for (p, srow) in sums.chunks_exact_mut(d * h).enumerate() {
        let i = p0 + p;
        for (e, &j) in graph.neighbors(i).iter().enumerate() {
            let aj = &a[(p * k + e) * h..(p * k + e + 1) * h];
            let xj = &xp[j as usize * d..(j as usize + 1) * d];
            for (c, sc) in srow.chunks_exact_mut(h).enumerate() {
                let f = xj[c] * inv_k;
                sc.iter_mut().zip(aj).for_each(|(o, &v)| *o += f * v);
            }
        }
    }
    EdgeBlock { label, z, a, sums }
}

/// Forward pass over one sample; returns planar output and the kink signs of
/// every hidden pre-activation.
fn forward_sample<T: Scalar>(
    s: &EccShape,
    w: &Weights<T>,
    x_planar: &[T],
    graph: &NonLocalGraph,
    kinks: bool,
) -> (Vec<T>, Vec<bool>) {
    let pixels = graph.len();
    let (d_in, d_out, k) = (s.d_in, s.d_out, graph.k());
    let xp = to_pixel_major(x_planar, d_in, pixels);
    let mut out = vec![T::zero(); pixels * d_out];
    for row in out.chunks_exact_mut(d_out) {
        row.copy_from_slice(w.node_b);
    }
    gemm(pixels, d_in, d_out, (&xp, d_in, 1), (w.node_w, 1, d_in), (&mut out, d_out, 1), true);
    let mut signs = Vec::new();
    if k > 0 {
        let dense = dense_output(s, w.out_w);
        let dh = d_in * s.hidden;
        let blocks: Vec<Vec<bool>> = out
            .par_chunks_mut(BLOCK * d_out)
            .enumerate()
            .map(|(b, o)| {
                let (p0, p1) = (b * BLOCK, (b * BLOCK + BLOCK).min(pixels));
                let eb = edge_block(s, w, &xp, graph, p0, p1);
                gemm(p1 - p0, dh, d_out, (&eb.sums, dh, 1), (&dense, 1, dh), (o, d_out, 1), true);
                if kinks {
                    eb.z.iter().map(|&v| v > T::zero()).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        signs = blocks.concat();
    }
    (to_planar(&out, d_out, pixels), signs)
}

fn backward_sample<T: Scalar>(
    s: &EccShape,
    w: &Weights<T>,
    x_planar: &[T],
    g_planar: &[T],
    graph: &NonLocalGraph,
) -> Grads<T> {
    let pixels = graph.len();
    let (d, d_out, h, k) = (s.d_in, s.d_out, s.hidden, graph.k());
    let xp = to_pixel_major(x_planar, d, pixels);
    let gp = to_pixel_major(g_planar, d_out, pixels);
    let mut gr = Grads {
        hidden_w: vec![T::zero(); w.hidden_w.len()],
        hidden_b: vec![T::zero(); w.hidden_b.len()],
        out_w: vec![T::zero(); w.out_w.len()],
        node_w: vec![T::zero(); w.node_w.len()],
        node_b: vec![T::zero(); d_out],
        x: vec![T::zero(); pixels * d],
    };
    // node term
    gemm(d_out, pixels, d, (&gp, 1, d_out), (&xp, d, 1), (&mut gr.node_w, d, 1), false);
    for g in gp.chunks_exact(d_out) {
        gr.node_b.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
    }
    gemm(pixels, d_out, d, (&gp, d_out, 1), (w.node_w, d, 1), (&mut gr.x, d, 1), false);
    if k == 0 {
        gr.x = to_planar(&gr.x, d, pixels);
        return gr;
    }

    let dense = dense_output(s, w.out_w);
    let dh = d * h;
    let mut d_dense = vec![T::zero(); d_out * dh];
    let slope = lit::<T>(s.slope);
    let inv_k = T::one() / lit::<T>(k as f64);
    for p0 in (0..pixels).step_by(BLOCK) {
        let p1 = (p0 + BLOCK).min(pixels);
        let n = p1 - p0;
        let eb = edge_block(s, w, &xp, graph, p0, p1);
        let g = &gp[p0 * d_out..p1 * d_out];
        gemm(d_out, n, dh, (g, 1, d_out), (&eb.sums, dh, 1), (&mut d_dense, dh, 1), true);
        let mut d_sums = vec![T::zero(); n * dh];
        gemm(n, d_out, dh, (g, d_out, 1), (&dense, dh, 1), (&mut d_sums, dh, 1), false);

        // back through S: dA_j[t] = (1/k) Σ_c dS[c, t]·x_j[c], dx_j[c] += (1/k) Σ_t dS[c, t]·A_j[t]
        let mut dz = vec![T::zero(); n * k * h];
        for p in 0..n {
            let ds = &d_sums[p * dh..(p + 1) * dh];
            for (e, &j) in graph.neighbors(p0 + p).iter().enumerate() {
                let j = j as usize;
                let row = p * k + e;
                let aj = &eb.a[row * h..(row + 1) * h];
                let da = &mut dz[row * h..(row + 1) * h];
                for (c, dsc) in ds.chunks_exact(h).enumerate() {
                    let xc = xp[j * d + c] * inv_k;
                    let mut acc = T::zero();
                    for ((o, &dv), &av) in da.iter_mut().zip(dsc).zip(aj) {
                        *o += xc * dv;
                        acc += dv * av;
                    }
                    gr.x[j * d + c] += acc * inv_k;
                }
            }
        }
        for (dv, &zv) in dz.iter_mut().zip(&eb.z) {
            if zv <= T::zero() {
                *dv *= slope;
            }
        }
        for row in dz.chunks_exact(h) {
            gr.hidden_b.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let edges = n * k;
        gemm(h, edges, d, (&dz, 1, h), (&eb.label, d, 1), (&mut gr.hidden_w, d, 1), true);
        let mut dl = vec![T::zero(); edges * d];
        gemm(edges, h, d, (&dz, h, 1), (w.hidden_w, d, 1), (&mut dl, d, 1), false);
        // label = x_j − x_i
        for (e, dle) in dl.chunks_exact(d).enumerate() {
            let i = p0 + e / k;
            let j = graph.neighbors(i)[e % k] as usize;
            for (c, &v) in dle.iter().enumerate() {
                gr.x[j * d + c] += v;
                gr.x[i * d + c] -= v;
            }
        }
    }
    fold_output(s, &d_dense, &mut gr.out_w);
    gr.x = to_planar(&gr.x, d, pixels);
    gr
}

/// Tape record for [`Tape::ecc_aggregate`].
struct EccOp {
    shape: EccShape,
    graphs: Vec<Arc<NonLocalGraph>>,
}

impl<T: Scalar> BackwardFn<T> for EccOp {
    fn name(&self) -> &'static str {
        "ecc_aggregate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let s = &self.shape;
        let x = inputs[0];
        let (n, h, wd) = check_inputs(s, x, &self.graphs)?;
        let w = Weights {
            hidden_w: inputs[1].data(),
            hidden_b: inputs[2].data(),
            out_w: inputs[3].data(),
            node_w: inputs[4].data(),
            node_b: inputs[5].data(),
        };
        let (in_len, out_len) = (s.d_in * h * wd, s.d_out * h * wd);
        let per: Vec<Grads<T>> = (0..n)
            .into_par_iter()
            .map(|b| {
                backward_sample(
                    s,
                    &w,
                    &x.data()[b * in_len..(b + 1) * in_len],
                    &grad.data()[b * out_len..(b + 1) * out_len],
                    &self.graphs[b],
                )
            })
            .collect();
        let mut it = per.into_iter();
        let mut total = it.next().expect("non-empty batch");
        for g in it {
            let add = |a: &mut Vec<T>, b: Vec<T>| a.iter_mut().zip(b).for_each(|(p, q)| *p += q);
            add(&mut total.hidden_w, g.hidden_w);
            add(&mut total.hidden_b, g.hidden_b);
            add(&mut total.out_w, g.out_w);
            add(&mut total.node_w, g.node_w);
            add(&mut total.node_b, g.node_b);
            total.x.extend(g.x);
        }
        let pack = |need: bool, like: &Tensor<T>, data: Vec<T>| -> Result<Option<Tensor<T>>> {
            need.then(|| Tensor::new(like.shape().to_vec(), data)).transpose()
        };
        Ok(vec![
            pack(needs[0], inputs[0], total.x)?,
            pack(needs[1], inputs[1], total.hidden_w)?,
            pack(needs[2], inputs[2], total.hidden_b)?,
            pack(needs[3], inputs[3], total.out_w)?,
            pack(needs[4], inputs[4], total.node_w)?,
            pack(needs[5], inputs[5], total.node_b)?,
        ])
    }
}

/// Tape variables of an ECC layer.
#[derive(Clone, Copy, Debug)]
pub struct EccVars {
    pub hidden_w: Var,
    pub hidden_b: Var,
    /// Circulant generators `[M, h]` or dense `[n_out, h]`.
    pub out_w: Var,
    pub node_w: Var,
    pub node_b: Var,
}

fn check_weights<T: Scalar>(s: &EccShape, t: [&Tensor<T>; 5]) -> Result<()> {
    let want = [vec![s.hidden, s.d_in], vec![s.hidden], s.out_shape(), vec![s.d_out, s.d_in], vec![s.d_out]];
    for (name, (t, want)) in ["hidden_w", "hidden_b", "out_w", "node_w", "node_b"].iter().zip(t.iter().zip(want)) {
        if t.shape() != want.as_slice() {
            return Err(Error::shape("ecc_aggregate", format!("{name} is {:?}, expected {want:?}", t.shape())));
        }
    }
    if let Some(r) = s.rows {
        if r == 0 || r > s.hidden || !s.n_out().is_multiple_of(r) {
            return Err(Error::shape("ecc_aggregate", format!("{r} rows do not tile {} outputs", s.n_out())));
        }
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// Batched ECC over `[N, d_in, H, W]`, one graph per sample.
    pub fn ecc_aggregate(
        &mut self,
        x: Var,
        vars: EccVars,
        shape: EccShape,
        graphs: &[Arc<NonLocalGraph>],
    ) -> Result<Var> {
        let xt = self.value(x);
        let (n, h, wd) = check_inputs(&shape, xt, graphs)?;
        let ts = [vars.hidden_w, vars.hidden_b, vars.out_w, vars.node_w, vars.node_b].map(|v| self.value(v));
        check_weights(&shape, ts)?;
        let w = Weights {
            hidden_w: ts[0].data(),
            hidden_b: ts[1].data(),
            out_w: ts[2].data(),
            node_w: ts[3].data(),
            node_b: ts[4].data(),
        };
        let in_len = shape.d_in * h * wd;
        let results: Vec<(Vec<T>, Vec<bool>)> = (0..n)
            .into_par_iter()
            .map(|b| forward_sample(&shape, &w, &xt.data()[b * in_len..(b + 1) * in_len], &graphs[b], true))
            .collect();
        let mut data = Vec::with_capacity(n * shape.d_out * h * wd);
        let mut signs = Vec::new();
        for (o, s) in results {
            data.extend(o);
            signs.extend(s);
        }
        self.note_kinks(signs);
        let out = Tensor::new(vec![n, shape.d_out, h, wd], data)?;
        let inputs = vec![x, vars.hidden_w, vars.hidden_b, vars.out_w, vars.node_w, vars.node_b];
        self.push(out, inputs, Box::new(EccOp { shape, graphs: graphs.to_vec() }))
    }

    /// Row-wise circulant-stack product: `x: [E, n_in]`, `generators: [M, n_in]`
    /// gives `[E, M·rows]`.
    pub fn circulant(&mut self, x: Var, generators: Var, rows: usize) -> Result<Var> {
        let (xt, gt) = (self.value(x), self.value(generators));
        let (&[e, n_in], &[m, n_in2]) = (xt.shape(), gt.shape()) else {
            return Err(Error::shape("circulant", "operands must be rank 2"));
        };
        if n_in != n_in2 || rows == 0 || rows > n_in {
            return Err(Error::shape("circulant", format!("x {:?}, generators {:?}", xt.shape(), gt.shape())));
        }
        let n_out = m * rows;
        let mut out = vec![T::zero(); e * n_out];
        for (row, o) in xt.data().chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
            circ_forward(gt.data(), n_in, rows, row, o);
        }
        let out = Tensor::new(vec![e, n_out], out)?;
        self.push(out, vec![x, generators], Box::new(CirculantOp { rows }))
    }
}

struct CirculantOp {
    rows: usize,
}

impl<T: Scalar> BackwardFn<T> for CirculantOp {
    fn name(&self) -> &'static str {
        "circulant"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, g) = (inputs[0], inputs[1]);
        let n_in = x.shape()[1];
        let n_out = grad.shape()[1];
        let mut dx = vec![T::zero(); x.len()];
        let mut dg = vec![T::zero(); g.len()];
        for ((row, d), dxr) in
            x.data().chunks_exact(n_in).zip(grad.data().chunks_exact(n_out)).zip(dx.chunks_exact_mut(n_in))
        {
            circ_backward(
                g.data(),
                n_in,
                self.rows,
                row,
                d,
                needs[0].then_some(dxr),
                needs[1].then_some(dg.as_mut_slice()),
            );
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), dx)).transpose()?,
            needs[1].then(|| Tensor::new(g.shape().to_vec(), dg)).transpose()?,
        ])
    }
}

/// `Θ = F(label)` as a `[d_out, d_in]` matrix.
pub fn fnet_forward<T: Scalar>(fnet: &FNet<T>, label: &[T]) -> Result<Tensor<T>> {
    let s = fnet.shape()?;
    if label.len() != s.d_in {
        return Err(Error::shape("fnet_forward", format!("label length {} for d_in {}", label.len(), s.d_in)));
    }
    let w = Weights {
        hidden_w: fnet.hidden_w.data(),
        hidden_b: fnet.hidden_b.data(),
        out_w: fnet.output.weights().0,
        node_w: &[],
        node_b: &[],
    };
    let mut sc = Scratch::new(&s);
    sc.label.copy_from_slice(label);
    filter(&s, &w, &mut sc);
    Tensor::new(vec![s.d_out, s.d_in], sc.theta)
}

/// Pre-activation ECC output over a `[d_in, H, W]` map (or a batch of one).
pub fn ecc_aggregate<T: Scalar>(
    features: &Tensor<T>,
    graph: &NonLocalGraph,
    params: &EccParams<T>,
) -> Result<Tensor<T>> {
    let s = params.fnet.shape()?;
    let x = match *features.shape() {
        [c, h, w] => features.clone().reshape(vec![1, c, h, w])?,
        _ => features.clone(),
    };
    let graphs = [Arc::new(graph.clone())];
    check_inputs(&s, &x, &graphs)?;
    if params.node_transform.shape() != [s.d_out, s.d_in] || params.bias.shape() != [s.d_out] {
        return Err(Error::shape("ecc_aggregate", "node transform or bias shape"));
    }
    let w = Weights {
        hidden_w: params.fnet.hidden_w.data(),
        hidden_b: params.fnet.hidden_b.data(),
        out_w: params.fnet.output.weights().0,
        node_w: params.node_transform.data(),
        node_b: params.bias.data(),
    };
    let (out, _) = forward_sample(&s, &w, x.data(), graph, false);
    let mut shape = features.shape().to_vec();
    let c_axis = shape.len() - 3;
    shape[c_axis] = s.d_out;
    Tensor::new(shape, out)
}
