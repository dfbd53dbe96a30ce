//! Graph-convolutional layer: a local 3×3 convolution and the non-local
//! edge-conditioned branch, averaged, then batch norm and leaky ReLU.

use std::sync::Arc;

use crate::ecc::{EccShape, EccVars};
use crate::error::{Error, Result};
use crate::graph::NonLocalGraph;
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::rng::Stream;
use crate::tensor::{BnMode, BnStats, Scalar, Tape, Tensor, Var};

/// Forward-pass state shared by all layers of one pass.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    /// Parameter variables, indexed like the store they were bound from.
    pub vars: &'a [Var],
    pub stats: &'a mut [BnStats<T>],
    pub mode: BnMode,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl<T: Scalar> Ctx<'_, T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the model's running statistics.
    pub stats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EccIds {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub node_w: ParamId,
    pub node_b: ParamId,
}

/// Options for building a [`GcLayer`].
#[derive(Clone, Copy, Debug)]
pub struct GcLayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub fnet_hidden: usize,
    /// Circulant rows per stacked matrix, `None` for a dense output layer.
    pub circulant_rows: Option<usize>,
    pub batch_norm: bool,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcLayer {
    pub name: String,
    pub local_w: ParamId,
    pub local_b: ParamId,
    pub ecc: EccIds,
    pub ecc_shape: EccShape,
    pub bn: Option<BnLayer>,
    pub slope: f64,
}

impl GcLayer {
    /// Register the layer's parameters under `name.*`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        stats: &mut Vec<BnStats<T>>,
        name: &str,
        spec: GcLayerSpec,
        init: &Stream,
    ) -> Self {
        let GcLayerSpec { d_in, d_out, fnet_hidden: h, .. } = spec;
        let n_out = d_in * d_out;
        let rows = spec.circulant_rows.map(|r| crate::ecc::effective_rows(n_out, r.min(h)));
        let ecc_shape = EccShape { d_in, d_out, hidden: h, rows, slope: spec.slope };
        let mut p = |suffix: &str, shape: Vec<usize>, bound: f64| {
            let full = format!("{name}.{suffix}");
            let t = if bound > 0.0 { uniform_init(init, &full, shape, bound) } else { Tensor::zeros(shape) };
            store.add(full, t)
        };
        let fan = |n: usize| (3.0 / n as f64).sqrt();
        let local_w = p("local.weight", vec![d_out, d_in, 3, 3], fan(9 * d_in));
        let local_b = p("local.bias", vec![d_out], 0.0);
        let out_bound = match rows {
            Some(r) => (3.0 / (h * r) as f64).sqrt(),
            None => fan(h),
        };
        let ecc = EccIds {
            hidden_w: p("ecc.fnet.hidden.weight", vec![h, d_in], fan(d_in)),
            hidden_b: p("ecc.fnet.hidden.bias", vec![h], 0.0),
            out_w: p("ecc.fnet.out.weight", ecc_shape.out_shape(), out_bound),
            node_w: p("ecc.node.weight", vec![d_out, d_in], fan(d_in)),
            node_b: p("ecc.node.bias", vec![d_out], 0.0),
        };
        let bn = spec.batch_norm.then(|| {
            let gamma = store.add(format!("{name}.bn.weight"), Tensor::full(vec![d_out], T::one()));
            let beta = store.add(format!("{name}.bn.bias"), Tensor::zeros(vec![d_out]));
            stats.push(BnStats::new(d_out));
            BnLayer { gamma, beta, stats: stats.len() - 1 }
        });
        GcLayer { name: name.to_string(), local_w, local_b, ecc, ecc_shape, bn, slope: spec.slope }
    }

    pub fn d_in(&self) -> usize {
        self.ecc_shape.d_in
    }

    pub fn d_out(&self) -> usize {
        self.ecc_shape.d_out
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, graphs: &[Arc<NonLocalGraph>]) -> Result<Var> {
        gc_layer_forward(ctx, self, x, graphs)
    }
}

/// `LReLU(BN((conv3x3(x) + ecc(x, graph)) / 2))`, one graph per sample.
pub fn gc_layer_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    layer: &GcLayer,
    x: Var,
    graphs: &[Arc<NonLocalGraph>],
) -> Result<Var> {
    let local = ctx.tape.conv2d(x, ctx.var(layer.local_w), ctx.var(layer.local_b), 1)?;
    let ids = layer.ecc;
    let vars = EccVars {
        hidden_w: ctx.var(ids.hidden_w),
        hidden_b: ctx.var(ids.hidden_b),
        out_w: ctx.var(ids.out_w),
        node_w: ctx.var(ids.node_w),
        node_b: ctx.var(ids.node_b),
    };
    let nonlocal = ctx.tape.ecc_aggregate(x, vars, layer.ecc_shape, graphs)?;
    let sum = ctx.tape.add(local, nonlocal)?;
    let mut y = ctx.tape.scale(sum, 0.5)?;
    if let Some(bn) = &layer.bn {
        let (g, b) = (ctx.var(bn.gamma), ctx.var(bn.beta));
        let stats = ctx
            .stats
            .get_mut(bn.stats)
            .ok_or_else(|| Error::Config(format!("missing batch-norm statistics for {}", layer.name)))?;
        y = ctx.tape.batch_norm(y, g, b, stats, ctx.mode, ctx.bn_eps, ctx.bn_momentum, &layer.name)?;
    }
    ctx.tape.leaky_relu(y, layer.slope)
}

/// Boolean per-pixel mask of the input pixels an output pixel depends on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl ReceptiveMask {
    pub fn empty(height: usize, width: usize) -> Self {
        ReceptiveMask { height, width, bits: vec![false; height * width] }
    }

    pub fn seed(height: usize, width: usize, row: usize, col: usize) -> Self {
        let mut m = Self::empty(height, width);
        m.set(row, col);
        m
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize) {
        self.bits[row * self.width + col] = true;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_subset_of(&self, other: &ReceptiveMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Active pixels as row-major indices.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// The `(2r+1)²` square around `(row, col)`, clipped.
    pub fn square(height: usize, width: usize, row: usize, col: usize, radius: usize) -> Self {
        let mut m = Self::empty(height, width);
        for r in row.saturating_sub(radius)..(row + radius + 1).min(height) {
            for c in col.saturating_sub(radius)..(col + radius + 1).min(width) {
                m.set(r, c);
            }
        }
        m
    }

    /// Union of two masks of the same size.
    pub fn union(&self, other: &ReceptiveMask) -> ReceptiveMask {
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        ReceptiveMask { height: self.height, width: self.width, bits }
    }
}

/// One layer of dependency propagation: dilate by the `kernel_extent` ×
/// `kernel_extent` footprint and add the graph neighbors of every active
/// pixel.
pub fn receptive_mask_step(mask: &ReceptiveMask, graph: &NonLocalGraph, kernel_extent: usize) -> ReceptiveMask {
    let (h, w) = (mask.height, mask.width);
    let r = kernel_extent / 2;
    let mut out = ReceptiveMask::empty(h, w);
    for i in mask.active() {
        let (row, col) = (i / w, i % w);
        for rr in row.saturating_sub(r)..(row + r + 1).min(h) {
            for cc in col.saturating_sub(r)..(col + r + 1).min(w) {
                out.set(rr, cc);
            }
        }
        if graph.len() == h * w {
            for &j in graph.neighbors(i) {
                out.bits[j as usize] = true;
            }
        }
    }
    out
}
