//! The full denoiser: multiscale preprocessing branches, graph-convolutional
//! residual stages that share one non-local graph per stage, and a 3×3 head
//! that estimates the noise. The denoised image is `noisy − noise`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ecc;
use crate::error::{Error, Result};
use crate::graph::{knn_from_planar, NlgConfig, NonLocalGraph};
use crate::layer::{Ctx, GcLayer, GcLayerSpec};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::rng::Stream;
use crate::tensor::{BnMode, BnStats, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Circulant,
    Dense,
}

/// Which features the preprocessing GC layers build their graph on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreproGraph {
    /// One graph on the raw input intensities, shared by all branches.
    Input,
    /// One graph per branch on that branch's convolution features.
    Branch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub prepro_branch_channels: usize,
    pub trunk_channels: usize,
    pub branch_kernels: Vec<usize>,
    pub n_graph_stages: usize,
    pub res_blocks_per_stage: usize,
    pub layers_per_res_block: usize,
    pub slope: f64,
    pub seed: u64,
    /// Hidden width of the filter-generating network; 0 means `d_in`.
    pub fnet_hidden: usize,
    pub circulant_rows: usize,
    /// Multiplier on the fan-in bound of the head's initial weights. A small
    /// value starts training from a near-zero noise estimate.
    pub head_init_scale: f64,
    pub output_layer: OutputKind,
    pub prepro_graph: PreproGraph,
    pub batch_norm: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub nlg: NlgConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            prepro_branch_channels: 22,
            trunk_channels: 66,
            branch_kernels: vec![3, 5, 7],
            n_graph_stages: 2,
            res_blocks_per_stage: 2,
            layers_per_res_block: 3,
            slope: 0.2,
            seed: 0,
            fnet_hidden: 0,
            circulant_rows: 3,
            head_init_scale: 0.01,
            output_layer: OutputKind::Circulant,
            prepro_graph: PreproGraph::Input,
            batch_norm: true,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            nlg: NlgConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prepro_branch_channels * self.branch_kernels.len() != self.trunk_channels {
            return Err(Error::Config(format!(
                "{} branches x {} channels != trunk width {}",
                self.branch_kernels.len(),
                self.prepro_branch_channels,
                self.trunk_channels
            )));
        }
        if self.trunk_channels == 0 {
            return Err(Error::Config("trunk width must be positive".into()));
        }
        if self.layers_per_res_block == 0 {
            return Err(Error::Config("layers_per_res_block must be at least 1".into()));
        }
        if let Some(k) = self.branch_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("branch kernel size {k} is not odd")));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!("slope {} not in (0, 1)", self.slope)));
        }
        if !(self.head_init_scale >= 0.0 && self.head_init_scale.is_finite()) {
            return Err(Error::Config(format!("head_init_scale {} must be non-negative", self.head_init_scale)));
        }
        if self.circulant_rows == 0 {
            return Err(Error::Config("circulant_rows must be positive".into()));
        }
        self.nlg.validate()
    }

    fn layer_spec(&self, d_in: usize, d_out: usize) -> GcLayerSpec {
        GcLayerSpec {
            d_in,
            d_out,
            fnet_hidden: if self.fnet_hidden == 0 { d_in } else { self.fnet_hidden },
            circulant_rows: match self.output_layer {
                OutputKind::Circulant => Some(self.circulant_rows),
                OutputKind::Dense => None,
            },
            batch_norm: self.batch_norm,
            slope: self.slope,
        }
    }

    /// Number of graph-convolutional layers along the input-to-output path.
    pub fn depth(&self) -> usize {
        usize::from(!self.branch_kernels.is_empty())
            + self.n_graph_stages * self.res_blocks_per_stage * self.layers_per_res_block
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub kernel: usize,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub gc: GcLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub blocks: Vec<Vec<GcLayer>>,
}

/// Layer structure; parameters live in the model's [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: NetworkConfig,
    pub branches: Vec<Branch>,
    pub stages: Vec<Stage>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphCnnModel<T: Scalar> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
    pub stats: Vec<BnStats<T>>,
}

/// Graphs used by one forward pass, one per sample.
#[derive(Clone, Debug, Default)]
pub struct NetworkGraphs {
    /// Per branch, per sample. Branches share `Arc`s in [`PreproGraph::Input`] mode.
    pub prepro: Vec<Vec<Arc<NonLocalGraph>>>,
    /// Per stage, per sample.
    pub stages: Vec<Vec<Arc<NonLocalGraph>>>,
}

pub enum GraphSource<'a> {
    /// Build every graph from the current features.
    Dynamic,
    /// Reuse previously built graphs; used for gradient verification.
    Fixed(&'a NetworkGraphs),
}

pub struct ForwardVars {
    pub noise: Var,
    pub denoised: Var,
    pub graphs: NetworkGraphs,
}

/// Values of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar> {
    pub noise_estimate: Tensor<T>,
    pub denoised: Tensor<T>,
    pub graphs: NetworkGraphs,
}

fn sample_graphs<T: Scalar>(t: &Tensor<T>, cfg: &NlgConfig) -> Result<Vec<Arc<NonLocalGraph>>> {
    let &[n, c, h, w] = t.shape() else {
        return Err(Error::shape("graph", format!("expected [N, C, H, W], got {:?}", t.shape())));
    };
    let len = c * h * w;
    (0..n).map(|s| knn_from_planar(&t.data()[s * len..(s + 1) * len], c, h, w, cfg).map(Arc::new)).collect()
}

impl Architecture {
    pub fn gc_layers(&self) -> impl Iterator<Item = &GcLayer> {
        self.branches.iter().map(|b| &b.gc).chain(self.stages.iter().flat_map(|s| s.blocks.iter().flatten()))
    }

    /// Run the network on `input: [N, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, input: Var, source: GraphSource<'_>) -> Result<ForwardVars> {
        let cfg = &self.config;
        let &[n, 1, h, w] = ctx.tape.value(input).shape() else {
            return Err(Error::shape(
                "forward",
                format!("expected [N, 1, H, W], got {:?}", ctx.tape.value(input).shape()),
            ));
        };
        if let Err(e) = cfg.nlg.check_grid(h, w) {
            return Err(Error::Sizing(format!(
                "{h}x{w} input is too small for the non-local search ({e}); \
                 reduce k or the window radius, or use a larger image or tile"
            )));
        }
        let mut graphs = NetworkGraphs::default();
        let fixed = match source {
            GraphSource::Fixed(g) => Some(g),
            GraphSource::Dynamic => None,
        };
        let check_fixed = |gs: &Vec<Arc<NonLocalGraph>>| -> Result<Vec<Arc<NonLocalGraph>>> {
            if gs.len() != n {
                return Err(Error::shape("forward", format!("{} fixed graphs for batch of {n}", gs.len())));
            }
            Ok(gs.clone())
        };

        let mut trunk = input;
        if !self.branches.is_empty() {
            let input_graph = match (fixed, cfg.prepro_graph) {
                (None, PreproGraph::Input) => Some(sample_graphs(ctx.tape.value(input), &cfg.nlg)?),
                _ => None,
            };
            let mut outs = Vec::with_capacity(self.branches.len());
            for (bi, b) in self.branches.iter().enumerate() {
                let conv = ctx.tape.conv2d(input, ctx.var(b.conv_w), ctx.var(b.conv_b), b.kernel / 2)?;
                let act = ctx.tape.leaky_relu(conv, cfg.slope)?;
                let g = match (fixed, &input_graph) {
                    (Some(f), _) => check_fixed(
                        f.prepro
                            .get(bi)
                            .ok_or_else(|| Error::shape("forward", "fixed graphs missing a preprocessing branch"))?,
                    )?,
                    (None, Some(g)) => g.clone(),
                    (None, None) => sample_graphs(ctx.tape.value(act), &cfg.nlg)?,
                };
                outs.push(b.gc.forward(ctx, act, &g)?);
                graphs.prepro.push(g);
            }
            trunk = ctx.tape.concat_channels(&outs)?;
        }

        for (si, stage) in self.stages.iter().enumerate() {
            let g = match fixed {
                Some(f) => check_fixed(
                    f.stages.get(si).ok_or_else(|| Error::shape("forward", "fixed graphs missing a stage"))?,
                )?,
                None => sample_graphs(ctx.tape.value(trunk), &cfg.nlg)?,
            };
            for block in &stage.blocks {
                let mut y = trunk;
                for layer in block {
                    y = layer.forward(ctx, y, &g)?;
                }
                trunk = ctx.tape.add(trunk, y)?;
            }
            graphs.stages.push(g);
        }

        let noise = ctx.tape.conv2d(trunk, ctx.var(self.head_w), ctx.var(self.head_b), 1)?;
        let denoised = ctx.tape.sub(input, noise)?;
        Ok(ForwardVars { noise, denoised, graphs })
    }

    /// `(layer name, running-statistics index)` of every batch-norm layer.
    pub fn bn_layers(&self) -> Vec<(&str, usize)> {
        self.gc_layers().filter_map(|l| l.bn.as_ref().map(|b| (l.name.as_str(), b.stats))).collect()
    }

    /// Graphs seen by each GC layer along the path, for one sample: the
    /// preprocessing layer (all branches) followed by every trunk layer.
    pub fn layer_graphs(&self, graphs: &NetworkGraphs, sample: usize) -> Vec<Vec<Arc<NonLocalGraph>>> {
        let mut out = Vec::new();
        if !self.branches.is_empty() {
            out.push(graphs.prepro.iter().map(|g| g[sample].clone()).collect());
        }
        for (stage, g) in self.stages.iter().zip(&graphs.stages) {
            for _ in stage.blocks.iter().flatten() {
                out.push(vec![g[sample].clone()]);
            }
        }
        out
    }
}

impl<T: Scalar> GraphCnnModel<T> {
    /// Freshly initialized model.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let init = Stream::new(config.seed).substream("init");
        let mut store = ParamStore::new();
        let mut stats = Vec::new();
        let fan = |n: usize| (3.0 / n as f64).sqrt();

        let mut branches = Vec::with_capacity(config.branch_kernels.len());
        for (bi, &k) in config.branch_kernels.iter().enumerate() {
            let c = config.prepro_branch_channels;
            let name = format!("prepro.b{bi}");
            let conv_w = store.add(
                format!("{name}.conv.weight"),
                uniform_init(&init, &format!("{name}.conv.weight"), vec![c, 1, k, k], fan(k * k)),
            );
            let conv_b = store.add(format!("{name}.conv.bias"), Tensor::zeros(vec![c]));
            let gc = GcLayer::new(&mut store, &mut stats, &format!("{name}.gc"), config.layer_spec(c, c), &init);
            branches.push(Branch { kernel: k, conv_w, conv_b, gc });
        }

        let d = config.trunk_channels;
        let stages = (0..config.n_graph_stages)
            .map(|s| Stage {
                blocks: (0..config.res_blocks_per_stage)
                    .map(|b| {
                        (0..config.layers_per_res_block)
                            .map(|l| {
                                let name = format!("stage{s}.block{b}.gc{l}");
                                GcLayer::new(&mut store, &mut stats, &name, config.layer_spec(d, d), &init)
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect();

        let head_w = store.add(
            "head.weight",
            uniform_init(&init, "head.weight", vec![1, d, 3, 3], fan(9 * d) * config.head_init_scale),
        );
        let head_b = store.add("head.bias", Tensor::zeros(vec![1]));
        Ok(GraphCnnModel { arch: Architecture { config, branches, stages, head_w, head_b }, store, stats })
    }

    /// Model with every parameter zero and usable running statistics.
    pub fn zeroed(config: NetworkConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.store.zero_all();
        m.init_running_stats();
        Ok(m)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.arch.config
    }

    /// Allow inference before any training step.
    pub fn init_running_stats(&mut self) {
        self.stats.iter_mut().for_each(BnStats::init);
    }

    /// Forward pass without gradient tracking. `noisy` is `[N, 1, H, W]` or
    /// `[1, H, W]`. Running statistics are updated only in [`BnMode::Train`].
    pub fn forward(&mut self, noisy: &Tensor<T>, mode: BnMode) -> Result<ForwardOutput<T>> {
        self.forward_with(noisy, mode, GraphSource::Dynamic)
    }

    pub fn forward_with(
        &mut self,
        noisy: &Tensor<T>,
        mode: BnMode,
        source: GraphSource<'_>,
    ) -> Result<ForwardOutput<T>> {
        run(&self.arch, &self.store, &mut self.stats, noisy, mode, source)
    }

    /// Inference-mode forward on a shared model.
    pub fn infer(&self, noisy: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut stats = self.stats.clone();
        run(&self.arch, &self.store, &mut stats, noisy, BnMode::Inference, GraphSource::Dynamic)
    }

    pub fn running_stats_ready(&self) -> bool {
        self.stats.iter().all(|s| s.initialized)
    }
}

fn run<T: Scalar>(
    arch: &Architecture,
    store: &ParamStore<T>,
    stats: &mut [BnStats<T>],
    noisy: &Tensor<T>,
    mode: BnMode,
    source: GraphSource<'_>,
) -> Result<ForwardOutput<T>> {
    let input = match *noisy.shape() {
        [1, h, w] => noisy.clone().reshape(vec![1, 1, h, w])?,
        _ => noisy.clone(),
    };
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, false);
    let x = tape.constant(input);
    let cfg = &arch.config;
    let mut ctx = Ctx { tape: &mut tape, vars: &vars, stats, mode, bn_eps: cfg.bn_eps, bn_momentum: cfg.bn_momentum };
    let out = arch.forward(&mut ctx, x, source)?;
    let reshape = |t: &Tensor<T>| t.clone().reshape(noisy.shape().to_vec());
    Ok(ForwardOutput {
        noise_estimate: reshape(tape.value(out.noise))?,
        denoised: reshape(tape.value(out.denoised))?,
        graphs: out.graphs,
    })
}

/// Exact parameter counts per named tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCensus {
    pub entries: BTreeMap<String, usize>,
}

impl ParamCensus {
    pub fn total(&self) -> usize {
        self.entries.values().sum()
    }

    /// Sum over every tensor whose name starts with `prefix`.
    pub fn under(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v).sum()
    }

    /// Totals grouped by top-level module (`prepro.b0`, `stage1.block0`, `head`, ...).
    pub fn modules(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.entries {
            let parts: Vec<&str> = k.split('.').collect();
            let key = if parts[0] == "head" { "head".to_string() } else { parts[..2].join(".") };
            *out.entry(key).or_insert(0) += v;
        }
        out
    }
}

pub fn count_parameters<T: Scalar>(model: &GraphCnnModel<T>) -> ParamCensus {
    ParamCensus { entries: model.store.iter().map(|(n, t)| (n.to_string(), t.len())).collect() }
}

/// Output-layer size of one filter-generating network, structured or not.
pub fn fnet_output_params(d_in: usize, d_out: usize, hidden: usize, kind: OutputKind, rows: usize) -> usize {
    match kind {
        OutputKind::Circulant => ecc::circulant_param_count(hidden, d_in * d_out, rows),
        OutputKind::Dense => ecc::dense_param_count(hidden, d_in * d_out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro(trunk: usize, k: usize) -> NetworkConfig {
        NetworkConfig {
            prepro_branch_channels: trunk / 3,
            trunk_channels: trunk,
            n_graph_stages: 1,
            res_blocks_per_stage: 1,
            layers_per_res_block: 2,
            nlg: NlgConfig { k, window_radius: 4, exclusion_radius: 1 },
            seed: 11,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn config_invariants() {
        assert!(NetworkConfig::default().validate().is_ok());
        let bad = NetworkConfig { trunk_channels: 60, ..NetworkConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = NetworkConfig { layers_per_res_block: 0, ..NetworkConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_model_passes_input_through() {
        let mut m = GraphCnnModel::<f64>::zeroed(micro(6, 2)).unwrap();
        let x = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i as f64 * 0.13).sin());
        let out = m.forward(&x, BnMode::Inference).unwrap();
        assert!(out.noise_estimate.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.denoised, x);
    }

    #[test]
    fn shapes_and_residual_identity() {
        let mut m = GraphCnnModel::<f32>::new(micro(18, 4)).unwrap();
        let x = Tensor::from_fn(vec![1, 16, 16], |i| ((i * 31 % 97) as f32) / 97.0);
        let out = m.forward(&x, BnMode::Train).unwrap();
        assert_eq!(out.noise_estimate.shape(), &[1, 16, 16]);
        assert_eq!(out.denoised.shape(), &[1, 16, 16]);
        assert!(out.denoised.all_finite() && out.noise_estimate.all_finite());
        for ((&x, &n), &d) in x.data().iter().zip(out.noise_estimate.data()).zip(out.denoised.data()) {
            assert_eq!(d.to_bits(), (x - n).to_bits());
        }
    }

    #[test]
    fn stage_layers_share_one_graph() {
        let cfg = NetworkConfig { res_blocks_per_stage: 2, n_graph_stages: 2, ..micro(6, 3) };
        let mut m = GraphCnnModel::<f64>::new(cfg).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 8, 8], |i| ((i * 17 % 23) as f64) / 23.0);
        let out = m.forward(&x, BnMode::Train).unwrap();
        let per_layer = m.arch.layer_graphs(&out.graphs, 1);
        assert_eq!(per_layer.len(), 1 + 2 * 2 * 2);
        // shared-input mode: every branch holds the same graph object
        assert!(per_layer[0].windows(2).all(|w| Arc::ptr_eq(&w[0], &w[1])));
        for stage in 0..2 {
            let layers = &per_layer[1 + stage * 4..1 + (stage + 1) * 4];
            assert!(layers.iter().all(|g| Arc::ptr_eq(&g[0], &out.graphs.stages[stage][1])));
        }
        assert!(!Arc::ptr_eq(&out.graphs.stages[0][1], &out.graphs.stages[1][1]));
    }

    #[test]
    fn too_small_input_is_a_sizing_error() {
        let cfg = NetworkConfig { nlg: NlgConfig { k: 8, window_radius: 2, exclusion_radius: 1 }, ..micro(6, 8) };
        let mut m = GraphCnnModel::<f64>::new(cfg).unwrap();
        let err = m.forward(&Tensor::zeros(vec![1, 1, 3, 3]), BnMode::Train).unwrap_err();
        assert!(matches!(err, Error::Sizing(ref msg) if msg.contains("window")));
    }

    #[test]
    fn census_counts() {
        let cfg = NetworkConfig { n_graph_stages: 0, ..NetworkConfig::default() };
        let m = GraphCnnModel::<f32>::new(cfg).unwrap();
        let census = count_parameters(&m);
        assert_eq!(census.modules()["head"], 9 * 66 + 1);
        assert_eq!(census.under("stage"), 0);

        let m = GraphCnnModel::<f32>::new(NetworkConfig {
            n_graph_stages: 1,
            res_blocks_per_stage: 1,
            layers_per_res_block: 1,
            ..NetworkConfig::default()
        })
        .unwrap();
        let census = count_parameters(&m);
        assert_eq!(census.entries["stage0.block0.gc0.ecc.fnet.out.weight"], 95_832);
        let dense = NetworkConfig {
            output_layer: OutputKind::Dense,
            n_graph_stages: 1,
            res_blocks_per_stage: 1,
            layers_per_res_block: 1,
            ..NetworkConfig::default()
        };
        let census = count_parameters(&GraphCnnModel::<f32>::new(dense).unwrap());
        assert_eq!(census.entries["stage0.block0.gc0.ecc.fnet.out.weight"], 287_496);
        assert_eq!(fnet_output_params(66, 66, 66, OutputKind::Circulant, 3), 95_832);
        assert_eq!(fnet_output_params(66, 66, 66, OutputKind::Dense, 3), 287_496);
    }
}
