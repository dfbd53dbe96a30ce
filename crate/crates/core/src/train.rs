//! Residual-learning training: the network predicts the noise of AWGN-corrupted
//! patches under an MSE loss, optimized with Adam.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{Checkpoint, TensorData};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{add_awgn_from, GrayImage, PatchRef, PatchSet};
use crate::error::{Error, Result};
use crate::layer::Ctx;
use crate::network::{GraphCnnModel, GraphSource, NetworkConfig};
use crate::params::ParamStore;
use crate::rng::Stream;
use crate::tensor::{finite_difference_check, lit, BnMode, GradCheckReport, Scalar, Tape, Tensor};

/// Mean squared error over all elements.
pub fn mse_loss<T: Scalar>(estimate: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::shape("loss", format!("{:?} vs {:?}", estimate.shape(), truth.shape())));
    }
    let se: f64 = estimate
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).powi(2))
        .sum();
    Ok(se / estimate.len() as f64)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Adam { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Apply one update. Every gradient is checked first, so a non-finite
    /// block leaves all parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("optimizer", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape("optimizer", format!("gradient of `{}` has the wrong shape", store.name(id))));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { name: store.name(id).to_string() });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let (c1, c2) = (lit::<T>(1.0 - self.beta1.powi(t)), lit::<T>(1.0 - self.beta2.powi(t)));
        let (lr, eps, one) = (lit::<T>(lr), lit::<T>(self.eps), T::one());
        for (((id, g), m), v) in store.ids().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub model: GraphCnnModel<T>,
    pub optimizer: Adam<T>,
    /// Completed optimization steps.
    pub step: u64,
    pub best_psnr: Option<f64>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = GraphCnnModel::new(cfg.network.clone())?;
        let optimizer = Adam::new(&model.store, &cfg.train);
        Ok(TrainState { model, optimizer, step: 0, best_psnr: None })
    }

    /// Model, optimizer moments and counters in one checkpoint.
    pub fn to_checkpoint(&self, train: &TrainConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model, train)?;
        for ((name, _), (m, v)) in self.model.store.iter().zip(self.optimizer.m.iter().zip(&self.optimizer.v)) {
            ck.push_tensor(format!("optim.m.{name}"), m);
            ck.push_tensor(format!("optim.v.{name}"), v);
        }
        ck.push("train.step", vec![1], TensorData::U64(vec![self.step]));
        ck.push("train.adam_t", vec![1], TensorData::U64(vec![self.optimizer.t]));
        ck.push("train.best_psnr", vec![1], TensorData::F64(vec![self.best_psnr.unwrap_or(f64::NAN)]));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.config()?;
        let model = ck.to_model::<T>()?;
        let mut optimizer = Adam::new(&model.store, &cfg.train);
        for (i, (name, _)) in model.store.iter().enumerate() {
            optimizer.m[i] = ck.tensor(&format!("optim.m.{name}"))?;
            optimizer.v[i] = ck.tensor(&format!("optim.v.{name}"))?;
        }
        optimizer.t = ck.u64s("train.adam_t")?[0];
        let step = ck.u64s("train.step")?[0];
        let best = match ck.get("train.best_psnr").map(|e| &e.data) {
            Some(TensorData::F64(v)) if v.len() == 1 => Some(v[0]).filter(|x| !x.is_nan()),
            _ => return Err(Error::Checkpoint("missing train.best_psnr".into())),
        };
        Ok(TrainState { model, optimizer, step, best_psnr: best })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl StepRecord {
    /// `step\tloss\tlr\tseconds`.
    pub fn to_line(&self) -> String {
        format!("{}\t{:e}\t{:e}\t{:.3}", self.step, self.loss, self.lr, self.seconds)
    }
}

pub const METRICS_HEADER: &str = "step\tloss\tlr\tseconds";

/// One noisy/clean batch: inputs `[B, 1, P, P]` and the noise added to them.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noisy: Tensor<f32>,
    pub noise: Tensor<f32>,
}

/// Build a batch from patch references; patch `i` gets noise from the
/// `index0 + i`-th noise substream.
pub fn make_batch(
    images: &[GrayImage],
    patches: &PatchSet,
    refs: &[PatchRef],
    sigma: f64,
    noise_root: &Stream,
    index0: u64,
) -> Result<Batch> {
    let p = patches.size;
    let mut noisy = Vec::with_capacity(refs.len() * p * p);
    let mut noise = Vec::with_capacity(refs.len() * p * p);
    for (i, &r) in refs.iter().enumerate() {
        let clean = patches.get(images, r)?;
        let n = add_awgn_from(&clean, sigma, &mut noise_root.indexed(index0 + i as u64));
        noise.extend(n.pixels.iter().zip(&clean.pixels).map(|(a, b)| a - b));
        noisy.extend(n.pixels);
    }
    let shape = vec![refs.len(), 1, p, p];
    Ok(Batch { noisy: Tensor::new(shape.clone(), noisy)?, noise: Tensor::new(shape, noise)? })
}

/// Forward, MSE against the true noise, backward. Returns the loss and one
/// gradient per parameter (zeros for parameters the loss does not reach).
pub fn loss_and_gradients(model: &mut GraphCnnModel<f32>, batch: &Batch) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape, true);
    let x = tape.constant(batch.noisy.clone());
    let target = tape.constant(batch.noise.clone());
    let cfg = model.arch.config.clone();
    let mut ctx = Ctx {
        tape: &mut tape,
        vars: &vars,
        stats: &mut model.stats,
        mode: BnMode::Train,
        bn_eps: cfg.bn_eps,
        bn_momentum: cfg.bn_momentum,
    };
    let out = model.arch.forward(&mut ctx, x, GraphSource::Dynamic)?;
    let loss = tape.mse(out.noise, target)?;
    let loss_value = f64::from(tape.value(loss).item());
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(model.store.iter())
        .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((loss_value, g))
}

/// Finite-difference check of every parameter block of a freshly
/// initialized `f64` model under an MSE loss against `target`.
///
/// With `fixed_graph`, the non-local graphs are built once from the
/// unperturbed parameters and reused by every evaluation; otherwise each
/// evaluation rebuilds them, and a perturbation that changes a neighbor set
/// shows up as a large error.
pub fn check_model_gradients(
    cfg: &NetworkConfig,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    fixed_graph: bool,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut model = GraphCnnModel::<f64>::new(cfg.clone())?;
    let graphs = model.forward(input, BnMode::Train)?.graphs;
    let params: Vec<(String, Tensor<f64>)> = model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let stats = model.stats.clone();
    finite_difference_check(
        |tape, vars| {
            let mut stats = stats.clone();
            let x = tape.constant(input.clone());
            let y = tape.constant(target.clone());
            let mut ctx = Ctx {
                tape,
                vars,
                stats: &mut stats,
                mode: BnMode::Train,
                bn_eps: cfg.bn_eps,
                bn_momentum: cfg.bn_momentum,
            };
            let source = if fixed_graph { GraphSource::Fixed(&graphs) } else { GraphSource::Dynamic };
            let out = model.arch.forward(&mut ctx, x, source)?;
            ctx.tape.mse(out.noise, y)
        },
        &params,
        step,
        tolerance,
    )
}

/// Drives training over a fixed image set.
pub struct Trainer<'a> {
    pub cfg: RunConfig,
    pub state: TrainState<f32>,
    images: &'a [GrayImage],
    patches: PatchSet,
    per_epoch: usize,
    steps_per_epoch: u64,
    order: Option<(usize, Vec<PatchRef>)>,
    root: Stream,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: RunConfig, images: &'a [GrayImage]) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::with_state(cfg, state, images)
    }

    /// Continue from a checkpoint written by [`TrainState::to_checkpoint`].
    pub fn resume(ck: &Checkpoint, images: &'a [GrayImage]) -> Result<Self> {
        Self::with_state(ck.config()?, TrainState::from_checkpoint(ck)?, images)
    }

    fn with_state(cfg: RunConfig, state: TrainState<f32>, images: &'a [GrayImage]) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Config("no training images".into()));
        }
        let t = &cfg.train;
        let patches = PatchSet::from_images(images, t.patch_size, t.patch_stride)?;
        cfg.network.nlg.check_grid(t.patch_size, t.patch_size).map_err(|e| {
            Error::Sizing(format!("{}-pixel patches cannot host the non-local search: {e}", t.patch_size))
        })?;
        let per_epoch = match t.patches_per_epoch {
            0 => patches.len(),
            n => n.min(patches.len()),
        };
        let steps_per_epoch = per_epoch.div_ceil(t.batch_size) as u64;
        let root = Stream::new(cfg.network.seed).substream("train");
        Ok(Trainer { cfg, state, images, patches, per_epoch, steps_per_epoch, order: None, root })
    }

    pub fn patches(&self) -> &PatchSet {
        &self.patches
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    /// Steps of the whole run, honoring `max_steps`.
    pub fn total_steps(&self) -> u64 {
        let all = self.steps_per_epoch * self.cfg.train.epochs as u64;
        match self.cfg.train.max_steps {
            0 => all,
            m => all.min(m as u64),
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn epoch(&self) -> usize {
        (self.state.step / self.steps_per_epoch) as usize
    }

    /// Batch for the next step.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let epoch = self.epoch();
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let seed = self.root.substream("shuffle").indexed(epoch as u64).next_u64();
            self.order = Some((epoch, self.patches.iterate(seed)));
        }
        let b = (self.state.step % self.steps_per_epoch) as usize * self.cfg.train.batch_size;
        let end = (b + self.cfg.train.batch_size).min(self.per_epoch);
        let refs = &self.order.as_ref().unwrap().1[b..end];
        let index0 = (epoch * self.per_epoch + b) as u64;
        make_batch(self.images, &self.patches, refs, self.cfg.train.sigma, &self.root.substream("noise"), index0)
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        let lr = self.cfg.train.lr_at(self.epoch());
        let (loss, grads) = loss_and_gradients(&mut self.state.model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: format!("loss at step {}", self.state.step + 1) });
        }
        self.state.optimizer.step(&mut self.state.model.store, &grads, lr)?;
        self.state.step += 1;
        Ok(StepRecord { step: self.state.step, loss, lr, seconds: 0.0 })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.state.to_checkpoint(&self.cfg.train)
    }

    /// Train to completion. With `out`, appends to `out/metrics.tsv`, writes
    /// `out/step-N.gcnn` at the checkpoint interval and `out/final.gcnn`.
    pub fn run(&mut self, out: Option<&Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let mut metrics = out.map(open_metrics).transpose()?;
        let start = Instant::now();
        while !self.is_done() {
            let mut rec = self.step()?;
            if self.cfg.train.record_wall_time {
                rec.seconds = start.elapsed().as_secs_f64();
            }
            on_step(&rec);
            if let (Some((path, f)), Some(dir)) = (metrics.as_mut(), out) {
                writeln!(f, "{}", rec.to_line()).map_err(|e| Error::io(&*path, e))?;
                let every = self.cfg.train.checkpoint_every_steps as u64;
                if every > 0 && rec.step % every == 0 && !self.is_done() {
                    self.checkpoint()?.save(dir.join(format!("step-{}.gcnn", rec.step)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint()?.save(dir.join("final.gcnn"))?;
        }
        Ok(())
    }
}

fn open_metrics(dir: &Path) -> Result<(PathBuf, File)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.tsv");
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
    }
    Ok((path, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_reference_values() {
        let a = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        assert!(mse_loss(&a, &Tensor::zeros(vec![3, 2])).is_err());
    }

    #[test]
    fn adam_hand_recurrence() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::scalar(1.0));
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&store, &cfg);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=3 {
            adam.step(&mut store, &[Tensor::scalar(1.0)], 1e-3).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            p -= 1e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((store.get(crate::params::ParamId(0)).item() - p).abs() < 1e-15);
        }
        assert!((m - 0.271).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_and_nan() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::full(vec![3], 0.5));
        store.add("b.weight", Tensor::full(vec![2], 0.5));
        let mut adam = Adam::new(&store, &TrainConfig::default());
        let before = store.clone();
        adam.step(&mut store, &[Tensor::zeros(vec![3]), Tensor::zeros(vec![2])], 1e-3).unwrap();
        assert_eq!(store, before);
        let bad = [Tensor::zeros(vec![3]), Tensor::new(vec![2], vec![0.0, f32::NAN]).unwrap()];
        let err = adam.step(&mut store, &bad, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "b.weight"));
        assert_eq!(store, before);
    }
}
