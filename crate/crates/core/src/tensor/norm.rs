use super::tape::BackwardFn;
use super::{dims4, lit, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Inference,
}

/// Per-channel running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> BnStats<T> {
    /// Statistics that refuse inference until a training step (or
    /// [`BnStats::init`]) has run.
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels], initialized: false }
    }

    /// Mark the current values (mean 0, variance 1 unless changed) as usable.
    pub fn init(&mut self) {
        self.initialized = true;
    }
}

/// Tape record for [`Tape::batch_norm`].
pub struct BatchNormOp<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BackwardFn<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let st = self;
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, h, w) = dims4(x, "batch_norm")?;
        let plane = h * w;
        let m = lit::<T>((n * plane) as f64);
        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, is) = (st.mean[ch], st.inv_std[ch]);
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for s in 0..n {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    let xhat = (x.data()[i] - mu) * is;
                    sg += grad.data()[i];
                    sgx += grad.data()[i] * xhat;
                }
            }
            dbeta[ch] = sg;
            dgamma[ch] = sgx;
            let gm = gamma.data()[ch];
            for s in 0..n {
                let off = (s * c + ch) * plane;
                for (i, d) in dx.iter_mut().enumerate().skip(off).take(plane) {
                    *d = if st.batch_stats {
                        let xhat = (x.data()[i] - mu) * is;
                        gm * is * (grad.data()[i] - sg / m - xhat * sgx / m)
                    } else {
                        gm * is * grad.data()[i]
                    };
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), dx)).transpose()?,
            needs[1].then(|| Tensor::new(vec![c], dgamma)).transpose()?,
            needs[2].then(|| Tensor::new(vec![c], dbeta)).transpose()?,
        ])
    }
}

/// Per-channel normalization over batch and spatial dimensions followed by
/// `scale · x̂ + shift`. Returns the output and the statistics used.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut BnStats<T>,
    mode: BnMode,
    eps: f64,
    momentum: f64,
    name: &str,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = dims4(x, "batch_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] || running.mean.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("{c} channels, scale {:?}, shift {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let plane = h * w;
    let m = lit::<T>((n * plane) as f64);
    let eps_t = lit::<T>(eps);
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let vals = (0..n).flat_map(|s| {
                    let off = (s * c + ch) * plane;
                    x.data()[off..off + plane].iter().copied()
                });
                let mu = vals.clone().sum::<T>() / m;
                mean[ch] = mu;
                var[ch] = vals.map(|v| (v - mu) * (v - mu)).sum::<T>() / m;
            }
            let keep = lit::<T>(momentum);
            let take = T::one() - keep;
            for ch in 0..c {
                running.mean[ch] = keep * running.mean[ch] + take * mean[ch];
                running.var[ch] = keep * running.var[ch] + take * var[ch];
            }
            running.initialized = true;
            (mean, var)
        }
        BnMode::Inference => {
            if !running.initialized {
                return Err(Error::RunningStatsUninitialized(name.to_string()));
            }
            (running.mean.clone(), running.var.clone())
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let (g, b, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for (o, &v) in out[off..off + plane].iter_mut().zip(&x.data()[off..off + plane]) {
                *o = g * (v - mu) * is + b;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, mean, inv_std))
}

impl<T: Scalar> Tape<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnStats<T>,
        mode: BnMode,
        eps: f64,
        momentum: f64,
        name: &str,
    ) -> Result<Var> {
        let (out, mean, inv_std) =
            batch_norm(self.value(x), self.value(gamma), self.value(beta), running, mode, eps, momentum, name)?;
        let op = BatchNormOp { mean, inv_std, batch_stats: mode == BnMode::Train };
        self.push(out, vec![x, gamma, beta], Box::new(op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, eps: f64) -> (Tensor<f64>, BnStats<f64>) {
        let c = x.shape()[1];
        let mut st = BnStats::new(c);
        let (y, _, _) = batch_norm(
            &x,
            &Tensor::full(vec![c], 1.0),
            &Tensor::zeros(vec![c]),
            &mut st,
            BnMode::Train,
            eps,
            0.9,
            "bn",
        )
        .unwrap();
        (y, st)
    }

    #[test]
    fn two_element_batch() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let (y, st) = run(x, 0.0);
        assert_eq!(y.data(), &[-1.0, 1.0]);
        assert!((st.mean[0] - 0.1).abs() < 1e-15);
        assert!((st.var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn train_output_is_standardized() {
        let x = Tensor::from_fn(vec![3, 2, 4, 5], |i| ((i * 37 % 17) as f64).sqrt() * 3.0 - 1.0);
        let (y, _) = run(x, 1e-5);
        for ch in 0..2 {
            let vals: Vec<f64> =
                (0..3).flat_map(|s| y.data()[(s * 2 + ch) * 20..(s * 2 + ch + 1) * 20].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 60.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 60.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = Tensor::full(vec![2, 1, 3, 3], 4.5);
        let mut st = BnStats::new(1);
        let (y, _, _) = batch_norm(
            &x,
            &Tensor::full(vec![1], 2.0),
            &Tensor::full(vec![1], 0.25),
            &mut st,
            BnMode::Train,
            1e-5,
            0.9,
            "bn",
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn inference_requires_initialized_stats() {
        let x = Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0);
        let (g, b) = (Tensor::full(vec![1], 1.0), Tensor::zeros(vec![1]));
        let mut st = BnStats::new(1);
        let r = batch_norm(&x, &g, &b, &mut st, BnMode::Inference, 1e-5, 0.9, "trunk.bn");
        assert!(matches!(r, Err(Error::RunningStatsUninitialized(ref n)) if n == "trunk.bn"));
        st.init();
        let before = st.clone();
        let (y, _, _) = batch_norm(&x, &g, &b, &mut st, BnMode::Inference, 0.0, 0.9, "bn").unwrap();
        assert_eq!(y.data(), &[1.0; 4]);
        assert_eq!(st, before);
    }
}
