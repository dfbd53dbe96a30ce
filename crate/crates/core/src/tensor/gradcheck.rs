//! Central finite-difference verification of tape gradients.

use std::fmt;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    /// `max |analytic − numeric|` over the block divided by the largest
    /// gradient magnitude in the block, floored at the differencing noise.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose ± perturbation crossed a leaky-ReLU kink.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{}\t{:.3e}\tchecked={}\tskipped={}\t{}",
                b.name,
                b.max_rel_error,
                b.checked,
                b.skipped,
                if b.max_rel_error < self.tolerance { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape.value(loss).item(), tape.kink_signature()))
}

/// Compare the tape gradient of the scalar `f(params)` with central
/// differences of step `step` for every parameter element.
///
/// `f` receives a fresh tape with each parameter registered as a leaf, in
/// order, and returns the loss variable.
pub fn finite_difference_check<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, p)| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    // Central differences cannot resolve gradients below roughly eps·|L|/h;
    // blocks whose true gradient is zero are measured against that instead.
    let floor = 1e6 * f64::EPSILON * tape.value(loss).item().abs().max(f64::MIN_POSITIVE) / step;

    let mut current: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut blocks = Vec::with_capacity(params.len());
    for (b, (name, p)) in params.iter().enumerate() {
        let analytic = match grads.get(vars[b]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.len()],
        };
        let mut numeric = vec![0.0; p.len()];
        let mut skip = vec![false; p.len()];
        for i in 0..p.len() {
            let orig = p.data()[i];
            current[b].data_mut()[i] = orig + step;
            let (plus, sig_plus) = evaluate(&f, &current)?;
            current[b].data_mut()[i] = orig - step;
            let (minus, sig_minus) = evaluate(&f, &current)?;
            current[b].data_mut()[i] = orig;
            skip[i] = sig_plus != sig_minus;
            numeric[i] = (plus - minus) / (2.0 * step);
        }
        let mut scale = floor;
        let mut max_err = 0.0f64;
        for i in (0..p.len()).filter(|&i| !skip[i]) {
            scale = scale.max(analytic[i].abs()).max(numeric[i].abs());
            max_err = max_err.max((analytic[i] - numeric[i]).abs());
        }
        let skipped = skip.iter().filter(|&&s| s).count();
        blocks.push(BlockReport {
            name: name.clone(),
            max_rel_error: max_err / scale,
            checked: p.len() - skipped,
            skipped,
        });
    }
    Ok(GradCheckReport { blocks, tolerance })
}
