//! Central finite differences against the tape's analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;

/// Builds a scalar loss from leaves holding the given inputs.
pub trait LossFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> LossFn for F {}

#[derive(Clone, Debug)]
pub struct FdReport {
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|)` over
    /// every checked entry of every input.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Options for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    /// Check at most this many entries per input (chosen at random).
    pub max_entries: Option<usize>,
    pub seed: u64,
    pub fault: Option<&'static str>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            max_entries: None,
            seed: 0,
            fault: None,
        }
    }
}

fn eval(inputs: &[Tensor], f: &impl LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares the analytic gradient of `f` with respect to every input against
/// central differences with step [`FD_STEP`].
pub fn finite_difference_check(inputs: &[Tensor], f: impl LossFn, opts: FdOptions) -> Result<FdReport> {
    let mut tape = Tape::new();
    if let Some(op) = opts.fault {
        tape.inject_backward_fault(op);
    }
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_f00d);
    let (mut max_diff, mut max_mag, mut checked) = (0.0f64, 0.0f64, 0usize);
    let mut perturbed = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = tape.grad(*v).unwrap_or(&zeros).to_vec();
        let n = inputs[i].numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let x0 = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&perturbed, &f)?;
            perturbed[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&perturbed, &f)?;
            perturbed[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_diff = max_diff.max((analytic[j] - numeric).abs());
            max_mag = max_mag.max(analytic[j].abs()).max(numeric.abs());
            checked += 1;
        }
    }
    let max_rel_err = if max_mag > 0.0 { max_diff / max_mag } else { 0.0 };
    Ok(FdReport { max_rel_err, checked })
}

/// Builds a scalar loss from the parameters of a store.
pub trait ParamLossFn: Fn(&mut Tape, &mut ParamStore) -> Result<Var> {}
impl<F: Fn(&mut Tape, &mut ParamStore) -> Result<Var>> ParamLossFn for F {}

/// Like [`finite_difference_check`], but perturbs the listed parameters of
/// `store` instead of explicit inputs. Every evaluation runs on a fresh
/// clone of `store`, so running statistics never leak between them.
pub fn finite_difference_check_params(
    store: &ParamStore,
    ids: &[ParamId],
    f: impl ParamLossFn,
    opts: FdOptions,
) -> Result<FdReport> {
    let mut base = store.clone();
    base.zero_grads();
    let mut tape = Tape::new();
    if let Some(op) = opts.fault {
        tape.inject_backward_fault(op);
    }
    let loss = f(&mut tape, &mut base)?;
    tape.backward(loss)?;
    base.accumulate_grads(&tape);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut s = s.clone();
        let mut t = Tape::new();
        let l = f(&mut t, &mut s)?;
        Ok(t.value(l).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9a7a_3e7e);
    let (mut max_diff, mut max_mag, mut checked) = (0.0f64, 0.0f64, 0usize);
    let mut perturbed = store.clone();
    for &id in ids {
        let analytic = base.tensor(id).grad().expect("zeroed above").to_vec();
        let n = analytic.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let x0 = store.tensor(id).data()[j];
            perturbed.tensor_mut(id).data_mut()[j] = x0 + FD_STEP;
            let up = eval(&perturbed)?;
            perturbed.tensor_mut(id).data_mut()[j] = x0 - FD_STEP;
            let down = eval(&perturbed)?;
            perturbed.tensor_mut(id).data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_diff = max_diff.max((analytic[j] - numeric).abs());
            max_mag = max_mag.max(analytic[j].abs()).max(numeric.abs());
            checked += 1;
        }
    }
    let max_rel_err = if max_mag > 0.0 { max_diff / max_mag } else { 0.0 };
    Ok(FdReport { max_rel_err, checked })
}

/// `Σ y ⊙ w` for a fixed random `w`: turns any tensor output into a scalar
/// loss whose gradient exercises every output entry.
pub fn random_projection(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11c_e5);
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}
