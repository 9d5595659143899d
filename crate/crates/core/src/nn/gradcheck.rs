//! Central finite-difference gradient checking at `f64`.
//!
//! The numerical side only ever calls the forward closure, so it stays
//! independent of every backward implementation it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::params::{Bound, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome for one checked tensor.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over checked entries.
    pub rel_error: f64,
    pub abs_error: f64,
}

impl GradReport {
    /// Passes when the relative error is below `tol`, or when both gradients
    /// vanish (absolute error below 1e-10).
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol || self.abs_error < 1e-10
    }
}

fn indices(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GradReport {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    GradReport {
        name: name.to_string(),
        checked: analytic.len(),
        rel_error: diff / na.max(nn).max(1e-300),
        abs_error: diff,
    }
}

/// Check d(loss)/d(param) for every tensor in `store`, sampling at most
/// `max_per_tensor` entries of each.
pub fn check_params<F>(store: &ParamStore<f64>, loss: F, step: f64, max_per_tensor: usize) -> Vec<GradReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let l = loss(&mut tape, &bound);
    let grads = tape.backward(l);
    let analytic = bound.grads(store, &grads);

    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::inference();
        let b = s.bind(&mut t, false);
        let l = loss(&mut t, &b);
        t.value(l).item()
    };

    let mut reports = Vec::new();
    for (ti, (name, tensor)) in store.iter().enumerate() {
        let idx = indices(tensor.len(), max_per_tensor, ti as u64);
        let mut work = store.clone();
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let lp = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let lm = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            num.push((lp - lm) / (2.0 * step));
        }
        let a: Vec<f64> = idx.iter().map(|&i| analytic[name].data()[i]).collect();
        reports.push(compare(name, &a, &num));
    }
    reports
}

/// Check d(loss)/d(input) for a single input tensor.
pub fn check_input<F>(input: &Tensor<f64>, loss: F, step: f64, max_entries: usize) -> GradReport
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let l = loss(&mut tape, x);
    let grads = tape.backward(l);
    let g = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |t: &Tensor<f64>| {
        let mut tp = Tape::inference();
        let x = tp.constant(t.clone());
        let l = loss(&mut tp, x);
        tp.value(l).item()
    };
    let idx = indices(input.len(), max_entries, 7);
    let mut work = input.clone();
    let mut num = Vec::with_capacity(idx.len());
    for &i in &idx {
        let orig = input.data()[i];
        work.data_mut()[i] = orig + step;
        let lp = eval(&work);
        work.data_mut()[i] = orig - step;
        let lm = eval(&work);
        work.data_mut()[i] = orig;
        num.push((lp - lm) / (2.0 * step));
    }
    let a: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
    compare("input", &a, &num)
}
