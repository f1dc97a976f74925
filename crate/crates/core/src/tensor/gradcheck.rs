//! Central finite-difference gradient checking.
//!
//! The scalar probed is `Σ w·f(x)` with fixed pseudo-random weights `w`; the
//! numeric side accumulates that sum in `f64` so that the only `f32` error is
//! the forward computation itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Tensor with entries drawn uniformly from [-1, 1].
pub fn uniform_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..=1.0))
}

/// `max|a − f| / max(1e-6, max|a| + max|f|)` over all compared entries.
pub fn relative_error(analytic: &[f32], numeric: &[f32]) -> f32 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f32, |m, (a, f)| m.max((a - f).abs()));
    let scale_a = analytic.iter().fold(0.0f32, |m, a| m.max(a.abs()));
    let scale_f = numeric.iter().fold(0.0f32, |m, f| m.max(f.abs()));
    diff / (scale_a + scale_f).max(1e-6)
}

fn projection(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..=1.0))
}

fn probe<F>(f: &F, inputs: &[Tensor], weights: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&o, &w)| f64::from(o) * f64::from(w))
        .sum())
}

/// Compares analytic and central-difference gradients of `f` with respect
/// to every entry of every input. Returns the relative error.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f32) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_gradients_at(f, inputs, &all, &[step])
}

/// Like [`check_gradients`] but only perturbs up to `per_input` randomly
/// chosen coordinates of each input.
pub fn check_gradients_sampled<F>(
    f: F,
    inputs: &[Tensor],
    step: f32,
    per_input: usize,
    seed: u64,
) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords = sample_coords(inputs, per_input, seed);
    check_gradients_at(f, inputs, &coords, &[step])
}

/// Outcome of [`check_gradients_smooth`].
#[derive(Clone, Copy, Debug)]
pub struct SmoothCheck {
    /// Largest `|a − f|` over the kept coordinates, relative to
    /// `max|a| + max|f|` over all sampled ones.
    pub error: f32,
    pub kept: usize,
    pub sampled: usize,
}

/// Gradient check for functions that are only piecewise smooth, such as a
/// full warping loss, evaluated in `f32`.
///
/// Each numeric derivative is the mean of central differences at five steps
/// spread over `[0.8, 1.2]·step`, which averages out rounding noise. A
/// coordinate is kept only where the function looks locally linear on the
/// scale of the step: the estimates at `step` and `2·step` agree, and the
/// forward and backward one-sided differences agree. Both tests use the
/// numeric side alone, so a wrong analytic gradient is still caught wherever
/// the finite differences are trustworthy.
pub fn check_gradients_smooth<F>(
    f: F,
    inputs: &[Tensor],
    step: f32,
    per_input: usize,
    seed: u64,
) -> Result<SmoothCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    const SPREAD: [f32; 5] = [0.8, 0.9, 1.0, 1.1, 1.2];
    const TOLERANCE: f64 = 2.5e-4;

    let coords = sample_coords(inputs, per_input, seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let weights = projection(tape.shape(out));
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let root = tape.sum_all(prod)?;
    let grads = tape.backward(root)?;
    let centre = probe(&f, inputs, &weights)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    // (analytic, central at step, central at 2·step, one-sided gap)
    let mut rows = Vec::new();
    for (i, idxs) in coords.iter().enumerate() {
        for &k in idxs {
            let orig = work[i].data()[k];
            let mut estimate = |scale: f32| -> Result<(f64, f64)> {
                let (mut central, mut gap) = (0.0, 0.0);
                for factor in SPREAD {
                    let h = step * scale * factor;
                    work[i].data_mut()[k] = orig + h;
                    let plus = probe(&f, &work, &weights)?;
                    work[i].data_mut()[k] = orig - h;
                    let minus = probe(&f, &work, &weights)?;
                    let hp = f64::from(orig + h) - f64::from(orig);
                    let hm = f64::from(orig) - f64::from(orig - h);
                    central += (plus - minus) / (hp + hm);
                    gap += (plus - centre) / hp - (centre - minus) / hm;
                }
                let n = SPREAD.len() as f64;
                Ok((central / n, gap / n))
            };
            let (near, gap) = estimate(1.0)?;
            let (far, _) = estimate(2.0)?;
            work[i].data_mut()[k] = orig;
            let a = grads.get(vars[i]).map_or(0.0, |g| g.data()[k]);
            rows.push((a, near, far, gap));
        }
    }

    let scale = rows.iter().fold(0.0f64, |m, r| m.max(f64::from(r.0.abs())))
        + rows.iter().fold(0.0f64, |m, r| m.max(r.1.abs()));
    let tol = TOLERANCE * scale.max(1e-6);
    let kept: Vec<_> = rows
        .iter()
        .filter(|r| (r.1 - r.2).abs() <= tol && r.3.abs() <= 4.0 * tol)
        .collect();
    let diff = kept.iter().fold(0.0f64, |m, r| m.max((f64::from(r.0) - r.1).abs()));
    Ok(SmoothCheck {
        error: (diff / scale.max(1e-6)) as f32,
        kept: kept.len(),
        sampled: rows.len(),
    })
}

fn sample_coords(inputs: &[Tensor], per_input: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inputs
        .iter()
        .map(|t| {
            if t.numel() <= per_input {
                (0..t.numel()).collect()
            } else {
                rand::seq::index::sample(&mut rng, t.numel(), per_input).into_vec()
            }
        })
        .collect()
}

fn check_gradients_at<F>(f: F, inputs: &[Tensor], coords: &[Vec<usize>], steps: &[f32]) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let weights = projection(tape.shape(out));
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let root = tape.sum_all(prod)?;
    let grads = tape.backward(root)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, idxs) in coords.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let g = grads.get(vars[i]).unwrap_or(&zero);
        for &k in idxs {
            let orig = work[i].data()[k];
            let mut estimates = Vec::with_capacity(steps.len());
            for &step in steps {
                work[i].data_mut()[k] = orig + step;
                let plus = probe(&f, &work, &weights)?;
                work[i].data_mut()[k] = orig - step;
                let minus = probe(&f, &work, &weights)?;
                let h = f64::from(orig + step) - f64::from(orig - step);
                estimates.push((plus - minus) / h);
            }
            work[i].data_mut()[k] = orig;
            estimates.sort_by(f64::total_cmp);
            numeric.push(estimates[estimates.len() / 2] as f32);
            analytic.push(g.data()[k]);
        }
    }
    Ok(relative_error(&analytic, &numeric))
}
