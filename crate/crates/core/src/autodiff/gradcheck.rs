//! Finite-difference gradient checks in 64-bit precision, using the
//! five-point central stencil (truncation error `O(h⁴)`).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e−12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Maximum relative error between backward-mode gradients and finite
/// differences, over every element of every input.
///
/// `f` builds a scalar-valued computation from leaf variables holding the
/// inputs, in order.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<usize> = (0..inputs.len()).collect();
    gradient_check_subset(f, inputs, &all, step, None, 0)
}

/// Like [`gradient_check`], restricted to the inputs listed in `checked` and,
/// when `max_per_input` is set, to a seeded random subset of their elements.
pub fn gradient_check_subset<F>(
    f: F,
    inputs: &[Tensor<f64>],
    checked: &[usize],
    step: f64,
    max_per_input: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &i in checked {
        let analytic = grads.wrt(vars[i]);
        let n = inputs[i].len();
        let elements: Vec<usize> = match max_per_input {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in elements {
            let orig = inputs[i].data()[j];
            let mut at = |dx: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + dx;
                eval(&work)
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            work[i].data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}
