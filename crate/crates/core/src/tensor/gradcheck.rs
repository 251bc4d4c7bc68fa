use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Coordinates checked per tensor when it is too large to check exhaustively.
pub const SAMPLED_COORDS: usize = 64;
/// Denominator floor of the relative error, so exact zeros compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub input: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| t.max_rel_err > self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step [`FD_STEP`].
///
/// Every input is bound as a differentiable leaf. Tensors with more than
/// [`SAMPLED_COORDS`] elements are checked on a fixed random subset.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut tensors = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let n = inputs[ti].numel();
        let coords: Vec<usize> = if n <= SAMPLED_COORDS {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 + ti as u64);
            let mut c = sample(&mut rng, n, SAMPLED_COORDS).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            input: ti,
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + FD_STEP;
            let up = eval(&work)?;
            work[ti].data_mut()[c] = orig - FD_STEP;
            let down = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(analytic[ti][c], numeric);
            if err > check.max_rel_err || !err.is_finite() {
                check.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_coord = c;
                check.analytic = analytic[ti][c];
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors,
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}
