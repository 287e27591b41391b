use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

/// Compares tape gradients of a scalar graph with central differences.
///
/// `build` records the graph on a fresh tape given one leaf per entry of
/// `params` and returns the scalar root. At most `max_coords` coordinates
/// per parameter are probed (a seeded random subset when the tensor is
/// larger); the error per coordinate is
/// `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    build: F,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside (0, 0.1]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("tracked leaf has a gradient"))
        .collect();
    drop(tape);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let r = build(&mut t, &vs)?;
        t.value(r).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    for (pi, param) in params.iter().enumerate() {
        let n = param.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => {
                let mut picked = sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = param.data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[idx] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[idx];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.coordinates_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, idx));
            }
        }
    }
    Ok(report)
}
