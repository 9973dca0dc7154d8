//! Central finite-difference verification of tape gradients (64-bit).

use crate::error::Result;
use crate::graph::Graph;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::ModelParams;

use super::{Tape, Var};

/// Relative errors are measured as `|a − n| / max(|a|, |n|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Number of coordinates compared.
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Reduces `out` to a scalar by a dot product with a fixed random tensor,
/// so every output coordinate contributes to the gradient.
pub fn random_projection<'p>(tape: &mut Tape<'p, f64>, out: &Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = Rng::new(seed);
    let r = tape.input(Tensor::from_fn(&shape, |_| rng.normal()));
    tape.dot(out, &r)
}

fn evaluate<F>(params: &ModelParams<f64>, loss: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p, f64>, &'p ModelParams<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, params)?;
    Ok(tape.value(&l).data()[0])
}

/// Compares `loss`'s tape gradients against central differences with the
/// given `step` for every trainable parameter. Tensors larger than
/// `max_per_tensor` are checked at that many seeded random coordinates.
pub fn check_gradients<F>(
    params: &ModelParams<f64>,
    step: f64,
    max_per_tensor: Option<usize>,
    seed: u64,
    loss: F,
) -> Result<GradCheck>
where
    F: for<'p> Fn(&mut Tape<'p, f64>, &'p ModelParams<f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let l = loss(&mut tape, params)?;
        tape.backward(&l)?
    };
    let mut rng = Rng::new(seed);
    let mut work = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
    for name in names {
        // Parameters the loss never reads have an exact zero gradient.
        let zero;
        let grad = match analytic.get(&name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(params.tensor(&name)?.shape());
                &zero
            }
        };
        let n = grad.numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(m) = max_per_tensor.filter(|&m| m < n) {
            rng.shuffle(&mut coords);
            coords.truncate(m);
            coords.sort_unstable();
        }
        for i in coords {
            let original = work.tensor(&name)?.data()[i];
            work.get_mut(&name)?.tensor.data_mut()[i] = original + step;
            let plus = evaluate(&work, &loss)?;
            work.get_mut(&name)?.tensor.data_mut()[i] = original - step;
            let minus = evaluate(&work, &loss)?;
            work.get_mut(&name)?.tensor.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
