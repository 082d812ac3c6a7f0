//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elements whose gradients are smaller than this fraction of the largest
/// gradient magnitude are compared against that scale instead of their own.
pub const SCALE_FLOOR: f32 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst elementwise relative error among compared elements.
    pub max_rel_error: f32,
    /// `(parameter, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f32,
    pub numeric: f32,
    /// Elements compared.
    pub checked: usize,
    /// Elements left out because every step crossed a ReLU, max-pool or
    /// clamp boundary, where the gradient is undefined.
    pub straddling: usize,
}

impl GradCheck {
    pub fn straddling_fraction(&self) -> f32 {
        self.straddling as f32 / (self.checked + self.straddling).max(1) as f32
    }
}

/// Step multipliers tried for every element, largest first.
const STEP_LADDER: [f32; 5] = [3.0, 1.0, 1.0 / 3.0, 0.1, 1.0 / 30.0];

/// Assumed rounding error of a loss evaluation, in ulps of its value.
const ROUNDING_ULPS: f64 = 8.0;

/// Compares the tape gradient of the scalar returned by `f` against central
/// differences `(f(p+h) - f(p-h)) / 2h`, element by element.
///
/// Each element is differenced at `h = eps · m` for every `m` in a fixed
/// ladder. Large steps suffer truncation error where the loss curves
/// sharply, small ones lose the difference to f32 rounding, so the estimate
/// kept is the smaller step of the adjacent pair with the lowest sum of
/// disagreement and estimated rounding error. Steps
/// whose perturbed evaluations take a different piecewise branch than the
/// unperturbed one (see [`Tape::branch_signature`]) are discarded; an
/// element with no usable step is counted in `straddling`.
///
/// The relative error of an element is `|a - n| / max(|a|, |n|, floor)`
/// with `floor = SCALE_FLOOR · max|a|`. `f` must be deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok((v as f64, tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    let (_, center) = eval(params)?;

    let scale = analytic
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0f32, |m, v| m.max(v.abs()));
    let floor = (SCALE_FLOOR * scale).max(f32::MIN_POSITIVE);

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        straddling: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.len() {
            let original = param.data()[ei];
            let mut estimates = Vec::with_capacity(STEP_LADDER.len());
            for m in STEP_LADDER {
                let step = eps * m;
                let hi = original + step;
                let lo = original - step;
                probe[pi].data_mut()[ei] = hi;
                let (plus, sig_plus) = eval(&probe)?;
                probe[pi].data_mut()[ei] = lo;
                let (minus, sig_minus) = eval(&probe)?;
                probe[pi].data_mut()[ei] = original;
                if sig_plus == center && sig_minus == center {
                    // difference of the representable points, not the nominal step
                    let width = hi as f64 - lo as f64;
                    let rounding = ROUNDING_ULPS * f32::EPSILON as f64 * plus.abs().max(minus.abs()) / width;
                    estimates.push(((plus - minus) / width, rounding));
                }
            }
            let cost = |pair: &[(f64, f64)]| (pair[0].0 - pair[1].0).abs() + pair[1].1;
            let numeric = estimates
                .windows(2)
                .min_by(|a, b| cost(a).total_cmp(&cost(b)))
                .map(|pair| pair[1].0)
                .or(estimates.first().map(|e| e.0))
                .map(|n| n as f32);
            let Some(numeric) = numeric else {
                worst.straddling += 1;
                continue;
            };
            worst.checked += 1;
            let a = analytic[pi].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst = (pi, ei);
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
    }
    Ok(worst)
}
