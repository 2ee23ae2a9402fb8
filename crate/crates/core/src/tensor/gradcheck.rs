//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, TensorError};

/// Guarded relative error: denominators are floored so that finite-difference
/// noise on near-zero gradients does not register as failure. Below the floor
/// the comparison degrades to an absolute tolerance of `tol * GRAD_FLOOR`.
const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat element index where the worst disagreement occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }
}

/// Compare analytic gradients against central finite differences for every
/// element of every named parameter.
///
/// `loss_fn` must rebuild the computation from scratch (fresh tape) and
/// return the scalar loss with its tape; it is invoked repeatedly while the
/// parameter buffers are perturbed in place, so it has to be deterministic.
pub fn gradcheck<F>(
    params: &[(String, Tensor)],
    mut loss_fn: F,
    tolerance: f64,
    step: f64,
) -> Result<GradcheckReport, TensorError>
where
    F: FnMut() -> Result<(Tape, Tensor), TensorError>,
{
    let eval = |loss_fn: &mut F| -> Result<f64, TensorError> {
        let (_tape, loss) = loss_fn()?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "gradcheck" });
        }
        Ok(v)
    };

    // Analytic pass.
    for (_, p) in params {
        p.zero_grad();
    }
    let (tape, loss) = loss_fn()?;
    if !loss.item().is_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck" });
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    drop(tape);

    let mut entries = Vec::with_capacity(params.len());
    for ((name, param), grads) in params.iter().zip(&analytic) {
        let mut worst = GradcheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: grads.first().copied().unwrap_or(0.0),
            numeric: 0.0,
        };
        for i in 0..param.len() {
            let original = param.value()[i];
            param.map_data(|d| d[i] = original + step);
            let plus = eval(&mut loss_fn);
            param.map_data(|d| d[i] = original - step);
            let minus = eval(&mut loss_fn);
            param.map_data(|d| d[i] = original);
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * step);
            let denom = grads[i].abs().max(numeric.abs()).max(GRAD_FLOOR);
            let rel = (grads[i] - numeric).abs() / denom;
            if rel > worst.max_rel_err {
                worst = GradcheckEntry {
                    name: name.clone(),
                    max_rel_err: rel,
                    worst_index: i,
                    analytic: grads[i],
                    numeric,
                };
            }
        }
        entries.push(worst);
    }
    Ok(GradcheckReport { entries, tolerance })
}
