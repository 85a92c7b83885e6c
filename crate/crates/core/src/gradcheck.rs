//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Mat;

pub const STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(tensor name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is ~0 are judged by absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Samples `per_tensor` entries of every tensor and compares `analytic`
/// against `(loss(w + h) - loss(w - h)) / 2h`. `set` writes one parameter
/// entry and returns its previous value.
pub fn finite_difference_check<M: Clone>(
    model: &M,
    names: &[String],
    analytic: &[&Mat],
    per_tensor: usize,
    seed: u64,
    mut set: impl FnMut(&mut M, usize, usize, f64) -> f64,
    mut loss: impl FnMut(&M) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (t, grad) in analytic.iter().enumerate() {
        let len = grad.data.len();
        for _ in 0..per_tensor.min(len) {
            let j = rng.gen_range(0..len);
            let orig = set(&mut probe, t, j, 0.0);
            set(&mut probe, t, j, orig + STEP);
            let plus = loss(&probe)?;
            set(&mut probe, t, j, orig - STEP);
            let minus = loss(&probe)?;
            set(&mut probe, t, j, orig);
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = grad.data[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((names[t].clone(), j, a, numeric));
            }
        }
    }
    Ok(report)
}
