use rand_chacha::ChaCha8Rng;

use super::model::RetrieverModel;
use crate::error::Result;
use crate::gradcheck::{finite_difference_check, GradCheckReport};

/// Compares the analytic gradient of the mean next-item loss against
/// central finite differences on `per_tensor` sampled entries of every
/// parameter tensor. Dropout is off.
pub fn gradient_check(
    model: &RetrieverModel,
    windows: &[Vec<usize>],
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let refs: Vec<&[usize]> = windows.iter().map(Vec::as_slice).collect();
    let (_, grads) = model.loss_and_grad(&refs, None::<&mut ChaCha8Rng>)?;
    finite_difference_check(
        model,
        &model.params.names(),
        &grads.tensors(),
        per_tensor,
        seed,
        |m: &mut RetrieverModel, t, j, v| std::mem::replace(&mut m.params.tensors_mut()[t].data[j], v),
        |m: &RetrieverModel| Ok(m.loss_and_grad(&refs, None::<&mut ChaCha8Rng>)?.0),
    )
}
