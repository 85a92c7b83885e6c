use rand_chacha::ChaCha8Rng;

use super::model::{LmParams, TinyCausalLM};
use crate::error::Result;
use crate::gradcheck::{finite_difference_check, GradCheckReport};

/// Finite-difference check of the summed label loss over `examples`, each a
/// `(tokens, label_span)` pair. Dropout is off.
pub fn gradient_check(
    model: &TinyCausalLM,
    examples: &[(Vec<usize>, Vec<usize>)],
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut grads = LmParams::zeros_like(&model.params);
    for (t, s) in examples {
        model.example_loss_and_grad(t, s, None::<&mut ChaCha8Rng>, 1.0, &mut grads)?;
    }
    finite_difference_check(
        model,
        &model.params.names(),
        &grads.tensors(),
        per_tensor,
        seed,
        |m: &mut TinyCausalLM, t, j, v| std::mem::replace(&mut m.params.tensors_mut()[t].data[j], v),
        |m: &TinyCausalLM| {
            examples
                .iter()
                .map(|(t, s)| m.example_loss(t, s))
                .sum::<Result<f64>>()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::tensor::Mat;
    use rand::{Rng, SeedableRng};

    /// Random tiny model with non-trivial weights and examples.
    pub(crate) fn random_case(seed: u64) -> (TinyCausalLM, Vec<(Vec<usize>, Vec<usize>)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.gen_range(1..=2);
        let cfg = LmConfig {
            vocab_size: rng.gen_range(4..=12),
            layers: rng.gen_range(1..=2),
            dim: heads * rng.gen_range(2..=4),
            heads,
            ff_dim: rng.gen_range(3..=10),
            context: 10,
            dropout: 0.0,
            seed,
        };
        let mut m = TinyCausalLM::new(cfg.clone()).unwrap();
        for t in m.params.tensors_mut() {
            let (r, c) = (t.rows, t.cols);
            let noise = Mat::randn(r, c, 0.4, &mut rng);
            t.add_assign(&noise);
        }
        let examples = (0..2)
            .map(|_| {
                let len = rng.gen_range(3..=cfg.context);
                let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
                (toks, vec![len - 2, len - 1])
            })
            .collect();
        (m, examples)
    }

    #[test]
    fn width_eight_two_layers() {
        let (_, ex) = random_case(0);
        let m = TinyCausalLM::new(LmConfig {
            vocab_size: 9,
            layers: 2,
            dim: 8,
            heads: 2,
            ff_dim: 16,
            context: 10,
            dropout: 0.0,
            seed: 4,
        })
        .unwrap();
        let ex: Vec<_> = ex.into_iter().map(|(t, s)| (t.into_iter().map(|x| x % 9).collect(), s)).collect();
        let r = gradient_check(&m, &ex, 8, 1).unwrap();
        assert!(r.max_relative_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn random_tiny_configurations() {
        for seed in 0..10 {
            let (m, ex) = random_case(seed);
            let r = gradient_check(&m, &ex, 5, seed).unwrap();
            assert!(r.max_relative_error <= 1e-3, "seed {seed}: {r:?}");
        }
    }
}
