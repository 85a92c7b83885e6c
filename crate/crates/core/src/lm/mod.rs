//! Small decoder-only language model used as the ranker, plus a client for
//! an external logit server.

mod gradcheck;
mod model;
mod remote;
mod train;

use std::thread;

pub use gradcheck::gradient_check;
pub use model::{masked_label_loss, CallCounter, LmConfig, LmLayer, LmParams, TinyCausalLM};
pub use remote::RemoteClient;
pub use train::{train_ranker_lm, RankerTrainConfig, RankerTrainLog};

use crate::error::{Error, Result};
use crate::prompt::EOS;

/// [`TinyCausalLM::next_token_logits`] for several prompts, spread over up
/// to `threads` workers. Output order follows input order.
pub fn next_token_logits_batch(
    model: &TinyCausalLM,
    prompts: &[&[usize]],
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let threads = threads.clamp(1, prompts.len().max(1));
    if threads == 1 {
        return prompts.iter().map(|p| model.next_token_logits(p)).collect();
    }
    let size = prompts.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> = prompts
            .chunks(size)
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|p| model.next_token_logits(p))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(prompts.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Generated tokens, without the terminating end-of-sequence marker.
    pub tokens: Vec<usize>,
    pub forward_passes: usize,
    pub hit_eos: bool,
}

/// Greedy decoding: appends the argmax token (lowest id on ties) until
/// end-of-sequence or `max_new` tokens. With `stop_at_eos` off the marker
/// is kept like any other token and only the limit ends generation.
pub fn greedy_generate(
    model: &TinyCausalLM,
    prompt: &[usize],
    max_new: usize,
    stop_at_eos: bool,
) -> Result<Generation> {
    if max_new == 0 {
        return Err(Error::invalid("generation limit must be positive"));
    }
    let mut seq = prompt.to_vec();
    let mut out = Generation {
        tokens: Vec::new(),
        forward_passes: 0,
        hit_eos: false,
    };
    while out.tokens.len() < max_new {
        let logits = model.next_token_logits(&seq)?;
        out.forward_passes += 1;
        let next = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > logits[best] { i } else { best });
        if next == EOS && stop_at_eos {
            out.hit_eos = true;
            break;
        }
        out.tokens.push(next);
        seq.push(next);
    }
    Ok(out)
}
