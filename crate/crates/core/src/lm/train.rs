use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LmParams, TinyCausalLM};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::prompt::RenderedPrompt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerTrainConfig {
    pub epochs: usize,
    pub validation_interval_iters: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        RankerTrainConfig {
            epochs: 1,
            validation_interval_iters: 100,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 8,
            grad_clip: 1.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl RankerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.validation_interval_iters == 0 || self.batch_size == 0 {
            return Err(Error::Config("ranker epochs, interval and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("ranker learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankerTrainLog {
    /// Mean per-example label loss of every iteration.
    pub losses: Vec<f64>,
    pub validations: Vec<(usize, f64)>,
    pub best_score: Option<f64>,
    pub best_iteration: usize,
    pub iterations: usize,
}

/// Gradient of the mean per-example loss over `batch`. Examples are split
/// into contiguous chunks, one per thread, and chunk sums are added in
/// order, so the result depends only on the thread count.
fn batch_grads(
    model: &TinyCausalLM,
    batch: &[&RenderedPrompt],
    dropout_seed: u64,
    threads: usize,
) -> Result<(f64, LmParams)> {
    let weight = 1.0 / batch.len() as f64;
    let run = |start: usize, chunk: &[&RenderedPrompt]| -> Result<(f64, LmParams)> {
        let mut g = LmParams::zeros_like(&model.params);
        let mut loss = 0.0;
        for (k, p) in chunk.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed ^ ((start + k) as u64).wrapping_mul(0x9e37_79b9));
            loss += model.example_loss_and_grad(&p.tokens, &p.label_span, Some(&mut rng), weight, &mut g)?;
        }
        Ok((loss, g))
    };
    let threads = threads.clamp(1, batch.len());
    if threads == 1 {
        let (l, g) = run(0, batch)?;
        return Ok((l * weight, g));
    }
    let size = batch.len().div_ceil(threads);
    let parts: Vec<Result<(f64, LmParams)>> = thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(size)
            .enumerate()
            .map(|(c, chunk)| {
                let run = &run;
                s.spawn(move || run(c * size, chunk))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = 0.0;
    let mut grads: Option<LmParams> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    Ok((total * weight, grads.expect("at least one chunk")))
}

/// Fine-tunes `model` on labelled prompts with loss on the label tokens
/// only. When `validate` is given it is called every
/// `validation_interval_iters` iterations and after the last one; the
/// parameters with the highest score are returned.
pub fn train_ranker_lm(
    mut model: TinyCausalLM,
    examples: &[RenderedPrompt],
    config: &RankerTrainConfig,
    mut validate: Option<&mut dyn FnMut(&TinyCausalLM) -> Result<f64>>,
) -> Result<(TinyCausalLM, RankerTrainLog)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no ranker training examples"));
    }
    for p in examples {
        if !p.has_label() {
            return Err(Error::invalid("ranker training prompt without label"));
        }
        if p.tokens.len() > model.config.context {
            return Err(Error::ContextOverflow {
                len: p.tokens.len(),
                context: model.config.context,
            });
        }
    }
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let mut log = RankerTrainLog::default();
    let mut best: Option<LmParams> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut check = |model: &TinyCausalLM, it: usize, log: &mut RankerTrainLog, best: &mut Option<LmParams>| -> Result<()> {
        if let Some(v) = validate.as_deref_mut() {
            let score = v(model)?;
            log::info!("ranker iteration {it}: validation {score:.4}");
            log.validations.push((it, score));
            if log.best_score.map_or(true, |b| score > b) {
                log.best_score = Some(score);
                log.best_iteration = it;
                *best = Some(model.params.clone());
            }
        }
        Ok(())
    };
    let mut iteration = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            iteration += 1;
            let batch: Vec<&RenderedPrompt> = chunk.iter().map(|&i| &examples[i]).collect();
            let seed = config.seed.wrapping_add(iteration as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
            let (loss, mut grads) = batch_grads(&model, &batch, seed, config.threads)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { iteration, loss });
            }
            if config.grad_clip > 0.0 {
                let norm = grads.norm();
                if norm > config.grad_clip {
                    grads.scale(config.grad_clip / norm);
                }
            }
            let g = grads.tensors();
            opt.step(model.params.tensors_mut(), g);
            if !model.params.is_finite() {
                return Err(Error::Divergence { iteration, loss });
            }
            log.losses.push(loss);
            if iteration % config.validation_interval_iters == 0 {
                check(&model, iteration, &mut log, &mut best)?;
            }
        }
    }
    log.iterations = iteration;
    if log.validations.last().map(|v| v.0) != Some(iteration) {
        check(&model, iteration, &mut log, &mut best)?;
    }
    if let Some(p) = best {
        model.params = p;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::prompt::{render_prompt, PromptTemplate, Tokenizer};

    fn small_lm() -> TinyCausalLM {
        TinyCausalLM::new(LmConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            ff_dim: 32,
            context: 64,
            dropout: 0.0,
            ..LmConfig::default()
        })
        .unwrap()
    }

    fn example(hist: &str, label: char) -> RenderedPrompt {
        let t = PromptTemplate::parse("{history}|{candidates}>{label}").unwrap();
        render_prompt(&t, &Tokenizer::default(), &[hist], &[('A', "x"), ('B', "y")], Some(label)).unwrap()
    }

    #[test]
    fn overfits_single_example_monotonically() {
        let ex = vec![example("abc", 'B')];
        let cfg = RankerTrainConfig {
            epochs: 50,
            batch_size: 1,
            grad_clip: 0.0,
            validation_interval_iters: 1000,
            ..RankerTrainConfig::default()
        };
        let (_, log) = train_ranker_lm(small_lm(), &ex, &cfg, None).unwrap();
        assert_eq!(log.losses.len(), 50);
        assert!(log.losses.windows(2).all(|w| w[1] < w[0]), "{:?}", log.losses);
    }

    #[test]
    fn learns_label_from_history() {
        let ex: Vec<RenderedPrompt> = (0..16)
            .map(|i| if i % 2 == 0 { example("aaaa", 'A') } else { example("bbbb", 'B') })
            .collect();
        let cfg = RankerTrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 3e-3,
            ..RankerTrainConfig::default()
        };
        let (m, _) = train_ranker_lm(small_lm(), &ex, &cfg, None).unwrap();
        let tok = Tokenizer::default();
        let (a, b) = (tok.token_of('A').unwrap(), tok.token_of('B').unwrap());
        let la = m.next_token_logits(example("aaaa", 'A').context()).unwrap();
        let lb = m.next_token_logits(example("bbbb", 'B').context()).unwrap();
        assert!(la[a] > la[b] && lb[b] > lb[a]);
    }

    #[test]
    fn keeps_best_validation_checkpoint() {
        let ex: Vec<RenderedPrompt> = (0..8).map(|_| example("ab", 'A')).collect();
        let cfg = RankerTrainConfig {
            epochs: 3,
            batch_size: 2,
            validation_interval_iters: 2,
            ..RankerTrainConfig::default()
        };
        let mut calls = 0;
        let mut snapshots = Vec::new();
        let mut v = |m: &TinyCausalLM| {
            calls += 1;
            snapshots.push(m.params.clone());
            // best at the second validation
            Ok(if calls == 2 { 1.0 } else { 0.0 })
        };
        let (m, log) = train_ranker_lm(small_lm(), &ex, &cfg, Some(&mut v)).unwrap();
        assert_eq!(log.iterations, 12);
        assert_eq!(log.validations.len(), 6);
        assert_eq!(log.best_iteration, 4);
        assert_eq!(m.params, snapshots[1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = RankerTrainConfig::default();
        let mut unlabelled = example("a", 'A');
        unlabelled.label_span.clear();
        assert!(train_ranker_lm(small_lm(), &[unlabelled], &cfg, None).is_err());
        let long = example(&"z".repeat(80), 'A');
        assert!(matches!(
            train_ranker_lm(small_lm(), &[long], &cfg, None),
            Err(Error::ContextOverflow { .. })
        ));
        let mut huge = small_lm();
        huge.params.tok_emb.data[0] = f64::NAN;
        assert!(matches!(
            train_ranker_lm(huge, &[example("a", 'A')], &cfg, None),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn deterministic_and_thread_count_stable() {
        let ex: Vec<RenderedPrompt> = (0..6).map(|i| example(&"q".repeat(i + 1), 'B')).collect();
        let cfg = RankerTrainConfig {
            epochs: 2,
            batch_size: 3,
            ..RankerTrainConfig::default()
        };
        let with_dropout = || {
            let mut m = small_lm();
            m.config.dropout = 0.2;
            m
        };
        let (m1, l1) = train_ranker_lm(with_dropout(), &ex, &cfg, None).unwrap();
        let (m2, l2) = train_ranker_lm(with_dropout(), &ex, &cfg, None).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        let (m3, _) = train_ranker_lm(with_dropout(), &ex, &RankerTrainConfig { threads: 3, ..cfg }, None).unwrap();
        for (a, b) in m1.params.tensors().iter().zip(m3.params.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
