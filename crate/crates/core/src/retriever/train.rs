use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{RetrieverConfig, RetrieverModel, RetrieverParams};
use crate::error::{Error, Result};
use crate::eval::rank_of_ground_truth;
use crate::ingest::SplitCorpus;
use crate::optim::AdamW;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub validation_interval_iters: usize,
    pub early_stop_rounds: usize,
    pub max_sequence_length: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for gradient computation within a batch. Per-sequence
    /// dropout streams are drawn up front, so results do not depend on it
    /// beyond floating-point summation grouping.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            layers: 2,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            dropout: 0.1,
            max_epochs: 500,
            validation_interval_iters: 500,
            early_stop_rounds: 20,
            max_sequence_length: 50,
            batch_size: 64,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("max_epochs", self.max_epochs),
            ("validation_interval_iters", self.validation_interval_iters),
            ("early_stop_rounds", self.early_stop_rounds),
            ("max_sequence_length", self.max_sequence_length),
            ("batch_size", self.batch_size),
            ("threads", self.threads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning rate and weight decay must be >= 0"));
        }
        Ok(())
    }

    pub fn model_config(&self, num_items: usize) -> RetrieverConfig {
        RetrieverConfig {
            num_items,
            dim: self.dim,
            layers: self.layers,
            dropout: self.dropout,
            max_len: self.max_sequence_length,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of every iteration.
    pub losses: Vec<f64>,
    /// `(iteration, validation Recall@10)`.
    pub validations: Vec<(usize, f64)>,
    pub best_recall: f64,
    pub best_iteration: usize,
    pub epochs: usize,
    pub stopped_early: bool,
}

/// Splits every training sequence into windows of at most `max_len + 1`
/// items so each position after the first is a target exactly once.
/// Windows are cut from the most recent end.
pub fn training_windows(split: &SplitCorpus, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for u in &split.users {
        let seq = &u.train;
        let mut end = seq.len();
        while end > 1 {
            let start = end.saturating_sub(max_len).max(1);
            out.push(seq[start - 1..end].to_vec());
            end = start;
        }
    }
    out
}

/// Validation Recall@10: each user's training items predict the
/// validation target, ranked against the whole catalog.
pub fn recall_at_k_on_valid(model: &RetrieverModel, split: &SplitCorpus, k: usize) -> Result<f64> {
    if split.users.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for u in &split.users {
        let scores = model.score_sequence(u.valid_input())?;
        if rank_of_ground_truth(&scores, u.valid_target)? <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / split.users.len() as f64)
}

fn batch_grads(
    model: &RetrieverModel,
    windows: &[&[usize]],
    seeds: &[u64],
    total: usize,
    threads: usize,
) -> Result<(f64, RetrieverParams)> {
    let run = |ws: &[&[usize]], ss: &[u64]| -> Result<(f64, RetrieverParams)> {
        let mut grads = RetrieverParams::zeros_like(&model.params);
        let mut loss = 0.0;
        for (w, &s) in ws.iter().zip(ss) {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (l, g) = model.loss_and_grad(&[*w], Some(&mut rng))?;
            // loss_and_grad normalizes by this window's positions
            let share = (w.len() - 1) as f64 / total as f64;
            loss += l * share;
            let mut g = g;
            g.scale(share);
            grads.add_assign(&g);
        }
        Ok((loss, grads))
    };
    if threads <= 1 || windows.len() < 2 {
        return run(windows, seeds);
    }
    let chunk = windows.len().div_ceil(threads);
    let parts: Vec<Result<(f64, RetrieverParams)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = windows
            .chunks(chunk)
            .zip(seeds.chunks(chunk))
            .map(|(ws, ss)| scope.spawn(move || run(ws, ss)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut loss = 0.0;
    let mut grads = RetrieverParams::zeros_like(&model.params);
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Autoregressive next-item training with full-catalog cross-entropy.
/// Keeps the parameters with the best validation Recall@10 and stops after
/// `early_stop_rounds` validations without improvement.
pub fn train_retriever(split: &SplitCorpus, config: &TrainConfig) -> Result<(RetrieverModel, TrainLog)> {
    train_retriever_with(split, config, RetrieverModel::new(config.model_config(split.num_items())))
}

/// As [`train_retriever`], starting from the given model.
pub fn train_retriever_with(
    split: &SplitCorpus,
    config: &TrainConfig,
    mut model: RetrieverModel,
) -> Result<(RetrieverModel, TrainLog)> {
    config.validate()?;
    if split.users.is_empty() {
        return Err(Error::invalid("cannot train on an empty split"));
    }
    model.config.dropout = config.dropout;
    model.config.max_len = config.max_sequence_length;
    let windows = training_windows(split, config.max_sequence_length);
    if windows.is_empty() {
        return Err(Error::invalid("no training sequence has two or more items"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut log = TrainLog {
        best_recall: f64::NEG_INFINITY,
        ..TrainLog::default()
    };
    let mut best = model.params.clone();
    let mut stale = 0usize;
    let mut iteration = 0usize;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    'epochs: for epoch in 0..config.max_epochs {
        log.epochs = epoch + 1;
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let ws: Vec<&[usize]> = batch.iter().map(|&i| windows[i].as_slice()).collect();
            let seeds: Vec<u64> = ws.iter().map(|_| rng.gen()).collect();
            let total: usize = ws.iter().map(|w| w.len() - 1).sum();
            let (loss, grads) = batch_grads(&model, &ws, &seeds, total, config.threads)?;
            iteration += 1;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { iteration, loss });
            }
            log.losses.push(loss);
            opt.step(model.params.tensors_mut(), grads.tensors());

            if iteration % config.validation_interval_iters == 0 {
                let recall = recall_at_k_on_valid(&model, split, 10)?;
                log.validations.push((iteration, recall));
                log::info!("iter {iteration} epoch {epoch} loss {loss:.4} valid R@10 {recall:.4}");
                if recall > log.best_recall {
                    log.best_recall = recall;
                    log.best_iteration = iteration;
                    best = model.params.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.early_stop_rounds {
                        log.stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    if !log.stopped_early && log.validations.last().map(|v| v.0) != Some(iteration) {
        let recall = recall_at_k_on_valid(&model, split, 10)?;
        log.validations.push((iteration, recall));
        if recall > log.best_recall {
            log.best_recall = recall;
            log.best_iteration = iteration;
            best = model.params.clone();
        }
    }
    model.params = best;
    Ok((model, log))
}
