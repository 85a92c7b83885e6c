//! Wall-clock comparison of single-pass letter scoring against greedy
//! generation of a ranked title list.

use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{greedy_generate, TinyCausalLM};
use crate::prompt::{assign_index_letters, render_prompt, PromptTemplate, RenderedPrompt, Tokenizer};
use crate::ranker::{extract_candidate_scores, rank_candidates, Verbalizer};
use crate::retriever::CandidateSet;

/// Published full-scale timings at title length 20, in seconds: greedy
/// generation, and the upper bound for letter scoring. Not reproducible
/// here; kept for comparison only.
pub const FULL_SCALE_REFERENCE_S: (f64, f64) = (56.16, 1.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Candidate title lengths in tokens, ascending.
    pub title_lengths: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub candidates: usize,
    pub history_items: usize,
    pub history_title_len: usize,
    /// End generation at end-of-sequence. Off by default so that every run
    /// spends the full budget.
    pub stop_at_eos: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            title_lengths: vec![4, 8, 12, 16, 20],
            repetitions: 3,
            warmup: 1,
            candidates: 20,
            history_items: 20,
            history_title_len: 20,
            stop_at_eos: false,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::Config("bench needs at least 3 repetitions".into()));
        }
        if self.title_lengths.is_empty()
            || self.title_lengths[0] == 0
            || self.title_lengths.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("title lengths must be positive and ascending".into()));
        }
        if self.candidates == 0 || self.candidates > 26 || self.history_items == 0 {
            return Err(Error::Config("bench candidate/history counts out of range".into()));
        }
        Ok(())
    }

    /// Generation budget at one title length: every candidate title once.
    pub fn stop_budget(&self, title_len: usize) -> usize {
        self.candidates * title_len
    }
}

const WORDS: [&str; 16] = [
    "red", "moon", "river", "stone", "night", "city", "storm", "garden", "silver", "road",
    "winter", "fire", "ocean", "dream", "shadow", "light",
];

/// Title of exactly `len` characters built from space-separated words.
pub fn synthetic_title<R: rand::Rng>(len: usize, rng: &mut R) -> String {
    let mut s = String::new();
    while s.len() < len {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(WORDS.choose(rng).expect("non-empty word list"));
    }
    s.truncate(len);
    // a trailing space would be trimmed by catalog cleaning elsewhere
    if s.ends_with(' ') {
        s.pop();
        s.push('x');
    }
    s
}

/// Bench prompt at one candidate title length.
pub fn bench_prompt(config: &BenchConfig, title_len: usize) -> Result<(RenderedPrompt, CandidateSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ title_len as u64);
    let history: Vec<String> = (0..config.history_items)
        .map(|_| synthetic_title(config.history_title_len, &mut rng))
        .collect();
    let titles: Vec<String> = (0..config.candidates)
        .map(|_| synthetic_title(title_len, &mut rng))
        .collect();
    let items: Vec<usize> = (0..config.candidates).collect();
    let lettered = assign_index_letters(&items)?;
    let hist_refs: Vec<&str> = history.iter().map(String::as_str).collect();
    let cand_refs: Vec<(char, &str)> = lettered.iter().map(|&(l, i)| (l, titles[i].as_str())).collect();
    let prompt = render_prompt(
        &PromptTemplate::default(),
        &Tokenizer::default(),
        &hist_refs,
        &cand_refs,
        None,
    )?;
    let set = CandidateSet {
        user_id: "bench".into(),
        scores: (0..items.len()).rev().map(|s| s as f64).collect(),
        items,
    };
    Ok((prompt, set))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Verbalizer,
    Generation,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Verbalizer => "verbalizer",
            Method::Generation => "generation",
        })
    }
}

/// Timing samples for one method at one title length.
#[derive(Clone, Debug, PartialEq)]
pub struct Timings {
    pub title_len: usize,
    pub samples: Vec<f64>,
    /// Forward passes per timed run.
    pub forward_passes: usize,
    pub prompt_tokens: usize,
}

fn time_runs(
    config: &BenchConfig,
    mut run: impl FnMut() -> Result<usize>,
) -> Result<(Vec<f64>, usize)> {
    for _ in 0..config.warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(config.repetitions);
    let mut passes = 0;
    for _ in 0..config.repetitions {
        let start = Instant::now();
        passes = run()?;
        samples.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    Ok((samples, passes))
}

/// One forward pass, letter extraction and candidate sort per run.
/// Prompts are tokenized before timing starts.
pub fn bench_verbalizer(model: &TinyCausalLM, config: &BenchConfig) -> Result<Vec<Timings>> {
    config.validate()?;
    let tok = Tokenizer::default();
    config
        .title_lengths
        .iter()
        .map(|&len| {
            let (prompt, set) = bench_prompt(config, len)?;
            let verbalizer = Verbalizer::new(&tok, &prompt.letters)?;
            let (samples, forward_passes) = time_runs(config, || {
                let before = model.forward_calls.get();
                let logits = model.next_token_logits(&prompt.tokens)?;
                let scores = extract_candidate_scores(&logits, &verbalizer, set.len())?;
                rank_candidates(&set, scores)?;
                Ok(model.forward_calls.get() - before)
            })?;
            Ok(Timings {
                title_len: len,
                samples,
                forward_passes,
                prompt_tokens: prompt.tokens.len(),
            })
        })
        .collect()
}

/// Greedy decoding with a budget of `candidates * title_len` tokens.
pub fn bench_generation(model: &TinyCausalLM, config: &BenchConfig) -> Result<Vec<Timings>> {
    config.validate()?;
    config
        .title_lengths
        .iter()
        .map(|&len| {
            let (prompt, _) = bench_prompt(config, len)?;
            let budget = config.stop_budget(len);
            let (samples, forward_passes) = time_runs(config, || {
                Ok(greedy_generate(model, &prompt.tokens, budget, config.stop_at_eos)?.forward_passes)
            })?;
            Ok(Timings {
                title_len: len,
                samples,
                forward_passes,
                prompt_tokens: prompt.tokens.len(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub title_len: usize,
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn from_timings(verbalizer: &[Timings], generation: &[Timings]) -> Self {
        let mut rows = Vec::new();
        for (method, ts) in [(Method::Verbalizer, verbalizer), (Method::Generation, generation)] {
            for t in ts {
                let n = t.samples.len().max(1) as f64;
                let mean = t.samples.iter().sum::<f64>() / n;
                let min = t.samples.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = t.samples.iter().cloned().fold(0.0, f64::max);
                rows.push(BenchRow {
                    method,
                    title_len: t.title_len,
                    // guard against rounding pushing the mean outside [min, max]
                    mean_s: mean.clamp(min, max),
                    min_s: min,
                    max_s: max,
                });
            }
        }
        BenchReport { rows }
    }

    pub fn mean(&self, method: Method, title_len: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.title_len == title_len)
            .map(|r| r.mean_s)
    }

    /// Largest over smallest mean time of a method across the sweep.
    pub fn spread(&self, method: Method) -> Option<f64> {
        let means: Vec<f64> = self.rows.iter().filter(|r| r.method == method).map(|r| r.mean_s).collect();
        let max = means.iter().cloned().fold(f64::NAN, f64::max);
        let min = means.iter().cloned().fold(f64::NAN, f64::min);
        (!means.is_empty()).then(|| max / min)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let rows = csv::Reader::from_reader(r)
            .deserialize()
            .enumerate()
            .map(|(i, row)| row.map_err(|e| Error::parse(i + 2, e.to_string())))
            .collect::<Result<_>>()?;
        Ok(BenchReport { rows })
    }

    /// Whitespace-separated columns for gnuplot: title length, then mean
    /// seconds of each method.
    pub fn write_plot_data<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# title_len verbalizer_mean_s generation_mean_s")?;
        let mut lens: Vec<usize> = self.rows.iter().map(|r| r.title_len).collect();
        lens.sort_unstable();
        lens.dedup();
        for len in lens {
            let cell = |m| self.mean(m, len).map_or("NaN".to_string(), |v| v.to_string());
            writeln!(w, "{len} {} {}", cell(Method::Verbalizer), cell(Method::Generation))?;
        }
        Ok(())
    }
}
