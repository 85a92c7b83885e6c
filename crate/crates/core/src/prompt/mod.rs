//! Instruction prompts over item titles.

mod template;
mod tokenizer;

use serde::{Deserialize, Serialize};

pub use template::{render_prompt, PromptTemplate, RenderedPrompt, DEFAULT_TEMPLATE};
pub use tokenizer::{Tokenizer, EOS, PAD, REPLACEMENT, UNK};

use crate::error::{Error, Result};
use crate::ingest::ItemCatalog;

pub const MAX_LETTERS: usize = 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptLimits {
    pub max_history: usize,
    pub max_title_tokens: usize,
    pub max_candidates: usize,
}

impl Default for PromptLimits {
    fn default() -> Self {
        PromptLimits {
            max_history: 20,
            max_title_tokens: 32,
            max_candidates: 20,
        }
    }
}

impl PromptLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_history == 0 || self.max_title_tokens == 0 || self.max_candidates == 0 {
            return Err(Error::Config("prompt limits must be positive".into()));
        }
        if self.max_candidates > MAX_LETTERS {
            return Err(Error::Config(format!(
                "at most {MAX_LETTERS} candidates can be lettered"
            )));
        }
        Ok(())
    }
}

/// Pairs candidates with `A`, `B`, ... in the given order.
pub fn assign_index_letters(candidates: &[usize]) -> Result<Vec<(char, usize)>> {
    if candidates.is_empty() || candidates.len() > MAX_LETTERS {
        return Err(Error::invalid(format!(
            "{} candidates; index letters support 1..={MAX_LETTERS}",
            candidates.len()
        )));
    }
    Ok(candidates
        .iter()
        .zip('A'..='Z')
        .map(|(&item, l)| (l, item))
        .collect())
}

/// Keeps the first `max_tokens` tokens of a title.
pub fn truncate_title(title: &str, tokenizer: &Tokenizer, max_tokens: usize) -> String {
    let tokens = tokenizer.encode(title);
    if tokens.len() <= max_tokens {
        return tokenizer.sanitize(title);
    }
    tokenizer.decode(&tokens[..max_tokens])
}

/// The most recent `max_items` entries.
pub fn truncate_history<T>(sequence: &[T], max_items: usize) -> &[T] {
    &sequence[sequence.len().saturating_sub(max_items)..]
}

/// Renders prompts for catalog items under fixed limits.
#[derive(Clone, Debug)]
pub struct PromptBuilder<'a> {
    pub catalog: &'a ItemCatalog,
    pub template: PromptTemplate,
    pub tokenizer: Tokenizer,
    pub limits: PromptLimits,
}

impl<'a> PromptBuilder<'a> {
    pub fn new(catalog: &'a ItemCatalog) -> Self {
        PromptBuilder {
            catalog,
            template: PromptTemplate::default(),
            tokenizer: Tokenizer::default(),
            limits: PromptLimits::default(),
        }
    }

    fn title(&self, item: usize) -> Result<String> {
        self.catalog.check(item)?;
        let t = self.catalog.title(item);
        Ok(truncate_title(t, &self.tokenizer, self.limits.max_title_tokens))
    }

    /// `target`, when given, must be one of `candidates`; its letter becomes
    /// the label.
    pub fn build(
        &self,
        history: &[usize],
        candidates: &[usize],
        target: Option<usize>,
    ) -> Result<RenderedPrompt> {
        if candidates.len() > self.limits.max_candidates {
            return Err(Error::invalid(format!(
                "{} candidates exceed the limit of {}",
                candidates.len(),
                self.limits.max_candidates
            )));
        }
        let lettered = assign_index_letters(candidates)?;
        let label = match target {
            None => None,
            Some(t) => Some(
                lettered
                    .iter()
                    .find(|(_, i)| *i == t)
                    .map(|(l, _)| *l)
                    .ok_or_else(|| Error::invalid(format!("target {t} is not a candidate")))?,
            ),
        };
        let hist: Vec<String> = truncate_history(history, self.limits.max_history)
            .iter()
            .map(|&i| self.title(i))
            .collect::<Result<_>>()?;
        let cands: Vec<(char, String)> = lettered
            .iter()
            .map(|&(l, i)| Ok((l, self.title(i)?)))
            .collect::<Result<_>>()?;
        let hist_refs: Vec<&str> = hist.iter().map(String::as_str).collect();
        let cand_refs: Vec<(char, &str)> = cands.iter().map(|(l, t)| (*l, t.as_str())).collect();
        render_prompt(&self.template, &self.tokenizer, &hist_refs, &cand_refs, label)
    }
}
