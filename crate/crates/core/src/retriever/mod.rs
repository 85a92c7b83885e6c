//! Stage one: sequential retrieval over item ids.

mod gradcheck;
mod model;
mod train;

use std::io::{BufRead, Write};

pub use gradcheck::gradient_check;
pub use model::{LayerParams, RetrieverConfig, RetrieverModel, RetrieverParams};
pub use train::{
    recall_at_k_on_valid, train_retriever, training_windows, TrainConfig, TrainLog,
};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ingest::SplitCorpus;
use crate::tensor::Mat;

/// Anything that scores every catalog item given an interaction history.
pub trait ItemScorer {
    fn num_items(&self) -> usize;
    fn score_items(&self, history: &[usize]) -> Result<Vec<f64>>;
}

impl ItemScorer for RetrieverModel {
    fn num_items(&self) -> usize {
        self.config.num_items
    }

    fn score_items(&self, history: &[usize]) -> Result<Vec<f64>> {
        self.score_sequence(history)
    }
}

/// Ordered top-k candidates for one user, the hand-off to the ranking stage.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub user_id: String,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.items.contains(&item)
    }
}

/// Descending score, ascending index on ties.
pub fn score_order(scores: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Full ordering of all items by [`score_order`].
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| score_order(scores, a, b));
    idx
}

/// Top-`k` items of a score vector. Items in `exclude` are skipped.
pub fn topk_from_scores(
    user_id: &str,
    scores: &[f64],
    k: usize,
    exclude: Option<&[usize]>,
) -> Result<CandidateSet> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if let Some(ex) = exclude {
        let mut banned = vec![false; scores.len()];
        for &i in ex {
            if i < banned.len() {
                banned[i] = true;
            }
        }
        idx.retain(|&i| !banned[i]);
    }
    if k == 0 || k > idx.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={} (eligible items)",
            idx.len()
        )));
    }
    let cmp = |a: &usize, b: &usize| score_order(scores, *a, *b);
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(CandidateSet {
        user_id: user_id.to_string(),
        scores: idx.iter().map(|&i| scores[i]).collect(),
        items: idx,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RetrieveOptions {
    /// Skip items already in the history. Off by default: evaluation ranks
    /// against the whole catalog.
    pub exclude_history: bool,
}

pub fn retrieve_topk<S: ItemScorer + ?Sized>(
    scorer: &S,
    user_id: &str,
    history: &[usize],
    k: usize,
    opts: RetrieveOptions,
) -> Result<CandidateSet> {
    if k > scorer.num_items() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds catalog size {}",
            scorer.num_items()
        )));
    }
    let scores = scorer.score_items(history)?;
    topk_from_scores(
        user_id,
        &scores,
        k,
        opts.exclude_history.then_some(history),
    )
}

/// Ranks items by global training-set frequency.
#[derive(Clone, Debug)]
pub struct PopularityRetriever {
    counts: Vec<f64>,
}

impl PopularityRetriever {
    pub fn fit(split: &SplitCorpus) -> Self {
        let mut counts = vec![0.0; split.num_items()];
        for u in &split.users {
            for &i in &u.train {
                counts[i] += 1.0;
            }
        }
        PopularityRetriever { counts }
    }

    pub fn from_counts(counts: Vec<f64>) -> Self {
        PopularityRetriever { counts }
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "popularity".into(),
            meta: serde_json::json!({ "num_items": self.counts.len() }),
            tensors: vec![("counts".into(), Mat::from_vec(1, self.counts.len(), self.counts.clone()))],
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        ck.expect_kind("popularity")?;
        let n = ck.meta["num_items"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("popularity checkpoint lacks num_items".into()))?;
        Ok(PopularityRetriever {
            counts: ck.take("counts", 1, n as usize)?.data,
        })
    }
}

impl ItemScorer for PopularityRetriever {
    fn num_items(&self) -> usize {
        self.counts.len()
    }

    fn score_items(&self, _history: &[usize]) -> Result<Vec<f64>> {
        Ok(self.counts.clone())
    }
}

pub fn popularity_topk(
    split: &SplitCorpus,
    user_id: &str,
    history: &[usize],
    k: usize,
) -> Result<CandidateSet> {
    retrieve_topk(
        &PopularityRetriever::fit(split),
        user_id,
        history,
        k,
        RetrieveOptions::default(),
    )
}

/// Writes one line per user: `user_id<TAB>item:score item:score ...`.
pub fn write_candidates<W: Write>(mut w: W, sets: &[CandidateSet]) -> Result<()> {
    for set in sets {
        let pairs: Vec<String> = set
            .items
            .iter()
            .zip(&set.scores)
            .map(|(i, s)| format!("{i}:{s}"))
            .collect();
        writeln!(w, "{}\t{}", set.user_id, pairs.join(" "))?;
    }
    Ok(())
}

pub fn read_candidates<R: BufRead>(r: R) -> Result<Vec<CandidateSet>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (user, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(n + 1, "candidate line needs a user id"))?;
        let mut set = CandidateSet {
            user_id: user.to_string(),
            items: Vec::new(),
            scores: Vec::new(),
        };
        for pair in rest.split_whitespace() {
            let (i, s) = pair
                .split_once(':')
                .ok_or_else(|| Error::parse(n + 1, format!("bad pair {pair:?}")))?;
            set.items.push(
                i.parse()
                    .map_err(|_| Error::parse(n + 1, format!("bad item {i:?}")))?,
            );
            set.scores.push(
                s.parse()
                    .map_err(|_| Error::parse(n + 1, format!("bad score {s:?}")))?,
            );
        }
        out.push(set);
    }
    Ok(out)
}
