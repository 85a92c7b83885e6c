//! Leave-one-out ranking metrics.

use std::fmt::{self, Write as _};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{SplitCorpus, UserSplit};
use crate::ranker::{composed_rank, RankedList};
use crate::retriever::{CandidateSet, ItemScorer};

pub const KS: [usize; 2] = [5, 10];

/// 1-based rank of `y` under descending score, lower index first on ties.
pub fn rank_of_ground_truth(scores: &[f64], y: usize) -> Result<usize> {
    let sy = *scores.get(y).ok_or(Error::UnknownItem {
        index: y,
        catalog_size: scores.len(),
    })?;
    let mut above = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > sy || (s == sy && i < y) {
            above += 1;
        }
    }
    Ok(above + 1)
}

/// 1-based position of `y` in an explicit ordering.
pub fn rank_in_ordering(order: &[usize], y: usize) -> Result<usize> {
    order
        .iter()
        .position(|&i| i == y)
        .map(|p| p + 1)
        .ok_or(Error::UnknownItem {
            index: y,
            catalog_size: order.len(),
        })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mrr: f64,
    pub ndcg: f64,
    pub recall: f64,
}

/// Metrics for a single user with one relevant item at rank `r`.
pub fn user_metrics(r: usize, k: usize) -> Metrics {
    if r == 0 || r > k {
        return Metrics {
            mrr: 0.0,
            ndcg: 0.0,
            recall: 0.0,
        };
    }
    Metrics {
        mrr: 1.0 / r as f64,
        ndcg: 1.0 / ((r + 1) as f64).log2(),
        recall: 1.0,
    }
}

/// Means of [`user_metrics`] over `ranks`.
pub fn metrics_at_k(ranks: &[usize], k: usize) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::invalid("no ranks to average"));
    }
    if k == 0 || ranks.contains(&0) {
        return Err(Error::invalid("ranks and k must be at least 1"));
    }
    let mut sum = Metrics {
        mrr: 0.0,
        ndcg: 0.0,
        recall: 0.0,
    };
    for &r in ranks {
        let m = user_metrics(r, k);
        sum.mrr += m.mrr;
        sum.ndcg += m.ndcg;
        sum.recall += m.recall;
    }
    let n = ranks.len() as f64;
    Ok(Metrics {
        mrr: sum.mrr / n,
        ndcg: sum.ndcg / n,
        recall: sum.recall / n,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalRecord {
    pub user_id: String,
    pub target: usize,
    pub rank: usize,
    pub in_valid_subset: bool,
}

/// Records whose target was among the user's candidates. Candidate sets
/// are matched by user id.
pub fn valid_subset_filter(records: &[EvalRecord], candidates: &[CandidateSet]) -> Vec<EvalRecord> {
    let by_user: std::collections::HashMap<&str, &CandidateSet> =
        candidates.iter().map(|c| (c.user_id.as_str(), c)).collect();
    records
        .iter()
        .filter(|r| {
            by_user
                .get(r.user_id.as_str())
                .is_some_and(|c| c.contains(r.target))
        })
        .cloned()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    All,
    ValidSubset,
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Population::All => "all",
            Population::ValidSubset => "valid_subset",
        })
    }
}

impl std::str::FromStr for Population {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Population::All),
            "valid_subset" => Ok(Population::ValidSubset),
            _ => Err(Error::invalid(format!("unknown population {s:?}"))),
        }
    }
}

/// Mean metrics at each k in [`KS`]. An empty population reports zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub population: Population,
    pub users: usize,
    pub at: Vec<(usize, Metrics)>,
}

impl MetricReport {
    pub fn from_ranks(population: Population, ranks: &[usize]) -> Result<Self> {
        let at = KS
            .iter()
            .map(|&k| {
                let m = if ranks.is_empty() {
                    user_metrics(0, k)
                } else {
                    metrics_at_k(ranks, k)?
                };
                Ok((k, m))
            })
            .collect::<Result<_>>()?;
        Ok(MetricReport {
            population,
            users: ranks.len(),
            at,
        })
    }

    pub fn from_records(population: Population, records: &[EvalRecord]) -> Result<Self> {
        let ranks: Vec<usize> = records
            .iter()
            .filter(|r| population == Population::All || r.in_valid_subset)
            .map(|r| r.rank)
            .collect();
        Self::from_ranks(population, &ranks)
    }

    pub fn get(&self, k: usize) -> Option<Metrics> {
        self.at.iter().find(|(kk, _)| *kk == k).map(|(_, m)| *m)
    }
}

/// One CSV row: `metric,k,population,value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub k: usize,
    pub population: String,
    pub value: f64,
}

/// Flattens named reports into rows. Population sizes appear as
/// `<name>.users` with `k = 0`.
pub fn report_rows(reports: &[(&str, &MetricReport)]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (name, rep) in reports {
        let population = rep.population.to_string();
        rows.push(ReportRow {
            metric: format!("{name}.users"),
            k: 0,
            population: population.clone(),
            value: rep.users as f64,
        });
        for (k, m) in &rep.at {
            for (metric, v) in [("MRR", m.mrr), ("NDCG", m.ndcg), ("Recall", m.recall)] {
                rows.push(ReportRow {
                    metric: format!("{name}.{metric}"),
                    k: *k,
                    population: population.clone(),
                    value: v,
                });
            }
        }
    }
    rows
}

pub fn write_report_csv<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(i + 2, e.to_string())))
        .collect()
}

/// Aligned text table, one line per (pipeline, population).
pub fn format_table(reports: &[(&str, &MetricReport)]) -> String {
    let mut out = format!("{:<12} {:<13} {:>6}", "pipeline", "population", "users");
    for k in KS {
        for m in ["MRR", "NDCG", "Recall"] {
            let _ = write!(out, " {:>9}", format!("{m}@{k}"));
        }
    }
    out.push('\n');
    for (name, rep) in reports {
        let _ = write!(out, "{:<12} {:<13} {:>6}", name, rep.population, rep.users);
        for (_, m) in &rep.at {
            for v in [m.mrr, m.ndcg, m.recall] {
                let _ = write!(out, " {:>9.4}", v);
            }
        }
        out.push('\n');
    }
    out
}

/// Which held-out item is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Valid,
    #[default]
    Test,
}

impl Stage {
    /// `(input history, target)` of a user for this stage.
    pub fn example(self, u: &UserSplit) -> (Vec<usize>, usize) {
        match self {
            Stage::Valid => (u.valid_input().to_vec(), u.valid_target),
            Stage::Test => (u.test_input(), u.test_target),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub stage: Stage,
    /// Drop history items (other than the target) from the ranking.
    pub exclude_history: bool,
}

/// Per-user records of both pipelines over the same users.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineEval {
    pub retriever: Vec<EvalRecord>,
    pub two_stage: Vec<EvalRecord>,
}

impl PipelineEval {
    pub fn reports(&self, population: Population) -> Result<(MetricReport, MetricReport)> {
        Ok((
            MetricReport::from_records(population, &self.retriever)?,
            MetricReport::from_records(population, &self.two_stage)?,
        ))
    }
}

/// Ranks every user's target under the retriever alone and under the
/// composed two-stage order. `candidates` and `ranked` are matched to users
/// by id; without `ranked` the two-stage order equals the retriever's.
pub fn evaluate_pipeline<S: ItemScorer + ?Sized>(
    split: &SplitCorpus,
    retriever: &S,
    candidates: &[CandidateSet],
    ranked: Option<&[RankedList]>,
    opts: EvalOptions,
) -> Result<PipelineEval> {
    let n = split.num_items();
    if retriever.num_items() != n {
        return Err(Error::invalid(format!(
            "retriever covers {} items, catalog has {n}",
            retriever.num_items()
        )));
    }
    let cand_by_user: std::collections::HashMap<&str, &CandidateSet> =
        candidates.iter().map(|c| (c.user_id.as_str(), c)).collect();
    let ranked_by_user: std::collections::HashMap<&str, &RankedList> = ranked
        .unwrap_or(&[])
        .iter()
        .map(|r| (r.user_id.as_str(), r))
        .collect();
    let mut out = PipelineEval {
        retriever: Vec::with_capacity(split.users.len()),
        two_stage: Vec::with_capacity(split.users.len()),
    };
    for u in &split.users {
        let (history, y) = opts.stage.example(u);
        let cand = cand_by_user.get(u.user_id.as_str()).ok_or_else(|| {
            Error::invalid(format!("no candidate set for user {:?}", u.user_id))
        })?;
        if let Some(&bad) = cand.items.iter().find(|&&i| i >= n) {
            return Err(Error::UnknownItem {
                index: bad,
                catalog_size: n,
            });
        }
        let mut scores = retriever.score_items(&history)?;
        if opts.exclude_history {
            for &i in &history {
                if i != y {
                    scores[i] = f64::NEG_INFINITY;
                }
            }
        }
        let in_subset = cand.contains(y);
        let r_rank = rank_of_ground_truth(&scores, y)?;
        let t_rank = match (ranked, ranked_by_user.get(u.user_id.as_str())) {
            (None, _) => r_rank,
            (Some(_), Some(list)) => composed_rank(&list.items, &scores, y)?,
            (Some(_), None) => {
                return Err(Error::invalid(format!("no ranked list for user {:?}", u.user_id)))
            }
        };
        let record = |rank| EvalRecord {
            user_id: u.user_id.clone(),
            target: y,
            rank,
            in_valid_subset: in_subset,
        };
        out.retriever.push(record(r_rank));
        out.two_stage.push(record(t_rank));
    }
    Ok(out)
}
