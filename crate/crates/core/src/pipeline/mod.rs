//! Stage orchestration. Every stage reads and writes files in one output
//! directory and appends a line to its manifest.

mod config;
mod manifest;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    BackendConfig, BenchSection, DataConfig, DataFormat, EvalSection, GridSection, PipelineConfig,
    PromptSection, RankerSection, RetrieverKind, RetrieverSection, OUTPUT_DIR_ENV,
};
pub use manifest::{
    append_entry, hash_files, latest_outputs, read_entries, sha256_file, verify_dir, FileHash,
    ManifestEntry, Mismatch,
};

use crate::bench::{bench_generation, bench_verbalizer, BenchReport};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_pipeline, format_table, report_rows, user_metrics, write_report_csv, EvalOptions,
    Population, ReportRow, Stage,
};
use crate::ingest::{
    chronological_split, drop_untitled, kcore_filter, parse_amazon_reviews, parse_movielens,
    parse_movielens_titles, read_corpus, read_split, stats, synthetic_corpus, write_catalog,
    write_split, Corpus, DatasetStats, SplitCorpus, UserSplit,
};
use crate::lm::{train_ranker_lm, RankerTrainLog, RemoteClient, TinyCausalLM};
use crate::prompt::{PromptBuilder, RenderedPrompt};
use crate::ranker::{
    inject_ground_truth, rank_with, read_ranked, write_ranked, LetterScorer, LocalScorer, RankedList,
};
use crate::retriever::{
    read_candidates, recall_at_k_on_valid, retrieve_topk, train_retriever, write_candidates,
    CandidateSet, ItemScorer, PopularityRetriever, RetrieveOptions, RetrieverModel, TrainConfig,
    TrainLog,
};

pub const CATALOG: &str = "catalog.tsv";
pub const SPLITS: &str = "splits.txt";
pub const RETRIEVER_CKPT: &str = "retriever.ckpt";
pub const RETRIEVER_LOG: &str = "retriever.log.json";
pub const CANDIDATES: &str = "candidates.top20";
pub const RANKER_CKPT: &str = "ranker.ckpt";
pub const RANKER_LOG: &str = "ranker.log.json";
pub const RANKING: &str = "ranking.out";
pub const REPORT: &str = "report.csv";
pub const BENCH: &str = "bench.csv";
pub const BENCH_PLOT: &str = "bench.dat";
pub const LEADERBOARD: &str = "grid.csv";
pub const MANIFEST: &str = "manifest.json-lines";

/// Stage one model as stored in `retriever.ckpt`.
#[derive(Clone, Debug)]
pub enum Retriever {
    Lru(RetrieverModel),
    Popularity(PopularityRetriever),
}

impl Retriever {
    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Retriever::Lru(m) => m.to_checkpoint(),
            Retriever::Popularity(p) => p.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind == "popularity" {
            Ok(Retriever::Popularity(PopularityRetriever::from_checkpoint(ck)?))
        } else {
            Ok(Retriever::Lru(RetrieverModel::from_checkpoint(ck)?))
        }
    }
}

impl ItemScorer for Retriever {
    fn num_items(&self) -> usize {
        match self {
            Retriever::Lru(m) => m.num_items(),
            Retriever::Popularity(p) => p.num_items(),
        }
    }

    fn score_items(&self, history: &[usize]) -> Result<Vec<f64>> {
        match self {
            Retriever::Lru(m) => m.score_items(history),
            Retriever::Popularity(p) => p.score_items(history),
        }
    }
}

/// Applies `f` to every element on up to `threads` workers, keeping order.
pub fn par_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let size = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<U>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(size)
            .map(|chunk| {
                let f = &f;
                s.spawn(move || chunk.iter().map(f).collect::<Result<Vec<U>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Which labelled example of a user the ranker sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExampleStage {
    /// Last training item as target, the rest of training as history.
    Train,
    Valid,
    Test,
}

impl ExampleStage {
    pub fn example(self, u: &UserSplit) -> Option<(Vec<usize>, usize)> {
        match self {
            ExampleStage::Train if u.train.len() >= 2 => {
                Some((u.train[..u.train.len() - 1].to_vec(), u.train[u.train.len() - 1]))
            }
            ExampleStage::Train => None,
            ExampleStage::Valid => Some(Stage::Valid.example(u)),
            ExampleStage::Test => Some(Stage::Test.example(u)),
        }
    }
}

/// A labelled ranker prompt with its pool.
#[derive(Clone, Debug)]
pub struct RankerExample {
    pub user_id: String,
    pub target: usize,
    pub pool: CandidateSet,
    pub prompt: RenderedPrompt,
}

/// Builds one labelled prompt per user from the retriever's top-`k` pool.
/// Users whose target misses the pool get it injected into a seeded random
/// slot when `inject` is given, and are skipped otherwise.
pub fn ranker_examples<S: ItemScorer + Sync + ?Sized>(
    split: &SplitCorpus,
    retriever: &S,
    builder: &PromptBuilder,
    stage: ExampleStage,
    k: usize,
    opts: RetrieveOptions,
    mut inject: Option<&mut ChaCha8Rng>,
    threads: usize,
) -> Result<Vec<RankerExample>> {
    let users: Vec<(&UserSplit, Vec<usize>, usize)> = split
        .users
        .iter()
        .filter_map(|u| stage.example(u).map(|(h, y)| (u, h, y)))
        .collect();
    let pools = par_map(&users, threads, |(u, h, _)| retrieve_topk(retriever, &u.user_id, h, k, opts))?;
    let mut jobs = Vec::new();
    for ((u, history, target), mut pool) in users.into_iter().zip(pools) {
        if !pool.contains(target) {
            let Some(rng) = inject.as_deref_mut() else { continue };
            let items = inject_ground_truth(&pool.items, target, rng);
            pool.scores = items
                .iter()
                .zip(&pool.items)
                .zip(&pool.scores)
                .map(|((new, old), s)| if new == old { *s } else { f64::NAN })
                .collect();
            pool.items = items;
        }
        jobs.push((u.user_id.clone(), history, target, pool));
    }
    par_map(&jobs, threads, |(user, history, target, pool)| {
        Ok(RankerExample {
            user_id: user.clone(),
            target: *target,
            prompt: builder.build(history, &pool.items, Some(*target))?,
            pool: pool.clone(),
        })
    })
}

/// Mean NDCG@10 of the target within each example's reranked pool.
pub fn pool_ndcg<S: LetterScorer + Sync + ?Sized>(scorer: &S, examples: &[RankerExample], threads: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let ranks = par_map(examples, threads, |e| {
        let r = rank_with(scorer, &e.prompt, &e.pool)?;
        Ok(r.items.iter().position(|&i| i == e.target).map_or(0, |p| p + 1))
    })?;
    Ok(ranks.iter().map(|&r| user_metrics(r, 10).ndcg).sum::<f64>() / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub weight_decay: f64,
    pub dropout: f64,
    pub best_recall_at_10: f64,
    pub best_iteration: usize,
}

/// Outputs of `eval`.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub rows: Vec<ReportRow>,
    pub table: String,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let out = config.output_dir.clone();
        fs::create_dir_all(&out)?;
        Ok(Pipeline { config, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingPrerequisite {
                path: p,
                producer: producer.to_string(),
            })
        }
    }

    /// Writes through a temporary file so a failed stage leaves no partial
    /// artifact behind.
    fn write_artifact(&self, name: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
        let tmp = self.path(&format!("{name}.tmp"));
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            f(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, self.path(name))?;
        Ok(())
    }

    /// Warns about inputs changed since the stage that produced them.
    fn check_inputs(&self, inputs: &[&str]) -> Result<()> {
        let latest = latest_outputs(&read_entries(&self.path(MANIFEST))?);
        for name in inputs {
            if let Some((hash, stage)) = latest.get(*name) {
                if sha256_file(&self.path(name))? != *hash {
                    log::warn!("{name} differs from the copy recorded by `{stage}`");
                }
            }
        }
        Ok(())
    }

    fn record(&self, stage: &str, inputs: &[&str], outputs: &[&str]) -> Result<()> {
        let entry = ManifestEntry {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.seed,
            inputs: hash_files(&self.out, inputs)?,
            outputs: hash_files(&self.out, outputs)?,
            config: serde_json::to_value(&self.config)?,
        };
        append_entry(&self.path(MANIFEST), &entry)
    }

    fn open(&self, name: &str, producer: &str) -> Result<BufReader<fs::File>> {
        Ok(BufReader::new(fs::File::open(self.require(name, producer)?)?))
    }

    pub fn load_raw_corpus(&self) -> Result<Corpus> {
        let d = &self.config.data;
        let open = |p: &Option<PathBuf>| -> Result<BufReader<fs::File>> {
            let p = p.as_ref().ok_or_else(|| Error::Config("dataset path not set".into()))?;
            Ok(BufReader::new(fs::File::open(p)?))
        };
        Ok(match d.format {
            DataFormat::Movielens => {
                let mut c = parse_movielens(open(&d.path)?)?;
                if d.titles.is_some() {
                    c.attach_titles(&parse_movielens_titles(open(&d.titles)?)?);
                }
                c
            }
            DataFormat::Amazon => parse_amazon_reviews(open(&d.path)?, open(&d.titles)?)?,
            DataFormat::Corpus => read_corpus(open(&d.path)?)?,
            DataFormat::Synthetic => synthetic_corpus(&d.synthetic)?,
        })
    }

    /// Parses the dataset, drops untitled items, applies k-core filtering
    /// and writes the catalog and the split corpus.
    pub fn ingest(&self) -> Result<DatasetStats> {
        let raw = self.load_raw_corpus()?;
        let corpus = kcore_filter(&drop_untitled(&raw), self.config.data.kcore);
        let st = stats(&corpus);
        log::info!(
            "ingest: {} users, {} items, {} interactions",
            st.user_count,
            st.item_count,
            st.interaction_count
        );
        let split = chronological_split(&corpus);
        self.write_artifact(CATALOG, |w| write_catalog(w, &split.corpus.catalog))?;
        self.write_artifact(SPLITS, |w| write_split(w, &split))?;
        self.record("ingest", &[], &[CATALOG, SPLITS])?;
        Ok(st)
    }

    pub fn load_split(&self) -> Result<SplitCorpus> {
        self.check_inputs(&[SPLITS])?;
        read_split(self.open(SPLITS, "ingest")?)
    }

    pub fn load_retriever(&self) -> Result<Retriever> {
        self.check_inputs(&[RETRIEVER_CKPT])?;
        Retriever::from_checkpoint(Checkpoint::read(self.open(RETRIEVER_CKPT, "train-retriever")?)?)
    }

    pub fn load_candidates(&self) -> Result<Vec<CandidateSet>> {
        self.check_inputs(&[CANDIDATES])?;
        read_candidates(self.open(CANDIDATES, "retrieve")?)
    }

    pub fn load_ranker(&self) -> Result<TinyCausalLM> {
        self.check_inputs(&[RANKER_CKPT])?;
        TinyCausalLM::from_checkpoint(Checkpoint::read(self.open(RANKER_CKPT, "train-ranker")?)?)
    }

    fn save_retriever(&self, r: &Retriever) -> Result<()> {
        self.write_artifact(RETRIEVER_CKPT, |w| r.to_checkpoint().write(w))
    }

    pub fn train_retriever(&self) -> Result<Option<TrainLog>> {
        let split = self.load_split()?;
        let (retriever, log) = match self.config.retriever.kind {
            RetrieverKind::Popularity => (Retriever::Popularity(PopularityRetriever::fit(&split)), None),
            RetrieverKind::Lru => {
                let (m, log) = train_retriever(&split, &self.config.retriever.train)?;
                log::info!(
                    "retriever: best validation Recall@10 {:.4} at iteration {}",
                    log.best_recall,
                    log.best_iteration
                );
                (Retriever::Lru(m), Some(log))
            }
        };
        self.save_retriever(&retriever)?;
        let mut outputs = vec![RETRIEVER_CKPT];
        if let Some(l) = &log {
            self.write_artifact(RETRIEVER_LOG, |w| Ok(serde_json::to_writer_pretty(w, l)?))?;
            outputs.push(RETRIEVER_LOG);
        }
        self.record("train-retriever", &[SPLITS], &outputs)?;
        Ok(log)
    }

    fn retrieve_options(&self) -> RetrieveOptions {
        RetrieveOptions {
            exclude_history: self.config.eval.exclude_history,
        }
    }

    /// Top candidates of every user's test history.
    pub fn retrieve(&self) -> Result<Vec<CandidateSet>> {
        let split = self.load_split()?;
        let retriever = self.load_retriever()?;
        let k = self.config.prompt.limits.max_candidates;
        let opts = self.retrieve_options();
        let sets = par_map(&split.users, self.config.threads, |u| {
            retrieve_topk(&retriever, &u.user_id, &u.test_input(), k, opts)
        })?;
        self.write_artifact(CANDIDATES, |w| write_candidates(w, &sets))?;
        self.record("retrieve", &[SPLITS, RETRIEVER_CKPT], &[CANDIDATES])?;
        Ok(sets)
    }

    fn builder<'a>(&self, split: &'a SplitCorpus) -> Result<PromptBuilder<'a>> {
        let mut b = PromptBuilder::new(&split.corpus.catalog);
        b.template = self.config.prompt.template()?;
        b.limits = self.config.prompt.limits;
        Ok(b)
    }

    pub fn train_ranker(&self) -> Result<RankerTrainLog> {
        if !matches!(self.config.backend, BackendConfig::Local {}) {
            return Err(Error::Config("train-ranker needs the local backend".into()));
        }
        let split = self.load_split()?;
        let retriever = self.load_retriever()?;
        let builder = self.builder(&split)?;
        let rc = &self.config.ranker;
        let k = self.config.prompt.limits.max_candidates;
        let opts = self.retrieve_options();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x1a7e_c7ed);
        let train = ranker_examples(
            &split,
            &retriever,
            &builder,
            ExampleStage::Train,
            k,
            opts,
            rc.inject_ground_truth.then_some(&mut rng),
            self.config.threads,
        )?;
        let mut valid = ranker_examples(&split, &retriever, &builder, ExampleStage::Valid, k, opts, None, self.config.threads)?;
        if rc.validation_users > 0 {
            valid.truncate(rc.validation_users);
        }
        log::info!("ranker: {} training prompts, {} validation prompts", train.len(), valid.len());
        let prompts: Vec<RenderedPrompt> = train.into_iter().map(|e| e.prompt).collect();
        let threads = self.config.threads;
        let mut validate = |m: &TinyCausalLM| pool_ndcg(&LocalScorer::new(m), &valid, threads);
        let model = TinyCausalLM::new(rc.model.clone())?;
        let has_valid = !valid.is_empty();
        let (model, log) = train_ranker_lm(
            model,
            &prompts,
            &rc.train,
            if has_valid { Some(&mut validate) } else { None },
        )?;
        self.write_artifact(RANKER_CKPT, |w| model.to_checkpoint().write(w))?;
        let summary = serde_json::json!({
            "losses": log.losses,
            "validations": log.validations,
            "best_score": log.best_score,
            "best_iteration": log.best_iteration,
            "iterations": log.iterations,
        });
        self.write_artifact(RANKER_LOG, |w| Ok(serde_json::to_writer_pretty(w, &summary)?))?;
        self.record("train-ranker", &[SPLITS, RETRIEVER_CKPT], &[RANKER_CKPT, RANKER_LOG])?;
        Ok(log)
    }

    /// Reranks every cached candidate set with the configured backend.
    pub fn rank(&self) -> Result<Vec<RankedList>> {
        let split = self.load_split()?;
        let candidates = self.load_candidates()?;
        let builder = self.builder(&split)?;
        let by_user: std::collections::HashMap<&str, &UserSplit> =
            split.users.iter().map(|u| (u.user_id.as_str(), u)).collect();
        let go = |scorer: &(dyn LetterScorer + Sync)| {
            par_map(&candidates, self.config.threads, |c| {
                let u = by_user
                    .get(c.user_id.as_str())
                    .ok_or_else(|| Error::invalid(format!("candidates for unknown user {:?}", c.user_id)))?;
                let prompt = builder.build(&u.test_input(), &c.items, None)?;
                let r = rank_with(scorer, &prompt, c)?;
                Ok(RankedList::from((c.user_id.as_str(), &r)))
            })
        };
        let (lists, inputs) = match &self.config.backend {
            BackendConfig::Local {} => {
                let model = self.load_ranker()?;
                (go(&LocalScorer::new(&model))?, vec![SPLITS, CANDIDATES, RANKER_CKPT])
            }
            BackendConfig::Remote { url, .. } => {
                let client = RemoteClient::new(url, self.config.backend.timeout().unwrap_or_default());
                (go(&client)?, vec![SPLITS, CANDIDATES])
            }
        };
        self.write_artifact(RANKING, |w| write_ranked(w, &lists))?;
        self.record("rank", &inputs, &[RANKING])?;
        Ok(lists)
    }

    /// Test metrics of the retriever alone and of the two-stage pipeline,
    /// over all users and over the valid retrieval subset.
    pub fn eval(&self) -> Result<EvalOutcome> {
        let split = self.load_split()?;
        let retriever = self.load_retriever()?;
        let candidates = self.load_candidates()?;
        let mut inputs = vec![SPLITS, RETRIEVER_CKPT, CANDIDATES];
        let ranked = if self.path(RANKING).exists() {
            self.check_inputs(&[RANKING])?;
            inputs.push(RANKING);
            Some(read_ranked(BufReader::new(fs::File::open(self.path(RANKING))?))?)
        } else {
            log::warn!("no {RANKING}; two-stage metrics equal the retriever's (run `rank` first)");
            None
        };
        let opts = EvalOptions {
            stage: Stage::Test,
            exclude_history: self.config.eval.exclude_history,
        };
        let ev = evaluate_pipeline(&split, &retriever, &candidates, ranked.as_deref(), opts)?;
        let (r_all, t_all) = ev.reports(Population::All)?;
        let (r_sub, t_sub) = ev.reports(Population::ValidSubset)?;
        let named = [
            ("retriever", &r_all),
            ("two_stage", &t_all),
            ("retriever", &r_sub),
            ("two_stage", &t_sub),
        ];
        let rows = report_rows(&named);
        self.write_artifact(REPORT, |w| write_report_csv(w, &rows))?;
        self.record("eval", &inputs, &[REPORT])?;
        Ok(EvalOutcome {
            rows,
            table: format_table(&named),
        })
    }

    pub fn bench(&self) -> Result<BenchReport> {
        let b = &self.config.bench;
        let mut inputs = Vec::new();
        let model = if b.use_ranker_checkpoint && self.path(RANKER_CKPT).exists() {
            inputs.push(RANKER_CKPT);
            self.load_ranker()?
        } else {
            TinyCausalLM::new(b.model.clone())?
        };
        let v = bench_verbalizer(&model, &b.timing)?;
        let g = bench_generation(&model, &b.timing)?;
        let report = BenchReport::from_timings(&v, &g);
        self.write_artifact(BENCH, |w| report.write_csv(w))?;
        self.write_artifact(BENCH_PLOT, |w| report.write_plot_data(w))?;
        self.record("bench", &inputs, &[BENCH, BENCH_PLOT])?;
        Ok(report)
    }

    /// Trains the retriever on every configured (weight decay, dropout)
    /// pair, keeps the best by validation Recall@10 as `retriever.ckpt` and
    /// writes the leaderboard.
    pub fn grid_search(&self) -> Result<Vec<LeaderboardRow>> {
        if self.config.retriever.kind != RetrieverKind::Lru {
            return Err(Error::Config("grid search applies to the lru retriever only".into()));
        }
        let split = self.load_split()?;
        let g = &self.config.grid;
        let combos: Vec<TrainConfig> = g
            .weight_decay
            .iter()
            .flat_map(|&wd| {
                g.dropout.iter().map(move |&dropout| TrainConfig {
                    weight_decay: wd,
                    dropout,
                    ..self.config.retriever.train.clone()
                })
            })
            .collect();
        let results = par_map(&combos, g.parallel, |c| train_retriever(&split, c))?;
        let rows: Vec<LeaderboardRow> = combos
            .iter()
            .zip(&results)
            .map(|(c, (_, log))| LeaderboardRow {
                weight_decay: c.weight_decay,
                dropout: c.dropout,
                best_recall_at_10: log.best_recall,
                best_iteration: log.best_iteration,
            })
            .collect();
        let mut best = 0;
        for (i, r) in rows.iter().enumerate() {
            if r.best_recall_at_10 > rows[best].best_recall_at_10 {
                best = i;
            }
        }
        let model = results.into_iter().nth(best).expect("non-empty grid").0;
        self.save_retriever(&Retriever::Lru(model))?;
        self.write_artifact(LEADERBOARD, |w| {
            let mut wtr = csv::Writer::from_writer(w);
            for r in &rows {
                wtr.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
            }
            wtr.flush()?;
            Ok(())
        })?;
        self.record("grid-search", &[SPLITS], &[RETRIEVER_CKPT, LEADERBOARD])?;
        Ok(rows)
    }

    /// Recomputes validation Recall@10 of the stored retriever.
    pub fn retriever_valid_recall(&self) -> Result<f64> {
        match self.load_retriever()? {
            Retriever::Lru(m) => recall_at_k_on_valid(&m, &self.load_split()?, 10),
            Retriever::Popularity(_) => Err(Error::invalid("validation recall is tracked for lru only")),
        }
    }

    /// ingest, train-retriever, retrieve, train-ranker (local backend),
    /// rank and eval.
    pub fn run_all(&self) -> Result<EvalOutcome> {
        self.ingest()?;
        self.train_retriever()?;
        self.retrieve()?;
        if matches!(self.config.backend, BackendConfig::Local {}) {
            self.train_ranker()?;
        }
        self.rank()?;
        self.eval()
    }

    pub fn verify(&self) -> Result<Vec<Mismatch>> {
        verify_dir(&self.out, &self.path(MANIFEST))
    }
}

/// Reads a leaderboard written by [`Pipeline::grid_search`].
pub fn read_leaderboard(path: &Path) -> Result<Vec<LeaderboardRow>> {
    csv::Reader::from_path(path)
        .map_err(|e| Error::invalid(e.to_string()))?
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::parse(i + 2, e.to_string())))
        .collect()
}
