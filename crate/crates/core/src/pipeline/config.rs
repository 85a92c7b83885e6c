use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::ingest::SyntheticConfig;
use crate::lm::{LmConfig, RankerTrainConfig};
use crate::prompt::{PromptLimits, PromptTemplate, Tokenizer};
use crate::retriever::TrainConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "SEQRANK_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `user,item,rating,timestamp` records; `titles` is a movie table.
    Movielens,
    /// Review lines; `titles` is the product metadata file.
    Amazon,
    /// A corpus file in this crate's own text format.
    Corpus,
    /// Generated from `[data.synthetic]`; needs no files.
    #[default]
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    pub path: Option<PathBuf>,
    pub titles: Option<PathBuf>,
    pub kcore: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::default(),
            path: None,
            titles: None,
            kcore: 5,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl DataConfig {
    fn validate(&self) -> Result<()> {
        let need = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("data.{what} is required for {:?} data", self.format))),
                Some(p) if !p.exists() => Err(Error::Config(format!("data.{what} {} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match self.format {
            DataFormat::Movielens | DataFormat::Corpus => need(&self.path, "path")?,
            DataFormat::Amazon => {
                need(&self.path, "path")?;
                need(&self.titles, "titles")?;
            }
            DataFormat::Synthetic => self.synthetic.validate()?,
        }
        if let (DataFormat::Movielens, Some(t)) = (self.format, &self.titles) {
            if !t.exists() {
                return Err(Error::Config(format!("data.titles {} does not exist", t.display())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Lru,
    Popularity,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub kind: RetrieverKind,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub limits: PromptLimits,
    /// Replaces the built-in instruction template.
    pub template: Option<String>,
}

impl PromptSection {
    pub fn template(&self) -> Result<PromptTemplate> {
        match &self.template {
            Some(t) => PromptTemplate::parse(t),
            None => Ok(PromptTemplate::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerSection {
    pub train: RankerTrainConfig,
    pub model: LmConfig,
    /// Users scored at each validation; 0 means all of the valid subset.
    pub validation_users: usize,
    /// Put the target into training pools that miss it instead of
    /// skipping those users.
    pub inject_ground_truth: bool,
}

impl Default for RankerSection {
    fn default() -> Self {
        RankerSection {
            train: RankerTrainConfig::default(),
            model: LmConfig::default(),
            validation_users: 0,
            inject_ground_truth: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Local {},
    Remote {
        url: String,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Local {}
    }
}

fn default_timeout_s() -> f64 {
    30.0
}

impl BackendConfig {
    pub fn timeout(&self) -> Option<Duration> {
        match self {
            BackendConfig::Local {} => None,
            BackendConfig::Remote { timeout_s, .. } => Some(Duration::from_secs_f64(*timeout_s)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub exclude_history: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub timing: BenchConfig,
    pub model: LmConfig,
    /// Time the trained ranker when `ranker.ckpt` exists.
    pub use_ranker_checkpoint: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            timing: BenchConfig::default(),
            model: LmConfig {
                layers: 1,
                dim: 32,
                heads: 2,
                ff_dim: 64,
                dropout: 0.0,
                ..LmConfig::default()
            },
            use_ranker_checkpoint: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub weight_decay: Vec<f64>,
    pub dropout: Vec<f64>,
    /// Combinations trained concurrently.
    pub parallel: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            weight_decay: vec![0.0, 1e-2],
            dropout: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            parallel: 1,
        }
    }
}

/// Everything a pipeline run depends on. The global `seed` replaces the
/// seeds of every section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Workers for per-user retrieval and ranking.
    pub threads: usize,
    pub data: DataConfig,
    pub retriever: RetrieverSection,
    pub prompt: PromptSection,
    pub ranker: RankerSection,
    pub backend: BackendConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub grid: GridSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            threads: 1,
            data: DataConfig::default(),
            retriever: RetrieverSection::default(),
            prompt: PromptSection::default(),
            ranker: RankerSection::default(),
            backend: BackendConfig::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            grid: GridSection::default(),
        }
    }
}

/// Sets `dotted.key = raw` in a TOML table. `raw` is read as a TOML value
/// and falls back to a plain string.
fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, then applies the output-directory environment
    /// variable and `key=value` overrides, in that order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                table.insert("output_dir".into(), toml::Value::String(dir));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, k.trim(), v.trim())?;
        }
        let mut config: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.propagate_seed();
        config.validate()?;
        Ok(config)
    }

    /// Loads `path`, or the defaults when `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.data.synthetic.seed = s;
        self.retriever.train.seed = s;
        self.ranker.train.seed = s;
        self.ranker.model.seed = s;
        self.bench.timing.seed = s;
        self.bench.model.seed = s;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.data.kcore == 0 || self.threads == 0 {
            return Err(Error::Config("data.kcore and threads must be positive".into()));
        }
        self.retriever.train.validate().map_err(|e| Error::Config(format!("retriever: {e}")))?;
        self.prompt.limits.validate()?;
        self.prompt.template()?;
        self.ranker.train.validate()?;
        self.ranker.model.validate()?;
        let vocab = Tokenizer::default().vocab_size();
        for (name, m) in [("ranker", &self.ranker.model), ("bench", &self.bench.model)] {
            if m.vocab_size != vocab {
                return Err(Error::Config(format!("{name}.model.vocab_size must be {vocab}")));
            }
        }
        self.bench.timing.validate()?;
        self.bench.model.validate()?;
        if let BackendConfig::Remote { url, timeout_s } = &self.backend {
            if url.is_empty() || !(*timeout_s > 0.0) {
                return Err(Error::Config("remote backend needs a url and a positive timeout".into()));
            }
        }
        let g = &self.grid;
        if g.weight_decay.is_empty() || g.dropout.is_empty() || g.parallel == 0 {
            return Err(Error::Config("grid needs values on both axes and parallel >= 1".into()));
        }
        if g.weight_decay.iter().any(|&w| w < 0.0) || g.dropout.iter().any(|d| !(0.0..1.0).contains(d)) {
            return Err(Error::Config("grid values out of range".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
