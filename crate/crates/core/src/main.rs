use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqrank::bench::Method;
use seqrank::pipeline::{Pipeline, PipelineConfig};
use seqrank::Error;

#[derive(Parser)]
#[command(name = "seqrank", version, about = "Two-stage sequential recommendation pipeline")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set retriever.train.dropout=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (beats the config file and SEQRANK_OUTPUT_DIR).
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,

    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter and split the dataset.
    Ingest,
    /// Train the retriever.
    TrainRetriever,
    /// Cache the retriever's top candidates for every user.
    Retrieve,
    /// Fine-tune the ranking language model.
    TrainRanker,
    /// Rerank cached candidates.
    Rank,
    /// Write test metrics to report.csv.
    Eval,
    /// Time verbalizer ranking against greedy generation.
    Bench,
    /// Retriever grid over weight decay and dropout.
    GridSearch,
    /// All stages from ingest to eval.
    Run,
    /// Check artifacts against the manifest.
    Verify,
    /// Print the effective configuration.
    Config,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingPrerequisite { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> seqrank::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(d) = &cli.output_dir {
        overrides.push(format!("output_dir={}", toml::Value::String(d.display().to_string())));
    }
    let config = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    if let Command::Config = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let p = Pipeline::new(config)?;
    match cli.command {
        Command::Ingest => {
            let s = p.ingest()?;
            println!(
                "users {} items {} interactions {} mean length {:.2} density {:.5}",
                s.user_count, s.item_count, s.interaction_count, s.mean_length, s.density
            );
        }
        Command::TrainRetriever => {
            if let Some(log) = p.train_retriever()? {
                println!(
                    "best validation Recall@10 {:.4} at iteration {}",
                    log.best_recall, log.best_iteration
                );
            }
        }
        Command::Retrieve => {
            let sets = p.retrieve()?;
            println!("{} candidate sets", sets.len());
        }
        Command::TrainRanker => {
            let log = p.train_ranker()?;
            match log.best_score {
                Some(s) => println!("best validation NDCG@10 {s:.4} at iteration {}", log.best_iteration),
                None => println!("{} iterations, no validation users", log.iterations),
            }
        }
        Command::Rank => {
            let lists = p.rank()?;
            println!("{} ranked lists", lists.len());
        }
        Command::Eval | Command::Run => {
            let out = if let Command::Run = cli.command { p.run_all()? } else { p.eval()? };
            print!("{}", out.table);
        }
        Command::Bench => {
            let r = p.bench()?;
            for row in &r.rows {
                println!("{:<11} len {:>3} mean {:.4}s", row.method, row.title_len, row.mean_s);
            }
            for m in [Method::Verbalizer, Method::Generation] {
                if let Some(s) = r.spread(m) {
                    println!("{m} spread (longest/shortest): {s:.2}x");
                }
            }
        }
        Command::GridSearch => {
            for r in p.grid_search()? {
                println!(
                    "wd {:<6} dropout {:<4} Recall@10 {:.4} (iteration {})",
                    r.weight_decay, r.dropout, r.best_recall_at_10, r.best_iteration
                );
            }
        }
        Command::Verify => {
            let bad = p.verify()?;
            for m in &bad {
                match &m.actual {
                    Some(_) => eprintln!("{} changed since `{}`", m.file, m.stage),
                    None => eprintln!("{} missing (produced by `{}`)", m.file, m.stage),
                }
            }
            if !bad.is_empty() {
                return Err(Error::Checkpoint(format!("{} artifacts fail verification", bad.len())));
            }
            println!("all artifacts match the manifest");
        }
        Command::Config => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
