use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kgi::pipeline::{write_synthetic, Pipeline, PipelineConfig, RetrieverMode, Stage, CONFIG_FILE};
use kgi::synthetic::SyntheticConfig;
use kgi::{Error, Result};
use log::error;

/// Zero-shot slot filling: retrieval-augmented generation over a passage corpus.
#[derive(Parser)]
#[command(name = "kgi", version)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults to `<work-dir>/kgi.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that relative artifact paths resolve against.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    max_passage_tokens: Option<usize>,
    #[arg(long, global = true)]
    bm25_k1: Option<f64>,
    #[arg(long, global = true)]
    bm25_b: Option<f64>,
    #[arg(long, global = true)]
    hnsw_m: Option<usize>,
    #[arg(long, global = true)]
    ef_construction: Option<usize>,
    #[arg(long, global = true)]
    ef_search: Option<usize>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    max_len: Option<usize>,
    #[arg(long, global = true)]
    n_retrieve: Option<usize>,
    /// `dense` or `bm25`.
    #[arg(long, global = true)]
    retriever: Option<String>,
    #[arg(long, global = true)]
    max_train_instances: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated corpus, train/dev queries and a matching kgi.toml.
    Synth {
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 2000)]
        distractors: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    Segment,
    IndexBm25,
    Mine,
    TrainDpr,
    Encode,
    BuildAnn,
    TrainRag,
    Predict,
    /// Score predictions and print the report table.
    Evaluate,
    /// Run every stage in order.
    Run,
    /// Fill an infobox for one entity.
    Infobox {
        #[arg(long)]
        entity: String,
        #[arg(long = "relation", required = true)]
        relations: Vec<String>,
        #[arg(long)]
        json: bool,
    },
}

impl Overrides {
    fn apply(&self, c: &mut PipelineConfig) -> Result<()> {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.corpus.max_passage_tokens, self.max_passage_tokens);
        set(&mut c.ann.m, self.hnsw_m);
        set(&mut c.ann.ef_construction, self.ef_construction);
        set(&mut c.ann.ef_search, self.ef_search);
        set(&mut c.decode.beam, self.beam);
        set(&mut c.decode.max_len, self.max_len);
        set(&mut c.decode.n_retrieve, self.n_retrieve);
        if let Some(v) = self.bm25_k1 {
            c.bm25.k1 = v;
        }
        if let Some(v) = self.bm25_b {
            c.bm25.b = v;
        }
        if let Some(r) = &self.retriever {
            c.decode.retriever = r.parse::<RetrieverMode>()?;
        }
        if self.max_train_instances.is_some() {
            c.rag.max_train_instances = self.max_train_instances;
        }
        c.validate()
    }
}

fn resolve(cli: &Cli) -> Result<(PipelineConfig, PathBuf)> {
    let work_dir = cli
        .work_dir
        .clone()
        .or_else(|| cli.config.as_deref().and_then(Path::parent).map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    let config_path = cli.config.clone().unwrap_or_else(|| work_dir.join(CONFIG_FILE));
    let mut config = if config_path.exists() {
        PipelineConfig::load(&config_path)?
    } else if cli.config.is_some() {
        return Err(Error::Config(format!("config file {} not found", config_path.display())));
    } else {
        PipelineConfig::default()
    };
    cli.overrides.apply(&mut config)?;
    Ok((config, work_dir))
}

fn stage_of(command: &Command) -> Option<Stage> {
    Some(match command {
        Command::Segment => Stage::Segment,
        Command::IndexBm25 => Stage::IndexBm25,
        Command::Mine => Stage::Mine,
        Command::TrainDpr => Stage::TrainDpr,
        Command::Encode => Stage::Encode,
        Command::BuildAnn => Stage::BuildAnn,
        Command::TrainRag => Stage::TrainRag,
        Command::Predict => Stage::Predict,
        Command::Evaluate => Stage::Evaluate,
        _ => return None,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth {
        entities,
        distractors,
        seed,
    } = cli.command
    {
        let dir = cli.work_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        let mut config = PipelineConfig::synthetic();
        cli.overrides.apply(&mut config)?;
        let synth = SyntheticConfig {
            entities,
            distractors,
            seed,
            ..SyntheticConfig::default()
        };
        let s = write_synthetic(&dir, &synth, &config)?;
        println!(
            "wrote {} documents, {} train and {} dev queries to {}",
            s.documents,
            s.train,
            s.dev,
            dir.display()
        );
        return Ok(());
    }

    let (config, dir) = resolve(&cli)?;
    let pipeline = Pipeline::new(config, dir)?;
    match &cli.command {
        Command::Run => {
            for out in pipeline.run_all()? {
                println!("[{}] {}", out.stage, out.summary.trim_end());
            }
        }
        Command::Infobox {
            entity,
            relations,
            json,
        } => {
            let infobox = pipeline.predictor()?.fill_infobox(entity, relations)?;
            if *json {
                println!("{}", infobox.to_json());
            } else {
                print!("{}", infobox.to_text());
            }
        }
        command => {
            let stage = stage_of(command).expect("remaining commands are stages");
            let out = pipeline.run_stage(stage)?;
            println!("{}", out.summary.trim_end());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
