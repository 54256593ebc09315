use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use race::pipeline::{self, GenerateArgs, PipelineConfig, Workdir};
use race::{corpus, synth, Error, Result};

/// Retrieval-augmented commit message generation.
#[derive(Parser)]
#[command(name = "race", version)]
struct Cli {
    /// TOML config file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Work directory for all intermediate files.
    #[arg(long, global = true, env = "RACE_WORKDIR")]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set gen_epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, split and render the corpus into per-split files.
    Preprocess {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Build the vocabulary from the training split.
    Vocab,
    /// Train the stage-I encoder-decoder used for retrieval.
    TrainRetriever,
    /// Encode a preprocessed file into a retrieval index.
    Index {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve exemplars for every record of a preprocessed file.
    Retrieve {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split name inside the work directory, used for default paths.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Never return the probe's own id.
        #[arg(long)]
        exclude_self: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the stage-II generator on exemplars of the training split.
    TrainGenerator {
        #[command(flatten)]
        gen: GenFlags,
        #[arg(long)]
        exemplars: Option<PathBuf>,
    },
    /// Generate messages for a split and score them.
    Generate {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        exemplars: Option<PathBuf>,
        /// Also run the NNGen and TF-IDF baselines.
        #[arg(long)]
        baselines: bool,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Score a hypothesis file against a preprocessed split.
    Eval {
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from the corpus file.
    Pipeline {
        #[command(flatten)]
        gen: GenFlags,
        #[arg(long)]
        baselines: bool,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        /// Commit count for `toy`, cluster count for `exemplar`.
        #[arg(long)]
        n: Option<usize>,
        /// For `exemplar`: also write the fixed train/test split into the
        /// work directory.
        #[arg(long)]
        prepare: bool,
    },
}

#[derive(Args)]
struct GenFlags {
    /// Concatenate exemplar encodings without the guider gate.
    #[arg(long)]
    no_guider: bool,
    /// Train without exemplars.
    #[arg(long)]
    no_retrieval: bool,
    /// Exemplars per item.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Toy,
    Exemplar,
}

impl Cli {
    fn config(&self) -> Result<PipelineConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p, &overrides)?,
            None => PipelineConfig::from_toml("", &overrides)?,
        };
        if let Some(w) = &self.workdir {
            cfg.workdir = w.clone();
        }
        Ok(cfg)
    }
}

impl GenFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if self.no_guider {
            cfg.guider = false;
        }
        if self.no_retrieval {
            cfg.no_retrieval = true;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.config()?;
    let wd = Workdir::new(&cfg.workdir);
    match cli.command {
        Command::Preprocess { corpus } => {
            if let Some(c) = corpus {
                cfg.corpus = c;
            }
            pipeline::cmd_preprocess(&cfg)?;
        }
        Command::Vocab => {
            pipeline::cmd_vocab(&cfg)?;
        }
        Command::TrainRetriever => {
            pipeline::cmd_train_retriever(&cfg)?;
        }
        Command::Index { checkpoint, input, out } => {
            pipeline::cmd_index(
                &checkpoint.unwrap_or_else(|| wd.retriever()),
                &wd.vocab(),
                &input.unwrap_or_else(|| wd.split("train")),
                &out.unwrap_or_else(|| wd.index()),
            )?;
        }
        Command::Retrieve {
            index,
            checkpoint,
            split,
            input,
            k,
            exclude_self,
            out,
        } => {
            pipeline::cmd_retrieve(
                &index.unwrap_or_else(|| wd.index()),
                &checkpoint.unwrap_or_else(|| wd.retriever()),
                &wd.vocab(),
                &input.unwrap_or_else(|| wd.split(&split)),
                k.unwrap_or(cfg.k),
                exclude_self,
                &out.unwrap_or_else(|| wd.exemplars(&split)),
            )?;
        }
        Command::TrainGenerator { gen, exemplars } => {
            gen.apply(&mut cfg);
            cfg.validate()?;
            pipeline::cmd_train_generator(&cfg, &exemplars.unwrap_or_else(|| wd.exemplars("train")))?;
        }
        Command::Generate {
            split,
            checkpoint,
            exemplars,
            baselines,
            strategy,
            beam_width,
        } => {
            match strategy {
                Some(StrategyArg::Greedy) => cfg.strategy = "greedy".into(),
                Some(StrategyArg::Beam) => cfg.strategy = "beam".into(),
                None => {}
            }
            if let Some(w) = beam_width {
                cfg.beam_width = w;
            }
            let mut args = GenerateArgs::in_workdir(&wd, &split, baselines || cfg.baselines);
            if let Some(c) = checkpoint {
                args.checkpoint = c;
            }
            if let Some(e) = exemplars {
                args.exemplars = e;
            }
            pipeline::cmd_generate(&args, cfg.strategy()?, cfg.max_gen_len, cfg.nngen_k)?;
        }
        Command::Eval { hyps, refs, out } => {
            let r = pipeline::cmd_eval(&hyps, &refs, &out)?;
            pipeline::log_event("eval", json!({ "bleu": r.bleu.corpus, "rouge_l": r.rouge_l.corpus }));
        }
        Command::Pipeline { gen, baselines } => {
            gen.apply(&mut cfg);
            cfg.baselines |= baselines;
            cfg.validate()?;
            pipeline::cmd_pipeline(&cfg)?;
        }
        Command::Synth { kind, out, n, prepare } => match kind {
            SynthKind::Toy => corpus::write_corpus(&out, &synth::toy_corpus(n.unwrap_or(32), cfg.seed))?,
            SynthKind::Exemplar => {
                let clusters = n.unwrap_or(1000);
                let split = synth::exemplar_corpus(clusters, 2, clusters / 5, cfg.seed);
                let all: Vec<_> = split.train.iter().chain(&split.test).cloned().collect();
                corpus::write_corpus(&out, &all)?;
                if prepare {
                    pipeline::write_prepared(&split, &wd)?;
                }
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            pipeline::log_event("error", json!({ "message": e.to_string() }));
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
