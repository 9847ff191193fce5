use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use m3link::config::M3Config;
use m3link::corpus::{read_corpus, write_corpus, AnnotatedText};
use m3link::global::{train_global, GlobalModel};
use m3link::kb::{AliasIndex, KnowledgeBase};
use m3link::local::{train_local, LocalModel};
use m3link::pipeline::{
    evaluate_where, generate_synthetic_world, link_corpus, read_decisions, write_decisions, SynthSpec,
};
use m3link::{Error, Result};

#[derive(Parser)]
#[command(name = "m3link", version, about = "Multi-turn multiple-choice entity linking for short texts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct KbArgs {
    /// Knowledge base, one JSON entity per line.
    #[arg(long)]
    kb: PathBuf,
    /// Prebuilt alias index; built from the KB when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the alias index of a knowledge base.
    BuildIndex {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the local model.
    TrainLocal {
        #[command(flatten)]
        kb: KbArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch training log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the global model on top of a trained local model.
    TrainGlobal {
        #[command(flatten)]
        kb: KbArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        local: PathBuf,
        /// Defaults to the configuration stored in the local checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Link every mention of a corpus.
    Link {
        #[command(flatten)]
        kb: KbArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        local: PathBuf,
        /// Without a global model only local decisions are made.
        #[arg(long)]
        global: Option<PathBuf>,
        /// Defaults to the configuration stored in the last checkpoint given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score decisions against a gold corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        decisions: PathBuf,
        /// Only count mentions carrying this tag.
        #[arg(long)]
        tag: Option<String>,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic KB with training and test corpora.
    GenSynth {
        /// JSON generator spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Receives kb.jsonl, train.jsonl and test.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?))
}

fn load_kb(args: &KbArgs) -> Result<(KnowledgeBase, AliasIndex)> {
    let kb = KnowledgeBase::read_jsonl(open(&args.kb)?)?;
    let index = match &args.index {
        Some(p) => AliasIndex::read_jsonl(open(p)?)?,
        None => AliasIndex::build(&kb),
    };
    Ok((kb, index))
}

fn load_corpus(path: &Path) -> Result<Vec<AnnotatedText>> {
    read_corpus(open(path)?)
}

fn load_config(path: &Path) -> Result<M3Config> {
    let cfg = M3Config::from_json(&fs::read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn log_writer(path: Option<&PathBuf>) -> Result<Option<BufWriter<File>>> {
    path.map(|p| create(p)).transpose()
}

fn log_line<T: serde::Serialize>(w: &mut Option<BufWriter<File>>, record: &T) {
    if let Some(w) = w {
        if serde_json::to_writer(&mut *w, record).is_ok() {
            let _ = w.write_all(b"\n");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildIndex { kb, out } => {
            let kb = KnowledgeBase::read_jsonl(open(&kb)?)?;
            let mut w = create(&out)?;
            AliasIndex::build(&kb).write_jsonl(&mut w)?;
            w.flush()?;
        }
        Command::TrainLocal {
            kb,
            corpus,
            config,
            out,
            log,
        } => {
            let (kb, index) = load_kb(&kb)?;
            let corpus = load_corpus(&corpus)?;
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => M3Config::default(),
            };
            let mut logw = log_writer(log.as_ref())?;
            let (model, _) = train_local(&corpus, &kb, &index, &cfg, |l| log_line(&mut logw, l))?;
            if let Some(w) = logw.as_mut() {
                w.flush()?;
            }
            model.save(&out, &cfg)?;
        }
        Command::TrainGlobal {
            kb,
            corpus,
            local,
            config,
            out,
            log,
        } => {
            let (kb, index) = load_kb(&kb)?;
            let corpus = load_corpus(&corpus)?;
            let (local, local_cfg) = LocalModel::load(&local)?;
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => local_cfg,
            };
            let mut logw = log_writer(log.as_ref())?;
            let (model, _) = train_global(&corpus, &kb, &index, &local, &cfg, |l| log_line(&mut logw, l))?;
            if let Some(w) = logw.as_mut() {
                w.flush()?;
            }
            model.save(&out, &cfg)?;
        }
        Command::Link {
            kb,
            corpus,
            local,
            global,
            config,
            out,
        } => {
            let (kb, index) = load_kb(&kb)?;
            let corpus = load_corpus(&corpus)?;
            let (local, mut cfg) = LocalModel::load(&local)?;
            let global = match global {
                Some(p) => {
                    let (g, gcfg) = GlobalModel::load(&p)?;
                    if g.vocab != local.vocab {
                        return Err(Error::ModelMismatch(
                            "local and global checkpoints use different vocabularies".into(),
                        ));
                    }
                    cfg = gcfg;
                    Some(g)
                }
                None => None,
            };
            if let Some(p) = config {
                cfg = load_config(&p)?;
            }
            let decisions = link_corpus(&corpus, &kb, &index, &local, global.as_ref(), &cfg)?;
            let mut w = create(&out)?;
            write_decisions(&mut w, &decisions)?;
            w.flush()?;
        }
        Command::Eval {
            corpus,
            decisions,
            tag,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let decisions = read_decisions(open(&decisions)?)?;
            let report = evaluate_where(&corpus, &decisions, |m| {
                tag.as_deref().is_none_or(|t| m.tag.as_deref() == Some(t))
            })?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => fs::write(p, json + "\n")?,
                None => println!("{json}"),
            }
        }
        Command::GenSynth { spec, seed, out_dir } => {
            let mut spec: SynthSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                    .map_err(|e| Error::InvalidConfig(format!("synthetic spec: {e}")))?,
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let world = generate_synthetic_world(&spec)?;
            fs::create_dir_all(&out_dir)?;
            let mut w = create(&out_dir.join("kb.jsonl"))?;
            world.kb.write_jsonl(&mut w)?;
            w.flush()?;
            for (name, texts) in [("train.jsonl", &world.train), ("test.jsonl", &world.test)] {
                let mut w = create(&out_dir.join(name))?;
                write_corpus(&mut w, texts)?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("m3link: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
