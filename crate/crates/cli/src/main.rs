//! `mism`: generate data, train, evaluate and run the ablation experiments.
//!
//! Reports go to standard output (JSON, or CSV for `grid`); progress goes
//! to standard error. Exit codes: 0 ok, 2 usage or config, 3 I/O or bad
//! data, 4 non-finite numbers in strict mode.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mism::aggregate::{FeatureConfig, ImageGroup};
use mism::data::{
    apply_group_filters, dataset_stats, generate_synthetic_dataset, load_jsonl, make_single_image_dataset, save_jsonl,
    split_of, ConceptSpace, DatasetRecord, Split,
};
use mism::metrics::MetricReport;
use mism::model::Model;
use mism::tokenize::Vocab;
use mism::train::{
    decode_groups, ordering_ablation, pretrain_then_finetune, run_ablation_grid, train_loop, Permutation, VOCAB_FILE,
};
use serde::Serialize;

use config::RunConfig;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<mism::Error> for Failure {
    fn from(e: mism::Error) -> Self {
        use mism::Error::*;
        let code = match e {
            Config(_) | Contract(_) | Dimension { .. } => 2,
            Data(_) | Io { .. } => 3,
            NonFinite(_) => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "mism", version, about = "Multi-image summarization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration (sections: model, train, pretrain, filter, data).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the checkpoint or in
    /// its parent directory.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// JSONL file of image groups.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Beam width.
    #[arg(long, default_value_t = 4)]
    beam: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, filter it and write train/valid/test
    /// JSONL plus stats.json.
    Datagen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Write the corpus before filtering.
        #[arg(long)]
        no_filter: bool,
    },
    /// Train one model; prints the checkpoint log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding train.jsonl and valid.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, vocabulary and log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on single-image pairs, then finetune on groups.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding train.jsonl and valid.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Run directory; phases go to pretrain/ and finetune/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode groups and score them against their captions.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Also report BLEU-4 with add-one smoothing.
        #[arg(long)]
        smoothed_bleu: bool,
    },
    /// Print one decoded caption per group.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score groups in their original and in permuted image order.
    AblateOrder {
        #[command(flatten)]
        model: ModelArgs,
        /// Number of leading groups to use.
        #[arg(long, default_value_t = 200)]
        subset: usize,
        /// Shuffle seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep the original order (control run).
        #[arg(long)]
        identity: bool,
    },
    /// Train and test every legal feature configuration; prints CSV.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding train.jsonl, valid.jsonl and test.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for per-row runs, grid.csv and grid.json.
        #[arg(long)]
        out: PathBuf,
        /// Train rows concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Score candidate captions against references, one caption per line.
    Score {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Also report BLEU-4 with add-one smoothing.
        #[arg(long)]
        smoothed_bleu: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn init_threads() -> Outcome {
    let Ok(raw) = std::env::var("MISM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("MISM_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(e.to_string()))
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Datagen { config, out, no_filter } => datagen(&load_config(&config)?, &out, no_filter),
        Command::Train { config, data, out } => train(&load_config(&config)?, &data, &out),
        Command::Pretrain { config, data, out } => pretrain(&load_config(&config)?, &data, &out),
        Command::Eval { model, smoothed_bleu } => eval(&model, smoothed_bleu),
        Command::Infer { model } => infer(&model),
        Command::AblateOrder {
            model,
            subset,
            seed,
            identity,
        } => ablate_order(&model, subset, seed, identity),
        Command::Grid {
            config,
            data,
            out,
            parallel,
        } => grid(&load_config(&config)?, &data, &out, parallel),
        Command::Score {
            candidates,
            references,
            smoothed_bleu,
        } => score(&candidates, &references, smoothed_bleu),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    RunConfig::load(args.config.as_deref(), &args.overrides)
}

fn print_json<T: Serialize>(value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::io(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Outcome {
    std::fs::create_dir_all(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn datagen(cfg: &RunConfig, out: &Path, no_filter: bool) -> Outcome {
    let space = ConceptSpace::standard(cfg.data.k, cfg.data.noise, cfg.data.seed)?;
    let mut records = generate_synthetic_dataset(&space, &cfg.data)?;
    let generated = records.len();
    if !no_filter {
        records = apply_group_filters(records, &cfg.filter);
    }
    eprintln!("generated {generated} groups, kept {}", records.len());
    create_dir(out)?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        let part: Vec<DatasetRecord> = records.iter().filter(|r| r.split == split).cloned().collect();
        save_jsonl(&part, &out.join(format!("{}.jsonl", split.as_str())))?;
    }
    let stats = dataset_stats(&records)?;
    let text = serde_json::to_string_pretty(&stats).map_err(|e| Failure::io(e.to_string()))?;
    write_file(&out.join("stats.json"), &format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<DatasetRecord>, Failure> {
    let path = dir.join(format!("{}.jsonl", split.as_str()));
    if !path.exists() {
        return Err(Failure::io(format!("{}: no such file", path.display())));
    }
    Ok(load_jsonl(&path)?)
}

fn check_k(cfg: &RunConfig, groups: &[ImageGroup]) -> Outcome {
    match groups.iter().find(|g| g.k() != cfg.model.k) {
        Some(g) => Err(Failure::config(format!(
            "group {} has K = {} but model.k = {}",
            g.group_id,
            g.k(),
            cfg.model.k
        ))),
        None => Ok(()),
    }
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Outcome {
    let train = split_of(&load_split(data, Split::Train)?, Split::Train);
    let valid = split_of(&load_split(data, Split::Valid)?, Split::Valid);
    check_k(cfg, &train)?;
    eprintln!("training {} on {} groups", cfg.model.feature_config, train.len());
    let outcome = train_loop(&cfg.model, &train, &valid, &cfg.train, out)?;
    print_json(&outcome.log)
}

fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Outcome {
    let train_recs = load_split(data, Split::Train)?;
    let valid_recs = load_split(data, Split::Valid)?;
    let (train, valid) = (split_of(&train_recs, Split::Train), split_of(&valid_recs, Split::Valid));
    check_k(cfg, &train)?;
    let single_train = split_of(&make_single_image_dataset(&train_recs), Split::Train);
    let single_valid = split_of(&make_single_image_dataset(&valid_recs), Split::Valid);
    eprintln!(
        "pretraining on {} single-image pairs, finetuning on {} groups",
        single_train.len(),
        train.len()
    );
    let outcome = pretrain_then_finetune(
        &cfg.model,
        &single_train,
        &single_valid,
        &train,
        &valid,
        cfg.pretrain_config(),
        &cfg.train,
        out,
    )?;
    #[derive(Serialize)]
    struct Report<'a> {
        pretrain: &'a mism::train::CheckpointLog,
        finetune: &'a mism::train::CheckpointLog,
        reinitialized: &'a [String],
    }
    print_json(&Report {
        pretrain: &outcome.pretrain,
        finetune: &outcome.finetune,
        reinitialized: &outcome.skipped,
    })
}

fn find_vocab(args: &ModelArgs) -> Result<PathBuf, Failure> {
    if let Some(v) = &args.vocab {
        return Ok(v.clone());
    }
    let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
    [dir.join(VOCAB_FILE), dir.join("..").join(VOCAB_FILE)]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| Failure::io(format!("no {VOCAB_FILE} found near {}", args.checkpoint.display())))
}

fn load_model(args: &ModelArgs) -> Result<(Model, Vocab, Vec<ImageGroup>), Failure> {
    if !args.checkpoint.exists() {
        return Err(Failure::io(format!(
            "{}: no such checkpoint",
            args.checkpoint.display()
        )));
    }
    let model = Model::load(&args.checkpoint)?;
    let vocab = Vocab::load(&find_vocab(args)?)?;
    if model.config.vocab_size != vocab.len() {
        return Err(Failure::config(format!(
            "checkpoint expects {} tokens but the vocabulary has {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    if args.beam == 0 {
        return Err(Failure::config("--beam must be at least 1"));
    }
    let groups: Vec<ImageGroup> = load_jsonl(&args.input)?.into_iter().map(|r| r.group).collect();
    if let Some(g) = groups.iter().find(|g| g.k() != model.config.k) {
        return Err(Failure::config(format!(
            "group {} has K = {} but the model expects {}",
            g.group_id,
            g.k(),
            model.config.k
        )));
    }
    Ok((model, vocab, groups))
}

fn eval(args: &ModelArgs, smoothed_bleu: bool) -> Outcome {
    let (model, vocab, groups) = load_model(args)?;
    let captions = decode_groups(&model, &vocab, &groups, args.beam)?;
    let refs: Vec<&str> = groups.iter().map(|g| g.caption.as_str()).collect();
    print_json(&MetricReport::compute(&captions, &refs, smoothed_bleu)?)
}

fn infer(args: &ModelArgs) -> Outcome {
    let (model, vocab, groups) = load_model(args)?;
    for caption in decode_groups(&model, &vocab, &groups, args.beam)? {
        println!("{caption}");
    }
    Ok(())
}

fn ablate_order(args: &ModelArgs, subset: usize, seed: u64, identity: bool) -> Outcome {
    let (model, vocab, groups) = load_model(args)?;
    let permutation = if identity {
        Permutation::Identity
    } else {
        Permutation::Shuffle
    };
    let report = ordering_ablation(&model, &vocab, &groups, subset, seed, permutation, args.beam)?;
    if report.clipped {
        eprintln!("subset {subset} exceeds the {} available groups", groups.len());
    }
    print_json(&report)
}

fn grid(cfg: &RunConfig, data: &Path, out: &Path, parallel: bool) -> Outcome {
    let train = split_of(&load_split(data, Split::Train)?, Split::Train);
    let valid = split_of(&load_split(data, Split::Valid)?, Split::Valid);
    let test = split_of(&load_split(data, Split::Test)?, Split::Test);
    check_k(cfg, &train)?;
    let report = run_ablation_grid(
        &cfg.model,
        &FeatureConfig::all_valid(),
        &train,
        &valid,
        &test,
        &cfg.train,
        out,
        parallel,
    )?;
    let csv = report.to_csv();
    write_file(&out.join("grid.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::io(e.to_string()))?;
    write_file(&out.join("grid.json"), &format!("{json}\n"))?;
    print!("{csv}");
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn score(candidates: &Path, references: &Path, smoothed_bleu: bool) -> Outcome {
    let cands = read_lines(candidates)?;
    let refs = read_lines(references)?;
    print_json(&MetricReport::compute(&cands, &refs, smoothed_bleu)?)
}
