//! `guidemt` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    detokenize, generate_synthetic_corpus, load_dataset, split_words, CorpusSpec, DatasetKind,
    FeatureDims, MultimodalExample,
};
use crate::error::{Error, Result};
use crate::eval::{
    attention_scores_for, contrastive_evaluate, corpus_bleu, BleuSmoothing, ContrastiveReport,
    ModelScorer,
};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, InputAblation};
use crate::pipeline::{
    checkpoint_ablation, checkpoint_vocab, load_corpus_dir, make_checkpoint, train_from_seed,
    CorpusDir, ExperimentConfig,
};
use crate::training::{dev_bleu, MetricRecord, Preset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INVALID: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;

/// Environment variable read for the log filter (e.g. `info`, `debug`).
pub const LOG_ENV: &str = "GUIDEMT_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "guidemt",
    version,
    about = "Multimodal translation with guided cross-modal attention",
    arg_required_else_help = true,
    after_help = "Set GUIDEMT_LOG=info (or debug) for progress logs on stderr.\n\
                  Exit codes: 0 ok, 2 usage, 3 I/O, 4 invalid input or config, 5 diverged."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: vocab, parallel, monolingual, dev and
    /// contrastive sets plus the answer key.
    GenData(GenDataArgs),
    /// Train a model on a corpus directory and write checkpoints and metrics.
    Train(TrainArgs),
    /// Greedy-translate every example of a dataset file.
    Translate(TranslateArgs),
    /// Rank the two translations of every contrastive item under each image.
    EvalContrastive(EvalContrastiveArgs),
    /// Corpus BLEU of a checkpoint on a dataset, or of two text files.
    EvalBleu(EvalBleuArgs),
    /// Normalized attention scores of one example.
    InspectAttention(InspectAttentionArgs),
    /// Train the default run and one or more ablation presets and compare them.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Corpus spec TOML; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the generator.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory as written by gen-data.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Experiment TOML with [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization and training; overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation preset applied on top of the config.
    #[arg(long, default_value = "default", value_parser = preset_names())]
    pub preset: String,
    /// Output directory for checkpoint.bin, last.bin, metrics.jsonl and summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Parallel or monolingual JSONL file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Kind of the dataset file.
    #[arg(long, default_value = "parallel", value_parser = ["parallel", "monolingual"])]
    pub kind: String,
    /// Maximum number of generated tokens.
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    /// Output file, one `id<TAB>translation` line per example; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalContrastiveArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Contrastive JSONL file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Score with every cross-modal link removed and no visual inputs.
    #[arg(long)]
    pub text_only: bool,
    /// Report file (one record per item and a summary record); stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalBleuArgs {
    /// Checkpoint to translate with (needs --dataset).
    #[arg(long, requires = "dataset", conflicts_with_all = ["hypotheses", "references"])]
    pub checkpoint: Option<PathBuf>,
    /// Parallel JSONL file whose targets are the references.
    #[arg(long, requires = "checkpoint")]
    pub dataset: Option<PathBuf>,
    /// Hypotheses, one sentence per line (needs --references).
    #[arg(long, requires = "references")]
    pub hypotheses: Option<PathBuf>,
    /// References, one sentence per line (needs --hypotheses).
    #[arg(long, requires = "hypotheses")]
    pub references: Option<PathBuf>,
    /// Zero n-gram matches: none gives 0, add-one smooths orders 2 to 4.
    #[arg(long, default_value = "none", value_parser = ["none", "add-one"])]
    pub smoothing: String,
    /// Maximum number of generated tokens when translating.
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct InspectAttentionArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Parallel or monolingual JSONL file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Kind of the dataset file.
    #[arg(long, default_value = "parallel", value_parser = ["parallel", "monolingual"])]
    pub kind: String,
    /// Zero-based index of the example in the file.
    #[arg(long, default_value_t = 0, conflicts_with = "example")]
    pub index: usize,
    /// Example id, instead of --index.
    #[arg(long)]
    pub example: Option<String>,
    /// Encoder layer; all layers are averaged if omitted.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Output JSON file; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Corpus directory as written by gen-data.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Experiment TOML with [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialization and training; overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Preset to compare against the default run; repeat for several, all if omitted.
    #[arg(long, value_parser = preset_names())]
    pub preset: Vec<String>,
    /// Directory for one checkpoint per run and table.tsv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn preset_names() -> clap::builder::PossibleValuesParser {
    Preset::ALL.map(Preset::name).into()
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::EvalContrastive(a) => eval_contrastive(a),
        Command::EvalBleu(a) => eval_bleu(a),
        Command::InspectAttention(a) => inspect_attention(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, contents),
        None => std::io::stdout()
            .write_all(contents.as_bytes())
            .map_err(|e| Error::io("writing stdout", e)),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            toml::from_str::<CorpusSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => CorpusSpec::default(),
    };
    let corpus = generate_synthetic_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    create_dir(&a.out)?;
    corpus.write(&a.out)?;
    println!(
        "wrote {}: {} words, {} parallel, {} monolingual, {} dev, {} contrastive items",
        a.out.display(),
        corpus.vocab.len(),
        corpus.parallel.len(),
        corpus.monolingual.len(),
        corpus.dev.len(),
        corpus.contrastive.len()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
}

fn parse_preset(name: &str) -> Result<Preset> {
    name.parse()
}

fn load_corpus(dir: &Path, cfg: &ExperimentConfig) -> Result<CorpusDir> {
    load_corpus_dir(dir, &FeatureDims::from(&cfg.model))
}

/// One training run written to `out`. Returns the best checkpoint.
fn train_run(
    corpus: &CorpusDir,
    cfg: &ExperimentConfig,
    preset: Preset,
    seed: u64,
    out: &Path,
) -> Result<Checkpoint> {
    let cfg = ExperimentConfig {
        train: preset.apply(&cfg.train),
        ..cfg.clone()
    };
    create_dir(out)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path)
            .map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?,
    );
    let mut write_err = None;
    let mut observer = |r: &MetricRecord| {
        if write_err.is_none() {
            let line = serde_json::to_string(r).expect("serializable");
            if let Err(e) = writeln!(metrics, "{line}") {
                write_err = Some(e);
            }
        }
        if let MetricRecord::Step { phase, step, loss, .. } = r {
            if step % 100 == 0 {
                log::info!("{phase:?} step {step}: loss {loss:.4}");
            }
        }
    };
    let (train_cfg, outcome) =
        train_from_seed(&cfg, &corpus.vocab, &corpus.data, seed, &mut observer)?;
    if let Some(e) = write_err {
        return Err(Error::io(format!("writing {}", metrics_path.display()), e));
    }
    metrics
        .flush()
        .map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;

    let mut meta = BTreeMap::new();
    meta.insert("preset".into(), preset.name().into());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("best_step".into(), outcome.best_step.to_string());
    if let Some(b) = outcome.best_dev_bleu {
        meta.insert("dev_bleu".into(), format!("{b}"));
    }
    let best = make_checkpoint(&outcome.best, &corpus.vocab, &train_cfg, meta.clone())?;
    let last = make_checkpoint(&outcome.last, &corpus.vocab, &train_cfg, meta)?;
    save_checkpoint(&out.join("checkpoint.bin"), &best)?;
    save_checkpoint(&out.join("last.bin"), &last)?;

    let summary = serde_json::json!({
        "preset": preset.name(),
        "seed": seed,
        "best_step": outcome.best_step,
        "best_dev_bleu": outcome.best_dev_bleu,
        "steps": {"mmt": outcome.objective_counts[0], "vmlm": outcome.objective_counts[1]},
        "train": train_cfg,
        "model": best.model.config,
    });
    write_file(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("serializable") + "\n"),
    )?;
    Ok(best)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let preset = parse_preset(&a.preset)?;
    let corpus = load_corpus(&a.dataset, &cfg)?;
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let best = train_run(&corpus, &cfg, preset, seed, &a.out)?;
    let bleu = best.metadata.get("dev_bleu").map_or("n/a".into(), |b| b.clone());
    println!(
        "wrote {} (best step {}, dev BLEU {bleu})",
        a.out.join("checkpoint.bin").display(),
        best.metadata["best_step"],
    );
    Ok(())
}

fn load_examples(path: &Path, kind: &str, ckpt: &Checkpoint) -> Result<Vec<MultimodalExample>> {
    let vocab = checkpoint_vocab(ckpt)?;
    let kind: DatasetKind = kind.parse()?;
    load_dataset(path, kind, &vocab, &FeatureDims::from(&ckpt.model.config))?.into_examples()
}

fn translate(a: TranslateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let vocab = checkpoint_vocab(&ckpt)?;
    let ablation = checkpoint_ablation(&ckpt)?;
    let examples = load_examples(&a.dataset, &a.kind, &ckpt)?;
    let mut out = String::new();
    for ex in &examples {
        let y = ckpt.model.greedy_translate(&ablation.apply(&ex.input()?), a.max_len)?;
        writeln!(out, "{}\t{}", ex.id, detokenize(&y, &vocab)).expect("string write");
    }
    emit(a.out.as_deref(), &out)
}

fn eval_contrastive(a: EvalContrastiveArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let vocab = checkpoint_vocab(&ckpt)?;
    let items = load_dataset(
        &a.dataset,
        DatasetKind::Contrastive,
        &vocab,
        &FeatureDims::from(&ckpt.model.config),
    )?
    .into_items()?;
    let ablation = if a.text_only {
        InputAblation::text_only()
    } else {
        checkpoint_ablation(&ckpt)?
    };
    let scorer = ModelScorer {
        model: &ckpt.model,
        ablation,
    };
    let report: ContrastiveReport = contrastive_evaluate(&items, &scorer)?;
    if let Some(p) = &a.out {
        write_file(p, &report.to_jsonl())?;
        println!("{report}");
    } else {
        print!("{}", report.to_jsonl());
        eprintln!("{report}");
    }
    Ok(())
}

fn parse_smoothing(s: &str) -> BleuSmoothing {
    if s == "add-one" {
        BleuSmoothing::AddOne
    } else {
        BleuSmoothing::None
    }
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text.lines().map(split_words).collect())
}

fn eval_bleu(a: EvalBleuArgs) -> Result<()> {
    let smoothing = parse_smoothing(&a.smoothing);
    let score = match (&a.checkpoint, &a.dataset, &a.hypotheses, &a.references) {
        (Some(c), Some(d), None, None) => {
            let ckpt = load_checkpoint(c)?;
            let ablation = checkpoint_ablation(&ckpt)?;
            let examples = load_examples(d, "parallel", &ckpt)?;
            dev_bleu(&ckpt.model, &examples, ablation, a.max_len, smoothing)?
        }
        (None, None, Some(h), Some(r)) => {
            let hyps = read_lines(h)?;
            let refs = read_lines(r)?;
            corpus_bleu(&hyps, &refs, smoothing)?
        }
        _ => {
            return Err(Error::Config(
                "give either --checkpoint with --dataset, or --hypotheses with --references".into(),
            ))
        }
    };
    println!("BLEU {score:.4}");
    Ok(())
}

fn inspect_attention(a: InspectAttentionArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let vocab = checkpoint_vocab(&ckpt)?;
    let ablation = checkpoint_ablation(&ckpt)?;
    let examples = load_examples(&a.dataset, &a.kind, &ckpt)?;
    let ex = match &a.example {
        Some(id) => examples
            .iter()
            .find(|e| &e.id == id)
            .ok_or_else(|| Error::UnknownName {
                kind: "example",
                name: id.clone(),
            })?,
        None => examples.get(a.index).ok_or(Error::Index {
            what: "example",
            index: a.index,
            limit: examples.len(),
        })?,
    };
    let input = ablation.apply(&ex.input()?);
    let scores = attention_scores_for(&ckpt.model, &input, a.layer)?;
    let mut labels: Vec<String> = input
        .text_ids
        .iter()
        .map(|&t| vocab.token(t).unwrap_or("<?>").to_string())
        .collect();
    labels.extend((0..input.local_features.rows()).map(|k| format!("<region{k}>")));
    if input.global_feature.is_some() {
        labels.push("<global>".into());
    }
    let rows: Vec<&[f64]> = (0..scores.rows()).map(|i| scores.row(i)).collect();
    let doc = serde_json::json!({
        "id": ex.id,
        "layer": a.layer,
        "labels": labels,
        "scores": rows,
    });
    emit(
        a.out.as_deref(),
        &(serde_json::to_string_pretty(&doc).expect("serializable") + "\n"),
    )
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let corpus = load_corpus(&a.dataset, &cfg)?;
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let mut presets = vec![Preset::Default];
    let chosen: Vec<Preset> = if a.preset.is_empty() {
        Preset::ALL.to_vec()
    } else {
        a.preset.iter().map(|p| parse_preset(p)).collect::<Result<_>>()?
    };
    presets.extend(chosen.into_iter().filter(|p| *p != Preset::Default));

    let scratch;
    let out = match &a.out {
        Some(o) => o.clone(),
        None => {
            scratch = std::env::temp_dir().join(format!("guidemt-ablate-{}", std::process::id()));
            scratch.clone()
        }
    };
    let mut table = String::from("preset\tcontrastive_acc\tties\tdev_bleu\tbest_step\n");
    let mut baseline = None;
    for preset in presets {
        log::info!("running preset {preset}");
        let ckpt = train_run(&corpus, &cfg, preset, seed, &out.join(preset.name()))?;
        let acc = match &corpus.contrastive {
            Some(items) => {
                let scorer = ModelScorer {
                    model: &ckpt.model,
                    ablation: checkpoint_ablation(&ckpt)?,
                };
                let r = contrastive_evaluate(items, &scorer)?;
                Some((100.0 * r.accuracy, r.ties))
            }
            None => None,
        };
        if preset == Preset::Default {
            baseline = acc.map(|x| x.0);
        }
        let (acc_s, ties_s) = match acc {
            Some((v, t)) => match baseline {
                Some(b) if preset != Preset::Default => (format!("{v:.2} ({:+.2})", v - b), t.to_string()),
                _ => (format!("{v:.2}"), t.to_string()),
            },
            None => ("n/a".into(), "n/a".into()),
        };
        writeln!(
            table,
            "{preset}\t{acc_s}\t{ties_s}\t{}\t{}",
            ckpt.metadata.get("dev_bleu").map_or("n/a", String::as_str),
            ckpt.metadata["best_step"]
        )
        .expect("string write");
    }
    if a.out.is_some() {
        write_file(&out.join("table.tsv"), &table)?;
    } else {
        let _ = std::fs::remove_dir_all(&out);
    }
    print!("{table}");
    Ok(())
}
