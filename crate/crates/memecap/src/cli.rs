//! Command-line interface: preprocess, train, generate, evaluate, and
//! pseudo-embed subcommands over the library pipeline. Results go to
//! stdout, diagnostics to stderr, and every flag can take its default
//! from an optional `key = value` config file (explicit flags win).

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{self, AnyModel};
use crate::corpus::{read_raw_examples, tokenize, Dataset, RawExample};
use crate::embeddings::{load_glove, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::eval::{build_dup_index, percent_in_data, perplexity};
use crate::images::{pseudo_embed, resolve, ImageEmbeddings};
use crate::inference::{generate, DecodeConfig, DecodeMode};
use crate::model::{EncoderVariant, Model};
use crate::numerics::{Scalar, Vector};
use crate::training::{train, EpochMetrics, LrDecay, OptimizerKind, TrainConfig};

#[derive(Parser)]
#[command(name = "memecap", version, about = "Meme caption model toolkit")]
struct Cli {
    /// Defaults file of `key = value` lines (keys are long flag names);
    /// explicit flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a raw caption TSV, build the vocabulary, and write the
    /// filtered dataset plus vocabulary files.
    Preprocess(PreprocessArgs),
    /// Train a captioning model and write a checkpoint.
    Train(TrainArgs),
    /// Generate captions for one image from a checkpoint.
    Generate(GenerateArgs),
    /// Report perplexity (and optionally %-copied) on an eval set.
    Evaluate(EvaluateArgs),
    /// Hash image files into a deterministic embedding store.
    PseudoEmbed(PseudoEmbedArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Raw dataset TSV: `image_id <TAB> label <TAB> caption` per line.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Directory for `dataset.tsv` and `vocab.tsv`.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Words below this count become UNK.
    #[arg(long, value_name = "N")]
    min_count: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset TSV.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Also write the metrics TSV here (it always prints to stdout).
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
    /// Image embedding store; without it every image id is
    /// pseudo-embedded from the id string itself.
    #[arg(long, value_name = "FILE")]
    images: Option<PathBuf>,
    /// Pretrained word vectors; without them embeddings start random.
    #[arg(long, value_name = "FILE")]
    glove: Option<PathBuf>,
    /// Encoder: 1 image-only, 2 image+label average, 3 label attention.
    #[arg(long, value_name = "1|2|3")]
    variant: Option<u8>,
    #[arg(long, value_name = "N")]
    min_count: Option<u64>,
    /// Word-embedding width when no pretrained vectors are given.
    #[arg(long, value_name = "N")]
    embed_dim: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Momentum coefficient (with --optimizer momentum).
    #[arg(long, value_name = "MU")]
    mu: Option<f64>,
    #[arg(long, value_name = "LR")]
    learning_rate: Option<f64>,
    /// Learning-rate multiplier applied every --lr-decay-every epochs.
    #[arg(long, value_name = "F")]
    lr_decay_factor: Option<f64>,
    #[arg(long, value_name = "N")]
    lr_decay_every: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    layers: Option<usize>,
    #[arg(long, value_name = "N")]
    hidden: Option<usize>,
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    #[arg(long, value_name = "NORM")]
    clip_norm: Option<f64>,
    /// Keep word embeddings fixed during training.
    #[arg(long)]
    freeze_embeddings: bool,
    /// Worker threads for batch forward/backward passes.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Image embedding store for --image-id lookups.
    #[arg(long, value_name = "FILE")]
    images: Option<PathBuf>,
    /// Image id; resolved from --images when given, pseudo-embedded
    /// from the id string otherwise.
    #[arg(long, value_name = "ID")]
    image_id: Option<String>,
    /// Image file to pseudo-embed instead of an id lookup.
    #[arg(long, value_name = "FILE")]
    image_file: Option<PathBuf>,
    /// Label text for label-aware encoder variants.
    #[arg(long, value_name = "TEXT")]
    label: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Beam width / number of captions.
    #[arg(long, value_name = "K")]
    k: Option<usize>,
    #[arg(long, value_name = "T")]
    temperature: Option<f64>,
    /// Sampling pool size per step (temperature-beam mode).
    #[arg(long, value_name = "M")]
    top_m: Option<usize>,
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Rank captions by mean per-token log-probability.
    #[arg(long)]
    length_normalize: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Evaluation dataset TSV.
    #[arg(long, value_name = "FILE")]
    eval_data: Option<PathBuf>,
    /// Image embedding store; ids pseudo-embed without it.
    #[arg(long, value_name = "FILE")]
    images: Option<PathBuf>,
    /// Training dataset TSV; enables the %-in-data copy check over
    /// captions generated for each eval image.
    #[arg(long, value_name = "FILE")]
    train_data: Option<PathBuf>,
    /// Bigram-Jaccard similarity that counts as a near-copy.
    #[arg(long, value_name = "J")]
    threshold: Option<f64>,
    /// Captions generated per eval image for the copy check.
    #[arg(long, value_name = "K")]
    k: Option<usize>,
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct PseudoEmbedArgs {
    /// Embedding store to write.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Image files; each id is the file stem.
    #[arg(value_name = "IMAGE", num_args = 0..)]
    files: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Momentum,
}

impl FromStr for OptimizerArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerArg::Sgd),
            "momentum" => Ok(OptimizerArg::Momentum),
            other => Err(format!("unknown optimizer {other:?} (sgd, momentum)")),
        }
    }
}

impl Display for OptimizerArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerArg::Sgd => "sgd",
            OptimizerArg::Momentum => "momentum",
        })
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Greedy,
    Beam,
    TemperatureBeam,
}

impl From<ModeArg> for DecodeMode {
    fn from(mode: ModeArg) -> DecodeMode {
        match mode {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::Beam => DecodeMode::Beam,
            ModeArg::TemperatureBeam => DecodeMode::TemperatureBeam,
        }
    }
}

impl FromStr for ModeArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(ModeArg::Greedy),
            "beam" => Ok(ModeArg::Beam),
            "temperature-beam" => Ok(ModeArg::TemperatureBeam),
            other => Err(format!(
                "unknown mode {other:?} (greedy, beam, temperature-beam)"
            )),
        }
    }
}

impl Display for ModeArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModeArg::Greedy => "greedy",
            ModeArg::Beam => "beam",
            ModeArg::TemperatureBeam => "temperature-beam",
        })
    }
}

/// `key = value` lines; `#` starts a comment; unknown keys are ignored
/// so one file can serve several subcommands.
#[derive(Debug)]
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig(HashMap::new()));
        };
        let origin = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let mut map = HashMap::new();
        for (index, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(&origin, index + 1, "expected `key = value`"));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::Config(format!("config key {key}: cannot parse {raw:?}"))
            }),
        }
    }
}

/// Effective value of one knob: explicit flag, then config file, then
/// the built-in default. Echoes the result to stderr.
fn pick<T: FromStr + Display>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
) -> Result<T> {
    let value = match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    };
    eprintln!("{key} = {value}");
    Ok(value)
}

/// Like [`pick`] but without a default; `None` means the knob is absent.
fn pick_opt<T: FromStr + Display>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
) -> Result<Option<T>> {
    let value = match flag {
        Some(v) => Some(v),
        None => file.get(key)?,
    };
    if let Some(v) = &value {
        eprintln!("{key} = {v}");
    }
    Ok(value)
}

fn pick_path(
    flag: Option<PathBuf>,
    file: &FileConfig,
    key: &str,
) -> Result<Option<PathBuf>> {
    let value = match flag {
        Some(v) => Some(v),
        None => file.get::<PathBuf>(key)?,
    };
    if let Some(v) = &value {
        eprintln!("{key} = {}", v.display());
    }
    Ok(value)
}

fn require_path(value: Option<PathBuf>, key: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Config(format!("--{key} is required")))
}

fn pick_flag(flag: bool, file: &FileConfig, key: &str) -> Result<bool> {
    let value = if flag { true } else { file.get(key)?.unwrap_or(false) };
    eprintln!("{key} = {value}");
    Ok(value)
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Parse argv and run; the returned code follows the exit convention
/// (0 ok, 1 validation, 2 I/O or format, 3 numeric).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Preprocess(args) => cmd_preprocess(args, &file),
        Command::Train(args) => cmd_train(args, &file),
        Command::Generate(args) => cmd_generate(args, &file),
        Command::Evaluate(args) => cmd_evaluate(args, &file),
        Command::PseudoEmbed(args) => cmd_pseudo_embed(args, &file),
    }
}

fn variant_from_number(n: u8) -> Result<EncoderVariant> {
    match n {
        1 => Ok(EncoderVariant::ImageOnly),
        2 => Ok(EncoderVariant::GloveAverage),
        3 => Ok(EncoderVariant::AttentionLabels),
        other => Err(Error::Config(format!("variant must be 1, 2, or 3, got {other}"))),
    }
}

/// Raw examples paired with their encoded forms, dropping the ones the
/// UNK filter rejects while keeping the pairing intact.
fn encode_kept(
    raws: &[RawExample],
    vocab: &crate::corpus::Vocabulary,
) -> (Vec<RawExample>, Dataset) {
    let mut kept = Vec::new();
    let mut examples = Vec::new();
    for raw in raws {
        let single = Dataset::encode_with(std::slice::from_ref(raw), vocab.clone());
        if let Some(example) = single.examples.into_iter().next() {
            kept.push(raw.clone());
            examples.push(example);
        }
    }
    (
        kept,
        Dataset {
            examples,
            vocab: vocab.clone(),
        },
    )
}

/// Image vectors for every example: looked up in the store when one was
/// given, deterministically derived from the id string otherwise.
fn resolve_images<F: Scalar>(
    store_path: Option<&Path>,
    dataset: &Dataset,
) -> Result<Vec<Vector<F>>> {
    let store = match store_path {
        Some(path) => ImageEmbeddings::load(path)?,
        None => {
            eprintln!("no --images store; pseudo-embedding image ids");
            let mut store = ImageEmbeddings::new();
            for example in &dataset.examples {
                if store.get(&example.image_id).is_none() {
                    store.insert(&example.image_id, pseudo_embed(example.image_id.as_bytes()))?;
                }
            }
            store
        }
    };
    resolve(&store, &dataset.examples)
}

fn cmd_preprocess(args: PreprocessArgs, file: &FileConfig) -> Result<()> {
    let data = require_path(pick_path(args.data, file, "data")?, "data")?;
    let out_dir = require_path(pick_path(args.out_dir, file, "out-dir")?, "out-dir")?;
    let min_count = pick(args.min_count, file, "min-count", 3)?;

    let raws = read_raw_examples(&data)?;
    let dataset = Dataset::build(&raws, min_count);
    let (kept, _) = encode_kept(&raws, &dataset.vocab);

    fs::create_dir_all(&out_dir).map_err(|e| Error::io_at(&out_dir, e))?;
    dataset.vocab.save(&out_dir.join("vocab.tsv"))?;
    let mut lines = String::new();
    for raw in &kept {
        lines.push_str(&format!("{}\t{}\t{}\n", raw.image_id, raw.label, raw.caption));
    }
    let dataset_path = out_dir.join("dataset.tsv");
    fs::write(&dataset_path, lines).map_err(|e| Error::io_at(&dataset_path, e))?;

    println!("vocab_size\t{}", dataset.vocab.len());
    println!("captions_kept\t{}", kept.len());
    println!("captions_removed\t{}", raws.len() - kept.len());
    Ok(())
}

fn metrics_tsv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch\ttrain_loss\teval_perplexity\n");
    for m in metrics {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\n",
            m.epoch, m.train_loss, m.eval_perplexity
        ));
    }
    out
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<()> {
    let data = require_path(pick_path(args.data, file, "data")?, "data")?;
    let out = require_path(pick_path(args.out, file, "out")?, "out")?;
    let metrics_path = pick_path(args.metrics, file, "metrics")?;
    let images_path = pick_path(args.images, file, "images")?;
    let glove_path = pick_path(args.glove, file, "glove")?;
    let variant = variant_from_number(pick(args.variant, file, "variant", 1)?)?;
    let min_count = pick(args.min_count, file, "min-count", 3)?;
    let embed_dim = pick(args.embed_dim, file, "embed-dim", 300)?;
    let defaults = TrainConfig::default();
    let optimizer = match pick_opt(args.optimizer, file, "optimizer")? {
        None | Some(OptimizerArg::Sgd) => OptimizerKind::Sgd,
        Some(OptimizerArg::Momentum) => OptimizerKind::Momentum {
            mu: pick(args.mu, file, "mu", 0.9)?,
        },
    };
    let config = TrainConfig {
        optimizer,
        learning_rate: pick(args.learning_rate, file, "learning-rate", defaults.learning_rate)?,
        lr_decay: LrDecay {
            factor: pick(args.lr_decay_factor, file, "lr-decay-factor", defaults.lr_decay.factor)?,
            every_n_epochs: pick(args.lr_decay_every, file, "lr-decay-every", defaults.lr_decay.every_n_epochs)?,
        },
        batch_size: pick(args.batch_size, file, "batch-size", defaults.batch_size)?,
        epochs: pick(args.epochs, file, "epochs", defaults.epochs)?,
        layers: pick(args.layers, file, "layers", defaults.layers)?,
        hidden: pick(args.hidden, file, "hidden", defaults.hidden)?,
        seed: pick(args.seed, file, "seed", defaults.seed)?,
        clip_norm: pick(args.clip_norm, file, "clip-norm", defaults.clip_norm)?,
        freeze_embeddings: pick_flag(args.freeze_embeddings, file, "freeze-embeddings")?,
        threads: pick(args.threads, file, "threads", default_threads())?,
    };

    let raws = read_raw_examples(&data)?;
    let dataset = Dataset::build(&raws, min_count);
    if variant != EncoderVariant::ImageOnly && raws.iter().all(|r| r.label.trim().is_empty()) {
        return Err(Error::Config(format!(
            "variant {} conditions on labels, but no example has one",
            match variant {
                EncoderVariant::GloveAverage => 2,
                _ => 3,
            }
        )));
    }
    let images = resolve_images::<f32>(images_path.as_deref(), &dataset)?;
    let embeddings: EmbeddingMatrix<f32> = match &glove_path {
        Some(path) => {
            let emb = load_glove(path, &dataset.vocab, config.seed)?;
            eprintln!("glove coverage = {:.1}%", emb.coverage * 100.0);
            emb
        }
        None => EmbeddingMatrix::seeded_random(dataset.vocab.len(), embed_dim, config.seed),
    };

    let (model, metrics) = train(&dataset, &images, embeddings, variant, &config)?;
    checkpoint::save(&model, &out)?;
    eprintln!("checkpoint written to {}", out.display());

    let tsv = metrics_tsv(&metrics);
    print!("{tsv}");
    if let Some(path) = metrics_path {
        fs::write(&path, &tsv).map_err(|e| Error::io_at(&path, e))?;
    }
    Ok(())
}

fn decode_config_from(
    mode: DecodeMode,
    k: usize,
    temperature: f64,
    top_m: usize,
    max_len: usize,
    seed: u64,
    length_normalize: bool,
) -> DecodeConfig {
    DecodeConfig {
        mode,
        k,
        temperature,
        top_m,
        max_len,
        seed,
        length_normalize,
    }
}

fn cmd_generate(args: GenerateArgs, file: &FileConfig) -> Result<()> {
    let checkpoint_path =
        require_path(pick_path(args.checkpoint, file, "checkpoint")?, "checkpoint")?;
    let images_path = pick_path(args.images, file, "images")?;
    let image_id = pick_opt(args.image_id, file, "image-id")?;
    let image_file = pick_path(args.image_file, file, "image-file")?;
    let label = pick(args.label, file, "label", String::new())?;
    let defaults = DecodeConfig::default();
    let mode = match pick_opt(args.mode, file, "mode")? {
        Some(m) => m.into(),
        None => DecodeMode::Beam,
    };
    let cfg = decode_config_from(
        mode,
        pick(args.k, file, "k", defaults.k)?,
        pick(args.temperature, file, "temperature", defaults.temperature)?,
        pick(args.top_m, file, "top-m", defaults.top_m)?,
        pick(args.max_len, file, "max-len", defaults.max_len)?,
        pick(args.seed, file, "seed", defaults.seed)?,
        pick_flag(args.length_normalize, file, "length-normalize")?,
    );
    cfg.validate()?;

    let embedding: Vec<f32> = match (&image_id, &image_file) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--image-id and --image-file are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config("one of --image-id or --image-file is required".into()))
        }
        (Some(id), None) => match &images_path {
            Some(path) => ImageEmbeddings::load(path)?
                .get(id)
                .ok_or_else(|| {
                    Error::Config(format!("image id {id:?} not present in the embedding store"))
                })?
                .to_vec(),
            None => {
                eprintln!("no --images store; pseudo-embedding the id string");
                pseudo_embed(id.as_bytes())
            }
        },
        (None, Some(path)) => pseudo_embed(&fs::read(path).map_err(|e| Error::io_at(path, e))?),
    };

    match checkpoint::load_any(&checkpoint_path)? {
        AnyModel::F32(model) => run_generate(&model, &embedding, &label, &cfg),
        AnyModel::F64(model) => run_generate(&model, &embedding, &label, &cfg),
    }
}

fn run_generate<F: Scalar>(
    model: &Model<F>,
    embedding: &[f32],
    label: &str,
    cfg: &DecodeConfig,
) -> Result<()> {
    if model.config.variant == EncoderVariant::ImageOnly && !label.trim().is_empty() {
        eprintln!("warning: this checkpoint's encoder ignores labels");
    }
    let image = Vector::from_vec(embedding.iter().map(|&x| F::from_f64(x as f64)).collect());
    let captions = generate(model, &image, label, cfg)?;
    for (rank, (log_prob, text)) in captions.iter().enumerate() {
        println!("{}\t{:.6}\t{}", rank + 1, log_prob, text);
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, file: &FileConfig) -> Result<()> {
    let checkpoint_path =
        require_path(pick_path(args.checkpoint, file, "checkpoint")?, "checkpoint")?;
    let eval_path = require_path(pick_path(args.eval_data, file, "eval-data")?, "eval-data")?;
    let images_path = pick_path(args.images, file, "images")?;
    let train_path = pick_path(args.train_data, file, "train-data")?;
    let threshold = pick(args.threshold, file, "threshold", crate::eval::DEFAULT_NEAR_THRESHOLD)?;
    let k = pick(args.k, file, "k", 1)?;
    let max_len = pick(args.max_len, file, "max-len", 30)?;
    let seed = pick(args.seed, file, "seed", 42)?;

    match checkpoint::load_any(&checkpoint_path)? {
        AnyModel::F32(model) => run_evaluate(
            &model,
            &eval_path,
            images_path.as_deref(),
            train_path.as_deref(),
            threshold,
            k,
            max_len,
            seed,
        ),
        AnyModel::F64(model) => run_evaluate(
            &model,
            &eval_path,
            images_path.as_deref(),
            train_path.as_deref(),
            threshold,
            k,
            max_len,
            seed,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_evaluate<F: Scalar>(
    model: &Model<F>,
    eval_path: &Path,
    images_path: Option<&Path>,
    train_path: Option<&Path>,
    threshold: f64,
    k: usize,
    max_len: usize,
    seed: u64,
) -> Result<()> {
    let raws = read_raw_examples(eval_path)?;
    let (kept, dataset) = encode_kept(&raws, &model.vocab);
    if dataset.examples.is_empty() {
        return Err(Error::Config(format!(
            "no usable eval captions: {} were read and all were dropped against \
             the checkpoint vocabulary",
            raws.len()
        )));
    }
    let images = resolve_images::<F>(images_path, &dataset)?;
    let mut report = perplexity(model, &dataset, &images)?;
    report.near_dup_threshold = threshold;

    if let Some(train_path) = train_path {
        let train_raws = read_raw_examples(train_path)?;
        let index = build_dup_index(
            &train_raws.iter().map(|r| tokenize(&r.caption)).collect::<Vec<_>>(),
        );
        let cfg = decode_config_from(DecodeMode::Beam, k, 1.0, 100.max(k), max_len, seed, false);
        cfg.validate()?;
        let mut generated = Vec::new();
        for (raw, image) in kept.iter().zip(&images) {
            for (_, text) in generate(model, image, &raw.label, &cfg)? {
                generated.push(tokenize(&text));
            }
        }
        report.percent_in_data = Some(percent_in_data(&generated, &index, threshold)?);
    }

    println!("examples\t{}", dataset.examples.len());
    println!("perplexity\t{:.6}", report.perplexity);
    if let Some(pct) = report.percent_in_data {
        println!("percent_in_data\t{pct:.6}");
        println!("near_dup_threshold\t{:.6}", report.near_dup_threshold);
    }
    Ok(())
}

fn cmd_pseudo_embed(args: PseudoEmbedArgs, file: &FileConfig) -> Result<()> {
    let out = require_path(pick_path(args.out, file, "out")?, "out")?;
    if args.files.is_empty() {
        return Err(Error::Config("at least one image file is required".into()));
    }
    let mut store = ImageEmbeddings::new();
    for path in &args.files {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| {
                Error::Config(format!("cannot derive an id from path {}", path.display()))
            })?
            .to_string();
        store.insert(&id, pseudo_embed(&fs::read(path).map_err(|e| Error::io_at(path, e))?))?;
        eprintln!("embedded {} as {id:?}", path.display());
    }
    store.save(&out)?;
    println!("images\t{}", store.len());
    Ok(())
}
