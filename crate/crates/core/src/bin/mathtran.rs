//! Command-line front end binding the toolkit modules into
//! reproducible pipelines.

use clap::{Args, Parser, Subcommand};
use mathtran::corpus::{self, FormulaPair, GrammarConfig};
use mathtran::decode::{translate, ModelBundle, TranslationRecord};
use mathtran::eval::{
    back_translation_eval, round_trip_eval, ExternalConverter, IdentityConverter,
    SubprocessConverter,
};
use mathtran::metrics::{self, MetricReport};
use mathtran::model::{init_model, Model, ModelConfig};
use mathtran::preprocess::{
    self, build_vocabulary, EncodedPair, SplitSpec, Vocabulary,
};
use mathtran::tokenizer::{tokenize, Language, TokenStream};
use mathtran::train::{train, Optimizer, TrainConfig};
use serde::Deserialize;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mathtran",
    version,
    about = "Formula machine translation: presentation LaTeX to content languages"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize formulae, one space-joined token list per line.
    Tokenize {
        /// Formula language: latex, semantic, or mathematica.
        #[arg(long)]
        lang: Language,
        /// Input file with one formula per line.
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic aligned corpus from the built-in grammar.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of pairs to generate.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Maximum expression nesting depth.
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
        /// Output corpus (JSONL of {id, source, target}).
        #[arg(long)]
        output: PathBuf,
        /// Also print corpus statistics.
        #[arg(long, default_value_t = false)]
        stats: bool,
    },
    /// Tokenize, tag numbers, split, build vocabularies, and encode.
    Preprocess {
        /// Input corpus (JSONL of {id, source, target}).
        #[arg(long)]
        input: PathBuf,
        /// Directory for vocabularies, splits, and encoded data.
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop pairs with more tokens than this on either side.
        #[arg(long, default_value_t = 1024)]
        max_tokens: usize,
        /// Minimum token count for vocabulary membership.
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        #[arg(long, default_value_t = 0.97)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0.005)]
        valid_fraction: f64,
        #[arg(long, default_value_t = 0.025)]
        test_fraction: f64,
        /// Source formula language.
        #[arg(long, default_value = "latex")]
        source_lang: Language,
        /// Target formula language.
        #[arg(long, default_value = "mathematica")]
        target_lang: Language,
    },
    /// Train a model on preprocessed data.
    Train(TrainArgs),
    /// Translate formulae with a trained bundle.
    Translate {
        /// Bundle directory produced by `train`.
        #[arg(long)]
        bundle: PathBuf,
        /// Input file, one source formula per line.
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL of translation records; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
    },
    /// Score a bundle (or a predictions file) against a reference corpus.
    Evaluate {
        /// Bundle directory; required unless --predictions is given.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Reference corpus (JSONL of {id, source, target}).
        #[arg(long)]
        input: PathBuf,
        /// Pre-computed predictions, one per line, aligned with the corpus.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Report JSON path; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-formula records JSONL path.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Language of references/predictions in --predictions mode.
        #[arg(long, default_value = "mathematica")]
        target_lang: Language,
    },
    /// Round-trip evaluation through an external converter.
    Roundtrip {
        #[arg(long)]
        bundle: PathBuf,
        /// Presentation corpus (JSONL; the `source` field is used).
        #[arg(long)]
        input: PathBuf,
        /// Converter command line, or "identity" for the built-in echo.
        #[arg(long, default_value = "identity")]
        converter: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
    },
    /// Train a grid of configurations and tabulate EM and parameter counts.
    Ablate {
        /// Grid file: one configuration name per line, e.g. C512ks3x11.
        #[arg(long)]
        grid: PathBuf,
        /// Preprocessed data directory (as produced by `preprocess`).
        #[arg(long)]
        data_dir: PathBuf,
        /// Epochs per grid point.
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Batch token budget per grid point.
        #[arg(long, default_value_t = 48_000)]
        batch_tokens: usize,
        /// Output table path; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed data directory (vocabularies + encoded splits).
    #[arg(long)]
    data_dir: PathBuf,
    /// Output directory for the bundle, checkpoints, and training log.
    #[arg(long)]
    output_dir: PathBuf,
    /// TOML config file with [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    state_size: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Optimizer: nag or sgd.
    #[arg(long)]
    optimizer: Option<String>,
}

/// Optional overrides loaded from a TOML config file. Unknown keys are
/// rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: FileModelConfig,
    #[serde(default)]
    train: FileTrainConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileModelConfig {
    state_size: Option<usize>,
    num_layers: Option<usize>,
    kernel_size: Option<usize>,
    dropout_rate: Option<f64>,
    label_smoothing: Option<f64>,
    max_positions: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileTrainConfig {
    learning_rate: Option<f64>,
    clip_threshold: Option<f64>,
    max_tokens_per_batch: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    momentum: Option<f64>,
    seed: Option<u64>,
    optimizer: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Bad invocation (missing files, malformed flags): exit 2.
    Usage(String),
    /// Failures while doing the work: exit 1.
    Runtime(String),
}

impl From<mathtran::Error> for CliError {
    fn from(e: mathtran::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn require_exists(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let file = std::fs::File::open(path)?;
    std::io::BufReader::new(file)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::from)
}

fn write_text(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Tokenize { lang, input, output } => cmd_tokenize(lang, &input, output.as_deref()),
        Command::Synth {
            seed,
            count,
            max_depth,
            output,
            stats,
        } => cmd_synth(seed, count, max_depth, &output, stats),
        Command::Preprocess {
            input,
            output_dir,
            seed,
            max_tokens,
            min_count,
            train_fraction,
            valid_fraction,
            test_fraction,
            source_lang,
            target_lang,
        } => cmd_preprocess(
            &input,
            &output_dir,
            seed,
            max_tokens,
            min_count,
            (train_fraction, valid_fraction, test_fraction),
            source_lang,
            target_lang,
        ),
        Command::Train(args) => cmd_train(args),
        Command::Translate {
            bundle,
            input,
            output,
            beam,
        } => cmd_translate(&bundle, &input, output.as_deref(), beam),
        Command::Evaluate {
            bundle,
            input,
            predictions,
            output,
            records,
            beam,
            target_lang,
        } => cmd_evaluate(
            bundle.as_deref(),
            &input,
            predictions.as_deref(),
            output.as_deref(),
            records.as_deref(),
            beam,
            target_lang,
        ),
        Command::Roundtrip {
            bundle,
            input,
            converter,
            output,
            records,
            beam,
        } => cmd_roundtrip(
            &bundle,
            &input,
            &converter,
            output.as_deref(),
            records.as_deref(),
            beam,
        ),
        Command::Ablate {
            grid,
            data_dir,
            epochs,
            seed,
            batch_tokens,
            output,
        } => cmd_ablate(&grid, &data_dir, epochs, seed, batch_tokens, output.as_deref()),
    }
}

fn cmd_tokenize(lang: Language, input: &Path, output: Option<&Path>) -> CliResult {
    require_exists(input)?;
    let mut out = String::new();
    for (i, line) in read_lines(input)?.iter().enumerate() {
        let stream = tokenize(line, lang)
            .map_err(|e| CliError::Runtime(format!("line {}: {e}", i + 1)))?;
        out.push_str(&stream.texts().join(" "));
        out.push('\n');
    }
    write_text(output, &out)
}

fn cmd_synth(seed: u64, count: usize, max_depth: usize, output: &Path, stats: bool) -> CliResult {
    let config = GrammarConfig::with_default_templates(seed, count, max_depth);
    let pairs = corpus::generate_synthetic(&config)?;
    corpus::save_corpus(output, &pairs)?;
    if stats {
        let s = corpus::corpus_stats(&pairs);
        println!(
            "{}",
            serde_json::to_string_pretty(&s).map_err(|e| CliError::Runtime(e.to_string()))?
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_preprocess(
    input: &Path,
    output_dir: &Path,
    seed: u64,
    max_tokens: usize,
    min_count: u64,
    fractions: (f64, f64, f64),
    source_lang: Language,
    target_lang: Language,
) -> CliResult {
    require_exists(input)?;
    std::fs::create_dir_all(output_dir)?;
    let pairs = corpus::load_corpus(input)?;
    let spec = SplitSpec {
        train_fraction: fractions.0,
        valid_fraction: fractions.1,
        test_fraction: fractions.2,
        seed,
    };
    let (train_raw, valid_raw, test_raw) = preprocess::split_corpus(&pairs, &spec)?;

    // tokenize and tag numbers jointly so a digit string shares one tag
    // across both sides of a pair
    let tag = |raw: &[FormulaPair], base: u64| -> Result<Vec<(TokenStream, TokenStream, String)>, mathtran::Error> {
        raw.iter()
            .enumerate()
            .map(|(i, p)| {
                let src = tokenize(&p.source, source_lang)?;
                let tgt = tokenize(&p.target, target_lang)?;
                let (src, tgt, map) =
                    preprocess::substitute_pair_numbers(&src, &tgt, base.wrapping_add(i as u64));
                Ok((src, tgt, map.serialize()))
            })
            .collect()
    };
    let train_tagged = tag(&train_raw, seed)?;
    let valid_tagged = tag(&valid_raw, seed.wrapping_add(1 << 32))?;
    let test_tagged = tag(&test_raw, seed.wrapping_add(2 << 32))?;

    let src_streams: Vec<TokenStream> = train_tagged.iter().map(|t| t.0.clone()).collect();
    let tgt_streams: Vec<TokenStream> = train_tagged.iter().map(|t| t.1.clone()).collect();
    let source_vocab = build_vocabulary(&src_streams, min_count)?;
    let target_vocab = build_vocabulary(&tgt_streams, min_count)?;
    source_vocab.save(&output_dir.join("source.vocab"))?;
    target_vocab.save(&output_dir.join("target.vocab"))?;

    let encode_split = |tagged: &[(TokenStream, TokenStream, String)],
                        raw: &[FormulaPair]|
     -> Vec<EncodedPair> {
        tagged
            .iter()
            .zip(raw)
            .map(|((src, tgt, map), pair)| EncodedPair {
                id: pair.id.clone(),
                source_ids: preprocess::encode(src, &source_vocab, true),
                target_ids: preprocess::encode(tgt, &target_vocab, true),
                number_map: map.clone(),
            })
            .collect()
    };
    let splits = [
        ("train", encode_split(&train_tagged, &train_raw), &train_raw),
        ("valid", encode_split(&valid_tagged, &valid_raw), &valid_raw),
        ("test", encode_split(&test_tagged, &test_raw), &test_raw),
    ];
    for (name, encoded, raw) in splits {
        let encoded = preprocess::filter_by_length(encoded, max_tokens);
        let mut file = std::fs::File::create(output_dir.join(format!("{name}.jsonl")))?;
        for pair in &encoded {
            let line =
                serde_json::to_string(pair).map_err(|e| CliError::Runtime(e.to_string()))?;
            writeln!(file, "{line}")?;
        }
        corpus::save_corpus(&output_dir.join(format!("{name}.raw.jsonl")), raw)?;
        println!("{name}: {} pairs", encoded.len());
    }
    let manifest = serde_json::json!({
        "seed": seed,
        "max_tokens": max_tokens,
        "min_count": min_count,
        "source_language": source_lang.to_string(),
        "target_language": target_lang.to_string(),
        "source_vocab_size": source_vocab.size(),
        "target_vocab_size": target_vocab.size(),
    });
    std::fs::write(
        output_dir.join("preprocess.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    Ok(())
}

fn load_encoded(path: &Path) -> Result<Vec<EncodedPair>, CliError> {
    require_exists(path)?;
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn parse_optimizer(name: &str) -> Result<Optimizer, CliError> {
    match name {
        "nag" => Ok(Optimizer::Nag),
        "sgd" => Ok(Optimizer::Sgd),
        other => Err(CliError::Usage(format!(
            "unknown optimizer {other:?} (expected nag or sgd)"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> CliResult {
    require_exists(&args.data_dir)?;
    let file_config: FileConfig = match &args.config {
        None => FileConfig::default(),
        Some(path) => {
            require_exists(path)?;
            toml::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| CliError::Usage(format!("config file: {e}")))?
        }
    };

    let source_vocab = Vocabulary::load(&args.data_dir.join("source.vocab"))?;
    let target_vocab = Vocabulary::load(&args.data_dir.join("target.vocab"))?;
    let train_set = load_encoded(&args.data_dir.join("train.jsonl"))?;
    let valid_set = load_encoded(&args.data_dir.join("valid.jsonl"))?;

    // precedence: defaults < config file < CLI flags
    let fm = &file_config.model;
    let defaults = ModelConfig::default();
    let model_config = ModelConfig {
        state_size: args.state_size.or(fm.state_size).unwrap_or(defaults.state_size),
        num_layers: args.layers.or(fm.num_layers).unwrap_or(defaults.num_layers),
        kernel_size: args.kernel.or(fm.kernel_size).unwrap_or(defaults.kernel_size),
        dropout_rate: args.dropout.or(fm.dropout_rate).unwrap_or(defaults.dropout_rate),
        label_smoothing: args
            .label_smoothing
            .or(fm.label_smoothing)
            .unwrap_or(defaults.label_smoothing),
        max_positions: args
            .max_positions
            .or(fm.max_positions)
            .unwrap_or(defaults.max_positions),
        source_vocab_size: source_vocab.size(),
        target_vocab_size: target_vocab.size(),
        seed: args.seed.or(fm.seed).unwrap_or(defaults.seed),
    };
    let ft = &file_config.train;
    let td = TrainConfig::default();
    let optimizer = match (&args.optimizer, &ft.optimizer) {
        (Some(s), _) => parse_optimizer(s)?,
        (None, Some(s)) => parse_optimizer(s)?,
        (None, None) => td.optimizer,
    };
    let train_config = TrainConfig {
        learning_rate: args.lr.or(ft.learning_rate).unwrap_or(td.learning_rate),
        clip_threshold: args.clip.or(ft.clip_threshold).unwrap_or(td.clip_threshold),
        max_tokens_per_batch: args
            .batch_tokens
            .or(ft.max_tokens_per_batch)
            .unwrap_or(td.max_tokens_per_batch),
        max_epochs: args.max_epochs.or(ft.max_epochs).unwrap_or(td.max_epochs),
        patience: args.patience.or(ft.patience).unwrap_or(td.patience),
        momentum: ft.momentum.unwrap_or(td.momentum),
        seed: args.seed.or(ft.seed).unwrap_or(td.seed),
        optimizer,
    };

    std::fs::create_dir_all(&args.output_dir)?;
    let effective = effective_config_toml(&model_config, &train_config);
    std::fs::write(args.output_dir.join("config.effective.toml"), &effective)?;
    print!("{effective}");

    let model: Model<f32> = init_model(&model_config)?;
    println!("parameters: {}", model.num_parameters());
    let outcome = train(model, &train_set, &valid_set, &train_config, Some(&args.output_dir))?;
    let best = outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch);
    if let Some(record) = best {
        println!(
            "best epoch {}: valid EM {:.4}, perplexity {:.4}",
            record.epoch, record.valid_em, record.valid_ppl
        );
    }

    let manifest = std::fs::read_to_string(args.data_dir.join("preprocess.json")).ok();
    let (source_language, target_language) = match manifest
        .as_deref()
        .and_then(|m| serde_json::from_str::<serde_json::Value>(m).ok())
    {
        Some(v) => (
            v["source_language"]
                .as_str()
                .unwrap_or("latex")
                .parse()
                .map_err(|e: mathtran::Error| CliError::Usage(e.to_string()))?,
            v["target_language"]
                .as_str()
                .unwrap_or("mathematica")
                .parse()
                .map_err(|e: mathtran::Error| CliError::Usage(e.to_string()))?,
        ),
        None => (Language::LatexPresentation, Language::MathematicaInput),
    };
    let bundle = ModelBundle {
        model: outcome.model,
        source_vocab,
        target_vocab,
        source_language,
        target_language,
    };
    bundle.save(&args.output_dir)?;
    Ok(())
}

fn effective_config_toml(model: &ModelConfig, train: &TrainConfig) -> String {
    format!(
        "[model]\n\
         state_size = {}\n\
         num_layers = {}\n\
         kernel_size = {}\n\
         dropout_rate = {}\n\
         label_smoothing = {}\n\
         max_positions = {}\n\
         seed = {}\n\
         \n\
         [train]\n\
         learning_rate = {}\n\
         clip_threshold = {}\n\
         max_tokens_per_batch = {}\n\
         max_epochs = {}\n\
         patience = {}\n\
         momentum = {}\n\
         seed = {}\n\
         optimizer = \"{}\"\n",
        model.state_size,
        model.num_layers,
        model.kernel_size,
        model.dropout_rate,
        model.label_smoothing,
        model.max_positions,
        model.seed,
        train.learning_rate,
        train.clip_threshold,
        train.max_tokens_per_batch,
        train.max_epochs,
        train.patience,
        train.momentum,
        train.seed,
        match train.optimizer {
            Optimizer::Nag => "nag",
            Optimizer::Sgd => "sgd",
        },
    )
}

fn cmd_translate(bundle_dir: &Path, input: &Path, output: Option<&Path>, beam: usize) -> CliResult {
    require_exists(bundle_dir)?;
    require_exists(input)?;
    let bundle = ModelBundle::load(bundle_dir)?;
    let mut out = String::new();
    for (i, line) in read_lines(input)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (prediction, score, map) = translate(line, &bundle, beam, i as u64)
            .map_err(|e| CliError::Runtime(format!("line {}: {e}", i + 1)))?;
        let record = TranslationRecord {
            id: format!("line-{}", i + 1),
            source: line.clone(),
            prediction,
            score,
            number_map: map.serialize(),
        };
        out.push_str(&serde_json::to_string(&record).map_err(|e| CliError::Runtime(e.to_string()))?);
        out.push('\n');
    }
    write_text(output, &out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    bundle_dir: Option<&Path>,
    input: &Path,
    predictions: Option<&Path>,
    output: Option<&Path>,
    records: Option<&Path>,
    beam: usize,
    target_lang: Language,
) -> CliResult {
    require_exists(input)?;
    let pairs = corpus::load_corpus(input)?;
    match (bundle_dir, predictions) {
        (_, Some(pred_path)) => {
            require_exists(pred_path)?;
            let lines = read_lines(pred_path)?;
            if lines.len() != pairs.len() {
                return Err(CliError::Usage(format!(
                    "{} predictions for {} references",
                    lines.len(),
                    pairs.len()
                )));
            }
            let preds: Vec<TokenStream> = lines
                .iter()
                .map(|l| tokenize(l, target_lang))
                .collect::<Result<_, _>>()?;
            let refs: Vec<TokenStream> = pairs
                .iter()
                .map(|p| tokenize(&p.target, target_lang))
                .collect::<Result<_, _>>()?;
            let pairs_streams: Vec<(TokenStream, TokenStream)> = preds
                .iter()
                .cloned()
                .zip(refs.iter().cloned())
                .collect();
            let em = metrics::em_accuracy(&pairs_streams)?;
            let (ld_avg, ld_leq5) = metrics::ld_stats(&pairs_streams, 5)?;
            let bleu = metrics::bleu(&preds, &refs)?;
            let report = MetricReport {
                em,
                ld_avg,
                ld_leq5,
                bleu,
                count: preds.len(),
            };
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            write_text(output, &format!("{json}\n"))
        }
        (Some(dir), None) => {
            require_exists(dir)?;
            let bundle = ModelBundle::load(dir)?;
            let report = back_translation_eval(&bundle, &pairs, beam)?;
            if let Some(path) = records {
                report.save_records(path)?;
            }
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            write_text(output, &format!("{json}\n"))
        }
        (None, None) => Err(CliError::Usage(
            "either --bundle or --predictions is required".into(),
        )),
    }
}

fn cmd_roundtrip(
    bundle_dir: &Path,
    input: &Path,
    converter: &str,
    output: Option<&Path>,
    records: Option<&Path>,
    beam: usize,
) -> CliResult {
    require_exists(bundle_dir)?;
    require_exists(input)?;
    let bundle = ModelBundle::load(bundle_dir)?;
    let pairs = corpus::load_corpus(input)?;
    let mut identity = IdentityConverter;
    let mut subprocess;
    let conv: &mut dyn ExternalConverter = if converter == "identity" {
        &mut identity
    } else {
        let parts: Vec<String> = converter.split_whitespace().map(String::from).collect();
        let (program, args) = parts
            .split_first()
            .ok_or_else(|| CliError::Usage("empty converter command".into()))?;
        subprocess = SubprocessConverter::spawn(program, args)?;
        &mut subprocess
    };
    let report = round_trip_eval(&bundle, conv, &pairs, beam)?;
    if let Some(path) = records {
        report.save_records(path)?;
    }
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(output, &format!("{json}\n"))
}

/// A parsed grid entry `C<state>[ks<kernel>]x<layers>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct GridEntry {
    name: String,
    state_size: usize,
    kernel_size: usize,
    num_layers: usize,
}

fn parse_grid_entry(entry: &str) -> Result<GridEntry, CliError> {
    let usage = || {
        CliError::Usage(format!(
            "malformed grid entry {entry:?} (expected C<state>[ks<kernel>]x<layers>)"
        ))
    };
    if entry.contains('-') {
        return Err(CliError::Usage(format!(
            "grid entry {entry:?} mixes state sizes; a single model uses one state size \
             throughout"
        )));
    }
    let rest = entry.strip_prefix('C').ok_or_else(usage)?;
    let digits_end = rest.find(|c: char| !c.is_ascii_digit()).ok_or_else(usage)?;
    let state_size: usize = rest[..digits_end].parse().map_err(|_| usage())?;
    let rest = &rest[digits_end..];
    let (kernel_size, rest) = match rest.strip_prefix("ks") {
        None => (3usize, rest),
        Some(r) => {
            let end = r.find(|c: char| !c.is_ascii_digit()).ok_or_else(usage)?;
            (r[..end].parse().map_err(|_| usage())?, &r[end..])
        }
    };
    let layers_str = rest.strip_prefix('x').ok_or_else(usage)?;
    if layers_str.is_empty() || !layers_str.chars().all(|c| c.is_ascii_digit()) {
        return Err(usage());
    }
    let num_layers: usize = layers_str.parse().map_err(|_| usage())?;
    if state_size == 0 || kernel_size == 0 || num_layers == 0 {
        return Err(usage());
    }
    Ok(GridEntry {
        name: entry.to_string(),
        state_size,
        kernel_size,
        num_layers,
    })
}

fn cmd_ablate(
    grid: &Path,
    data_dir: &Path,
    epochs: usize,
    seed: u64,
    batch_tokens: usize,
    output: Option<&Path>,
) -> CliResult {
    require_exists(grid)?;
    require_exists(data_dir)?;
    // parse and validate the whole grid before any training
    let mut entries: Vec<GridEntry> = Vec::new();
    for line in read_lines(grid)? {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let entry = parse_grid_entry(line)?;
        if entries.contains(&entry) {
            eprintln!("warning: duplicate grid entry {line} ignored");
            continue;
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(CliError::Usage("grid file contains no entries".into()));
    }

    let source_vocab = Vocabulary::load(&data_dir.join("source.vocab"))?;
    let target_vocab = Vocabulary::load(&data_dir.join("target.vocab"))?;
    let train_set = load_encoded(&data_dir.join("train.jsonl"))?;
    let valid_set = load_encoded(&data_dir.join("valid.jsonl"))?;

    let mut table = String::from("configuration\tvalid_em\tparameters\n");
    for entry in &entries {
        let model_config = ModelConfig {
            state_size: entry.state_size,
            num_layers: entry.num_layers,
            kernel_size: entry.kernel_size,
            dropout_rate: 0.0,
            label_smoothing: 0.1,
            max_positions: ModelConfig::default().max_positions,
            source_vocab_size: source_vocab.size(),
            target_vocab_size: target_vocab.size(),
            seed,
        };
        let model: Model<f32> = init_model(&model_config)?;
        let num_params = model.num_parameters();
        let train_config = TrainConfig {
            max_epochs: epochs,
            patience: epochs,
            max_tokens_per_batch: batch_tokens,
            seed,
            ..TrainConfig::default()
        };
        let outcome = train(model, &train_set, &valid_set, &train_config, None)?;
        let best_em = outcome
            .history
            .iter()
            .map(|r| r.valid_em)
            .fold(f64::NEG_INFINITY, f64::max);
        table.push_str(&format!("{}\t{best_em:.4}\t{num_params}\n", entry.name));
    }
    write_text(output, &table)
}

// exercised further by the integration tests driving the binary
#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_entry_parsing() {
        assert_eq!(
            parse_grid_entry("C512ks3x11").unwrap(),
            GridEntry {
                name: "C512ks3x11".into(),
                state_size: 512,
                kernel_size: 3,
                num_layers: 11,
            }
        );
        let default_kernel = parse_grid_entry("C256x4").unwrap();
        assert_eq!(default_kernel.kernel_size, 3);
        assert_eq!(default_kernel.state_size, 256);
        assert_eq!(default_kernel.num_layers, 4);
        assert!(parse_grid_entry("C512x4-C1024x8").is_err());
        assert!(parse_grid_entry("512x4").is_err());
        assert!(parse_grid_entry("Cx4").is_err());
        assert!(parse_grid_entry("C512ksx4").is_err());
        assert!(parse_grid_entry("C512x").is_err());
        assert!(parse_grid_entry("C0x4").is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let err = toml::from_str::<FileConfig>("[model]\nstate_sise = 4\n");
        assert!(err.is_err());
        let ok = toml::from_str::<FileConfig>("[model]\nstate_size = 4\n[train]\npatience = 2\n");
        assert!(ok.is_ok());
    }
}
