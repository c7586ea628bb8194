use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use kehnn_core::checkpoint;
use kehnn_core::eval::{
    accuracy, build_groups, length_bucket_report, recall_at_k, subsample_pairs, AblationRow,
    DEFAULT_BUCKET_BOUNDS,
};
use kehnn_core::knowledge::{load_knowledge_defs, KnowledgeDef};
use kehnn_core::matcher::{predict, EncodedExample, ModelParams};
use kehnn_core::text::{load_dataset, DatasetRecord, Vocabulary};
use kehnn_core::trainer::{
    self, encode_dataset, prepare, train, EpochStats, MetricKind, TrainConfig,
};
use kehnn_core::Real;

#[derive(Parser)]
#[command(
    name = "kehnn",
    about = "Knowledge-enhanced hybrid neural network for text matching",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint plus a history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        /// GloVe-style text embeddings; omitted rows start random.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// JSON-lines knowledge definitions ({"key", "words": [..]}).
        #[arg(long)]
        knowledge: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// accuracy or recall
        #[arg(long)]
        metric: String,
        /// Candidates per group for recall.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Comma-separated cutoffs, e.g. 1,2,5.
        #[arg(long, default_value = "1,2,5", value_delimiter = ',')]
        k: Vec<usize>,
        /// Optional JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write one score distribution per input line as TSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences on a small
    /// synthetic instance of the configured model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Accuracy (or R_2@1) split by combined pair length.
    Buckets {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated bucket boundaries.
        #[arg(long, value_delimiter = ',')]
        bounds: Option<Vec<usize>>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and compare {only M1, only M2, only M3, full}.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        knowledge: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    kehnn_core::configure_threads();
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            train: train_path,
            valid,
            embeddings,
            knowledge,
            out,
        } => cmd_train(&config, &train_path, &valid, embeddings, knowledge, &out),
        Command::Eval {
            model,
            data,
            metric,
            n,
            k,
            report,
        } => cmd_eval(&model, &data, &metric, n, &k, report),
        Command::Predict { model, data, out } => cmd_predict(&model, &data, &out),
        Command::Gradcheck { config, eps } => cmd_gradcheck(&config, eps),
        Command::Buckets {
            model,
            data,
            bounds,
            report,
        } => cmd_buckets(&model, &data, bounds, report),
        Command::Ablation {
            config,
            train,
            valid,
            test,
            knowledge,
            embeddings,
            report,
        } => cmd_ablation(
            &config, &train, &valid, &test, knowledge, embeddings, report,
        ),
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut config: TrainConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(seed) = kehnn_core::env_seed() {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_defs(path: &Option<PathBuf>) -> Result<Vec<KnowledgeDef>> {
    match path {
        Some(p) => Ok(load_knowledge_defs(p)?),
        None => Ok(Vec::new()),
    }
}

fn cmd_train(
    config_path: &Path,
    train_path: &Path,
    valid_path: &Path,
    embeddings: Option<PathBuf>,
    knowledge: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let config = load_config(config_path)?;
    let train_records = load_dataset(train_path, config.c)?;
    let valid_records = load_dataset(valid_path, config.c)?;
    let defs = load_defs(&knowledge)?;

    let prepared = prepare(
        config,
        &train_records,
        &valid_records,
        &defs,
        embeddings.as_deref(),
    )?;
    let vocab = prepared.vocab.clone();
    eprintln!(
        "vocab {} tokens, {} knowledge keys, {} train / {} valid examples",
        vocab.len(),
        prepared.params.knowledge_keys().len(),
        prepared.train.len(),
        prepared.valid.len()
    );

    let outcome = train(prepared.params, &prepared.train, &prepared.valid)?;

    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let ckpt_path = out.join("best.ckpt");
    checkpoint::save(&ckpt_path, &outcome.params, &vocab)?;
    write_history(&out.join("history.csv"), &outcome.history)?;

    println!("epoch\ttrain_loss\tvalid_metric");
    for row in &outcome.history {
        println!(
            "{}\t{:.6}\t{:.6}",
            row.epoch, row.train_loss, row.valid_metric
        );
    }
    eprintln!(
        "best epoch {} (metric {:.6}); checkpoint at {}",
        outcome.best_epoch,
        outcome.best_metric,
        ckpt_path.display()
    );
    Ok(())
}

fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "epoch,train_loss,valid_metric,elapsed_seconds")?;
    for row in history {
        writeln!(
            f,
            "{},{},{},{:.3}",
            row.epoch, row.train_loss, row.valid_metric, row.elapsed_seconds
        )?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelParams, Vocabulary)> {
    Ok(checkpoint::load(path)?)
}

fn score_dataset(
    params: &ModelParams,
    vocab: &Vocabulary,
    records: &[DatasetRecord],
) -> Result<(Vec<EncodedExample>, Vec<Vec<Real>>)> {
    let examples = encode_dataset(params, vocab, records);
    let mut probs = Vec::with_capacity(examples.len());
    for ex in &examples {
        probs.push(predict(params, ex)?);
    }
    Ok((examples, probs))
}

fn cmd_eval(
    model: &Path,
    data: &Path,
    metric: &str,
    n: usize,
    ks: &[usize],
    report: Option<PathBuf>,
) -> Result<()> {
    let (params, vocab) = load_model(model)?;
    let records = load_dataset(data, params.config.c)?;
    let (examples, probs) = score_dataset(&params, &vocab, &records)?;

    let mut rows: Vec<(String, f64)> = Vec::new();
    match metric {
        "accuracy" => {
            let preds: Vec<usize> = probs.iter().map(|p| trainer::argmax(p)).collect();
            let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
            rows.push(("accuracy".into(), accuracy(&preds, &labels)?));
        }
        "recall" => {
            let scores: Vec<f64> = probs.iter().map(|p| p[1] as f64).collect();
            let positives: Vec<bool> = examples.iter().map(|e| e.label == 1).collect();
            let groups = build_groups(&scores, &positives, n)?;
            for &k in ks {
                rows.push((format!("R_{n}@{k}"), recall_at_k(&groups, k)?));
            }
            if n > 2 {
                let pairs = subsample_pairs(&groups, params.config.seed)?;
                rows.push(("R_2@1".into(), recall_at_k(&pairs, 1)?));
            }
        }
        other => bail!("unknown metric {other:?}: expected accuracy or recall"),
    }

    println!("metric\tvalue");
    for (name, value) in &rows {
        println!("{name}\t{value:.6}");
    }
    if let Some(path) = report {
        let json: serde_json::Value = rows
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect::<serde_json::Map<_, _>>()
            .into();
        std::fs::write(&path, serde_json::to_string_pretty(&json)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_predict(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let (params, vocab) = load_model(model)?;
    let records = load_dataset(data, params.config.c)?;
    let (_, probs) = score_dataset(&params, &vocab, &records)?;
    let mut f = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    for dist in probs {
        let line: Vec<String> = dist.iter().map(|p| format!("{p:.10}")).collect();
        writeln!(f, "{}", line.join("\t"))?;
    }
    eprintln!("wrote {} distributions to {}", records.len(), out.display());
    Ok(())
}

/// Threshold on the max relative error for a passing gradient check.
const GRADCHECK_TOLERANCE: f64 = 1e-3;

fn cmd_gradcheck(config_path: &Path, eps: f64) -> Result<()> {
    let config = load_config(config_path)?;
    let report = trainer::synthetic_gradcheck(config, eps)?;

    println!("parameter\tmax_rel_error");
    for (name, err) in &report.per_param {
        println!("{name}\t{err:.3e}");
    }
    if let Some(worst) = &report.worst {
        eprintln!(
            "worst: {}[{}] analytic {:.6e} vs numeric {:.6e}",
            worst.param, worst.index, worst.analytic, worst.numeric
        );
    }
    println!("max\t{:.3e}", report.max_rel_error);
    if report.max_rel_error > GRADCHECK_TOLERANCE {
        bail!(
            "gradient check failed: {:.3e} > {GRADCHECK_TOLERANCE:.0e}",
            report.max_rel_error
        );
    }
    Ok(())
}

fn cmd_buckets(
    model: &Path,
    data: &Path,
    bounds: Option<Vec<usize>>,
    report: Option<PathBuf>,
) -> Result<()> {
    let (params, vocab) = load_model(model)?;
    let records = load_dataset(data, params.config.c)?;
    let examples = encode_dataset(&params, &vocab, &records);
    let bounds = bounds.unwrap_or_else(|| DEFAULT_BUCKET_BOUNDS.to_vec());
    let bucket_report = length_bucket_report(&params, &examples, &bounds)?;

    println!("bucket\tcount\t{}", bucket_report.metric_name);
    for b in &bucket_report.buckets {
        let range = match b.hi {
            Some(hi) => format!("[{},{})", b.lo, hi),
            None => format!("[{},inf)", b.lo),
        };
        match b.metric {
            Some(m) => println!("{range}\t{}\t{m:.6}", b.count),
            None => println!("{range}\t{}\tn/a", b.count),
        }
    }
    if let Some(path) = report {
        std::fs::write(&path, serde_json::to_string_pretty(&bucket_report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_ablation(
    config_path: &Path,
    train_path: &Path,
    valid_path: &Path,
    test_path: &Path,
    knowledge: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<()> {
    let config = load_config(config_path)?;
    let train_records = load_dataset(train_path, config.c)?;
    let valid_records = load_dataset(valid_path, config.c)?;
    let test_records = load_dataset(test_path, config.c)?;
    let defs = load_defs(&knowledge)?;

    let metric_name = match config.metric {
        MetricKind::Accuracy => "accuracy",
        MetricKind::Recall => "R_n@1",
    };
    let rows = kehnn_core::eval::ablation_report(
        &config,
        &train_records,
        &valid_records,
        &test_records,
        &defs,
        embeddings.as_deref(),
    );

    println!("variant\t{metric_name}");
    let mut json_rows = Vec::new();
    for AblationRow { variant, outcome } in &rows {
        match outcome {
            Ok(metric) => {
                println!("{variant}\t{metric:.6}");
                json_rows.push(serde_json::json!({
                    "variant": variant.to_string(),
                    "metric": metric,
                }));
            }
            Err(err) => {
                println!("{variant}\tfailed: {err}");
                json_rows.push(serde_json::json!({
                    "variant": variant.to_string(),
                    "error": err.to_string(),
                }));
            }
        }
    }
    if let Some(path) = report {
        std::fs::write(&path, serde_json::to_string_pretty(&json_rows)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
