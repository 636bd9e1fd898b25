use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use seqlab::corpus::{
    build_vocab, dataset_stats, load_conll, load_pretrained_embeddings, Columns, RawSentence,
    DOCSTART,
};
use seqlab::eval::{Counts, Metric, MetricResult};
use seqlab::train::{
    load_model, save_model, train, Architecture, EpochRecord, MetricKind, Model, ModelConfig,
    TrainReport,
};

use crate::tsv::{gate_rows, render_gates, table};
use crate::{
    CountParamsArgs, DatasetStatsArgs, EvaluateArgs, InspectGatesArgs, TagArgs, TrainArgs,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.bin";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_JSON: &str = "report.json";
/// Present in an output directory whose run did not finish; holds the error.
pub const FAILED_MARKER: &str = "FAILED";

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ModelConfig,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub report: TrainReport,
    pub model_path: PathBuf,
}

/// Reads a key-value config file (or starts from defaults) and applies
/// `KEY=VALUE` overrides in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ModelConfig> {
    let mut config = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            ModelConfig::from_kv(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => ModelConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{o}` is not KEY=VALUE"))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn report_header(with_aux: bool, metric: MetricKind) -> String {
    let mut cols = vec!["epoch", "train_loss"];
    if with_aux {
        cols.push("aux_loss");
    }
    let dev = format!("dev_{metric}");
    cols.extend([dev.as_str(), "seconds", "rejected_steps"]);
    cols.join("\t") + "\n"
}

fn report_line(r: &EpochRecord) -> String {
    let mut cols = vec![r.epoch.to_string(), r.train_loss.to_string()];
    if let Some(a) = r.aux_loss {
        cols.push(a.to_string());
    }
    cols.extend([
        r.dev_metric.to_string(),
        format!("{:.3}", r.seconds),
        r.rejected_steps.to_string(),
    ]);
    cols.join("\t") + "\n"
}

/// Writes the manifest, trains, then writes the model and reports. A run
/// that fails after the output directory exists leaves a `FAILED` file
/// there holding the error message.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let mut config = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(a) = &args.arch {
        config.architecture = a.parse()?;
    }
    if let Some(o) = &args.output {
        config.output = o.parse()?;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let marker = args.out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).with_context(|| format!("removing {}", marker.display()))?;
    }
    let manifest = RunManifest {
        version: format!("seqlab {}", env!("CARGO_PKG_VERSION")),
        seed: config.seed,
        config,
        train: args.train.clone(),
        dev: args.dev.clone(),
        out_dir: args.out.clone(),
    };
    write_file(
        &args.out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    match run_training(&manifest) {
        Ok(o) => Ok(o),
        Err(e) => {
            let _ = fs::write(&marker, format!("{e:#}\n"));
            Err(e)
        }
    }
}

fn run_training(manifest: &RunManifest) -> Result<TrainOutcome> {
    let config = &manifest.config;
    let out = &manifest.out_dir;
    let train_raw = load_conll(&manifest.train, config.columns())?;
    let dev_raw = load_conll(&manifest.dev, config.columns())?;
    let vocab = build_vocab(&train_raw, config.min_count)
        .with_context(|| format!("building vocabulary from {}", manifest.train.display()))?;
    let train_set = vocab.encode_all(&train_raw)?;
    let dev_set = vocab.encode_all(&dev_raw)?;
    info!(
        "{} training sentences, {} words, {} characters, {} labels",
        train_set.len(),
        vocab.num_words(),
        vocab.num_chars(),
        vocab.labels().len()
    );

    let pretrained = match &config.embeddings {
        Some(path) => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
            let e = load_pretrained_embeddings(path, &vocab, config.word_dim, &mut rng)?;
            info!("pretrained vectors found for {} of {} words", e.found, vocab.num_words());
            Some(e.matrix)
        }
        None => None,
    };
    let mut model = Model::<f32>::assemble(config, &vocab, pretrained)?;

    let tsv_path = out.join(REPORT_TSV);
    let mut tsv = fs::File::create(&tsv_path)
        .with_context(|| format!("writing {}", tsv_path.display()))?;
    let with_aux = config.architecture == Architecture::Attention;
    tsv.write_all(report_header(with_aux, config.metric).as_bytes())?;
    let mut io_err = None;
    let report = train(&mut model, &train_set, &dev_set, |r| {
        if let Err(e) = tsv.write_all(report_line(r).as_bytes()).and_then(|_| tsv.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", tsv_path.display()));
    }

    let model_path = out.join(MODEL_FILE);
    save_model(&model, &model_path)?;
    let counts = model.count_parameters();
    let json = serde_json::json!({
        "metric": config.metric.to_string(),
        "parameters": { "total": counts.total, "noemb": counts.noemb },
        "report": report,
    });
    write_file(&out.join(REPORT_JSON), serde_json::to_string_pretty(&json)? + "\n")?;
    info!(
        "best epoch {} (dev {:.4}), stopped after {}",
        report.best_epoch, report.best_dev_metric, report.stopped_epoch
    );
    Ok(TrainOutcome {
        manifest: manifest.clone(),
        report,
        model_path,
    })
}

fn metric_row(m: &MetricResult) -> (Vec<&'static str>, Vec<String>) {
    let mut header = vec!["metric", "value"];
    let mut row = vec![m.name.clone(), m.value.to_string()];
    match m.counts {
        Counts::Accuracy { correct, total } => {
            header.extend(["correct", "total"]);
            row.extend([correct.to_string(), total.to_string()]);
        }
        Counts::Prf {
            tp,
            fp,
            fn_,
            precision,
            recall,
        } => {
            header.extend(["tp", "fp", "fn", "precision", "recall"]);
            row.extend([
                tp.to_string(),
                fp.to_string(),
                fn_.to_string(),
                precision.to_string(),
                recall.to_string(),
            ]);
        }
    }
    header.push("degenerate");
    row.push(m.degenerate.to_string());
    (header, row)
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.model)?;
    let config = model.config();
    let raw = load_conll(&args.data, config.columns())?;
    let metric = match &args.metric {
        None => config.eval_metric(),
        Some(m) => match m.parse::<MetricKind>()? {
            MetricKind::Accuracy => Metric::Accuracy,
            MetricKind::SpanF1 => Metric::SpanF1,
            MetricKind::FHalf => Metric::FHalf {
                positive: args
                    .positive
                    .clone()
                    .unwrap_or_else(|| config.positive_label.clone()),
            },
        },
    };
    let mut gold = Vec::with_capacity(raw.len());
    let mut pred = Vec::with_capacity(raw.len());
    for r in &raw {
        let s = model.vocab.encode(r)?;
        pred.push(model.predict_labels(&s)?);
        gold.push(r.labels.clone());
    }
    let result = metric.evaluate(&gold, &pred)?;
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&result)?)?;
    } else {
        let (header, row) = metric_row(&result);
        out.write_all(table(&header, &[row]).as_bytes())?;
    }
    Ok(())
}

/// Token-line positions of each sentence in `lines`, mirroring the corpus
/// reader: blank lines end sentences and document markers are skipped.
fn sentence_lines(lines: &[&str]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        match line.split_whitespace().next() {
            None => {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
            }
            Some(DOCSTART) => {}
            Some(_) => current.push(i),
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn token_sentences(
    lines: &[&str],
    column: usize,
    path: &Path,
) -> Result<(Vec<Vec<usize>>, Vec<RawSentence>)> {
    let groups = sentence_lines(lines);
    let mut raws = Vec::with_capacity(groups.len());
    for g in &groups {
        let tokens = g
            .iter()
            .map(|&i| {
                lines[i]
                    .split_whitespace()
                    .nth(column)
                    .map(str::to_string)
                    .ok_or_else(|| {
                        anyhow!("{}:{}: no token in column {column}", path.display(), i + 1)
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        raws.push(RawSentence {
            tokens,
            labels: Vec::new(),
        });
    }
    Ok((groups, raws))
}

/// Appends a tab and the predicted label to every token line; all other
/// bytes are copied unchanged.
pub fn cmd_tag(args: &TagArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = load_model(&args.model)?;
    let text = read_text(&args.input)?;
    let chunks: Vec<&str> = text.split_inclusive('\n').collect();
    let lines: Vec<&str> = chunks
        .iter()
        .map(|c| c.trim_end_matches('\n').trim_end_matches('\r'))
        .collect();
    let (groups, raws) = token_sentences(&lines, model.config().token_column, &args.input)?;
    let mut labels: Vec<Option<String>> = vec![None; lines.len()];
    for (g, r) in groups.iter().zip(&raws) {
        let s = model.vocab.encode(r)?;
        for (&i, l) in g.iter().zip(model.predict_labels(&s)?) {
            labels[i] = Some(l);
        }
    }
    let mut out = String::with_capacity(text.len() + lines.len() * 8);
    for ((chunk, line), label) in chunks.iter().zip(&lines).zip(&labels) {
        match label {
            Some(l) => {
                out.push_str(line);
                out.push('\t');
                out.push_str(l);
                out.push_str(&chunk[line.len()..]);
            }
            None => out.push_str(chunk),
        }
    }
    match &args.out {
        Some(p) => write_file(p, out),
        None => stdout.write_all(out.as_bytes()).map_err(Into::into),
    }
}

pub fn cmd_inspect_gates(args: &InspectGatesArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    if model.config().architecture != Architecture::Attention {
        bail!(
            "{}: model architecture is `{}`; gate values exist only for `attention` models",
            args.model.display(),
            model.config().architecture
        );
    }
    let text = read_text(&args.input)?;
    let lines: Vec<&str> = text.lines().collect();
    let (_, raws) = token_sentences(&lines, model.config().token_column, &args.input)?;
    let sentences = model.vocab.encode_all(&raws)?;
    let rows = gate_rows(&model, &sentences)?;
    write_file(&args.out, render_gates(&rows, model.config().word_dim))
}

pub fn cmd_count_params(args: &CountParamsArgs, out: &mut dyn Write) -> Result<()> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let raw = load_conll(&args.vocab_from, config.columns())?;
    let vocab = build_vocab(&raw, config.min_count)?;
    let archs = if args.arch.is_empty() {
        vec![config.architecture]
    } else {
        args.arch
            .iter()
            .map(|a| a.parse())
            .collect::<seqlab::Result<Vec<Architecture>>>()?
    };
    let mut rows = Vec::new();
    let mut json = Vec::new();
    for arch in archs {
        let c = ModelConfig {
            architecture: arch,
            ..config.clone()
        };
        let counts = Model::<f32>::assemble(&c, &vocab, None)?.count_parameters();
        rows.push(vec![
            arch.to_string(),
            c.output.to_string(),
            counts.total.to_string(),
            counts.noemb.to_string(),
        ]);
        json.push(serde_json::json!({
            "architecture": arch.to_string(),
            "output": c.output.to_string(),
            "total": counts.total,
            "noemb": counts.noemb,
        }));
    }
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&json)?)?;
    } else {
        out.write_all(table(&["architecture", "output", "total", "noemb"], &rows).as_bytes())?;
    }
    Ok(())
}

pub fn cmd_dataset_stats(args: &DatasetStatsArgs, out: &mut dyn Write) -> Result<()> {
    let columns = Columns {
        token: args.token_column,
        label: args.label_column,
    };
    let load = |p: &Option<PathBuf>| -> Result<Option<Vec<RawSentence>>> {
        p.as_ref().map(|p| load_conll(p, columns)).transpose().map_err(Into::into)
    };
    let train = load_conll(&args.data, columns)?;
    let dev = load(&args.dev)?;
    let test = load(&args.test)?;
    let name = args.name.clone().unwrap_or_else(|| {
        args.data
            .file_name()
            .map_or_else(|| args.data.display().to_string(), |n| n.to_string_lossy().into_owned())
    });
    let stats = dataset_stats(
        &name,
        &args.task,
        &train,
        dev.as_deref().unwrap_or_default(),
        test.as_deref().unwrap_or_default(),
    );
    let split = |present: bool, n: usize| present.then_some(n);
    let dev_tokens = split(dev.is_some(), stats.dev_tokens);
    let test_tokens = split(test.is_some(), stats.test_tokens);
    if args.json {
        let json = serde_json::json!({
            "dataset": stats.name,
            "task": stats.task,
            "labels": stats.labels,
            "train_tokens": stats.train_tokens,
            "dev_tokens": dev_tokens,
            "test_tokens": test_tokens,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&json)?)?;
    } else {
        let opt = |n: Option<usize>| n.map_or_else(|| "-".to_string(), |n| n.to_string());
        let row = vec![
            stats.name.clone(),
            stats.task.clone(),
            stats.labels.to_string(),
            stats.train_tokens.to_string(),
            opt(dev_tokens),
            opt(test_tokens),
        ];
        out.write_all(
            table(
                &["dataset", "task", "labels", "train_tokens", "dev_tokens", "test_tokens"],
                &[row],
            )
            .as_bytes(),
        )?;
    }
    Ok(())
}
