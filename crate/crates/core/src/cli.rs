//! Command-line front end: argument types and the command implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::config::{DatasetKind, RunConfig};
use crate::container::Container;
use crate::data::{self, load_csv, load_m4, GlobalScaler, M4Collection, M4Group, SeriesDataset, Splits, WindowSpec};
use crate::error::{Error, Result};
use crate::matching::{average_maps, word_relevance, PrincipalEmbeddings, WordEmbeddingDict};
use crate::metrics::MetricReport;
use crate::model::CalfModel;
use crate::tensor::{Tape, Tensor};
use crate::train::{evaluate, evaluate_m4, fit, FitSummary, M4Windows, Samples, SeriesWindows, Trainer};

#[derive(Debug, Parser)]
#[command(name = "calf", version, about = "Cross-modal fine-tuning of a frozen language-model backbone for forecasting")]
pub struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; computation is single-threaded, so only 1 is honoured.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract principal word embeddings from a backbone's token table.
    PcaExtract(PcaArgs),
    /// Train one model per configured horizon.
    Train(TrainArgs),
    /// Evaluate checkpoints on the configured dataset's test split.
    Eval(EvalArgs),
    /// Evaluate checkpoints on a different dataset without training.
    ZeroShot(ZeroShotArgs),
    /// Export cross-attention maps, word relevance and branch features.
    ExportAttention(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Train on this leading fraction of the training split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub no_feature_loss: bool,
    #[arg(long)]
    pub no_output_loss: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoints to evaluate; defaults to `model_h{H}.calf` in the output directory.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub eval_dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to draw the window from; defaults to the configured one.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated words, or a file with one word per line.
    #[arg(long)]
    pub words: Option<String>,
    /// JSON object mapping token strings to ids.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Index of the test-split window to export.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::usage(format!("device `{}` is not supported; only cpu", cli.device)));
    }
    if cli.threads != 1 {
        log::warn!("--threads {} ignored: execution is single-threaded", cli.threads);
    }
    match cli.command {
        Command::PcaExtract(a) => pca_extract(&a),
        Command::Train(a) => {
            let mut cfg = load_config(&a.run, cli.seed)?;
            if let Some(f) = a.train_fraction {
                cfg.train_fraction = f;
            }
            if a.no_feature_loss {
                cfg.enable_feature = false;
            }
            if a.no_output_loss {
                cfg.enable_output = false;
            }
            train(&cfg).map(|_| ())
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.run, cli.seed)?;
            let report = eval(&cfg, &a.checkpoint, None)?;
            write_report(&cfg.output_dir, "eval", &report)
        }
        Command::ZeroShot(a) => {
            let cfg = load_config(&a.run, cli.seed)?;
            log::info!("zero-shot on {}: optimizer steps: 0", a.eval_dataset.display());
            let report = eval(&cfg, &a.checkpoint, Some(&a.eval_dataset))?;
            println!("optimizer steps: 0");
            write_report(&cfg.output_dir, "zero_shot", &report)
        }
        Command::ExportAttention(a) => {
            let cfg = load_config(&a.run, cli.seed)?;
            export_attention(&cfg, &a)
        }
    }
}

fn load_config(args: &RunArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn pca_extract(a: &PcaArgs) -> Result<()> {
    let container = Container::load(&a.weights)?;
    let table: Tensor<f64> = container.get("token_embedding")?;
    if table.rank() != 2 {
        return Err(Error::config(format!("token_embedding has shape {:?}", table.shape())));
    }
    let dict = WordEmbeddingDict::new(table, None)?;
    let limit = dict.vocab_size().min(dict.width());
    let d = if a.d > limit {
        log::warn!("--d {} exceeds min(vocab, width) = {limit}; clamping", a.d);
        limit
    } else {
        a.d
    };
    let p = PrincipalEmbeddings::extract(&dict, d)?;
    p.save(&a.out)?;
    let total: f64 = p.variances.iter().sum::<f64>() / p.explained_variance_ratio.max(f64::MIN_POSITIVE);
    println!("explained_variance_ratio = {:.6}", p.explained_variance_ratio);
    println!("component,variance,cumulative_evr");
    let mut cum = 0.0;
    for (i, v) in p.variances.iter().enumerate() {
        cum += v;
        println!("{},{v:.6e},{:.6}", i + 1, cum / total);
    }
    Ok(())
}

/// Backbone and principal rows shared by every horizon of a run.
fn prepare(cfg: &RunConfig) -> Result<(Backbone<f32>, PrincipalEmbeddings)> {
    let bcfg = cfg.backbone_config();
    let backbone = match &cfg.weights {
        Some(path) => {
            let (b, report) = Backbone::load(path, bcfg)?;
            log::info!("backbone loaded from {} ({} unused tensors)", path.display(), report.unused.len());
            b
        }
        None => {
            log::info!("no backbone weights configured; using a random backbone (seed {})", cfg.seed);
            Backbone::random(bcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
        }
    };
    let principal = match &cfg.principal {
        Some(path) => PrincipalEmbeddings::load(path)?,
        None => {
            let dict = WordEmbeddingDict::from_backbone(&backbone);
            let limit = dict.vocab_size().min(dict.width());
            let d = cfg.principal_dim.min(limit);
            if d < cfg.principal_dim {
                log::warn!("principal_dim {} clamped to {d}", cfg.principal_dim);
            }
            PrincipalEmbeddings::extract(&dict, d)?
        }
    };
    log::info!(
        "principal embeddings: d={} explained_variance_ratio={:.4}",
        principal.dim(),
        principal.explained_variance_ratio
    );
    Ok((backbone, principal))
}

/// Splits a CSV dataset; with `global_scale` every split is z-scored with
/// statistics of the full training split.
fn csv_splits(cfg: &RunConfig, path: &Path, window: &WindowSpec) -> Result<Splits> {
    let ds = load_csv(path)?;
    let spec = cfg.split_spec();
    let ds = if cfg.global_scale {
        let full = data::split(&ds, &crate::data::SplitSpec { few_shot_fraction: 1.0, ..spec }, window)?;
        GlobalScaler::fit(&full.train).transform(&ds)?
    } else {
        ds
    };
    data::split(&ds, &spec, window)
}

fn m4_collections(cfg: &RunConfig) -> Result<Vec<M4Collection>> {
    let group: M4Group = cfg.m4_frequency.parse()?;
    load_m4(&cfg.dataset, group)
}

fn checkpoint_name(h: usize) -> String {
    format!("model_h{h}.calf")
}

/// Trains every configured horizon, writing checkpoints, step logs, the
/// resolved config and the test metrics into the output directory.
pub fn train(cfg: &RunConfig) -> Result<MetricReport> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.resolved"), cfg.to_text())?;
    let (backbone, principal) = prepare(cfg)?;
    let weights = cfg.loss_weights();
    let sim = cfg.sim_spec();
    log::info!("losses: sup={} feature={} output={}", sim.sup, sim.feature, sim.output);
    let mut report = MetricReport::new();

    match cfg.dataset_kind {
        DatasetKind::Csv => {
            for &h in &cfg.horizons {
                let window = cfg.window(h)?;
                let splits = csv_splits(cfg, &cfg.dataset, &window)?;
                let line = format!(
                    "training rows: {} of {} (train_fraction={})",
                    splits.train.len(),
                    splits.full_train_len,
                    cfg.train_fraction
                );
                log::info!("{line}");
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut model =
                    CalfModel::new(cfg.model_config(cfg.input_len, h), backbone.clone(), &principal, &mut rng)?;
                let mut trainer = Trainer::new(cfg.train_config(1), weights, sim)?;
                let train_w = SeriesWindows { view: &splits.train, spec: window };
                let val_w = SeriesWindows { view: &splits.val, spec: window };
                let summary = fit(&mut model, &mut trainer, &train_w, Some(&val_w as &dyn Samples<f32>))?;
                write_train_log(&cfg.output_dir, h, &line, &summary)?;
                model.save(cfg.output_dir.join(checkpoint_name(h)))?;
                report.merge(evaluate(&model, &splits.test, cfg.input_len, cfg.eval_batch_size)?);
            }
        }
        DatasetKind::M4 => {
            for coll in m4_collections(cfg)? {
                let h = coll.horizon();
                let line = format!("training series: {} ({} skipped)", coll.series.len(), coll.skipped);
                log::info!("{line}");
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut model =
                    CalfModel::new(cfg.model_config(coll.input_len(), h), backbone.clone(), &principal, &mut rng)?;
                let mut trainer = Trainer::new(cfg.train_config(coll.frequency.seasonality()), weights, sim)?;
                let samples = M4Windows::new(&coll, cfg.m4_windows_per_series);
                let summary = fit(&mut model, &mut trainer, &samples, None)?;
                write_train_log(&cfg.output_dir, h, &line, &summary)?;
                model.save(cfg.output_dir.join(checkpoint_name(h)))?;
                report.merge(evaluate_m4(&model, &coll, None)?);
            }
        }
    }
    write_report(&cfg.output_dir, "metrics", &report)?;
    Ok(report)
}

fn write_train_log(dir: &Path, h: usize, header: &str, summary: &FitSummary) -> Result<()> {
    let mut s = format!("{header}\ntraining windows: {}\n", summary.train_windows);
    for r in &summary.reports {
        let _ = writeln!(s, "{r}");
    }
    for (i, v) in summary.val_mse.iter().enumerate() {
        let _ = writeln!(s, "epoch={} val_mse={v:.6}", i + 1);
    }
    let _ = writeln!(s, "optimizer steps: {}", summary.steps);
    fs::write(dir.join(format!("train_h{h}.log")), s)?;
    Ok(())
}

fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    print!("{report}");
    fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    fs::write(dir.join(format!("{stem}.txt")), report.to_string())?;
    Ok(())
}

/// Input length and horizon recorded in a checkpoint's tensor shapes.
fn checkpoint_dims(c: &Container) -> Result<(usize, usize)> {
    let dim = |name: &str, axis: usize| {
        c.stored(name)
            .and_then(|s| s.shape.get(axis).copied())
            .ok_or_else(|| Error::Manifest(name.to_string()))
    };
    Ok((dim("match.embed.weight", 0)?, dim("branch.temporal.head.weight", 1)?))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<CalfModel<f32>> {
    let c = Container::load(path)?;
    let (t, h) = checkpoint_dims(&c)?;
    CalfModel::from_container(&c, cfg.model_config(t, h))
}

fn checkpoints(cfg: &RunConfig, given: &[PathBuf]) -> Vec<PathBuf> {
    if !given.is_empty() {
        return given.to_vec();
    }
    match cfg.dataset_kind {
        DatasetKind::Csv => cfg.horizons.iter().map(|&h| cfg.output_dir.join(checkpoint_name(h))).collect(),
        DatasetKind::M4 => {
            let group: Option<M4Group> = cfg.m4_frequency.parse().ok();
            group
                .map(|g| g.frequencies().iter().map(|f| cfg.output_dir.join(checkpoint_name(f.horizon()))).collect())
                .unwrap_or_default()
        }
    }
}

/// Temporal-only evaluation of checkpoints on the configured dataset or
/// on `foreign`. No optimiser is constructed.
pub fn eval(cfg: &RunConfig, given: &[PathBuf], foreign: Option<&Path>) -> Result<MetricReport> {
    let mut report = MetricReport::new();
    let dataset = foreign.unwrap_or(&cfg.dataset);
    let m4 = if cfg.dataset_kind == DatasetKind::M4 && foreign.is_none() {
        Some(m4_collections(cfg)?)
    } else {
        None
    };
    for path in checkpoints(cfg, given) {
        let model = load_model(cfg, &path)?;
        let (t, h) = (model.config.input_len, model.config.horizon);
        let part = match &m4 {
            Some(colls) => {
                let coll = colls
                    .iter()
                    .find(|c| c.horizon() == h)
                    .ok_or_else(|| Error::config(format!("no M4 subset with horizon {h} for {}", path.display())))?;
                evaluate_m4(&model, coll, None)?
            }
            None => {
                let splits = csv_splits(cfg, dataset, &WindowSpec::new(t, h)?)?;
                evaluate(&model, &splits.test, t, cfg.eval_batch_size)?
            }
        };
        if model.textual.forward_count() != 0 {
            return Err(Error::Numeric("textual branch ran during evaluation".into()));
        }
        report.merge(part);
    }
    if report.entries.is_empty() {
        return Err(Error::usage("no checkpoints to evaluate"));
    }
    Ok(report)
}

fn read_words(spec: &str) -> Result<Vec<String>> {
    let p = Path::new(spec);
    let text = if p.is_file() { fs::read_to_string(p)? } else { spec.replace(',', "\n") };
    Ok(text.lines().map(str::trim).filter(|w| !w.is_empty()).map(str::to_string).collect())
}

fn export_attention(cfg: &RunConfig, a: &ExportArgs) -> Result<()> {
    let model = load_model(cfg, &a.checkpoint)?;
    let (t, h) = (model.config.input_len, model.config.horizon);
    let dataset = a.dataset.as_deref().unwrap_or(&cfg.dataset);
    let splits = csv_splits(cfg, dataset, &WindowSpec::new(t, h)?)?;
    let view: &SeriesDataset = &splits.test;
    let (x, _): (Tensor<f32>, Tensor<f32>) = data::batch(view, &WindowSpec::new(t, h)?, &[a.window])?;
    fs::create_dir_all(&a.out)?;

    let mut tape = Tape::new();
    let temporal = model.forward_temporal(&mut tape, &x)?;
    let textual = model.forward_textual(&mut tape, &temporal)?;
    let attn = average_maps(&tape, &textual.attention)?;
    let (c, d) = (attn.shape()[1], attn.shape()[2]);
    let mut s = String::from("channel");
    for k in 0..d {
        let _ = write!(s, ",pc{k}");
    }
    s.push('\n');
    for ch in 0..c {
        s.push_str(&view.channels[ch]);
        for k in 0..d {
            let _ = write!(s, ",{}", attn.get(&[0, ch, k]));
        }
        s.push('\n');
    }
    fs::write(a.out.join("attention.csv"), s)?;

    let x_time = tape.value(temporal.x_time).reshape(&[c, model.config.backbone.width])?;
    if let Some(spec) = &a.words {
        let words = read_words(spec)?;
        let vocab: serde_json::Map<String, serde_json::Value> = match &a.vocab {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::format(e.column() as u64, format!("vocab: {e}")))?,
            None => serde_json::Map::new(),
        };
        let mut ids = Vec::new();
        let mut found = Vec::new();
        let mut missing = Vec::new();
        for w in words {
            let id = vocab.get(&w).and_then(|v| v.as_u64()).or_else(|| w.strip_prefix('#').and_then(|n| n.parse().ok()));
            match id {
                Some(id) if (id as usize) < model.backbone.config.vocab_size => {
                    ids.push(id as usize);
                    found.push(w);
                }
                _ => missing.push(w),
            }
        }
        if !missing.is_empty() {
            log::warn!("words not in vocabulary, skipped: {}", missing.join(", "));
            println!("skipped words: {}", missing.join(", "));
        }
        if !ids.is_empty() {
            let dict = WordEmbeddingDict::from_backbone(&model.backbone);
            let rows: Tensor<f32> = dict.select(&ids)?.cast();
            let rel = word_relevance(&x_time, &rows, &model.matching, model.config.heads(), model.config.attention_scale)?;
            let mut s = String::from("channel");
            for w in &found {
                let _ = write!(s, ",{w}");
            }
            s.push('\n');
            for ch in 0..c {
                s.push_str(&view.channels[ch]);
                for k in 0..found.len() {
                    let _ = write!(s, ",{}", rel.get(&[ch, k]));
                }
                s.push('\n');
            }
            fs::write(a.out.join("word_relevance.csv"), s)?;
        }
    }

    let layer = model.config.backbone.layers.saturating_sub(2);
    let mut s = String::from("branch,channel,values\n");
    for (name, trace) in [("textual", &textual.trace), ("temporal", &temporal.trace)] {
        let f = tape.value(trace.features[layer]);
        let m = model.config.backbone.width;
        for ch in 0..c {
            let vals: Vec<String> = f.data()[ch * m..(ch + 1) * m].iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{name},{},{}", view.channels[ch], vals.join(" "));
        }
    }
    fs::write(a.out.join("features.csv"), s)?;
    println!("exported {c} channels x {d} principal components to {}", a.out.display());
    Ok(())
}
