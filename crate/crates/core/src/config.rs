//! Flat `key = value` run configuration with `include` support.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{AttnTarget, BackboneConfig, LoraConfig};
use crate::data::{SplitScheme, SplitSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::matching::AttentionScale;
use crate::model::ModelConfig;
use crate::tensor::{AdamConfig, LossKind};
use crate::train::{LossWeights, SimSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Csv,
    M4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Ratio,
    EttHourly,
    EttMinute,
}

/// Everything a run needs; serialises back to the same text format.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub dataset_kind: DatasetKind,
    /// Used to pick loss defaults; the dataset file stem when unset.
    pub dataset_name: Option<String>,
    pub m4_frequency: String,
    pub m4_windows_per_series: usize,
    /// Backbone container; a seeded random backbone when unset.
    pub weights: Option<PathBuf>,
    /// Principal-embeddings file; extracted from the backbone when unset.
    pub principal: Option<PathBuf>,
    pub principal_dim: usize,
    pub output_dir: PathBuf,

    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub causal: bool,
    pub match_heads: Option<usize>,
    pub attention_scale: AttentionScale,
    pub variance_scaled: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<AttnTarget>,
    pub instance_norm: bool,
    pub global_scale: bool,

    pub input_len: usize,
    pub horizons: Vec<usize>,
    pub split: SplitKind,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub train_fraction: f64,

    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sup_loss: Option<LossKind>,
    pub feature_loss: Option<LossKind>,
    pub output_loss: Option<LossKind>,

    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub enable_feature: bool,
    pub enable_output: bool,
    pub stop_gradient_textual: bool,
    pub max_steps: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let lora = LoraConfig::default();
        let w = LossWeights::default();
        let t = TrainConfig::default();
        Self {
            dataset: PathBuf::new(),
            dataset_kind: DatasetKind::Csv,
            dataset_name: None,
            m4_frequency: "monthly".into(),
            m4_windows_per_series: 10,
            weights: None,
            principal: None,
            principal_dim: 500,
            output_dir: PathBuf::from("runs"),
            layers: bb.layers,
            width: bb.width,
            heads: bb.heads,
            max_positions: bb.max_positions,
            vocab_size: bb.vocab_size,
            causal: bb.causal,
            match_heads: None,
            attention_scale: AttentionScale::Channels,
            variance_scaled: true,
            lora_rank: lora.rank,
            lora_alpha: lora.alpha,
            lora_targets: lora.targets,
            instance_norm: true,
            global_scale: true,
            input_len: 96,
            horizons: vec![96, 192, 336, 720],
            split: SplitKind::Ratio,
            train_ratio: 0.7,
            val_ratio: 0.1,
            train_fraction: 1.0,
            gamma: w.gamma,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            sup_loss: None,
            feature_loss: None,
            output_loss: None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch_size: 64,
            patience: t.patience,
            lr: t.adam.lr,
            seed: t.seed,
            enable_feature: true,
            enable_output: true,
            stop_gradient_textual: false,
            max_steps: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "auto" || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), ToString::to_string)
}

fn path_opt(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Reads a config file; `include = other.conf` splices another file in
    /// place, with paths resolved against the including file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path.as_ref(), 0)?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, base, "<string>", 0)?;
        Ok(cfg)
    }

    fn apply_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > 16 {
            return Err(Error::config(format!("include depth exceeded at {}", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        // Absolute paths keep `config.resolved` replayable from any directory.
        let base = std::path::absolute(dir)?;
        self.apply_text(&text, &base, &path.display().to_string(), depth)
    }

    fn apply_text(&mut self, text: &str, base: &Path, origin: &str, depth: usize) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "include" {
                self.apply_file(&base.join(value), depth + 1)?;
                continue;
            }
            let value = match key {
                "dataset" | "weights" | "principal" | "output_dir" if !value.is_empty() && value != "none" => {
                    base.join(value).to_string_lossy().into_owned()
                }
                _ => value.to_string(),
            };
            self.set(key, &value)
                .map_err(|e| Error::config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "dataset_kind" => {
                self.dataset_kind = match value {
                    "csv" => DatasetKind::Csv,
                    "m4" => DatasetKind::M4,
                    _ => return Err(Error::config(format!("unknown dataset_kind `{value}`"))),
                }
            }
            "dataset_name" => self.dataset_name = (!value.is_empty() && value != "auto").then(|| value.to_string()),
            "m4_frequency" => self.m4_frequency = value.to_string(),
            "m4_windows_per_series" => self.m4_windows_per_series = parse(key, value)?,
            "weights" => self.weights = path_opt(value),
            "principal" => self.principal = path_opt(value),
            "principal_dim" => self.principal_dim = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "layers" => self.layers = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "max_positions" => self.max_positions = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "causal" => self.causal = parse_bool(key, value)?,
            "match_heads" => self.match_heads = parse_opt(key, value)?,
            "attention_scale" => self.attention_scale = value.parse()?,
            "variance_scaled" => self.variance_scaled = parse_bool(key, value)?,
            "lora_rank" => self.lora_rank = parse(key, value)?,
            "lora_alpha" => self.lora_alpha = parse(key, value)?,
            "lora_targets" => self.lora_targets = parse_list(key, value)?,
            "instance_norm" => self.instance_norm = parse_bool(key, value)?,
            "global_scale" => self.global_scale = parse_bool(key, value)?,
            "input_len" => self.input_len = parse(key, value)?,
            "horizons" => self.horizons = parse_list(key, value)?,
            "split" => {
                self.split = match value {
                    "ratio" => SplitKind::Ratio,
                    "ett_hourly" => SplitKind::EttHourly,
                    "ett_minute" => SplitKind::EttMinute,
                    _ => return Err(Error::config(format!("unknown split `{value}`"))),
                }
            }
            "train_ratio" => self.train_ratio = parse(key, value)?,
            "val_ratio" => self.val_ratio = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "sup_loss" => self.sup_loss = parse_opt_kind(value)?,
            "feature_loss" => self.feature_loss = parse_opt_kind(value)?,
            "output_loss" => self.output_loss = parse_opt_kind(value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "enable_feature" => self.enable_feature = parse_bool(key, value)?,
            "enable_output" => self.enable_output = parse_bool(key, value)?,
            "stop_gradient_textual" => self.stop_gradient_textual = parse_bool(key, value)?,
            "max_steps" => self.max_steps = parse_opt(key, value)?,
            other => return Err(Error::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Resolved configuration in the input format, one key per line.
    pub fn to_text(&self) -> String {
        let p = |p: &Path| p.display().to_string();
        let po = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string());
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let kind = |k: &Option<LossKind>| opt_text(k);
        let scale = match self.attention_scale {
            AttentionScale::Channels => "channels",
            AttentionScale::HeadDim => "head_dim",
        };
        let split = match self.split {
            SplitKind::Ratio => "ratio",
            SplitKind::EttHourly => "ett_hourly",
            SplitKind::EttMinute => "ett_minute",
        };
        let targets: Vec<&str> = self.lora_targets.iter().map(|t| t.short()).collect();
        let rows: Vec<(&str, String)> = vec![
            ("dataset", p(&self.dataset)),
            (
                "dataset_kind",
                match self.dataset_kind {
                    DatasetKind::Csv => "csv".into(),
                    DatasetKind::M4 => "m4".into(),
                },
            ),
            ("dataset_name", opt_text(&self.dataset_name)),
            ("m4_frequency", self.m4_frequency.clone()),
            ("m4_windows_per_series", self.m4_windows_per_series.to_string()),
            ("weights", po(&self.weights)),
            ("principal", po(&self.principal)),
            ("principal_dim", self.principal_dim.to_string()),
            ("output_dir", p(&self.output_dir)),
            ("layers", self.layers.to_string()),
            ("width", self.width.to_string()),
            ("heads", self.heads.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("causal", self.causal.to_string()),
            ("match_heads", opt_text(&self.match_heads)),
            ("attention_scale", scale.into()),
            ("variance_scaled", self.variance_scaled.to_string()),
            ("lora_rank", self.lora_rank.to_string()),
            ("lora_alpha", self.lora_alpha.to_string()),
            ("lora_targets", targets.join(",")),
            ("instance_norm", self.instance_norm.to_string()),
            ("global_scale", self.global_scale.to_string()),
            ("input_len", self.input_len.to_string()),
            ("horizons", list(&self.horizons)),
            ("split", split.into()),
            ("train_ratio", self.train_ratio.to_string()),
            ("val_ratio", self.val_ratio.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("sup_loss", kind(&self.sup_loss)),
            ("feature_loss", kind(&self.feature_loss)),
            ("output_loss", kind(&self.output_loss)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("patience", self.patience.to_string()),
            ("lr", self.lr.to_string()),
            ("seed", self.seed.to_string()),
            ("enable_feature", self.enable_feature.to_string()),
            ("enable_output", self.enable_output.to_string()),
            ("stop_gradient_textual", self.stop_gradient_textual.to_string()),
            ("max_steps", opt_text(&self.max_steps)),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            max_positions: self.max_positions,
            vocab_size: self.vocab_size,
            causal: self.causal,
        }
    }

    pub fn model_config(&self, input_len: usize, horizon: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_config(),
            input_len,
            horizon,
            match_heads: self.match_heads,
            attention_scale: self.attention_scale,
            variance_scaled: self.variance_scaled,
            lora: LoraConfig {
                rank: self.lora_rank,
                alpha: self.lora_alpha,
                targets: self.lora_targets.clone(),
            },
            instance_norm: self.instance_norm,
        }
    }

    pub fn window(&self, horizon: usize) -> Result<WindowSpec> {
        WindowSpec::new(self.input_len, horizon)
    }

    pub fn split_spec(&self) -> SplitSpec {
        let scheme = match self.split {
            SplitKind::Ratio => SplitScheme::Ratio {
                train: self.train_ratio,
                val: self.val_ratio,
            },
            SplitKind::EttHourly => SplitScheme::ett(1),
            SplitKind::EttMinute => SplitScheme::ett(4),
        };
        SplitSpec {
            scheme,
            few_shot_fraction: self.train_fraction,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn name(&self) -> String {
        self.dataset_name.clone().unwrap_or_else(|| {
            if self.dataset_kind == DatasetKind::M4 {
                "m4".into()
            } else {
                self.dataset
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            }
        })
    }

    /// Per-dataset defaults with explicit overrides applied.
    pub fn sim_spec(&self) -> SimSpec {
        let mut s = SimSpec::for_dataset(&self.name());
        if let Some(k) = self.sup_loss {
            s.sup = k;
        }
        if let Some(k) = self.feature_loss {
            s.feature = k;
        }
        if let Some(k) = self.output_loss {
            s.output = k;
        }
        s
    }

    pub fn train_config(&self, season: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            patience: self.patience,
            enable_feature: self.enable_feature,
            enable_output: self.enable_output,
            stop_gradient_textual: self.stop_gradient_textual,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            max_steps: self.max_steps,
            season,
        }
    }
}

fn parse_opt_kind(value: &str) -> Result<Option<LossKind>> {
    if value.is_empty() || value == "auto" {
        Ok(None)
    } else {
        value.parse().map(Some)
    }
}
