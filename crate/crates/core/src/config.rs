//! Run configuration from `key = value` files, with `#` comments.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, RfrError};
use crate::net::NetConfig;
use crate::rfr_module::{MergeMode, ReasoningConfig};
use crate::tensor::Precision;
use crate::train::{MaskBand, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub resolution: usize,
    pub iter_num: usize,
    pub merge_mode: MergeMode,
    pub attention: bool,
    pub depth: usize,
    pub channel_scale: usize,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub out: PathBuf,
    pub images: usize,
    pub band: MaskBand,
    pub batch_size: usize,
    pub steps: usize,
    pub finetune_steps: usize,
    pub lr: f64,
    pub lr_finetune: f64,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            resolution: net.resolution,
            iter_num: net.reasoning.iter_num,
            merge_mode: net.reasoning.merge_mode,
            attention: net.reasoning.attention_enabled,
            depth: net.depth,
            channel_scale: net.reasoning.channel_scale,
            seed: 0,
            weights: None,
            out: PathBuf::from("out"),
            images: 16,
            band: MaskBand::default(),
            batch_size: train.batch_size,
            steps: train.main_steps,
            finetune_steps: train.finetune_steps,
            lr: train.lr_main,
            lr_finetune: train.lr_finetune,
            precision: train.precision,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| RfrError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(RfrError::Config(format!("invalid value `{value}` for `{key}` (expected on/off)"))),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 17] = [
        "resolution",
        "iter_num",
        "merge_mode",
        "attention",
        "depth",
        "channel_scale",
        "seed",
        "weights",
        "out",
        "images",
        "band",
        "batch_size",
        "steps",
        "finetune_steps",
        "lr",
        "lr_finetune",
        "precision",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "resolution" => self.resolution = parse_num(key, value)?,
            "iter_num" => self.iter_num = parse_num(key, value)?,
            "merge_mode" => self.merge_mode = value.parse()?,
            "attention" => self.attention = parse_bool(key, value)?,
            "depth" => self.depth = parse_num(key, value)?,
            "channel_scale" => self.channel_scale = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "weights" => self.weights = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "images" => self.images = parse_num(key, value)?,
            "band" => self.band = value.parse()?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "finetune_steps" => self.finetune_steps = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lr_finetune" => self.lr_finetune = parse_num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "single" => Precision::Single,
                    "double" => Precision::Double,
                    _ => {
                        return Err(RfrError::Config(format!(
                            "invalid precision `{value}` (expected single or double)"
                        )))
                    }
                }
            }
            _ => return Err(RfrError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| RfrError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| RfrError::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RfrError::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| RfrError::Config(format!("{}: {}", path.display(), strip_prefix(e))))
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let cfg = NetConfig {
            depth: self.depth,
            resolution: self.resolution,
            reasoning: ReasoningConfig {
                iter_num: self.iter_num,
                merge_mode: self.merge_mode,
                attention_enabled: self.attention,
                channel_scale: self.channel_scale,
                ..ReasoningConfig::default()
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            lr_main: self.lr,
            lr_finetune: self.lr_finetune,
            main_steps: self.steps,
            finetune_steps: self.finetune_steps,
            seed: self.seed,
            precision: self.precision,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn strip_prefix(e: RfrError) -> String {
    match e {
        RfrError::Config(m) => m,
        other => other.to_string(),
    }
}

/// Prints the resolved configuration in the same `key = value` format it is read from.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let precision = match self.precision {
            Precision::Single => "single",
            Precision::Double => "double",
        };
        writeln!(f, "resolution = {}", self.resolution)?;
        writeln!(f, "iter_num = {}", self.iter_num)?;
        writeln!(f, "merge_mode = {}", self.merge_mode)?;
        writeln!(f, "attention = {}", if self.attention { "on" } else { "off" })?;
        writeln!(f, "depth = {}", self.depth)?;
        writeln!(f, "channel_scale = {}", self.channel_scale)?;
        writeln!(f, "seed = {}", self.seed)?;
        match &self.weights {
            Some(p) => writeln!(f, "weights = {}", p.display())?,
            None => writeln!(f, "# weights unset: parameters are initialised from seed")?,
        }
        writeln!(f, "out = {}", self.out.display())?;
        writeln!(f, "images = {}", self.images)?;
        writeln!(f, "band = {}", self.band)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(f, "finetune_steps = {}", self.finetune_steps)?;
        writeln!(f, "lr = {:e}", self.lr)?;
        writeln!(f, "lr_finetune = {:e}", self.lr_finetune)?;
        write!(f, "precision = {precision}")
    }
}
