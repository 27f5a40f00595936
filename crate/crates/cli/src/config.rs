//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use lkareid::attention::ProjectionOrder;
use lkareid::training::{OptimizerKind, SyntheticDatasetSpec, TrainConfig};
use lkareid::ModelConfig;

/// Everything `train` needs; the dataset's identity, camera and view counts
/// also size the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticDatasetSpec,
    pub eval_max_rank: usize,
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let mut s = Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticDatasetSpec::default(),
            eval_max_rank: 10,
            threads: 1,
        };
        s.sync();
        s
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got {value:?}"),
    }
}

fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| anyhow!("{key}: expected HxW, got {value:?}"))?;
    Ok((parse(key, h.trim())?, parse(key, w.trim())?))
}

fn joined(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainSettings {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "data_seed",
        "steps",
        "lr",
        "p",
        "k_inst",
        "margin",
        "momentum",
        "optimizer",
        "label_smoothing",
        "widths",
        "feature_dim",
        "blocks_per_branch",
        "lka_kernel",
        "lka_dilation",
        "lka_order",
        "hca_grid",
        "hca_gamma",
        "hca_b",
        "metadata_embeddings",
        "attention",
        "shared_stem",
        "identities",
        "images_per_identity",
        "cameras",
        "views",
        "image_size",
        "noise",
        "eval_max_rank",
        "threads",
    ];

    fn sync(&mut self) {
        self.model.num_identities = self.data.num_identities;
        self.model.num_cameras = self.data.num_cameras;
        self.model.num_views = self.data.num_views;
        self.model.input_size = self.data.image_size;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key.trim() {
            "seed" => t.seed = parse(key, v)?,
            "data_seed" => d.seed = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "p" => t.p = parse(key, v)?,
            "k_inst" => t.k_inst = parse(key, v)?,
            "margin" => t.margin = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "optimizer" => {
                t.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => bail!("optimizer: expected sgd or adam, got {v:?}"),
                }
            }
            "label_smoothing" => t.label_smoothing = parse(key, v)?,
            "widths" => m.widths = v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?,
            "feature_dim" => m.feature_dim = parse(key, v)?,
            "blocks_per_branch" => m.blocks_per_branch = parse(key, v)?,
            "lka_kernel" => m.lka_kernel = parse(key, v)?,
            "lka_dilation" => m.lka_dilation = parse(key, v)?,
            "lka_order" => {
                m.lka_order = match v {
                    "gelu_then_conv" => ProjectionOrder::GeluThenConv,
                    "conv_then_gelu" => ProjectionOrder::ConvThenGelu,
                    _ => bail!("lka_order: expected gelu_then_conv or conv_then_gelu, got {v:?}"),
                }
            }
            "hca_grid" => m.hca_grid = parse(key, v)?,
            "hca_gamma" => m.hca_gamma = parse(key, v)?,
            "hca_b" => m.hca_b = parse(key, v)?,
            "metadata_embeddings" => m.metadata_embeddings = parse_bool(key, v)?,
            "attention" => m.attention = parse_bool(key, v)?,
            "shared_stem" => m.shared_stem = parse_bool(key, v)?,
            "identities" => d.num_identities = parse(key, v)?,
            "images_per_identity" => d.images_per_identity = parse(key, v)?,
            "cameras" => d.num_cameras = parse(key, v)?,
            "views" => d.num_views = parse(key, v)?,
            "image_size" => d.image_size = parse_size(key, v)?,
            "noise" => d.noise = parse(key, v)?,
            "eval_max_rank" => self.eval_max_rank = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            other => bail!("unknown config key {other:?}"),
        }
        self.sync();
        Ok(())
    }

    /// Applies a config file; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("expected key = value"))
                .with_context(|| format!("config line {}", i + 1))?;
            self.set(k, v).with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override {kv:?} is not key=value"))?;
        self.set(k, v)
    }

    fn get(&self, key: &str) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        match key {
            "seed" => t.seed.to_string(),
            "data_seed" => d.seed.to_string(),
            "steps" => t.steps.to_string(),
            "lr" => t.lr.to_string(),
            "p" => t.p.to_string(),
            "k_inst" => t.k_inst.to_string(),
            "margin" => t.margin.to_string(),
            "momentum" => t.momentum.to_string(),
            "optimizer" => match t.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam => "adam".into(),
            },
            "label_smoothing" => t.label_smoothing.to_string(),
            "widths" => joined(&m.widths),
            "feature_dim" => m.feature_dim.to_string(),
            "blocks_per_branch" => m.blocks_per_branch.to_string(),
            "lka_kernel" => m.lka_kernel.to_string(),
            "lka_dilation" => m.lka_dilation.to_string(),
            "lka_order" => match m.lka_order {
                ProjectionOrder::GeluThenConv => "gelu_then_conv".into(),
                ProjectionOrder::ConvThenGelu => "conv_then_gelu".into(),
            },
            "hca_grid" => m.hca_grid.to_string(),
            "hca_gamma" => m.hca_gamma.to_string(),
            "hca_b" => m.hca_b.to_string(),
            "metadata_embeddings" => m.metadata_embeddings.to_string(),
            "attention" => m.attention.to_string(),
            "shared_stem" => m.shared_stem.to_string(),
            "identities" => d.num_identities.to_string(),
            "images_per_identity" => d.images_per_identity.to_string(),
            "cameras" => d.num_cameras.to_string(),
            "views" => d.num_views.to_string(),
            "image_size" => format!("{}x{}", d.image_size.0, d.image_size.1),
            "noise" => d.noise.to_string(),
            "eval_max_rank" => self.eval_max_rank.to_string(),
            "threads" => self.threads.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key with its resolved value, loadable with [`apply_file`].
    ///
    /// [`apply_file`]: TrainSettings::apply_file
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            writeln!(out, "{k} = {}", self.get(k)).expect("write to string");
        }
        out
    }
}
