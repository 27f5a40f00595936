//! The four-branch re-identification network.
//!
//! A strided convolution stem feeds two LKA branches (`l1`, `l2`) and two HCA
//! branches (`h1`, `h2`). Each branch stacks `blocks_per_branch` rounds of
//! `3×3 conv → GELU → attention`, pools globally and projects to a
//! `feature_dim` embedding. `l1` and `h1` carry identity classifiers.

mod checkpoint;
mod cost;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    hca_forward, lka_forward, AttentionError, HcaConfig, HcaParams, LkaConfig, LkaParams, ProjectionOrder,
};
use crate::tensor::{Conv2dSpec, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("{what} id {id} out of range (< {limit})")]
    IdOutOfRange {
        what: &'static str,
        id: usize,
        limit: usize,
    },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    L1,
    L2,
    H1,
    H2,
}

impl Branch {
    /// Concatenation order of the inference feature.
    pub const ALL: [Branch; 4] = [Branch::L1, Branch::L2, Branch::H1, Branch::H2];

    pub fn name(self) -> &'static str {
        match self {
            Branch::L1 => "l1",
            Branch::L2 => "l2",
            Branch::H1 => "h1",
            Branch::H2 => "h2",
        }
    }

    pub fn is_lka(self) -> bool {
        matches!(self, Branch::L1 | Branch::L2)
    }

    /// Classification branches train with cross-entropy, the others with the
    /// triplet loss.
    pub fn classifies(self) -> bool {
        matches!(self, Branch::L1 | Branch::H1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Expected input `(H, W)`; used for cost reporting and data generation.
    pub input_size: (usize, usize),
    /// Output channels of each stride-2 stem stage.
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    pub blocks_per_branch: usize,
    pub lka_kernel: usize,
    pub lka_dilation: usize,
    #[serde(default)]
    pub lka_order: ProjectionOrder,
    pub hca_grid: usize,
    pub hca_gamma: f64,
    pub hca_b: f64,
    pub num_identities: usize,
    pub num_cameras: usize,
    pub num_views: usize,
    pub metadata_embeddings: bool,
    /// `false` replaces every attention block with the identity.
    pub attention: bool,
    /// One stem for all branches, or one per branch.
    pub shared_stem: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (40, 40),
            widths: vec![16, 32, 64],
            feature_dim: 128,
            blocks_per_branch: 3,
            lka_kernel: 7,
            lka_dilation: 2,
            lka_order: ProjectionOrder::GeluThenConv,
            hca_grid: 5,
            hca_gamma: 2.0,
            hca_b: 2.0,
            num_identities: 16,
            num_cameras: 4,
            num_views: 2,
            metadata_embeddings: false,
            attention: true,
            shared_stem: true,
        }
    }
}

fn stem_spec(cin: usize, cout: usize) -> Conv2dSpec {
    Conv2dSpec::new(cin, cout, (3, 3)).stride(2).padding(1)
}

fn trunk_spec(c: usize) -> Conv2dSpec {
    Conv2dSpec::new(c, c, (3, 3)).padding(1)
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, for weights followed by GELU.
    He(usize),
    /// Uniform in `±1 / sqrt(fan_in)`.
    FanIn(usize),
    Zero,
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn lka_config(&self) -> Result<LkaConfig> {
        let mut cfg = LkaConfig::new(self.channels(), self.lka_kernel, self.lka_dilation)?;
        cfg.order = self.lka_order;
        Ok(cfg)
    }

    pub fn hca_config(&self) -> Result<HcaConfig> {
        Ok(HcaConfig::with_params(
            self.channels(),
            self.hca_grid,
            self.hca_gamma,
            self.hca_b,
        )?)
    }

    /// Spatial size after the stem for an input of `(h, w)`.
    pub fn feature_map_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let mut size = (h, w);
        let mut cin = 3;
        for &c in &self.widths {
            size = stem_spec(cin, c).output_size(size.0, size.1)?;
            cin = c;
        }
        Ok(size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.blocks_per_branch == 0 {
            return bad("blocks_per_branch must be at least 1");
        }
        if self.num_identities == 0 || self.num_cameras == 0 || self.num_views == 0 {
            return bad("num_identities, num_cameras and num_views must be positive");
        }
        let (h, w) = self.feature_map_size(self.input_size.0, self.input_size.1)?;
        if self.attention {
            self.lka_config()?;
            self.hca_config()?;
            if self.hca_grid > h.min(w) {
                return Err(AttentionError::Grid {
                    grid: self.hca_grid,
                    h,
                    w,
                }
                .into());
            }
        }
        Ok(())
    }

    fn stem_prefixes(&self) -> Vec<String> {
        if self.shared_stem {
            vec!["stem".to_string()]
        } else {
            Branch::ALL.iter().map(|b| format!("{}.stem", b.name())).collect()
        }
    }

    fn stem_prefix(&self, b: Branch) -> String {
        if self.shared_stem {
            "stem".to_string()
        } else {
            format!("{}.stem", b.name())
        }
    }

    fn param_layout(&self) -> Result<Vec<(String, Vec<usize>, Init)>> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
        for prefix in self.stem_prefixes() {
            let mut cin = 3;
            for (i, &c) in self.widths.iter().enumerate() {
                push(format!("{prefix}.{i}.weight"), vec![c, cin, 3, 3], Init::He(cin * 9));
                push(format!("{prefix}.{i}.bias"), vec![c], Init::Zero);
                cin = c;
            }
        }
        let c = self.channels();
        let d = self.feature_dim;
        for b in Branch::ALL {
            let bn = b.name();
            for j in 0..self.blocks_per_branch {
                let block = format!("{bn}.blocks.{j}");
                push(format!("{block}.conv.weight"), vec![c, c, 3, 3], Init::He(c * 9));
                push(format!("{block}.conv.bias"), vec![c], Init::Zero);
                if !self.attention {
                    continue;
                }
                let shapes = if b.is_lka() {
                    self.lka_config()?
                        .param_shapes()
                        .into_iter()
                        .map(|(n, s)| (format!("{block}.lka.{n}"), s))
                        .collect::<Vec<_>>()
                } else {
                    self.hca_config()?
                        .param_shapes()?
                        .into_iter()
                        .map(|(n, s)| (format!("{block}.hca.{n}"), s))
                        .collect()
                };
                for (name, shape) in shapes {
                    let init = if name.ends_with(".bias") {
                        Init::Zero
                    } else {
                        Init::FanIn(shape[1..].iter().product())
                    };
                    push(name, shape, init);
                }
            }
            push(format!("{bn}.head.weight"), vec![d, c], Init::FanIn(c));
            push(format!("{bn}.head.bias"), vec![d], Init::Zero);
            if b.classifies() {
                push(
                    format!("{bn}.classifier.weight"),
                    vec![self.num_identities, d],
                    Init::FanIn(d),
                );
            }
        }
        if self.metadata_embeddings {
            push("metadata.camera".into(), vec![self.num_cameras, d], Init::Zero);
            push("metadata.view".into(), vec![self.num_views, d], Init::Zero);
        }
        Ok(out)
    }

    /// Every parameter name and shape, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(self.param_layout()?.into_iter().map(|(n, s, _)| (n, s)).collect())
    }
}

/// One stored parameter. Values are kept at single precision: every entry
/// is exactly representable as an `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named parameters plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: IndexMap<String, ParamTensor>,
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.params.values().map(ParamTensor::numel).sum()
    }

    /// Checks that the stored names and shapes are exactly those the config
    /// requires.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.param_shapes()?;
        for (name, shape) in &expected {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if &p.shape != shape {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: p.shape.clone(),
                });
            }
        }
        if self.params.len() != expected.len() {
            let known: std::collections::HashSet<_> = expected.iter().map(|(n, _)| n.as_str()).collect();
            let extra = self.params.keys().find(|k| !known.contains(k.as_str())).cloned();
            return Err(ModelError::UnexpectedParam(extra.unwrap_or_default()));
        }
        Ok(())
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Deterministic initialisation: He-uniform for convolutions followed by
/// GELU, fan-in uniform for the remaining weights, zero biases and metadata
/// tables.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    for (name, shape, init) in cfg.param_layout()? {
        let n: usize = shape.iter().product();
        let bound = match init {
            Init::He(fan_in) => (6.0 / fan_in as f64).sqrt(),
            Init::FanIn(fan_in) => 1.0 / (fan_in as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let data = if bound == 0.0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| round_f32(rng.random_range(-bound..bound))).collect()
        };
        params.insert(name, ParamTensor { shape, data });
    }
    Ok(ModelState {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        params,
    })
}

/// Graph leaves for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor>,
}

impl BoundParams {
    /// Wraps the stored parameters, as trainable leaves if `requires_grad`.
    pub fn bind(state: &ModelState, requires_grad: bool) -> Result<Self> {
        state.validate()?;
        let tensors = state
            .params
            .iter()
            .map(|(name, p)| {
                let t = if requires_grad {
                    Tensor::param(p.shape.clone(), p.data.clone())?
                } else {
                    Tensor::new(p.shape.clone(), p.data.clone())?
                };
                Ok((name.clone(), t))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: state.config.clone(),
            tensors,
        })
    }

    /// Uses caller-supplied tensors, in [`ModelConfig::param_shapes`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: &[Tensor]) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.param_shapes()?;
        if shapes.len() != tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let mut map = IndexMap::new();
        for ((name, shape), t) in shapes.into_iter().zip(tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
            map.insert(name, t.clone());
        }
        Ok(Self {
            config: cfg.clone(),
            tensors: map,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    fn lookup(&self, prefix: &str, name: &str, shape: &[usize]) -> Result<Tensor> {
        let full = format!("{prefix}.{name}");
        let t = self.get(&full)?;
        if t.shape() != shape {
            return Err(ModelError::ParamShape {
                name: full,
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        Ok(t.clone())
    }
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub branch: Branch,
    /// `(B, D)`.
    pub embedding: Tensor,
    /// `(B, num_identities)`, for classification branches only.
    pub logits: Option<Tensor>,
}

fn check_images(images: &Tensor) -> Result<usize> {
    match *images.shape() {
        [b, 3, _, _] if b >= 1 => Ok(b),
        _ => Err(ModelError::Batch(format!(
            "expected images of shape (B, 3, H, W), got {:?}",
            images.shape()
        ))),
    }
}

fn stem(p: &BoundParams, prefix: &str, images: &Tensor) -> Result<Tensor> {
    let mut x = images.clone();
    let mut cin = 3;
    for (i, &c) in p.config.widths.iter().enumerate() {
        let w = p.get(&format!("{prefix}.{i}.weight"))?;
        let b = p.get(&format!("{prefix}.{i}.bias"))?;
        x = x.conv2d(w, Some(b), &stem_spec(cin, c))?.gelu()?;
        cin = c;
    }
    Ok(x)
}

fn trunk(p: &BoundParams, branch: Branch, stem_out: &Tensor) -> Result<Tensor> {
    let cfg = &p.config;
    let c = cfg.channels();
    let bn = branch.name();
    let mut x = stem_out.clone();
    for j in 0..cfg.blocks_per_branch {
        let block = format!("{bn}.blocks.{j}");
        let w = p.get(&format!("{block}.conv.weight"))?;
        let b = p.get(&format!("{block}.conv.bias"))?;
        x = x.conv2d(w, Some(b), &trunk_spec(c))?.gelu()?;
        if !cfg.attention {
            continue;
        }
        x = if branch.is_lka() {
            let lcfg = cfg.lka_config()?;
            let prefix = format!("{block}.lka");
            let params = LkaParams::from_lookup(&lcfg, |n, s| p.lookup(&prefix, n, s))?;
            lka_forward(&x, &params, &lcfg)?
        } else {
            let hcfg = cfg.hca_config()?;
            let prefix = format!("{block}.hca");
            let params = HcaParams::from_lookup(&hcfg, |n, s| p.lookup(&prefix, n, s))?;
            hca_forward(&x, &params, &hcfg)?
        };
    }
    let n = x.shape()[0];
    let pooled = x.adaptive_avg_pool(1, 1)?.reshape([n, c])?;
    let w = p.get(&format!("{bn}.head.weight"))?;
    let b = p.get(&format!("{bn}.head.bias"))?;
    Ok(pooled.linear(w, Some(b))?)
}

/// Per-branch embeddings before metadata, in [`Branch::ALL`] order.
fn branch_embeddings(p: &BoundParams, images: &Tensor) -> Result<Vec<Tensor>> {
    check_images(images)?;
    let shared = if p.config.shared_stem {
        Some(stem(p, "stem", images)?)
    } else {
        None
    };
    Branch::ALL
        .iter()
        .map(|&b| {
            let s = match &shared {
                Some(s) => s.clone(),
                None => stem(p, &p.config.stem_prefix(b), images)?,
            };
            trunk(p, b, &s)
        })
        .collect()
}

fn check_ids(ids: &[usize], batch: usize, limit: usize, what: &'static str) -> Result<()> {
    if ids.len() != batch {
        return Err(ModelError::Batch(format!(
            "{} {what} ids for batch of {batch}",
            ids.len()
        )));
    }
    match ids.iter().find(|&&id| id >= limit) {
        Some(&id) => Err(ModelError::IdOutOfRange { what, id, limit }),
        None => Ok(()),
    }
}

/// Training forward pass: four branch outputs, with camera and view
/// embeddings added when the config enables them.
pub fn forward_train_with(
    p: &BoundParams,
    images: &Tensor,
    camera_ids: &[usize],
    view_ids: &[usize],
) -> Result<Vec<BranchOutput>> {
    let cfg = &p.config;
    let batch = check_images(images)?;
    if batch < 2 {
        return Err(ModelError::Batch(format!(
            "training batch needs at least 2 images, got {batch}"
        )));
    }
    check_ids(camera_ids, batch, cfg.num_cameras, "camera")?;
    check_ids(view_ids, batch, cfg.num_views, "view")?;
    let meta = if cfg.metadata_embeddings {
        let cam = p.get("metadata.camera")?.gather_rows(camera_ids)?;
        let view = p.get("metadata.view")?.gather_rows(view_ids)?;
        Some(cam.add(&view)?)
    } else {
        None
    };
    let embeddings = branch_embeddings(p, images)?;
    Branch::ALL
        .iter()
        .zip(embeddings)
        .map(|(&branch, e)| {
            let embedding = match &meta {
                Some(m) => e.add(m)?,
                None => e,
            };
            let logits = if branch.classifies() {
                let w = p.get(&format!("{}.classifier.weight", branch.name()))?;
                Some(embedding.linear(w, None)?)
            } else {
                None
            };
            Ok(BranchOutput {
                branch,
                embedding,
                logits,
            })
        })
        .collect()
}

pub fn forward_train(
    state: &ModelState,
    images: &Tensor,
    camera_ids: &[usize],
    view_ids: &[usize],
) -> Result<Vec<BranchOutput>> {
    forward_train_with(&BoundParams::bind(state, false)?, images, camera_ids, view_ids)
}

/// Inference feature `L1 ‖ L2 ‖ H1 ‖ H2`, L2-normalised per row; `(B, 4·D)`.
/// Metadata embeddings are not used.
pub fn extract_features_with(p: &BoundParams, images: &Tensor) -> Result<Tensor> {
    let embeddings = branch_embeddings(p, images)?;
    let parts: Vec<&Tensor> = embeddings.iter().collect();
    Ok(Tensor::concat(&parts, 1)?.l2_normalize(1)?)
}

pub fn extract_features(state: &ModelState, images: &Tensor) -> Result<Tensor> {
    extract_features_with(&BoundParams::bind(state, false)?, images)
}

/// [`extract_features`] over a large set of images, `batch` at a time.
pub fn extract_features_batched(state: &ModelState, images: &Tensor, batch: usize) -> Result<Vec<Vec<f64>>> {
    let n = check_images(images)?;
    let per = images.numel() / n;
    let dim = 4 * state.config.feature_dim;
    let p = BoundParams::bind(state, false)?;
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        let f = extract_features_with(&p, &chunk)?;
        rows.extend(f.data().chunks(dim).map(<[f64]>::to_vec));
    }
    Ok(rows)
}
