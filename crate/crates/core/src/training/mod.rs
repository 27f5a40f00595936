//! Losses, PK sampling, synthetic data and the training loop.

mod losses;
mod sampler;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionError;
use crate::data::ImageSet;
use crate::model::{forward_train_with, BoundParams, ModelError, ModelState};
use crate::tensor::{Tensor, TensorError};

pub use losses::{batch_hard_triplet_loss, cross_entropy_loss};
pub use sampler::{identity_index, pk_sample};
pub use synth::{held_out_split, render_sample, synth_generate, HeldOutSplit, SyntheticDatasetSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need {needed} identities, only {available} available")]
    NotEnoughIdentities { needed: usize, available: usize },
    #[error("non-finite loss at step {step}; first non-finite gradient: {param}")]
    NonFiniteGradient { step: usize, param: String },
    #[error("non-finite loss at step {step}: {source}")]
    NonFiniteLoss { step: usize, source: TensorError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Stochastic gradient descent with momentum.
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k_inst: usize,
    pub margin: f64,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub seed: u64,
    /// Cross-entropy target smoothing; `0` disables it.
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 4,
            k_inst: 4,
            margin: 0.3,
            lr: 0.01,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
            steps: 1000,
            seed: 0,
            label_smoothing: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k_inst
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.p == 0 || self.k_inst == 0 {
            return bad(format!(
                "P and K_inst must be positive, got {} and {}",
                self.p, self.k_inst
            ));
        }
        if self.batch_size() < 2 {
            return bad("batch size P·K_inst must be at least 2".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin {} must be finite and non-negative", self.margin));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }
}

/// Per-branch losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub ce_l1: f64,
    pub ce_h1: f64,
    pub triplet_l2: f64,
    pub triplet_h2: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossComponents,
}

/// Builds the four losses and their sum for a labelled batch.
pub fn compute_losses(
    params: &BoundParams,
    images: &Tensor,
    labels: &[usize],
    cameras: &[usize],
    views: &[usize],
    cfg: &TrainConfig,
) -> Result<(Tensor, LossComponents)> {
    let out = forward_train_with(params, images, cameras, views)?;
    let ce = |i: usize| -> Result<Tensor> {
        let logits = out[i].logits.as_ref().expect("classification branch");
        Ok(cross_entropy_loss(logits, labels, cfg.label_smoothing)?)
    };
    let tri = |i: usize| -> Result<Tensor> { Ok(batch_hard_triplet_loss(&out[i].embedding, labels, cfg.margin)?) };
    // Branch::ALL order is l1, l2, h1, h2.
    let (ce_l1, tri_l2, ce_h1, tri_h2) = (ce(0)?, tri(1)?, ce(2)?, tri(3)?);
    let total = ce_l1.add(&ce_h1)?.add(&tri_l2)?.add(&tri_h2)?;
    let comps = LossComponents {
        total: total.item()?,
        ce_l1: ce_l1.item()?,
        ce_h1: ce_h1.item()?,
        triplet_l2: tri_l2.item()?,
        triplet_h2: tri_h2.item()?,
    };
    Ok((total, comps))
}

/// Optimizer state per parameter.
enum Slots {
    Sgd(Vec<Vec<f64>>),
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: i32 },
}

/// Owns the model state and optimizer buffers. Parameters are rounded to
/// single precision after every update.
pub struct Trainer {
    state: ModelState,
    cfg: TrainConfig,
    slots: Slots,
    step: usize,
}

/// The non-finite tensor error buried in a forward-pass failure, if any.
fn non_finite(e: &TrainError) -> Option<TensorError> {
    let t = match e {
        TrainError::Tensor(t)
        | TrainError::Model(ModelError::Tensor(t))
        | TrainError::Model(ModelError::Attention(AttentionError::Tensor(t))) => t,
        _ => return None,
    };
    matches!(t, TensorError::NonFinite { .. }).then(|| t.clone())
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl Trainer {
    pub fn new(state: ModelState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        state.validate()?;
        let zeros = || state.params.values().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        let slots = match cfg.optimizer {
            OptimizerKind::Sgd => Slots::Sgd(zeros()),
            OptimizerKind::Adam => Slots::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        };
        Ok(Self {
            state,
            cfg,
            slots,
            step: 0,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn into_state(self) -> ModelState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer update on a labelled batch.
    pub fn step(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        cameras: &[usize],
        views: &[usize],
    ) -> Result<LossComponents> {
        let step = self.step;
        let params = BoundParams::bind(&self.state, true)?;
        let (total, comps) = match compute_losses(&params, images, labels, cameras, views, &self.cfg) {
            Err(e) => {
                return Err(match non_finite(&e) {
                    Some(source) => TrainError::NonFiniteLoss { step, source },
                    None => e,
                })
            }
            Ok(v) => v,
        };
        total.backward()?;

        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        if let Some((name, _)) = params
            .iter()
            .zip(&grads)
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(p, _)| p)
        {
            return Err(TrainError::NonFiniteGradient {
                step,
                param: name.clone(),
            });
        }

        let lr = self.cfg.lr;
        match &mut self.slots {
            Slots::Sgd(vel) => {
                for ((p, v), g) in self.state.params.values_mut().zip(vel.iter_mut()).zip(&grads) {
                    for ((w, vi), gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                        *vi = self.cfg.momentum * *vi + gi;
                        *w = round_f32(*w - lr * *vi);
                    }
                }
            }
            Slots::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for (((p, mi), vi), g) in self
                    .state
                    .params
                    .values_mut()
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                    .zip(&grads)
                {
                    for (((w, a), b), gi) in p.data.iter_mut().zip(mi.iter_mut()).zip(vi.iter_mut()).zip(g) {
                        *a = B1 * *a + (1.0 - B1) * gi;
                        *b = B2 * *b + (1.0 - B2) * gi * gi;
                        *w = round_f32(*w - lr * (*a / c1) / ((*b / c2).sqrt() + EPS));
                    }
                }
            }
        }
        self.step += 1;
        Ok(comps)
    }
}

/// Runs `cfg.steps` PK-sampled steps over `data`, calling `on_step` after
/// each one.
pub fn train(
    state: ModelState,
    cfg: &TrainConfig,
    data: &ImageSet,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(ModelState, Vec<StepLog>)> {
    let index = identity_index(&data.labels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(state, cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ids = pk_sample(&index, cfg.p, cfg.k_inst, &mut rng)?;
        let pick = |v: &[usize]| ids.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let losses = trainer.step(
            &data.batch(&ids)?,
            &pick(&data.labels),
            &pick(&data.cameras),
            &pick(&data.views),
        )?;
        let entry = StepLog { step, losses };
        on_step(&entry);
        log.push(entry);
    }
    Ok((trainer.into_state(), log))
}
