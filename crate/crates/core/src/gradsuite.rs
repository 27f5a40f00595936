//! Finite-difference checks of every differentiable block on random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{hca_forward, lka_forward, AttentionError, HcaConfig, HcaParams, LkaConfig, LkaParams};
use crate::model::{build_model, forward_train_with, BoundParams, ModelConfig, ModelError};
use crate::tensor::{gradient_check_with, GradCheckOptions, Result, Tensor, TensorError};
use crate::training::{batch_hard_triplet_loss, cross_entropy_loss};

/// Relative-error threshold for a pass.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Lka,
    Hca,
    Model,
    Losses,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "all" => Scope::All,
            "lka" => Scope::Lka,
            "hca" => Scope::Hca,
            "model" => Scope::Model,
            "losses" => Scope::Losses,
            _ => return Err(format!("unknown scope {s:?} (all, lka, hca, model, losses)")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub block: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub elements: usize,
    pub passed: bool,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite")
}

fn attention_err(e: AttentionError) -> TensorError {
    match e {
        AttentionError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "attention",
            detail: other.to_string(),
        },
    }
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "model",
            detail: other.to_string(),
        },
    }
}

fn check(block: &'static str, seed: u64, r: crate::tensor::GradCheckReport) -> BlockCheck {
    BlockCheck {
        block,
        seed,
        max_rel_error: r.max_rel_error,
        elements: r.elements_checked,
        passed: r.max_rel_error <= TOLERANCE,
    }
}

pub fn check_lka(seed: u64, opts: GradCheckOptions) -> Result<BlockCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LkaConfig::new(8, 7, 2).map_err(attention_err)?;
    let mut inputs = vec![random(&[1, 8, 12, 12], &mut rng)];
    for (_, shape) in cfg.param_shapes() {
        inputs.push(random(&shape, &mut rng));
    }
    let probe = random(&[1, 8, 12, 12], &mut rng);
    let r = gradient_check_with(
        |t| {
            let mut it = t[1..].iter().cloned();
            let p = LkaParams::from_lookup(&cfg, |_, _| Ok::<_, AttentionError>(it.next().expect("param")))
                .map_err(attention_err)?;
            lka_forward(&t[0], &p, &cfg).map_err(attention_err)?.mul(&probe)?.sum()
        },
        &inputs,
        opts,
    )?;
    Ok(check("lka", seed, r))
}

pub fn check_hca(seed: u64, opts: GradCheckOptions) -> Result<BlockCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = HcaConfig::new(8).map_err(attention_err)?;
    let mut inputs = vec![random(&[1, 8, 10, 10], &mut rng)];
    for (_, shape) in cfg.param_shapes().map_err(attention_err)? {
        inputs.push(random(&shape, &mut rng));
    }
    let probe = random(&[1, 8, 10, 10], &mut rng);
    let r = gradient_check_with(
        |t| {
            let p = HcaParams {
                global: (t[1].clone(), t[2].clone()),
                local: (t[3].clone(), t[4].clone()),
            };
            hca_forward(&t[0], &p, &cfg).map_err(attention_err)?.mul(&probe)?.sum()
        },
        &inputs,
        opts,
    )?;
    Ok(check("hca", seed, r))
}

pub fn check_cross_entropy(seed: u64, opts: GradCheckOptions) -> Result<BlockCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random(&[6, 5], &mut rng).scale(3.0)?;
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
    let r = gradient_check_with(|t| cross_entropy_loss(&t[0], &labels, 0.0), &[logits], opts)?;
    Ok(check("cross_entropy", seed, r))
}

pub fn check_triplet(seed: u64, opts: GradCheckOptions) -> Result<BlockCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = random(&[8, 4], &mut rng);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    // A large margin keeps every hinge active so the loss is smooth.
    let r = gradient_check_with(|t| batch_hard_triplet_loss(&t[0], &labels, 5.0), &[emb], opts)?;
    Ok(check("triplet", seed, r))
}

/// Configuration of the end-to-end model check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_size: (12, 12),
        widths: vec![4],
        feature_dim: 8,
        blocks_per_branch: 1,
        lka_kernel: 5,
        lka_dilation: 2,
        num_identities: 5,
        num_cameras: 2,
        num_views: 2,
        metadata_embeddings: true,
        ..ModelConfig::default()
    }
}

/// Gradient of the sum of every branch output with respect to the images
/// and all parameters.
pub fn check_model(seed: u64, opts: GradCheckOptions) -> Result<BlockCheck> {
    let cfg = tiny_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = build_model(&cfg, seed).map_err(model_err)?;
    // Nonzero metadata tables so their gradient path is exercised.
    for name in ["metadata.camera", "metadata.view"] {
        for v in &mut state.params[name].data {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let mut inputs = vec![random(&[2, 3, 12, 12], &mut rng)];
    inputs.extend(
        state
            .params
            .values()
            .map(|p| Tensor::new(p.shape.clone(), p.data.clone()).expect("finite")),
    );
    let r = gradient_check_with(
        |t| {
            let p = BoundParams::from_tensors(&cfg, &t[1..]).map_err(model_err)?;
            let outs = forward_train_with(&p, &t[0], &[0, 1], &[1, 0]).map_err(model_err)?;
            let mut total = Tensor::scalar(0.0)?;
            for o in &outs {
                total = total.add(&o.embedding.sum()?)?;
                if let Some(l) = &o.logits {
                    total = total.add(&l.sum()?)?;
                }
            }
            Ok(total)
        },
        &inputs,
        opts,
    )?;
    Ok(check("model", seed, r))
}

/// Runs the blocks in `scope` for one seed.
pub fn gradient_suite(scope: Scope, seed: u64, opts: GradCheckOptions) -> Result<Vec<BlockCheck>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::All | Scope::Lka) {
        out.push(check_lka(seed, opts)?);
    }
    if matches!(scope, Scope::All | Scope::Hca) {
        out.push(check_hca(seed, opts)?);
    }
    if matches!(scope, Scope::All | Scope::Losses) {
        out.push(check_cross_entropy(seed, opts)?);
        out.push(check_triplet(seed, opts)?);
    }
    if matches!(scope, Scope::All | Scope::Model) {
        out.push(check_model(seed, opts)?);
    }
    Ok(out)
}
