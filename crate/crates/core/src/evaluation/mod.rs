//! Retrieval evaluation: cosine ranking, same-camera junk filtering, mAP and
//! CMC.

mod manifest;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_image, ImageSet};
use crate::model::{extract_features_batched, ModelError, ModelState};

pub use manifest::{
    format_manifest, load_manifest, parse_manifest, parse_veri_filename, Manifest, Sample, Split,
    MANIFEST_FORMAT_VERSION,
};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("manifest has no samples")]
    EmptyManifest,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Image { path: String, message: String },
    #[error("row {index} of the {side} features has zero norm")]
    ZeroNorm { side: &'static str, index: usize },
    #[error("feature dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0} sample(s) have no feature")]
    MissingFeature(&'static str),
    #[error("no relevant entries in the ranking")]
    NoRelevant,
    #[error("all {0} queries have no valid positive in the gallery")]
    AllSkipped(usize),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn norms(rows: &[Vec<f64>], side: &'static str) -> Result<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(index, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                Ok(n)
            } else {
                Err(EvalError::ZeroNorm { side, index })
            }
        })
        .collect()
}

/// `(Q, G)` matrix of cosine similarities.
pub fn pairwise_cosine(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = queries.first().or(gallery.first()).map_or(0, Vec::len);
    if let Some(bad) = queries.iter().chain(gallery).find(|r| r.len() != dim) {
        return Err(EvalError::Dimension(format!("row of length {} vs {dim}", bad.len())));
    }
    let qn = norms(queries, "query")?;
    let gn = norms(gallery, "gallery")?;
    Ok(queries
        .iter()
        .zip(&qn)
        .map(|(q, a)| {
            gallery
                .iter()
                .zip(&gn)
                .map(|(g, b)| (q.iter().zip(g).map(|(x, y)| x * y).sum::<f64>() / (a * b)).clamp(-1.0, 1.0))
                .collect()
        })
        .collect())
}

/// `true` for gallery entries that take part in ranking: everything except
/// images of the query's vehicle taken by the query's camera.
pub fn apply_protocol_filter(query: &Sample, gallery: &[Sample]) -> Vec<bool> {
    gallery
        .iter()
        .map(|g| !(g.vehicle_id == query.vehicle_id && g.camera_id == query.camera_id))
        .collect()
}

/// Mean of the precision at each relevant position of a ranked list.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(EvalError::NoRelevant);
    }
    Ok(sum / hits as f64)
}

/// `cmc[r-1]` is the fraction of rankings whose first relevant entry is at
/// rank `r` or better.
pub fn cmc_curve<R: AsRef<[bool]>>(rankings: &[R], max_rank: usize) -> Vec<f64> {
    let mut counts = vec![0usize; max_rank];
    for r in rankings {
        if let Some(first) = r.as_ref().iter().position(|&x| x) {
            if first < max_rank {
                counts[first] += 1;
            }
        }
    }
    let n = rankings.len().max(1) as f64;
    let mut acc = 0;
    counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Length of the reported CMC curve; at least 5.
    pub max_rank: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_rank: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub similarity: String,
    pub junk: String,
    pub tie_break: String,
    pub max_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub rank5: f64,
    /// One entry per query, `null` where the query was skipped.
    pub per_query_ap: Vec<Option<f64>>,
    pub skipped_queries: usize,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub protocol: Protocol,
}

/// Relevance of the valid gallery entries for one query, ranked by
/// descending similarity with ties in gallery order. `None` if the query
/// has no valid positive.
fn ranked_relevance(query: &Sample, gallery: &[Sample], sims: &[f64]) -> Option<Vec<bool>> {
    let valid = apply_protocol_filter(query, gallery);
    let mut order: Vec<usize> = (0..gallery.len()).filter(|&j| valid[j]).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let rel: Vec<bool> = order
        .iter()
        .map(|&j| gallery[j].vehicle_id == query.vehicle_id)
        .collect();
    rel.contains(&true).then_some(rel)
}

/// Scores precomputed features; `query_features[i]` belongs to `query[i]`.
pub fn evaluate_features(
    query: &[Sample],
    query_features: &[Vec<f64>],
    gallery: &[Sample],
    gallery_features: &[Vec<f64>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.max_rank < 5 {
        return Err(EvalError::Config(format!("max_rank {} is below 5", cfg.max_rank)));
    }
    if query.is_empty() || gallery.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    if query.len() != query_features.len() || gallery.len() != gallery_features.len() {
        return Err(EvalError::Dimension("sample and feature counts differ".into()));
    }
    let sims = pairwise_cosine(query_features, gallery_features)?;
    evaluate_similarities(query, gallery, &sims, cfg)
}

/// Scores a precomputed `(Q, G)` similarity matrix, higher meaning closer.
pub fn evaluate_similarities(
    query: &[Sample],
    gallery: &[Sample],
    sims: &[Vec<f64>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.max_rank < 5 {
        return Err(EvalError::Config(format!("max_rank {} is below 5", cfg.max_rank)));
    }
    if query.is_empty() || gallery.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    if sims.len() != query.len() || sims.iter().any(|r| r.len() != gallery.len()) {
        return Err(EvalError::Dimension(
            "similarity matrix does not match the sample counts".into(),
        ));
    }
    if sims.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::Dimension("similarity matrix has non-finite entries".into()));
    }
    let rankings: Vec<Option<Vec<bool>>> = query
        .par_iter()
        .zip(sims.par_iter())
        .map(|(q, s)| ranked_relevance(q, gallery, s))
        .collect();
    let scored: Vec<&Vec<bool>> = rankings.iter().flatten().collect();
    if scored.is_empty() {
        return Err(EvalError::AllSkipped(query.len()));
    }
    let per_query_ap = rankings
        .par_iter()
        .map(|r| r.as_ref().map(|r| average_precision(r)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let map = per_query_ap.iter().flatten().sum::<f64>() / scored.len() as f64;
    let cmc = cmc_curve(&scored, cfg.max_rank);
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        map,
        rank1: cmc[0],
        rank5: cmc[4],
        cmc,
        per_query_ap,
        skipped_queries: query.len() - scored.len(),
        num_queries: query.len(),
        num_gallery: gallery.len(),
        protocol: Protocol {
            similarity: "cosine".into(),
            junk: "same vehicle_id and camera_id".into(),
            tie_break: "gallery order".into(),
            max_rank: cfg.max_rank,
        },
    })
}

/// Feature rows of a manifest's samples.
pub enum FeatureSource<'a> {
    /// Every sample carries a `feature`.
    Precomputed,
    /// Images are loaded from each sample's `path` and embedded.
    Model { state: &'a ModelState, batch: usize },
}

fn manifest_features(m: &Manifest, side: &'static str, source: &FeatureSource) -> Result<Vec<Vec<f64>>> {
    match source {
        FeatureSource::Precomputed => m
            .samples
            .iter()
            .map(|s| s.feature.clone().ok_or(EvalError::MissingFeature(side)))
            .collect(),
        FeatureSource::Model { state, batch } => {
            let set = load_images(m, state.config.input_size)?;
            Ok(extract_features_batched(
                state,
                &set.all().map_err(ModelError::from)?,
                *batch,
            )?)
        }
    }
}

/// Loads and resizes every sample's image, resolving relative paths against
/// the manifest's directory.
pub fn load_images(m: &Manifest, (h, w): (usize, usize)) -> Result<ImageSet> {
    let images: Vec<Vec<f64>> = m
        .samples
        .par_iter()
        .map(|s| {
            let rel = s.path.as_deref().ok_or(EvalError::MissingFeature("image path"))?;
            let path = m.root.join(Path::new(rel));
            load_image(&path, h, w).map_err(|e| EvalError::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    let mut set = ImageSet::new(h, w);
    for (img, s) in images.into_iter().zip(&m.samples) {
        set.push(img, s.vehicle_id, s.camera_id, s.view_id.unwrap_or(0))
            .map_err(ModelError::from)?;
    }
    Ok(set)
}

pub fn evaluate(source: &FeatureSource, query: &Manifest, gallery: &Manifest, cfg: &EvalConfig) -> Result<EvalReport> {
    let qf = manifest_features(query, "query", source)?;
    let gf = manifest_features(gallery, "gallery", source)?;
    if let (Some(a), Some(b)) = (qf.first(), gf.first()) {
        if a.len() != b.len() {
            return Err(EvalError::Dimension(format!(
                "query dim {} vs gallery dim {}",
                a.len(),
                b.len()
            )));
        }
    }
    evaluate_features(&query.samples, &qf, &gallery.samples, &gf, cfg)
}

/// Scores a model on an in-memory query/gallery split.
pub fn evaluate_model(
    state: &ModelState,
    data: &ImageSet,
    query: &[usize],
    gallery: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let feats = extract_features_batched(state, &data.all().map_err(ModelError::from)?, 64)?;
    let sample = |i: usize| Sample {
        path: None,
        feature: None,
        vehicle_id: data.labels[i],
        camera_id: data.cameras[i],
        view_id: Some(data.views[i]),
    };
    let qs: Vec<Sample> = query.iter().map(|&i| sample(i)).collect();
    let gs: Vec<Sample> = gallery.iter().map(|&i| sample(i)).collect();
    let qf: Vec<Vec<f64>> = query.iter().map(|&i| feats[i].clone()).collect();
    let gf: Vec<Vec<f64>> = gallery.iter().map(|&i| feats[i].clone()).collect();
    evaluate_features(&qs, &qf, &gs, &gf, cfg)
}
