//! Cross-modality evaluation of a trained checkpoint.

use std::path::Path;

use super::model::ReidCheckpoint;
use super::preprocess::preprocess_agm;
use crate::backbone::EmbeddingBatch;
use crate::datapipe::ImageSet;
use crate::error::{AgmError, Result};
use crate::imaging::Modality;
use crate::metrics::{self, ExclusionMask, MetricsReport};

/// Infrared images as queries against visible (or grayscale) images as the
/// gallery.
pub fn cross_modality_split(set: &ImageSet) -> (ImageSet, ImageSet) {
    let query = set.select(|r| r.modality == Modality::Infrared);
    let gallery = set.select(|r| r.modality != Modality::Infrared);
    (query, gallery)
}

/// Excludes gallery items captured by the query's camera. Items without a
/// camera are never excluded.
pub fn same_camera_mask(query: &ImageSet, gallery: &ImageSet) -> ExclusionMask {
    query
        .index
        .records
        .iter()
        .map(|q| {
            gallery
                .index
                .records
                .iter()
                .map(|g| q.camera.is_some() && q.camera == g.camera)
                .collect()
        })
        .collect()
}

/// Retrieval embeddings for a set under the checkpoint's image-space mode,
/// labelled with the on-disk identity so independently loaded query and
/// gallery sets compare correctly.
pub fn embed_set(ckpt: &ReidCheckpoint, set: &ImageSet) -> Result<EmbeddingBatch> {
    if set.is_empty() {
        return Err(AgmError::Data("cannot embed an empty image set".into()));
    }
    let (h, w) = ckpt.config.global_size;
    let prepped = preprocess_agm(&set.resized(h, w)?, ckpt.config.mode, ckpt.gn.as_ref())?;
    let mut images = prepped.images;
    for (img, r) in images.iter_mut().zip(&set.index.records) {
        img.identity = r.original_id;
    }
    ckpt.model.embed_images(&images)
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub query: EmbeddingBatch,
    pub gallery: EmbeddingBatch,
}

pub fn evaluate(
    ckpt: &ReidCheckpoint,
    query: &ImageSet,
    gallery: &ImageSet,
    exclusion: Option<&ExclusionMask>,
) -> Result<Evaluation> {
    let q = embed_set(ckpt, query)?;
    let g = embed_set(ckpt, gallery)?;
    let ranking = metrics::rank(&q, &g, exclusion)?;
    Ok(Evaluation {
        report: MetricsReport::from_ranking(&ranking),
        query: q,
        gallery: g,
    })
}

/// Pretty-printed metrics JSON with a trailing newline.
pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| AgmError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(report).expect("metrics serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| AgmError::io(path, e))
}
