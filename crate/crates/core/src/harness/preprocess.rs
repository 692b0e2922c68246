//! Routing of each modality into the configured image space.

use super::config::AgmMode;
use crate::datapipe::ImageSet;
use crate::error::{AgmError, Result};
use crate::ganstyle::{self, GanModel};
use crate::imaging::{self, mean_channel_spread, GrayscaleCoeffs, Image, Modality};

/// Applies `mode` to every image: visible images are converted to grayscale
/// in the gray modes and infrared images are translated in the `+gn`
/// modes. Records keep the capturing sensor's modality, so sampling and
/// query/gallery splits are unaffected; only the rasters change.
pub fn preprocess_agm(set: &ImageSet, mode: AgmMode, gn: Option<&GanModel>) -> Result<ImageSet> {
    let gn = match (mode.needs_gn(), gn) {
        (true, None) => {
            return Err(AgmError::Config(format!("mode {mode} needs a trained translation checkpoint")));
        }
        (true, Some(m)) => Some(m),
        (false, _) => None,
    };
    let coeffs = GrayscaleCoeffs::default();
    let mut images = set.images.clone();
    if mode.grays_visible() {
        for img in images.iter_mut().filter(|i| i.modality == Modality::Visible) {
            *img = imaging::to_grayscale(img, &coeffs)?;
        }
    }
    if let Some(model) = gn {
        let positions: Vec<usize> = (0..images.len())
            .filter(|&i| images[i].modality == Modality::Infrared)
            .collect();
        let ir: Vec<Image> = positions.iter().map(|&i| images[i].clone()).collect();
        let translated = ganstyle::apply_gn(model, &ir)?;
        for (&i, t) in positions.iter().zip(translated) {
            images[i] = t;
        }
    }
    Ok(ImageSet {
        index: set.index.clone(),
        images,
    })
}

/// Absolute difference between the mean channel spread of images captured
/// by visible sensors and those captured by infrared sensors.
pub fn modality_gap(set: &ImageSet) -> f64 {
    let pick = |infrared: bool| -> Vec<Image> {
        set.index
            .records
            .iter()
            .zip(&set.images)
            .filter(|(r, _)| (r.modality == Modality::Infrared) == infrared)
            .map(|(_, i)| i.clone())
            .collect()
    };
    (mean_channel_spread(&pick(false)) - mean_channel_spread(&pick(true))).abs()
}
