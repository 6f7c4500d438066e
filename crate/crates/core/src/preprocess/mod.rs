//! Lung-isolating preprocessing: resampling, windowing, Otsu segmentation,
//! morphological cleanup, peripheral-slice removal and CLAHE.

mod clahe;
mod morphology;
mod otsu;
mod resample;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::metaimage::{CtVolume, ElementType, VolumeMeta};

pub use clahe::{clahe, ClaheParams};
pub use morphology::{
    connected_components, disk, erode, fill_holes, lung_mask, remove_peripheral_slices, BinaryMask,
    Components, Connectivity, LungMask,
};
pub use otsu::{histogram, otsu_bin, otsu_threshold};
pub use resample::{resample, ResampleSpec};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid spacing: {0}")]
    InvalidSpacing(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("input is constant; no threshold separates it")]
    ConstantInput,
    #[error("no slice contains lung tissue")]
    EmptyScan,
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    pub target_spacing: [f64; 3],
    /// HU window `[lo, hi]` applied before thresholding.
    pub window: [f64; 2],
    pub otsu_bins: usize,
    pub erosion_radius: usize,
    pub area_fraction_min: f64,
    pub clahe: ClaheParams,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            target_spacing: [1.0, 1.0, 1.0],
            window: [-1000.0, 400.0],
            otsu_bins: 256,
            erosion_radius: 2,
            area_fraction_min: 0.03,
            clahe: ClaheParams::default(),
        }
    }
}

/// What happened to one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub scan_id: String,
    pub threshold_hu: f64,
    /// Retained slice range in the resampled volume.
    pub retained_start: usize,
    pub retained_end: usize,
    pub input_nonzero: usize,
    pub output_nonzero: usize,
    pub reduction_ratio: f64,
}

impl PreprocessReport {
    pub fn retained(&self) -> Range<usize> {
        self.retained_start..self.retained_end
    }
}

/// Clamp to the window and rescale to `[0, 1]`.
pub fn window_normalize(v: f32, window: [f64; 2]) -> f32 {
    let [lo, hi] = window;
    ((v as f64).clamp(lo, hi) - lo) as f32 / (hi - lo) as f32
}

/// Full per-scan preprocessing. The output is an `F32` volume in `[0, 1]`
/// restricted to the retained slices, with everything outside the lung mask
/// set to zero.
pub fn preprocess_scan(
    scan_id: &str,
    vol: &CtVolume,
    params: &PreprocessParams,
) -> Result<(CtVolume, PreprocessReport)> {
    let [lo, hi] = params.window;
    if !(hi > lo) {
        return Err(PreprocessError::InvalidParams(format!(
            "window {:?}",
            params.window
        )));
    }
    params.clahe.validate()?;
    let (resampled, _) = resample(vol, params.target_spacing)?;
    let [dz, dy, dx] = resampled.meta.dims;

    let windowed: Vec<f32> = resampled
        .voxels
        .iter()
        .map(|&v| (v as f64).clamp(lo, hi) as f32)
        .collect();
    // One threshold for the whole scan keeps the masks consistent across slices.
    let threshold = otsu_threshold(&windowed, params.otsu_bins)?;

    let slice_len = dy * dx;
    let masks: Vec<LungMask> = (0..dz)
        .map(|z| {
            lung_mask(
                &windowed[z * slice_len..(z + 1) * slice_len],
                dy,
                dx,
                threshold,
                params.erosion_radius,
            )
        })
        .collect();
    let areas: Vec<usize> = masks.iter().map(|m| m.mask.area()).collect();
    let retained = remove_peripheral_slices(&areas, params.area_fraction_min)
        .ok_or(PreprocessError::EmptyScan)?;

    let normalized = |v: f32| window_normalize(v, params.window);
    let input_nonzero = windowed.iter().filter(|&&v| normalized(v) > 0.0).count();

    let mut voxels = Vec::with_capacity(retained.len() * slice_len);
    for z in retained.clone() {
        let src = &windowed[z * slice_len..(z + 1) * slice_len];
        let mask = &masks[z].mask;
        let masked: Vec<f32> = src
            .iter()
            .zip(&mask.bits)
            .map(|(&v, &m)| if m { normalized(v) } else { 0.0 })
            .collect();
        let enhanced = clahe(&Image::new(dy, dx, masked), &params.clahe)?;
        voxels.extend(
            enhanced
                .pixels
                .iter()
                .zip(&mask.bits)
                .map(|(&v, &m)| if m { v } else { 0.0 }),
        );
    }
    let output_nonzero = voxels.iter().filter(|&&v| v > 0.0).count();

    let mut origin = resampled.meta.origin;
    origin[0] += retained.start as f64 * resampled.meta.spacing[0];
    let meta = VolumeMeta {
        dims: [retained.len(), dy, dx],
        spacing: resampled.meta.spacing,
        origin,
        element_type: ElementType::F32,
        byte_order: resampled.meta.byte_order,
    };
    let report = PreprocessReport {
        scan_id: scan_id.to_string(),
        threshold_hu: threshold as f64,
        retained_start: retained.start,
        retained_end: retained.end,
        input_nonzero,
        output_nonzero,
        reduction_ratio: if input_nonzero == 0 {
            0.0
        } else {
            output_nonzero as f64 / input_nonzero as f64
        },
    };
    Ok((CtVolume { meta, voxels }, report))
}
