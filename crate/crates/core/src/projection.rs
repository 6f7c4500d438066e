//! Slab maximum intensity projection and projection of nodule annotations
//! onto slab images.

use std::ops::Range;

use thiserror::Error;

use crate::image::Image;
use crate::metaimage::{world_to_voxel, CtVolume, NoduleAnnotation, VolumeMeta};

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("slab starting at slice {start} lies outside a volume of {depth} slices")]
    OutsideVolume { start: usize, depth: usize },
    #[error("thickness and stride must be positive (got {thickness} / {stride})")]
    InvalidSlab { thickness: f64, stride: f64 },
    #[error("retained z-range is empty")]
    EmptyRange,
}

pub type Result<T> = std::result::Result<T, ProjectionError>;

/// Normalized center-size box with the diameter of the nodule it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub diameter_mm: f64,
}

impl GroundTruthBox {
    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }
}

/// One slab of the partition: the slices it collapses and its world z-interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SlabRange {
    pub slices: Range<usize>,
    /// Half-open world interval `[lo, hi)` in mm.
    pub z_range_mm: (f64, f64),
}

/// A projected slab.
#[derive(Debug, Clone, PartialEq)]
pub struct MipSlab {
    pub scan_id: String,
    pub slab_index: usize,
    pub z_range_mm: (f64, f64),
    pub image: Image,
    pub boxes: Vec<GroundTruthBox>,
}

/// Per-pixel maximum over the slices in `slices`.
pub fn mip_range(vol: &CtVolume, slices: Range<usize>) -> Result<Image> {
    let depth = vol.meta.dims[0];
    if slices.start >= depth || slices.is_empty() {
        return Err(ProjectionError::OutsideVolume {
            start: slices.start,
            depth,
        });
    }
    let end = slices.end.min(depth);
    let mut out = vol.slice(slices.start).to_vec();
    for z in slices.start + 1..end {
        for (o, &v) in out.iter_mut().zip(vol.slice(z)) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(Image::new(vol.meta.dims[1], vol.meta.dims[2], out))
}

/// Number of slices a slab of `thickness_mm` spans at `spacing_z`.
pub fn slab_depth(thickness_mm: f64, spacing_z: f64) -> usize {
    // tolerate representation error such as 7.5 / 2.5 = 3.0000000000000004
    ((thickness_mm / spacing_z) - 1e-9).ceil().max(1.0) as usize
}

/// MIP of the slab beginning at `z_start` spanning `ceil(thickness / spacing_z)`
/// slices, clipped at the end of the volume.
pub fn mip(vol: &CtVolume, z_start: usize, thickness_mm: f64) -> Result<Image> {
    let n = slab_depth(thickness_mm, vol.meta.spacing[0]);
    mip_range(vol, z_start..z_start + n)
}

/// Tile the retained slices with slabs of `thickness_mm`, one every `stride_mm`.
///
/// Slab `k` covers world z `[lo + k*stride, lo + k*stride + thickness)` where
/// `lo` is the lower edge of the first retained slice; a slice belongs to a
/// slab when its center falls inside. Full slabs are emitted while they fit.
/// If they leave the end of the range uncovered, one trailing partial slab is
/// added when it covers at least half the thickness.
pub fn slab_partition(
    meta: &VolumeMeta,
    retained: Range<usize>,
    thickness_mm: f64,
    stride_mm: f64,
) -> Result<Vec<SlabRange>> {
    if !(thickness_mm > 0.0) || !(stride_mm > 0.0) {
        return Err(ProjectionError::InvalidSlab {
            thickness: thickness_mm,
            stride: stride_mm,
        });
    }
    if retained.is_empty() {
        return Err(ProjectionError::EmptyRange);
    }
    const EPS: f64 = 1e-9;
    let sz = meta.spacing[0];
    let lo = meta.origin[0] + (retained.start as f64 - 0.5) * sz;
    let length = retained.len() as f64 * sz;

    let slab = |offset: f64, len: f64| -> SlabRange {
        let (a, b) = (lo + offset, lo + offset + len);
        let contains = |i: usize| {
            let c = meta.origin[0] + i as f64 * sz;
            c >= a - EPS && c < b - EPS
        };
        let first = retained
            .clone()
            .find(|&i| contains(i))
            .unwrap_or(retained.end);
        let last = retained
            .clone()
            .rev()
            .find(|&i| contains(i))
            .map_or(first, |i| i + 1);
        SlabRange {
            slices: first..last.max(first),
            z_range_mm: (a, b),
        }
    };

    let mut out = Vec::new();
    let mut k = 0usize;
    while k as f64 * stride_mm + thickness_mm <= length + EPS {
        out.push(slab(k as f64 * stride_mm, thickness_mm));
        k += 1;
    }
    let covered = if k == 0 {
        0.0
    } else {
        (k - 1) as f64 * stride_mm + thickness_mm
    };
    if covered < length - EPS {
        let offset = k as f64 * stride_mm;
        let remaining = length - offset;
        if remaining >= thickness_mm / 2.0 - EPS {
            out.push(slab(offset, thickness_mm));
        }
    }
    out.retain(|s| !s.slices.is_empty());
    Ok(out)
}

/// Minimum box side in pixels.
pub const MIN_BOX_PIXELS: f64 = 8.0;

/// Box for `nodule` on a slab covering `z_range_mm`, or `None` when the
/// nodule's z-center lies outside the slab. `image_dims` is `(height, width)`
/// of the slab image, which may be padded beyond the volume's in-plane size.
pub fn project_annotation(
    nodule: &NoduleAnnotation,
    z_range_mm: (f64, f64),
    meta: &VolumeMeta,
    image_dims: (usize, usize),
) -> Option<GroundTruthBox> {
    let [wz, wy, wx] = nodule.center_zyx();
    if !(wz >= z_range_mm.0 && wz < z_range_mm.1) {
        return None;
    }
    let [_, vy, vx] = world_to_voxel([wz, wy, wx], meta);
    let (h_px, w_px) = (image_dims.0 as f64, image_dims.1 as f64);
    let side_x = (nodule.diameter_mm / meta.spacing[2]).max(MIN_BOX_PIXELS);
    let side_y = (nodule.diameter_mm / meta.spacing[1]).max(MIN_BOX_PIXELS);
    let (cx, cy) = ((vx + 0.5) / w_px, (vy + 0.5) / h_px);
    let (hw, hh) = (side_x / w_px / 2.0, side_y / h_px / 2.0);
    let x0 = (cx - hw).clamp(0.0, 1.0);
    let x1 = (cx + hw).clamp(0.0, 1.0);
    let y0 = (cy - hh).clamp(0.0, 1.0);
    let y1 = (cy + hh).clamp(0.0, 1.0);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some(GroundTruthBox {
        cx: (x0 + x1) / 2.0,
        cy: (y0 + y1) / 2.0,
        w: x1 - x0,
        h: y1 - y0,
        diameter_mm: nodule.diameter_mm,
    })
}
