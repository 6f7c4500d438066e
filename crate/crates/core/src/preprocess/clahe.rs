//! Contrast-limited adaptive histogram equalization on `[0, 1]` images.

use serde::{Deserialize, Serialize};

use crate::image::Image;

use super::{PreprocessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    /// `(rows, cols)`
    pub tile_grid: (usize, usize),
    /// Clip height as a multiple of the uniform bin height `tile_pixels / bin_count`.
    pub clip_limit: f64,
    pub bin_count: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            tile_grid: (8, 8),
            clip_limit: 2.0,
            bin_count: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tile_grid.0 < 1
            || self.tile_grid.1 < 1
            || !(self.clip_limit >= 1.0)
            || self.bin_count < 2
        {
            return Err(PreprocessError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

#[inline]
fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

/// Equalization lookup table of one tile after clipping and uniform redistribution.
fn tile_lut(img: &Image, ys: (usize, usize), xs: (usize, usize), params: &ClaheParams) -> Vec<f64> {
    let bins = params.bin_count;
    let mut hist = vec![0.0f64; bins];
    for y in ys.0..ys.1 {
        for x in xs.0..xs.1 {
            hist[bin_of(img.get(y, x), bins)] += 1.0;
        }
    }
    let n = ((ys.1 - ys.0) * (xs.1 - xs.0)) as f64;
    let limit = params.clip_limit * n / bins as f64;
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / bins as f64;
    let mut acc = 0.0;
    hist.iter()
        .map(|&h| {
            acc += h + share;
            (acc / n).min(1.0)
        })
        .collect()
}

/// Tile `k` of `count` along an axis of length `len` covers `[k*len/count, (k+1)*len/count)`.
fn bounds(k: usize, count: usize, len: usize) -> (usize, usize) {
    (k * len / count, (k + 1) * len / count)
}

/// CLAHE with bilinear blending between neighbouring tile mappings.
pub fn clahe(img: &Image, params: &ClaheParams) -> Result<Image> {
    params.validate()?;
    let (rows, cols) = params.tile_grid;
    if rows > img.height || cols > img.width {
        return Err(PreprocessError::InvalidParams(format!(
            "tile grid {rows}x{cols} larger than image {}x{}",
            img.height, img.width
        )));
    }
    let luts: Vec<Vec<f64>> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| {
            tile_lut(
                img,
                bounds(r, rows, img.height),
                bounds(c, cols, img.width),
                params,
            )
        })
        .collect();
    let center = |k: usize, count: usize, len: usize| {
        let (a, b) = bounds(k, count, len);
        (a + b) as f64 / 2.0 - 0.5
    };
    let row_centers: Vec<f64> = (0..rows).map(|r| center(r, rows, img.height)).collect();
    let col_centers: Vec<f64> = (0..cols).map(|c| center(c, cols, img.width)).collect();

    // Neighbouring tile pair and blend weight along one axis.
    let taps = |p: f64, centers: &[f64]| -> (usize, usize, f64) {
        if p <= centers[0] {
            return (0, 0, 0.0);
        }
        let last = centers.len() - 1;
        if p >= centers[last] {
            return (last, last, 0.0);
        }
        let k = centers.iter().rposition(|&c| c <= p).unwrap_or(0);
        (k, k + 1, (p - centers[k]) / (centers[k + 1] - centers[k]))
    };

    let mut out = Image::filled(img.height, img.width, 0.0);
    for y in 0..img.height {
        let (r0, r1, fy) = taps(y as f64, &row_centers);
        for x in 0..img.width {
            let (c0, c1, fx) = taps(x as f64, &col_centers);
            let b = bin_of(img.get(y, x), params.bin_count);
            let at = |r: usize, c: usize| luts[r * cols + c][b];
            let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
            let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
            out.set(
                y,
                x,
                (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32,
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(32, 32, 0.4);
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        let first = out.pixels[0];
        assert!(out.pixels.iter().all(|&v| v == first));
    }

    #[test]
    fn grid_larger_than_image_fails() {
        let img = Image::filled(4, 4, 0.0);
        assert!(clahe(&img, &ClaheParams::default()).is_err());
    }

    #[test]
    fn single_tile_unclipped_is_global_equalization() {
        // Independent oracle: rank-based cumulative distribution on the quantized values.
        let img = Image::new(
            8,
            8,
            (0..64)
                .map(|i| ((i * 37 % 64) as f32 / 63.0).powi(2))
                .collect(),
        );
        let params = ClaheParams {
            tile_grid: (1, 1),
            clip_limit: 1e9,
            bin_count: 16,
        };
        let out = clahe(&img, &params).unwrap();
        let q = |v: f32| ((v * 16.0) as usize).min(15);
        for (i, &v) in img.pixels.iter().enumerate() {
            let below = img.pixels.iter().filter(|&&u| q(u) <= q(v)).count();
            assert!((out.pixels[i] as f64 - below as f64 / 64.0).abs() < 1e-6);
        }
    }

    #[test]
    fn output_stays_in_unit_range() {
        let img = Image::new(
            40,
            24,
            (0..960)
                .map(|i| ((i * 7919) % 1000) as f32 / 999.0)
                .collect(),
        );
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
