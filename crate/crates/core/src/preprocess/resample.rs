use crate::metaimage::{CtVolume, ElementType, VolumeMeta};

use super::{PreprocessError, Result};

/// Per-axis resampling factor `R = S / S'` between a source and target spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleSpec {
    pub source_spacing: [f64; 3],
    pub target_spacing: [f64; 3],
    pub factor: [f64; 3],
}

impl ResampleSpec {
    pub fn new(source_spacing: [f64; 3], target_spacing: [f64; 3]) -> Result<Self> {
        for (name, s) in [("source", source_spacing), ("target", target_spacing)] {
            if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(PreprocessError::InvalidSpacing(format!(
                    "{name} spacing {s:?}"
                )));
            }
        }
        Ok(ResampleSpec {
            source_spacing,
            target_spacing,
            factor: std::array::from_fn(|i| source_spacing[i] / target_spacing[i]),
        })
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|i| ((dims[i] as f64 * self.factor[i]).round() as usize).max(1))
    }

    pub fn is_identity(&self) -> bool {
        self.factor.iter().all(|&r| r == 1.0)
    }
}

/// Linear interpolation weights along one axis, clamped to the valid index range.
fn axis_taps(out_len: usize, in_len: usize, factor: f64) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let s = (o as f64 / factor).clamp(0.0, (in_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling to `target_spacing`. The origin is kept; output voxel
/// `o` samples source coordinate `o / R` per axis.
pub fn resample(vol: &CtVolume, target_spacing: [f64; 3]) -> Result<(CtVolume, ResampleSpec)> {
    let spec = ResampleSpec::new(vol.meta.spacing, target_spacing)?;
    if spec.is_identity() {
        return Ok((vol.clone(), spec));
    }
    let [dz, dy, dx] = vol.meta.dims;
    let out_dims = spec.output_dims(vol.meta.dims);
    let tz = axis_taps(out_dims[0], dz, spec.factor[0]);
    let ty = axis_taps(out_dims[1], dy, spec.factor[1]);
    let tx = axis_taps(out_dims[2], dx, spec.factor[2]);

    let mut voxels = Vec::with_capacity(out_dims.iter().product());
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let lerp_x = |z: usize, y: usize| {
                    let a = vol.get(z, y, x0) as f64;
                    let b = vol.get(z, y, x1) as f64;
                    a + (b - a) * fx
                };
                let plane = |z: usize| {
                    let a = lerp_x(z, y0);
                    let b = lerp_x(z, y1);
                    a + (b - a) * fy
                };
                let a = plane(z0);
                let b = plane(z1);
                voxels.push((a + (b - a) * fz) as f32);
            }
        }
    }
    let meta = VolumeMeta {
        dims: out_dims,
        spacing: target_spacing,
        origin: vol.meta.origin,
        element_type: ElementType::F32,
        byte_order: vol.meta.byte_order,
    };
    Ok((CtVolume { meta, voxels }, spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(
        dims: [usize; 3],
        spacing: [f64; 3],
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> CtVolume {
        let meta = VolumeMeta::new(dims, spacing, [0.0; 3], ElementType::F32).unwrap();
        let mut v = Vec::new();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    v.push(f(z, y, x));
                }
            }
        }
        CtVolume::new(meta, v).unwrap()
    }

    #[test]
    fn identity_when_spacing_matches() {
        let vol = volume([3, 4, 5], [2.5, 0.7, 0.7], |z, y, x| {
            (z * 100 + y * 10 + x) as f32 * 0.37
        });
        let (out, spec) = resample(&vol, [2.5, 0.7, 0.7]).unwrap();
        assert_eq!(spec.factor, [1.0; 3]);
        assert_eq!(out, vol);
    }

    #[test]
    fn luna_like_geometry() {
        let spec = ResampleSpec::new([2.5, 0.7, 0.7], [1.0; 3]).unwrap();
        assert_eq!(spec.factor, [2.5, 0.7, 0.7]);
        assert_eq!(spec.output_dims([100, 512, 512]), [250, 358, 358]);
    }

    #[test]
    fn ramp_midpoints_are_means() {
        let vol = volume([5, 2, 2], [2.0, 1.0, 1.0], |z, _, _| (z * z) as f32);
        let (out, _) = resample(&vol, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.meta.dims, [10, 2, 2]);
        for o in 0..9 {
            let s = o as f64 / 2.0;
            let expect = if o % 2 == 0 {
                (s * s) as f32
            } else {
                let (a, b) = (s.floor(), s.ceil());
                ((a * a + b * b) / 2.0) as f32
            };
            assert_eq!(out.get(o, 1, 0), expect, "o = {o}");
        }
    }

    #[test]
    fn rejects_non_positive_target() {
        let vol = volume([2, 2, 2], [1.0; 3], |_, _, _| 0.0);
        assert!(resample(&vol, [1.0, 0.0, 1.0]).is_err());
        assert!(resample(&vol, [1.0, 1.0, -2.0]).is_err());
    }
}
