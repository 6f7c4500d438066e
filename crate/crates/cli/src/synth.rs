//! Synthetic chest phantoms: an elliptical body with two air-filled lungs
//! holding bright spheres (nodules, annotated) and bright in-plane cylinders
//! (vessels, not annotated). In a slab projection a nodule shows up as a
//! compact disk and a vessel as an elongated bar.
//!
//! The lungs run through every slice, so preprocessing keeps the whole scan
//! and the slab grid starts at the lower edge of the first slice. Nodules are
//! centered in a grid slab and are thinner than it, so each one is visible in
//! exactly the slab its annotation is assigned to.

use std::f64::consts::PI;

use lung_detr::metaimage::{CtVolume, ElementType, NoduleAnnotation, VolumeMeta};
use lung_detr::rng::{derived, DetRng};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const AIR_HU: f64 = -1000.0;
const TISSUE_HU: f64 = 40.0;
const LUNG_HU: f64 = -850.0;
const LESION_HU: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Number of scans.
    pub scans: usize,
    /// Slices per scan.
    pub slices: usize,
    /// In-plane size in pixels (square).
    pub size: usize,
    /// Voxel spacing `(z, y, x)` in mm.
    pub spacing: [f64; 3],
    /// Inclusive range of nodules per scan.
    pub nodules: [usize; 2],
    pub nodule_diameter_mm: [f64; 2],
    /// Inclusive range of vessels per scan.
    pub vessels: [usize; 2],
    pub vessel_radius_mm: [f64; 2],
    pub vessel_length_mm: [f64; 2],
    /// Standard deviation of additive Gaussian noise.
    pub noise_hu: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            scans: 60,
            slices: 180,
            size: 80,
            spacing: [1.0, 0.8, 0.8],
            nodules: [1, 3],
            nodule_diameter_mm: [4.0, 6.5],
            vessels: [4, 8],
            vessel_radius_mm: [0.8, 1.6],
            vessel_length_mm: [10.0, 20.0],
            noise_hu: 15.0,
        }
    }
}

impl SynthParams {
    /// Checks that need no slab geometry.
    pub fn validate(&self) -> Result<(), String> {
        let range = |name: &str, r: [f64; 2]| {
            if r[0] > 0.0 && r[1] >= r[0] {
                Ok(())
            } else {
                Err(format!(
                    "synth.{name} must be a positive increasing range, got {r:?}"
                ))
            }
        };
        range("nodule_diameter_mm", self.nodule_diameter_mm)?;
        range("vessel_radius_mm", self.vessel_radius_mm)?;
        range("vessel_length_mm", self.vessel_length_mm)?;
        if self.nodules[0] > self.nodules[1] || self.vessels[0] > self.vessels[1] {
            return Err("synth count ranges must be increasing".into());
        }
        if self.slices < 8 || self.size < 32 {
            return Err(format!(
                "synth volume too small: {} slices of {}px",
                self.slices, self.size
            ));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) || !(self.noise_hu >= 0.0) {
            return Err("synth spacing must be positive and noise non-negative".into());
        }
        let fov = self.size as f64 * self.spacing[1].min(self.spacing[2]);
        if self.nodule_diameter_mm[1] > 0.3 * fov {
            return Err(format!(
                "nodules up to {} mm do not fit a {fov} mm field of view",
                self.nodule_diameter_mm[1]
            ));
        }
        Ok(())
    }

    /// Checks against the slab thickness the nodules are aligned to.
    pub fn validate_for_slabs(&self, slab_mm: f64) -> Result<(), String> {
        if self.nodule_diameter_mm[1] >= slab_mm {
            return Err(format!(
                "nodules up to {} mm do not fit inside {slab_mm} mm slabs",
                self.nodule_diameter_mm[1]
            ));
        }
        let slabs = (self.slices as f64 * self.spacing[0] / slab_mm).floor();
        if slabs < 3.0 {
            return Err(format!(
                "{} slices hold fewer than 3 slabs of {slab_mm} mm",
                self.slices
            ));
        }
        Ok(())
    }
}

pub fn scan_id(index: usize) -> String {
    format!("synth-{index:03}")
}

/// A generated scan and its nodule annotations.
#[derive(Debug, Clone)]
pub struct SynthScan {
    pub id: String,
    pub volume: CtVolume,
    pub nodules: Vec<NoduleAnnotation>,
}

/// Axis-aligned ellipse in the `(y, x)` plane, in world mm.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn shrunk(self, margin: f64) -> Ellipse {
        Ellipse {
            ry: (self.ry - margin).max(0.0),
            rx: (self.rx - margin).max(0.0),
            ..self
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        if self.ry <= 0.0 || self.rx <= 0.0 {
            return false;
        }
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        dy * dy + dx * dx <= 1.0
    }

    fn sample(&self, rng: &mut DetRng) -> (f64, f64) {
        let r = rng.random::<f64>().sqrt();
        let t = rng.random_range(0.0..2.0 * PI);
        (
            self.cy + r * self.ry * t.sin(),
            self.cx + r * self.rx * t.cos(),
        )
    }
}

struct Phantom {
    body: Ellipse,
    lungs: [Ellipse; 2],
    /// World z of the first and last slice centers.
    z_span: (f64, f64),
}

impl Phantom {
    fn new(p: &SynthParams, origin: [f64; 3]) -> Phantom {
        let fov = p.size as f64 * p.spacing[1].min(p.spacing[2]);
        let body = Ellipse {
            cy: 0.0,
            cx: 0.0,
            ry: 0.44 * fov,
            rx: 0.47 * fov,
        };
        let lung = |side: f64| Ellipse {
            cy: 0.0,
            cx: side * 0.2 * fov,
            ry: 0.33 * fov,
            rx: 0.17 * fov,
        };
        let z0 = origin[0];
        Phantom {
            body,
            lungs: [lung(-1.0), lung(1.0)],
            z_span: (z0, z0 + (p.slices - 1) as f64 * p.spacing[0]),
        }
    }

    fn z_at(&self, t: f64) -> f64 {
        let (a, b) = self.z_span;
        (a + b) / 2.0 + t * (b - a) / 2.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Sphere {
    c: [f64; 3],
    r: f64,
}

#[derive(Debug, Clone, Copy)]
struct Tube {
    a: [f64; 3],
    b: [f64; 3],
    r: f64,
}

impl Tube {
    fn distance(&self, p: [f64; 3]) -> f64 {
        let d: [f64; 3] = std::array::from_fn(|i| self.b[i] - self.a[i]);
        let w: [f64; 3] = std::array::from_fn(|i| p[i] - self.a[i]);
        let len2: f64 = d.iter().map(|v| v * v).sum();
        let t = if len2 > 0.0 {
            (w.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (0..3)
            .map(|i| (w[i] - t * d[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn between(rng: &mut DetRng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn count_between(rng: &mut DetRng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Generate scan `index` of the corpus defined by `params` and `seed`, with
/// nodules centered in slabs of `slab_mm`.
pub fn synth_scan(index: usize, params: &SynthParams, slab_mm: f64, seed: u64) -> SynthScan {
    let id = scan_id(index);
    let mut rng = derived(seed, &format!("synth/{id}"));
    let [sz, sy, sx] = params.spacing;
    let (n, d) = (params.slices, params.size);
    let origin = [
        -(n as f64 * sz) / 2.0,
        -((d - 1) as f64 * sy) / 2.0,
        -((d - 1) as f64 * sx) / 2.0,
    ];
    let phantom = Phantom::new(params, origin);
    let grid_start = origin[0] - sz / 2.0;
    let slab_count = (n as f64 * sz / slab_mm).floor() as usize;

    let mut spheres: Vec<Sphere> = Vec::new();
    let wanted = count_between(&mut rng, params.nodules);
    for _ in 0..PLACEMENT_ATTEMPTS {
        if spheres.len() == wanted {
            break;
        }
        let r = between(&mut rng, params.nodule_diameter_mm) / 2.0;
        let lung = phantom.lungs[rng.random_range(0..2)].shrunk(r + 2.5);
        let k = rng.random_range(1..slab_count.max(3) - 1);
        let z = grid_start + (k as f64 + 0.5) * slab_mm;
        let (y, x) = lung.sample(&mut rng);
        let c = [z, y, x];
        let clear = spheres.iter().all(|s| {
            let dist = (0..3).map(|i| (s.c[i] - c[i]).powi(2)).sum::<f64>().sqrt();
            dist > s.r + r + 3.0
        });
        if clear {
            spheres.push(Sphere { c, r });
        }
    }

    let mut tubes: Vec<Tube> = Vec::new();
    let wanted = count_between(&mut rng, params.vessels);
    for _ in 0..PLACEMENT_ATTEMPTS {
        if tubes.len() == wanted {
            break;
        }
        let r = between(&mut rng, params.vessel_radius_mm);
        let len = between(&mut rng, params.vessel_length_mm);
        let lung = phantom.lungs[rng.random_range(0..2)].shrunk(r + 2.5);
        let z = phantom.z_at(rng.random_range(-0.65..0.65));
        let (y, x) = lung.sample(&mut rng);
        let t = rng.random_range(0.0..PI);
        let (dy, dx) = (t.sin() * len / 2.0, t.cos() * len / 2.0);
        let (a, b) = ([z, y - dy, x - dx], [z, y + dy, x + dx]);
        let inside = lung.contains(a[1], a[2]) && lung.contains(b[1], b[2]);
        let clear = spheres
            .iter()
            .all(|s| Tube { a, b, r: 0.0 }.distance(s.c) > s.r + r + 3.0);
        if inside && clear {
            tubes.push(Tube { a, b, r });
        }
    }

    let noise = Normal::new(0.0, params.noise_hu.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut voxels = Vec::with_capacity(n * d * d);
    for k in 0..n {
        let z = origin[0] + k as f64 * sz;
        let lungs = phantom.lungs;
        for j in 0..d {
            let y = origin[1] + j as f64 * sy;
            for i in 0..d {
                let x = origin[2] + i as f64 * sx;
                let p = [z, y, x];
                let mut hu = if !phantom.body.contains(y, x) {
                    AIR_HU
                } else if lungs.iter().any(|l| l.contains(y, x)) {
                    LUNG_HU
                } else {
                    TISSUE_HU
                };
                let lesion = spheres
                    .iter()
                    .any(|s| (0..3).map(|a| (p[a] - s.c[a]).powi(2)).sum::<f64>() <= s.r * s.r)
                    || tubes
                        .iter()
                        .any(|t| (z - t.a[0]).abs() <= t.r && t.distance(p) <= t.r);
                if lesion {
                    hu = LESION_HU;
                }
                if params.noise_hu > 0.0 {
                    hu += noise.sample(&mut rng);
                }
                voxels.push(hu.round().clamp(i16::MIN as f64, i16::MAX as f64) as f32);
            }
        }
    }

    let meta = VolumeMeta::new([n, d, d], params.spacing, origin, ElementType::I16)
        .expect("valid synthetic geometry");
    let volume = CtVolume::new(meta, voxels).expect("voxel count matches");
    let nodules = spheres
        .iter()
        .map(|s| NoduleAnnotation {
            series_id: id.clone(),
            center_world: [s.c[2], s.c[1], s.c[0]],
            diameter_mm: 2.0 * s.r,
        })
        .collect();
    SynthScan {
        id,
        volume,
        nodules,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lung_detr::metaimage::world_to_voxel;

    fn small() -> SynthParams {
        SynthParams {
            slices: 40,
            size: 48,
            nodules: [2, 2],
            nodule_diameter_mm: [5.0, 6.5],
            ..SynthParams::default()
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let p = small();
        let a = synth_scan(3, &p, 7.5, 11);
        let b = synth_scan(3, &p, 7.5, 11);
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.nodules, b.nodules);
        assert_ne!(synth_scan(4, &p, 7.5, 11).volume, a.volume);
        assert_ne!(synth_scan(3, &p, 7.5, 12).volume, a.volume);
    }

    #[test]
    fn nodule_centers_are_bright_and_inside_the_volume() {
        let p = SynthParams {
            noise_hu: 0.0,
            ..small()
        };
        let s = synth_scan(0, &p, 7.5, 5);
        assert_eq!(s.nodules.len(), 2);
        for nod in &s.nodules {
            let v = world_to_voxel(nod.center_zyx(), &s.volume.meta);
            for (a, &dim) in v.iter().zip(&s.volume.meta.dims) {
                assert!(*a >= 0.0 && *a <= (dim - 1) as f64, "{v:?}");
            }
            let value = s.volume.get(
                v[0].round() as usize,
                v[1].round() as usize,
                v[2].round() as usize,
            );
            assert_eq!(value, LESION_HU as f32);
            assert!((5.0..=6.5).contains(&nod.diameter_mm));
        }
    }

    #[test]
    fn has_air_tissue_and_lung() {
        let p = SynthParams {
            noise_hu: 0.0,
            ..small()
        };
        let s = synth_scan(1, &p, 7.5, 5);
        for k in [0, p.slices / 2, p.slices - 1] {
            let slice = s.volume.slice(k);
            for hu in [AIR_HU, TISSUE_HU, LUNG_HU] {
                assert!(slice.contains(&(hu as f32)), "slice {k} is missing {hu}");
            }
        }
    }

    #[test]
    fn nodules_stay_inside_one_slab() {
        let p = SynthParams {
            noise_hu: 0.0,
            ..small()
        };
        for seed in 0..20 {
            let s = synth_scan(0, &p, 7.5, seed);
            let start = s.volume.meta.origin[0] - p.spacing[0] / 2.0;
            for nod in &s.nodules {
                let [z, _, _] = nod.center_zyx();
                let r = nod.diameter_mm / 2.0;
                let k = ((z - start) / 7.5).floor();
                assert!(k >= 1.0, "{z}");
                assert!(
                    z - r > start + k * 7.5 && z + r < start + (k + 1.0) * 7.5,
                    "{z} {r}"
                );
            }
        }
    }

    #[test]
    fn rejects_oversized_nodules() {
        let p = SynthParams {
            nodule_diameter_mm: [4.0, 40.0],
            ..SynthParams::default()
        };
        assert!(p.validate().is_err());
        assert!(SynthParams::default().validate().is_ok());
        assert!(SynthParams::default().validate_for_slabs(7.5).is_ok());
        assert!(SynthParams::default().validate_for_slabs(6.0).is_err());
    }
}
