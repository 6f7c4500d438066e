//! Scan-level train/val/test splitting, positive-rate enforcement, training
//! augmentations and the line-delimited manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::projection::GroundTruthBox;
use crate::rng::{self, DetRng};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("need at least 3 scans to fill 3 roles, got {0}")]
    TooFewScans(usize),
    #[error(
        "sparsity infeasible for role {role}: {positives} positive and {negatives} negative slabs"
    )]
    Infeasible {
        role: Role,
        positives: usize,
        negatives: usize,
    },
    #[error("target rate must lie in (0, 1), got {0}")]
    BadRate(f64),
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Train, Role::Val, Role::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// A projected slab on disk, before role assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SlabEntry {
    pub scan_id: String,
    pub slab_index: usize,
    pub image_path: String,
    pub boxes: Vec<GroundTruthBox>,
}

impl SlabEntry {
    pub fn is_positive(&self) -> bool {
        !self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub slab: SlabEntry,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    /// Positive fraction per role, indexed by [`Role::index`].
    pub achieved_rates: [f64; 3],
}

impl SplitManifest {
    pub fn role_entries(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    pub fn counts(&self, role: Role) -> (usize, usize) {
        let pos = self
            .role_entries(role)
            .filter(|e| e.slab.is_positive())
            .count();
        (pos, self.role_entries(role).count() - pos)
    }

    pub fn recompute_rates(&mut self) {
        for role in Role::ALL {
            let (p, n) = self.counts(role);
            self.achieved_rates[role.index()] = if p + n == 0 {
                0.0
            } else {
                p as f64 / (p + n) as f64
            };
        }
    }
}

/// Assign whole scans to roles.
///
/// Scan ids are sorted, shuffled with a ChaCha8 stream seeded by `seed`, then
/// each scan goes to the role furthest below its slab-count target (ties to
/// the earlier role). A role left empty takes the last scan given to the
/// largest role.
pub fn split(slabs: &[SlabEntry], seed: u64, ratios: [f64; 3]) -> Result<SplitManifest> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios));
    }
    let mut by_scan: BTreeMap<&str, usize> = BTreeMap::new();
    for s in slabs {
        *by_scan.entry(s.scan_id.as_str()).or_default() += 1;
    }
    if by_scan.len() < 3 {
        return Err(DatasetError::TooFewScans(by_scan.len()));
    }
    let mut scans: Vec<(&str, usize)> = by_scan.into_iter().collect();
    let mut rng = rng::seeded(seed);
    scans.shuffle(&mut rng);

    let total = slabs.len() as f64;
    let mut assigned = [0usize; 3];
    let mut members: [Vec<&str>; 3] = Default::default();
    for &(id, n) in &scans {
        let role = (0..3)
            .map(|r| (r, ratios[r] * total - assigned[r] as f64))
            .fold((0, f64::NEG_INFINITY), |best, (r, d)| {
                if d > best.1 {
                    (r, d)
                } else {
                    best
                }
            })
            .0;
        assigned[role] += n;
        members[role].push(id);
    }
    for r in 0..3 {
        if members[r].is_empty() {
            let donor = (0..3)
                .max_by_key(|&d| (members[d].len(), std::cmp::Reverse(d)))
                .unwrap_or(0);
            let id = members[donor].pop().expect("donor role has scans");
            members[r].push(id);
        }
    }
    let role_of: BTreeMap<&str, Role> = members
        .iter()
        .enumerate()
        .flat_map(|(r, ids)| ids.iter().map(move |id| (*id, Role::ALL[r])))
        .collect();

    let mut manifest = SplitManifest {
        entries: slabs
            .iter()
            .map(|s| ManifestEntry {
                role: role_of[s.scan_id.as_str()],
                slab: s.clone(),
            })
            .collect(),
        seed,
        achieved_rates: [0.0; 3],
    };
    manifest.recompute_rates();
    Ok(manifest)
}

/// Bring the positive fraction of `role` to `target_rate`.
///
/// Positives are all kept while negatives are subsampled; when there are too
/// few negatives for the target, all negatives are kept and positives are
/// subsampled instead. Box lists of kept entries are untouched.
pub fn enforce_sparsity(
    manifest: &SplitManifest,
    role: Role,
    target_rate: f64,
) -> Result<SplitManifest> {
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(DatasetError::BadRate(target_rate));
    }
    let pos: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].role == role && manifest.entries[i].slab.is_positive())
        .collect();
    let neg: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].role == role && !manifest.entries[i].slab.is_positive())
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(DatasetError::Infeasible {
            role,
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    let (p, n) = (pos.len() as f64, neg.len() as f64);
    let needed_neg = (p * (1.0 - target_rate) / target_rate).round() as usize;
    let mut rng = rng::derived(manifest.seed, &format!("sparsity/{role}"));
    let mut drop = vec![false; manifest.entries.len()];
    let mut subsample = |candidates: &[usize], keep: usize, rng: &mut DetRng| {
        let mut order = candidates.to_vec();
        order.shuffle(rng);
        for &i in &order[keep.min(order.len())..] {
            drop[i] = true;
        }
    };
    if needed_neg <= neg.len() {
        subsample(&neg, needed_neg, &mut rng);
    } else {
        let keep_pos = ((target_rate * n / (1.0 - target_rate)).round() as usize).max(1);
        subsample(&pos, keep_pos, &mut rng);
    }
    let mut out = SplitManifest {
        entries: manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop[*i])
            .map(|(_, e)| e.clone())
            .collect(),
        seed: manifest.seed,
        achieved_rates: manifest.achieved_rates,
    };
    out.recompute_rates();
    Ok(out)
}

/// Ranges augmentation parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub flip_probability: f64,
    pub rotation_deg: [f64; 2],
    pub brightness_factor: [f64; 2],
    /// Noise SD as a fraction of the image's dynamic range (0.001% .. 0.18%).
    pub noise_sd_fraction: [f64; 2],
    /// Augmented copies materialized per training slab.
    pub copies: usize,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            flip_probability: 0.5,
            rotation_deg: [-15.0, 15.0],
            brightness_factor: [0.85, 1.15],
            noise_sd_fraction: [0.00001, 0.0018],
            copies: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub brightness_factor: f64,
    pub noise_sd_fraction: f64,
}

impl AugmentationSpec {
    pub const IDENTITY: AugmentationSpec = AugmentationSpec {
        hflip: false,
        vflip: false,
        rotation_deg: 0.0,
        brightness_factor: 1.0,
        noise_sd_fraction: 0.0,
    };

    pub fn sample(ranges: &AugmentRanges, rng: &mut DetRng) -> Self {
        let mut between = |r: [f64; 2]| {
            if r[1] > r[0] {
                rng.random_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        let rotation_deg = between(ranges.rotation_deg);
        let brightness_factor = between(ranges.brightness_factor);
        let noise_sd_fraction = between(ranges.noise_sd_fraction);
        AugmentationSpec {
            hflip: rng.random_bool(ranges.flip_probability),
            vflip: rng.random_bool(ranges.flip_probability),
            rotation_deg,
            brightness_factor,
            noise_sd_fraction,
        }
    }

    /// True when every parameter lies in the accepted training ranges.
    pub fn is_valid(&self) -> bool {
        (-15.0..=15.0).contains(&self.rotation_deg)
            && (0.85..=1.15).contains(&self.brightness_factor)
            && (self.noise_sd_fraction == 0.0
                || (0.00001..=0.0018).contains(&self.noise_sd_fraction))
    }
}

pub fn hflip(img: &Image, boxes: &[GroundTruthBox]) -> (Image, Vec<GroundTruthBox>) {
    let mut out = img.clone();
    for y in 0..img.height {
        out.pixels[y * img.width..(y + 1) * img.width].reverse();
    }
    let boxes = boxes
        .iter()
        .map(|b| GroundTruthBox {
            cx: 1.0 - b.cx,
            ..*b
        })
        .collect();
    (out, boxes)
}

pub fn vflip(img: &Image, boxes: &[GroundTruthBox]) -> (Image, Vec<GroundTruthBox>) {
    let mut out = img.clone();
    for y in 0..img.height {
        let src = img.height - 1 - y;
        out.pixels[y * img.width..(y + 1) * img.width]
            .copy_from_slice(&img.pixels[src * img.width..(src + 1) * img.width]);
    }
    let boxes = boxes
        .iter()
        .map(|b| GroundTruthBox {
            cy: 1.0 - b.cy,
            ..*b
        })
        .collect();
    (out, boxes)
}

fn bilinear_zero(img: &Image, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let mut acc = 0.0f64;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0.0 && xx >= 0.0 && (yy as usize) < img.height && (xx as usize) < img.width {
                acc += wy * wx * img.get(yy as usize, xx as usize) as f64;
            }
        }
    }
    acc as f32
}

/// Rotate by `deg` (counter-clockwise on screen) about the image center.
/// Boxes become the axis-aligned hull of their rotated corners, clipped to the
/// frame; boxes rotated fully out of frame are dropped.
pub fn rotate(img: &Image, boxes: &[GroundTruthBox], deg: f64) -> (Image, Vec<GroundTruthBox>) {
    if deg == 0.0 {
        return (img.clone(), boxes.to_vec());
    }
    let (h, w) = (img.height as f64, img.width as f64);
    let (cy, cx) = (h / 2.0, w / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    let mut out = Image::filled(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            // inverse map: output pixel center back into the source
            let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let sx = c * px - s * py + cx - 0.5;
            let sy = s * px + c * py + cy - 0.5;
            out.set(y, x, bilinear_zero(img, sy, sx));
        }
    }
    let forward = |px: f64, py: f64| {
        let (dx, dy) = (px - cx, py - cy);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    };
    let boxes = boxes
        .iter()
        .filter_map(|b| {
            let (x0, x1) = ((b.cx - b.w / 2.0) * w, (b.cx + b.w / 2.0) * w);
            let (y0, y1) = ((b.cy - b.h / 2.0) * h, (b.cy + b.h / 2.0) * h);
            let corners = [
                forward(x0, y0),
                forward(x1, y0),
                forward(x0, y1),
                forward(x1, y1),
            ];
            let min_x = corners
                .iter()
                .map(|p| p.0)
                .fold(f64::INFINITY, f64::min)
                .max(0.0)
                / w;
            let max_x = corners
                .iter()
                .map(|p| p.0)
                .fold(f64::NEG_INFINITY, f64::max)
                .min(w)
                / w;
            let min_y = corners
                .iter()
                .map(|p| p.1)
                .fold(f64::INFINITY, f64::min)
                .max(0.0)
                / h;
            let max_y = corners
                .iter()
                .map(|p| p.1)
                .fold(f64::NEG_INFINITY, f64::max)
                .min(h)
                / h;
            (max_x > min_x && max_y > min_y).then(|| GroundTruthBox {
                cx: (min_x + max_x) / 2.0,
                cy: (min_y + max_y) / 2.0,
                w: max_x - min_x,
                h: max_y - min_y,
                diameter_mm: b.diameter_mm,
            })
        })
        .collect();
    (out, boxes)
}

/// Outcome of one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Image,
    pub boxes: Vec<GroundTruthBox>,
    /// Boxes lost to rotation.
    pub dropped: usize,
}

/// Apply flips, rotation, brightness and Gaussian noise in that order.
/// Intensities are clamped to the input's `[min, max]` range after brightness.
pub fn augment(
    img: &Image,
    boxes: &[GroundTruthBox],
    spec: &AugmentationSpec,
    rng: &mut DetRng,
) -> Augmented {
    let (mut image, mut out_boxes) = (img.clone(), boxes.to_vec());
    if spec.hflip {
        (image, out_boxes) = hflip(&image, &out_boxes);
    }
    if spec.vflip {
        (image, out_boxes) = vflip(&image, &out_boxes);
    }
    let before = out_boxes.len();
    (image, out_boxes) = rotate(&image, &out_boxes, spec.rotation_deg);
    let dropped = before - out_boxes.len();

    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if spec.brightness_factor != 1.0 {
        for v in image.pixels.iter_mut() {
            *v = (*v * spec.brightness_factor as f32).clamp(lo, hi);
        }
    }
    let sd = spec.noise_sd_fraction * (hi - lo) as f64;
    if sd > 0.0 {
        let normal = Normal::new(0.0, sd).expect("finite positive sd");
        for v in image.pixels.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }
    Augmented {
        image,
        boxes: out_boxes,
        dropped,
    }
}

const MANIFEST_MAGIC: &str = "# lung-detr manifest v1";

/// Serialize as one tab-separated record per slab:
/// `scan_id, slab_index, role, image path, box...` with each box written as
/// `cx,cy,w,h,diameter_mm`. Header lines start with `#`.
pub fn write_manifest<W: Write>(manifest: &SplitManifest, mut w: W) -> Result<()> {
    writeln!(w, "{MANIFEST_MAGIC}")?;
    writeln!(w, "# seed={}", manifest.seed)?;
    writeln!(
        w,
        "# achieved_rates train={} val={} test={}",
        manifest.achieved_rates[0], manifest.achieved_rates[1], manifest.achieved_rates[2]
    )?;
    for e in &manifest.entries {
        write!(
            w,
            "{}\t{}\t{}\t{}",
            e.slab.scan_id, e.slab.slab_index, e.role, e.slab.image_path
        )?;
        for b in &e.slab.boxes {
            write!(w, "\t{},{},{},{},{}", b.cx, b.cy, b.w, b.h, b.diameter_mm)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<SplitManifest> {
    let mut seed = 0u64;
    let mut entries = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let err = |reason: String| DatasetError::Parse {
            line: lineno,
            reason,
        };
        if let Some(rest) = line.strip_prefix("# seed=") {
            seed = rest
                .trim()
                .parse()
                .map_err(|_| err(format!("bad seed {rest:?}")))?;
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(err(format!(
                "expected at least 4 fields, got {}",
                fields.len()
            )));
        }
        let boxes = fields[4..]
            .iter()
            .map(|f| {
                let v: Vec<f64> = f
                    .split(',')
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(format!("bad box {f:?}")))?;
                if v.len() != 5 {
                    return Err(err(format!("box needs 5 values: {f:?}")));
                }
                Ok(GroundTruthBox {
                    cx: v[0],
                    cy: v[1],
                    w: v[2],
                    h: v[3],
                    diameter_mm: v[4],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(ManifestEntry {
            slab: SlabEntry {
                scan_id: fields[0].to_string(),
                slab_index: fields[1]
                    .parse()
                    .map_err(|_| err(format!("bad slab index {:?}", fields[1])))?,
                image_path: fields[3].to_string(),
                boxes,
            },
            role: fields[2].parse().map_err(err)?,
        });
    }
    let mut m = SplitManifest {
        entries,
        seed,
        achieved_rates: [0.0; 3],
    };
    m.recompute_rates();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slab(scan: &str, idx: usize, positive: bool) -> SlabEntry {
        SlabEntry {
            scan_id: scan.to_string(),
            slab_index: idx,
            image_path: format!("{scan}_{idx}.mhd"),
            boxes: if positive {
                vec![GroundTruthBox {
                    cx: 0.5,
                    cy: 0.5,
                    w: 0.1,
                    h: 0.1,
                    diameter_mm: 6.0,
                }]
            } else {
                vec![]
            },
        }
    }

    #[test]
    fn ten_equal_scans_split_7_2_1() {
        let slabs: Vec<SlabEntry> = (0..10)
            .map(|s| slab(&format!("scan{s}"), 0, false))
            .collect();
        let m = split(&slabs, 7, [0.7, 0.2, 0.1]).unwrap();
        let count = |r| m.role_entries(r).count();
        assert_eq!(
            (count(Role::Train), count(Role::Val), count(Role::Test)),
            (7, 2, 1)
        );
        assert_eq!(split(&slabs, 7, [0.7, 0.2, 0.1]).unwrap(), m);
    }

    #[test]
    fn split_errors() {
        let two: Vec<SlabEntry> = (0..2).map(|s| slab(&format!("s{s}"), 0, false)).collect();
        assert!(matches!(
            split(&two, 0, [0.7, 0.2, 0.1]),
            Err(DatasetError::TooFewScans(2))
        ));
        assert!(matches!(
            split(&two, 0, [0.7, 0.2, 0.2]),
            Err(DatasetError::BadRatios(_))
        ));
    }

    fn role_fixture(pos: usize, neg: usize) -> SplitManifest {
        let mut slabs = Vec::new();
        for i in 0..pos + neg {
            slabs.push(slab(&format!("scan{}", i % 50), i, i < pos));
        }
        SplitManifest {
            entries: slabs
                .into_iter()
                .map(|s| ManifestEntry {
                    slab: s,
                    role: Role::Train,
                })
                .collect(),
            seed: 3,
            achieved_rates: [0.0; 3],
        }
    }

    #[test]
    fn sparsity_arithmetic() {
        let m = enforce_sparsity(&role_fixture(127, 2000), Role::Train, 0.127).unwrap();
        assert_eq!(m.counts(Role::Train), (127, 873));
        assert!((m.achieved_rates[0] - 0.127).abs() < 1e-12);

        let m = enforce_sparsity(&role_fixture(30, 970), Role::Train, 0.03).unwrap();
        assert_eq!(m.counts(Role::Train), (30, 970));

        // too few negatives: positives are subsampled instead
        let m = enforce_sparsity(&role_fixture(100, 97), Role::Train, 0.03).unwrap();
        assert_eq!(m.counts(Role::Train), (3, 97));

        assert!(matches!(
            enforce_sparsity(&role_fixture(0, 10), Role::Train, 0.1),
            Err(DatasetError::Infeasible { positives: 0, .. })
        ));
    }

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| (i % 17) as f32 / 16.0).collect())
    }

    #[test]
    fn hflip_box_arithmetic_and_involution() {
        let b = GroundTruthBox {
            cx: 0.3,
            cy: 0.4,
            w: 0.1,
            h: 0.1,
            diameter_mm: 5.0,
        };
        let img = gradient_image(8, 6);
        let (once, boxes) = hflip(&img, &[b]);
        assert!((boxes[0].cx - 0.7).abs() < 1e-15);
        assert_eq!((boxes[0].cy, boxes[0].w, boxes[0].h), (0.4, 0.1, 0.1));
        let (twice, _) = hflip(&once, &boxes);
        assert_eq!(twice, img);
        let (v2, _) = vflip(&vflip(&img, &[]).0, &[]);
        assert_eq!(v2, img);
    }

    #[test]
    fn identity_augmentation() {
        let img = gradient_image(16, 16);
        let b = vec![GroundTruthBox {
            cx: 0.25,
            cy: 0.75,
            w: 0.2,
            h: 0.1,
            diameter_mm: 9.0,
        }];
        let mut rng = rng::seeded(0);
        let out = augment(&img, &b, &AugmentationSpec::IDENTITY, &mut rng);
        assert_eq!(out.image, img);
        assert_eq!(out.boxes, b);
        assert_eq!(out.dropped, 0);
    }

    #[test]
    fn rotation_roundtrip_keeps_box_center() {
        let img = gradient_image(32, 32);
        let b = GroundTruthBox {
            cx: 0.3,
            cy: 0.6,
            w: 0.15,
            h: 0.15,
            diameter_mm: 7.0,
        };
        for deg in [-15.0, -7.0, 4.0, 15.0] {
            let (_, r) = rotate(&img, &[b], deg);
            let (_, back) = rotate(&img, &r, -deg);
            assert!((back[0].cx - b.cx).abs() * 32.0 < 1.0);
            assert!((back[0].cy - b.cy).abs() * 32.0 < 1.0);
        }
    }

    #[test]
    fn sampled_specs_are_in_range() {
        let mut rng = rng::seeded(11);
        for _ in 0..500 {
            assert!(AugmentationSpec::sample(&AugmentRanges::default(), &mut rng).is_valid());
        }
    }

    #[test]
    fn manifest_text_roundtrip() {
        let slabs: Vec<SlabEntry> = (0..6)
            .map(|s| slab(&format!("scan{s}"), s, s % 2 == 0))
            .collect();
        let m = split(&slabs, 1, [0.5, 0.25, 0.25]).unwrap();
        let mut buf = Vec::new();
        write_manifest(&m, &mut buf).unwrap();
        let back = read_manifest(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }
}
