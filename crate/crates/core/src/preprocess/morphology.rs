//! Binary masks, connected components, erosion and the per-slice lung mask.

use std::ops::Range;

/// A 2D binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(
            bits.len(),
            height * width,
            "bit count does not match {height}x{width}"
        );
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask::new(height, width, vec![false; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True if every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    /// Neighbours already visited in a raster scan (up-left, up, up-right, left).
    fn causal_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
        }
    }
}

/// Label image (0 = background, components numbered from 1 in raster order of
/// their first pixel) plus the pixel count of each component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<u32>,
    /// `sizes[k]` is the size of label `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        parent[a as usize] = parent[parent[a as usize] as usize];
        a = parent[a as usize];
    }
    a
}

/// Two-pass union-find labelling.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Components {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let mut current = 0u32;
            for &(dy, dx) in connectivity.causal_offsets() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let l = labels[ny as usize * w + nx as usize];
                if l == 0 {
                    continue;
                }
                if current == 0 {
                    current = l;
                } else {
                    let (ra, rb) = (find(&mut parent, current), find(&mut parent, l));
                    if ra != rb {
                        parent[ra.max(rb) as usize] = ra.min(rb);
                    }
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            labels[y * w + x] = current;
        }
    }

    // Compact roots to 1..=n in order of first appearance.
    let mut remap = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        *l = remap[root];
        sizes[*l as usize - 1] += 1;
    }
    Components { labels, sizes }
}

/// Disk structuring element: all offsets with `dy² + dx² ≤ r²`.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Erosion by a disk. Pixels outside the image count as unset.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let element = disk(radius);
    let (h, w) = (mask.height as isize, mask.width as isize);
    BinaryMask::from_fn(mask.height, mask.width, |y, x| {
        element.iter().all(|&(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            ny >= 0 && nx >= 0 && ny < h && nx < w && mask.get(ny as usize, nx as usize)
        })
    })
}

/// Set every background pixel that is not 4-connected to the image border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let inverse = BinaryMask::new(
        mask.height,
        mask.width,
        mask.bits.iter().map(|b| !b).collect(),
    );
    let comps = connected_components(&inverse, Connectivity::Four);
    let touches = border_labels(&comps, mask.height, mask.width);
    let bits = mask
        .bits
        .iter()
        .zip(&comps.labels)
        .map(|(&b, &l)| b || (l != 0 && !touches[l as usize]))
        .collect();
    BinaryMask::new(mask.height, mask.width, bits)
}

fn border_labels(comps: &Components, h: usize, w: usize) -> Vec<bool> {
    let mut touches = vec![false; comps.count() + 1];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                touches[comps.labels[y * w + x] as usize] = true;
            }
        }
    }
    touches[0] = false;
    touches
}

/// Result of segmenting one slice; `empty` is set when no lung was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LungMask {
    pub mask: BinaryMask,
    pub empty: bool,
}

/// Lung mask of one slice given the scan-wide air/tissue threshold.
///
/// Below-threshold pixels are candidates; components touching the border
/// (outside air) are dropped, the two largest interior components are kept,
/// enclosed structures (vessels, nodules) are filled back in, then the mask is
/// eroded by `erosion_radius`.
pub fn lung_mask(
    pixels: &[f32],
    height: usize,
    width: usize,
    threshold: f32,
    erosion_radius: usize,
) -> LungMask {
    let candidates = BinaryMask::new(
        height,
        width,
        pixels.iter().map(|&v| v < threshold).collect(),
    );
    let comps = connected_components(&candidates, Connectivity::Eight);
    let touches = border_labels(&comps, height, width);

    let mut interior: Vec<(usize, u32)> = comps
        .sizes
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, k as u32 + 1))
        .filter(|&(_, l)| !touches[l as usize])
        .collect();
    // Largest first; equal sizes keep the earlier label.
    interior.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep: Vec<u32> = interior.iter().take(2).map(|&(_, l)| l).collect();

    let kept = BinaryMask::new(
        height,
        width,
        comps.labels.iter().map(|l| keep.contains(l)).collect(),
    );
    let mask = erode(&fill_holes(&kept), erosion_radius);
    let empty = mask.area() == 0;
    LungMask { mask, empty }
}

/// Contiguous slice range whose mask area is at least `area_fraction_min` of the
/// largest slice area. `None` when every slice is empty.
pub fn remove_peripheral_slices(areas: &[usize], area_fraction_min: f64) -> Option<Range<usize>> {
    let max = *areas.iter().max()?;
    if max == 0 {
        return None;
    }
    let cutoff = area_fraction_min * max as f64;
    let passes = |a: usize| a > 0 && a as f64 >= cutoff;
    let first = areas.iter().position(|&a| passes(a))?;
    let last = areas.iter().rposition(|&a| passes(a))?;
    Some(first..last + 1)
}
