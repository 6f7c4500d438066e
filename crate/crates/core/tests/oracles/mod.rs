//! Slow reference implementations the library is checked against.
#![allow(dead_code)]

use lung_detr::metaimage::CtVolume;
use lung_detr::preprocess::BinaryMask;

pub fn permutations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n, k - 1) {
        for i in 0..n {
            if !p.contains(&i) {
                let mut q = p.clone();
                q.push(i);
                out.push(q);
            }
        }
    }
    out
}

/// Minimum total cost over all injective assignments of the smaller side.
pub fn brute_force_cost(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    if r <= c {
        permutations(c, r)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum())
            .fold(f64::INFINITY, f64::min)
    } else {
        permutations(r, c)
            .iter()
            .map(|p| p.iter().enumerate().map(|(j, &i)| cost[i][j]).sum())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Threshold index minimizing the weighted within-class variance, compared in
/// exact integer arithmetic. Minimizing `S2 - M0²/W0 - M1²/W1` is maximizing
/// `M0²/W0 + M1²/W1`; ties go to the lowest index.
pub fn exhaustive_otsu(hist: &[u64]) -> usize {
    let mut best: Option<(usize, u128, u128)> = None;
    for t in 0..hist.len() - 1 {
        let (w0, m0): (u128, u128) = hist[..=t]
            .iter()
            .enumerate()
            .fold((0, 0), |(w, m), (i, &c)| {
                (w + c as u128, m + (i as u128) * c as u128)
            });
        let (w1, m1): (u128, u128) = hist[t + 1..]
            .iter()
            .enumerate()
            .fold((0, 0), |(w, m), (i, &c)| {
                (w + c as u128, m + ((i + t + 1) as u128) * c as u128)
            });
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let num = m0 * m0 * w1 + m1 * m1 * w0;
        let den = w0 * w1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    best.expect("two occupied bins").0
}

/// Breadth-first flood fill from each unlabelled foreground pixel in raster
/// order.
pub fn flood_fill_labels(mask: &BinaryMask, eight: bool) -> Vec<u32> {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.bits[q] && labels[q] == 0 {
                        labels[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    labels
}

/// Per-pixel maximum over slices `range` of `vol`, clipped to the volume.
pub fn mip_oracle(vol: &CtVolume, range: std::ops::Range<usize>) -> Vec<f32> {
    let [d, h, w] = vol.meta.dims;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(
                (range.start..range.end.min(d))
                    .map(|z| vol.get(z, y, x))
                    .fold(f32::NEG_INFINITY, f32::max),
            );
        }
    }
    out
}
