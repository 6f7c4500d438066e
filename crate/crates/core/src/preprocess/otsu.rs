use super::{PreprocessError, Result};

/// Otsu split point over a histogram: class 0 is `bins[..=t]`, class 1 the rest.
///
/// Maximizes between-class variance, which is the same as minimizing the
/// weighted intra-class variance. Ties resolve to the lowest `t`. Returns
/// `None` when fewer than two bins are occupied.
pub fn otsu_bin(hist: &[u64]) -> Option<usize> {
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let total_mass: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut w0 = 0.0;
    let mut mass0 = 0.0;
    let mut best: Option<(usize, f64)> = None;
    for (t, &c) in hist.iter().enumerate().take(hist.len().saturating_sub(1)) {
        w0 += c as f64;
        mass0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = mass0 / w0;
        let mu1 = (total_mass - mass0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Histogram of `values` over `[lo, hi]` with `bin_count` equal-width bins.
pub fn histogram(values: &[f32], lo: f32, hi: f32, bin_count: usize) -> Vec<u64> {
    let mut hist = vec![0u64; bin_count];
    let width = (hi - lo) as f64 / bin_count as f64;
    for &v in values {
        let b = if width > 0.0 {
            ((v - lo) as f64 / width).floor()
        } else {
            0.0
        };
        hist[(b.max(0.0) as usize).min(bin_count - 1)] += 1;
    }
    hist
}

/// Otsu threshold over the value range of `values`. Values strictly below the
/// returned threshold form the low class.
pub fn otsu_threshold(values: &[f32], bin_count: usize) -> Result<f32> {
    if bin_count < 2 {
        return Err(PreprocessError::InvalidParams(format!(
            "bin_count {bin_count} < 2"
        )));
    }
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return Err(PreprocessError::ConstantInput);
    }
    let hist = histogram(values, lo, hi, bin_count);
    let t = otsu_bin(&hist).ok_or(PreprocessError::ConstantInput)?;
    let width = (hi - lo) as f64 / bin_count as f64;
    Ok((lo as f64 + (t + 1) as f64 * width) as f32)
}
