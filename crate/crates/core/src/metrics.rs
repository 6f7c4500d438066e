//! Detection evaluation at a fixed IoU: average precision, average recall,
//! and precision/recall/F1 at an operating threshold, overall and per nodule
//! size band.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::iou_giou;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no ground truths to evaluate against")]
    NoGroundTruth,
    #[error("non-positive diameter {0}")]
    BadDiameter(f64),
    #[error("nothing to evaluate")]
    EmptyRole,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBand {
    Small,
    Medium,
    Large,
}

impl SizeBand {
    pub const ALL: [SizeBand; 3] = [SizeBand::Small, SizeBand::Medium, SizeBand::Large];

    pub fn label(self) -> &'static str {
        match self {
            SizeBand::Small => "Small",
            SizeBand::Medium => "Medium",
            SizeBand::Large => "Large",
        }
    }
}

/// Band of a nodule diameter: up to 7 mm small, up to 15 mm medium, larger is large.
pub fn size_band(diameter_mm: f64) -> Result<SizeBand> {
    if !(diameter_mm > 0.0) {
        return Err(MetricsError::BadDiameter(diameter_mm));
    }
    Ok(if diameter_mm <= 7.0 {
        SizeBand::Small
    } else if diameter_mm <= 15.0 {
        SizeBand::Medium
    } else {
        SizeBand::Large
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthBox {
    pub bbox: [f64; 4],
    pub diameter_mm: f64,
}

/// Detections and ground truths of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEval {
    pub detections: Vec<ScoredBox>,
    pub truths: Vec<TruthBox>,
}

/// Outcome of greedy matching on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the detections, by descending score (stable).
    pub order: Vec<usize>,
    /// For each entry of `order`, the matched ground truth.
    pub matched: Vec<Option<usize>>,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.matched.len() - self.true_positives()
    }
}

fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    iou_giou(a, b).map_or(0.0, |(i, _)| i)
}

/// Greedy one-to-one matching in descending score order; each detection takes
/// the unmatched ground truth of highest IoU if that IoU reaches the threshold.
pub fn match_detections(dets: &[ScoredBox], gts: &[[f64; 4]], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let matched: Vec<Option<usize>> = order
        .iter()
        .map(|&d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(dets[d].bbox, *gt);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        })
        .collect();
    MatchResult {
        order,
        matched,
        false_negatives: taken.iter().filter(|t| !**t).count(),
    }
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// Precision-recall points after each detection in descending score order.
pub fn pr_curve(flags: &[(f64, bool)], total_positives: usize) -> PrCurve {
    let mut sorted: Vec<(f64, bool)> = flags.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let points = sorted
        .iter()
        .map(|&(score, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                threshold: score,
                recall: if total_positives == 0 {
                    0.0
                } else {
                    tp as f64 / total_positives as f64
                },
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect();
    PrCurve { points }
}

/// Area under the precision envelope `p(r) = max precision at recall ≥ r`.
pub fn average_precision(flags: &[(f64, bool)], total_positives: usize) -> Result<f64> {
    if total_positives == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let curve = pr_curve(flags, total_positives);
    let mut envelope: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.recall, p.precision))
        .collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in envelope {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    Ok(ap)
}

/// Counts and rates at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl OperatingPoint {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        OperatingPoint {
            threshold,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

/// AP and AR for one subset of ground truths.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BandMetrics {
    pub ap: f64,
    pub ar: f64,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: BandMetrics,
    pub small: BandMetrics,
    pub medium: BandMetrics,
    pub large: BandMetrics,
    pub operating: OperatingPoint,
    pub images: usize,
}

/// Score-flag pairs for the ground truths selected by `keep`. Detections
/// matched to excluded ground truths are dropped; unmatched ones stay as
/// false positives.
fn banded_flags(
    images: &[ImageEval],
    keep: &dyn Fn(&TruthBox) -> bool,
) -> (Vec<(f64, bool)>, usize) {
    let mut flags = Vec::new();
    let mut positives = 0;
    for img in images {
        let gts: Vec<[f64; 4]> = img.truths.iter().map(|t| t.bbox).collect();
        let m = match_detections(&img.detections, &gts, IOU_THRESHOLD);
        positives += img.truths.iter().filter(|t| keep(t)).count();
        for (&d, matched) in m.order.iter().zip(&m.matched) {
            match matched {
                Some(g) if keep(&img.truths[*g]) => flags.push((img.detections[d].score, true)),
                Some(_) => {}
                None => flags.push((img.detections[d].score, false)),
            }
        }
    }
    (flags, positives)
}

fn band_metrics(images: &[ImageEval], keep: &dyn Fn(&TruthBox) -> bool) -> BandMetrics {
    let (flags, positives) = banded_flags(images, keep);
    if positives == 0 {
        return BandMetrics::default();
    }
    let tp = flags.iter().filter(|f| f.1).count();
    BandMetrics {
        ap: average_precision(&flags, positives).expect("positives checked"),
        ar: tp as f64 / positives as f64,
        positives,
    }
}

/// Counts over all images keeping detections scoring at least `threshold`.
pub fn operating_point(images: &[ImageEval], threshold: f64) -> OperatingPoint {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for img in images {
        let dets: Vec<ScoredBox> = img
            .detections
            .iter()
            .copied()
            .filter(|d| d.score >= threshold)
            .collect();
        let gts: Vec<[f64; 4]> = img.truths.iter().map(|t| t.bbox).collect();
        let m = match_detections(&dets, &gts, IOU_THRESHOLD);
        tp += m.true_positives();
        fp += m.false_positives();
        fn_ += m.false_negatives;
    }
    OperatingPoint::from_counts(threshold, tp, fp, fn_)
}

/// Evaluate a role's images at `threshold`.
pub fn evaluate(images: &[ImageEval], threshold: f64) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(MetricsError::EmptyRole);
    }
    let band = |b: SizeBand| move |t: &TruthBox| size_band(t.diameter_mm).is_ok_and(|x| x == b);
    Ok(EvalReport {
        overall: band_metrics(images, &|_| true),
        small: band_metrics(images, &band(SizeBand::Small)),
        medium: band_metrics(images, &band(SizeBand::Medium)),
        large: band_metrics(images, &band(SizeBand::Large)),
        operating: operating_point(images, threshold),
        images: images.len(),
    })
}

/// Threshold maximizing F1 among the distinct detection scores; ties go to
/// the higher threshold.
pub fn best_threshold(images: &[ImageEval]) -> OperatingPoint {
    let mut scores: Vec<f64> = images
        .iter()
        .flat_map(|i| i.detections.iter().map(|d| d.score))
        .collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut best = OperatingPoint::from_counts(1.0, 0, 0, 0);
    for s in scores {
        let op = operating_point(images, s);
        if op.f1 > best.f1 {
            best = op;
        }
    }
    best
}

/// Overall precision-recall curve of a role.
pub fn role_pr_curve(images: &[ImageEval]) -> PrCurve {
    let (flags, positives) = banded_flags(images, &|_| true);
    pr_curve(&flags, positives)
}

impl EvalReport {
    /// Rows as `(metric, value)` in the order of the summary table.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("F1 Score", self.operating.f1),
            ("Average Precision @ IoU 0.5 (All Areas)", self.overall.ap),
            ("Average Precision @ IoU 0.5 (Small Areas)", self.small.ap),
            ("Average Precision @ IoU 0.5 (Medium Areas)", self.medium.ap),
            ("Average Precision @ IoU 0.5 (Large Areas)", self.large.ap),
            ("Average Recall @ IoU 0.5 (All Areas)", self.overall.ar),
            ("Average Recall @ IoU 0.5 (Small Areas)", self.small.ar),
            ("Average Recall @ IoU 0.5 (Medium Areas)", self.medium.ar),
            ("Average Recall @ IoU 0.5 (Large Areas)", self.large.ar),
        ]
    }

    /// Ground truths behind each entry of [`Self::rows`].
    fn row_positives(&self) -> [usize; 9] {
        let (o, s, m, l) = (
            self.overall.positives,
            self.small.positives,
            self.medium.positives,
            self.large.positives,
        );
        [o, o, s, m, l, o, s, m, l]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in self.rows() {
            let _ = writeln!(s, "{name},{v:.6}");
        }
        let op = &self.operating;
        let _ = writeln!(s, "Precision,{:.6}", op.precision);
        let _ = writeln!(s, "Recall,{:.6}", op.recall);
        let _ = writeln!(s, "Threshold,{:.6}", op.threshold);
        let _ = writeln!(s, "TP,{}", op.tp);
        let _ = writeln!(s, "FP,{}", op.fp);
        let _ = writeln!(s, "FN,{}", op.fn_);
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<44} {:>8}", "Metric", "Value")?;
        for ((name, v), n) in self.rows().into_iter().zip(self.row_positives()) {
            if n == 0 {
                writeln!(f, "{name:<44} {:>8}", "n/a")?;
            } else {
                writeln!(f, "{name:<44} {:>7.1}%", v * 100.0)?;
            }
        }
        let op = &self.operating;
        writeln!(
            f,
            "operating threshold {:.4}: precision {:.3}, recall {:.3} (TP {}, FP {}, FN {}) over {} images",
            op.threshold, op.precision, op.recall, op.tp, op.fp, op.fn_, self.images
        )?;
        writeln!(
            f,
            "ground truths: {} (small {}, medium {}, large {})",
            self.overall.positives,
            self.small.positives,
            self.medium.positives,
            self.large.positives
        )
    }
}

/// Precision-recall curve as a standalone SVG document.
pub fn pr_curve_svg(curve: &PrCurve, title: &str) -> String {
    const SIZE: f64 = 400.0;
    const MARGIN: f64 = 50.0;
    let x = |r: f64| MARGIN + r * SIZE;
    let y = |p: f64| MARGIN + (1.0 - p) * SIZE;
    let mut path = format!(
        "M {:.2} {:.2}",
        x(0.0),
        y(curve.points.first().map_or(0.0, |p| p.precision))
    );
    for p in &curve.points {
        let _ = write!(path, " L {:.2} {:.2}", x(p.recall), y(p.precision));
    }
    let total = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{v:.2}</text>"#,
            x(v),
            MARGIN + SIZE + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.2}</text>"#,
            MARGIN - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">recall</text>"#,
        x(0.5),
        total - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.1})">precision</text>"#,
        y(0.5),
        y(0.5)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="30" font-size="14" text-anchor="middle">{}</text>"#,
        x(0.5),
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="{path}" fill="none" stroke="steelblue" stroke-width="2"/>"#
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64, bbox: [f64; 4]) -> ScoredBox {
        ScoredBox { score, bbox }
    }

    #[test]
    fn band_edges() {
        assert_eq!(size_band(5.0), Ok(SizeBand::Small));
        assert_eq!(size_band(7.0), Ok(SizeBand::Small));
        assert_eq!(size_band(10.0), Ok(SizeBand::Medium));
        assert_eq!(size_band(15.0), Ok(SizeBand::Medium));
        assert_eq!(size_band(20.0), Ok(SizeBand::Large));
        assert!(size_band(0.0).is_err());
    }

    #[test]
    fn hand_enumerated_ap() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, false)], 1), Ok(1.0));
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
        assert_eq!(ap, 0.5 + 0.5 * (2.0 / 3.0));
        assert_eq!(average_precision(&[], 3), Ok(0.0));
        assert!(average_precision(&[], 0).is_err());
    }

    #[test]
    fn greedy_one_to_one() {
        let g = [0.5, 0.5, 0.2, 0.2];
        let m = match_detections(&[det(0.4, g), det(0.9, g)], &[g], 0.5);
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.matched, vec![Some(0), None]);
        assert_eq!(
            (m.true_positives(), m.false_positives(), m.false_negatives),
            (1, 1, 0)
        );
    }

    #[test]
    fn f1_identity() {
        let op = OperatingPoint::from_counts(0.5, 111_027, 7_973, 5_598);
        assert!((op.precision - 0.933).abs() < 1e-12);
        assert!((op.recall - 0.952).abs() < 1e-12);
        assert!(
            (op.f1 - 2.0 * op.precision * op.recall / (op.precision + op.recall)).abs() < 1e-15
        );
        assert!((op.f1 - 0.9424).abs() < 5e-4);
    }

    #[test]
    fn banded_fixture() {
        // one small and one large nodule; the small one is found at 0.6 behind
        // a 0.8 false positive, the large one at 0.9
        let small = TruthBox {
            bbox: [0.2, 0.2, 0.1, 0.1],
            diameter_mm: 5.0,
        };
        let large = TruthBox {
            bbox: [0.7, 0.7, 0.3, 0.3],
            diameter_mm: 20.0,
        };
        let images = vec![ImageEval {
            detections: vec![
                det(0.9, large.bbox),
                det(0.8, [0.5, 0.1, 0.05, 0.05]),
                det(0.6, small.bbox),
            ],
            truths: vec![small, large],
        }];
        let r = evaluate(&images, 0.5).unwrap();
        // small band: flags (0.8 FP), (0.6 TP); the 0.9 hit on the large nodule is ignored
        assert_eq!(r.small.ap, 0.5);
        assert_eq!(r.large.ap, 1.0);
        assert_eq!(r.overall.ap, 0.5 + 0.5 * (2.0 / 3.0));
        assert_eq!(r.medium, BandMetrics::default());
        assert_eq!((r.operating.tp, r.operating.fp, r.operating.fn_), (2, 1, 0));
        let text = r.to_string();
        assert!(text.contains("F1 Score"));
        let medium: Vec<&str> = text
            .lines()
            .filter(|l| l.contains("(Medium Areas)"))
            .collect();
        assert_eq!(medium.len(), 2);
        assert!(medium.iter().all(|l| l.ends_with("n/a")), "{text}");
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,value\nF1 Score,"));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let c = pr_curve(&[(0.9, true), (0.5, false)], 1);
        let svg = pr_curve_svg(&c, "val <all>");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("&lt;all&gt;"));
    }
}
