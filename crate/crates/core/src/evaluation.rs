//! Detection and extraction metrics: greedy IoU matching, precision/recall,
//! all-points interpolated AP, TPR at fixed false-positive budgets, and the
//! overall-practicality ratio of satisfactory views to extractable views.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{iou, BBox};

/// IoU needed for a detection to count as a true positive.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ground truth samples")]
    NoGroundTruth,
    #[error("empty precision/recall curve")]
    EmptyCurve,
    #[error("missing-panorama count {m} exceeds 2n+1 = {max}")]
    MissingExceedsSequence { m: u32, max: u32 },
    #[error("{given} missing-panorama counts given for {buildings} buildings")]
    TooManyBuildings { given: usize, buildings: u32 },
    #[error("undefined ratio: N_t ({n_t}) must exceed N_o ({n_o})")]
    UndefinedDenominator { n_t: u32, n_o: u32 },
    #[error("N_u ({n_u}) exceeds N_t - N_o ({avail})")]
    TooManySatisfactory { n_u: u32, avail: u32 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One NDJSON record of a ground-truth or detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn bbox(&self) -> Result<BBox, String> {
        BBox::new(self.x_min, self.y_min, self.x_max, self.y_max).map_err(|e| e.to_string())
    }
}

pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<BoxRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(&line)
            .map_err(|e| EvalError::Parse { line: i + 1, msg: e.to_string() })?;
        rec.bbox().map_err(|msg| EvalError::Parse { line: i + 1, msg })?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-image ground-truth boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub images: BTreeMap<String, Vec<BBox>>,
}

impl GroundTruthSet {
    pub fn from_records(recs: &[BoxRecord]) -> Self {
        let mut images: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
        for r in recs {
            if let Ok(b) = r.bbox() {
                images.entry(r.image_id.clone()).or_default().push(b);
            }
        }
        Self { images }
    }

    pub fn total(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }
}

/// A scored detection on a named image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn from_records(recs: &[BoxRecord]) -> Vec<ScoredBox> {
        recs.iter()
            .filter_map(|r| {
                Some(ScoredBox { image_id: r.image_id.clone(), bbox: r.bbox().ok()?, score: r.score.unwrap_or(1.0) })
            })
            .collect()
    }
}

/// A detection after matching, in global score-descending order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Labeled {
    pub score: f64,
    pub tp: bool,
}

fn det_order(a: &ScoredBox, b: &ScoredBox) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then_with(|| a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then_with(|| a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then_with(|| a.bbox.y_max.total_cmp(&b.bbox.y_max))
}

/// Greedy matching: highest scores first, each claiming its best-overlapping
/// unclaimed ground truth when the IoU reaches `iou_min`.
pub fn match_detections_to_gt(dets: &[ScoredBox], gt: &GroundTruthSet, iou_min: f64) -> Vec<Labeled> {
    let mut order: Vec<&ScoredBox> = dets.iter().collect();
    order.sort_by(|a, b| det_order(a, b));
    let mut claimed: HashMap<&str, Vec<bool>> = gt
        .images
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();
    order
        .into_iter()
        .map(|d| {
            let mut tp = false;
            if let (Some(boxes), Some(used)) = (gt.images.get(&d.image_id), claimed.get_mut(d.image_id.as_str())) {
                let best = boxes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !used[*i])
                    .map(|(i, g)| (i, iou(&d.bbox, g)))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                if let Some((i, v)) = best {
                    if v >= iou_min {
                        used[i] = true;
                        tp = true;
                    }
                }
            }
            Labeled { score: d.score, tp }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision/recall after each detection (already score-ordered).
pub fn pr_curve(labels: &[Labeled], total_gt: usize) -> Result<Vec<PrPoint>, EvalError> {
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut tp = 0usize;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            tp += usize::from(l.tp);
            PrPoint { precision: tp as f64 / (i + 1) as f64, recall: tp as f64 / total_gt as f64 }
        })
        .collect())
}

/// All-points interpolated area under the PR curve.
pub fn average_precision(pr: &[PrPoint]) -> Result<f64, EvalError> {
    if pr.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    // precision envelope from the right
    let mut envelope: Vec<f64> = pr.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in pr.iter().zip(&envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    Ok(ap.clamp(0.0, 1.0))
}

/// True-positive rate at the longest score prefix whose false positives stay
/// within each budget.
pub fn roc_tpr_at_fp(labels: &[Labeled], total_gt: usize, fp_counts: &[usize]) -> Result<Vec<f64>, EvalError> {
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(fp_counts
        .iter()
        .map(|&budget| {
            let (mut tp, mut fp, mut best_tp) = (0usize, 0usize, 0usize);
            for l in labels {
                if l.tp {
                    tp += 1;
                } else {
                    fp += 1;
                }
                if fp > budget {
                    break;
                }
                best_tp = tp;
            }
            best_tp as f64 / total_gt as f64
        })
        .collect())
}

/// Counts feeding the overall-practicality ratio.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Number of target buildings.
    pub n_b: u32,
    /// Maximum panoramas per side.
    pub n: u32,
    /// Missing panoramas per building (buildings not listed miss none).
    #[serde(default)]
    pub m: Vec<u32>,
    /// Satisfactory extracted views.
    #[serde(default)]
    pub n_u: u32,
    /// Occluded views.
    #[serde(default)]
    pub n_o: u32,
}

/// Number of extractable views: `n_b·(2n+1) − Σ m`.
pub fn count_nt(c: &EvalCounts) -> Result<u32, EvalError> {
    let per = 2 * c.n + 1;
    if c.m.len() > c.n_b as usize {
        return Err(EvalError::TooManyBuildings { given: c.m.len(), buildings: c.n_b });
    }
    if let Some(&m) = c.m.iter().find(|&&m| m > per) {
        return Err(EvalError::MissingExceedsSequence { m, max: per });
    }
    Ok(c.n_b * per - c.m.iter().sum::<u32>())
}

/// Fraction of non-occluded extractable views that were extracted satisfactorily.
pub fn op_metric(n_u: u32, n_t: u32, n_o: u32) -> Result<f64, EvalError> {
    if n_t <= n_o {
        return Err(EvalError::UndefinedDenominator { n_t, n_o });
    }
    let avail = n_t - n_o;
    if n_u > avail {
        return Err(EvalError::TooManySatisfactory { n_u, avail });
    }
    Ok(n_u as f64 / avail as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TprAtFp {
    pub fp: usize,
    pub tpr: f64,
}

/// Detection-quality summary over a ground-truth set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub total_gt: usize,
    pub detections: usize,
    pub true_positives: usize,
    pub ap: f64,
    pub roc: Vec<TprAtFp>,
}

pub fn evaluate_detections(
    gt: &GroundTruthSet,
    dets: &[ScoredBox],
    iou_min: f64,
    fp_counts: &[usize],
) -> Result<DetectionReport, EvalError> {
    let total_gt = gt.total();
    let labels = match_detections_to_gt(dets, gt, iou_min);
    let pr = pr_curve(&labels, total_gt)?;
    let ap = if pr.is_empty() { 0.0 } else { average_precision(&pr)? };
    let tprs = roc_tpr_at_fp(&labels, total_gt, fp_counts)?;
    Ok(DetectionReport {
        total_gt,
        detections: labels.len(),
        true_positives: labels.iter().filter(|l| l.tp).count(),
        ap,
        roc: fp_counts.iter().zip(tprs).map(|(&fp, tpr)| TprAtFp { fp, tpr }).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use num_rational::Ratio;
    use proptest::prelude::*;

    fn lab(seq: &[bool]) -> Vec<Labeled> {
        seq.iter()
            .enumerate()
            .map(|(i, &tp)| Labeled { score: 1.0 - i as f64 * 0.01, tp })
            .collect()
    }

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Exact AP: integrate the interpolated precision step function over
    /// recall, evaluating it at every distinct recall level with rationals.
    fn ap_oracle(seq: &[bool], total_gt: i64) -> Ratio<i64> {
        let mut points = Vec::new();
        let mut tp = 0;
        for (i, &t) in seq.iter().enumerate() {
            tp += i64::from(t);
            points.push((Ratio::new(tp, (i + 1) as i64), Ratio::new(tp, total_gt)));
        }
        let mut levels: Vec<Ratio<i64>> = points.iter().map(|p| p.1).collect();
        levels.push(Ratio::from_integer(0));
        levels.sort();
        levels.dedup();
        let mut area = Ratio::from_integer(0);
        for w in levels.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            // interpolated precision on (lo, hi]: best precision at recall >= hi
            let p = points
                .iter()
                .filter(|q| q.1 >= hi)
                .map(|q| q.0)
                .max()
                .unwrap_or_else(|| Ratio::from_integer(0));
            area += (hi - lo) * p;
        }
        area
    }

    fn to_f64(r: Ratio<i64>) -> f64 {
        *r.numer() as f64 / *r.denom() as f64
    }

    #[test]
    fn matching_examples() {
        let gt = GroundTruthSet { images: BTreeMap::from([("a".into(), vec![bx(0.0, 0.0, 10.0, 10.0)])]) };
        let det = |x: f64, s: f64| ScoredBox { image_id: "a".into(), bbox: bx(x, 0.0, x + 10.0, 10.0), score: s };
        // shift 2.5 → IoU 7.5/12.5 = 0.6
        assert!(match_detections_to_gt(&[det(2.5, 0.9)], &gt, 0.5)[0].tp);
        let two = match_detections_to_gt(&[det(1.0, 0.7), det(2.0, 0.9)], &gt, 0.5);
        assert_eq!(two.iter().map(|l| (l.score, l.tp)).collect::<Vec<_>>(), vec![(0.9, true), (0.7, false)]);
        // shift 4.3 → IoU 5.7/14.3 ≈ 0.399
        assert!(!match_detections_to_gt(&[det(4.3, 0.9)], &gt, 0.5)[0].tp);
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_curve(&lab(&[true]), 4).unwrap(), vec![PrPoint { precision: 1.0, recall: 0.25 }]);
        let pr = pr_curve(&lab(&[true, false, true]), 2).unwrap();
        let expect = [(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)];
        for (p, (ep, er)) in pr.iter().zip(expect) {
            assert_abs_diff_eq!(p.precision, ep, epsilon = 1e-15);
            assert_abs_diff_eq!(p.recall, er, epsilon = 1e-15);
        }
        assert!(pr_curve(&lab(&[false, false]), 3).unwrap().iter().all(|p| p.precision == 0.0));
        assert!(matches!(pr_curve(&lab(&[true]), 0), Err(EvalError::NoGroundTruth)));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[PrPoint { precision: 1.0, recall: 1.0 }]).unwrap(), 1.0);
        let pr = pr_curve(&lab(&[true, false, true]), 2).unwrap();
        let ap = average_precision(&pr).unwrap();
        assert_abs_diff_eq!(ap, 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ap, to_f64(ap_oracle(&[true, false, true], 2)), epsilon = 1e-15);
        assert_eq!(average_precision(&pr_curve(&lab(&[false; 4]), 2).unwrap()).unwrap(), 0.0);
        assert!(matches!(average_precision(&[]), Err(EvalError::EmptyCurve)));
    }

    #[test]
    fn ap_matches_oracle_on_all_short_sequences() {
        for len in 1..=6usize {
            for mask in 0u32..(1 << len) {
                let seq: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
                let tps = seq.iter().filter(|t| **t).count() as i64;
                for total in tps.max(1)..=tps.max(1) + 2 {
                    let ap = average_precision(&pr_curve(&lab(&seq), total as usize).unwrap()).unwrap();
                    let oracle = to_f64(ap_oracle(&seq, total));
                    assert!((ap - oracle).abs() <= 1e-12, "{seq:?} / {total}: {ap} vs {oracle}");
                }
            }
        }
    }

    #[test]
    fn roc_examples() {
        assert_eq!(roc_tpr_at_fp(&lab(&[true, true]), 2, &[0]).unwrap(), vec![1.0]);
        assert_eq!(roc_tpr_at_fp(&lab(&[true, false, true, false]), 2, &[1]).unwrap(), vec![1.0]);
        assert_eq!(roc_tpr_at_fp(&lab(&[false, true]), 1, &[0]).unwrap(), vec![0.0]);
        assert!(roc_tpr_at_fp(&lab(&[true]), 0, &[1]).is_err());
    }

    #[test]
    fn nt_and_op_reported_values() {
        let c = EvalCounts { n_b: 50, n: 5, m: vec![3], ..Default::default() };
        assert_eq!(count_nt(&c).unwrap(), 547);
        assert_eq!(count_nt(&EvalCounts { n_b: 1, n: 0, ..Default::default() }).unwrap(), 1);
        assert_eq!(count_nt(&EvalCounts { n_b: 2, n: 1, m: vec![1, 2], ..Default::default() }).unwrap(), 3);
        assert!(count_nt(&EvalCounts { n_b: 1, n: 1, m: vec![4], ..Default::default() }).is_err());

        let op = op_metric(426, 547, 39).unwrap();
        assert_abs_diff_eq!(op, 0.8386, epsilon = 5e-4);
        assert_eq!(op_metric(508, 547, 39).unwrap(), 1.0);
        assert!(matches!(op_metric(0, 39, 39), Err(EvalError::UndefinedDenominator { .. })));
    }

    #[test]
    fn ndjson_round_trip() {
        let text = "{\"image_id\":\"a\",\"x_min\":0,\"y_min\":0,\"x_max\":4,\"y_max\":2}\n\n{\"image_id\":\"b\",\"x_min\":1,\"y_min\":1,\"x_max\":3,\"y_max\":3,\"score\":0.4}\n";
        let recs = read_ndjson(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].score, Some(0.4));
        assert!(matches!(read_ndjson("{\"image_id\":\"a\"}".as_bytes()), Err(EvalError::Parse { line: 1, .. })));
        assert!(read_ndjson("{\"image_id\":\"a\",\"x_min\":5,\"y_min\":0,\"x_max\":4,\"y_max\":2}".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn ap_bounds_and_tp_count(
            dets in prop::collection::vec((0usize..3, 0.0f64..8.0, 0.0f64..1.0), 0..15),
            n_gt in 1usize..4,
        ) {
            let gts: Vec<BBox> = (0..n_gt).map(|i| bx(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0)).collect();
            let gt = GroundTruthSet { images: BTreeMap::from([("img".to_string(), gts)]) };
            let ds: Vec<ScoredBox> = dets
                .iter()
                .map(|(k, dx, s)| ScoredBox { image_id: "img".into(), bbox: bx(*k as f64 * 20.0 + dx, 0.0, *k as f64 * 20.0 + dx + 10.0, 10.0), score: *s })
                .collect();
            let labels = match_detections_to_gt(&ds, &gt, 0.5);
            prop_assert!(labels.iter().filter(|l| l.tp).count() <= n_gt);
            if !labels.is_empty() {
                let ap = average_precision(&pr_curve(&labels, n_gt).unwrap()).unwrap();
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }

        #[test]
        fn op_in_unit_interval(n_t in 1u32..1000, n_o in 0u32..1000, frac in 0.0f64..=1.0) {
            prop_assume!(n_t > n_o);
            let n_u = ((n_t - n_o) as f64 * frac).floor() as u32;
            let op = op_metric(n_u, n_t, n_o).unwrap();
            prop_assert!((0.0..=1.0).contains(&op));
        }
    }
}
