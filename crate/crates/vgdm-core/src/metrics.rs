//! Evaluation metrics: Dice, IoU, HD95 and AUPRC, plus the per-dataset
//! evaluation driver and its CSV report.
//!
//! Conventions: Dice and IoU of two empty masks are 1; HD95 is undefined when
//! either mask is empty; the HD95 percentile pools both directed distance
//! sets and linearly interpolates between order statistics; mask boundaries
//! are foreground pixels 4-adjacent to background or the image edge; units
//! are pixels throughout.

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::data::Sample;
use crate::denoiser::DenoiserConfig;
use crate::distance::squared_distance_to;
use crate::params::ParamVec;
use crate::real::Real;
use crate::sampler::{derive_seed, sample_mask, SamplerError};
use crate::schedule::NoiseSchedule;

/// Threshold used when none is specified.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{what}: shape {actual} does not match {expected}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("score/label length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("csv parse error at line {line}: {reason}")]
    BadCsv { line: usize, reason: String },
}

fn check_shapes(pred: &Array2<u8>, gt: &Array2<u8>, what: &str) -> Result<(), MetricError> {
    if pred.dim() != gt.dim() {
        return Err(MetricError::ShapeMismatch {
            what: what.into(),
            expected: format!("{:?}", pred.dim()),
            actual: format!("{:?}", gt.dim()),
        });
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice_score(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64, MetricError> {
    check_shapes(pred, gt, "dice_score")?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let p = *p != 0;
        let g = *g != 0;
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn iou_score(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64, MetricError> {
    check_shapes(pred, gt, "iou_score")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let p = *p != 0;
        let g = *g != 0;
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels 4-adjacent to background or to the image edge.
pub fn boundary_pixels(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            let on_edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let touches_bg = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|(dy, dx)| {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    ny >= 0
                        && nx >= 0
                        && (ny as usize) < h
                        && (nx as usize) < w
                        && mask[[ny as usize, nx as usize]] == 0
                });
            if on_edge || touches_bg {
                out.push((y, x));
            }
        }
    }
    out
}

/// Percentile by linear interpolation between order statistics
/// (`rank = p/100 · (n−1)`). `values` need not be sorted.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < v.len() {
        v[lo] + frac * (v[lo + 1] - v[lo])
    } else {
        v[lo]
    }
}

/// 95th percentile of the pooled directed boundary distances between two
/// masks. `None` when either mask is empty.
pub fn hd95(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<Option<f64>, MetricError> {
    check_shapes(pred, gt, "hd95")?;
    if pred.iter().all(|v| *v == 0) || gt.iter().all(|v| *v == 0) {
        return Ok(None);
    }
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);

    let boundary_mask = |pixels: &[(usize, usize)]| {
        let mut m = Array2::<bool>::from_elem(pred.dim(), false);
        for &(y, x) in pixels {
            m[[y, x]] = true;
        }
        m
    };
    let d2_to_gt = squared_distance_to(&boundary_mask(&bg));
    let d2_to_pred = squared_distance_to(&boundary_mask(&bp));

    let mut pooled = Vec::with_capacity(bp.len() + bg.len());
    for &(y, x) in &bp {
        pooled.push(d2_to_gt[[y, x]].sqrt());
    }
    for &(y, x) in &bg {
        pooled.push(d2_to_pred[[y, x]].sqrt());
    }
    Ok(Some(percentile(&pooled, 95.0)))
}

/// Step-interpolated average precision: `Σ (R_i − R_{i−1})·P_i` over
/// thresholds at distinct scores, descending. `None` without positives.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|l| **l != 0).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        // Consume the tie group sharing this score.
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(Some(ap))
}

/// Precision-recall points at every distinct score threshold (descending).
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|l| **l != 0).count();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = if positives == 0 {
            0.0
        } else {
            tp as f64 / positives as f64
        };
        out.push((score, precision, recall));
    }
    Ok(out)
}

/// Dice of `(prob >= threshold)` against `gt` for each threshold, computed
/// incrementally over the descending-score sweep.
pub fn dice_threshold_sweep(
    prob: &Array2<f64>,
    gt: &Array2<u8>,
    thresholds: &[f64],
) -> Result<Vec<f64>, MetricError> {
    if prob.dim() != gt.dim() {
        return Err(MetricError::ShapeMismatch {
            what: "dice_threshold_sweep".into(),
            expected: format!("{:?}", prob.dim()),
            actual: format!("{:?}", gt.dim()),
        });
    }
    let mut pairs: Vec<(f64, u8)> = prob.iter().cloned().zip(gt.iter().cloned()).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let g_total = gt.iter().filter(|v| **v != 0).count();

    let mut sorted_thresholds: Vec<(usize, f64)> = thresholds.iter().cloned().enumerate().collect();
    sorted_thresholds.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut out = vec![0.0; thresholds.len()];
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut i = 0usize;
    for (orig_idx, th) in sorted_thresholds {
        while i < pairs.len() && pairs[i].0 >= th {
            a += 1;
            if pairs[i].1 != 0 {
                inter += 1;
            }
            i += 1;
        }
        out[orig_idx] = if a + g_total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (a + g_total) as f64
        };
    }
    Ok(out)
}

/// Per-sample metric row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
    pub auprc: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Aggregate over a dataset: metric means (HD95 over its defined values) and
/// summed counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub aggregate: SampleEval,
    /// Count of samples whose HD95 was undefined.
    pub hd95_undefined: usize,
    /// Evaluation conventions, for the run log.
    pub notes: Vec<String>,
}

fn counts(pred: &Array2<u8>, gt: &Array2<u8>) -> (u64, u64, u64, u64) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        match (*p != 0, *g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

fn aggregate_rows(samples: &[SampleEval]) -> (SampleEval, usize) {
    let n = samples.len() as f64;
    let dice = samples.iter().map(|s| s.dice).sum::<f64>() / n;
    let iou = samples.iter().map(|s| s.iou).sum::<f64>() / n;
    let defined: Vec<f64> = samples.iter().filter_map(|s| s.hd95).collect();
    let hd95 = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let auprc_vals: Vec<f64> = samples.iter().filter_map(|s| s.auprc).collect();
    let auprc = if auprc_vals.is_empty() {
        None
    } else {
        Some(auprc_vals.iter().sum::<f64>() / auprc_vals.len() as f64)
    };
    let agg = SampleEval {
        id: "aggregate".into(),
        dice,
        iou,
        hd95,
        auprc,
        tp: samples.iter().map(|s| s.tp).sum(),
        fp: samples.iter().map(|s| s.fp).sum(),
        fn_: samples.iter().map(|s| s.fn_).sum(),
        tn: samples.iter().map(|s| s.tn).sum(),
    };
    (agg, samples.len() - defined.len())
}

/// Evaluate one prediction against ground truth.
pub fn evaluate_prediction(
    id: &str,
    prob: &Array2<f64>,
    pred_mask: &Array2<u8>,
    gt_mask: &Array2<u8>,
) -> Result<SampleEval, MetricError> {
    let dice = dice_score(pred_mask, gt_mask)?;
    let iou = iou_score(pred_mask, gt_mask)?;
    let hd = hd95(pred_mask, gt_mask)?;
    let scores: Vec<f64> = prob.iter().cloned().collect();
    let labels: Vec<u8> = gt_mask.iter().cloned().collect();
    let ap = auprc(&scores, &labels)?;
    let (tp, fp, fn_, tn) = counts(pred_mask, gt_mask);
    Ok(SampleEval {
        id: id.to_string(),
        dice,
        iou,
        hd95: hd,
        auprc: ap,
        tp,
        fp,
        fn_,
        tn,
    })
}

impl EvalReport {
    /// Aggregate per-sample rows into a report with the standard convention
    /// notes.
    pub fn from_samples(samples: Vec<SampleEval>) -> Self {
        let (aggregate, hd95_undefined) = aggregate_rows(&samples);
        EvalReport {
            samples,
            aggregate,
            hd95_undefined,
            notes: vec![
                "hd95: pooled directed boundary distances, 95th percentile by linear interpolation"
                    .into(),
                "both-empty masks: dice = iou = 1, hd95 undefined".into(),
                "units: pixels".into(),
            ],
        }
    }
}

/// Sample a mask per item (per-item seed derived from `seed` and the item
/// index) and aggregate the metrics.
pub fn evaluate<F: Real>(
    dataset: &[Sample],
    params: &ParamVec<F>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<EvalReport, MetricError> {
    evaluate_with_predictions(dataset, params, config, schedule, seed).map(|(r, _)| r)
}

/// [`evaluate`] that also returns each item's probability map and mask, in
/// dataset order.
#[allow(clippy::type_complexity)]
pub fn evaluate_with_predictions<F: Real>(
    dataset: &[Sample],
    params: &ParamVec<F>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(EvalReport, Vec<(Array2<f64>, Array2<u8>)>), MetricError> {
    if dataset.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let mut samples = Vec::with_capacity(dataset.len());
    let mut predictions = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.iter().enumerate() {
        let condition: Array3<F> = item.image.mapv(|v| F::from_f64(v as f64));
        let pred = sample_mask(
            &condition,
            params,
            config,
            schedule,
            derive_seed(seed, i as u64),
            DEFAULT_THRESHOLD,
        )?;
        let prob = pred.prob.mapv(|v| v.as_f64());
        samples.push(evaluate_prediction(
            &item.id, &prob, &pred.mask, &item.mask,
        )?);
        predictions.push((prob, pred.mask));
    }
    Ok((EvalReport::from_samples(samples), predictions))
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "undefined".into(),
    }
}

impl EvalReport {
    /// CSV with header `id,dice,iou,hd95,auprc,tp,fp,fn,tn`, one row per
    /// sample plus the final aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice,iou,hd95,auprc,tp,fp,fn,tn\n");
        for s in self.samples.iter().chain(std::iter::once(&self.aggregate)) {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{},{},{},{},{}\n",
                s.id,
                s.dice,
                s.iou,
                fmt_opt(s.hd95),
                fmt_opt(s.auprc),
                s.tp,
                s.fp,
                s.fn_,
                s.tn
            ));
        }
        out
    }
}

/// Parse rows written by [`EvalReport::to_csv`] (including the aggregate row).
pub fn parse_eval_csv(text: &str) -> Result<Vec<SampleEval>, MetricError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "id,dice,iou,hd95,auprc,tp,fp,fn,tn" {
                return Err(MetricError::BadCsv {
                    line: 1,
                    reason: format!("unexpected header '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(MetricError::BadCsv {
                line: i + 1,
                reason: format!("{} columns, expected 9", parts.len()),
            });
        }
        let opt = |s: &str| -> Result<Option<f64>, MetricError> {
            if s == "undefined" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| MetricError::BadCsv {
                    line: i + 1,
                    reason: format!("bad number '{s}'"),
                })
            }
        };
        let num = |s: &str| -> Result<f64, MetricError> {
            s.parse().map_err(|_| MetricError::BadCsv {
                line: i + 1,
                reason: format!("bad number '{s}'"),
            })
        };
        let int = |s: &str| -> Result<u64, MetricError> {
            s.parse().map_err(|_| MetricError::BadCsv {
                line: i + 1,
                reason: format!("bad count '{s}'"),
            })
        };
        rows.push(SampleEval {
            id: parts[0].to_string(),
            dice: num(parts[1])?,
            iou: num(parts[2])?,
            hd95: opt(parts[3])?,
            auprc: opt(parts[4])?,
            tp: int(parts[5])?,
            fp: int(parts[6])?,
            fn_: int(parts[7])?,
            tn: int(parts[8])?,
        });
    }
    Ok(rows)
}
