//! Evaluation from two perspectives.
//!
//! *Detection* scores every ground-truth box: predictions are matched
//! one-to-one to same-class boxes with IoU at or above the threshold.
//! *Recognition* scores every image: does it contain the class, and did the
//! detector find at least one instance of it.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::ops::{Index, IndexMut};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetIndex, Label};
use crate::geometry::{confidence_order, iou, ClassId, Detection};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("detections and ground truth disagree on image ids; without ground truth: {unknown:?}; without detections: {missing:?}")]
    KeyMismatch {
        unknown: Vec<String>,
        missing: Vec<String>,
    },
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("count conservation violated for {class}: {detail}")]
    Conservation { class: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
    pub interpolation: ApInterpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            confidence_threshold: crate::detect::DEFAULT_CONFIDENCE_THRESHOLD,
            interpolation: ApInterpolation::AllPoint,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, v) in [
            ("iou_threshold", self.iou_threshold),
            ("confidence_threshold", self.confidence_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(EvalError::Config(format!("{name} {v} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// One value per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ByClass<T> {
    pub fire: T,
    pub smoke: T,
}

impl<T> Index<ClassId> for ByClass<T> {
    type Output = T;

    fn index(&self, c: ClassId) -> &T {
        match c {
            ClassId::Fire => &self.fire,
            ClassId::Smoke => &self.smoke,
        }
    }
}

impl<T> IndexMut<ClassId> for ByClass<T> {
    fn index_mut(&mut self, c: ClassId) -> &mut T {
        match c {
            ClassId::Fire => &mut self.fire,
            ClassId::Smoke => &mut self.smoke,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl DetectionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, fp, fn_ }
    }
}

impl std::ops::AddAssign for DetectionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecognitionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl RecognitionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn record(&mut self, outcome: RecognitionOutcome) {
        match outcome {
            RecognitionOutcome::TruePositive => self.tp += 1,
            RecognitionOutcome::TrueNegative => self.tn += 1,
            RecognitionOutcome::FalsePositive => self.fp += 1,
            RecognitionOutcome::FalseNegative => self.fn_ += 1,
        }
    }
}

impl std::ops::AddAssign for RecognitionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Precision, recall, F1 and (detection only) AP. `None` marks a value
/// whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn prf(tp: u64, fp: u64, fn_: u64) -> MetricsReport {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    MetricsReport {
        precision,
        recall,
        f1,
        ap: None,
    }
}

/// `P = TP/(TP+FP)`, `R = TP/(TP+FN)`, `F1 = 2PR/(P+R)`.
pub fn detection_metrics(c: &DetectionCounts) -> MetricsReport {
    prf(c.tp, c.fp, c.fn_)
}

/// Same formulas as [`detection_metrics`] over image-level counts.
pub fn recognition_metrics(c: &RecognitionCounts) -> MetricsReport {
    prf(c.tp, c.fp, c.fn_)
}

/// Rounds a ratio to a percentage with `decimals` places, the way darknet
/// reports it: the ratio is taken in single precision and its exact binary
/// value is rounded half up. (302/400 therefore shows as 75%, because
/// 0.755f32 is slightly below 0.755.)
pub fn display_percent(ratio: f64, decimals: u32) -> f64 {
    let single = ratio as f32 as f64;
    let scale = 10f64.powi(decimals as i32 + 2);
    (single * scale + 0.5).floor() / 10f64.powi(decimals as i32)
}

impl MetricsReport {
    /// All defined values as rounded percentages.
    pub fn rounded(&self, decimals: u32) -> MetricsReport {
        let r = |v: Option<f64>| v.map(|x| display_percent(x, decimals));
        MetricsReport {
            precision: r(self.precision),
            recall: r(self.recall),
            f1: r(self.f1),
            ap: r(self.ap),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// Index into the prediction slice.
    pub pred: usize,
    /// Index into the ground-truth slice.
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageMatch {
    pub counts: ByClass<DetectionCounts>,
    pub pairs: Vec<MatchedPair>,
}

/// Best unmatched same-class ground truth for `pred`, if its IoU reaches
/// the threshold. Ties go to the lower index.
fn claim(pred: &Detection, gts: &[Label], taken: &[bool], threshold: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, (class, gt)) in gts.iter().enumerate() {
        if taken[j] || *class != pred.class {
            continue;
        }
        let v = iou(&pred.bbox, gt);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.filter(|&(_, v)| v >= threshold)
}

/// Greedy one-to-one matching of one image's predictions.
///
/// Predictions are visited by descending confidence; each claims the
/// unmatched same-class ground truth with the highest IoU if that IoU
/// reaches the threshold (TP), and is otherwise a FP of its own class.
/// Unclaimed ground truths are FN. A prediction of the wrong class over a
/// ground truth is therefore a FP for the predicted class and leaves the
/// ground truth a FN.
pub fn match_image(preds: &[Detection], gts: &[Label], cfg: &EvalConfig) -> ImageMatch {
    let mut taken = vec![false; gts.len()];
    let mut out = ImageMatch::default();
    for i in confidence_order(preds) {
        let p = &preds[i];
        match claim(p, gts, &taken, cfg.iou_threshold) {
            Some((j, v)) => {
                taken[j] = true;
                out.counts[p.class].tp += 1;
                out.pairs.push(MatchedPair {
                    pred: i,
                    gt: j,
                    iou: v,
                });
            }
            None => out.counts[p.class].fp += 1,
        }
    }
    for ((class, _), t) in gts.iter().zip(&taken) {
        if !t {
            out.counts[*class].fn_ += 1;
        }
    }
    out
}

/// Ground truth keyed by image id.
pub type GroundTruthSet = BTreeMap<String, Vec<Label>>;

pub fn ground_truth_from_index(index: &DatasetIndex) -> GroundTruthSet {
    index
        .images
        .iter()
        .map(|img| (img.image_id.clone(), img.boxes.clone()))
        .collect()
}

// Compares a/b with c/d exactly.
fn frac_gt(a: u64, b: u64, c: u64, d: u64) -> bool {
    (a as u128) * (d as u128) > (c as u128) * (b as u128)
}

/// Average precision of one class over a set of images.
///
/// Predictions from all images are swept by descending confidence and
/// matched with the same rule as [`match_image`]. The result is computed
/// exactly in rational arithmetic and rounded to `f64` once. Returns `None`
/// when the class has no ground truth.
pub fn average_precision(
    preds: &[(&str, Detection)],
    gts: &GroundTruthSet,
    class: ClassId,
    cfg: &EvalConfig,
) -> Option<f64> {
    let n_gt = gts
        .values()
        .flat_map(|v| v.iter())
        .filter(|(c, _)| *c == class)
        .count() as u64;
    if n_gt == 0 {
        return None;
    }
    let mut ordered: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].1.class == class)
        .collect();
    ordered.sort_by(|&i, &j| {
        preds[j]
            .1
            .confidence
            .total_cmp(&preds[i].1.confidence)
            .then(i.cmp(&j))
    });

    let mut taken: HashMap<&str, Vec<bool>> = HashMap::new();
    // (cumulative tp, cumulative tp + fp, was this step a tp)
    let mut points: Vec<(u64, u64, bool)> = Vec::with_capacity(ordered.len());
    let (mut tp, mut n) = (0u64, 0u64);
    for i in ordered {
        let (image, p) = &preds[i];
        let image_gts = gts.get(*image).map(Vec::as_slice).unwrap_or(&[]);
        let used = taken
            .entry(image)
            .or_insert_with(|| vec![false; image_gts.len()]);
        let hit = claim(p, image_gts, used, cfg.iou_threshold);
        if let Some((j, _)) = hit {
            used[j] = true;
            tp += 1;
        }
        n += 1;
        points.push((tp, n, hit.is_some()));
    }
    if points.is_empty() {
        return Some(0.0);
    }

    // envelope[i] = max precision over points i.. (as tp / n)
    let mut envelope = vec![(0u64, 1u64); points.len()];
    let mut best = (0u64, 1u64);
    for (i, &(tp, n, _)) in points.iter().enumerate().rev() {
        if frac_gt(tp, n, best.0, best.1) {
            best = (tp, n);
        }
        envelope[i] = best;
    }

    let big = |v: u64| BigInt::from(v);
    let ap = match cfg.interpolation {
        ApInterpolation::AllPoint => {
            // Recall grows by 1/n_gt at each tp step.
            let mut sum = BigRational::zero();
            for (i, &(_, _, hit)) in points.iter().enumerate() {
                if hit {
                    let (a, b) = envelope[i];
                    sum += BigRational::new(big(a), big(b));
                }
            }
            sum / BigRational::from_integer(big(n_gt))
        }
        ApInterpolation::ElevenPoint => {
            let mut sum = BigRational::zero();
            for t in 0..=10u64 {
                // first point with recall >= t/10, i.e. 10 * tp >= t * n_gt
                if let Some(i) = points.iter().position(|&(tp, _, _)| 10 * tp >= t * n_gt) {
                    let (a, b) = envelope[i];
                    sum += BigRational::new(big(a), big(b));
                }
            }
            sum / BigRational::from_integer(big(11))
        }
    };
    Some(ap.to_f64().unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RecognitionOutcome {
    #[serde(rename = "TP")]
    TruePositive,
    #[serde(rename = "TN")]
    TrueNegative,
    #[serde(rename = "FP")]
    FalsePositive,
    #[serde(rename = "FN")]
    FalseNegative,
}

/// Image-level outcome for one class.
///
/// An image containing the class is a TP when at least one predicted box of
/// the class overlaps one of its ground truths with IoU at or above the
/// threshold, and a FN otherwise. An image without the class is a FP when
/// any box of the class was predicted, and a TN otherwise.
pub fn recognize_image(
    preds: &[Detection],
    gts: &[Label],
    class: ClassId,
    cfg: &EvalConfig,
) -> RecognitionOutcome {
    let class_gts: Vec<_> = gts
        .iter()
        .filter(|(c, _)| *c == class)
        .map(|(_, b)| b)
        .collect();
    let mut class_preds = preds.iter().filter(|p| p.class == class);
    if class_gts.is_empty() {
        return if class_preds.next().is_some() {
            RecognitionOutcome::FalsePositive
        } else {
            RecognitionOutcome::TrueNegative
        };
    }
    let grounded = class_preds.any(|p| {
        class_gts
            .iter()
            .any(|g| iou(&p.bbox, g) >= cfg.iou_threshold)
    });
    if grounded {
        RecognitionOutcome::TruePositive
    } else {
        RecognitionOutcome::FalseNegative
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBlock {
    pub counts: DetectionCounts,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionBlock {
    pub counts: RecognitionCounts,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveReport<B> {
    pub fire: B,
    pub smoke: B,
    /// Counts summed over both classes.
    pub combined: B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIdentity {
    pub name: String,
    pub images: usize,
    pub ground_truth_boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetIdentity,
    pub config: EvalConfig,
    pub detection: PerspectiveReport<DetectionBlock>,
    pub recognition: PerspectiveReport<RecognitionBlock>,
}

/// Evaluates detections against ground truth, both keyed by image id.
///
/// Counts use predictions at or above the confidence threshold; AP sweeps
/// all supplied predictions.
pub fn evaluate_run(
    detections: &BTreeMap<String, Vec<Detection>>,
    gt: &GroundTruthSet,
    cfg: &EvalConfig,
    dataset_name: &str,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let unknown: Vec<String> = detections
        .keys()
        .filter(|k| !gt.contains_key(*k))
        .cloned()
        .collect();
    let missing: Vec<String> = gt
        .keys()
        .filter(|k| !detections.contains_key(*k))
        .cloned()
        .collect();
    if !unknown.is_empty() || !missing.is_empty() {
        return Err(EvalError::KeyMismatch { unknown, missing });
    }

    let mut det_counts = ByClass::<DetectionCounts>::default();
    let mut rec_counts = ByClass::<RecognitionCounts>::default();
    let mut retained = ByClass::<u64>::default();
    let mut gt_boxes = ByClass::<u64>::default();
    let mut positive_images = ByClass::<u64>::default();
    for (id, labels) in gt {
        let preds: Vec<Detection> = detections[id]
            .iter()
            .filter(|d| d.confidence >= cfg.confidence_threshold)
            .copied()
            .collect();
        let m = match_image(&preds, labels, cfg);
        for class in ClassId::ALL {
            det_counts[class] += m.counts[class];
            retained[class] += preds.iter().filter(|p| p.class == class).count() as u64;
            let n = labels.iter().filter(|(c, _)| *c == class).count() as u64;
            gt_boxes[class] += n;
            positive_images[class] += (n > 0) as u64;
            let outcome = recognize_image(&preds, labels, class, cfg);
            if m.counts[class].tp > 0 && outcome != RecognitionOutcome::TruePositive {
                return Err(EvalError::Conservation {
                    class: class.to_string(),
                    detail: format!("image {id} has a detection TP but no recognition TP"),
                });
            }
            rec_counts[class].record(outcome);
        }
    }

    let images = gt.len() as u64;
    for class in ClassId::ALL {
        let d = det_counts[class];
        if d.tp + d.fn_ != gt_boxes[class] || d.tp + d.fp != retained[class] {
            return Err(EvalError::Conservation {
                class: class.to_string(),
                detail: format!(
                    "{d:?} vs {} ground truths and {} predictions",
                    gt_boxes[class], retained[class]
                ),
            });
        }
        let r = rec_counts[class];
        if r.tp + r.fn_ != positive_images[class] || r.tn + r.fp != images - positive_images[class]
        {
            return Err(EvalError::Conservation {
                class: class.to_string(),
                detail: format!(
                    "{r:?} vs {} positive of {images} images",
                    positive_images[class]
                ),
            });
        }
    }

    let all_preds: Vec<(&str, Detection)> = detections
        .iter()
        .flat_map(|(id, ds)| ds.iter().map(move |d| (id.as_str(), *d)))
        .collect();
    let det_block = |class: ClassId| DetectionBlock {
        counts: det_counts[class],
        metrics: MetricsReport {
            ap: average_precision(&all_preds, gt, class, cfg),
            ..detection_metrics(&det_counts[class])
        },
    };
    let fire = det_block(ClassId::Fire);
    let smoke = det_block(ClassId::Smoke);
    let mut combined_counts = fire.counts;
    combined_counts += smoke.counts;
    let defined_aps: Vec<f64> = [fire.metrics.ap, smoke.metrics.ap]
        .into_iter()
        .flatten()
        .collect();
    let combined_ap = (!defined_aps.is_empty())
        .then(|| defined_aps.iter().sum::<f64>() / defined_aps.len() as f64);
    let detection = PerspectiveReport {
        combined: DetectionBlock {
            counts: combined_counts,
            metrics: MetricsReport {
                ap: combined_ap,
                ..detection_metrics(&combined_counts)
            },
        },
        fire,
        smoke,
    };

    let rec_block = |counts: RecognitionCounts| RecognitionBlock {
        counts,
        metrics: recognition_metrics(&counts),
    };
    let mut rec_combined = rec_counts.fire;
    rec_combined += rec_counts.smoke;
    let recognition = PerspectiveReport {
        fire: rec_block(rec_counts.fire),
        smoke: rec_block(rec_counts.smoke),
        combined: rec_block(rec_combined),
    };

    Ok(EvalReport {
        dataset: DatasetIdentity {
            name: dataset_name.to_string(),
            images: gt.len(),
            ground_truth_boxes: (gt_boxes.fire + gt_boxes.smoke) as usize,
        },
        config: *cfg,
        detection,
        recognition,
    })
}

const UNDEFINED: &str = "—";

fn cell(v: Option<f64>, decimals: u32) -> String {
    match v {
        Some(x) => format!("{:.*}", decimals as usize, display_percent(x, decimals)),
        None => UNDEFINED.to_string(),
    }
}

/// Per-object table: one row per class plus the combined row, percentages
/// to whole numbers.
pub fn render_detection_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
        "class", "TP", "FP", "FN", "AP%", "P%", "R%", "F1%"
    );
    let d = &report.detection;
    for (name, b) in [
        ("fire", &d.fire),
        ("smoke", &d.smoke),
        ("fire+smoke", &d.combined),
    ] {
        let m = &b.metrics;
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            name,
            b.counts.tp,
            b.counts.fp,
            b.counts.fn_,
            cell(m.ap, 1),
            cell(m.precision, 0),
            cell(m.recall, 0),
            cell(m.f1, 0)
        );
    }
    s
}

/// Per-image table: one row per class, percentages to one decimal.
pub fn render_recognition_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7}",
        "class", "TP", "TN", "FP", "FN", "P%", "R%", "F1%"
    );
    let r = &report.recognition;
    for (name, b) in [("fire", &r.fire), ("smoke", &r.smoke)] {
        let m = &b.metrics;
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7}",
            name,
            b.counts.tp,
            b.counts.tn,
            b.counts.fp,
            b.counts.fn_,
            cell(m.precision, 1),
            cell(m.recall, 1),
            cell(m.f1, 1)
        );
    }
    s
}
