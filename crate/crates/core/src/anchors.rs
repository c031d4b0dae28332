//! Anchor-box estimation by k-means over ground-truth box sizes, using
//! `1 - IoU` of co-centered rectangles as the distance (the darknet
//! `calc_anchors` convention).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetIndex;
use crate::geometry::ClassId;

pub const DEFAULT_CANVAS_PX: u32 = 576;
pub const DEFAULT_ANCHOR_COUNT: usize = 16;
pub const DEFAULT_MAX_ITERS: usize = 1000;

/// YOLOv4's stock anchors, defined on a 608 px canvas.
const YOLOV4_ANCHORS_608: [(f64, f64); 9] = [
    (12.0, 16.0),
    (19.0, 36.0),
    (40.0, 28.0),
    (36.0, 75.0),
    (76.0, 55.0),
    (72.0, 146.0),
    (142.0, 110.0),
    (192.0, 243.0),
    (459.0, 401.0),
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnchorError {
    #[error("no boxes to cluster")]
    NoBoxes,
    #[error("cannot form {k} clusters from {n} boxes")]
    TooFewBoxes { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

/// Width and height of a box in canvas pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wh {
    pub w: f64,
    pub h: f64,
}

impl Wh {
    pub fn new(w: f64, h: f64) -> Self {
        Self { w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// IoU of two rectangles sharing the same center.
pub fn iou_wh(a: Wh, b: Wh) -> f64 {
    let inter = a.w.min(b.w) * a.h.min(b.h);
    inter / (a.area() + b.area() - inter)
}

fn distance(a: Wh, b: Wh) -> f64 {
    1.0 - iou_wh(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub canvas_px: u32,
    /// Sorted by area, ascending.
    pub anchors: Vec<Wh>,
}

impl AnchorSet {
    fn sorted(canvas_px: u32, mut anchors: Vec<Wh>) -> Self {
        anchors.sort_by(|a, b| a.area().total_cmp(&b.area()).then(a.w.total_cmp(&b.w)));
        Self { canvas_px, anchors }
    }

    /// YOLOv4's default anchors rescaled to `canvas_px`.
    pub fn yolov4_default(canvas_px: u32) -> Self {
        let s = canvas_px as f64 / 608.0;
        Self::sorted(
            canvas_px,
            YOLOV4_ANCHORS_608
                .iter()
                .map(|&(w, h)| Wh::new(w * s, h * s))
                .collect(),
        )
    }

    pub fn mean_area(&self) -> f64 {
        if self.anchors.is_empty() {
            return 0.0;
        }
        self.anchors.iter().map(Wh::area).sum::<f64>() / self.anchors.len() as f64
    }

    /// Darknet cfg style: `w,h, w,h, ...` rounded to whole pixels.
    pub fn to_darknet_string(&self) -> String {
        self.anchors
            .iter()
            .map(|a| format!("{},{}", a.w.round() as i64, a.h.round() as i64))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Scales every ground-truth box of `index` to the canvas.
pub fn collect_wh(index: &DatasetIndex, canvas_px: u32) -> Result<Vec<Wh>, AnchorError> {
    collect_wh_filtered(index, canvas_px, |_| true)
}

fn collect_wh_filtered(
    index: &DatasetIndex,
    canvas_px: u32,
    keep: impl Fn(ClassId) -> bool,
) -> Result<Vec<Wh>, AnchorError> {
    let c = canvas_px as f64;
    let whs: Vec<Wh> = index
        .boxes()
        .filter(|(class, _)| keep(*class))
        .map(|(_, b)| Wh::new(b.w() * c, b.h() * c))
        .collect();
    if whs.is_empty() {
        return Err(AnchorError::NoBoxes);
    }
    Ok(whs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidUpdate {
    /// Per-cluster arithmetic mean of member sizes.
    Mean,
    /// The member minimizing the cluster's total distance.
    Medoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub update: CentroidUpdate,
    pub canvas_px: u32,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_ANCHOR_COUNT,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
            update: CentroidUpdate::Mean,
            canvas_px: DEFAULT_CANVAS_PX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub anchor: Wh,
    pub members: usize,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub anchors: AnchorSet,
    /// Index into `anchors.anchors` for every input box.
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Total within-cluster distance after the initial assignment and after
    /// every iteration.
    pub cost_trace: Vec<f64>,
    pub clusters: Vec<ClusterReport>,
    pub mean_iou: f64,
}

fn nearest(p: Wh, centroids: &[Wh]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centroids.iter().enumerate() {
        let d = distance(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn total_cost(whs: &[Wh], centroids: &[Wh], assign: &[usize]) -> f64 {
    whs.iter()
        .zip(assign)
        .map(|(&p, &a)| distance(p, centroids[a]))
        .sum()
}

fn cluster_cost(members: &[Wh], c: Wh) -> f64 {
    members.iter().map(|&p| distance(p, c)).sum()
}

/// Assigns every point to its nearest centroid, then reseeds each empty
/// cluster with the point farthest from its current centroid.
fn assign_all(whs: &[Wh], centroids: &mut [Wh]) -> Vec<usize> {
    let mut assign: Vec<usize> = whs.iter().map(|&p| nearest(p, centroids)).collect();
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in &assign {
        sizes[a] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let far = (0..whs.len())
            .filter(|&i| sizes[assign[i]] > 1)
            .max_by(|&a, &b| {
                distance(whs[a], centroids[assign[a]])
                    .total_cmp(&distance(whs[b], centroids[assign[b]]))
                    .then(b.cmp(&a))
            });
        if let Some(i) = far {
            sizes[assign[i]] -= 1;
            centroids[j] = whs[i];
            assign[i] = j;
            sizes[j] = 1;
        }
    }
    assign
}

fn candidate_centroid(members: &[Wh], update: CentroidUpdate) -> Option<Wh> {
    if members.is_empty() {
        return None;
    }
    Some(match update {
        CentroidUpdate::Mean => {
            let n = members.len() as f64;
            Wh::new(
                members.iter().map(|m| m.w).sum::<f64>() / n,
                members.iter().map(|m| m.h).sum::<f64>() / n,
            )
        }
        CentroidUpdate::Medoid => *members
            .iter()
            .min_by(|&&a, &&b| cluster_cost(members, a).total_cmp(&cluster_cost(members, b)))
            .expect("non-empty"),
    })
}

/// Runs k-means with IoU distance and returns the full clustering trace.
pub fn cluster(whs: &[Wh], cfg: &KMeansConfig) -> Result<Clustering, AnchorError> {
    let k = cfg.k;
    if k == 0 {
        return Err(AnchorError::ZeroK);
    }
    if whs.is_empty() {
        return Err(AnchorError::NoBoxes);
    }
    if whs.len() < k {
        return Err(AnchorError::TooFewBoxes { k, n: whs.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = rand::seq::index::sample(&mut rng, whs.len(), k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<Wh> = init.iter().map(|&i| whs[i]).collect();

    let mut assign = assign_all(whs, &mut centroids);
    let mut cost_trace = vec![total_cost(whs, &centroids, &assign)];
    let mut iterations = 0;
    let mut converged = false;
    let mut members: Vec<Vec<Wh>> = vec![Vec::new(); k];
    while iterations < cfg.max_iters {
        iterations += 1;
        for m in members.iter_mut() {
            m.clear();
        }
        for (&p, &a) in whs.iter().zip(&assign) {
            members[a].push(p);
        }
        // The mean minimizes squared error, not IoU distance, so a moved
        // centroid is kept only if the total cost does not rise.
        let mut cost = total_cost(whs, &centroids, &assign);
        for (j, m) in members.iter().enumerate() {
            let Some(candidate) = candidate_centroid(m, cfg.update) else {
                continue;
            };
            if candidate == centroids[j] {
                continue;
            }
            let previous = std::mem::replace(&mut centroids[j], candidate);
            let trial = total_cost(whs, &centroids, &assign);
            if trial <= cost {
                cost = trial;
            } else {
                centroids[j] = previous;
            }
        }
        let next = assign_all(whs, &mut centroids);
        cost_trace.push(total_cost(whs, &centroids, &next));
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
    }

    // Sort by area and remap assignments to the sorted order.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        centroids[a]
            .area()
            .total_cmp(&centroids[b].area())
            .then(centroids[a].w.total_cmp(&centroids[b].w))
    });
    let mut rank = vec![0; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }
    let assignments: Vec<usize> = assign.iter().map(|&a| rank[a]).collect();
    let anchors = AnchorSet {
        canvas_px: cfg.canvas_px,
        anchors: order.iter().map(|&j| centroids[j]).collect(),
    };

    let mut clusters: Vec<ClusterReport> = anchors
        .anchors
        .iter()
        .map(|&anchor| ClusterReport {
            anchor,
            members: 0,
            mean_iou: 0.0,
        })
        .collect();
    let mut iou_sum = 0.0;
    for (&p, &a) in whs.iter().zip(&assignments) {
        let v = iou_wh(p, anchors.anchors[a]);
        clusters[a].members += 1;
        clusters[a].mean_iou += v;
        iou_sum += v;
    }
    for c in clusters.iter_mut().filter(|c| c.members > 0) {
        c.mean_iou /= c.members as f64;
    }

    Ok(Clustering {
        anchors,
        assignments,
        iterations,
        converged,
        cost_trace,
        clusters,
        mean_iou: iou_sum / whs.len() as f64,
    })
}

/// k-means anchors with the default settings and a given seed.
pub fn kmeans_anchors(whs: &[Wh], k: usize, seed: u64) -> Result<AnchorSet, AnchorError> {
    let cfg = KMeansConfig {
        k,
        seed,
        ..Default::default()
    };
    cluster(whs, &cfg).map(|c| c.anchors)
}

/// Clusters each class's boxes independently. Classes without boxes are
/// absent from the map; a class with fewer than `k` boxes maps to an error.
pub fn per_class_anchors(
    index: &DatasetIndex,
    cfg: &KMeansConfig,
) -> BTreeMap<ClassId, Result<Clustering, AnchorError>> {
    let mut out = BTreeMap::new();
    for class in ClassId::ALL {
        match collect_wh_filtered(index, cfg.canvas_px, |c| c == class) {
            Ok(whs) => {
                out.insert(class, cluster(&whs, cfg));
            }
            Err(AnchorError::NoBoxes) => {}
            Err(e) => {
                out.insert(class, Err(e));
            }
        }
    }
    out
}
