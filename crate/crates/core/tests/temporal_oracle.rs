use pyrowatch::detect::FrameDetections;
use pyrowatch::geometry::{iou, BBox, ClassId, Detection};
use pyrowatch::temporal::{RegionTracker, TemporalConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frame(i: u64, boxes: &[BBox]) -> FrameDetections {
    FrameDetections {
        stream_id: "s".into(),
        frame_index: i,
        timestamp_s: i as f64,
        detections: boxes
            .iter()
            .map(|&b| Detection::new(b, ClassId::Fire, 0.9).unwrap())
            .collect(),
    }
}

/// Assignment (detection index per region, or none) maximizing total IoU
/// among pairs at or above the threshold.
fn best_assignment(regions: &[BBox], dets: &[BBox], thr: f64) -> (f64, Vec<Option<usize>>) {
    fn go(
        i: usize,
        r: &[BBox],
        d: &[BBox],
        used: &mut [bool],
        thr: f64,
    ) -> (f64, Vec<Option<usize>>) {
        if i == r.len() {
            return (0.0, vec![]);
        }
        let (s, mut rest) = go(i + 1, r, d, used, thr);
        rest.insert(0, None);
        let mut best = (s, rest);
        for j in 0..d.len() {
            let v = iou(&r[i], &d[j]);
            if !used[j] && v >= thr {
                used[j] = true;
                let (s, mut rest) = go(i + 1, r, d, used, thr);
                used[j] = false;
                if s + v > best.0 {
                    rest.insert(0, Some(j));
                    best = (s + v, rest);
                }
            }
        }
        best
    }
    go(0, regions, dets, &mut vec![false; dets.len()], thr)
}

/// Spawns one region per `regions` box, then associates `dets`. Returns
/// which detection each original region took.
fn run_tracker(regions: &[BBox], dets: &[BBox], cfg: TemporalConfig) -> Vec<Option<usize>> {
    let mut tr = RegionTracker::new(cfg);
    tr.update(&frame(0, regions));
    tr.update(&frame(1, dets));
    let rs = tr.regions();
    (0..regions.len() as u64)
        .map(|id| {
            let r = rs.iter().find(|r| r.region_id == id).unwrap();
            if r.frames_missed > 0 {
                None
            } else {
                dets.iter().position(|d| *d == r.bbox)
            }
        })
        .collect()
}

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox::from_corners(x0, y0, x1, y1).unwrap()
}

#[test]
fn crossing_boxes_follow_maximum_iou_assignment() {
    let r1 = bx(0.62, 0.18, 0.75, 0.43);
    let r2 = bx(0.48, 0.28, 0.69, 0.57);
    let d1 = bx(0.48, 0.18, 0.70, 0.57);
    let d2 = bx(0.63, 0.16, 0.75, 0.42);
    let near = |a: f64, b: f64| (a - b).abs() < 0.03;
    assert!(near(iou(&r1, &d2), 0.8));
    assert!(near(iou(&r2, &d1), 0.7));
    assert!(near(iou(&r1, &d1), 0.2));
    assert!(near(iou(&r2, &d2), 0.1));

    let cfg = TemporalConfig::default();
    let regions = [r1, r2];
    let dets = [d1, d2];
    let (_, oracle) = best_assignment(&regions, &dets, cfg.assoc_iou);
    assert_eq!(oracle, vec![Some(1), Some(0)]);
    assert_eq!(run_tracker(&regions, &dets, cfg), oracle);
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0..12) as f64 / 20.0;
    let y = rng.gen_range(0..12) as f64 / 20.0;
    bx(
        x,
        y,
        x + rng.gen_range(3..8) as f64 / 20.0,
        y + rng.gen_range(3..8) as f64 / 20.0,
    )
}

#[test]
fn greedy_association_is_maximal_and_half_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = TemporalConfig::default();
    let mut agree = 0;
    for _ in 0..300 {
        let n_regions = rng.gen_range(1..=3);
        let n_dets = rng.gen_range(1..=3);
        let regions: Vec<BBox> = (0..n_regions).map(|_| random_box(&mut rng)).collect();
        let dets: Vec<BBox> = (0..n_dets).map(|_| random_box(&mut rng)).collect();
        let got = run_tracker(&regions, &dets, cfg);
        let total: f64 = got
            .iter()
            .zip(&regions)
            .filter_map(|(a, r)| a.map(|j| iou(r, &dets[j])))
            .sum();
        let (best, oracle) = best_assignment(&regions, &dets, cfg.assoc_iou);
        assert!(total >= best / 2.0 - 1e-12);
        for (i, a) in got.iter().enumerate() {
            if a.is_none() {
                for (j, d) in dets.iter().enumerate() {
                    if !got.contains(&Some(j)) {
                        assert!(iou(&regions[i], d) < cfg.assoc_iou);
                    }
                }
            }
        }
        agree += (got == oracle) as u32;
    }
    assert!(agree >= 270, "{agree}/300");
}
