#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use pyrowatch::dataset::{serialize_labels, Label};
use pyrowatch::geometry::{BBox, ClassId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pyrowatch"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn pyrowatch")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

pub fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

pub fn write_image(dir: &Path, stem: &str, labels: &[Label]) -> PathBuf {
    let img = RgbImage::from_fn(8, 6, |x, y| {
        Rgb([(x * 31) as u8, (y * 41) as u8, ((x + y) * 13) as u8])
    });
    let path = dir.join(format!("{stem}.png"));
    img.save(&path).unwrap();
    std::fs::write(dir.join(format!("{stem}.txt")), serialize_labels(labels)).unwrap();
    path
}

pub fn label(class: ClassId, cx: f64, cy: f64, w: f64, h: f64) -> Label {
    (class, BBox::new(cx, cy, w, h).unwrap())
}

/// `positives` images with one fire box each, then `negatives` without,
/// named with `prefix`.
pub fn write_dataset(dir: &Path, prefix: &str, positives: usize, negatives: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..positives {
        let l = label(ClassId::Fire, 0.5, 0.5, 0.1 + (i % 7) as f64 * 0.05, 0.2);
        write_image(dir, &format!("{prefix}pos{i:04}"), &[l]);
    }
    for i in 0..negatives {
        write_image(dir, &format!("{prefix}neg{i:04}"), &[]);
    }
}

/// Smoke-dominated label set in the style of indoor warehouse footage.
pub fn write_warehouse(dir: &Path, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..80 {
        let mut labels = Vec::new();
        for _ in 0..rng.gen_range(1..4) {
            let w = rng.gen_range(0.15..0.6);
            let h = rng.gen_range(0.15..0.5);
            labels.push(label(ClassId::Smoke, 0.5, 0.4, w, h));
        }
        if rng.gen_bool(0.4) {
            labels.push(label(
                ClassId::Fire,
                0.5,
                0.8,
                rng.gen_range(0.03..0.12),
                rng.gen_range(0.05..0.2),
            ));
        }
        write_image(dir, &format!("scene{i:03}"), &labels);
    }
}

/// Ground-truth directory plus an interchange detections file whose
/// per-class detection counts are exactly `fire` and `smoke` (TP, FP, FN).
pub fn write_count_fixture(
    dir: &Path,
    fire: (u64, u64, u64),
    smoke: (u64, u64, u64),
) -> (PathBuf, PathBuf) {
    let gt_dir = dir.join("gt");
    std::fs::create_dir_all(&gt_dir).unwrap();
    let mut lines = String::new();
    let mut n = 0;
    let a = (0.3, 0.3, 0.2, 0.2);
    for (class, (tp, fp, fn_)) in [(ClassId::Fire, fire), (ClassId::Smoke, smoke)] {
        let name = class.name();
        let mut emit = |with_gt: bool, with_pred: bool, conf: f64| {
            let id = format!("img{n:05}");
            let gts = if with_gt {
                vec![label(class, a.0, a.1, a.2, a.3)]
            } else {
                vec![]
            };
            write_image(&gt_dir, &id, &gts);
            if with_pred {
                lines.push_str(&format!(
                    "{{\"stream\":\"{id}\",\"frame\":0,\"t\":0.0,\"class\":\"{name}\",\"conf\":{conf},\"box\":[{},{},{},{}]}}\n",
                    a.0, a.1, a.2, a.3
                ));
            }
            n += 1;
        };
        for i in 0..tp {
            emit(true, true, 0.3 + (i % 70) as f64 / 100.0);
        }
        for i in 0..fp {
            emit(false, true, 0.3 + (i % 50) as f64 / 100.0);
        }
        for _ in 0..fn_ {
            emit(true, false, 0.0);
        }
    }
    let dets = dir.join("detections.jsonl");
    std::fs::write(&dets, lines).unwrap();
    (gt_dir, dets)
}
