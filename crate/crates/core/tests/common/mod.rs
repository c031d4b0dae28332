#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use pyrowatch::dataset::{serialize_labels, Label};
use pyrowatch::geometry::{BBox, ClassId};

/// Writes a small RGB PNG with a deterministic gradient plus its label file.
pub fn write_image(dir: &Path, stem: &str, size: (u32, u32), labels: &[Label]) -> PathBuf {
    let (w, h) = size;
    let img = RgbImage::from_fn(w, h, |x, y| {
        Rgb([
            (x * 37 + y * 11) as u8,
            (x * 5 + y * 53) as u8,
            ((x ^ y) * 29) as u8,
        ])
    });
    let path = dir.join(format!("{stem}.png"));
    img.save(&path).unwrap();
    std::fs::write(dir.join(format!("{stem}.txt")), serialize_labels(labels)).unwrap();
    path
}

pub fn label(class: ClassId, cx: f64, cy: f64, w: f64, h: f64) -> Label {
    (class, BBox::new(cx, cy, w, h).unwrap())
}

/// `positives` images with one fire box each, then `negatives` without.
pub fn write_dataset(dir: &Path, positives: usize, negatives: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..positives {
        let l = label(ClassId::Fire, 0.5, 0.5, 0.1 + (i % 7) as f64 * 0.05, 0.2);
        write_image(dir, &format!("pos{i:04}"), (8, 6), &[l]);
    }
    for i in 0..negatives {
        write_image(dir, &format!("neg{i:04}"), (8, 6), &[]);
    }
}
