//! Regenerates the warehouse replay fixtures under `fixtures/`.
//!
//!     cargo run -p pyrowatch --example gen_warehouse

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use pyrowatch::detect::{write_detection_stream, FrameDetections};
use pyrowatch::geometry::{BBox, ClassId, Detection};

const FPS: f64 = 2.0;

fn det(class: ClassId, conf: f64, cx: f64, cy: f64, w: f64, h: f64) -> Detection {
    Detection::new(BBox::new(cx, cy, w, h).unwrap(), class, conf).unwrap()
}

fn frame(stream: &str, i: u64, detections: Vec<Detection>) -> FrameDetections {
    FrameDetections {
        stream_id: stream.to_string(),
        frame_index: i,
        timestamp_s: i as f64 / FPS,
        detections,
    }
}

/// A fire that appears at `start` and grows, with a weaker duplicate box
/// on every third frame and smoke rising above it from `smoke_start`.
fn fire_frame(stream: &str, i: u64, start: u64, smoke_start: u64) -> FrameDetections {
    let age = (i - start) as f64;
    let w = 0.06 + 0.001 * age;
    let h = 0.08 + 0.0015 * age;
    let mut dets = vec![det(ClassId::Fire, 0.9, 0.40, 0.70, w, h)];
    if (i - start) % 3 == 2 {
        dets.push(det(ClassId::Fire, 0.7, 0.402, 0.701, w, h));
    }
    if i >= smoke_start {
        let s_age = (i - smoke_start) as f64;
        let conf = (0.55 + 0.01 * s_age).min(0.95);
        dets.push(det(
            ClassId::Smoke,
            conf,
            0.41,
            0.45,
            0.2 + 0.002 * s_age,
            0.25 + 0.002 * s_age,
        ));
    }
    frame(stream, i, dets)
}

fn scene1() -> Vec<FrameDetections> {
    let s = "warehouse-1";
    let mut frames = Vec::new();
    for i in 0..=600u64 {
        let f = match i {
            10 => frame(s, i, vec![det(ClassId::Smoke, 0.95, 0.8, 0.2, 0.1, 0.1)]),
            15 => frame(s, i, vec![det(ClassId::Fire, 0.2, 0.3, 0.3, 0.05, 0.05)]),
            200 => frame(s, i, vec![det(ClassId::Fire, 0.9, 0.6, 0.8, 0.04, 0.06)]),
            521.. => fire_frame(s, i, 521, 540),
            0..=20 => frame(s, i, vec![]),
            _ if i % 50 == 0 => frame(s, i, vec![]),
            _ => continue,
        };
        frames.push(f);
    }
    frames
}

fn scene2() -> Vec<FrameDetections> {
    let s = "warehouse-2";
    (0..=90u64)
        .map(|i| match i {
            2 => frame(s, i, vec![det(ClassId::Fire, 0.8, 0.1, 0.9, 0.03, 0.04)]),
            13.. => fire_frame(s, i, 13, 20),
            _ => frame(s, i, vec![]),
        })
        .collect()
}

fn write(dir: &Path, name: &str, frames: &[FrameDetections]) {
    let path = dir.join(name);
    let mut out = BufWriter::new(File::create(&path).unwrap());
    write_detection_stream(&mut out, frames).unwrap();
    println!("wrote {}", path.display());
}

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    write(&dir, "warehouse_scene1.jsonl", &scene1());
    write(&dir, "warehouse_scene2.jsonl", &scene2());
}
