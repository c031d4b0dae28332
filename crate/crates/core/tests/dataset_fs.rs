mod common;

use common::{label, write_dataset, write_image};
use pyrowatch::dataset::{
    augment, index_dataset, index_manifest, split, write_manifest, AugmentationSpec, DatasetCounts,
    DatasetError, SplitSpec,
};
use pyrowatch::geometry::ClassId;

fn counts(positive: usize, negative: usize) -> DatasetCounts {
    DatasetCounts {
        positive,
        negative,
        total: positive + negative,
    }
}

#[test]
fn index_counts_positives_and_negatives() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("mixed");
    std::fs::create_dir(&d).unwrap();
    write_image(&d, "a", (4, 4), &[label(ClassId::Fire, 0.5, 0.5, 0.2, 0.2)]);
    write_image(
        &d,
        "b",
        (4, 4),
        &[
            label(ClassId::Smoke, 0.3, 0.3, 0.2, 0.2),
            label(ClassId::Fire, 0.6, 0.6, 0.1, 0.1),
        ],
    );
    write_image(&d, "c", (4, 4), &[]);
    std::fs::write(d.join("notes.md"), "ignored").unwrap();
    let idx = index_dataset(&d).unwrap();
    assert_eq!(idx.counts(), counts(2, 1));
    assert_eq!(idx.name, "mixed");
    let ids: Vec<_> = idx.images.iter().map(|i| i.image_id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert_eq!((idx.images[0].width_px, idx.images[0].height_px), (4, 4));

    let empty = tmp.path().join("neg");
    write_dataset(&empty, 0, 3);
    assert_eq!(index_dataset(&empty).unwrap().counts(), counts(0, 3));
}

#[test]
fn dataset_one_layout() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), 361, 51);
    assert_eq!(index_dataset(tmp.path()).unwrap().counts(), counts(361, 51));
}

#[test]
fn missing_label_and_bad_label_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    write_image(tmp.path(), "a", (4, 4), &[]);
    std::fs::remove_file(tmp.path().join("a.txt")).unwrap();
    assert!(matches!(
        index_dataset(tmp.path()),
        Err(DatasetError::MissingLabel(_))
    ));

    std::fs::write(
        tmp.path().join("a.txt"),
        "0 0.5 0.5 0.2 0.1\n2 0.5 0.5 0.2 0.1\n",
    )
    .unwrap();
    let e = index_dataset(tmp.path()).unwrap_err().to_string();
    assert!(e.contains("line 2: unknown class 2"), "{e}");
}

#[test]
fn augment_quadruples_and_copies_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("d1");
    write_dataset(&src, 6, 2);
    let idx = index_dataset(&src).unwrap();
    let out = tmp.path().join("d4");
    let aug = augment(&idx, &AugmentationSpec::default(), &out).unwrap();
    assert_eq!(aug.counts(), counts(24, 8));
    assert_eq!(aug.name, "d1-augmented");

    let reindexed = index_dataset(&out).unwrap();
    assert_eq!(reindexed.counts(), aug.counts());
    for img in &idx.images {
        let stem = &img.image_id;
        let original = std::fs::read(img.label_path()).unwrap();
        for suffix in ["", "_bright", "_contrast", "_blur"] {
            let copy = std::fs::read(out.join(format!("{stem}{suffix}.txt"))).unwrap();
            assert_eq!(copy, original, "{stem}{suffix}");
        }
        assert_eq!(
            std::fs::read(out.join(format!("{stem}.png"))).unwrap(),
            std::fs::read(&img.path).unwrap()
        );
        let orig = image::open(&img.path).unwrap().to_rgb8();
        let bright = image::open(out.join(format!("{stem}_bright.png")))
            .unwrap()
            .to_rgb8();
        for (p, q) in orig.pixels().zip(bright.pixels()) {
            for c in 0..3 {
                let expect = (p[c] as f64 * 1.5).round().min(255.0) as u8;
                assert_eq!(q[c], expect);
            }
        }
    }
}

#[test]
fn augment_into_source_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), 1, 1);
    let idx = index_dataset(tmp.path()).unwrap();
    assert!(matches!(
        augment(&idx, &AugmentationSpec::default(), tmp.path()),
        Err(DatasetError::OutputIsSource(_))
    ));
}

#[test]
fn split_manifests_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("d");
    write_dataset(&src, 8, 2);
    let idx = index_dataset(&src).unwrap();
    let spec = SplitSpec {
        train_fraction: 0.8,
        seed: 3,
    };
    let (train, test) = split(&idx, &spec).unwrap();
    assert_eq!((train.len(), test.len()), (8, 2));
    assert_eq!(train.counts(), counts(6, 2));
    assert_eq!(train.counts().positive + test.counts().positive, 8);

    let m = tmp.path().join("train.txt");
    write_manifest(&train, &m).unwrap();
    let back = index_manifest(&m).unwrap();
    assert_eq!(back.images, train.images);

    let (train2, _) = split(&idx, &spec).unwrap();
    let m2 = tmp.path().join("train2.txt");
    write_manifest(&train2, &m2).unwrap();
    assert_eq!(std::fs::read(&m).unwrap(), std::fs::read(&m2).unwrap());
}
