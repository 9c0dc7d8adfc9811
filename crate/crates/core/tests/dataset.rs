//! Generated datasets: layout, lossless loading, determinism, visibility.

use posedistill::data::{
    generate_dataset, load_dataset, read_manifest, render_figure, GenConfig, Split, ANNOTATIONS_FILE,
};
use posedistill::simcc::VIS_UNLABELED;
use posedistill::Error;

fn small(n: usize, seed: u64) -> GenConfig {
    GenConfig {
        image_size: 32,
        ..GenConfig::new(n, seed)
    }
}

#[test]
fn load_round_trips_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(30, 4);
    let manifest = generate_dataset(&cfg, dir.path(), false).unwrap();
    let mut seen = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        let loaded = load_dataset(dir.path(), split).unwrap();
        let ids: Vec<&str> = loaded.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, manifest.split(split));
        for s in &loaded {
            let index: usize = s.id.parse().unwrap();
            let (img, kps) = render_figure(cfg.sample_seed(index), &cfg).unwrap();
            assert_eq!(s.image, img);
            assert_eq!(s.keypoints, kps);
        }
        assert_eq!(loaded, load_dataset(dir.path(), split).unwrap());
        seen += loaded.len();
    }
    assert_eq!(seen, 30);
}

#[test]
fn split_sizes_follow_80_10_10() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small(2500, 1), dir.path(), false).unwrap();
    assert_eq!(
        (m.splits.train.len(), m.splits.val.len(), m.splits.test.len()),
        (2000, 250, 250)
    );
    assert_eq!(read_manifest(dir.path()).unwrap(), m);
}

#[test]
fn regeneration_is_byte_identical_and_refuses_without_force() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small(12, 9);
    generate_dataset(&cfg, a.path(), false).unwrap();
    generate_dataset(&cfg, b.path(), false).unwrap();
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(ANNOTATIONS_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(matches!(
        generate_dataset(&cfg, a.path(), false),
        Err(Error::Refused(_))
    ));
    generate_dataset(&cfg, a.path(), true).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn unlabeled_fraction_matches_out_of_frame_recount() {
    let cfg = GenConfig::new(400, 5);
    let max = cfg.image_size as f64 - 1.0;
    let (mut unlabeled, mut out_of_frame, mut total) = (0, 0, 0);
    for i in 0..cfg.num_samples {
        let (_, kps) = render_figure(cfg.sample_seed(i), &cfg).unwrap();
        for (c, v) in kps.coords.iter().zip(&kps.visibility) {
            total += 1;
            unlabeled += usize::from(*v == VIS_UNLABELED);
            out_of_frame += usize::from(c[0] < 0.0 || c[0] > max || c[1] < 0.0 || c[1] > max);
        }
    }
    assert!(total > 0);
    assert_eq!(unlabeled, out_of_frame);
}

#[test]
fn label_drop_withholds_annotations_without_touching_images() {
    let base = GenConfig::new(200, 6);
    let dropped = GenConfig {
        label_drop_rate: 0.3,
        ..base.clone()
    };
    let (mut kept, mut withheld) = (0usize, 0usize);
    for i in 0..base.num_samples {
        let (img_a, a) = render_figure(base.sample_seed(i), &base).unwrap();
        let (img_b, b) = render_figure(dropped.sample_seed(i), &dropped).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(a.coords, b.coords);
        for (va, vb) in a.visibility.iter().zip(&b.visibility) {
            if *va == VIS_UNLABELED {
                assert_eq!(*vb, VIS_UNLABELED);
            } else if *vb == VIS_UNLABELED {
                withheld += 1;
            } else {
                assert_eq!(va, vb);
                kept += 1;
            }
        }
    }
    let rate = withheld as f64 / (kept + withheld) as f64;
    assert!((rate - 0.3).abs() < 0.03, "withheld fraction {rate}");
}
