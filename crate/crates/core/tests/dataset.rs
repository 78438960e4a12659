use std::fs;
use std::path::Path;
use std::sync::Arc;

use dynsplat::dataset::{
    generate_synthetic_sequence, load_masks, load_tum_sequence, write_depth, write_mask, write_rgb, Prefetcher, SceneSpec,
    SequenceManifest,
};
use dynsplat::eval::ate;
use dynsplat::image::Grid;
use dynsplat::Error;
use nalgebra::Vector3;

fn write_frame_pair(root: &Path, ts: f64, depth_ts: f64, depth_m: f64) -> (String, String) {
    fs::create_dir_all(root.join("rgb")).unwrap();
    fs::create_dir_all(root.join("depth")).unwrap();
    let rgb = format!("rgb/{ts:.6}.png");
    let depth = format!("depth/{depth_ts:.6}.png");
    write_rgb(&root.join(&rgb), &Grid::filled(8, 6, Vector3::new(0.2, 0.4, 0.6))).unwrap();
    write_depth(&root.join(&depth), &Grid::filled(8, 6, depth_m), 5000.0).unwrap();
    (format!("{ts:.6} {rgb}\n"), format!("{depth_ts:.6} {depth}\n"))
}

fn make_sequence(root: &Path, offsets: &[f64]) {
    let mut rgb = String::from("# rgb\n");
    let mut depth = String::from("# depth\n");
    for (i, off) in offsets.iter().enumerate() {
        let ts = 1.0 + i as f64;
        let (r, d) = write_frame_pair(root, ts, ts + off, 1.0);
        rgb.push_str(&r);
        depth.push_str(&d);
    }
    fs::write(root.join("rgb.txt"), rgb).unwrap();
    fs::write(root.join("depth.txt"), depth).unwrap();
}

#[test]
fn exact_pairs_give_one_frame_each() {
    let dir = tempfile::tempdir().unwrap();
    make_sequence(dir.path(), &[0.0, 0.0, 0.0]);
    let m = load_tum_sequence(dir.path(), 0.02).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.dropped, 0);
}

#[test]
fn distant_depth_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    make_sequence(dir.path(), &[0.0, 0.05, 0.0]);
    let m = load_tum_sequence(dir.path(), 0.02).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(m.dropped, 1);
}

#[test]
fn raw_depth_5000_is_one_meter() {
    let dir = tempfile::tempdir().unwrap();
    make_sequence(dir.path(), &[0.0]);
    let m = load_tum_sequence(dir.path(), 0.02).unwrap();
    let f = m.load_frame(0).unwrap();
    assert!(f.depth.iter().all(|&d| d == 1.0));
    assert!(f.m_seg.iter().all(|&s| s));
}

#[test]
fn missing_index_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_tum_sequence(dir.path(), 0.02), Err(Error::MissingIndex(_))));
}

#[test]
fn malformed_index_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("rgb.txt"), "1.0 rgb/a.png\nnope rgb/b.png\n").unwrap();
    fs::write(dir.path().join("depth.txt"), "1.0 depth/a.png\n").unwrap();
    match load_tum_sequence(dir.path(), 0.02) {
        Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn mask_polarity_and_missing_masks() {
    let dir = tempfile::tempdir().unwrap();
    make_sequence(dir.path(), &[0.0, 0.0, 0.0]);
    let mut m = load_tum_sequence(dir.path(), 0.02).unwrap();
    let masks = dir.path().join("masks");
    fs::create_dir_all(&masks).unwrap();
    // white = static
    write_mask(&masks.join("1.000000.png"), &Grid::filled(8, 6, true), true).unwrap();
    write_mask(&masks.join("2.000000.png"), &Grid::filled(8, 6, false), true).unwrap();
    let missing = load_masks(&mut m, &masks).unwrap();
    assert_eq!(missing, 1);
    assert_eq!(m.load_frame(0).unwrap().m_seg.count_true(), 48);
    assert_eq!(m.load_frame(1).unwrap().m_seg.count_true(), 0);
    assert_eq!(m.load_frame(2).unwrap().m_seg.count_true(), 48);
}

#[test]
fn mask_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    make_sequence(dir.path(), &[0.0]);
    let mut m = load_tum_sequence(dir.path(), 0.02).unwrap();
    let masks = dir.path().join("masks");
    fs::create_dir_all(&masks).unwrap();
    write_mask(&masks.join("1.000000.png"), &Grid::filled(4, 3, true), true).unwrap();
    assert!(matches!(load_masks(&mut m, &masks), Err(Error::SizeMismatch { .. })));
}

#[test]
fn manifest_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    make_sequence(dir.path(), &[0.0, 0.0]);
    let m = load_tum_sequence(dir.path(), 0.02).unwrap();
    assert_eq!(SequenceManifest::from_json(&m.to_json()).unwrap(), m);
}

#[test]
fn prefetcher_preserves_order() {
    let dir = tempfile::tempdir().unwrap();
    make_sequence(dir.path(), &[0.0; 5]);
    let m = Arc::new(load_tum_sequence(dir.path(), 0.02).unwrap());
    let stamps: Vec<f64> = Prefetcher::spawn(m, 2).map(|(_, f)| f.unwrap().timestamp).collect();
    assert_eq!(stamps, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
}

fn short_scene() -> SceneSpec {
    let mut s = SceneSpec::desk();
    s.frames = 6;
    s.camera.width = 32;
    s.camera.height = 24;
    s.camera.fx = 24.0;
    s.camera.fy = 24.0;
    s.camera.cx = 15.5;
    s.camera.cy = 11.5;
    s
}

#[test]
fn synthetic_is_deterministic() {
    let s = short_scene();
    let a = generate_synthetic_sequence(&s, 7).unwrap();
    let b = generate_synthetic_sequence(&s, 7).unwrap();
    let c = generate_synthetic_sequence(&s, 8).unwrap();
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        assert_eq!(fa.rgb, fb.rgb);
        assert_eq!(fa.depth, fb.depth);
        assert_eq!(fa.m_seg, fb.m_seg);
    }
    assert_ne!(a.frames[0].rgb, c.frames[0].rgb);
}

#[test]
fn synthetic_without_distractor_is_static() {
    let mut s = short_scene();
    s.distractors.clear();
    let seq = generate_synthetic_sequence(&s, 1).unwrap();
    for f in &seq.frames {
        assert!(f.m_seg.iter().all(|&v| v));
        assert!(f.depth.iter().all(|&d| d > 0.0));
    }
    assert!(seq.footprints.iter().all(|m| m.count_true() == 0));
}

#[test]
fn synthetic_distractor_is_segmented() {
    let seq = generate_synthetic_sequence(&short_scene(), 1).unwrap();
    let dynamic: usize = seq.frames.iter().map(|f| f.m_seg.not().count_true()).sum();
    assert!(dynamic > 0);
    for (f, fp) in seq.frames.iter().zip(&seq.footprints) {
        // the footprint is stricter than the segmentation
        assert_eq!(fp.and(&f.m_seg).count_true(), 0);
    }
}

#[test]
fn ground_truth_against_itself() {
    let mut s = short_scene();
    s.frames = 10;
    let seq = generate_synthetic_sequence(&s, 3).unwrap();
    let r = ate(&seq.gt, &seq.gt, 0.001).unwrap();
    assert_eq!(r.ate_rmse_cm, 0.0);
    assert!(seq.path_length() > 0.1);
}

#[test]
fn synthetic_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let seq = generate_synthetic_sequence(&short_scene(), 2).unwrap();
    seq.write_to_dir(dir.path()).unwrap();
    let mut m = load_tum_sequence(dir.path(), 0.001).unwrap();
    assert_eq!(m.len(), seq.frames.len());
    assert_eq!(m.intrinsics, seq.intrinsics);
    load_masks(&mut m, &dir.path().join("masks")).unwrap();
    let f = m.load_frame(3).unwrap();
    assert_eq!(f.m_seg, seq.frames[3].m_seg);
    for (a, b) in f.depth.iter().zip(seq.frames[3].depth.iter()) {
        assert!((a - b).abs() <= 0.5 / 5000.0 + 1e-12);
    }
    assert_eq!(m.gt_trajectory.as_ref().unwrap().len(), seq.gt.len());
}

#[test]
fn scene_spec_toml_round_trip() {
    let s = SceneSpec::out_and_back();
    assert_eq!(SceneSpec::from_toml(&s.to_toml()).unwrap(), s);
    assert!(matches!(SceneSpec::from_toml("frames = 1"), Err(Error::Config(_))));
}
