use dynsplat::config::RunConfig;
use dynsplat::dataset::{generate_synthetic_sequence, SceneSpec};
use dynsplat::geometry::{se3_exp, Twist};
use dynsplat::map::GaussianMap;
use dynsplat::pipeline::{run_eval, run_slam, EvalRequest, Slam};
use dynsplat::tracker::{track_frame, TrackingConfig};
use nalgebra::Vector3;

fn static_desk(frames: usize) -> SceneSpec {
    let mut s = SceneSpec::desk();
    s.frames = frames;
    s.distractors.clear();
    s
}

#[test]
fn tracking_recovers_perturbed_pose() {
    let seq = generate_synthetic_sequence(&static_desk(4), 3).unwrap();
    let k = seq.intrinsics;
    let mut slam = Slam::new(&RunConfig::default(), k).unwrap();
    slam.process(seq.frames[0].clone()).unwrap();
    let map = slam.map();

    // the pipeline anchors frame 0 at the identity
    let gt = seq.gt[3].pose.compose(&seq.gt[0].pose.inverse());
    let kick = se3_exp(&Twist::new(Vector3::new(0.012, -0.018, 0.009), Vector3::new(0.04, 0.03, -0.03)));
    let init = kick.compose(&gt);
    let err = |p: &dynsplat::geometry::CameraPose| (p.camera_center() - gt.camera_center()).norm();
    let r = track_frame(map.gaussians(), &seq.frames[3], &init, &k, &TrackingConfig::default()).unwrap();
    assert!(r.final_loss < r.initial_loss);
    assert!(err(&r.pose) < 0.4 * err(&init), "error {} -> {}", err(&init), err(&r.pose));
}

#[test]
fn short_run_writes_self_consistent_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("seq");
    let seq = generate_synthetic_sequence(&static_desk(12), 5).unwrap();
    seq.write_to_dir(&data).unwrap();
    let out_dir = dir.path().join("run");
    let cfg = RunConfig {
        dataset: Some(data.clone()),
        masks: Some(data.join("masks")),
        output: Some(out_dir.clone()),
        ate_all_frames: true,
        verbosity: 1,
        ..Default::default()
    };
    let (out, metrics) = run_slam(&cfg).unwrap();
    let metrics = metrics.unwrap();
    assert_eq!(out.trajectory.len(), 12);
    assert!(out.diverged_frames().is_empty());
    assert!(!out.map.is_empty());
    let t = metrics.trajectory.as_ref().unwrap();
    assert_eq!(t.matched_pairs, 12);
    // one pixel spans about 5 cm at the scene's depth
    assert!(t.ate_rmse_cm < 2.5, "ATE {} cm", t.ate_rmse_cm);
    assert!(metrics.mean_psnr > 25.0, "PSNR {}", metrics.mean_psnr);

    for f in ["config.toml", "camera.toml", "trajectory.txt", "keyframes.txt", "events.log", "tracking.csv", "losses.csv", "map.bin", "map_summary.json", "metrics.json"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(std::fs::read_dir(out_dir.join("renders")).unwrap().count(), 12);
    let saved = std::fs::read_to_string(out_dir.join("metrics.json")).unwrap();
    let again = run_eval(&EvalRequest::for_run_dir(&out_dir).unwrap()).unwrap();
    assert_eq!(again.to_json(), saved);
    assert_eq!(RunConfig::load(&out_dir.join("config.toml")).unwrap(), cfg);
    let reloaded = GaussianMap::load(&out_dir.join("map.bin")).unwrap();
    assert_eq!(reloaded.gaussians(), out.map.gaussians());
}
