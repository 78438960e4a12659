//! End-to-end orchestration: first-frame initialization, per-frame tracking,
//! keyframe management, backend rounds, and the run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{
    file_stem, load_est_depth, load_masks, load_tum_sequence, read_camera_path, read_rgb, write_camera_file, write_mask, write_rgb, Frame,
    Prefetcher, SequenceManifest, CAMERA_FILE, DEFAULT_PREFETCH,
};
use crate::error::{Error, Result};
use crate::eval::{ate, masked_image_metrics, read_tum_trajectory, write_tum_trajectory, FrameMetrics, MetricsReport, StampedPose};
use crate::geometry::{CameraPose, Intrinsics};
use crate::image::Mask;
use crate::keyframe::{keyframe_reason, loop_aware_insert, maintain_window, covisibility_iou, EventKind, Keyframe, KeyframeEvent, WindowConfig};
use crate::map::GaussianMap;
use crate::mapper::{window_optimize, LossRecord, MapperConfig, WindowOptions};
use crate::robust::ResidualHistogram;
use crate::tracker::{constant_velocity_init, track_frame};

/// Outcome of tracking one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingRecord {
    pub frame_index: usize,
    pub timestamp: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iters: usize,
    pub diverged: bool,
}

/// Union of one keyframe's robust masks over one backend round.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustMaskRecord {
    pub round: usize,
    pub kf_id: u32,
    pub frame_index: usize,
    /// True marks outliers.
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Estimated pose of every processed frame; keyframes carry their refined pose.
    pub trajectory: Vec<StampedPose>,
    pub keyframe_trajectory: Vec<StampedPose>,
    pub events: Vec<KeyframeEvent>,
    pub tracking: Vec<TrackingRecord>,
    pub robust_masks: Vec<RobustMaskRecord>,
    pub losses: Vec<(usize, LossRecord)>,
    pub backend_rounds: usize,
    pub map: GaussianMap,
    pub intrinsics: Intrinsics,
}

impl RunOutput {
    pub fn diverged_frames(&self) -> Vec<usize> {
        self.tracking.iter().filter(|t| t.diverged).map(|t| t.frame_index).collect()
    }

    pub fn loop_events(&self) -> impl Iterator<Item = &KeyframeEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::Loop)
    }
}

/// Incremental SLAM state fed one frame at a time.
pub struct Slam {
    cfg: RunConfig,
    window_cfg: WindowConfig,
    k: Intrinsics,
    map: GaussianMap,
    keyframes: Vec<Keyframe>,
    window: Vec<u32>,
    poses: Vec<StampedPose>,
    last_kf: u32,
    since_backend: usize,
    round: usize,
    events: Vec<KeyframeEvent>,
    tracking: Vec<TrackingRecord>,
    robust_masks: Vec<RobustMaskRecord>,
    losses: Vec<(usize, LossRecord)>,
}

impl Slam {
    pub fn new(cfg: &RunConfig, k: Intrinsics) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            window_cfg: cfg.window,
            k,
            map: GaussianMap::new(),
            keyframes: Vec::new(),
            window: Vec::new(),
            poses: Vec::new(),
            last_kf: 0,
            since_backend: 0,
            round: 0,
            events: Vec::new(),
            tracking: Vec::new(),
            robust_masks: Vec::new(),
            losses: Vec::new(),
        })
    }

    pub fn map(&self) -> &GaussianMap {
        &self.map
    }

    pub fn frames_processed(&self) -> usize {
        self.poses.len()
    }

    /// Processes the next frame of the sequence.
    pub fn process(&mut self, frame: Frame) -> Result<()> {
        if (frame.rgb.width(), frame.rgb.height()) != (self.k.width, self.k.height) {
            return Err(Error::SizeMismatch {
                what: "frame vs intrinsics".into(),
                expected: (self.k.width, self.k.height),
                found: frame.dims(),
            });
        }
        if self.poses.is_empty() {
            self.initialize(frame)
        } else {
            self.step(frame)
        }
    }

    fn initialize(&mut self, frame: Frame) -> Result<()> {
        if self.window_cfg.trans_thresh <= 0.0 {
            let mut d: Vec<f64> = frame.depth.iter().copied().filter(|&d| d > 0.0).collect();
            d.sort_by(f64::total_cmp);
            let med = d.get(d.len() / 2).copied().ok_or(Error::EmptyFrame)?;
            self.window_cfg.trans_thresh = self.window_cfg.trans_depth_factor * med;
        }
        let pose = CameraPose::identity();
        let id = self.map.register_keyframe();
        let n = self.map.insert_from_keyframe(&frame, &pose, &self.k, id, true, &self.cfg.map)?;
        log::info!("initialized map with {n} gaussians");
        self.poses.push(StampedPose::new(frame.timestamp, pose));
        self.push_keyframe(id, 0, frame, pose);
        self.window.push(id);
        self.events.push(KeyframeEvent {
            frame_index: 0,
            kind: EventKind::Insert,
            kf_id: id,
            score: 1.0,
            reason: "initial frame".into(),
        });
        if self.cfg.init_iters > 0 {
            let init_cfg = MapperConfig {
                iters_per_round: self.cfg.init_iters,
                ..self.cfg.mapper
            };
            self.backend_round(&init_cfg, false)?;
        }
        Ok(())
    }

    fn push_keyframe(&mut self, id: u32, frame_index: usize, frame: Frame, pose: CameraPose) {
        debug_assert_eq!(id as usize, self.keyframes.len());
        self.keyframes.push(Keyframe {
            kf_id: id,
            frame_index,
            frame: Arc::new(frame),
            pose,
            histogram: ResidualHistogram::new(self.cfg.robust.n_bins),
        });
    }

    fn step(&mut self, frame: Frame) -> Result<()> {
        let index = self.poses.len();
        let prev = self.poses[index - 1].pose;
        let prev2 = index.checked_sub(2).map(|i| self.poses[i].pose);
        let init = constant_velocity_init(&prev, prev2.as_ref());
        let (pose, record) = match track_frame(self.map.gaussians(), &frame, &init, &self.k, &self.cfg.tracking) {
            Ok(r) => (
                r.pose,
                TrackingRecord {
                    frame_index: index,
                    timestamp: frame.timestamp,
                    initial_loss: r.initial_loss,
                    final_loss: r.final_loss,
                    iters: r.iters,
                    diverged: false,
                },
            ),
            Err(Error::TrackingDiverged { initial, last }) => {
                log::warn!("tracking diverged at frame {index} (loss {initial:.5} -> {last:.5})");
                (
                    init,
                    TrackingRecord {
                        frame_index: index,
                        timestamp: frame.timestamp,
                        initial_loss: initial,
                        final_loss: last,
                        iters: 0,
                        diverged: true,
                    },
                )
            }
            Err(e) => return Err(e),
        };
        self.tracking.push(record);
        self.poses.push(StampedPose::new(frame.timestamp, pose));

        let last = &self.keyframes[self.last_kf as usize];
        let vis_cur = self.map.visible_ids(&pose, &self.k);
        let vis_last = self.map.visible_ids(&last.pose, &self.k);
        let t_rel = pose.compose(&last.pose.inverse());
        match keyframe_reason(&vis_cur, &vis_last, &t_rel, &self.window_cfg) {
            Some(reason) => {
                let score = covisibility_iou(&vis_cur, &vis_last);
                self.add_keyframe(index, frame, pose, score, reason)?;
            }
            None => {
                self.since_backend += 1;
                if self.since_backend >= self.cfg.backend_every {
                    let mapper = self.cfg.mapper;
                    self.backend_round(&mapper, !self.cfg.no_robust_mask)?;
                }
            }
        }
        Ok(())
    }

    fn add_keyframe(&mut self, index: usize, frame: Frame, pose: CameraPose, score: f64, reason: String) -> Result<()> {
        let id = self.map.register_keyframe();
        let n = self.map.insert_from_keyframe(&frame, &pose, &self.k, id, false, &self.cfg.map)?;
        log::debug!("keyframe {id} at frame {index}: {n} new gaussians ({reason})");
        self.push_keyframe(id, index, frame, pose);
        self.events.push(KeyframeEvent {
            frame_index: index,
            kind: EventKind::Insert,
            kf_id: id,
            score,
            reason,
        });

        let mut visible: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
        for &w in self.window.iter().chain(std::iter::once(&id)) {
            visible.insert(w, self.map.visible_ids(&self.keyframes[w as usize].pose, &self.k));
        }
        for (ev, iou) in maintain_window(&mut self.window, id, &visible, &self.window_cfg) {
            self.events.push(KeyframeEvent {
                frame_index: index,
                kind: EventKind::Evict,
                kf_id: ev,
                score: iou,
                reason: "most covisible with newest keyframe".into(),
            });
        }
        if !self.cfg.no_loop_aware {
            for (lk, share) in loop_aware_insert(&mut self.window, &visible[&id], self.map.gaussians(), &self.window_cfg) {
                self.events.push(KeyframeEvent {
                    frame_index: index,
                    kind: EventKind::Loop,
                    kf_id: lk,
                    score: share,
                    reason: "origin of visible gaussians".into(),
                });
            }
        }
        self.last_kf = id;
        let mapper = self.cfg.mapper;
        self.backend_round(&mapper, !self.cfg.no_robust_mask)?;
        self.poses[index].pose = self.keyframes[id as usize].pose;
        Ok(())
    }

    /// Densification driven by the previous round's gradient statistics,
    /// then joint optimization, so tracking always sees an optimized map.
    fn backend_round(&mut self, mapper: &MapperConfig, robust_mask: bool) -> Result<()> {
        if self.round > 0 {
            let window_poses: Vec<(u32, CameraPose)> = self.window.iter().map(|&id| (id, self.keyframes[id as usize].pose)).collect();
            let (pruned, densified) = self.map.prune_and_densify(&window_poses, &self.k, self.window_cfg.max_window, &self.cfg.map);
            log::debug!("round {}: pruned {pruned}, densified {densified}", self.round);
        }
        let gauge = *self.window.iter().min().expect("window is never empty");
        let res = window_optimize(
            &mut self.map,
            &mut self.keyframes,
            &self.window,
            &self.k,
            mapper,
            &self.cfg.robust,
            WindowOptions {
                robust_mask,
                gauge_kf: gauge,
            },
        )?;
        if robust_mask {
            for (id, mask) in res.robust_union {
                self.robust_masks.push(RobustMaskRecord {
                    round: self.round,
                    kf_id: id,
                    frame_index: self.keyframes[id as usize].frame_index,
                    mask,
                });
            }
        }
        self.losses.extend(res.trace.into_iter().map(|r| (self.round, r)));
        log::debug!("backend round {}: window {:?}, map {}", self.round, self.window, self.map.len());
        self.round += 1;
        self.since_backend = 0;
        Ok(())
    }

    pub fn finish(self) -> RunOutput {
        let mut trajectory = self.poses;
        let mut keyframe_trajectory = Vec::with_capacity(self.keyframes.len());
        for kf in &self.keyframes {
            trajectory[kf.frame_index].pose = kf.pose;
            keyframe_trajectory.push(StampedPose::new(kf.frame.timestamp, kf.pose));
        }
        RunOutput {
            trajectory,
            keyframe_trajectory,
            events: self.events,
            tracking: self.tracking,
            robust_masks: self.robust_masks,
            losses: self.losses,
            backend_rounds: self.round,
            map: self.map,
            intrinsics: self.k,
        }
    }
}

/// Loads the dataset described by `cfg` with masks, estimated depth and frame range applied.
pub fn prepare_manifest(cfg: &RunConfig) -> Result<SequenceManifest> {
    let root = cfg.dataset.as_ref().ok_or_else(|| Error::Config("no dataset given".into()))?;
    let mut manifest = load_tum_sequence(root, cfg.assoc_tolerance)?;
    manifest.downsample = cfg.downsample;
    if let Some(m) = &cfg.masks {
        load_masks(&mut manifest, m)?;
    }
    if let Some(d) = &cfg.est_depth {
        load_est_depth(&mut manifest, d)?;
    }
    if let Some(r) = cfg.frames {
        let range = r.to_range(manifest.len());
        manifest.select(range);
    }
    if manifest.is_empty() {
        return Err(Error::EmptySequence(root.clone()));
    }
    Ok(manifest)
}

/// Runs the full pipeline and, when `cfg.output` is set, writes the run directory.
pub fn run_slam(cfg: &RunConfig) -> Result<(RunOutput, Option<MetricsReport>)> {
    cfg.validate()?;
    let go = || -> Result<(RunOutput, Option<MetricsReport>)> {
        let manifest = Arc::new(prepare_manifest(cfg)?);
        if let Some(dir) = &cfg.output {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("config.toml");
            fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
        }
        let mut slam = Slam::new(cfg, manifest.frame_intrinsics())?;
        for (i, frame) in Prefetcher::spawn(manifest.clone(), DEFAULT_PREFETCH) {
            slam.process(frame?)?;
            if cfg.verbosity > 0 && (i + 1) % 10 == 0 {
                log::info!("frame {}/{}: map {}", i + 1, manifest.len(), slam.map().len());
            }
        }
        let out = slam.finish();
        let metrics = match &cfg.output {
            Some(dir) => Some(write_run_dir(dir, cfg, &manifest, &out)?),
            None => None,
        };
        Ok((out, metrics))
    };
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(go)
    } else {
        go()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every run artifact and returns the metrics computed from the written files.
fn write_run_dir(dir: &Path, cfg: &RunConfig, manifest: &SequenceManifest, out: &RunOutput) -> Result<MetricsReport> {
    write_tum_trajectory(&dir.join("trajectory.txt"), &out.trajectory)?;
    write_tum_trajectory(&dir.join("keyframes.txt"), &out.keyframe_trajectory)?;
    write_camera_file(&dir.join(CAMERA_FILE), &out.intrinsics)?;
    let mut log = String::new();
    for e in &out.events {
        writeln!(log, "{e}").unwrap();
    }
    write_text(&dir.join("events.log"), &log)?;

    let mut track = String::from("frame,timestamp,initial_loss,final_loss,iters,diverged\n");
    for t in &out.tracking {
        writeln!(
            track,
            "{},{:.6},{:.8},{:.8},{},{}",
            t.frame_index, t.timestamp, t.initial_loss, t.final_loss, t.iters, t.diverged
        )
        .unwrap();
    }
    write_text(&dir.join("tracking.csv"), &track)?;

    out.map.save(&dir.join("map.bin"))?;
    let summary = serde_json::to_string_pretty(&out.map.summary()).expect("summary is serializable");
    write_text(&dir.join("map_summary.json"), &summary)?;

    let renders = dir.join("renders");
    create_dir(&renders)?;
    for (d, sp) in manifest.frames.iter().zip(&out.trajectory) {
        let img = out.map.render(&sp.pose, &out.intrinsics).color;
        write_rgb(&renders.join(format!("{}.png", file_stem(&d.rgb))), &img)?;
    }

    if cfg.verbosity > 0 {
        let mut csv = String::from("round,iteration,total,color,depth,iso\n");
        for (r, l) in &out.losses {
            writeln!(csv, "{r},{},{:.10},{:.10},{:.10},{:.10}", l.iteration, l.total, l.color, l.depth, l.iso).unwrap();
        }
        write_text(&dir.join("losses.csv"), &csv)?;
    }
    if cfg.debug_masks {
        let dm = dir.join("debug_masks");
        create_dir(&dm)?;
        for r in &out.robust_masks {
            write_mask(&dm.join(format!("round{:04}_kf{:04}.png", r.round, r.kf_id)), &r.mask, true)?;
        }
    }

    let req = EvalRequest::for_run_dir(dir)?;
    let metrics = run_eval(&req)?;
    write_text(&dir.join("metrics.json"), &metrics.to_json())?;
    Ok(metrics)
}

/// Inputs of a standalone evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub estimated: PathBuf,
    /// Defaults to `groundtruth.txt` in `dataset`.
    pub ground_truth: Option<PathBuf>,
    /// Rendered images named like the dataset's RGB files.
    pub renders: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub downsample: usize,
    pub frames: Option<crate::config::FrameRange>,
    pub tolerance: f64,
    pub config: serde_json::Value,
}

impl EvalRequest {
    pub fn new(estimated: PathBuf) -> Self {
        Self {
            estimated,
            ground_truth: None,
            renders: None,
            dataset: None,
            masks: None,
            downsample: 1,
            frames: None,
            tolerance: crate::dataset::DEFAULT_ASSOC_TOLERANCE,
            config: serde_json::Value::Null,
        }
    }

    /// The evaluation a run performs on its own directory.
    pub fn for_run_dir(dir: &Path) -> Result<Self> {
        let cfg = RunConfig::load(&dir.join("config.toml"))?;
        let traj = if cfg.ate_all_frames { "trajectory.txt" } else { "keyframes.txt" };
        Ok(Self {
            estimated: dir.join(traj),
            ground_truth: None,
            renders: Some(dir.join("renders")),
            dataset: cfg.dataset.clone(),
            masks: cfg.masks.clone(),
            downsample: cfg.downsample,
            frames: cfg.frames,
            tolerance: cfg.assoc_tolerance,
            config: serde_json::to_value(&cfg).expect("config is serializable"),
        })
    }
}

/// Trajectory and masked rendering metrics from files on disk.
pub fn run_eval(req: &EvalRequest) -> Result<MetricsReport> {
    let est = read_tum_trajectory(&req.estimated)?;
    let gt_path = req
        .ground_truth
        .clone()
        .or_else(|| req.dataset.as_ref().map(|d| d.join("groundtruth.txt")).filter(|p| p.is_file()));
    let trajectory = match gt_path {
        Some(p) => Some(ate(&est, &read_tum_trajectory(&p)?, req.tolerance)?),
        None => None,
    };

    let mut frames = Vec::new();
    if let (Some(renders), Some(root)) = (&req.renders, &req.dataset) {
        let mut manifest = load_tum_sequence(root, req.tolerance)?;
        manifest.downsample = req.downsample;
        if let Some(m) = &req.masks {
            load_masks(&mut manifest, m)?;
        }
        if let Some(r) = req.frames {
            let range = r.to_range(manifest.len());
            manifest.select(range);
        }
        for i in 0..manifest.len() {
            let d = &manifest.frames[i];
            let path = renders.join(format!("{}.png", file_stem(&d.rgb)));
            if !path.is_file() {
                continue;
            }
            let rendered = read_rgb(&path)?;
            let reference = manifest.load_frame(i)?;
            let report = masked_image_metrics(&rendered, &reference.rgb, &reference.m_seg)?;
            frames.push(FrameMetrics {
                timestamp: d.timestamp,
                report,
            });
        }
    }
    Ok(MetricsReport::new(trajectory, frames, req.config.clone()))
}

/// Renders `map` at every pose of a TUM trajectory file into `out_dir`.
pub fn render_views(map_path: &Path, poses_path: &Path, camera_path: &Path, out_dir: &Path) -> Result<usize> {
    let map = GaussianMap::load(map_path)?;
    let k = read_camera_path(camera_path)?;
    let poses = read_tum_trajectory(poses_path)?;
    create_dir(out_dir)?;
    for p in &poses {
        let img = map.render(&p.pose, &k).color;
        write_rgb(&out_dir.join(format!("{:.6}.png", p.timestamp)), &img)?;
    }
    Ok(poses.len())
}
