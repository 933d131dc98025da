use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ego3d_core::body_fit::{fit_three_stage, initial_params, BodyParams, KinematicModel, MeshLossBreakdown};
use ego3d_core::geometry::ProjectionMatrix;
use ego3d_core::io::{parse_mot, write_mot, CameraSequence, DetectionFile, KeypointFile, MotRow, TrajectoryFile};
use ego3d_core::metrics::{evaluate_tracking, pose_metrics, FrameAnnotations, Labeled, MotReport, PoseMetrics};
use ego3d_core::pose_refine::{refine, LimbTopology, LossBreakdown, PoseTrajectory3D};
use ego3d_core::tracker::Tracker;
use ego3d_core::triangulation::{triangulate_pose, CameraKeypoints, TriangulationError, DEFAULT_JOINTS};
use ego3d_sim::artifacts::{
    detections_file, gt_mot_file, gt_trajectory_file, keypoints_file, scene_artifacts, SceneSummary, SCENE_FILE, CAMERAS_FILE,
};
use ego3d_sim::{generate_scene, render_detections, NoiseConfig};
use log::{debug, info, warn};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScenePreset};
use crate::error::CliError;
use crate::manifest::{OutputDir, RunManifest, MANIFEST_FILE};

pub const TRAJECTORY_DIR: &str = "trajectories";
pub const BODY_DIR: &str = "body";
pub const MOT_DIR: &str = "mot";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "ego3d", version, about = "Multi-view 3D pose reconstruction, body fitting and 3D tracking")]
pub struct Cli {
    /// TOML or JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized stage; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 is fully serial); defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with detections and ground truth.
    Simulate(SimulateArgs),
    /// Triangulate 3D keypoints per subject from a scene directory.
    Triangulate(InputArgs),
    /// Refine triangulated trajectories.
    Refine(InputArgs),
    /// Fit body parameters to trajectories.
    Fit(InputArgs),
    /// Track detections of every camera of a scene.
    Track(TrackArgs),
    /// Score tracks and trajectories against a scene's ground truth.
    Eval(EvalArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Simulate(_) => "simulate",
            Self::Triangulate(_) => "triangulate",
            Self::Refine(_) => "refine",
            Self::Fit(_) => "fit",
            Self::Track(_) => "track",
            Self::Eval(_) => "eval",
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub preset: Option<ScenePreset>,
    /// Render detections without any noise.
    #[arg(long)]
    pub zero_noise: bool,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Scene directory with detection files.
    #[arg(long)]
    pub input: PathBuf,
    /// Box-overlap weight of the association cost; overrides the config.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Scene directory holding the ground truth.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory of `track`.
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    /// Output directory of `triangulate` or `refine`.
    #[arg(long)]
    pub poses: Option<PathBuf>,
}

/// Parses the command line, runs it and writes the manifest.
pub fn run(cli: Cli) -> anyhow::Result<RunManifest> {
    let start = Instant::now();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    match &cli.command {
        Command::Simulate(a) => {
            if a.preset.is_some() {
                cfg.simulate.preset = a.preset;
            }
            if a.zero_noise {
                cfg.simulate.noise = NoiseConfig::none();
            }
        }
        Command::Track(a) => {
            if let Some(alpha) = a.alpha {
                cfg.tracker.alpha = alpha;
            }
        }
        _ => {}
    }
    let cfg = cfg.resolve_preset();
    cfg.validate()?;
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Usage { message: "--threads must be at least 1".into() }.into()),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let output = cli.output.clone().ok_or_else(|| CliError::Usage { message: "--output DIR is required".into() })?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().context("building the thread pool")?;
    let mut out = OutputDir::create(&output)?;
    let (inputs, frames) = pool.install(|| -> Result<_, CliError> {
        match &cli.command {
            Command::Simulate(_) => simulate(&cfg, &mut out),
            Command::Triangulate(a) => triangulate(&cfg, &a.input, &mut out),
            Command::Refine(a) => refine_cmd(&cfg, &a.input, &mut out),
            Command::Fit(a) => fit(&cfg, &a.input, &mut out),
            Command::Track(a) => track(&cfg, &a.input, &mut out),
            Command::Eval(a) => eval(&cfg, a, &mut out),
        }
    })?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        threads,
        config: cfg,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        output_dir: String::new(),
        outputs: Vec::new(),
        frames,
        duration_s: start.elapsed().as_secs_f64(),
    };
    info!("{} finished in {:.2} s", manifest.command, manifest.duration_s);
    Ok(out.finish(manifest)?)
}

type StageResult = Result<(Vec<PathBuf>, Option<usize>), CliError>;

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::missing(format!("{} not found", path.display()), vec![]),
        _ => CliError::Io { path: path.to_path_buf(), source: e },
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| CliError::parse(path, e))
}

fn read_mot(path: &Path) -> Result<Vec<MotRow>, CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::parse(path, e))?;
    parse_mot(&text).map_err(|e| CliError::parse(path, e))
}

/// `subject_XX.json` files of a directory, ordered by name.
fn subject_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::missing(format!("{} not found", dir.display()), vec![]),
        _ => CliError::Io { path: dir.to_path_buf(), source: e },
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("subject_") && name.ends_with(".json") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::missing(format!("no subject_XX.json files in {}", dir.display()), vec![]));
    }
    Ok(files)
}

fn subject_file_name(subject: usize) -> String {
    format!("subject_{subject:02}.json")
}

fn simulate(cfg: &RunConfig, out: &mut OutputDir) -> StageResult {
    let scene = generate_scene(&cfg.simulate.scene).map_err(CliError::numeric)?;
    let rendering = render_detections(&scene, &cfg.simulate.noise, cfg.seed).map_err(CliError::numeric)?;
    info!("scene: {} subjects, {} cameras, {} frames", scene.subjects.len(), scene.cameras.len(), scene.frame_count());
    for (path, bytes) in scene_artifacts(&scene, &rendering).map_err(CliError::numeric)? {
        out.write(&path, &bytes)?;
    }
    Ok((Vec::new(), Some(scene.frame_count())))
}

/// Per-subject summary of a triangulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulationStats {
    pub subject: usize,
    pub frames: usize,
    pub valid_joint_fraction: f64,
    pub mean_inliers: f64,
    pub mean_reprojection_px: f64,
}

fn triangulate(cfg: &RunConfig, input: &Path, out: &mut OutputDir) -> StageResult {
    let summary_path = input.join(SCENE_FILE);
    let cameras_path = input.join(CAMERAS_FILE);
    let summary: SceneSummary = read_json(&summary_path)?;
    let cameras: CameraSequence = read_json(&cameras_path)?;
    let mut inputs = vec![summary_path, cameras_path];
    if cameras.frames.len() != summary.frames {
        return Err(CliError::missing(
            "camera poses do not cover the scene",
            vec![format!("{CAMERAS_FILE}: {} frames, {SCENE_FILE}: {} frames", cameras.frames.len(), summary.frames)],
        ));
    }
    let projections: Vec<BTreeMap<String, ProjectionMatrix>> = (0..cameras.frames.len())
        .map(|f| {
            let views = cameras.views(f).map_err(|e| CliError::parse(&inputs[1], format!("frame {}: {e}", f + 1)))?;
            Ok(views.into_iter().map(|v| (v.id.clone(), v.projection())).collect())
        })
        .collect::<Result<_, CliError>>()?;

    let mut stats = Vec::new();
    for s in 0..summary.subjects {
        let path = input.join(keypoints_file(s));
        let kps: KeypointFile = read_json(&path)?;
        if kps.frames.len() != summary.frames {
            return Err(CliError::missing(
                format!("keypoints of subject {s} do not cover the scene"),
                vec![format!("{}: {} frames, {SCENE_FILE}: {} frames", keypoints_file(s), kps.frames.len(), summary.frames)],
            ));
        }
        let per_frame: Vec<_> = kps
            .frames
            .par_iter()
            .zip(&projections)
            .enumerate()
            .map(|(f, (views, cams))| triangulate_frame(views, cams, cfg, f))
            .collect::<Result<_, _>>()?;
        let joints = per_frame.iter().map(|fr: &FramePose| fr.points.len()).max().filter(|&n| n > 0).unwrap_or(DEFAULT_JOINTS);
        let mut points = Vec::with_capacity(per_frame.len());
        let mut valid = Vec::with_capacity(per_frame.len());
        let (mut n_valid, mut inliers, mut reproj) = (0usize, 0usize, 0.0);
        for fr in per_frame {
            n_valid += fr.valid.iter().filter(|&&v| v).count();
            inliers += fr.inliers;
            reproj += fr.reprojection_sum;
            if fr.points.is_empty() {
                points.push(vec![Default::default(); joints]);
                valid.push(vec![false; joints]);
            } else {
                points.push(fr.points);
                valid.push(fr.valid);
            }
        }
        let traj = PoseTrajectory3D::new(points, valid).map_err(|e| CliError::parse(&path, e))?;
        let denom = n_valid.max(1) as f64;
        stats.push(TriangulationStats {
            subject: s,
            frames: summary.frames,
            valid_joint_fraction: n_valid as f64 / (summary.frames * joints).max(1) as f64,
            mean_inliers: inliers as f64 / denom,
            mean_reprojection_px: reproj / denom,
        });
        if n_valid == 0 {
            warn!("subject {s}: no joint could be triangulated");
        }
        out.write_json(&format!("{TRAJECTORY_DIR}/{}", subject_file_name(s)), &TrajectoryFile::from_trajectory(s, &traj))?;
        inputs.push(path);
    }
    out.write_report("triangulation.json", &stats)?;
    Ok((inputs, Some(summary.frames)))
}

struct FramePose {
    points: Vec<Vector3<f64>>,
    valid: Vec<bool>,
    inliers: usize,
    reprojection_sum: f64,
}

fn triangulate_frame(views: &CameraKeypoints, cams: &BTreeMap<String, ProjectionMatrix>, cfg: &RunConfig, f: usize) -> Result<FramePose, CliError> {
    let empty = FramePose { points: Vec::new(), valid: Vec::new(), inliers: 0, reprojection_sum: 0.0 };
    if views.is_empty() {
        return Ok(empty);
    }
    match triangulate_pose(views, cams, &cfg.ransac) {
        Ok(res) => {
            let mut fp = empty;
            for j in &res.joints {
                match j {
                    Ok(r) => {
                        fp.points.push(r.point);
                        fp.valid.push(true);
                        fp.inliers += r.inliers.len();
                        fp.reprojection_sum += r.mean_reprojection_error;
                    }
                    Err(_) => {
                        fp.points.push(Default::default());
                        fp.valid.push(false);
                    }
                }
            }
            Ok(fp)
        }
        Err(e @ (TriangulationError::InsufficientViews { .. } | TriangulationError::NoConsensus { .. })) => {
            debug!("frame {}: {e}", f + 1);
            Ok(empty)
        }
        Err(TriangulationError::UnknownCamera(c)) => {
            Err(CliError::missing(format!("frame {}: keypoints reference unknown camera `{c}`", f + 1), vec![]))
        }
        Err(e) => Err(CliError::numeric(format!("frame {}: {e}", f + 1))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStats {
    pub subject: usize,
    pub initial: LossBreakdown,
    #[serde(rename = "final")]
    pub final_: LossBreakdown,
    pub iterations: usize,
}

fn refine_cmd(cfg: &RunConfig, input: &Path, out: &mut OutputDir) -> StageResult {
    let files = subject_files(&input.join(TRAJECTORY_DIR))?;
    let loaded: Vec<(TrajectoryFile, PoseTrajectory3D)> = files
        .iter()
        .map(|p| {
            let file: TrajectoryFile = read_json(p)?;
            let traj = file.to_trajectory().map_err(|e| CliError::parse(p, e))?;
            Ok((file, traj))
        })
        .collect::<Result<_, CliError>>()?;
    let frames = frame_count(&files, loaded.iter().map(|(_, t)| t.frame_count()))?;
    let topo = LimbTopology::coco17();
    let results: Vec<_> = loaded
        .par_iter()
        .map(|(file, traj)| {
            refine(traj, &topo, &cfg.refine.weights, &cfg.refine.optim)
                .map_err(|e| CliError::numeric(format!("subject {}: {e}", file.subject)))
        })
        .collect::<Result<_, _>>()?;
    let mut stats = Vec::new();
    for ((file, traj), res) in loaded.iter().zip(results) {
        // joints seen at least once are filled in every frame
        let seen: Vec<bool> = (0..traj.joint_count()).map(|j| (0..traj.frame_count()).any(|t| traj.is_valid(t, j))).collect();
        let refined = PoseTrajectory3D::new(res.trajectory.frames(), vec![seen; traj.frame_count()]).map_err(CliError::numeric)?;
        out.write_json(&format!("{TRAJECTORY_DIR}/{}", subject_file_name(file.subject)), &TrajectoryFile::from_trajectory(file.subject, &refined))?;
        stats.push(RefineStats { subject: file.subject, initial: res.initial_loss, final_: res.final_loss, iterations: res.report.iterations });
    }
    out.write_report("refinement.json", &stats)?;
    Ok((files, frames))
}

/// Common frame count of a set of inputs; disagreement is reported per file.
fn frame_count(files: &[PathBuf], counts: impl Iterator<Item = usize>) -> Result<Option<usize>, CliError> {
    let counts: Vec<usize> = counts.collect();
    let Some(&first) = counts.first() else { return Ok(None) };
    if counts.iter().any(|&c| c != first) {
        let diagnostics = files.iter().zip(&counts).map(|(p, c)| format!("{}: {c} frames", p.display())).collect();
        return Err(CliError::missing("inputs disagree on the frame count", diagnostics));
    }
    Ok(Some(first))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub subject: usize,
    /// Total loss at the initialization and after each stage.
    pub stage_losses: [f64; 4],
    pub loss: MeshLossBreakdown,
}

fn fit(cfg: &RunConfig, input: &Path, out: &mut OutputDir) -> StageResult {
    let files = subject_files(&input.join(TRAJECTORY_DIR))?;
    let loaded: Vec<(usize, PoseTrajectory3D)> = files
        .iter()
        .map(|p| {
            let file: TrajectoryFile = read_json(p)?;
            Ok((file.subject, file.to_trajectory().map_err(|e| CliError::parse(p, e))?))
        })
        .collect::<Result<_, CliError>>()?;
    let frames = frame_count(&files, loaded.iter().map(|(_, t)| t.frame_count()))?;
    let model = KinematicModel::canonical();
    for (p, (_, t)) in files.iter().zip(&loaded) {
        if t.joint_count() != model.keypoint_count() {
            return Err(CliError::parse(p, format!("expected {} joints, got {}", model.keypoint_count(), t.joint_count())));
        }
    }
    let topo = LimbTopology::coco17();
    let results: Vec<_> = loaded
        .par_iter()
        .map(|(s, target)| {
            let init = initial_params(&model, target);
            fit_three_stage(&model, &init, target, &cfg.fit.weights, &topo, &cfg.fit.optim)
                .map_err(|e| CliError::numeric(format!("subject {s}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let mut stats = Vec::new();
    for ((s, _), res) in loaded.iter().zip(results) {
        let params: &Vec<BodyParams> = &res.params;
        out.write_json(&format!("{BODY_DIR}/{}", subject_file_name(*s)), params)?;
        stats.push(FitStats { subject: *s, stage_losses: res.stage_losses, loss: res.loss });
    }
    out.write_report("fit.json", &stats)?;
    Ok((files, frames))
}

fn track(cfg: &RunConfig, input: &Path, out: &mut OutputDir) -> StageResult {
    let summary_path = input.join(SCENE_FILE);
    let summary: SceneSummary = read_json(&summary_path)?;
    let paths: Vec<PathBuf> = summary.cameras.iter().map(|c| input.join(detections_file(&c.id))).collect();
    let results: Vec<String> = paths
        .par_iter()
        .map(|p| {
            let dets: DetectionFile = read_json(p)?;
            if dets.frames.len() != summary.frames {
                return Err(CliError::missing(
                    format!("detections of camera {} do not cover the scene", dets.camera),
                    vec![format!("{}: {} frames, {SCENE_FILE}: {} frames", p.display(), dets.frames.len(), summary.frames)],
                ));
            }
            track_camera(cfg, &dets, p)
        })
        .collect::<Result<_, _>>()?;
    for (cam, text) in summary.cameras.iter().zip(results) {
        out.write(&format!("{MOT_DIR}/{}.txt", cam.id), text.as_bytes())?;
    }
    let mut inputs = vec![summary_path];
    inputs.extend(paths);
    Ok((inputs, Some(summary.frames)))
}

fn track_camera(cfg: &RunConfig, dets: &DetectionFile, path: &Path) -> Result<String, CliError> {
    if !(dets.fps > 0.0 && dets.fps.is_finite()) {
        return Err(CliError::parse(path, format!("fps must be positive, got {}", dets.fps)));
    }
    let dt = 1.0 / dets.fps;
    let mut tracker = Tracker::new(ego3d_core::tracker::AssociationConfig { frame_interval: dt, ..cfg.tracker }).map_err(CliError::numeric)?;
    let mut rows = Vec::new();
    for fr in &dets.frames {
        let pose = (&fr.camera_pose).try_into().map_err(|e| CliError::parse(path, format!("frame {}: {e}", fr.frame)))?;
        let outputs = tracker.step(&fr.detections, &pose, dt).map_err(|e| CliError::numeric(format!("{} frame {}: {e}", dets.camera, fr.frame)))?;
        rows.extend(outputs.iter().map(|o| MotRow::from_output(fr.frame, o)));
    }
    Ok(write_mot(&rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub iou_threshold: f64,
    /// All cameras pooled, identities kept apart per camera.
    pub overall: MotReport,
    pub per_camera: BTreeMap<String, MotReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEval {
    pub overall: PoseMetrics,
    pub per_subject: BTreeMap<String, PoseMetrics>,
    /// Fraction of ground-truth joints with a prediction.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tracking: Option<TrackingMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poses: Option<PoseEval>,
}

/// Frame count a prediction directory declares in its manifest, if any.
fn declared_frames(dir: &Path) -> Result<Option<usize>, CliError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let m: RunManifest = read_json(&path)?;
    Ok(m.frames)
}

fn eval(cfg: &RunConfig, args: &EvalArgs, out: &mut OutputDir) -> StageResult {
    if args.tracks.is_none() && args.poses.is_none() {
        return Err(CliError::Usage { message: "eval needs --tracks and/or --poses".into() });
    }
    let summary_path = args.scene.join(SCENE_FILE);
    let summary: SceneSummary = read_json(&summary_path)?;
    let frames = summary.frames;
    let mut inputs = vec![summary_path];
    let mut diagnostics = Vec::new();
    for dir in args.tracks.iter().chain(&args.poses) {
        if let Some(n) = declared_frames(dir)? {
            if n != frames {
                diagnostics.push(format!("{}: {n} frames, scene {}: {frames} frames", dir.display(), args.scene.display()));
            }
        }
    }

    let mut tracking = None;
    if let Some(dir) = &args.tracks {
        let mut per_camera = BTreeMap::new();
        let mut pooled = Vec::new();
        let mut missing = Vec::new();
        for (k, cam) in summary.cameras.iter().enumerate() {
            let gt_path = args.scene.join(gt_mot_file(&cam.id));
            let pred_path = dir.join(MOT_DIR).join(format!("{}.txt", cam.id));
            if !pred_path.exists() {
                missing.push(format!("{} missing", pred_path.display()));
                continue;
            }
            let gt = read_mot(&gt_path)?;
            let pred = read_mot(&pred_path)?;
            for (name, rows) in [(&gt_path, &gt), (&pred_path, &pred)] {
                if let Some(r) = rows.iter().find(|r| r.frame == 0 || r.frame > frames) {
                    diagnostics.push(format!("{}: frame {} outside 1..={frames}", name.display(), r.frame));
                }
            }
            let seq = annotations(&gt, &pred, frames, 0);
            if seq.iter().all(|f| f.gt.is_empty() && f.pred.is_empty()) {
                debug!("camera {}: nothing to score", cam.id);
            } else {
                let report = evaluate_tracking(&seq, cfg.eval.iou_threshold).map_err(CliError::numeric)?;
                per_camera.insert(cam.id.clone(), report);
            }
            // disjoint id ranges keep cameras from sharing identities
            pooled.extend(annotations(&gt, &pred, frames, (k as u64 + 1) << 32));
            inputs.push(gt_path);
            inputs.push(pred_path);
        }
        if !missing.is_empty() {
            return Err(CliError::missing("track outputs are incomplete", missing));
        }
        if diagnostics.is_empty() {
            let overall = evaluate_tracking(&pooled, cfg.eval.iou_threshold).map_err(CliError::numeric)?;
            tracking = Some(TrackingMetrics { iou_threshold: cfg.eval.iou_threshold, overall, per_camera });
        }
    }

    let mut poses = None;
    if let Some(dir) = &args.poses {
        let mut per_subject = BTreeMap::new();
        let (mut pred_all, mut gt_all, mut mask_all) = (Vec::new(), Vec::new(), Vec::new());
        for s in 0..summary.subjects {
            let gt_path = args.scene.join(gt_trajectory_file(s));
            let pred_path = dir.join(TRAJECTORY_DIR).join(subject_file_name(s));
            let gt = read_json::<TrajectoryFile>(&gt_path)?.to_trajectory().map_err(|e| CliError::parse(&gt_path, e))?;
            let pred = read_json::<TrajectoryFile>(&pred_path)?.to_trajectory().map_err(|e| CliError::parse(&pred_path, e))?;
            inputs.push(gt_path);
            inputs.push(pred_path.clone());
            if pred.frame_count() != gt.frame_count() || pred.joint_count() != gt.joint_count() {
                diagnostics.push(format!(
                    "{}: {} frames x {} joints, ground truth: {} frames x {} joints",
                    pred_path.display(),
                    pred.frame_count(),
                    pred.joint_count(),
                    gt.frame_count(),
                    gt.joint_count()
                ));
                continue;
            }
            if pred.mask().iter().any(|&v| v) {
                let m = pose_metrics(pred.values(), gt.values(), Some(pred.mask())).map_err(CliError::numeric)?;
                per_subject.insert(format!("subject_{s:02}"), m);
            }
            pred_all.extend_from_slice(pred.values());
            gt_all.extend_from_slice(gt.values());
            mask_all.extend_from_slice(pred.mask());
        }
        if diagnostics.is_empty() {
            if !mask_all.iter().any(|&v| v) {
                return Err(CliError::numeric("no predicted joint to score"));
            }
            let overall = pose_metrics(&pred_all, &gt_all, Some(&mask_all)).map_err(CliError::numeric)?;
            let coverage = mask_all.iter().filter(|&&v| v).count() as f64 / mask_all.len() as f64;
            poses = Some(PoseEval { overall, per_subject, coverage });
        }
    }

    if !diagnostics.is_empty() {
        return Err(CliError::missing("predictions do not match the scene's frames", diagnostics));
    }
    let report = EvalReport { frames, tracking, poses };
    out.write_report(METRICS_FILE, &report)?;
    Ok((inputs, Some(frames)))
}

/// Per-frame ground truth and predictions; ids are shifted by `id_offset`.
fn annotations(gt: &[MotRow], pred: &[MotRow], frames: usize, id_offset: u64) -> Vec<FrameAnnotations> {
    let mut seq = vec![FrameAnnotations::default(); frames];
    for r in gt.iter().filter(|r| (1..=frames).contains(&r.frame)) {
        seq[r.frame - 1].gt.push(Labeled { id: r.id + id_offset, bbox: r.bbox });
    }
    for r in pred.iter().filter(|r| (1..=frames).contains(&r.frame)) {
        seq[r.frame - 1].pred.push(Labeled { id: r.id + id_offset, bbox: r.bbox });
    }
    seq
}
