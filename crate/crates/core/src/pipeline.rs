//! Dataset loading, the frame-by-frame estimation run and synthetic fixture export.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::energy::ImagePlane;
use crate::error::{Error, Result};
use crate::fusion::{
    estimate_or_fallback, normalize_frame, propagate_track, CorrespondenceQuery, CorrespondenceUncertainty,
    EstimatorConfig, PropagationMode, TrackState,
};
use crate::geometry::{integrate_imu, relative_pose, CameraModel, ImuSample, ImuState, Pose};
use crate::io::{self, FrameEntry, ResultRow, StampedPose, TrackObservation, TruthRow};
use crate::synthlab::{mix_seed, render_view, visual_match, Scenario, DEFAULT_MATCH_STEP};

pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const FRAMES_FILE: &str = "frames.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const IMU_FILE: &str = "imu.csv";
pub const IMU_INITIAL_FILE: &str = "imu_initial.json";
pub const TRUTH_FILE: &str = "ground_truth.csv";
pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub estimator: EstimatorConfig,
    pub propagation: PropagationMode,
    /// Largest allowed gap between a frame timestamp and its matched pose, s.
    pub timestamp_tolerance: f64,
    pub gravity: [f64; 3],
    pub seed: u64,
    /// Rescale covariances so each image's mean determinant equals the target.
    pub normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            estimator: EstimatorConfig::default(),
            propagation: PropagationMode::SingleSample,
            timestamp_tolerance: 0.005,
            gravity: [0.0, 0.0, -9.81],
            seed: 0,
            normalize: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        if !(self.timestamp_tolerance >= 0.0 && self.timestamp_tolerance.is_finite()) {
            return Err(Error::Config("timestamp_tolerance must be non-negative".into()));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("gravity must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionSource {
    Trajectory { poses: Vec<StampedPose> },
    Imu { samples: Vec<ImuSample>, initial: ImuState },
}

/// File locations of a dataset; see [`DatasetPaths::in_dir`] for the default layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub intrinsics: PathBuf,
    pub frames: PathBuf,
    pub tracks: PathBuf,
    pub trajectory: Option<PathBuf>,
    pub imu: Option<PathBuf>,
    pub imu_initial: Option<PathBuf>,
}

impl DatasetPaths {
    /// Standard file names inside `dir`; the trajectory is preferred over IMU
    /// data when both exist.
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let trajectory = opt(TRAJECTORY_FILE);
        let (imu, imu_initial) = if trajectory.is_some() {
            (None, None)
        } else {
            (opt(IMU_FILE), opt(IMU_INITIAL_FILE))
        };
        DatasetPaths {
            intrinsics: dir.join(INTRINSICS_FILE),
            frames: dir.join(FRAMES_FILE),
            tracks: dir.join(TRACKS_FILE),
            trajectory,
            imu,
            imu_initial,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub camera: CameraModel,
    pub frames: Vec<FrameEntry>,
    pub tracks: Vec<TrackObservation>,
    pub motion: MotionSource,
    /// Directory image paths are resolved against.
    pub image_root: PathBuf,
}

fn name(p: &Path) -> String {
    p.display().to_string()
}

impl Dataset {
    pub fn load(paths: &DatasetPaths) -> Result<Self> {
        let camera = io::parse_intrinsics(&io::read_text(&paths.intrinsics)?, &name(&paths.intrinsics))?;
        let frames = io::parse_frames(&io::read_text(&paths.frames)?, &name(&paths.frames))?;
        let tracks = io::parse_tracks(&io::read_text(&paths.tracks)?, &name(&paths.tracks))?;
        let motion = match (&paths.trajectory, &paths.imu) {
            (Some(t), _) => MotionSource::Trajectory {
                poses: io::parse_tum(&io::read_text(t)?, &name(t))?,
            },
            (None, Some(i)) => {
                let samples = io::parse_imu_csv(&io::read_text(i)?, &name(i))?;
                let init_path = paths
                    .imu_initial
                    .as_ref()
                    .ok_or_else(|| Error::Input("IMU data requires an initial state file".into()))?;
                let initial: ImuState = serde_json::from_str(&io::read_text(init_path)?).map_err(|e| Error::Parse {
                    file: name(init_path),
                    line: e.line(),
                    message: e.to_string(),
                })?;
                MotionSource::Imu { samples, initial }
            }
            (None, None) => return Err(Error::Input("dataset needs a trajectory or IMU data".into())),
        };
        let image_root = paths.frames.parent().map(Path::to_path_buf).unwrap_or_default();
        let dataset = Dataset {
            camera,
            frames,
            tracks,
            motion,
            image_root,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let known: HashMap<u64, ()> = self.frames.iter().map(|f| (f.frame, ())).collect();
        let (w, h) = ((self.camera.width - 1) as f64, (self.camera.height - 1) as f64);
        for t in &self.tracks {
            if !known.contains_key(&t.frame) {
                return Err(Error::MissingFrame(t.frame));
            }
            if !(t.point.x >= 0.0 && t.point.x <= w && t.point.y >= 0.0 && t.point.y <= h) {
                return Err(Error::Input(format!(
                    "track {} in frame {} at ({}, {}) lies outside the {}x{} image",
                    t.track, t.frame, t.point.x, t.point.y, self.camera.width, self.camera.height
                )));
            }
        }
        Ok(())
    }

    /// Camera pose of every frame, matched by nearest timestamp.
    pub fn frame_poses(&self, config: &RunConfig) -> Result<BTreeMap<u64, Pose>> {
        let stamped: Vec<StampedPose> = match &self.motion {
            MotionSource::Trajectory { poses } => poses.clone(),
            MotionSource::Imu { samples, initial } => {
                let gravity = Vector3::from(config.gravity);
                let poses = integrate_imu(samples, initial, &gravity)?;
                samples
                    .iter()
                    .zip(poses)
                    .map(|(s, pose)| StampedPose {
                        timestamp: s.timestamp,
                        pose,
                    })
                    .collect()
            }
        };
        if stamped.is_empty() {
            return Err(Error::Input("no poses available".into()));
        }
        let mut out = BTreeMap::new();
        for f in &self.frames {
            let nearest = stamped
                .iter()
                .min_by(|a, b| {
                    (a.timestamp - f.timestamp)
                        .abs()
                        .total_cmp(&(b.timestamp - f.timestamp).abs())
                })
                .expect("non-empty");
            let gap = (nearest.timestamp - f.timestamp).abs();
            if gap > config.timestamp_tolerance {
                return Err(Error::Input(format!(
                    "no pose within {} s of frame {} (t = {}, nearest gap {gap})",
                    config.timestamp_tolerance, f.frame, f.timestamp
                )));
            }
            out.insert(f.frame, nearest.pose);
        }
        Ok(out)
    }

    fn image_path(&self, frame: u64) -> Result<PathBuf> {
        let entry = self
            .frames
            .iter()
            .find(|f| f.frame == frame)
            .ok_or(Error::MissingFrame(frame))?;
        Ok(if entry.image.is_absolute() {
            entry.image.clone()
        } else {
            self.image_root.join(&entry.image)
        })
    }
}

/// Per-image normalization outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame: u64,
    pub correspondences: usize,
    pub scale: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    /// Ordered by frame, then track.
    pub rows: Vec<ResultRow>,
    pub frames: Vec<FrameSummary>,
}

/// Source of images for a run, keyed by frame id.
pub trait ImageSource {
    /// Makes `frame` available to [`ImageSource::get`].
    fn load(&mut self, frame: u64) -> Result<()>;
    /// Panics unless `frame` was loaded.
    fn get(&self, frame: u64) -> &ImagePlane;
}

/// Images already in memory.
impl ImageSource for HashMap<u64, ImagePlane> {
    fn load(&mut self, frame: u64) -> Result<()> {
        if self.contains_key(&frame) {
            Ok(())
        } else {
            Err(Error::MissingFrame(frame))
        }
    }

    fn get(&self, frame: u64) -> &ImagePlane {
        &self[&frame]
    }
}

struct DiskImages<'a> {
    dataset: &'a Dataset,
    cache: HashMap<u64, ImagePlane>,
}

impl ImageSource for DiskImages<'_> {
    fn load(&mut self, frame: u64) -> Result<()> {
        if !self.cache.contains_key(&frame) {
            let img = io::read_pgm(&self.dataset.image_path(frame)?)?;
            if img.width != self.dataset.camera.width as usize || img.height != self.dataset.camera.height as usize {
                return Err(Error::Input(format!(
                    "frame {frame} image is {}x{}, intrinsics say {}x{}",
                    img.width, img.height, self.dataset.camera.width, self.dataset.camera.height
                )));
            }
            self.cache.insert(frame, img);
        }
        Ok(())
    }

    fn get(&self, frame: u64) -> &ImagePlane {
        &self.cache[&frame]
    }
}

pub fn run_estimate(dataset: &Dataset, config: &RunConfig) -> Result<RunOutput> {
    let mut images = DiskImages {
        dataset,
        cache: HashMap::new(),
    };
    run_with_images(dataset, config, &mut images)
}

/// Walks frames in order. Each track's first observation is its detection;
/// every later observation is estimated against the track's previous frame.
pub fn run_with_images(dataset: &Dataset, config: &RunConfig, images: &mut dyn ImageSource) -> Result<RunOutput> {
    config.validate()?;
    dataset.validate()?;
    let poses = dataset.frame_poses(config)?;
    let mut by_frame: BTreeMap<u64, Vec<&TrackObservation>> = BTreeMap::new();
    for t in &dataset.tracks {
        by_frame.entry(t.frame).or_default().push(t);
    }
    let mut states: BTreeMap<u64, (TrackState, Option<f64>)> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();

    for (&frame, obs) in &mut by_frame {
        obs.sort_by_key(|o| o.track);
        let mut estimates: Vec<(u64, CorrespondenceUncertainty)> = Vec::new();
        for o in obs.iter() {
            let Some((state, depth)) = states.get(&o.track) else {
                states.insert(o.track, (TrackState::detect(o.track, frame, o.point), o.depth));
                continue;
            };
            let ref_frame = state.last_frame;
            let rel = relative_pose(&poses[&ref_frame], &poses[&frame]);
            images.load(ref_frame)?;
            images.load(frame)?;
            let query = CorrespondenceQuery {
                camera: dataset.camera,
                rel,
                x_ref: state.mean,
                ref_patches: state.reference_points.clone(),
                x_v: o.point,
                ref_image: images.get(ref_frame),
                tgt_image: images.get(frame),
                depth: *depth,
                seed: mix_seed(config.seed, frame, o.track),
            };
            estimates.push((o.track, estimate_or_fallback(&query, &config.estimator)));
        }
        for o in obs.iter() {
            if let Some((state, depth)) = states.get_mut(&o.track) {
                if let Some((_, est)) = estimates.iter().find(|(t, _)| *t == o.track) {
                    *state = propagate_track(state, frame, est, config.propagation);
                    *depth = o.depth;
                }
            }
        }
        if estimates.is_empty() {
            continue;
        }
        let raw: Vec<CorrespondenceUncertainty> = estimates.iter().map(|(_, e)| e.clone()).collect();
        let (reported, scale, skipped) = if config.normalize {
            let n = normalize_frame(&raw, config.estimator.fusion.target_det)?;
            (n.uncertainties, n.scale, n.skipped)
        } else {
            (raw, 1.0, false)
        };
        summaries.push(FrameSummary {
            frame,
            correspondences: reported.len(),
            scale,
            skipped,
        });
        for ((track, _), u) in estimates.iter().zip(&reported) {
            rows.push(ResultRow::from_estimate(frame, *track, u));
        }
    }
    Ok(RunOutput {
        rows,
        frames: summaries,
    })
}

/// What [`export_fixture`] wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub scenario: String,
    pub seed: u64,
    pub frames: usize,
    pub tracks: usize,
    pub observations: usize,
    pub files: Vec<String>,
}

pub const IMU_RATE: f64 = 200.0;

/// Renders every frame of a scenario and writes a complete dataset: images,
/// intrinsics, frame list, tracks from the exhaustive matcher, trajectory,
/// IMU readings, ground truth and the scene description.
pub fn export_fixture(scenario: &Scenario, gravity: &Vector3<f64>, out_dir: &Path) -> Result<FixtureSummary> {
    fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    let scene = &scenario.scene;
    let mut frames = Vec::new();
    let mut images = Vec::new();
    let mut truth = Vec::new();
    let mut files = Vec::new();
    for (i, t) in scene.timestamps.iter().enumerate() {
        let view = render_view(scene, i, &scenario.degradation)?;
        let image = io::quantize_image(&view.image);
        let rel = PathBuf::from(format!("images/frame_{i:04}.pgm"));
        io::write_bytes(&out_dir.join(&rel), &io::encode_pgm(&image))?;
        files.push(rel.display().to_string());
        frames.push(FrameEntry {
            frame: i as u64,
            timestamp: *t,
            image: rel,
        });
        for (f, p) in &view.correspondences {
            truth.push(TruthRow {
                frame: i as u64,
                track: *f as u64,
                point: *p,
            });
        }
        images.push(image);
    }
    truth.sort_by_key(|r| (r.frame, r.track));

    let mut tracks = Vec::new();
    let mut current: BTreeMap<u64, crate::geometry::Pixel> = BTreeMap::new();
    for r in truth.iter().filter(|r| r.frame == 0) {
        current.insert(r.track, r.point);
    }
    for (i, image) in images.iter().enumerate() {
        if i > 0 {
            let prev = &images[i - 1];
            current = current
                .iter()
                .filter_map(|(&track, p)| {
                    visual_match(prev, image, p, scenario.search_radius, DEFAULT_MATCH_STEP)
                        .ok()
                        .map(|m| (track, m))
                })
                .collect();
        }
        for (&track, p) in &current {
            let depth = scene.depth_in(i, &scene.features[track as usize])?;
            tracks.push(TrackObservation {
                frame: i as u64,
                track,
                point: *p,
                depth: Some(depth),
            });
        }
    }

    let stamped: Vec<StampedPose> = scene
        .timestamps
        .iter()
        .zip(&scene.poses)
        .map(|(t, p)| StampedPose {
            timestamp: *t,
            pose: *p,
        })
        .collect();
    let duration = scene.timestamps.last().copied().unwrap_or(0.0);
    let imu = scenario.motion.imu_samples(duration, IMU_RATE, gravity);
    let initial = ImuState {
        velocity: scenario.motion.velocity,
        ..ImuState::at_rest(scenario.motion.start)
    };

    let text_files: Vec<(&str, String)> = vec![
        (INTRINSICS_FILE, io::format_intrinsics(&scene.camera)),
        (FRAMES_FILE, io::format_frames(&frames)),
        (TRACKS_FILE, io::format_tracks(&tracks)),
        (TRAJECTORY_FILE, io::format_tum(&stamped)),
        (IMU_FILE, io::format_imu_csv(&imu)),
        (
            IMU_INITIAL_FILE,
            serde_json::to_string_pretty(&initial).expect("state serializes") + "\n",
        ),
        (TRUTH_FILE, io::format_truth(&truth)),
        (
            SCENE_FILE,
            serde_json::to_string_pretty(scenario).expect("scenario serializes") + "\n",
        ),
    ];
    for (file, text) in &text_files {
        io::write_bytes(&out_dir.join(file), text.as_bytes())?;
        files.push(file.to_string());
    }
    Ok(FixtureSummary {
        scenario: scenario.name.clone(),
        seed: scene.seed,
        frames: frames.len(),
        tracks: tracks
            .iter()
            .map(|t| t.track)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        observations: tracks.len(),
        files,
    })
}
