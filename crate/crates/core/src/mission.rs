//! The closed mapping/planning loop.
//!
//! Each step captures a frame, updates the voxel map, spawns and trains
//! surfels, refreshes confidences, plans the next viewpoint and travels there.
//! Time is simulated: every step is charged fixed mapping and planning costs
//! plus the travel time of the chosen path. All randomness comes from named
//! streams of one seed, so a configuration fully determines the outputs.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::Serialize;

use crate::camera::{CameraIntrinsics, Pose};
use crate::confidence::{
    low_confidence_rois, refresh_confidences, update_observations, ConfidenceConfig, ConfidenceMode, ObservationLog,
    PoseHistory,
};
use crate::error::{Error, Result};
use crate::image::{write_pgm, write_ppm};
use crate::metrics::{backproject, Evaluator, ExplorationCensus, MetricSample};
use crate::planner::{plan, CandidateViewpoint, PlanDiagnostics, PlannerConfig, PlannerMode};
use crate::rng::{stream, Rng};
use crate::scene::{render_gt, sample_surface_points, sample_test_viewpoints, GroundTruthScene, RgbdFrame, TestViewConfig};
use crate::splat::{densify_mask, prune_invisible, render, spawn, DensifyThresholds, RenderedViews, SpawnConfig, SplatMap};
use crate::train::{normal_from_depth, train_step, Optimizer, TrainConfig};
use crate::voxel::VoxelMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Steps(usize),
    SimTime(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissionConfig {
    /// Scene file path or `builtin:<name>`.
    pub scene: String,
    pub intr: CameraIntrinsics,
    pub voxel_size: f64,
    pub planner: PlannerConfig,
    pub train: TrainConfig,
    pub confidence: ConfidenceConfig,
    pub densify: DensifyThresholds,
    pub spawn: SpawnConfig,
    /// Depth noise standard deviation per meter of depth.
    pub noise_slope: f64,
    pub budget: Budget,
    pub eval_every: usize,
    pub robot_speed: f64,
    pub mapping_time_s: f64,
    pub planning_time_s: f64,
    pub prune_every: usize,
    /// Minimum compositing weight for a surfel to count as seen.
    pub visibility_w_min: f64,
    pub n_test_views: usize,
    pub n_surface_points: usize,
    pub completeness_threshold: f64,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dump_views: bool,
    pub dump_voxels: bool,
    /// Also capture at the intermediate cells of each travelled path.
    pub measure_along_path: bool,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            scene: "builtin:room".into(),
            intr: CameraIntrinsics::default(),
            voxel_size: 0.2,
            planner: PlannerConfig::default(),
            train: TrainConfig::default(),
            confidence: ConfidenceConfig::default(),
            densify: DensifyThresholds::default(),
            spawn: SpawnConfig::default(),
            noise_slope: 0.01,
            budget: Budget::SimTime(300.0),
            eval_every: 5,
            robot_speed: 1.0,
            mapping_time_s: 1.0,
            planning_time_s: 0.5,
            prune_every: 5,
            visibility_w_min: 0.05,
            n_test_views: 20,
            n_surface_points: 10_000,
            completeness_threshold: 0.02,
            seed: 1,
            out_dir: None,
            dump_views: false,
            dump_voxels: false,
            measure_along_path: false,
        }
    }
}

impl MissionConfig {
    pub fn validate(&self) -> Result<()> {
        self.intr.validate()?;
        self.planner.validate()?;
        match self.budget {
            Budget::SimTime(t) if !(t > 0.0) => return Err(Error::Config("time budget must be positive".into())),
            _ => {}
        }
        if !(self.voxel_size > 0.0 && self.robot_speed > 0.0 && self.completeness_threshold > 0.0) {
            return Err(Error::Config("voxel size, robot speed and threshold must be positive".into()));
        }
        if self.eval_every == 0 || self.prune_every == 0 {
            return Err(Error::Config("eval_every and prune_every must be positive".into()));
        }
        Ok(())
    }

    fn confidence_config(&self) -> ConfidenceConfig {
        ConfidenceConfig {
            mode: if self.planner.mode == PlannerMode::CountOnly {
                ConfidenceMode::CountOnly
            } else {
                ConfidenceMode::Full
            },
            d_far: self.intr.far(),
            ..self.confidence
        }
    }
}

/// One line of `metrics.csv`. Quality metrics are empty on steps without an
/// evaluation; training and planning fields are empty at step 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub sim_time_s: f64,
    pub psnr_db: Option<f64>,
    pub completeness: Option<f64>,
    pub n_surfels: usize,
    pub explored_frac: f64,
    pub loss_c: Option<f64>,
    pub loss_d: Option<f64>,
    pub loss_n: Option<f64>,
    pub planner_mode: String,
    pub winner_kind: Option<String>,
    pub path_len_m: Option<f64>,
}

/// One line of `planner.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannerRecord {
    pub step: usize,
    pub planner_mode: String,
    pub n_random: usize,
    pub n_roi_frontier: usize,
    pub n_roi_low_conf: usize,
    pub n_reachable: usize,
    pub u_v: f64,
    pub u_g: f64,
    pub utility: f64,
    pub score: f64,
    pub path_len_m: f64,
}

pub const CONFIDENCE_BINS: usize = 20;

/// Histogram of surfel confidences over `[0, max k]`.
pub fn confidence_histogram(map: &SplatMap) -> (f64, [usize; CONFIDENCE_BINS]) {
    let mut bins = [0; CONFIDENCE_BINS];
    let k_max = map.surfels.iter().map(|s| s.confidence).fold(0.0, f64::max);
    for s in &map.surfels {
        let b = if k_max > 0.0 {
            ((s.confidence / k_max) * CONFIDENCE_BINS as f64) as usize
        } else {
            0
        };
        bins[b.min(CONFIDENCE_BINS - 1)] += 1;
    }
    (k_max, bins)
}

#[derive(Debug, Clone, PartialEq)]
pub enum MissionStatus {
    Completed,
    /// The planner found no reachable candidate.
    Starved(String),
}

#[derive(Debug, Clone)]
pub struct MissionReport {
    pub status: MissionStatus,
    pub records: Vec<StepRecord>,
    pub samples: Vec<MetricSample>,
    pub planner: Vec<PlannerRecord>,
    pub histograms: Vec<(usize, f64, [usize; CONFIDENCE_BINS])>,
    pub map: SplatMap,
    pub voxels: VoxelMap,
    /// Every pose at which a frame was captured.
    pub poses: Vec<Pose>,
    pub sim_time_s: f64,
}

impl MissionReport {
    pub fn final_sample(&self) -> Option<&MetricSample> {
        self.samples.last()
    }
}

/// Writes the color, depth, normal, opacity and confidence channels.
pub fn write_views(dir: &Path, stem: &str, views: &RenderedViews, far: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_ppm(&dir.join(format!("{stem}_color.ppm")), &views.color)?;
    write_pgm(&dir.join(format!("{stem}_depth.pgm")), &views.depth, far)?;
    let normals = crate::image::ImageBuf::from_vec(
        views.normal.width,
        views.normal.height,
        views
            .normal
            .data
            .iter()
            .map(|n| if n.norm() > 0.0 { (n.normalize() + Vector3::repeat(1.0)) * 0.5 } else { Vector3::zeros() })
            .collect(),
    );
    write_ppm(&dir.join(format!("{stem}_normal.ppm")), &normals)?;
    write_pgm(&dir.join(format!("{stem}_opacity.pgm")), &views.opacity, 1.0)?;
    let k_max = views.confidence.data.iter().copied().fold(0.0, f64::max);
    write_pgm(&dir.join(format!("{stem}_confidence.pgm")), &views.confidence, k_max)?;
    Ok(())
}

/// Free voxel of the true occupancy closest to the scene center.
pub fn initial_pose(scene: &GroundTruthScene, truth: &VoxelMap) -> Result<Pose> {
    let c = scene.bounds.center();
    truth
        .free_indices()
        .into_iter()
        .map(|i| ((truth.center(i) - c).norm(), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, i)| Pose::new(truth.center(i), 0.0, 0.0))
        .ok_or(Error::NoFreeSpace)
}

struct Mission<'a> {
    cfg: &'a MissionConfig,
    scene: GroundTruthScene,
    conf: ConfidenceConfig,
    evaluator: Evaluator,
    census: ExplorationCensus,
    map: SplatMap,
    voxels: VoxelMap,
    history: PoseHistory,
    frames: Vec<RgbdFrame>,
    log: ObservationLog,
    opt: Optimizer,
    sensor: Rng,
    training: Rng,
    planner: Rng,
    sim_time: f64,
}

impl Mission<'_> {
    /// Capture at `pose`: voxel integration, spawning, and bookkeeping.
    /// Returns the pose index.
    fn measure(&mut self, pose: &Pose, step: usize) -> Result<usize> {
        let cfg = self.cfg;
        let frame = render_gt(&self.scene, pose, &cfg.intr, cfg.noise_slope, &mut self.sensor, self.frames.len());
        let points = backproject(&frame.depth, pose, &cfg.intr, 1);
        self.voxels.integrate_point_cloud(&pose.position, &points)?;
        let rendered = render(&self.map, pose, &cfg.intr, false);
        let mask = densify_mask(&rendered, &frame, &cfg.densify);
        let normals = normal_from_depth(&frame.depth, &cfg.intr);
        spawn(&mut self.map, &frame, &mask, &normals, &cfg.intr, &cfg.spawn, step, &mut self.training);
        self.opt.resize(self.map.len());
        self.log.resize(self.map.len());
        self.frames.push(frame);
        Ok(self.history.push(*pose))
    }

    fn sample(&self, step: usize) -> MetricSample {
        let (psnr_mean, completeness) = self.evaluator.evaluate(&self.map, self.history.poses());
        MetricSample {
            step,
            sim_time: self.sim_time,
            psnr_mean,
            completeness,
            surfel_count: self.map.len(),
            explored_frac: self.census.explored_fraction(&self.voxels),
        }
    }
}

fn within_budget(budget: Budget, next_step: usize, sim_time: f64) -> bool {
    match budget {
        Budget::Steps(n) => next_step <= n,
        Budget::SimTime(t) => sim_time < t,
    }
}

/// Runs a mission and, when `cfg.out_dir` is set, writes its outputs.
pub fn run(cfg: &MissionConfig) -> Result<MissionReport> {
    cfg.validate()?;
    let scene = GroundTruthScene::load(&cfg.scene)?;
    let truth = VoxelMap::from_ground_truth(&scene, cfg.voxel_size);
    let mut pose = initial_pose(&scene, &truth)?;
    let census = ExplorationCensus::new(&truth, truth.index_of(&pose.position).ok_or(Error::NoFreeSpace)?);
    let mut eval_rng = stream(cfg.seed, "eval");
    let test_poses = sample_test_viewpoints(&scene, &truth, cfg.n_test_views, &TestViewConfig::default(), &mut eval_rng)?;
    let surface: Vec<Vector3<f64>> = sample_surface_points(&scene, cfg.n_surface_points, &mut eval_rng)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let evaluator = Evaluator::new(&scene, test_poses, surface, cfg.completeness_threshold, cfg.intr);
    let mut m = Mission {
        cfg,
        conf: cfg.confidence_config(),
        voxels: VoxelMap::for_bounds(&scene.bounds, cfg.voxel_size),
        scene,
        evaluator,
        census,
        map: SplatMap::new(),
        history: PoseHistory::new(),
        frames: Vec::new(),
        log: ObservationLog::new(),
        opt: Optimizer::new(),
        sensor: stream(cfg.seed, "sensor"),
        training: stream(cfg.seed, "training"),
        planner: stream(cfg.seed, "planner"),
        sim_time: 0.0,
    };
    let mode = cfg.planner.mode.as_str().to_string();
    let views_dir = cfg.out_dir.as_ref().map(|d| d.join("views"));

    let first = m.sample(0);
    let mut samples = vec![first];
    let mut records = vec![StepRecord {
        step: 0,
        sim_time_s: 0.0,
        psnr_db: Some(first.psnr_mean),
        completeness: Some(first.completeness),
        n_surfels: 0,
        explored_frac: first.explored_frac,
        loss_c: None,
        loss_d: None,
        loss_n: None,
        planner_mode: mode.clone(),
        winner_kind: None,
        path_len_m: None,
    }];
    let mut planner_rows = Vec::new();
    let mut histograms = Vec::new();
    let mut status = MissionStatus::Completed;
    let mut step = 0;

    while within_budget(cfg.budget, step + 1, m.sim_time) {
        step += 1;
        let pose_index = m.measure(&pose, step)?;
        let trace = train_step(&mut m.map, &mut m.opt, &m.frames, &cfg.intr, &cfg.train, &mut m.training);
        if step % cfg.prune_every == 0 {
            let (_, remap) = prune_invisible(&mut m.map, m.history.poses(), &cfg.intr, cfg.visibility_w_min);
            m.opt.remap(&remap);
            m.log.remap(&remap);
        }
        update_observations(&mut m.log, &m.map, pose_index, &pose, &cfg.intr, cfg.visibility_w_min);
        refresh_confidences(&mut m.map, &m.log, &m.history, &m.conf);
        let (k_max, bins) = confidence_histogram(&m.map);
        histograms.push((step, k_max, bins));
        if let Some(dir) = &views_dir {
            if cfg.dump_views {
                write_views(dir, &format!("step_{step}"), &render(&m.map, &pose, &cfg.intr, false), cfg.intr.far())?;
            }
        }

        let last_by_steps = matches!(cfg.budget, Budget::Steps(n) if step == n);
        let mut record = StepRecord {
            step,
            sim_time_s: m.sim_time,
            psnr_db: None,
            completeness: None,
            n_surfels: m.map.len(),
            explored_frac: m.census.explored_fraction(&m.voxels),
            loss_c: Some(trace.last.color),
            loss_d: Some(trace.last.depth),
            loss_n: Some(trace.last.normal),
            planner_mode: mode.clone(),
            winner_kind: None,
            path_len_m: None,
        };
        if step % cfg.eval_every == 0 || last_by_steps {
            let s = m.sample(step);
            record.psnr_db = Some(s.psnr_mean);
            record.completeness = Some(s.completeness);
            samples.push(s);
        }

        let rois = low_confidence_rois(&m.map, &m.voxels, m.conf.k_thresh);
        let planned = plan(&pose, &m.voxels, &m.map, &rois, &cfg.intr, &cfg.planner, &mut m.planner);
        let (winner, diag): (CandidateViewpoint, PlanDiagnostics) = match planned {
            Ok(v) => v,
            Err(e @ (Error::NoCandidates | Error::EmptyLattice | Error::NotFree(..))) => {
                records.push(record);
                status = MissionStatus::Starved(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        record.winner_kind = Some(winner.origin.as_str().to_string());
        record.path_len_m = Some(winner.path_length);
        planner_rows.push(PlannerRecord {
            step,
            planner_mode: mode.clone(),
            n_random: diag.sampled_random,
            n_roi_frontier: diag.sampled_frontier,
            n_roi_low_conf: diag.sampled_low_conf,
            n_reachable: diag.reachable,
            u_v: winner.utility.u_v,
            u_g: winner.utility.u_g,
            utility: winner.utility.total,
            score: diag.winner_score,
            path_len_m: winner.path_length,
        });
        records.push(record);

        m.sim_time += cfg.mapping_time_s + cfg.planning_time_s + winner.path_length / cfg.robot_speed;
        if cfg.measure_along_path && winner.path.len() > 2 {
            for cell in &winner.path[1..winner.path.len() - 1] {
                let waypoint = Pose::new(m.voxels.center(*cell), winner.pose.yaw, winner.pose.pitch);
                let idx = m.measure(&waypoint, step)?;
                update_observations(&mut m.log, &m.map, idx, &waypoint, &cfg.intr, cfg.visibility_w_min);
            }
        }
        pose = winner.pose;
    }

    // a time budget can end on a step that was not evaluated
    if samples.last().map(|s| s.step) != Some(step) {
        let s = m.sample(step);
        if let Some(r) = records.last_mut() {
            r.psnr_db = Some(s.psnr_mean);
            r.completeness = Some(s.completeness);
        }
        samples.push(s);
    }

    let report = MissionReport {
        status,
        records,
        samples,
        planner: planner_rows,
        histograms,
        map: m.map,
        voxels: m.voxels,
        poses: m.history.poses().to_vec(),
        sim_time_s: m.sim_time,
    };
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, &report, cfg.dump_voxels)?;
    }
    Ok(report)
}

/// `metrics.csv`, `planner.csv`, `confidence.csv`, `poses.csv`,
/// `surfels.txt` and, optionally, `voxels.txt`.
pub fn write_outputs(dir: &Path, report: &MissionReport, dump_voxels: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for r in &report.records {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("planner.csv"))?;
    for r in &report.planner {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("confidence.csv"))?;
    let mut header = vec!["step".to_string(), "k_max".to_string()];
    header.extend((0..CONFIDENCE_BINS).map(|b| format!("bin_{b:02}")));
    w.write_record(&header)?;
    for (step, k_max, bins) in &report.histograms {
        let mut row = vec![step.to_string(), k_max.to_string()];
        row.extend(bins.iter().map(|b| b.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    write_poses(&dir.join("poses.csv"), &report.poses)?;
    report.map.save(&dir.join("surfels.txt"))?;
    if dump_voxels {
        report.voxels.dump(&dir.join("voxels.txt"))?;
    }
    Ok(())
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct PoseRow {
    x: f64,
    y: f64,
    z: f64,
    yaw: f64,
    pitch: f64,
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in poses {
        w.serialize(PoseRow {
            x: p.position.x,
            y: p.position.y,
            z: p.position.z,
            yaw: p.yaw,
            pitch: p.pitch,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<PoseRow>()
        .map(|row| {
            let row = row?;
            Ok(Pose::new(Vector3::new(row.x, row.y, row.z), row.yaw, row.pitch))
        })
        .collect()
}

/// Final metrics of one mission in a multi-seed comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: String,
    /// Seed, or `mean` / `std` for the per-mode summary rows.
    pub seed: String,
    pub psnr_db: f64,
    pub completeness: f64,
    pub explored_frac: f64,
    pub n_surfels: f64,
    pub sim_time_s: f64,
    pub starved: f64,
}

fn bench_row(mode: PlannerMode, seed: u64, report: &MissionReport) -> BenchRow {
    let s = report.final_sample().expect("missions always evaluate at least once");
    BenchRow {
        mode: mode.to_string(),
        seed: seed.to_string(),
        psnr_db: s.psnr_mean,
        completeness: s.completeness,
        explored_frac: s.explored_frac,
        n_surfels: s.surfel_count as f64,
        sim_time_s: report.sim_time_s,
        starved: matches!(report.status, MissionStatus::Starved(_)) as u8 as f64,
    }
}

/// Sample mean and standard deviation rows over `rows`.
pub fn summarize(mode: &str, rows: &[BenchRow]) -> [BenchRow; 2] {
    let n = rows.len() as f64;
    let cols = |r: &BenchRow| [r.psnr_db, r.completeness, r.explored_frac, r.n_surfels, r.sim_time_s, r.starved];
    let mut mean = [0.0; 6];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(cols(r)) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 6];
    if rows.len() > 1 {
        for r in rows {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(cols(r)) {
                *v += (x - m).powi(2) / (n - 1.0);
            }
        }
    }
    let make = |label: &str, c: [f64; 6]| BenchRow {
        mode: mode.to_string(),
        seed: label.to_string(),
        psnr_db: c[0],
        completeness: c[1],
        explored_frac: c[2],
        n_surfels: c[3],
        sim_time_s: c[4],
        starved: c[5],
    };
    [make("mean", mean), make("std", var.map(f64::sqrt))]
}

/// Runs `base` once per mode and seed. Returns the per-run rows followed by
/// mean and std rows for each mode, plus the reports in run order.
pub fn bench(base: &MissionConfig, modes: &[PlannerMode], seeds: &[u64]) -> Result<(Vec<BenchRow>, Vec<MissionReport>)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut summary = Vec::new();
    for &mode in modes {
        let mut per_mode = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.planner.mode = mode;
            cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("{mode}_seed{seed}")));
            let report = run(&cfg)?;
            per_mode.push(bench_row(mode, seed, &report));
            reports.push(report);
        }
        summary.extend(summarize(mode.as_str(), &per_mode));
        rows.extend(per_mode);
    }
    rows.extend(summary);
    Ok((rows, reports))
}

pub fn write_bench_summary(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
