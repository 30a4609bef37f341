//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! terminal. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 7`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use surfelnbv::confidence::confidence;
use surfelnbv::metrics::psnr;
use surfelnbv::mission::{self, Budget, MissionConfig, MissionReport};
use surfelnbv::planner::{astar, select, PlannerMode};
use surfelnbv::rng::stream;
use surfelnbv::scene::{render_gt, Aabb, Primitive};
use surfelnbv::splat::{densify_mask, quat_from_normal, render, spawn, DensifyThresholds, RenderedViews, SpawnConfig};
use surfelnbv::train::gradcheck::{self, GradcheckConfig};
use surfelnbv::train::{batch_gradients, normal_from_depth, LossWeights, Optimizer, TrainConfig};
use surfelnbv::{CameraIntrinsics, GroundTruthScene, ImageBuf, Pose, RgbdFrame, SplatMap, Surfel, VoxelMap, VoxelState};

use common::*;

const COMPOSITE_TOL: f64 = 1e-12;
const CONFIDENCE_TOL: f64 = 1e-12;
const CONVERGENCE_LOSS_RATIO: f64 = 0.2;
const CONVERGENCE_PSNR_GAIN_DB: f64 = 8.0;
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ABLATION_STEPS: usize = 40;
const COVERAGE_MIN: f64 = 0.9;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn compositing_oracle() -> Verdict {
    let t0 = Instant::now();
    let intr = CameraIntrinsics::square(60.0, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut covered = 0;
    for _ in 0..200 {
        let pose = Pose::new(
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0)),
            rng.random_range(-3.0..3.0),
            rng.random_range(-0.6..0.6),
        );
        let mut map = random_view_map(&pose, &intr, 10, &mut rng);
        for s in map.surfels.iter_mut() {
            s.confidence = rng.random();
        }
        let fast = render(&map, &pose, &intr, false);
        let slow = naive_render(&map, &pose, &intr);
        for (i, p) in slow.iter().enumerate() {
            covered += (p.opacity > 0.01) as usize;
            let errs = [
                (fast.color.data[i] - p.color).amax(),
                (fast.depth.data[i] - p.depth).abs(),
                (fast.normal.data[i] - p.normal).amax(),
                (fast.opacity.data[i] - p.opacity).abs(),
                (fast.confidence.data[i] - p.confidence).abs(),
            ];
            worst = errs.into_iter().fold(worst, f64::max);
        }
    }
    let dt = t0.elapsed();
    verdict(
        worst <= COMPOSITE_TOL && within(dt, 10.0),
        format!(
            "200 configs, {covered}/{} pixels covered, max abs err {worst:.2e} (tol {COMPOSITE_TOL:.0e}), {:.2}s",
            200 * intr.pixel_count(),
            dt.as_secs_f64()
        ),
    )
}

fn gradient_check() -> Verdict {
    let t0 = Instant::now();
    let cfg = GradcheckConfig::default();
    let r = gradcheck::run(&cfg, &LossWeights::default());
    let dt = t0.elapsed();
    verdict(
        r.passed() && within(dt, 60.0),
        format!(
            "{} scenes, h {:.0e}: {} coords checked, {} failures, max rel err {:.2e}, {} excluded at kinks, {:.1}s",
            cfg.scenes,
            cfg.h,
            r.checked,
            r.failures.len(),
            r.max_rel_err,
            r.excluded,
            dt.as_secs_f64()
        ),
    )
}

fn confidence_values() -> Verdict {
    let d_far = 4.0;
    let surfel = Surfel::new(Vector3::zeros(), quat_from_normal(&Vector3::z()), Vector2::repeat(0.1), Vector3::zeros(), 0.5);
    let at = |z: f64| Pose::new(Vector3::new(0.0, 0.0, z), 0.0, 0.0);
    let empty = confidence(&surfel, &[], &[], d_far);
    let single = confidence(&surfel, &[0], &[at(0.5 * d_far)], d_far);
    let pair = confidence(&surfel, &[0, 1], &[at(0.5 * d_far), at(-0.5 * d_far)], d_far);
    let errs = [empty.abs(), (single - 0.5).abs(), (pair - 0.5 * std::f64::consts::E).abs()];
    let worst = errs.into_iter().fold(0.0, f64::max);
    verdict(
        worst <= CONFIDENCE_TOL,
        format!("k(empty) {empty}, k(single) {single}, k(pair) {pair:.15}, max err {worst:.1e}"),
    )
}

fn planner_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut path_mismatch = 0;
    let mut unreachable = 0;
    for _ in 0..100 {
        let grid = random_obstacle_grid([10, 10, 4], 0.3, &mut rng);
        let free = grid.free_indices();
        let start = free[rng.random_range(0..free.len())];
        let goal = free[rng.random_range(0..free.len())];
        let a = astar(&grid, start, goal).expect("free endpoints").map(|p| p.length);
        let d = dijkstra_length(&grid, start, goal);
        unreachable += d.is_none() as usize;
        path_mismatch += (a != d) as usize;
    }

    let mut select_mismatch = 0;
    for trial in 0..100 {
        let n = rng.random_range(1..40);
        let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
        let mut l: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        match trial % 4 {
            // all-negative utilities exercise the shift
            1 => u.iter_mut().for_each(|x| *x = -x.abs() - 0.1),
            // zero normalizers
            2 => l.iter_mut().for_each(|x| *x = 0.0),
            // exact ties resolve to the lowest index
            3 => {
                let k = n / 2;
                u[n - 1] = u[k];
                l[n - 1] = l[k];
            }
            _ => {}
        }
        let (best, _) = select(&u, &l, 0.5).expect("non-empty");
        select_mismatch += (best != exhaustive_winner(&u, &l, 0.5)) as usize;
    }

    let mut frontier_mismatch = 0;
    for _ in 0..50 {
        let mut grid = VoxelMap::new(Vector3::zeros(), 0.2, [8, 7, 5]);
        for lin in 0..grid.len() {
            let state = match rng.random_range(0..3) {
                0 => VoxelState::Unknown,
                1 => VoxelState::Free,
                _ => VoxelState::Occupied,
            };
            grid.set_state(grid.unlinear(lin), state);
        }
        let fast: std::collections::BTreeSet<_> = grid.frontiers().into_iter().map(|r| r.index).collect();
        frontier_mismatch += (fast != brute_force_frontiers(&grid)) as usize;
    }

    verdict(
        path_mismatch == 0 && select_mismatch == 0 && frontier_mismatch == 0,
        format!(
            "A* vs BFS {path_mismatch}/100 mismatches ({unreachable} unreachable pairs); \
             winner vs exhaustive {select_mismatch}/100; frontiers vs scan {frontier_mismatch}/50"
        ),
    )
}

fn random_small_scene(rng: &mut impl Rng) -> GroundTruthScene {
    let bounds = Aabb::new(Vector3::zeros(), Vector3::new(3.0, 3.0, 2.0));
    loop {
        let n = rng.random_range(2..6);
        let prims = (0..n)
            .map(|_| {
                let size = Vector3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..1.2));
                let min = Vector3::new(
                    rng.random_range(0.0..3.0 - size.x),
                    rng.random_range(0.0..3.0 - size.y),
                    rng.random_range(0.0..2.0 - size.z),
                );
                Primitive::Box { min, max: min + size, rgb: Vector3::new(rng.random(), rng.random(), rng.random()) }
            })
            .collect();
        if let Ok(scene) = GroundTruthScene::new(bounds, prims) {
            return scene;
        }
    }
}

fn visibility_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let intr = CameraIntrinsics::square(60.0, 32);
    let mut mismatches = 0;
    let mut total_visible = 0;
    for _ in 0..20 {
        let scene = random_small_scene(&mut rng);
        let truth = VoxelMap::from_ground_truth(&scene, 0.2);
        let free = truth.free_indices();
        let pose = Pose::new(
            truth.center(free[rng.random_range(0..free.len())]),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(-0.5..0.5),
        );
        let mut voxels = VoxelMap::for_bounds(&scene.bounds, 0.2);
        for lin in 0..voxels.len() {
            if rng.random_bool(0.4) {
                voxels.set_state(voxels.unlinear(lin), VoxelState::Free);
            }
        }
        let frame = render_gt(&scene, &pose, &intr, 0.0, &mut stream(1, "sensor"), 0);
        let fast = voxels.count_unexplored_visible(&pose, &frame.depth, &intr);
        let slow = visible_unknown_by_ray_cast(&voxels, &scene, &pose, &intr);
        total_visible += slow;
        mismatches += (fast != slow) as usize;
    }
    verdict(
        mismatches == 0,
        format!("20 scenes, {mismatches} mismatches, {total_visible} visible unknown voxels in total"),
    )
}

fn densify_truth_table() -> Verdict {
    let th = DensifyThresholds::default();
    let pass = th.opacity == 0.5 && th.color == 0.5 && th.lambda == 0.05;
    let (w, h) = (8, 1);
    let measured = 2.0;
    let mut rendered = RenderedViews {
        color: ImageBuf::filled(w, h, Vector3::zeros()),
        depth: ImageBuf::filled(w, h, measured),
        normal: ImageBuf::filled(w, h, Vector3::zeros()),
        opacity: ImageBuf::filled(w, h, 0.9),
        confidence: ImageBuf::filled(w, h, 0.0),
        contributors: None,
    };
    let frame = RgbdFrame {
        rgb: ImageBuf::filled(w, h, Vector3::zeros()),
        depth: ImageBuf::filled(w, h, measured),
        pose: Pose::new(Vector3::zeros(), 0.0, 0.0),
        frame_index: 0,
    };
    let mut expected = Vec::new();
    for combo in 0..8usize {
        let (thin, wrong_color, behind) = (combo & 1 != 0, combo & 2 != 0, combo & 4 != 0);
        // each clause is pushed just past, or kept just inside, its threshold
        rendered.opacity.data[combo] = if thin { 0.49 } else { 0.51 };
        rendered.color.data[combo] = Vector3::repeat(if wrong_color { 0.51 } else { 0.49 });
        rendered.depth.data[combo] = measured * (1.0 + if behind { 0.051 } else { 0.049 });
        expected.push(thin || wrong_color || behind);
    }
    let mask = densify_mask(&rendered, &frame, &th);
    let ok = mask.data == expected;
    verdict(pass && ok, format!("8 clause combinations, mask {:?}", mask.data))
}

/// A back wall, a floor and three boxes in front of a fixed camera.
fn three_box_scene() -> GroundTruthScene {
    let v = Vector3::new;
    let tri = |a, b, c, rgb| Primitive::Triangle { vertices: [a, b, c], rgb };
    let wall = v(0.85, 0.8, 0.7);
    let floor = v(0.45, 0.4, 0.35);
    let prims = vec![
        tri(v(4.0, -3.0, 0.0), v(4.0, 3.0, 0.0), v(4.0, 3.0, 3.0), wall),
        tri(v(4.0, -3.0, 0.0), v(4.0, 3.0, 3.0), v(4.0, -3.0, 3.0), wall),
        tri(v(0.0, -3.0, 0.0), v(4.0, -3.0, 0.0), v(4.0, 3.0, 0.0), floor),
        tri(v(0.0, -3.0, 0.0), v(4.0, 3.0, 0.0), v(0.0, 3.0, 0.0), floor),
        Primitive::Box { min: v(2.0, -1.2, 0.0), max: v(2.6, -0.6, 0.8), rgb: v(0.8, 0.2, 0.2) },
        Primitive::Box { min: v(2.6, -0.2, 0.0), max: v(3.2, 0.4, 1.2), rgb: v(0.2, 0.6, 0.3) },
        Primitive::Box { min: v(1.8, 0.7, 0.0), max: v(2.4, 1.3, 0.5), rgb: v(0.2, 0.3, 0.8) },
    ];
    GroundTruthScene::new(Aabb::new(v(0.0, -3.0, 0.0), v(4.0, 3.0, 3.0)), prims).expect("valid scene")
}

fn convergence() -> Verdict {
    let t0 = Instant::now();
    let intr = CameraIntrinsics::square(60.0, 64);
    let scene = three_box_scene();
    let pose = Pose::new(Vector3::new(0.2, 0.0, 1.0), 0.0, -0.25);
    let frame = render_gt(&scene, &pose, &intr, 0.0, &mut stream(3, "sensor"), 0);
    let mut map = SplatMap::new();
    let mask = densify_mask(&render(&map, &pose, &intr, false), &frame, &DensifyThresholds::default());
    let normals = normal_from_depth(&frame.depth, &intr);
    spawn(&mut map, &frame, &mask, &normals, &intr, &SpawnConfig::default(), 0, &mut stream(3, "training"));
    let psnr0 = psnr(&render(&map, &pose, &intr, false).color, &frame.rgb);
    let cfg = TrainConfig::default();
    let frames = [frame];
    let mut opt = Optimizer::new();
    let mut first = None;
    for _ in 0..200 {
        let (parts, grads) = batch_gradients(&map, &frames, &[0], &intr, &cfg.weights);
        first.get_or_insert(parts.total);
        opt.step(&mut map, &grads, &cfg);
    }
    let (end, _) = batch_gradients(&map, &frames, &[0], &intr, &cfg.weights);
    let first = first.expect("ran iterations");
    let psnr1 = psnr(&render(&map, &pose, &intr, false).color, &frames[0].rgb);
    let ratio = end.total / first;
    let dt = t0.elapsed();
    verdict(
        ratio < CONVERGENCE_LOSS_RATIO && psnr1 - psnr0 >= CONVERGENCE_PSNR_GAIN_DB && within(dt, 120.0),
        format!(
            "{} surfels, loss {first:.4} -> {:.4} ({:.1}%), PSNR {psnr0:.2} -> {psnr1:.2} dB (+{:.2}), {:.1}s",
            map.len(),
            end.total,
            100.0 * ratio,
            psnr1 - psnr0,
            dt.as_secs_f64()
        ),
    )
}

struct Ablation {
    reports: Vec<(PlannerMode, u64, MissionReport)>,
    elapsed: Duration,
}

fn run_ablation() -> Ablation {
    let t0 = Instant::now();
    let base = MissionConfig {
        intr: CameraIntrinsics::square(60.0, 64),
        budget: Budget::Steps(ABLATION_STEPS),
        eval_every: ABLATION_STEPS,
        ..MissionConfig::default()
    };
    let modes = [PlannerMode::Full, PlannerMode::NoRoi, PlannerMode::Fbe];
    let (_, reports) = mission::bench(&base, &modes, &ABLATION_SEEDS).expect("missions run");
    let tags = modes.iter().flat_map(|m| ABLATION_SEEDS.iter().map(move |s| (*m, *s)));
    Ablation {
        reports: tags.zip(reports).map(|((m, s), r)| (m, s, r)).collect(),
        elapsed: t0.elapsed(),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn ablation_ordering(a: &Ablation) -> Verdict {
    let stats = |mode: PlannerMode, f: fn(&MissionReport) -> f64| {
        let xs: Vec<f64> = a.reports.iter().filter(|(m, _, _)| *m == mode).map(|(_, _, r)| f(r)).collect();
        mean_std(&xs)
    };
    let completeness = |r: &MissionReport| r.final_sample().expect("evaluated").completeness;
    let psnr = |r: &MissionReport| r.final_sample().expect("evaluated").psnr_mean;
    let (c_full, sd_full) = stats(PlannerMode::Full, completeness);
    let (c_noroi, sd_noroi) = stats(PlannerMode::NoRoi, completeness);
    let (c_fbe, _) = stats(PlannerMode::Fbe, completeness);
    let (p_full, _) = stats(PlannerMode::Full, psnr);
    let (p_noroi, _) = stats(PlannerMode::NoRoi, psnr);
    let (p_fbe, _) = stats(PlannerMode::Fbe, psnr);
    let pass = c_full >= c_noroi
        && c_full >= c_fbe
        && p_full >= p_noroi
        && p_full >= p_fbe
        && sd_full <= sd_noroi
        && within(a.elapsed, 1800.0);
    verdict(
        pass,
        format!(
            "completeness full {c_full:.4}±{sd_full:.4} no_roi {c_noroi:.4}±{sd_noroi:.4} fbe {c_fbe:.4}; \
             PSNR full {p_full:.2} no_roi {p_noroi:.2} fbe {p_fbe:.2}; {:.0}s",
            a.elapsed.as_secs_f64()
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let run = |sub: &str| {
        let cfg = MissionConfig {
            budget: Budget::Steps(8),
            eval_every: 4,
            seed: 17,
            out_dir: Some(dir.path().join(sub)),
            ..MissionConfig::default()
        };
        mission::run(&cfg).expect("mission runs");
        std::fs::read(dir.path().join(sub).join("metrics.csv")).expect("metrics.csv written")
    };
    let (a, b) = (run("a"), run("b"));
    verdict(a == b && !a.is_empty(), format!("two 8-step runs, metrics.csv {} bytes, identical: {}", a.len(), a == b))
}

fn coverage(a: &Ablation) -> Verdict {
    let non_monotone = a
        .reports
        .iter()
        .filter(|(_, _, r)| r.records.windows(2).any(|w| w[1].explored_frac < w[0].explored_frac))
        .count();
    let finals: Vec<f64> = a
        .reports
        .iter()
        .filter(|(m, _, _)| *m == PlannerMode::Full)
        .map(|(_, _, r)| r.records.last().expect("records").explored_frac)
        .collect();
    let lowest = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        non_monotone == 0 && lowest > COVERAGE_MIN,
        format!(
            "{non_monotone}/{} missions non-monotone; full-mode final explored {:?} (min {lowest:.4}, need > {COVERAGE_MIN})",
            a.reports.len(),
            finals.iter().map(|f| (f * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let names = [
        "compositing oracle",
        "gradient check",
        "confidence closed forms",
        "planner oracles",
        "voxel visibility oracle",
        "densification truth table",
        "training convergence",
        "mission ablation ordering",
        "determinism",
        "coverage",
    ];
    let ablation = (wanted(8) || wanted(10)).then(run_ablation);
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let v = match n {
            1 => compositing_oracle(),
            2 => gradient_check(),
            3 => confidence_values(),
            4 => planner_oracles(),
            5 => visibility_oracle(),
            6 => densify_truth_table(),
            7 => convergence(),
            8 => ablation_ordering(ablation.as_ref().expect("ablation ran")),
            9 => determinism(),
            _ => coverage(ablation.as_ref().expect("ablation ran")),
        };
        failed += !v.pass as usize;
        println!("{} [{n:>2}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
