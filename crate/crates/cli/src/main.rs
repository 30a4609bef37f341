use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use surfelnbv::camera::{CameraIntrinsics, Pose};
use surfelnbv::metrics::{completeness_ratio, Evaluator};
use surfelnbv::mission::{self, Budget, MissionConfig, MissionStatus};
use surfelnbv::planner::PlannerMode;
use surfelnbv::rng::stream;
use surfelnbv::scene::{render_gt, sample_surface_points, sample_test_viewpoints, TestViewConfig};
use surfelnbv::splat::{render, SplatMap};
use surfelnbv::train::gradcheck::{self, GradcheckConfig};
use surfelnbv::train::LossWeights;
use surfelnbv::voxel::VoxelMap;
use surfelnbv::{GroundTruthScene, Vector3};

#[derive(Parser)]
#[command(name = "surfelnbv", version, about = "Active reconstruction with a Gaussian-surfel map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one mission and write its outputs.
    Run(RunArgs),
    /// Evaluate a saved surfel map against held-out views.
    Eval(EvalArgs),
    /// Dump rendered channels at one pose.
    Render(RenderArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare planner modes over several seeds.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Scene file or `builtin:room`.
    #[arg(long, default_value = "builtin:room")]
    scene: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Square image resolution in pixels.
    #[arg(long, default_value_t = 64)]
    res: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "full")]
    mode: PlannerMode,
    /// Planning steps; without it the mission runs for 300 simulated seconds.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    eval_every: usize,
    #[arg(long)]
    dump_views: bool,
    #[arg(long)]
    dump_voxels: bool,
    #[arg(long)]
    measure_along_path: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// `surfels.txt` written by `run`.
    #[arg(long)]
    map: PathBuf,
    /// `poses.csv` written by `run`; completeness fuses depth from these
    /// poses, or from the test views when absent.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    test_views: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    /// Surfel map to render; the ground-truth capture is always written.
    #[arg(long)]
    map: Option<PathBuf>,
    /// `x,y,z,yaw_deg,pitch_deg`; defaults to the scene-center start pose.
    #[arg(long, allow_hyphen_values = true)]
    pose: Option<String>,
    #[arg(long, default_value = "out/views")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    scenes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated planner modes.
    #[arg(long, default_value = "full,no_roi,fbe")]
    modes: String,
    /// Inclusive range `a..b` or comma-separated list.
    #[arg(long, default_value = "1..5")]
    seeds: String,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value = "out/bench")]
    out: PathBuf,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().context("seed range start")?;
        let b: u64 = b.trim().parse().context("seed range end")?;
        if b < a {
            bail!("empty seed range {s}");
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse::<u64>().with_context(|| format!("seed '{t}'"))).collect()
}

fn parse_modes(s: &str) -> Result<Vec<PlannerMode>> {
    s.split(',').map(|t| t.trim().parse::<PlannerMode>().map_err(Into::into)).collect()
}

fn parse_pose(s: &str) -> Result<Pose> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>().context("pose")?;
    if v.len() != 5 {
        bail!("pose needs 5 values x,y,z,yaw_deg,pitch_deg");
    }
    Ok(Pose::new(Vector3::new(v[0], v[1], v[2]), v[3].to_radians(), v[4].to_radians()))
}

fn intrinsics(res: usize) -> Result<CameraIntrinsics> {
    let intr = CameraIntrinsics::square(60.0, res);
    intr.validate()?;
    Ok(intr)
}

fn base_config(common: &Common) -> Result<MissionConfig> {
    Ok(MissionConfig {
        scene: common.scene.clone(),
        seed: common.seed,
        intr: intrinsics(common.res)?,
        ..MissionConfig::default()
    })
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let mut cfg = base_config(&args.common)?;
    cfg.planner.mode = args.mode;
    cfg.budget = args.steps.map_or(Budget::SimTime(300.0), Budget::Steps);
    cfg.eval_every = args.eval_every;
    cfg.out_dir = Some(args.out.clone());
    cfg.dump_views = args.dump_views;
    cfg.dump_voxels = args.dump_voxels;
    cfg.measure_along_path = args.measure_along_path;
    let report = mission::run(&cfg)?;
    let last = report.final_sample().expect("at least one evaluation");
    println!(
        "steps {} sim_time {:.1}s surfels {} psnr {:.2} dB completeness {:.4} explored {:.4}",
        report.records.len() - 1,
        report.sim_time_s,
        last.surfel_count,
        last.psnr_mean,
        last.completeness,
        last.explored_frac
    );
    println!("outputs in {}", args.out.display());
    Ok(match report.status {
        MissionStatus::Completed => ExitCode::SUCCESS,
        MissionStatus::Starved(why) => {
            eprintln!("mission stopped early: {why}");
            ExitCode::from(2)
        }
    })
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    let cfg = base_config(&args.common)?;
    let scene = GroundTruthScene::load(&cfg.scene)?;
    let truth = VoxelMap::from_ground_truth(&scene, cfg.voxel_size);
    let map = SplatMap::load(&args.map)?;
    let mut rng = stream(cfg.seed, "eval");
    let test = sample_test_viewpoints(&scene, &truth, args.test_views, &TestViewConfig::default(), &mut rng)?;
    let surface: Vec<_> = sample_surface_points(&scene, cfg.n_surface_points, &mut rng)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let poses = match &args.poses {
        Some(p) => mission::read_poses(p)?,
        None => test.clone(),
    };
    let ev = Evaluator::new(&scene, test, surface, cfg.completeness_threshold, cfg.intr);
    let psnr = ev.mean_psnr(&map);
    let completeness = completeness_ratio(&map, &poses, &cfg.intr, &ev.gt_surface, ev.threshold);
    println!("surfels {} psnr {psnr:.3} dB completeness {completeness:.4}", map.len());
    Ok(ExitCode::SUCCESS)
}

fn render_cmd(args: RenderArgs) -> Result<ExitCode> {
    let cfg = base_config(&args.common)?;
    let scene = GroundTruthScene::load(&cfg.scene)?;
    let pose = match &args.pose {
        Some(p) => parse_pose(p)?,
        None => mission::initial_pose(&scene, &VoxelMap::from_ground_truth(&scene, cfg.voxel_size))?,
    };
    std::fs::create_dir_all(&args.out)?;
    let gt = render_gt(&scene, &pose, &cfg.intr, 0.0, &mut stream(cfg.seed, "sensor"), 0);
    surfelnbv::image::write_ppm(&args.out.join("gt_color.ppm"), &gt.rgb)?;
    surfelnbv::image::write_pgm(&args.out.join("gt_depth.pgm"), &gt.depth, cfg.intr.far())?;
    if let Some(path) = &args.map {
        let map = SplatMap::load(path)?;
        mission::write_views(&args.out, "map", &render(&map, &pose, &cfg.intr, false), cfg.intr.far())?;
    }
    println!("wrote views to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradcheckConfig {
        scenes: args.scenes,
        seed: args.seed,
        h: args.h,
        ..GradcheckConfig::default()
    };
    let r = gradcheck::run(&cfg, &LossWeights::default());
    println!(
        "checked {} excluded {} ({:.2}%) negligible {} max_rel_err {:.3e}",
        r.checked,
        r.excluded,
        100.0 * r.excluded_fraction(),
        r.negligible,
        r.max_rel_err
    );
    for f in &r.failures {
        println!(
            "FAIL scene {} surfel {} {}: analytic {:.6e} numeric {:.6e} rel {:.3e}",
            f.scene, f.surfel, f.param, f.analytic, f.numeric, f.rel_err
        );
    }
    Ok(if r.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn bench(args: BenchArgs) -> Result<ExitCode> {
    let mut cfg = base_config(&args.common)?;
    cfg.budget = Budget::Steps(args.steps);
    cfg.eval_every = args.steps.max(1);
    cfg.out_dir = Some(args.out.clone());
    let modes = parse_modes(&args.modes)?;
    let seeds = parse_seeds(&args.seeds)?;
    let (rows, _) = mission::bench(&cfg, &modes, &seeds)?;
    std::fs::create_dir_all(&args.out)?;
    mission::write_bench_summary(&args.out.join("bench_summary.csv"), &rows)?;
    println!("{:<12}{:>6}{:>10}{:>14}{:>10}{:>10}", "mode", "seed", "psnr_db", "completeness", "explored", "surfels");
    for r in &rows {
        println!(
            "{:<12}{:>6}{:>10.3}{:>14.4}{:>10.4}{:>10.0}",
            r.mode, r.seed, r.psnr_db, r.completeness, r.explored_frac, r.n_surfels
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Bench(a) => bench(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
