//! Shared fixtures for the pipeline benchmarks.

use surfelnbv::metrics::backproject;
use surfelnbv::mission::initial_pose;
use surfelnbv::rng::stream;
use surfelnbv::scene::render_gt;
use surfelnbv::splat::{densify_mask, render, spawn, DensifyThresholds, SpawnConfig};
use surfelnbv::train::normal_from_depth;
use surfelnbv::{CameraIntrinsics, GroundTruthScene, Pose, RgbdFrame, SplatMap, VoxelMap};

pub const VOXEL_SIZE: f64 = 0.2;

/// One captured frame of the built-in room with the map and grid it seeds.
pub struct Fixture {
    pub intr: CameraIntrinsics,
    pub pose: Pose,
    pub frame: RgbdFrame,
    pub map: SplatMap,
    pub voxels: VoxelMap,
    pub truth: VoxelMap,
}

impl Fixture {
    pub fn room(res: usize) -> Self {
        let intr = CameraIntrinsics::square(60.0, res);
        let scene = GroundTruthScene::builtin_room();
        let truth = VoxelMap::from_ground_truth(&scene, VOXEL_SIZE);
        let pose = initial_pose(&scene, &truth).expect("room has free space");
        let frame = render_gt(&scene, &pose, &intr, 0.0, &mut stream(1, "sensor"), 0);
        let mut voxels = VoxelMap::for_bounds(&scene.bounds, VOXEL_SIZE);
        voxels
            .integrate_point_cloud(&pose.position, &backproject(&frame.depth, &pose, &intr, 1))
            .expect("start pose inside the grid");
        let mut map = SplatMap::new();
        let mask = densify_mask(&render(&map, &pose, &intr, false), &frame, &DensifyThresholds::default());
        let normals = normal_from_depth(&frame.depth, &intr);
        spawn(&mut map, &frame, &mask, &normals, &intr, &SpawnConfig::default(), 0, &mut stream(1, "training"));
        Self { intr, pose, frame, map, voxels, truth }
    }
}
