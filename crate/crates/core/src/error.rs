use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("scene has no primitives")]
    EmptyScene,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("no free space to sample from")]
    NoFreeSpace,
    #[error("requested {requested} samples but only {available} free voxels (enable replacement)")]
    NotEnoughFreeVoxels { requested: usize, available: usize },
    #[error("voxel index ({0}, {1}, {2}) out of range")]
    VoxelOutOfRange(i64, i64, i64),
    #[error("voxel ({0}, {1}, {2}) is not free")]
    NotFree(usize, usize, usize),
    #[error("quaternion norm {0} is not unit")]
    NonUnitQuaternion(f64),
    #[error("planning lattice is empty")]
    EmptyLattice,
    #[error("no candidate viewpoints to select from")]
    NoCandidates,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] ::image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
